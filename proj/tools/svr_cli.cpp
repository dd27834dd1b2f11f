#include "svr/cli.hpp"

int main(int argc, char** argv) { return svr::run_cli(argc, argv); }
