#pragma once

#include <stdexcept>
#include <string>

namespace svr {

// Exit codes used by the command-line tool.
enum class ExitCode : int { ok = 0, usage = 1, ingestion = 2, numeric = 3 };

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite loss during training; `term` names the offending loss field.
struct TrainingError : NumericError {
    TrainingError(std::string term_name, const std::string& what)
        : NumericError(what), term(std::move(term_name)) {}
    std::string term;
};

}  // namespace svr
