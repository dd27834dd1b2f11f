// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <unistd.h>

#include "svr/cli.hpp"

using namespace svr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok && pass) {
            pass = false;
            detail = what;
        }
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

FusedMask block_mask(std::size_t H, std::size_t W, std::size_t x0, std::size_t x1) {
    FusedMask m{Tensor({H, W})};
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = x0; x < x1; ++x) m.values.at(y, x) = 1.f;
    return m;
}

void expect_stochastic(Outcome& o, const auto& a, const std::string& what) {
    const std::size_t n = a.shape().back();
    for (std::size_t r = 0; r < a.size() / n; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += a[r * n + j];
        o.require(std::abs(s - 1.0) <= 1e-6, what + " row sums to " + fmt(s));
    }
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
    Outcome o;
    const auto rep = run_gradcheck_suite(0, 3);
    double worst = 0;
    for (const auto& c : rep.cases) {
        o.require(c.passed, c.name + " failed (max rel err " + fmt(c.worst.max_rel_error) + ")");
        o.require(c.shapes >= 3, c.name + " ran on fewer than 3 shapes");
        worst = std::max(worst, c.worst.max_rel_error);
    }
    o.require(rep.seconds < 120, "runtime " + fmt(rep.seconds) + " s");
    if (o.pass)
        o.detail = std::to_string(rep.cases.size()) + " cases, worst rel err " + fmt(worst) + ", " +
                   fmt(rep.seconds) + " s";
    return o;
}

Outcome warp_identities() {
    Outcome o;
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t H = 3 + rng.next() % 10, W = 4 + rng.next() % 30;
        const auto f = rng.uniform_tensor<float>({3, H, W}, 0, 1);
        const auto g = warp(f, shift_map(mapping_from_mask(uniform_mask(H, W), {.target_ratio = 1.0})));
        o.require(g.shape() == f.shape() && g.vec() == f.vec(), "ratio 1 warp is not the identity");
    }
    const std::size_t W = 40, H = 5;
    Tensor ramp({3, H, W});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) ramp.at(c, y, x) = 0.1f + 0.02f * float(x) + 0.05f * float(c);
    const auto g = warp(ramp, shift_map(mapping_from_mask(uniform_mask(H, W), {.target_ratio = 0.5})));
    o.require(g.shape() == (Shape{3, H, W / 2}), "half width shape " + shape_string(g.shape()));
    double worst = 0;
    for (std::size_t c = 0; c < 3 && o.pass; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t u = 0; u < W / 2; ++u) {
                // mean of source columns 2u and 2u+1
                const double expect = 0.1 + 0.02 * (2.0 * u + 0.5) + 0.05 * c;
                worst = std::max(worst, std::abs(g.at(c, y, u) - expect));
            }
    o.require(worst <= 1e-5, "decimation error " + fmt(worst));
    if (o.pass) o.detail = "identity exact, decimation max err " + fmt(worst);
    return o;
}

Outcome mapping_exactness() {
    Outcome o;
    Rng rng(3);
    double worst = 0;
    for (double ratio : {0.5, 0.7, 0.8, 1.5})
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t H = 2 + rng.next() % 10, W = 8 + rng.next() % 60;
            FusedMask mask{Tensor({H, W})};
            for (auto& v : mask.values.data()) v = rng.uniform() < 0.4 ? float(rng.uniform()) : 0.f;
            const auto m = mapping_from_mask(mask, {.target_ratio = ratio});
            const double Wt = std::floor(ratio * double(W));
            worst = std::max(worst, std::abs(m.tgt[W] - Wt));
            for (std::size_t x = 0; x < W; ++x) o.require(m.tgt[x + 1] > m.tgt[x], "tgt not strictly increasing");
        }
    o.require(worst <= 1e-4, "endpoint error " + fmt(worst));
    if (o.pass) o.detail = "400 masks, endpoint max err " + fmt(worst);
    return o;
}

Outcome salient_protection() {
    Outcome o;
    Rng rng(4);
    double min_gap = 1e300;
    for (double ratio : {0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95})
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t W = 48, len = 3 + rng.next() % 16, x0 = rng.next() % (W - len);
            const auto m = mapping_from_mask(block_mask(8, W, x0, x0 + len), {.target_ratio = ratio});
            double sal = 0, non = 0;
            for (std::size_t x = 0; x < W; ++x) (x >= x0 && x < x0 + len ? sal : non) += m.width_of(x);
            const double gap = sal / double(len) - non / double(W - len);
            min_gap = std::min(min_gap, gap);
            o.require(gap > 0, "ratio " + fmt(ratio) + " block at " + std::to_string(x0) + " not protected");
        }
    if (o.pass) o.detail = "140 placements, min width gap " + fmt(min_gap);
    return o;
}

// Permute spatial positions of [n, s, d]: out[:, i] = in[:, perm[i]].
TensorD permute_spatial(const TensorD& x, const std::vector<std::size_t>& perm) {
    TensorD out(x.shape());
    for (std::size_t a = 0; a < x.dim(0); ++a)
        for (std::size_t i = 0; i < x.dim(1); ++i)
            for (std::size_t k = 0; k < x.dim(2); ++k) out.at(a, i, k) = x.at(a, perm[i], k);
    return out;
}

Outcome attention_properties() {
    Outcome o;
    SVTConfig c;
    c.t = 1;
    c.h = c.w = 2;
    c.d = 6;
    c.layers = 2;
    c.heads = 3;
    c.mlp_dim = 8;
    {
        StereoVideoTransformer<double> m(c, 6, 8, 5);
        Rng rng(5);
        Tape<double> tape;
        AttentionTrace<double> trace;
        m.forward(tape, tape.constant(rng.uniform_tensor<double>({4, 3, 6, 8}, 0, 1)),
                  tape.constant(rng.uniform_tensor<double>({6, 8}, 0, 1)), 2, &trace);
        o.require(trace.heads.size() == 6, "expected 6 traced heads");
        for (const auto& h : trace.heads) expect_stochastic(o, h.weights, "svt");
    }
    {
        ParallaxAttention<double> pam(4, 6);
        Rng rng(6);
        Tape<double> tape;
        auto att = pam.attention(tape, tape.constant(rng.uniform_tensor<double>({4, 5, 9}, -2, 2)),
                                 tape.constant(rng.uniform_tensor<double>({4, 5, 9}, -2, 2)));
        expect_stochastic(o, att.right_to_left.value(), "pam r->l");
        expect_stochastic(o, att.left_to_right.value(), "pam l->r");
    }
    c.layers = 1;
    double equiv = 0;
    {
        // Locality: query (t=0, s=0) ignores tokens outside its head's group.
        StereoVideoTransformer<double> m(c, 4, 4, 7);
        Rng rng(7);
        const auto x0 = rng.uniform_tensor<double>({3, 4, c.d}, -1, 1);
        const auto d0 = rng.uniform_tensor<double>({1, 4, c.d}, -1, 1);
        auto run = [&](const TensorD& x, const TensorD& d) {
            Tape<double> tape;
            AttentionTrace<double> tr;
            m.attention(tape, 0, tape.constant(x), tape.constant(d), &tr);
            return tr;
        };
        const auto ref = run(x0, d0);
        auto x1 = x0;
        auto d1 = d0;
        for (std::size_t k = 0; k < c.d; ++k) {
            x1.at(1, 3, k) += 1.0;
            d1.at(0, 2, k) += 1.0;
        }
        const auto moved = run(x1, d1);
        for (std::size_t h = 0; h < 3; ++h)
            for (std::size_t k = 0; k < c.d / 3; ++k)
                o.require(moved.heads[h].output.at(0, 0, k) == ref.heads[h].output.at(0, 0, k),
                          std::string("locality broken for ") + axis_name(ref.heads[h].axis) + " head");
    }
    {
        c.layers = 2;
        StereoVideoTransformer<double> m(c, 4, 6, 8);
        Rng rng(8);
        const auto x = rng.uniform_tensor<double>({2, 6, c.d}, -1, 1);
        const auto d = rng.uniform_tensor<double>({1, 6, c.d}, -1, 1);
        const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
        auto run = [&](const TensorD& xx, const TensorD& dd) {
            Tape<double> tape;
            TokenGrid<double> g{tape.constant(xx), tape.constant(dd), {2, 2, 3}};
            return m.encode(tape, g).tokens.value();
        };
        const auto expect = permute_spatial(run(x, d), perm);
        const auto got = run(permute_spatial(x, perm), permute_spatial(d, perm));
        double& worst = equiv;
        for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - expect[i]));
        // reordered key sums differ only by rounding
        o.require(worst <= 1e-12, "permutation equivariance off by " + fmt(worst));
    }
    if (o.pass) o.detail = "rows stochastic, locality bitwise, equivariance err " + fmt(equiv);
    return o;
}

Outcome token_count_check() {
    Outcome o;
    SVTConfig c;
    c.t = 2;
    c.h = c.w = 16;
    const auto n = token_counts(c, 4, 224, 224);
    o.require(n == TokenCounts{2, 14, 14},
              "got (" + std::to_string(n.n_t) + ", " + std::to_string(n.n_h) + ", " + std::to_string(n.n_w) + ")");
    if (o.pass) o.detail = "(2, 14, 14)";
    return o;
}

Outcome dwt_checks() {
    Outcome o;
    Rng rng(9);
    double pr = 0, pv = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t C = 1 + rng.next() % 3, H = 2 * (1 + rng.next() % 10), W = 2 * (1 + rng.next() % 10);
        const auto x = rng.uniform_tensor<double>({C, H, W}, -1, 1);
        Tape<double> tape;
        auto s = dwt2(tape.constant(x));
        const auto back = idwt2(s).value();
        double ex = 0, es = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            pr = std::max(pr, std::abs(back[i] - x[i]));
            ex += x[i] * x[i];
            es += s.value()[i] * s.value()[i];
        }
        pv = std::max(pv, std::abs(es - ex) / ex);
    }
    o.require(pr <= 1e-5, "reconstruction error " + fmt(pr));
    o.require(pv <= 1e-4, "Parseval relative error " + fmt(pv));
    const auto a = rng.uniform_tensor<double>({3, 10, 14}, 0, 1), b = rng.uniform_tensor<double>({3, 10, 14}, 0, 1);
    Tape<double> tape;
    const double same =
        dwt_loss(tape.constant(a), tape.constant(b), tape.constant(a), tape.constant(b)).value().item();
    o.require(same == 0, "dwt_loss of identical pairs " + fmt(same));
    if (o.pass) o.detail = "PR err " + fmt(pr) + ", Parseval rel err " + fmt(pv) + ", identical pairs 0";
    return o;
}

Outcome metric_oracles() {
    Outcome o;
    Rng rng(10);
    const auto v = rng.uniform_tensor<float>({3, 12, 17}, 0, 1);
    o.require(bds_frame(v, v) == 0, "bds(V,V) != 0");
    double worst = 0;
    const auto f = rng.uniform_tensor<float>({3, 7, 7}, 0.2, 0.8);
    for (float delta : {0.01f, 0.05f, 0.1f, 0.15f}) {
        Tensor g = f;
        for (auto& x : g.vec()) x += delta;
        worst = std::max(worst, std::abs(bds_frame(f, g) - 2.0 * double(delta) * double(delta)));
    }
    o.require(worst <= 1e-6, "one-patch error " + fmt(worst));
    const auto d = DisparityMap::constant(6, 30, 4.f);
    const auto id = ColumnMapping::uniform(30, 30);
    const auto r0 = ddr({d}, {id}, {id});
    o.require(r0.signed_ratio == 0 && r0.abs_ratio == 0, "ddr identity " + fmt(r0.abs_ratio));
    const auto half = ColumnMapping::uniform(30, 15);
    const auto r1 = ddr({d}, {half}, {half});
    o.require(std::abs(r1.signed_ratio - 0.5) <= 1e-6 && std::abs(r1.abs_ratio - 0.5) <= 1e-6,
              "ddr of halving " + fmt(r1.signed_ratio));
    if (o.pass) o.detail = "one-patch err " + fmt(worst) + ", ddr half " + fmt(r1.signed_ratio);
    return o;
}

std::vector<std::string> training_csv(std::size_t iterations, double* secs) {
    const auto t0 = std::chrono::steady_clock::now();
    RunConfig cfg;
    cfg.synthetic = true;
    cfg.iterations = iterations;
    auto s = make_synthetic_clip();
    TrainingRun run({s.clip}, {s.inputs}, cfg);
    std::vector<std::string> rows{loss_csv_header()};
    for (std::size_t i = 0; i < iterations; ++i) rows.push_back(loss_csv_row(i, run.step()));
    if (secs) *secs = seconds_since(t0);
    return rows;
}

Outcome toy_training() {
    Outcome o;
    const std::size_t N = 200;
    double secs = 0;
    std::vector<std::string> a, b;
    a = training_csv(N, &secs);
    b = training_csv(N, nullptr);
    auto total = [&](std::size_t i) { return std::stod(a[i + 1].substr(a[i + 1].rfind(',') + 1)); };
    double first = 0, last = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        first += total(i) / 5;
        last += total(N - 5 + i) / 5;
    }
    const double drop = 1 - last / first;
    o.require(a == b, "loss CSV differs between identical runs");
    o.require(drop >= 0.30, "loss fell only " + fmt(100 * drop) + "%");
    o.require(secs < 600, "training took " + fmt(secs) + " s");
    if (o.pass)
        o.detail = "first-5 mean " + fmt(first) + " -> last-5 mean " + fmt(last) + " (" + fmt(100 * drop) +
                   "% drop), " + fmt(secs) + " s, CSV bitwise equal";
    return o;
}

Outcome performance_floor() {
    Outcome o;
    Rng rng(11);
    const auto s = rng.uniform_tensor<float>({3, 64, 128}, 0, 1), r = rng.uniform_tensor<float>({3, 64, 128}, 0, 1);
    const auto t0 = std::chrono::steady_clock::now();
    const double v = bds_frame(s, r, {7, 2, 0});
    const double secs = seconds_since(t0);
    o.require(v > 0, "bds of distinct frames is 0");
    o.require(secs < 10, "took " + fmt(secs) + " s");
    if (o.pass) o.detail = fmt(secs) + " s";
    return o;
}

int cli(std::vector<std::string> args, std::ostringstream& log) {
    args.insert(args.begin(), "svr_cli");
    std::vector<const char*> argv;
    for (const auto& s : args) argv.push_back(s.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data(), log, log);
}

Outcome cli_contract() {
    Outcome o;
    const fs::path root = fs::temp_directory_path() / ("svr_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    const fs::path data = root / "data", out = root / "out";
    Rng rng(12);
    const std::size_t H = 24, W = 40;
    for (int t = 0; t < 4; ++t) {
        const std::string id = "scene/" + std::to_string(100 + t);
        for (const char* dir : {"left", "right", "disparity", "saliency_left", "saliency_right"})
            fs::create_directories(data / dir / "scene");
        for (const char* dir : {"boxes_left", "boxes_right"}) fs::create_directories(data / dir / "scene");
        save_rgb((data / "left" / (id + ".png")).string(), rng.uniform_tensor<float>({3, H, W}, 0, 1));
        save_rgb((data / "right" / (id + ".png")).string(), rng.uniform_tensor<float>({3, H, W}, 0, 1));
        save_disparity((data / "disparity" / (id + ".png")).string(), DisparityMap::constant(H, W, 6.f));
        for (const char* view : {"left", "right"}) {
            save_gray((data / (std::string("saliency_") + view) / (id + ".png")).string(), Tensor({H, W}, 1.f));
            std::ofstream(data / (std::string("boxes_") + view) / (id + ".json"))
                << boxes_to_json({DetectionBox{0, 0, double(W), double(H), "frame", 1.0}}).dump();
        }
    }
    const auto ini = root / "run.ini";
    std::ofstream(ini) << "[data]\nroot = " << data.string() << "\nwindow = 4\n";

    std::ostringstream log;
    int rc = cli({"retarget", "--config", ini.string(), "--ratio", "1.0", "--out", out.string()}, log);
    o.require(rc == 0, "retarget exit " + std::to_string(rc) + ": " + log.str());
    const auto report = root / "report.json";
    if (o.pass) {
        rc = cli({"evaluate", "--source", data.string(), "--retargeted", out.string(), "--mappings",
                  (out / "mappings").string(), "--metrics", "bds,ddr", "--out", report.string()},
                 log);
        o.require(rc == 0, "evaluate exit " + std::to_string(rc) + ": " + log.str());
    }
    if (o.pass) {
        std::ifstream is(report);
        const auto j = nlohmann::json::parse(is);
        o.require(j.at("bds").get<double>() == 0, "bds = " + j.at("bds").dump());
        o.require(j.at("ddr_signed").get<double>() == 0 && j.at("ddr_abs").get<double>() == 0,
                  "ddr = " + j.at("ddr_abs").dump());
        if (o.pass) o.detail = "bds = 0, ddr = 0 over " + std::to_string(j.at("per_frame").at("bds").size()) + " frames";
    }
    fs::remove_all(root);
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient suite", gradient_suite},
        {"warp identities", warp_identities},
        {"mapping exactness", mapping_exactness},
        {"salient protection", salient_protection},
        {"attention properties", attention_properties},
        {"token counts", token_count_check},
        {"dwt", dwt_checks},
        {"metric oracles", metric_oracles},
        {"toy training", toy_training},
        {"performance floor", performance_floor},
        {"cli contract", cli_contract},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail
                  << std::endl;
    }
    std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
