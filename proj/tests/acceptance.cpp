// Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gpunet/checkpoint.hpp"
#include "gpunet/cost.hpp"
#include "gpunet/gradcheck.hpp"
#include "gpunet/trainer.hpp"
#include "oracles.hpp"

using namespace gpunet;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds, fixed up front.
constexpr double kReferenceTol = 0.01;      // criterion 1, relative
constexpr double kParamsRatioMin = 4.0;     // criterion 2
constexpr double kFlopsRatioMin = 2.0;      // criterion 2
constexpr double kFlopFraction = 0.3576;    // criterion 2, GPU-Net / U-Net FLOPs
constexpr double kFlopFractionTol = 0.03;   // criterion 2, relative
constexpr double kAbsoluteParamsTol = 0.20; // criterion 2, relative
constexpr double kRatioTol = 0.05;          // criterion 4, relative to s
constexpr double kGradTol32 = 1e-3;         // criterion 5
constexpr double kGradTol64 = 1e-6;         // criterion 5
constexpr double kGradTolModel32 = 1e-2;    // criterion 5
constexpr double kGradSeconds = 300.0;      // criterion 5
constexpr double kJsMin = 0.85;             // criterion 7
constexpr std::size_t kMaxEpochs = 15;      // criterion 7
constexpr double kTrainSeconds = 1800.0;    // criterion 7

const std::vector<std::size_t> kFull{64, 128, 256, 512, 1024};
const std::vector<std::size_t> kToy{8, 16, 32, 64, 128};

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what)
    {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

double rel_diff(double got, double want) { return std::abs(got - want) / std::abs(want); }

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ModelConfig preset(BlockKind kind, const std::vector<std::size_t>& widths, std::size_t in)
{
    switch (kind) {
    case BlockKind::ordinary:
        return ModelConfig::unet(widths, in);
    case BlockKind::ghost:
        return ModelConfig::ghost_unet(widths, in);
    case BlockKind::gp:
        return ModelConfig::gpu_net(widths, in);
    }
    return {};
}

constexpr BlockKind kKinds[] = {BlockKind::ordinary, BlockKind::ghost, BlockKind::gp};

struct Size {
    std::size_t h, w;
    double unet_gflops;
};
constexpr Size kSizes[] = {{192, 256, 49.10}, {256, 256, 65.47}, {96, 96, 9.21}};

void criterion1(Outcome& o)
{
    const auto graph = build_model(ModelConfig::unet());
    for (const auto& s : kSizes) {
        const auto r = model_cost(graph, s.h, s.w);
        const double mp = static_cast<double>(r.total_params) / 1e6;
        const double gf = static_cast<double>(r.total_flops) / 1e9;
        o.detail << " " << s.h << "x" << s.w << ": " << r.total_params << " params (" << mp << " M), "
                 << r.total_flops << " MAC (" << gf << " G);";
        o.require(rel_diff(mp, 34.53) <= kReferenceTol, "params vs 34.53 M");
        o.require(rel_diff(gf, s.unet_gflops) <= kReferenceTol, "FLOPs vs reference at " + std::to_string(s.h));
    }
}

void criterion2(Outcome& o)
{
    const auto unet = build_model(ModelConfig::unet());
    const auto ghost = build_model(ModelConfig::ghost_unet());
    const auto gp = build_model(ModelConfig::gpu_net());
    for (const auto& s : kSizes) {
        const auto u = model_cost(unet, s.h, s.w);
        const auto g = model_cost(gp, s.h, s.w);
        const double pr = static_cast<double>(u.total_params) / static_cast<double>(g.total_params);
        const double fr = static_cast<double>(u.total_flops) / static_cast<double>(g.total_flops);
        const double frac = 1.0 / fr;
        o.detail << " " << s.h << "x" << s.w << ": params ratio " << pr << ", FLOPs ratio " << fr
                 << ", GPU-Net/U-Net FLOPs " << frac << ";";
        o.require(pr > kParamsRatioMin, "params ratio > 4");
        o.require(fr > kFlopsRatioMin, "FLOPs ratio > 2");
        o.require(rel_diff(frac, kFlopFraction) <= kFlopFractionTol, "FLOP fraction vs 0.3576");
    }
    const auto gh = model_cost(ghost, 192, 256).total_params;
    const auto gpn = model_cost(gp, 192, 256).total_params;
    o.detail << " Ghost U-Net " << gh << " params, GPU-Net " << gpn << " params";
    o.require(rel_diff(static_cast<double>(gh) / 1e6, 9.31) <= kAbsoluteParamsTol, "Ghost U-Net vs 9.31 M");
    o.require(rel_diff(static_cast<double>(gpn) / 1e6, 8.27) <= kAbsoluteParamsTol, "GPU-Net vs 8.27 M");
}

void criterion3(Outcome& o)
{
    for (const auto& widths : {kFull, kToy})
        for (auto kind : kKinds) {
            Network<float> net(build_model(preset(kind, widths, 3)));
            const auto analytic = model_cost(net.graph(), 96, 96).total_params;
            const auto built = oracle::instantiated_params(net);
            o.detail << " " << to_string(kind) << "/" << widths[0] << ": " << analytic << " vs " << built << ";";
            o.require(analytic == built, to_string(kind) + " widths " + std::to_string(widths[0]));
        }
}

void criterion4(Outcome& o)
{
    std::size_t violations = 0, checked = 0;
    double worst = 0.0;
    Count worst_c = 0, worst_s = 0;
    bool identical = true;
    for (Count s = 2; s <= 8; ++s)
        for (Count c = 64; c <= 4096; ++c) {
            const auto rp = ratio_params(c, 3, 3, s);
            identical = identical && rp == ratio_flops(c, 3, 3, s);
            const double dev = std::abs(rp.value() - static_cast<double>(s)) / static_cast<double>(s);
            ++checked;
            if (dev > kRatioTol)
                ++violations;
            if (dev > worst) {
                worst = dev;
                worst_c = c;
                worst_s = s;
            }
        }
    // The same ratio measured on built modules rather than the closed form.
    const auto spec = GhostSpec::ghost(worst_c, worst_c * worst_s, worst_s, 3, 3);
    const ConvSpec conv{worst_c, worst_c * worst_s, 3, 1, 1, 1, 1, false};
    const double measured = static_cast<double>(params_conv(conv)) / static_cast<double>(params_gp(spec));
    o.detail << " ratio_params == ratio_flops on all " << checked << " (c, s) pairs: " << (identical ? "yes" : "no")
             << "; pairs with |r - s|/s > 5%: " << violations << "; worst c=" << worst_c << " s=" << worst_s
             << " r=" << ratio_params(worst_c, 3, 3, worst_s).value() << " (built modules " << measured
             << "), deviation " << worst * 100 << "%";
    o.require(identical, "ratio_params != ratio_flops");
    o.require(violations == 0, "ratio within 5% of s");
}

template <typename T>
bool suite_passes(GradScope scope, double tol, const SuiteOptions& opts, Outcome& o, const char* label,
                  bool enforce = true)
{
    bool ok = true;
    double worst = 0.0;
    std::size_t ops = 0;
    for (const auto& r : run_gradcheck_suite<T>(scope, opts)) {
        ++ops;
        worst = std::max(worst, r.worst());
        const bool compared = r.checked() * 2 >= r.checked() + r.skipped();
        ok = ok && r.worst() < tol && compared;
    }
    o.detail << " " << label << ": " << ops << " ops, worst " << worst << (enforce ? "" : " (informational)")
             << ";";
    if (enforce)
        o.require(ok, label);
    return ok;
}

void criterion5(Outcome& o)
{
    const auto t0 = std::chrono::steady_clock::now();
    suite_passes<float>(GradScope::primitives, kGradTol32, {}, o, "primitives f32");
    suite_passes<double>(GradScope::primitives, kGradTol64, {}, o, "primitives f64");
    suite_passes<float>(GradScope::blocks, kGradTol32, {}, o, "blocks f32");
    suite_passes<double>(GradScope::blocks, kGradTol64, {}, o, "blocks f64");
    suite_passes<float>(GradScope::model, kGradTolModel32, {}, o, "model f32");
    suite_passes<double>(GradScope::model, kGradTol64, {}, o, "model f64");
    const double secs = seconds_since(t0);
    SuiteOptions same;
    same.same_precision_differences = true;
    suite_passes<float>(GradScope::model, kGradTolModel32, same, o, "model f32 with f32 differences", false);
    o.detail << " runtime " << secs << " s";
    o.require(secs < kGradSeconds, "runtime under 5 min");
}

void criterion6(Outcome& o)
{
    std::mt19937_64 rng(2024);
    std::size_t agree = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::bernoulli_distribution a((trial % 10) / 9.0), b(0.5);
        Tensor4<float> gt({1, 1, 8, 8}), sr({1, 1, 8, 8});
        for (auto& v : gt.storage())
            v = a(rng) ? 1.0f : 0.0f;
        for (auto& v : sr.storage())
            v = b(rng) ? 1.0f : 0.0f;
        const auto cc = confusion(gt, sr);
        const auto want = oracle::set_metrics(gt, sr);
        agree += accuracy(cc) == want.ac && f1(cc) == want.f1 && jaccard(cc) == want.js;
    }
    Tensor4<float> gt({1, 1, 4, 4}), sr({1, 1, 4, 4});
    for (std::size_t i : {0, 1, 4, 5})
        gt[i] = 1.0f;
    for (std::size_t i : {1, 5, 6, 7})
        sr[i] = 1.0f;
    const auto cc = confusion(gt, sr);
    o.detail << " " << agree << "/200 random pairs exact; 4x4 example (" << accuracy(cc) << ", " << f1(cc) << ", "
             << jaccard(cc) << ")";
    o.require(agree == 200, "set oracle agreement");
    o.require(accuracy(cc) == 0.75 && f1(cc) == 0.5 && jaccard(cc) == 1.0 / 3.0, "worked example");
}

void criterion7(Outcome& o)
{
    const auto all = synth_shapes(288, 96, 96, 7);
    const std::vector<Sample> tr(all.begin(), all.begin() + 256), va(all.begin() + 256, all.end());
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::uint64_t> params;
    for (auto kind : kKinds) {
        Network<float> net(build_model(preset(kind, kToy, 1)));
        net.init(7);
        params.push_back(net.parameter_count());
        TrainConfig cfg;
        cfg.epochs = kMaxEpochs;
        cfg.batch_size = 4;
        cfg.seed = 7;
        const auto k0 = std::chrono::steady_clock::now();
        const auto r = train(net, tr, va, cfg);
        o.detail << " " << to_string(kind) << ": best val JS " << r.best_js << " at epoch " << r.best_epoch << " ("
                 << params.back() << " params, " << seconds_since(k0) << " s);";
        o.require(r.best_js >= kJsMin, to_string(kind) + " JS >= 0.85");
    }
    const double secs = seconds_since(t0);
    o.detail << " total " << secs << " s";
    o.require(secs < kTrainSeconds, "under 30 min");
    o.require(params[2] < params[0] && params[2] < params[1], "GPU-Net strictly smallest");
}

std::string read_file(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criterion8(Outcome& o)
{
    const auto dir = fs::temp_directory_path() / "gpunet_acceptance";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto data = synth_shapes(40, 96, 96, 8);
    const std::vector<Sample> tr(data.begin(), data.begin() + 32), va(data.begin() + 32, data.end());
    for (auto kind : kKinds) {
        std::vector<std::string> bytes;
        for (int run = 0; run < 2; ++run) {
            Network<float> net(build_model(preset(kind, kToy, 1)));
            net.init(8);
            TrainConfig cfg;
            cfg.epochs = 2;
            cfg.batch_size = 4;
            cfg.seed = 8;
            cfg.checkpoint_path = dir / (to_string(kind) + std::to_string(run) + ".gpun");
            train(net, tr, va, cfg);
            bytes.push_back(read_file(cfg.checkpoint_path));
        }
        const bool same = !bytes[0].empty() && bytes[0] == bytes[1];

        Network<float> net(build_model(preset(kind, kToy, 1)));
        net.init(9);
        auto [x, y] = stack_batch<float>(va, {0, 1, 2, 3});
        net.forward(x, Mode::train);  // move running statistics off their initial values
        save_checkpoint(net, dir / "rt.gpun");
        auto loaded = load_checkpoint<float>(dir / "rt.gpun");
        const bool forward_same = loaded.forward(x, Mode::eval) == net.forward(x, Mode::eval) &&
                                  loaded.forward(x, Mode::train) == net.forward(x, Mode::train);
        o.detail << " " << to_string(kind) << ": checkpoints " << (same ? "identical" : "differ") << " ("
                 << bytes[0].size() << " bytes), round-trip forward " << (forward_same ? "bitwise equal" : "differs")
                 << ";";
        o.require(same, to_string(kind) + " seeded checkpoints");
        o.require(forward_same, to_string(kind) + " round trip");
    }
    fs::remove_all(dir);
}

bool plane_equal(const Tensor4<float>& a, std::size_t ca, const Tensor4<float>& b, std::size_t cb)
{
    return std::equal(a.plane(0, ca), a.plane(0, ca) + a.shape().plane(), b.plane(0, cb));
}

void criterion9(Outcome& o)
{
    std::mt19937_64 rng(9);
    bool conv_ok = true;
    for (std::size_t k : {1, 3}) {
        GhostModule<float> g(GhostSpec::ghost(5, 7, 1, 3, k));
        g.init(rng);
        Conv2d<float> conv(ConvSpec{5, 7, k, 1, (k - 1) / 2, 1, 1, false});
        conv.weight().value = g.primary_weight().value;
        const auto x = oracle::random_tensor<float>({2, 5, 12, 12}, rng);
        conv_ok = conv_ok && g.forward(x, Mode::eval) == conv.forward(x, Mode::eval);
    }

    GhostSpec gp = GhostSpec::gp(6, 10);
    gp.ratio = 2;
    gp.bank.resize(1);
    bool gp_ok = gp.bank[0] == CheapOp{3, 1};
    GhostModule<float> a(gp);
    GhostModule<float> b(GhostSpec::ghost(6, 10, 2, 3, 3));
    a.init(rng);
    b.primary_weight().value = a.primary_weight().value;
    b.cheap_weight(0).value = a.cheap_weight(0).value;
    const auto x = oracle::random_tensor<float>({2, 6, 16, 16}, rng);
    gp_ok = gp_ok && a.forward(x, Mode::eval) == b.forward(x, Mode::eval);

    bool id_ok = true;
    std::size_t slots = 0;
    for (const auto& spec : {GhostSpec::ghost(6, 10, 2), GhostSpec::ghost(3, 9, 3), GhostSpec::gp(5, 18),
                             GhostSpec::gp(4, 22)}) {
        GhostModule<float> g(spec);
        g.init(rng);
        const auto y = g.forward(oracle::random_tensor<float>({1, spec.in_channels, 16, 16}, rng), Mode::eval);
        for (std::size_t i = 0; i < spec.intrinsic(); ++i) {
            const long ch = g.output_channel(i, spec.ratio - 1);
            if (ch >= 0) {
                ++slots;
                id_ok = id_ok && plane_equal(y, static_cast<std::size_t>(ch), g.intrinsic_maps(), i);
            }
        }
    }
    o.detail << " s=1 vs conv: " << (conv_ok ? "bitwise" : "differs") << "; GP s=2 d1 vs ghost: "
             << (gp_ok ? "bitwise" : "differs") << "; identity slots: " << slots << " checked, "
             << (id_ok ? "bitwise" : "differ");
    o.require(conv_ok, "s=1 equals conv");
    o.require(gp_ok, "GP s=2 equals ghost");
    o.require(id_ok, "identity slots");
}

}  // namespace

int main()
{
    const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
        {"1 cost model vs reference U-Net figures", criterion1},
        {"2 headline ratios and absolute ghost/GP counts", criterion2},
        {"3 analytic counts equal instantiated weights", criterion3},
        {"4 compression ratio within 5% of s for c >= 64", criterion4},
        {"5 finite-difference gradient suites", criterion5},
        {"6 metrics against the set oracle", criterion6},
        {"7 desk-scale training on synthetic shapes", criterion7},
        {"8 determinism and checkpoint round trip", criterion8},
        {"9 degenerate-case equalities", criterion9},
    };
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        Outcome o;
        try {
            run(o);
        } catch (const std::exception& e) {
            o.require(false, std::string("exception: ") + e.what());
        }
        failed += !o.pass;
        std::printf("%s criterion %s:%s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.str().c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria failed\n", failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
