// gpunet: cost accounting, training, evaluation and inspection of the U-Net family.
//
// Exit codes: 0 success, 1 check failure, 2 usage or data error, 3 numeric divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gpunet/checkpoint.hpp"
#include "gpunet/cost.hpp"
#include "gpunet/data.hpp"
#include "gpunet/gradcheck.hpp"
#include "gpunet/trainer.hpp"

namespace fs = std::filesystem;
using namespace gpunet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

struct ModelOptions {
    std::string model = "gpu-net";
    std::vector<std::size_t> widths{64, 128, 256, 512, 1024};
    std::size_t ratio = 0;
    std::size_t primary_kernel = 1;

    ModelConfig config(std::size_t in_channels) const
    {
        const auto kind = parse_block_kind(model);
        if (!kind)
            throw ConfigError("unknown model '" + model + "' (expected unet, ghost-unet or gpu-net)");
        ModelConfig cfg;
        cfg.block_kind = *kind;
        cfg.widths = widths;
        cfg.in_channels = in_channels;
        cfg.ratio = ratio;
        cfg.primary_kernel = primary_kernel;
        cfg.validate();
        return cfg;
    }
};

void add_model_options(CLI::App* cmd, ModelOptions& o)
{
    cmd->add_option("--model", o.model, "unet | ghost-unet | gpu-net")->capture_default_str();
    cmd->add_option("--widths", o.widths, "channel ladder, 4 levels + bottom")->delimiter(',')->expected(5);
    cmd->add_option("--ratio", o.ratio, "ghost ratio s (0 = preset)");
    cmd->add_option("--primary-kernel", o.primary_kernel, "kernel of the intrinsic convolution")
        ->capture_default_str();
}

struct DataOptions {
    std::string data_dir;
    std::size_t synthetic = 0;
    std::size_t size = 96;
    std::vector<std::size_t> resize;

    bool given() const { return !data_dir.empty() || synthetic > 0; }
};

void add_data_options(CLI::App* cmd, DataOptions& o)
{
    cmd->add_option("--data-dir", o.data_dir, "dataset directory (manifest.txt, images/, masks/)");
    cmd->add_option("--synthetic", o.synthetic, "generate N synthetic shape samples instead");
    cmd->add_option("--size", o.size, "synthetic image side length")->capture_default_str();
    cmd->add_option("--resize", o.resize, "resize loaded data to H,W")->delimiter(',')->expected(2);
}

std::vector<Sample> load_data(const DataOptions& o, std::uint64_t seed)
{
    if (!o.data_dir.empty() && o.synthetic > 0)
        throw ConfigError("--data-dir and --synthetic are mutually exclusive");
    if (o.synthetic > 0)
        return synth_shapes(o.synthetic, o.size, o.size, seed);
    if (o.data_dir.empty())
        throw ConfigError("one of --data-dir or --synthetic is required");
    auto samples = load_dataset_dir(o.data_dir);
    if (!o.resize.empty())
        for (auto& s : samples) {
            s.image = resize_bilinear(s.image, o.resize[0], o.resize[1]);
            s.mask = resize_mask(s.mask, o.resize[0], o.resize[1]);
        }
    return samples;
}

std::vector<Sample> split_part(const std::vector<Sample>& samples, std::uint64_t seed, const std::string& part)
{
    if (part == "all")
        return samples;
    std::vector<std::string> ids;
    for (const auto& s : samples)
        ids.push_back(s.id);
    const Split split = split_dataset(ids, SplitSpec{0.7, 0.1, 0.2, seed});
    if (part == "train")
        return select_ids(samples, split.train);
    if (part == "val")
        return select_ids(samples, split.val);
    if (part == "test")
        return select_ids(samples, split.test);
    throw ConfigError("unknown split '" + part + "' (expected train, val, test or all)");
}

Tensor4<float> load_model_input(const fs::path& path, const Network<float>& net)
{
    Tensor4<float> x = load_image(path);
    if (x.shape().c != net.config().in_channels)
        throw ShapeError("image has " + std::to_string(x.shape().c) + " channels, model expects " +
                         std::to_string(net.config().in_channels));
    if (x.shape().h % 16 != 0 || x.shape().w % 16 != 0)
        throw ShapeError("image is " + std::to_string(x.shape().h) + "x" + std::to_string(x.shape().w) +
                         "; height and width must be divisible by 16");
    return x;
}

// --- commands ------------------------------------------------------------------

struct CountArgs {
    ModelOptions model;
    std::size_t height = 192, width = 256, in_channels = 3;
    std::string format = "table";
    std::string baseline;
};

int cmd_count(const CountArgs& a)
{
    if (a.format != "table" && a.format != "json")
        throw ConfigError("unknown format '" + a.format + "' (expected table or json)");
    const ModelConfig cfg = a.model.config(a.in_channels);
    CostReport report = model_cost(build_model(cfg), a.height, a.width);
    if (!a.baseline.empty()) {
        ModelOptions base = a.model;
        base.model = a.baseline;
        report.compare_against(model_cost(build_model(base.config(a.in_channels)), a.height, a.width));
    }
    std::cout << (a.format == "json" ? format_json(report) + "\n" : format_table(report));
    return kExitOk;
}

struct TrainArgs {
    ModelOptions model;
    DataOptions data;
    TrainConfig train;
    std::string optimizer = "adam";
    std::string averaging = "pooled";
    std::string out = "model.gpun";
    std::string history;
};

Averaging parse_averaging(const std::string& s)
{
    if (s == "pooled")
        return Averaging::pooled;
    if (s == "per-image")
        return Averaging::per_image;
    throw ConfigError("unknown averaging '" + s + "' (expected pooled or per-image)");
}

int cmd_train(TrainArgs& a)
{
    const auto opt = parse_optimizer(a.optimizer);
    if (!opt)
        throw ConfigError("unknown optimizer '" + a.optimizer + "' (expected adam or sgd)");
    a.train.optimizer = *opt;
    a.train.averaging = parse_averaging(a.averaging);
    a.train.checkpoint_path = a.out;
    a.train.validate();

    const auto samples = load_data(a.data, a.train.seed);
    const auto train_set = split_part(samples, a.train.seed, "train");
    const auto val_set = split_part(samples, a.train.seed, "val");
    Network<float> net(build_model(a.model.config(samples.front().image.shape().c)));
    net.init(a.train.seed);

    const std::string history_path = a.history.empty() ? a.out + ".history.jsonl" : a.history;
    std::ofstream history(history_path, std::ios::trunc);
    if (!history)
        throw ConfigError("cannot write history file " + history_path);
    std::cerr << "training " << to_string(net.config().block_kind) << " (" << net.parameter_count()
              << " params) on " << train_set.size() << " samples, validating on " << val_set.size() << "\n";
    const TrainResult r = train(net, train_set, val_set, a.train, [&](const EpochRecord& rec) {
        const std::string line = to_json(rec);
        history << line << "\n" << std::flush;
        std::cout << line << "\n" << std::flush;
    });
    if (r.best_epoch > 0)
        std::cerr << "best val JS " << r.best_js << " at epoch " << r.best_epoch << "; saved " << a.out << "\n";
    else
        std::cerr << "saved " << a.out << "\n";
    return kExitOk;
}

struct EvalArgs {
    std::string ckpt;
    DataOptions data;
    std::string split = "test";
    std::uint64_t seed = 0;
    std::string averaging = "pooled";
    double threshold = 0.5;
};

int cmd_eval(const EvalArgs& a)
{
    Network<float> net = load_checkpoint<float>(a.ckpt);
    const auto part = split_part(load_data(a.data, a.seed), a.seed, a.split);
    std::cout << to_json(evaluate(net, part, parse_averaging(a.averaging), a.threshold)) << "\n";
    return kExitOk;
}

struct PredictArgs {
    std::string ckpt, image, out = "mask.pgm";
    double threshold = 0.5;
};

int cmd_predict(const PredictArgs& a)
{
    Network<float> net = load_checkpoint<float>(a.ckpt);
    const Tensor4<float> p = net.forward(load_model_input(a.image, net), Mode::eval);
    save_image(binarize(p, a.threshold), a.out);
    return kExitOk;
}

struct FeatureArgs {
    std::string ckpt, image, level = "first", out_dir = "features";
};

int cmd_features(const FeatureArgs& a)
{
    if (a.level != "first" && a.level != "last")
        throw ConfigError("unknown level '" + a.level + "' (expected first or last)");
    Network<float> net = load_checkpoint<float>(a.ckpt);
    const auto maps = net.collect_feature_maps(load_model_input(a.image, net),
                                               a.level == "first" ? FeatureLevel::first : FeatureLevel::last);
    fs::create_directories(a.out_dir);
    std::vector<Tensor4<float>> normalized;
    const int digits = static_cast<int>(std::to_string(maps.size() - 1).size());
    for (std::size_t c = 0; c < maps.size(); ++c) {
        normalized.push_back(normalize_map(maps[c]));
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%0*zu.pgm", a.level.c_str(), digits, c);
        save_image(normalized.back(), fs::path(a.out_dir) / name);
    }
    save_image(contact_sheet(normalized), fs::path(a.out_dir) / (a.level + "_sheet.pgm"));
    std::cout << "wrote " << maps.size() << " maps and 1 sheet to " << a.out_dir << "\n";
    return kExitOk;
}

struct GradcheckArgs {
    std::string scope = "primitives";
    int dtype = 32;
    SuiteOptions suite;
};

template <typename T>
int run_gradcheck(GradScope scope, const SuiteOptions& opts)
{
    bool ok = true;
    for (const auto& r : run_gradcheck_suite<T>(scope, opts)) {
        ok = ok && r.passed();
        std::printf("%-34s worst rel err %.3e  tol %.0e  compared %zu  skipped %zu  %s\n", r.op.c_str(), r.worst(),
                    r.tolerance, r.checked(), r.skipped(), r.passed() ? "PASS" : "FAIL");
    }
    return ok ? kExitOk : kExitCheckFailed;
}

int cmd_gradcheck(const GradcheckArgs& a)
{
    const auto scope = parse_grad_scope(a.scope);
    if (!scope)
        throw ConfigError("unknown scope '" + a.scope + "' (expected primitives, blocks or model)");
    if (a.dtype == 32)
        return run_gradcheck<float>(*scope, a.suite);
    if (a.dtype == 64)
        return run_gradcheck<double>(*scope, a.suite);
    throw ConfigError("--dtype must be 32 or 64");
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"U-Net, Ghost U-Net and GPU-Net: cost model, training and inspection"};
    app.set_config("--config", "", "TOML/INI file whose keys mirror the flags; flags win");
    app.require_subcommand(1);

    CountArgs count;
    auto* c = app.add_subcommand("count", "print parameter and MAC-FLOP counts");
    add_model_options(c, count.model);
    c->add_option("--height", count.height)->capture_default_str();
    c->add_option("--width", count.width)->capture_default_str();
    c->add_option("--in-channels", count.in_channels)->capture_default_str();
    c->add_option("--format", count.format, "table | json")->capture_default_str();
    c->add_option("--baseline", count.baseline, "model to report ratios against");

    TrainArgs tr;
    tr.model.model = "gpu-net";
    auto* t = app.add_subcommand("train", "train with binary cross entropy");
    add_model_options(t, tr.model);
    add_data_options(t, tr.data);
    t->add_option("--epochs", tr.train.epochs)->capture_default_str();
    t->add_option("--lr", tr.train.learning_rate)->capture_default_str();
    t->add_option("--batch", tr.train.batch_size)->capture_default_str();
    t->add_option("--seed", tr.train.seed)->capture_default_str();
    t->add_option("--optimizer", tr.optimizer, "adam | sgd")->capture_default_str();
    t->add_option("--momentum", tr.train.momentum, "SGD momentum")->capture_default_str();
    t->add_option("--eval-every", tr.train.eval_every, "validate every N epochs")->capture_default_str();
    t->add_option("--averaging", tr.averaging, "pooled | per-image")->capture_default_str();
    t->add_option("--out", tr.out, "checkpoint path")->capture_default_str();
    t->add_option("--history", tr.history, "history path (default <out>.history.jsonl)");

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "print {ac, f1, js} of a checkpoint on a split");
    e->add_option("--ckpt", ev.ckpt)->required();
    add_data_options(e, ev.data);
    e->add_option("--split", ev.split, "train | val | test | all")->capture_default_str();
    e->add_option("--seed", ev.seed, "split seed (use the training seed)")->capture_default_str();
    e->add_option("--averaging", ev.averaging, "pooled | per-image")->capture_default_str();
    e->add_option("--threshold", ev.threshold)->capture_default_str();

    PredictArgs pr;
    auto* p = app.add_subcommand("predict", "write a binary mask for one image");
    p->add_option("--ckpt", pr.ckpt)->required();
    p->add_option("--image", pr.image)->required();
    p->add_option("--out", pr.out)->capture_default_str();
    p->add_option("--threshold", pr.threshold)->capture_default_str();

    FeatureArgs fe;
    auto* f = app.add_subcommand("features", "dump first- or last-level block feature maps");
    f->add_option("--ckpt", fe.ckpt)->required();
    f->add_option("--image", fe.image)->required();
    f->add_option("--level", fe.level, "first | last")->capture_default_str();
    f->add_option("--out-dir", fe.out_dir)->capture_default_str();

    GradcheckArgs gc;
    auto* g = app.add_subcommand("gradcheck", "finite-difference gradient suites");
    g->add_option("--scope", gc.scope, "primitives | blocks | model")->capture_default_str();
    g->add_option("--dtype", gc.dtype, "32 | 64")->capture_default_str();
    g->add_option("--seed", gc.suite.seed)->capture_default_str();
    g->add_flag("--same-precision", gc.suite.same_precision_differences,
                "model scope: difference the network in its own dtype");
    g->add_flag("--corrupt-backward", gc.suite.corrupt_backward, "negative control: skew one analytic gradient")
        ->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*c)
            return cmd_count(count);
        if (*t)
            return cmd_train(tr);
        if (*e)
            return cmd_eval(ev);
        if (*p)
            return cmd_predict(pr);
        if (*f)
            return cmd_features(fe);
        if (*g)
            return cmd_gradcheck(gc);
    } catch (const NumericError& err) {
        std::cerr << "error: numeric divergence: " << err.what() << "\n";
        return kExitDiverged;
    } catch (const ConfigError& err) {
        std::cerr << "error: " << err.what() << "\n\n";
        for (const auto* sub : app.get_subcommands())
            std::cerr << sub->help();
        return kExitUsage;
    } catch (const Error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitUsage;
    } catch (const std::filesystem::filesystem_error& err) {
        std::cerr << "error: " << err.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
