#include "gpunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace gpunet {

double CheckReport::worst() const
{
    double w = 0.0;
    for (const auto& p : inputs)
        w = std::max(w, p.rel_err);
    return w;
}

std::size_t CheckReport::checked() const
{
    std::size_t n = 0;
    for (const auto& p : inputs)
        n += p.checked;
    return n;
}

std::size_t CheckReport::skipped() const
{
    std::size_t n = 0;
    for (const auto& p : inputs)
        n += p.skipped;
    return n;
}

bool CheckReport::passed() const
{
    return worst() < tolerance && checked() > 0 && skipped() <= checked();
}

namespace {

template <typename T>
CheckReport check_impl(const std::string& op, const std::function<double()>& loss, std::vector<GradProbe<T>>& probes,
                       double rel_tol)
{
    const double eps = std::numeric_limits<T>::epsilon();
    const double base_step = std::cbrt(eps);
    auto traced = [&](std::vector<std::uint64_t>& trace) {
        BranchTrace::start();
        try {
            const double l = loss();
            trace = BranchTrace::stop();
            return l;
        } catch (...) {
            BranchTrace::stop();
            throw;
        }
    };
    std::vector<std::uint64_t> base, tp, tm;
    traced(base);

    CheckReport report{op, {}, rel_tol};
    double scale = 0.0;
    for (auto& probe : probes) {
        if (probe.analytic.size() != probe.values.size())
            throw ShapeError("gradcheck probe " + probe.name + ": analytic gradient size mismatch");
        std::vector<std::size_t> idx = probe.indices;
        if (idx.empty())
            for (std::size_t i = 0; i < probe.values.size(); ++i)
                idx.push_back(i);
        ProbeResult r{probe.name};
        for (std::size_t i : idx) {
            const T x = probe.values[i];
            const double h = base_step * std::max(1.0, std::abs(static_cast<double>(x)));
            const T xp = static_cast<T>(x + h);
            const T xm = static_cast<T>(x - h);
            probe.values[i] = xp;
            const double lp = traced(tp);
            probe.values[i] = xm;
            const double lm = traced(tm);
            probe.values[i] = x;
            if (tp != base || tm != base) {
                ++r.skipped;
                continue;
            }
            const double numeric = (lp - lm) / (static_cast<double>(xp) - static_cast<double>(xm));
            const double analytic = probe.analytic[i];
            ++r.checked;
            r.max_abs_err = std::max(r.max_abs_err, std::abs(analytic - numeric));
            scale = std::max({scale, std::abs(analytic), std::abs(numeric)});
        }
        report.inputs.push_back(r);
    }
    for (auto& r : report.inputs) {
        r.scale = scale;
        r.rel_err = scale > 0.0 ? r.max_abs_err / scale : 0.0;
    }
    return report;
}

// --- fixtures ----------------------------------------------------------------

double unit(std::mt19937_64& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <typename T>
void fill_uniform(Tensor4<T>& t, std::mt19937_64& rng, double lo, double hi)
{
    for (auto& v : t.span())
        v = static_cast<T>(lo + (hi - lo) * unit(rng));
}

template <typename T>
Tensor4<T> random_tensor(Shape4 s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor4<T> t(s);
    fill_uniform(t, rng, lo, hi);
    return t;
}

// |x| in [0.1, 1]: keeps every probe clear of the ReLU kink.
template <typename T>
Tensor4<T> away_from_zero(Shape4 s, std::mt19937_64& rng)
{
    Tensor4<T> t(s);
    for (auto& v : t.span()) {
        const double mag = 0.1 + 0.9 * unit(rng);
        v = static_cast<T>(unit(rng) < 0.5 ? -mag : mag);
    }
    return t;
}

// Each 2x2 window has a unique maximum at least 0.2 above its other entries.
template <typename T>
Tensor4<T> separated_windows(Shape4 s, std::mt19937_64& rng)
{
    Tensor4<T> t(s);
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y + 1 < s.h; y += 2)
                for (std::size_t x = 0; x + 1 < s.w; x += 2) {
                    const std::size_t winner = rng() % 4;
                    for (std::size_t k = 0; k < 4; ++k) {
                        const double v = k == winner ? 0.5 + 0.5 * unit(rng) : -1.0 + 1.3 * unit(rng);
                        t.at(b, c, y + k / 2, x + k % 2) = static_cast<T>(v);
                    }
                }
    return t;
}

template <typename T>
std::vector<double> as_doubles(const Tensor4<T>& t)
{
    return {t.data(), t.data() + t.size()};
}

template <typename T>
double weighted_sum(const Tensor4<T>& y, const Tensor4<T>& w)
{
    if (y.shape() != w.shape())
        throw ShapeError("gradcheck: loss weights do not match the output shape");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
        s += static_cast<double>(w[i]) * static_cast<double>(y[i]);
    return s;
}

// Replaces identity-like initial values so every parameter gradient is generic.
template <typename T>
void randomize_params(Layer<T>& layer, std::mt19937_64& rng)
{
    layer.init(rng);
    std::vector<NamedParam<T>> params;
    layer.collect_params("", params);
    for (auto& p : params) {
        const auto& n = p.name;
        if (n.ends_with("bias") || n.ends_with("beta"))
            fill_uniform(p.param->value, rng, -0.5, 0.5);
        else if (n.ends_with("gamma"))
            fill_uniform(p.param->value, rng, 0.5, 1.5);
    }
    std::vector<NamedBuffer<T>> buffers;
    layer.collect_buffers("", buffers);
    for (auto& b : buffers) {
        if (b.name.ends_with("running_var"))
            fill_uniform(*b.tensor, rng, 0.5, 1.5);
        else
            fill_uniform(*b.tensor, rng, -0.5, 0.5);
    }
}

template <typename T>
CheckReport check_layer(const std::string& op, Layer<T>& layer, Tensor4<T> x, Mode mode, std::mt19937_64& rng,
                        double tol, bool corrupt_weight = false)
{
    randomize_params(layer, rng);
    std::vector<NamedParam<T>> params;
    layer.collect_params("", params);
    for (auto& p : params)
        p.param->zero_grad();
    const Tensor4<T> y = layer.forward(x, mode);
    const Tensor4<T> w = random_tensor<T>(y.shape(), rng);
    const Tensor4<T> gx = layer.backward(w);

    std::vector<GradProbe<T>> probes;
    probes.push_back({"input", x.span(), as_doubles(gx), {}});
    for (auto& p : params) {
        probes.push_back({p.name, p.param->value.span(), as_doubles(p.param->grad), {}});
        if (corrupt_weight && p.name == "weight")
            for (auto& g : probes.back().analytic)
                g *= 1.05;
    }
    auto loss = [&] { return weighted_sum(layer.forward(x, mode), w); };
    return check_impl(op, loss, probes, tol);
}

template <typename T>
std::vector<CheckReport> primitive_suite(const SuiteOptions& opts)
{
    const double tol = default_tolerance<T>(GradScope::primitives);
    std::mt19937_64 rng(opts.seed);
    std::vector<CheckReport> out;

    {
        Conv2d<T> conv(ConvSpec{2, 3, 3, 1, 1, 1, 1, true});
        out.push_back(check_layer("conv2d 3x3", conv, random_tensor<T>({1, 2, 5, 5}, rng), Mode::train, rng, tol,
                                  opts.corrupt_backward));
    }
    {
        Conv2d<T> conv(ConvSpec{4, 6, 3, 2, 2, 2, 2, true});
        out.push_back(check_layer("conv2d strided dilated grouped", conv, random_tensor<T>({2, 4, 9, 9}, rng),
                                  Mode::train, rng, tol));
    }
    {
        Conv2d<T> conv(ConvSpec{3, 3, 3, 1, 2, 2, 3, false});
        out.push_back(check_layer("conv2d depthwise", conv, random_tensor<T>({2, 3, 7, 7}, rng), Mode::train, rng,
                                  tol));
    }
    {
        Conv2d<T> conv(ConvSpec{5, 4, 1, 1, 0, 1, 1, true});
        out.push_back(check_layer("conv2d 1x1", conv, random_tensor<T>({2, 5, 4, 6}, rng), Mode::train, rng, tol));
    }
    {
        TransposedConv2d<T> up(TransposedConvSpec{3, 2, 3, 2, 1, 1, true});
        out.push_back(check_layer("transposed conv2d", up, random_tensor<T>({2, 3, 4, 4}, rng), Mode::train, rng,
                                  tol));
    }
    {
        BatchNorm2d<T> bn(3);
        out.push_back(check_layer("batchnorm train", bn, random_tensor<T>({2, 3, 4, 4}, rng), Mode::train, rng, tol));
    }
    {
        BatchNorm2d<T> bn(3);
        out.push_back(check_layer("batchnorm eval", bn, random_tensor<T>({2, 3, 4, 4}, rng), Mode::eval, rng, tol));
    }
    {
        ReLU<T> relu;
        out.push_back(check_layer("relu", relu, away_from_zero<T>({2, 3, 5, 5}, rng), Mode::train, rng, tol));
    }
    {
        Sigmoid<T> sig;
        out.push_back(check_layer("sigmoid", sig, random_tensor<T>({2, 3, 5, 5}, rng, -3.0, 3.0), Mode::train, rng,
                                  tol));
    }
    {
        MaxPool2d<T> pool;
        out.push_back(check_layer("maxpool 2x2", pool, separated_windows<T>({2, 3, 6, 8}, rng), Mode::train, rng,
                                  tol));
    }
    {
        Tensor4<T> a = random_tensor<T>({2, 2, 3, 3}, rng);
        Tensor4<T> b = random_tensor<T>({2, 3, 3, 3}, rng);
        const Tensor4<T> w = random_tensor<T>({2, 5, 3, 3}, rng);
        // d/da and d/db of <w, concat(a, b)> are the matching channel slices of w.
        std::vector<GradProbe<T>> probes{{"a", a.span(), as_doubles(slice_channels(w, 0, 2)), {}},
                                         {"b", b.span(), as_doubles(slice_channels(w, 2, 3)), {}}};
        out.push_back(check_impl<T>("concat", [&] { return weighted_sum(concat_channels(a, b), w); }, probes, tol));
    }
    {
        Tensor4<T> a = random_tensor<T>({2, 3, 3, 3}, rng);
        Tensor4<T> b = random_tensor<T>({2, 3, 3, 3}, rng);
        const Tensor4<T> w = random_tensor<T>({2, 3, 3, 3}, rng);
        std::vector<GradProbe<T>> probes{{"a", a.span(), as_doubles(w), {}}, {"b", b.span(), as_doubles(w), {}}};
        out.push_back(check_impl<T>("add", [&] { return weighted_sum(add(a, b), w); }, probes, tol));
    }
    {
        Tensor4<T> p = random_tensor<T>({2, 1, 4, 4}, rng, 0.2, 0.8);
        Tensor4<T> t(p.shape());
        for (auto& v : t.span())
            v = unit(rng) < 0.5 ? T(0) : T(1);
        std::vector<GradProbe<T>> probes{{"pred", p.span(), as_doubles(bce_backward(p, t)), {}}};
        out.push_back(check_impl<T>("bce loss", [&] { return bce_loss(p, t); }, probes, tol));
    }
    return out;
}

template <typename T>
std::vector<CheckReport> block_suite(const SuiteOptions& opts)
{
    const double tol = default_tolerance<T>(GradScope::blocks);
    std::mt19937_64 rng(opts.seed + 1);
    std::vector<CheckReport> out;
    const auto ghost_bank = GhostSpec::ghost(1, 1).bank;
    auto input = [&](std::size_t c) { return random_tensor<T>({1, c, 8, 8}, rng); };

    {
        GhostModule<T> m(GhostSpec::ghost(4, 6, 2, 3, 1));
        out.push_back(check_layer("ghost module", m, input(4), Mode::train, rng, tol));
    }
    {
        GhostModule<T> m(GhostSpec::ghost(4, 5, 3, 3, 3));
        out.push_back(check_layer("ghost module truncated", m, input(4), Mode::train, rng, tol));
    }
    {
        GhostModule<T> m(GhostSpec::gp(4, 12, 1));
        out.push_back(check_layer("gp module", m, input(4), Mode::train, rng, tol));
    }
    {
        GhostModule<T> m(GhostSpec::gp(4, 8, 3));
        out.push_back(check_layer("gp module truncated", m, input(4), Mode::train, rng, tol));
    }
    {
        Bottleneck<T> b(BneckSpec::make(4, 6, 2, ghost_bank, 1));
        out.push_back(check_layer("ghost bneck projection", b, input(4), Mode::train, rng, tol));
    }
    {
        Bottleneck<T> b(BneckSpec::make(6, 6, 2, ghost_bank, 1));
        out.push_back(check_layer("ghost bneck identity", b, input(6), Mode::train, rng, tol));
    }
    {
        Bottleneck<T> b(BneckSpec::make(4, 12, 6, GhostSpec::aspp_bank(), 1));
        out.push_back(check_layer("gp bneck projection", b, input(4), Mode::train, rng, tol));
    }
    {
        Bottleneck<T> b(BneckSpec::make(6, 6, 6, GhostSpec::aspp_bank(), 1));
        out.push_back(check_layer("gp bneck identity", b, input(6), Mode::train, rng, tol));
    }
    {
        DoubleConv<T> d(DoubleConvSpec{4, 6});
        out.push_back(check_layer("double conv", d, input(4), Mode::train, rng, tol));
    }
    return out;
}

template <typename From, typename To>
void copy_state(Network<From>& src, Network<To>& dst)
{
    auto sp = src.params();
    auto dp = dst.params();
    for (std::size_t k = 0; k < sp.size(); ++k)
        dp[k].param->value = tensor_cast<To>(sp[k].param->value);
    auto sb = src.buffers();
    auto db = dst.buffers();
    for (std::size_t k = 0; k < sb.size(); ++k)
        *db[k].tensor = tensor_cast<To>(*sb[k].tensor);
}

// Analytic gradients come from the network under test (dtype T). The central
// differences are taken on a replica in dtype O holding the same weights.
template <typename T, typename O>
CheckReport model_check(BlockKind kind, const SuiteOptions& opts)
{
    constexpr std::size_t kSampledWeights = 100;
    ModelConfig cfg;
    cfg.block_kind = kind;
    cfg.widths = {8, 16, 32, 64, 128};
    cfg.in_channels = 1;
    Network<T> net(build_model(cfg));
    net.init(opts.seed);
    std::mt19937_64 rng(opts.seed + 2);
    Tensor4<T> x = random_tensor<T>({1, 1, 32, 32}, rng);
    Tensor4<T> t(Shape4{1, 1, 32, 32});
    for (auto& v : t.span())
        v = unit(rng) < 0.5 ? T(0) : T(1);

    net.zero_grad();
    const Tensor4<T> p = net.forward(x, Mode::train);
    net.backward(bce_backward(p, t));

    Network<O> oracle(build_model(cfg));
    copy_state(net, oracle);
    const Tensor4<O> ox = tensor_cast<O>(x);
    const Tensor4<O> ot = tensor_cast<O>(t);

    auto params = net.params();
    auto oparams = oracle.params();
    std::size_t total = 0;
    for (const auto& np : params)
        total += np.param->size();
    std::vector<std::vector<std::size_t>> picks(params.size());
    for (std::size_t s = 0; s < kSampledWeights; ++s) {
        std::size_t flat = rng() % total;
        std::size_t k = 0;
        while (flat >= params[k].param->size())
            flat -= params[k++].param->size();
        picks[k].push_back(flat);
    }
    std::vector<GradProbe<O>> probes;
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (picks[k].empty())
            continue;
        std::sort(picks[k].begin(), picks[k].end());
        picks[k].erase(std::unique(picks[k].begin(), picks[k].end()), picks[k].end());
        probes.push_back(
            {params[k].name, oparams[k].param->value.span(), as_doubles(params[k].param->grad), picks[k]});
    }
    auto loss = [&] { return bce_loss(oracle.forward(ox, Mode::train), ot); };
    return check_impl<O>(to_string(kind) + " end-to-end", loss, probes, default_tolerance<T>(GradScope::model));
}

template <typename T>
std::vector<CheckReport> model_suite(const SuiteOptions& opts)
{
    std::vector<CheckReport> out;
    for (auto kind : {BlockKind::ordinary, BlockKind::ghost, BlockKind::gp})
        out.push_back(opts.same_precision_differences ? model_check<T, T>(kind, opts)
                                                       : model_check<T, double>(kind, opts));
    return out;
}

}  // namespace

template <typename T>
CheckReport finite_difference_check(const std::string& op, const std::function<double()>& loss,
                                    std::vector<GradProbe<T>>& probes, double rel_tol)
{
    return check_impl(op, loss, probes, rel_tol);
}

std::optional<GradScope> parse_grad_scope(const std::string& name)
{
    if (name == "primitives")
        return GradScope::primitives;
    if (name == "blocks")
        return GradScope::blocks;
    if (name == "model")
        return GradScope::model;
    return std::nullopt;
}

template <typename T>
double default_tolerance(GradScope scope)
{
    if constexpr (std::is_same_v<T, float>)
        return scope == GradScope::model ? 1e-2 : 1e-3;
    else
        return 1e-6;
}

template <typename T>
std::vector<CheckReport> run_gradcheck_suite(GradScope scope, const SuiteOptions& opts)
{
    switch (scope) {
    case GradScope::primitives:
        return primitive_suite<T>(opts);
    case GradScope::blocks:
        return block_suite<T>(opts);
    case GradScope::model:
        return model_suite<T>(opts);
    }
    return {};
}

#define GPUNET_INSTANTIATE_GRADCHECK(T)                                                                          \
    template CheckReport finite_difference_check(const std::string&, const std::function<double()>&,           \
                                                 std::vector<GradProbe<T>>&, double);                            \
    template double default_tolerance<T>(GradScope);                                                             \
    template std::vector<CheckReport> run_gradcheck_suite<T>(GradScope, const SuiteOptions&);

GPUNET_INSTANTIATE_GRADCHECK(float)
GPUNET_INSTANTIATE_GRADCHECK(double)

}  // namespace gpunet
