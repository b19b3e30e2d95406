#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gpunet/blocks.hpp"
#include "gpunet/cost.hpp"
#include "gpunet/gradcheck.hpp"
#include "oracles.hpp"

using namespace gpunet;

namespace {

template <typename T>
std::vector<Tensor4<T>> cheap_weights(GhostModule<T>& g)
{
    std::vector<Tensor4<T>> out;
    for (std::size_t j = 0; j + 1 < g.spec().ratio; ++j)
        out.push_back(g.cheap_weight(j).value);
    return out;
}

template <typename T>
std::uint64_t weight_count(Layer<T>& layer)
{
    std::vector<NamedParam<T>> ps;
    layer.collect_params("", ps);
    std::uint64_t n = 0;
    for (const auto& p : ps)
        n += p.param->size();
    return n;
}

bool plane_equal(const Tensor4<float>& a, std::size_t ca, const Tensor4<float>& b, std::size_t cb)
{
    return a.shape().plane() == b.shape().plane() &&
           std::equal(a.plane(0, ca), a.plane(0, ca) + a.shape().plane(), b.plane(0, cb));
}

}  // namespace

TEST_CASE("ghost module output shape")
{
    std::mt19937_64 rng(1);
    GhostModule<float> g(GhostSpec::ghost(8, 8, 2));
    g.init(rng);
    CHECK(g.spec().intrinsic() == 4);
    const auto y = g.forward(oracle::random_tensor<float>({2, 8, 6, 6}, rng), Mode::train);
    CHECK(y.shape() == Shape4{2, 8, 6, 6});
    CHECK(g.intrinsic_maps().shape() == Shape4{2, 4, 6, 6});
}

TEST_CASE("ghost and GP modules match the assembly oracle bitwise")
{
    std::mt19937_64 rng(2);
    const GhostSpec specs[] = {
        GhostSpec::ghost(8, 8, 2),    GhostSpec::ghost(4, 6, 4),      GhostSpec::ghost(3, 7, 3, 5, 1),
        GhostSpec::gp(3, 12),         GhostSpec::gp(4, 8, 1),         GhostSpec::gp(16, 24),
        GhostSpec::ghost(5, 5, 1, 3), GhostSpec::ghost(2, 9, 2, 3, 3),
    };
    for (const auto& spec : specs) {
        GhostModule<float> g(spec);
        g.init(rng);
        const auto x = oracle::random_tensor<float>({2, spec.in_channels, 16, 16}, rng);
        const auto y = g.forward(x, Mode::train);
        CHECK(y == oracle::ghost_module(x, spec, g.primary_weight().value, cheap_weights(g)));
    }
}

TEST_CASE("ratio 1 ghost module equals an ordinary convolution bitwise")
{
    std::mt19937_64 rng(3);
    for (std::size_t k : {1, 3}) {
        const auto spec = GhostSpec::ghost(5, 7, 1, 3, k);
        GhostModule<float> g(spec);
        g.init(rng);
        Conv2d<float> conv(ConvSpec{5, 7, k, 1, (k - 1) / 2, 1, 1, false});
        conv.weight().value = g.primary_weight().value;
        const auto x = oracle::random_tensor<float>({2, 5, 9, 9}, rng);
        CHECK(g.forward(x, Mode::eval) == conv.forward(x, Mode::eval));
        CHECK(weight_count(g) == weight_count(conv));
    }
}

TEST_CASE("channel map with truncation: c=4, n=6, s=4")
{
    std::mt19937_64 rng(4);
    GhostModule<float> g(GhostSpec::ghost(4, 6, 4));
    g.init(rng);
    CHECK(g.spec().intrinsic() == 2);
    CHECK(g.spec().generated() == 8);
    const auto x = oracle::random_tensor<float>({1, 4, 8, 8}, rng);
    const auto y = g.forward(x, Mode::eval);
    REQUIRE(y.shape().c == 6);
    // Map 0 fills channels 0..3 (three ghosts then itself); map 1 keeps only its first two ghosts.
    CHECK(g.output_channel(0, 0) == 0);
    CHECK(g.output_channel(0, 3) == 3);
    CHECK(g.output_channel(1, 0) == 4);
    CHECK(g.output_channel(1, 1) == 5);
    CHECK(g.output_channel(1, 2) == -1);
    CHECK(g.output_channel(1, 3) == -1);
    CHECK(plane_equal(y, 3, g.intrinsic_maps(), 0));
    CHECK_FALSE(plane_equal(y, 5, g.intrinsic_maps(), 1));
}

TEST_CASE("GP channel order for c=3, n=12, s=6")
{
    std::mt19937_64 rng(5);
    const auto spec = GhostSpec::gp(3, 12);
    GhostModule<float> g(spec);
    g.init(rng);
    CHECK(spec.intrinsic() == 2);
    const auto x = oracle::random_tensor<float>({1, 3, 16, 16}, rng);
    const auto y = g.forward(x, Mode::eval);
    const auto& intr = g.intrinsic_maps();
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(plane_equal(y, i * 6 + 5, intr, i));
        for (std::size_t j = 0; j < 5; ++j) {
            const auto& op = spec.bank[j];
            ConvSpec cs{2, 2, op.kernel, 1, op.padding(), op.dilation, 2, false};
            const auto ghost = oracle::conv2d(intr, g.cheap_weight(j).value, nullptr, cs);
            CHECK(plane_equal(y, i * 6 + j, ghost, i));
        }
    }
}

TEST_CASE("zero cheap kernels give zero ghosts and intact identity slots")
{
    std::mt19937_64 rng(6);
    GhostModule<float> g(GhostSpec::gp(4, 12));
    g.init(rng);
    for (std::size_t j = 0; j < 5; ++j)
        g.cheap_weight(j).value.fill(0.0f);
    const auto y = g.forward(oracle::random_tensor<float>({1, 4, 16, 16}, rng), Mode::eval);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            const std::size_t ch = i * 6 + j;
            if (j == 5) {
                CHECK(plane_equal(y, ch, g.intrinsic_maps(), i));
            } else {
                const float* p = y.plane(0, ch);
                CHECK(std::all_of(p, p + 256, [](float v) { return v == 0.0f; }));
            }
        }
}

TEST_CASE("identity slots are bit-equal to intrinsic maps")
{
    std::mt19937_64 rng(7);
    for (const auto& spec : {GhostSpec::ghost(6, 10, 2), GhostSpec::ghost(3, 9, 3), GhostSpec::gp(5, 18)}) {
        GhostModule<float> g(spec);
        g.init(rng);
        const auto y = g.forward(oracle::random_tensor<float>({1, spec.in_channels, 16, 16}, rng), Mode::eval);
        for (std::size_t i = 0; i < spec.intrinsic(); ++i) {
            const long ch = g.output_channel(i, spec.ratio - 1);
            if (ch >= 0)
                CHECK(plane_equal(y, static_cast<std::size_t>(ch), g.intrinsic_maps(), i));
        }
    }
}

TEST_CASE("every GP dilation preserves a 16x16 input")
{
    std::mt19937_64 rng(8);
    for (const auto& op : GhostSpec::aspp_bank()) {
        ConvSpec cs{3, 3, op.kernel, 1, op.padding(), op.dilation, 3, false};
        CHECK(cs.output_size(16) == 16);
        ParamTensor<float> w(cs.weight_shape());
        w.value = oracle::random_tensor<float>(cs.weight_shape(), rng);
        CHECK(conv2d_forward<float>(oracle::random_tensor<float>({1, 3, 16, 16}, rng), w, nullptr, cs).shape() ==
              Shape4{1, 3, 16, 16});
    }
    GhostModule<float> g(GhostSpec::gp(3, 12));
    g.init(rng);
    CHECK(g.forward(oracle::random_tensor<float>({1, 3, 16, 16}, rng), Mode::eval).shape() == Shape4{1, 12, 16, 16});
}

TEST_CASE("ghost module is local: a pixel only reaches its receptive field")
{
    std::mt19937_64 rng(9);
    GhostModule<float> g(GhostSpec::ghost(2, 4, 2, 3, 3));
    g.init(rng);
    auto x = oracle::random_tensor<float>({1, 2, 16, 16}, rng);
    const auto y0 = g.forward(x, Mode::eval);
    x.at(0, 1, 8, 8) += 1.0f;
    const auto y1 = g.forward(x, Mode::eval);
    // Primary 3x3 plus cheap 3x3 reach two pixels; the identity slot reaches one.
    for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t yy = 0; yy < 16; ++yy)
            for (std::size_t xx = 0; xx < 16; ++xx) {
                const long r = c % 2 == 1 ? 1 : 2;
                const bool far = std::abs(static_cast<long>(yy) - 8) > r || std::abs(static_cast<long>(xx) - 8) > r;
                if (far)
                    CHECK(y0.at(0, c, yy, xx) == y1.at(0, c, yy, xx));
            }
}

TEST_CASE("GP module with ratio 2 and a dilation-1 bank equals the ghost module")
{
    std::mt19937_64 rng(10);
    GhostSpec gp = GhostSpec::gp(6, 10);
    gp.ratio = 2;
    gp.bank.resize(1);
    REQUIRE(gp.bank[0] == CheapOp{3, 1});
    GhostModule<float> a(gp);
    GhostModule<float> b(GhostSpec::ghost(6, 10, 2, 3, 3));
    a.init(rng);
    b.primary_weight().value = a.primary_weight().value;
    b.cheap_weight(0).value = a.cheap_weight(0).value;
    const auto x = oracle::random_tensor<float>({2, 6, 16, 16}, rng);
    CHECK(a.forward(x, Mode::eval) == b.forward(x, Mode::eval));
}

TEST_CASE("module validation")
{
    CHECK_THROWS_AS(GhostModule<float>{GhostSpec::ghost(4, 4, 0)}, ConfigError);
    GhostSpec bad = GhostSpec::gp(4, 12);
    bad.bank.pop_back();
    CHECK_THROWS_AS(GhostModule<float>{bad}, ConfigError);
    GhostModule<float> g(GhostSpec::ghost(4, 4, 2));
    CHECK_THROWS_AS(g.forward(Tensor4<float>({1, 3, 8, 8}), Mode::eval), ShapeError);
}

TEST_CASE("bottleneck with zero module weights is the identity at eval")
{
    std::mt19937_64 rng(11);
    Bottleneck<float> b(BneckSpec::make(8, 8, 6, GhostSpec::aspp_bank(), 1));
    b.init(rng);
    for (auto* g : {&b.first(), &b.second()}) {
        g->primary_weight().value.fill(0.0f);
        for (std::size_t j = 0; j < 5; ++j)
            g->cheap_weight(j).value.fill(0.0f);
    }
    const auto x = oracle::random_tensor<float>({2, 8, 16, 16}, rng);
    CHECK(b.forward(x, Mode::eval) == x);
}

TEST_CASE("bottleneck 16 to 32 uses a projection shortcut")
{
    std::mt19937_64 rng(12);
    const auto spec = BneckSpec::make(16, 32, 6, GhostSpec::aspp_bank(), 1);
    CHECK(spec.shortcut == ShortcutKind::projection);
    Bottleneck<float> b(spec);
    b.init(rng);
    CHECK(b.forward(oracle::random_tensor<float>({1, 16, 16, 16}, rng), Mode::train).shape() ==
          Shape4{1, 32, 16, 16});
    std::vector<NamedParam<float>> ps;
    b.collect_params("", ps);
    bool has_proj = false;
    for (const auto& p : ps)
        if (p.name == "shortcut.conv.weight") {
            has_proj = true;
            CHECK(p.param->value.shape() == Shape4{32, 16, 1, 1});
        }
    CHECK(has_proj);
    CHECK(BneckSpec::make(16, 16, 2, GhostSpec::ghost(1, 1, 2).bank).shortcut == ShortcutKind::identity);
}

TEST_CASE("cost model parameter counts equal instantiated weights")
{
    for (const auto& spec : {GhostSpec::ghost(16, 16, 2), GhostSpec::gp(16, 24), GhostSpec::gp(4, 8, 3),
                             GhostSpec::ghost(3, 7, 3, 5, 1), GhostSpec::ghost(5, 5, 1)}) {
        GhostModule<float> g(spec);
        CHECK(params_gp(spec) == weight_count(g));
    }
    for (const auto& spec : {BneckSpec::make(8, 8, 6, GhostSpec::aspp_bank(), 1),
                             BneckSpec::make(16, 32, 2, GhostSpec::ghost(1, 1, 2).bank, 1),
                             BneckSpec::make(3, 9, 6, GhostSpec::aspp_bank(), 3)}) {
        Bottleneck<float> b(spec);
        CHECK(params_bneck(spec) == weight_count(b));
    }
    DoubleConvSpec dc{3, 8};
    DoubleConv<float> d(dc);
    CHECK(params_double_conv(dc) == weight_count(d));
}

TEST_CASE("block gradients pass finite-difference checks")
{
    for (const auto& r : run_gradcheck_suite<float>(GradScope::blocks)) {
        INFO(r.op << " f32 worst " << r.worst());
        CHECK(r.passed());
        CHECK(r.worst() < 1e-3);
    }
    for (const auto& r : run_gradcheck_suite<double>(GradScope::blocks)) {
        INFO(r.op << " f64 worst " << r.worst());
        CHECK(r.passed());
        CHECK(r.worst() < 1e-6);
    }
}
