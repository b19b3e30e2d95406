#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "gpunet/cost.hpp"
#include "oracles.hpp"

using namespace gpunet;

namespace {

/// Weights of a freshly constructed convolution layer.
std::uint64_t conv_weights(const ConvSpec& s)
{
    Conv2d<float> c(s);
    std::vector<NamedParam<float>> ps;
    c.collect_params("", ps);
    std::uint64_t n = 0;
    for (const auto& p : ps)
        n += p.param->size();
    return n;
}

std::uint64_t module_weights(const GhostSpec& s)
{
    GhostModule<float> g(s);
    std::vector<NamedParam<float>> ps;
    g.collect_params("", ps);
    std::uint64_t n = 0;
    for (const auto& p : ps)
        n += p.param->size();
    return n;
}

/// MACs of an executed convolution: one per (output element, contributing tap),
/// padding taps included, counted by walking the loop nest.
std::uint64_t conv_macs_by_loop(const ConvSpec& s, std::size_t oh, std::size_t ow)
{
    std::uint64_t n = 0;
    for (std::size_t o = 0; o < s.out_channels; ++o)
        for (std::size_t p = 0; p < oh * ow; ++p)
            n += (s.in_channels / s.groups) * s.kernel * s.kernel;
    return n;
}

}  // namespace

TEST_CASE("convolution parameter counts")
{
    const ConvSpec a{3, 64, 3, 1, 1, 1, 1, false};
    CHECK(params_conv(a) == 1728);
    CHECK(conv_weights(a) == 1728);
    const ConvSpec b{1, 1, 1, 1, 0, 1, 1, false};
    CHECK(params_conv(b) == 1);
    const ConvSpec dw{64, 64, 3, 1, 1, 1, 64, false};
    CHECK(params_conv(dw) == 576);
    CHECK(conv_weights(dw) == 576);
    const ConvSpec biased{5, 7, 3, 1, 1, 1, 1, true};
    CHECK(params_conv(biased) == conv_weights(biased));
}

TEST_CASE("convolution FLOP counts")
{
    const ConvSpec a{3, 64, 3, 1, 1, 1, 1, false};
    CHECK(flops_conv(a, 192, 256) == 84934656ULL);
    CHECK(flops_conv(a, 192, 256) == conv_macs_by_loop(a, 192, 256));
    CHECK(flops_conv(ConvSpec{1, 1, 1, 1, 0, 1, 1, false}, 1, 1) == 1);
    const ConvSpec g{8, 12, 3, 1, 1, 2, 4, true};
    CHECK(flops_conv(g, 10, 7) == conv_macs_by_loop(g, 10, 7));
}

TEST_CASE("ghost and GP module counts")
{
    const auto ghost = GhostSpec::ghost(16, 16, 2, 3, 3);
    CHECK(params_gp(ghost, CostMode::closed_form) == 16 * 9 * 8 + 8 * 1 * 9);
    CHECK(params_gp(ghost, CostMode::closed_form) == 1224);
    CHECK(params_gp(ghost, CostMode::exact) == module_weights(ghost));
    CHECK(flops_gp(ghost, 8, 8, CostMode::closed_form) == 1224 * 64);

    const auto gp = GhostSpec::gp(16, 24);
    CHECK(params_gp(gp) == 16 * 9 * 4 + 4 * (9 + 9 + 9 + 9 + 1));
    CHECK(params_gp(gp) == 724);
    CHECK(module_weights(gp) == 724);
    CHECK(flops_gp(gp, 16, 16) == 724 * 256);
    CHECK_THROWS_AS(params_gp(gp, CostMode::closed_form), ConfigError);
    CHECK_THROWS_AS(params_gp(GhostSpec::ghost(16, 15, 2), CostMode::closed_form), ConfigError);

    for (std::size_t k : {1, 3}) {
        const auto one = GhostSpec::ghost(7, 5, 1, 3, k);
        const ConvSpec conv{7, 5, k, 1, (k - 1) / 2, 1, 1, false};
        CHECK(params_gp(one) == params_conv(conv));
        CHECK(params_gp(one, CostMode::closed_form) == params_conv(conv));
        CHECK(flops_gp(one, 9, 11) == flops_conv(conv, 9, 11));
    }

    // Truncated modules are counted at m = ceil(n/s) intrinsic maps.
    for (const auto& s : {GhostSpec::ghost(4, 6, 4), GhostSpec::gp(3, 8), GhostSpec::ghost(3, 7, 3, 5, 1)})
        CHECK(params_gp(s) == module_weights(s));
}

TEST_CASE("compression ratio arithmetic")
{
    const auto r = ratio_params(512, 3, 3, 2);
    CHECK(r.value() == doctest::Approx(9216.0 / 4617.0).epsilon(1e-15));
    CHECK(r == Rational{1024, 513});
    CHECK(ratio_params(64, 3, 3, 1) == Rational{1, 1});
    CHECK(ratio_params(1u << 30, 3, 3, 6).value() == doctest::Approx(6.0).epsilon(1e-8));

    // With k = d the ratio is c*s / (c + s - 1), so the shortfall from s is
    // exactly (s - 1) / (c + s - 1).
    for (Count c : {1, 7, 64, 100, 513, 4096})
        for (Count s = 1; s <= 8; ++s) {
            const auto rp = ratio_params(c, 3, 3, s);
            CHECK(rp == ratio_flops(c, 3, 3, s));
            CHECK(rp.num * (c + s - 1) == rp.den * c * s);
            const double shortfall = (static_cast<double>(s) - rp.value()) / static_cast<double>(s);
            CHECK(shortfall == doctest::Approx(static_cast<double>(s - 1) / static_cast<double>(c + s - 1)));
        }
    for (Count c = 1; c <= 300; ++c)
        for (Count k : {1, 3, 5})
            for (Count d : {1, 3})
                for (Count s = 1; s <= 8; ++s)
                    CHECK(ratio_params(c, k, d, s) == ratio_flops(c, k, d, s));
}

TEST_CASE("ratios agree with the module counts")
{
    for (std::size_t s = 2; s <= 6; ++s) {
        const auto spec = GhostSpec::ghost(32, 32 * s, s, 3, 3);
        const ConvSpec conv{32, 32 * s, 3, 1, 1, 1, 1, false};
        const auto r = ratio_params(32, 3, 3, s);
        CHECK(params_conv(conv) * r.den == params_gp(spec) * r.num);
        CHECK(flops_conv(conv, 12, 12) * r.den == flops_gp(spec, 12, 12) * r.num);
    }
}

TEST_CASE("model cost report")
{
    const auto unet = model_cost(build_model(ModelConfig::unet()), 192, 256);
    CHECK(std::abs(static_cast<double>(unet.total_params) - 34.53e6) / 34.53e6 < 0.01);
    CHECK(std::abs(static_cast<double>(unet.total_flops) - 49.10e9) / 49.10e9 < 0.01);

    for (const auto& cfg : {ModelConfig::unet(), ModelConfig::ghost_unet(), ModelConfig::gpu_net(),
                            ModelConfig::gpu_net({8, 16, 32, 64, 128}, 1)}) {
        const auto graph = build_model(cfg);
        const auto a = model_cost(graph, 192, 256);
        const auto b = model_cost(graph, 256, 256);
        const auto c = model_cost(graph, 96, 96);
        const Count sum_p = std::accumulate(a.rows.begin(), a.rows.end(), Count{0},
                                            [](Count t, const CostRow& r) { return t + r.params; });
        const Count sum_f = std::accumulate(a.rows.begin(), a.rows.end(), Count{0},
                                            [](Count t, const CostRow& r) { return t + r.flops; });
        CHECK(sum_p == a.total_params);
        CHECK(sum_f == a.total_flops);
        // FLOPs are exactly linear in the input area.
        CHECK(a.total_flops * 256 * 256 == b.total_flops * 192 * 256);
        CHECK(a.total_flops * 96 * 96 == c.total_flops * 192 * 256);
        CHECK(static_cast<double>(b.total_flops) / static_cast<double>(a.total_flops) ==
              doctest::Approx(4.0 / 3.0).epsilon(1e-12));
        CHECK(a.total_params == b.total_params);
    }
}

TEST_CASE("comparison against a baseline")
{
    auto gp = model_cost(build_model(ModelConfig::gpu_net()), 96, 96);
    const auto unet = model_cost(build_model(ModelConfig::unet()), 96, 96);
    gp.compare_against(unet);
    REQUIRE(gp.comparison.has_value());
    CHECK(gp.comparison->params_ratio ==
          doctest::Approx(static_cast<double>(unet.total_params) / static_cast<double>(gp.total_params)));
    CHECK(gp.comparison->flops_ratio > 2.0);
    CHECK(gp.comparison->params_ratio > 4.0);
}

TEST_CASE("report formats")
{
    const auto rep = model_cost(build_model(ModelConfig::gpu_net({8, 16, 32, 64, 128}, 1)), 96, 96);
    const auto json = format_json(rep);
    CHECK(json.find("\"rows\"") != std::string::npos);
    CHECK(json.find("\"params\"") != std::string::npos);
    CHECK(json.find("\"flops\"") != std::string::npos);
    CHECK(json.find(std::to_string(rep.total_flops)) != std::string::npos);
    const auto table = format_table(rep);
    CHECK(table.find("enc0") != std::string::npos);
    CHECK(table.find("head") != std::string::npos);
}
