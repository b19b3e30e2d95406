#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "gpunet/metrics.hpp"
#include "oracles.hpp"

using namespace gpunet;

namespace {

Tensor4<float> mask(std::size_t h, std::size_t w, std::initializer_list<std::size_t> on)
{
    Tensor4<float> m({1, 1, h, w});
    for (auto i : on)
        m[i] = 1.0f;
    return m;
}

Tensor4<float> random_mask(std::mt19937_64& rng, double density)
{
    std::bernoulli_distribution b(density);
    Tensor4<float> m({1, 1, 8, 8});
    for (auto& v : m.storage())
        v = b(rng) ? 1.0f : 0.0f;
    return m;
}

}  // namespace

TEST_CASE("binarize")
{
    Tensor4<float> p({1, 1, 1, 4}, std::vector<float>{0.5f, 0.49f, 0.51f, 0.0f});
    CHECK(binarize(p).storage() == std::vector<float>{1, 0, 1, 0});
    CHECK(binarize(Tensor4<float>({1, 1, 3, 3}, 0.49f)) == Tensor4<float>({1, 1, 3, 3}, 0.0f));
    CHECK(binarize(p, 0.55).storage() == std::vector<float>{0, 0, 0, 0});
    CHECK_THROWS_AS(binarize(Tensor4<float>({1, 1, 1, 1}, 1.5f)), ValueError);
}

TEST_CASE("the 4x4 worked example")
{
    const auto gt = mask(4, 4, {0, 1, 4, 5});
    const auto sr = mask(4, 4, {1, 5, 6, 7});
    const auto cc = confusion(gt, sr);
    CHECK(cc.tp == 2);
    CHECK(cc.fp == 2);
    CHECK(cc.fn == 2);
    CHECK(cc.tn == 10);
    CHECK(accuracy(cc) == 0.75);
    CHECK(f1(cc) == 0.5);
    CHECK(jaccard(cc) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("degenerate masks")
{
    const auto gt = mask(3, 3, {0, 4, 8});
    auto cc = confusion(gt, gt);
    CHECK(cc.fp == 0);
    CHECK(cc.fn == 0);
    CHECK(accuracy(cc) == 1.0);
    CHECK(f1(cc) == 1.0);
    CHECK(jaccard(cc) == 1.0);

    cc = confusion(gt, mask(3, 3, {}));
    CHECK(f1(cc) == 0.0);
    CHECK(jaccard(cc) == 0.0);

    cc = confusion(mask(3, 3, {}), mask(3, 3, {}));
    CHECK(f1(cc) == 1.0);
    CHECK(jaccard(cc) == 1.0);
    CHECK(accuracy(cc) == 1.0);

    CHECK_THROWS_AS(accuracy(ConfusionCounts{}), ValueError);
    CHECK_THROWS_AS(confusion(gt, mask(3, 2, {})), ShapeError);
    CHECK_THROWS_AS(confusion(gt, Tensor4<float>({1, 1, 3, 3}, 0.5f)), ValueError);
}

TEST_CASE("confusion metrics equal set-based metrics on random masks")
{
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const double density = (trial % 10) / 9.0;
        const auto gt = random_mask(rng, density);
        const auto sr = random_mask(rng, 1.0 - density * 0.5);
        const auto cc = confusion(gt, sr);
        const auto want = oracle::set_metrics(gt, sr);
        CHECK(cc.tp == want.tp);
        CHECK(cc.tn == want.tn);
        CHECK(cc.fp == want.fp);
        CHECK(cc.fn == want.fn);
        CHECK(cc.total() == 64);
        CHECK(accuracy(cc) == want.ac);
        CHECK(f1(cc) == want.f1);
        CHECK(jaccard(cc) == want.js);
        CHECK(jaccard(cc) <= f1(cc));
        // JS and F1 are tied by F1 = 2 JS / (1 + JS).
        CHECK(f1(cc) == doctest::Approx(2 * jaccard(cc) / (1 + jaccard(cc))).epsilon(1e-12));
    }
}

TEST_CASE("metrics are invariant under a joint pixel permutation")
{
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto gt = random_mask(rng, 0.3);
        const auto sr = random_mask(rng, 0.4);
        std::vector<std::size_t> perm(64);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Tensor4<float> pg(gt.shape()), ps(sr.shape());
        for (std::size_t i = 0; i < 64; ++i) {
            pg[i] = gt[perm[i]];
            ps[i] = sr[perm[i]];
        }
        CHECK(confusion(gt, sr) == confusion(pg, ps));
    }
}

TEST_CASE("dataset aggregation")
{
    const auto a = confusion(mask(2, 2, {0}), mask(2, 2, {0}));        // perfect
    const auto b = confusion(mask(2, 2, {0, 1}), mask(2, 2, {2, 3}));  // disjoint

    MetricsAccumulator pooled(Averaging::pooled);
    pooled.add_image(a);
    pooled.add_image(b);
    const auto p = pooled.result();
    CHECK(p.counts.tp == 1);
    CHECK(p.counts.fp == 2);
    CHECK(p.counts.fn == 2);
    CHECK(p.counts.tn == 3);
    CHECK(p.js == doctest::Approx(1.0 / 5.0));
    CHECK(p.ac == doctest::Approx(4.0 / 8.0));

    MetricsAccumulator per(Averaging::per_image);
    per.add_image(a);
    per.add_image(b);
    const auto q = per.result();
    CHECK(q.js == doctest::Approx(0.5));
    CHECK(q.f1 == doctest::Approx(0.5));
    CHECK(q.ac == doctest::Approx((1.0 + 0.0) / 2.0));

    CHECK_THROWS_AS(MetricsAccumulator().result(), ValueError);
}

TEST_CASE("metrics record serialization")
{
    const auto rec = metrics_from(confusion(mask(4, 4, {0, 1, 4, 5}), mask(4, 4, {1, 5, 6, 7})));
    const auto s = to_json(rec);
    CHECK(s.find("\"ac\":0.75") != std::string::npos);
    CHECK(s.find("\"f1\":0.5") != std::string::npos);
    CHECK(s.find("\"tn\":10") != std::string::npos);
}
