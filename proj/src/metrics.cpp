#include "gpunet/metrics.hpp"

#include <json.hpp>

namespace gpunet {

template <typename T>
Tensor4<T> binarize(const Tensor4<T>& prob, double threshold)
{
    Tensor4<T> mask(prob.shape());
    for (std::size_t i = 0; i < prob.size(); ++i) {
        const T p = prob[i];
        if (!(p >= T(0) && p <= T(1)))
            throw ValueError("binarize: probability " + std::to_string(static_cast<double>(p)) + " outside [0,1]");
        mask[i] = static_cast<double>(p) >= threshold ? T(1) : T(0);
    }
    return mask;
}

template <typename T>
ConfusionCounts confusion(const Tensor4<T>& gt, const Tensor4<T>& sr)
{
    if (gt.shape() != sr.shape())
        throw ShapeError("confusion: mask shapes " + to_string(gt.shape()) + " and " + to_string(sr.shape()) +
                         " differ");
    ConfusionCounts cc;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const T g = gt[i], s = sr[i];
        if ((g != T(0) && g != T(1)) || (s != T(0) && s != T(1)))
            throw ValueError("confusion: masks must be binary");
        if (g == T(1))
            (s == T(1) ? cc.tp : cc.fn)++;
        else
            (s == T(1) ? cc.fp : cc.tn)++;
    }
    return cc;
}

namespace {

void require_pixels(const ConfusionCounts& cc)
{
    if (cc.total() == 0)
        throw ValueError("metrics need at least one pixel");
}

}  // namespace

double accuracy(const ConfusionCounts& cc)
{
    require_pixels(cc);
    return static_cast<double>(cc.tp + cc.tn) / static_cast<double>(cc.total());
}

double f1(const ConfusionCounts& cc)
{
    require_pixels(cc);
    const std::uint64_t denom = 2 * cc.tp + cc.fp + cc.fn;  // |GT| + |SR|
    if (denom == 0)
        return 1.0;
    return static_cast<double>(2 * cc.tp) / static_cast<double>(denom);
}

double jaccard(const ConfusionCounts& cc)
{
    require_pixels(cc);
    const std::uint64_t uni = cc.tp + cc.fp + cc.fn;
    if (uni == 0)
        return 1.0;
    return static_cast<double>(cc.tp) / static_cast<double>(uni);
}

MetricsRecord metrics_from(const ConfusionCounts& cc)
{
    return {accuracy(cc), f1(cc), jaccard(cc), cc};
}

void MetricsAccumulator::add_image(const ConfusionCounts& cc)
{
    pooled_ += cc;
    if (mode_ == Averaging::per_image) {
        sum_ac_ += accuracy(cc);
        sum_f1_ += f1(cc);
        sum_js_ += jaccard(cc);
    }
    ++images_;
}

MetricsRecord MetricsAccumulator::result() const
{
    if (images_ == 0)
        throw ValueError("no images were evaluated");
    if (mode_ == Averaging::pooled)
        return metrics_from(pooled_);
    const double n = static_cast<double>(images_);
    return {sum_ac_ / n, sum_f1_ / n, sum_js_ / n, pooled_};
}

std::string to_json(const MetricsRecord& m)
{
    nlohmann::ordered_json j{{"ac", m.ac},          {"f1", m.f1},          {"js", m.js},
                             {"tp", m.counts.tp}, {"tn", m.counts.tn}, {"fp", m.counts.fp},
                             {"fn", m.counts.fn}};
    return j.dump();
}

template Tensor4<float> binarize(const Tensor4<float>&, double);
template Tensor4<double> binarize(const Tensor4<double>&, double);
template ConfusionCounts confusion(const Tensor4<float>&, const Tensor4<float>&);
template ConfusionCounts confusion(const Tensor4<double>&, const Tensor4<double>&);

}  // namespace gpunet
