#pragma once

#include <cstdint>
#include <string>

#include "gpunet/tensor.hpp"

namespace gpunet {

struct ConfusionCounts {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

    std::uint64_t total() const { return tp + tn + fp + fn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o)
    {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// 1 where prob >= threshold, else 0. Throws ValueError for values outside [0,1].
template <typename T>
Tensor4<T> binarize(const Tensor4<T>& prob, double threshold = 0.5);

/// Pixelwise tallies; both masks must be strictly binary and equally shaped.
template <typename T>
ConfusionCounts confusion(const Tensor4<T>& gt, const Tensor4<T>& sr);

/// (tp + tn) / total
double accuracy(const ConfusionCounts& cc);
/// 2|GT n SR| / (|GT| + |SR|); 1 when both masks are empty.
double f1(const ConfusionCounts& cc);
/// |GT n SR| / |GT u SR|; 1 when both masks are empty.
double jaccard(const ConfusionCounts& cc);

struct MetricsRecord {
    double ac = 0.0, f1 = 0.0, js = 0.0;
    ConfusionCounts counts;
};

MetricsRecord metrics_from(const ConfusionCounts& cc);

/// Dataset-level aggregation. Pooled sums counts over all images before
/// computing metrics; per-image averages per-image metrics.
enum class Averaging { pooled, per_image };

class MetricsAccumulator {
public:
    explicit MetricsAccumulator(Averaging mode = Averaging::pooled) : mode_(mode) {}

    void add_image(const ConfusionCounts& cc);
    /// Throws ValueError when no image was added.
    MetricsRecord result() const;
    std::size_t images() const { return images_; }

private:
    Averaging mode_;
    ConfusionCounts pooled_;
    double sum_ac_ = 0.0, sum_f1_ = 0.0, sum_js_ = 0.0;
    std::size_t images_ = 0;
};

/// {"ac":..,"f1":..,"js":..,"tp":..,"tn":..,"fp":..,"fn":..}
std::string to_json(const MetricsRecord& m);

}  // namespace gpunet
