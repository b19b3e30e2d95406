#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gpunet/data.hpp"
#include "gpunet/metrics.hpp"
#include "gpunet/model.hpp"

namespace gpunet {

/// Non-finite loss during training. The best checkpoint written so far is
/// left untouched.
class DivergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

enum class OptimizerKind { adam, sgd };

std::string to_string(OptimizerKind kind);
std::optional<OptimizerKind> parse_optimizer(const std::string& name);

struct TrainConfig {
    std::size_t epochs = 100;
    double learning_rate = 1e-3;
    std::size_t batch_size = 4;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::adam;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double momentum = 0.0;  // SGD only
    std::size_t eval_every = 1;
    Averaging averaging = Averaging::pooled;
    double threshold = 0.5;
    /// Where the best-validation-JS model is saved; empty disables saving.
    std::filesystem::path checkpoint_path;

    /// lr may be 0 (frozen weights); epochs, batch and eval cadence must be positive.
    void validate() const;
};

template <typename T>
class Optimizer {
public:
    virtual ~Optimizer() = default;
    /// Applies one update from the accumulated grads. Throws NumericError when
    /// a gradient is non-finite, before touching any parameter.
    virtual void step(const std::vector<NamedParam<T>>& params) = 0;
};

template <typename T>
class Sgd final : public Optimizer<T> {
public:
    explicit Sgd(double lr, double momentum = 0.0) : lr_(lr), momentum_(momentum) {}
    void step(const std::vector<NamedParam<T>>& params) override;

private:
    double lr_, momentum_;
    std::vector<std::vector<T>> velocity_;
};

template <typename T>
class Adam final : public Optimizer<T> {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps)
    {
    }
    void step(const std::vector<NamedParam<T>>& params) override;

private:
    double lr_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const TrainConfig& cfg);

/// Stacks samples[indices] into an (n,c,h,w) image batch and (n,1,h,w) mask batch.
template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> stack_batch(const std::vector<Sample>& samples,
                                               const std::vector<std::size_t>& indices);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    std::optional<MetricsRecord> val;
    bool saved = false;
};

/// One structured-text history line: {"epoch":..,"train_loss":..,"val":{..},"saved":..}
std::string to_json(const EpochRecord& r);

struct TrainResult {
    std::vector<EpochRecord> history;
    double best_js = -1.0;
    std::size_t best_epoch = 0;
};

/// Mini-batch BCE training in the order given by a per-epoch shuffle seeded
/// from cfg.seed. Parameters are used as initialized by the caller. After
/// each evaluation the model is checkpointed when validation JS strictly
/// improves; with an empty validation set the latest epoch is saved instead.
template <typename T>
TrainResult train(Network<T>& net, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Eval-mode forward per image, thresholded at `threshold`.
template <typename T>
MetricsRecord evaluate(Network<T>& net, const std::vector<Sample>& samples, Averaging averaging = Averaging::pooled,
                       double threshold = 0.5);

/// Mean BCE over `samples` in the given mode (no parameter updates).
template <typename T>
double dataset_loss(Network<T>& net, const std::vector<Sample>& samples, Mode mode);

}  // namespace gpunet
