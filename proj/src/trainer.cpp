#include "gpunet/trainer.hpp"

#include <cmath>
#include <limits>
#include <random>

#include <json.hpp>

#include "gpunet/checkpoint.hpp"

namespace gpunet {

std::string to_string(OptimizerKind kind)
{
    return kind == OptimizerKind::adam ? "adam" : "sgd";
}

std::optional<OptimizerKind> parse_optimizer(const std::string& name)
{
    if (name == "adam")
        return OptimizerKind::adam;
    if (name == "sgd")
        return OptimizerKind::sgd;
    return std::nullopt;
}

void TrainConfig::validate() const
{
    if (epochs == 0)
        throw ConfigError("epochs must be positive");
    if (batch_size == 0)
        throw ConfigError("batch size must be positive");
    if (eval_every == 0)
        throw ConfigError("eval cadence must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning rate must be finite and non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0))
        throw ConfigError("invalid adaptive-moment hyperparameters");
    if (!(momentum >= 0.0 && momentum < 1.0))
        throw ConfigError("momentum must lie in [0, 1)");
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw ConfigError("threshold must lie in (0, 1]");
}

namespace {

template <typename T>
void require_finite_grads(const std::vector<NamedParam<T>>& params)
{
    for (const auto& p : params)
        if (!all_finite(std::span<const T>(p.param->grad.data(), p.param->grad.size())))
            throw NumericError("non-finite gradient in " + p.name);
}

template <typename T>
void ensure_state(std::vector<std::vector<T>>& state, const std::vector<NamedParam<T>>& params)
{
    if (state.empty()) {
        for (const auto& p : params)
            state.emplace_back(p.param->size(), T(0));
    } else if (state.size() != params.size()) {
        throw ShapeError("optimizer state does not match the parameter list");
    }
}

std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n)
{
    const std::uint64_t top = std::numeric_limits<std::uint64_t>::max();
    const std::uint64_t limit = top - top % n;
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % n;
}

}  // namespace

template <typename T>
void Sgd<T>::step(const std::vector<NamedParam<T>>& params)
{
    require_finite_grads(params);
    ensure_state(velocity_, params);
    for (std::size_t k = 0; k < params.size(); ++k) {
        T* w = params[k].param->value.data();
        const T* g = params[k].param->grad.data();
        T* vel = velocity_[k].data();
        for (std::size_t i = 0; i < params[k].param->size(); ++i) {
            vel[i] = static_cast<T>(momentum_ * vel[i] + g[i]);
            w[i] = static_cast<T>(w[i] - lr_ * vel[i]);
        }
    }
}

template <typename T>
void Adam<T>::step(const std::vector<NamedParam<T>>& params)
{
    require_finite_grads(params);
    ensure_state(m_, params);
    ensure_state(v_, params);
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        T* w = params[k].param->value.data();
        const T* g = params[k].param->grad.data();
        T* m = m_[k].data();
        T* v = v_[k].data();
        for (std::size_t i = 0; i < params[k].param->size(); ++i) {
            const double gi = g[i];
            const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
            const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            w[i] = static_cast<T>(w[i] - lr_ * (mi / c1) / (std::sqrt(vi / c2) + eps_));
        }
    }
}

template <typename T>
std::unique_ptr<Optimizer<T>> make_optimizer(const TrainConfig& cfg)
{
    if (cfg.optimizer == OptimizerKind::sgd)
        return std::make_unique<Sgd<T>>(cfg.learning_rate, cfg.momentum);
    return std::make_unique<Adam<T>>(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
}

template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> stack_batch(const std::vector<Sample>& samples,
                                               const std::vector<std::size_t>& indices)
{
    if (indices.empty())
        throw ValueError("cannot stack an empty batch");
    const Shape4 is = samples.at(indices[0]).image.shape();
    Tensor4<T> x(Shape4{indices.size(), is.c, is.h, is.w});
    Tensor4<T> y(Shape4{indices.size(), 1, is.h, is.w});
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const Sample& s = samples.at(indices[b]);
        if (s.image.shape() != is || s.mask.shape() != Shape4{1, 1, is.h, is.w})
            throw ShapeError("batch samples must share one shape; " + s.id + " differs");
        std::copy(s.image.data(), s.image.data() + s.image.size(), x.data() + b * is.c * is.plane());
        std::copy(s.mask.data(), s.mask.data() + s.mask.size(), y.data() + b * is.plane());
    }
    return {std::move(x), std::move(y)};
}

std::string to_json(const EpochRecord& r)
{
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    if (r.val)
        j["val"] = nlohmann::ordered_json::parse(to_json(*r.val));
    j["saved"] = r.saved;
    return j.dump();
}

template <typename T>
TrainResult train(Network<T>& net, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch)
{
    cfg.validate();
    if (train_set.empty())
        throw ValueError("training set is empty");
    auto optimizer = make_optimizer<T>(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(train_set.size());
    TrainResult result;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i)
            order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[bounded(rng, i)]);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                               order.begin() + static_cast<long>(end));
            auto [x, y] = stack_batch<T>(train_set, idx);
            net.zero_grad();
            double loss = 0.0;
            // Any non-finite value inside a step (activations, loss or gradients) is divergence.
            try {
                const Tensor4<T> p = net.forward(x, Mode::train);
                loss = bce_loss(p, y);
                net.backward(bce_backward(p, y));
                optimizer->step(net.params());
            } catch (const NumericError& e) {
                throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch));
            }
            loss_sum += loss * static_cast<double>(idx.size());
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        const bool eval_now = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        if (!val_set.empty() && eval_now) {
            rec.val = evaluate(net, val_set, cfg.averaging, cfg.threshold);
            if (rec.val->js > result.best_js) {
                result.best_js = rec.val->js;
                result.best_epoch = epoch;
                if (!cfg.checkpoint_path.empty()) {
                    save_checkpoint(net, cfg.checkpoint_path);
                    rec.saved = true;
                }
            }
        } else if (val_set.empty() && !cfg.checkpoint_path.empty()) {
            save_checkpoint(net, cfg.checkpoint_path);
            rec.saved = true;
        }
        result.history.push_back(rec);
        if (on_epoch)
            on_epoch(rec);
    }
    return result;
}

template <typename T>
MetricsRecord evaluate(Network<T>& net, const std::vector<Sample>& samples, Averaging averaging, double threshold)
{
    if (samples.empty())
        throw ValueError("cannot evaluate an empty split");
    MetricsAccumulator acc(averaging);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto [x, y] = stack_batch<T>(samples, {i});
        const Tensor4<T> p = net.forward(x, Mode::eval);
        acc.add_image(confusion(y, binarize(p, threshold)));
    }
    return acc.result();
}

template <typename T>
double dataset_loss(Network<T>& net, const std::vector<Sample>& samples, Mode mode)
{
    if (samples.empty())
        throw ValueError("cannot compute loss on an empty split");
    double sum = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto [x, y] = stack_batch<T>(samples, {i});
        sum += bce_loss(net.forward(x, mode), y);
    }
    return sum / static_cast<double>(samples.size());
}

#define GPUNET_INSTANTIATE_TRAINER(T)                                                                          \
    template class Sgd<T>;                                                                                     \
    template class Adam<T>;                                                                                    \
    template std::unique_ptr<Optimizer<T>> make_optimizer<T>(const TrainConfig&);                              \
    template std::pair<Tensor4<T>, Tensor4<T>> stack_batch<T>(const std::vector<Sample>&,                      \
                                                              const std::vector<std::size_t>&);                \
    template TrainResult train(Network<T>&, const std::vector<Sample>&, const std::vector<Sample>&,            \
                               const TrainConfig&, const std::function<void(const EpochRecord&)>&);            \
    template MetricsRecord evaluate(Network<T>&, const std::vector<Sample>&, Averaging, double);               \
    template double dataset_loss(Network<T>&, const std::vector<Sample>&, Mode);

GPUNET_INSTANTIATE_TRAINER(float)
GPUNET_INSTANTIATE_TRAINER(double)

}  // namespace gpunet
