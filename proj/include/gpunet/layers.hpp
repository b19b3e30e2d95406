#pragma once

// Stateful wrappers around the primitives: each layer owns its parameters and
// caches what its backward pass needs from the most recent forward call.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gpunet/ops.hpp"

namespace gpunet {

template <typename T>
struct NamedParam {
    std::string name;
    ParamTensor<T>* param;
};

template <typename T>
struct NamedBuffer {
    std::string name;
    Tensor4<T>* tensor;
};

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;

    virtual Tensor4<T> forward(const Tensor4<T>& x, Mode mode) = 0;
    /// Returns dL/dx for the most recent forward input; accumulates parameter grads.
    virtual Tensor4<T> backward(const Tensor4<T>& grad_y) = 0;

    virtual void collect_params(const std::string& /*prefix*/, std::vector<NamedParam<T>>& /*out*/) {}
    virtual void collect_buffers(const std::string& /*prefix*/, std::vector<NamedBuffer<T>>& /*out*/) {}
    virtual void init(std::mt19937_64& /*rng*/) {}
};

/// Uniform in [-bound, bound) from the top 53 bits of the engine, so
/// initialization is identical across standard library implementations.
double uniform_symmetric(std::mt19937_64& rng, double bound);

/// Kaiming-uniform for ReLU networks: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
void kaiming_uniform(Tensor4<T>& w, std::size_t fan_in, std::mt19937_64& rng);

template <typename T>
class Conv2d final : public Layer<T> {
public:
    explicit Conv2d(const ConvSpec& spec);

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
    void init(std::mt19937_64& rng) override;

    const ConvSpec& spec() const { return spec_; }
    ParamTensor<T>& weight() { return weight_; }
    ParamTensor<T>* bias() { return spec_.bias ? &bias_ : nullptr; }

private:
    ConvSpec spec_;
    ParamTensor<T> weight_;
    ParamTensor<T> bias_;
    Tensor4<T> input_;
};

template <typename T>
class TransposedConv2d final : public Layer<T> {
public:
    explicit TransposedConv2d(const TransposedConvSpec& spec);

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
    void init(std::mt19937_64& rng) override;

    ParamTensor<T>& weight() { return weight_; }

private:
    TransposedConvSpec spec_;
    ParamTensor<T> weight_;
    ParamTensor<T> bias_;
    Tensor4<T> input_;
};

template <typename T>
class BatchNorm2d final : public Layer<T> {
public:
    explicit BatchNorm2d(std::size_t channels);

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
    void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) override;
    void init(std::mt19937_64& rng) override;

    ParamTensor<T>& gamma() { return gamma_; }
    ParamTensor<T>& beta() { return beta_; }
    BatchNormState<T>& state() { return state_; }

private:
    ParamTensor<T> gamma_;
    ParamTensor<T> beta_;
    BatchNormState<T> state_;
    BatchNormCache<T> cache_;
};

template <typename T>
class ReLU final : public Layer<T> {
public:
    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;

private:
    Tensor4<T> input_;
};

template <typename T>
class Sigmoid final : public Layer<T> {
public:
    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;

private:
    Tensor4<T> output_;
};

template <typename T>
class MaxPool2d final : public Layer<T> {
public:
    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;

private:
    Shape4 input_shape_{};
    std::vector<std::uint32_t> argmax_;
};

}  // namespace gpunet
