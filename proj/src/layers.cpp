#include "gpunet/layers.hpp"

#include <cmath>

namespace gpunet {

double uniform_symmetric(std::mt19937_64& rng, double bound)
{
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return (2.0 * u - 1.0) * bound;
}

template <typename T>
void kaiming_uniform(Tensor4<T>& w, std::size_t fan_in, std::mt19937_64& rng)
{
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.span())
        v = static_cast<T>(uniform_symmetric(rng, bound));
}

// --- Conv2d ----------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(const ConvSpec& spec) : spec_(spec)
{
    spec_.validate();
    weight_ = ParamTensor<T>(spec_.weight_shape());
    if (spec_.bias)
        bias_ = ParamTensor<T>::vector(spec_.out_channels);
}

template <typename T>
Tensor4<T> Conv2d<T>::forward(const Tensor4<T>& x, Mode)
{
    input_ = x;
    return conv2d_forward(x, weight_, bias(), spec_);
}

template <typename T>
Tensor4<T> Conv2d<T>::backward(const Tensor4<T>& grad_y)
{
    return conv2d_backward(grad_y, input_, weight_, bias(), spec_);
}

template <typename T>
void Conv2d<T>::collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out)
{
    out.push_back({prefix + "weight", &weight_});
    if (spec_.bias)
        out.push_back({prefix + "bias", &bias_});
}

template <typename T>
void Conv2d<T>::init(std::mt19937_64& rng)
{
    kaiming_uniform(weight_.value, spec_.in_channels / spec_.groups * spec_.kernel * spec_.kernel, rng);
    if (spec_.bias)
        bias_.value.fill(T(0));
}

// --- TransposedConv2d ------------------------------------------------------

template <typename T>
TransposedConv2d<T>::TransposedConv2d(const TransposedConvSpec& spec) : spec_(spec)
{
    spec_.validate();
    weight_ = ParamTensor<T>(spec_.weight_shape());
    if (spec_.bias)
        bias_ = ParamTensor<T>::vector(spec_.out_channels);
}

template <typename T>
Tensor4<T> TransposedConv2d<T>::forward(const Tensor4<T>& x, Mode)
{
    input_ = x;
    return transposed_conv2d_forward(x, weight_, spec_.bias ? &bias_ : nullptr, spec_);
}

template <typename T>
Tensor4<T> TransposedConv2d<T>::backward(const Tensor4<T>& grad_y)
{
    return transposed_conv2d_backward(grad_y, input_, weight_, spec_.bias ? &bias_ : nullptr, spec_);
}

template <typename T>
void TransposedConv2d<T>::collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out)
{
    out.push_back({prefix + "weight", &weight_});
    if (spec_.bias)
        out.push_back({prefix + "bias", &bias_});
}

template <typename T>
void TransposedConv2d<T>::init(std::mt19937_64& rng)
{
    kaiming_uniform(weight_.value, spec_.in_channels * spec_.kernel * spec_.kernel, rng);
    if (spec_.bias)
        bias_.value.fill(T(0));
}

// --- BatchNorm2d -----------------------------------------------------------

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : gamma_(ParamTensor<T>::vector(channels)), beta_(ParamTensor<T>::vector(channels)), state_(channels)
{
    gamma_.value.fill(T(1));
}

template <typename T>
Tensor4<T> BatchNorm2d<T>::forward(const Tensor4<T>& x, Mode mode)
{
    return batchnorm2d_forward(x, gamma_, beta_, state_, mode, &cache_);
}

template <typename T>
Tensor4<T> BatchNorm2d<T>::backward(const Tensor4<T>& grad_y)
{
    return batchnorm2d_backward(grad_y, cache_, gamma_, beta_);
}

template <typename T>
void BatchNorm2d<T>::collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out)
{
    out.push_back({prefix + "gamma", &gamma_});
    out.push_back({prefix + "beta", &beta_});
}

template <typename T>
void BatchNorm2d<T>::collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out)
{
    out.push_back({prefix + "running_mean", &state_.running_mean});
    out.push_back({prefix + "running_var", &state_.running_var});
}

template <typename T>
void BatchNorm2d<T>::init(std::mt19937_64&)
{
    gamma_.value.fill(T(1));
    beta_.value.fill(T(0));
    state_.running_mean.fill(T(0));
    state_.running_var.fill(T(1));
}

// --- activations / pooling -------------------------------------------------

template <typename T>
Tensor4<T> ReLU<T>::forward(const Tensor4<T>& x, Mode)
{
    input_ = x;
    return relu_forward(x);
}

template <typename T>
Tensor4<T> ReLU<T>::backward(const Tensor4<T>& grad_y)
{
    return relu_backward(grad_y, input_);
}

template <typename T>
Tensor4<T> Sigmoid<T>::forward(const Tensor4<T>& x, Mode)
{
    output_ = sigmoid_forward(x);
    return output_;
}

template <typename T>
Tensor4<T> Sigmoid<T>::backward(const Tensor4<T>& grad_y)
{
    return sigmoid_backward(grad_y, output_);
}

template <typename T>
Tensor4<T> MaxPool2d<T>::forward(const Tensor4<T>& x, Mode)
{
    input_shape_ = x.shape();
    auto r = maxpool2d_forward(x);
    argmax_ = std::move(r.argmax);
    return std::move(r.output);
}

template <typename T>
Tensor4<T> MaxPool2d<T>::backward(const Tensor4<T>& grad_y)
{
    return maxpool2d_backward(grad_y, argmax_, input_shape_);
}

#define GPUNET_INSTANTIATE_LAYERS(T)                                                                                \
    template void kaiming_uniform(Tensor4<T>&, std::size_t, std::mt19937_64&);                                    \
    template class Conv2d<T>;                                                                                      \
    template class TransposedConv2d<T>;                                                                            \
    template class BatchNorm2d<T>;                                                                                 \
    template class ReLU<T>;                                                                                        \
    template class Sigmoid<T>;                                                                                     \
    template class MaxPool2d<T>;

GPUNET_INSTANTIATE_LAYERS(float)
GPUNET_INSTANTIATE_LAYERS(double)

}  // namespace gpunet
