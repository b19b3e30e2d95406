#pragma once

// Forward and backward implementations of the network primitives.
//
// All functions are re-entrant: they mutate only their return values and the
// gradient accumulators of the ParamTensors passed to backward functions.

#include <cstdint>
#include <vector>

#include "gpunet/tensor.hpp"

namespace gpunet {

struct ConvSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t dilation = 1;
    std::size_t groups = 1;
    bool bias = true;

    /// Throws ConfigError when a field is zero or channels are not divisible by groups.
    void validate() const;
    /// floor((in + 2p - d(k-1) - 1)/s) + 1; throws ShapeError when that is < 1.
    std::size_t output_size(std::size_t in) const;
    Shape4 weight_shape() const { return {out_channels, in_channels / groups, kernel, kernel}; }
};

/// Stride-2 upsampling convolution. Weight layout is (in, out, k, k).
struct TransposedConvSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 3;
    std::size_t stride = 2;
    std::size_t padding = 1;
    std::size_t output_padding = 1;
    bool bias = true;

    void validate() const;
    /// (in - 1) * stride - 2 * padding + (kernel - 1) + output_padding + 1
    std::size_t output_size(std::size_t in) const;
    Shape4 weight_shape() const { return {in_channels, out_channels, kernel, kernel}; }
};

// --- convolution -----------------------------------------------------------

/// Each output element accumulates its taps in (input channel, kernel row,
/// kernel column) order starting from zero; the bias is added last.
template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ParamTensor<T>& w, const ParamTensor<T>* bias,
                          const ConvSpec& spec);

/// Returns dL/dx and accumulates dL/dw (and dL/db when bias is non-null).
template <typename T>
Tensor4<T> conv2d_backward(const Tensor4<T>& grad_y, const Tensor4<T>& saved_x, ParamTensor<T>& w,
                           ParamTensor<T>* bias, const ConvSpec& spec);

template <typename T>
Tensor4<T> transposed_conv2d_forward(const Tensor4<T>& x, const ParamTensor<T>& w, const ParamTensor<T>* bias,
                                     const TransposedConvSpec& spec);

template <typename T>
Tensor4<T> transposed_conv2d_backward(const Tensor4<T>& grad_y, const Tensor4<T>& saved_x, ParamTensor<T>& w,
                                      ParamTensor<T>* bias, const TransposedConvSpec& spec);

// --- pooling ---------------------------------------------------------------

template <typename T>
struct MaxPoolResult {
    Tensor4<T> output;
    /// Flat index into the input tensor for every output element.
    std::vector<std::uint32_t> argmax;
};

/// 2x2 window, stride 2. Ties go to the first element in row-major order.
template <typename T>
MaxPoolResult<T> maxpool2d_forward(const Tensor4<T>& x);

template <typename T>
Tensor4<T> maxpool2d_backward(const Tensor4<T>& grad_y, const std::vector<std::uint32_t>& argmax,
                              const Shape4& input_shape);

// --- batch normalization ---------------------------------------------------

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
struct BatchNormState {
    Tensor4<T> running_mean;  // (1, c, 1, 1)
    Tensor4<T> running_var;   // (1, c, 1, 1)

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(Shape4{1, channels, 1, 1}, T(0)), running_var(Shape4{1, channels, 1, 1}, T(1))
    {
    }
};

/// What backward needs from a forward call.
template <typename T>
struct BatchNormCache {
    Tensor4<T> x_hat;
    std::vector<T> inv_std;
    Mode mode = Mode::train;
};

/// Train mode normalizes with batch statistics over (batch, h, w) and updates
/// the running statistics (unbiased variance); eval mode uses running statistics.
template <typename T>
Tensor4<T> batchnorm2d_forward(const Tensor4<T>& x, const ParamTensor<T>& gamma, const ParamTensor<T>& beta,
                               BatchNormState<T>& state, Mode mode, BatchNormCache<T>* cache);

template <typename T>
Tensor4<T> batchnorm2d_backward(const Tensor4<T>& grad_y, const BatchNormCache<T>& cache, ParamTensor<T>& gamma,
                                ParamTensor<T>& beta);

// --- elementwise -----------------------------------------------------------

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x);
/// Subgradient at exactly zero is zero.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& grad_y, const Tensor4<T>& saved_x);

template <typename T>
Tensor4<T> sigmoid_forward(const Tensor4<T>& x);
template <typename T>
Tensor4<T> sigmoid_backward(const Tensor4<T>& grad_y, const Tensor4<T>& saved_y);

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b);

// --- channel concatenation -------------------------------------------------

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b);

/// Channels [first, first + count) of x.
template <typename T>
Tensor4<T> slice_channels(const Tensor4<T>& x, std::size_t first, std::size_t count);

// --- loss ------------------------------------------------------------------

inline constexpr double kBceEps = 1e-7;

/// Mean binary cross entropy. Predictions are clamped to [eps, 1 - eps]
/// before the logarithm; targets must be exactly 0 or 1.
template <typename T>
double bce_loss(const Tensor4<T>& pred, const Tensor4<T>& target);

/// d(bce_loss)/d(pred), evaluated at the clamped prediction.
template <typename T>
Tensor4<T> bce_backward(const Tensor4<T>& pred, const Tensor4<T>& target);

// --- branch tracing ------------------------------------------------------------

/// Fingerprints of the branch decisions taken by piecewise ops (ReLU signs,
/// max-pool winners, BCE clamping) on the calling thread while recording.
/// Finite-difference checks use it to spot stencils that straddle a kink.
class BranchTrace {
public:
    static void start();
    static std::vector<std::uint64_t> stop();
    static bool recording();
    static void record(std::uint64_t fingerprint);
};

}  // namespace gpunet
