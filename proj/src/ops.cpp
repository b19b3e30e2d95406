#include "gpunet/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace gpunet {

namespace {

struct Fnv1a {
    std::uint64_t value = 0xcbf29ce484222325ull;

    void add(std::uint64_t v)
    {
        value ^= v;
        value *= 0x100000001b3ull;
    }
};

struct TraceState {
    bool on = false;
    std::vector<std::uint64_t> marks;
};

thread_local TraceState trace_state;

}  // namespace

void BranchTrace::start()
{
    trace_state.on = true;
    trace_state.marks.clear();
}

std::vector<std::uint64_t> BranchTrace::stop()
{
    trace_state.on = false;
    return std::move(trace_state.marks);
}

bool BranchTrace::recording()
{
    return trace_state.on;
}

void BranchTrace::record(std::uint64_t fingerprint)
{
    if (trace_state.on)
        trace_state.marks.push_back(fingerprint);
}

std::string to_string(const Shape4& s)
{
    return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
           std::to_string(s.w) + ")";
}

namespace {

void require(bool cond, const std::string& msg)
{
    if (!cond)
        throw ShapeError(msg);
}

template <typename T>
void check_bias(const ParamTensor<T>* bias, std::size_t channels, const char* op)
{
    if (bias)
        require(bias->value.shape() == Shape4{1, channels, 1, 1},
                std::string(op) + ": bias shape " + to_string(bias->value.shape()) + " does not match " +
                    std::to_string(channels) + " channels");
}

template <typename T>
void add_bias(Tensor4<T>& y, const ParamTensor<T>& bias)
{
    const auto& s = y.shape();
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c) {
            T* p = y.plane(b, c);
            const T v = bias.value[c];
            for (std::size_t i = 0; i < s.plane(); ++i)
                p[i] += v;
        }
}

template <typename T>
void accumulate_bias_grad(const Tensor4<T>& grad_y, ParamTensor<T>& bias)
{
    const auto& s = grad_y.shape();
    for (std::size_t c = 0; c < s.c; ++c) {
        double acc = 0.0;
        for (std::size_t b = 0; b < s.n; ++b) {
            const T* p = grad_y.plane(b, c);
            for (std::size_t i = 0; i < s.plane(); ++i)
                acc += p[i];
        }
        bias.grad[c] += static_cast<T>(acc);
    }
}

bool is_depthwise(const ConvSpec& s)
{
    return s.groups > 1 && s.groups == s.in_channels && s.groups == s.out_channels;
}

bool is_pointwise(const ConvSpec& s)
{
    return s.kernel == 1 && s.stride == 1 && s.padding == 0;
}

detail::ConvGeometry group_geometry(const ConvSpec& spec, const Shape4& xs, std::size_t oh, std::size_t ow)
{
    return {spec.in_channels / spec.groups, xs.h, xs.w, spec.kernel, spec.stride, spec.padding, spec.dilation, oh, ow};
}

// Depth-wise convolution evaluated directly; taps of one output element are
// accumulated in (kernel row, kernel column) order, like the grouped GEMM path.
template <typename T>
void depthwise_forward(const Tensor4<T>& x, const T* w, const ConvSpec& spec, Tensor4<T>& y)
{
    const auto& xs = x.shape();
    const auto& ys = y.shape();
    const std::size_t k = spec.kernel;
    for (std::size_t b = 0; b < xs.n; ++b) {
        for (std::size_t c = 0; c < xs.c; ++c) {
            const T* xp = x.plane(b, c);
            T* yp = y.plane(b, c);
            for (std::size_t kh = 0; kh < k; ++kh) {
                const long long off_h = static_cast<long long>(kh * spec.dilation) - static_cast<long long>(spec.padding);
                std::size_t oh_lo, oh_hi;
                detail::valid_range(ys.h, xs.h, spec.stride, off_h, oh_lo, oh_hi);
                for (std::size_t kw = 0; kw < k; ++kw) {
                    const long long off_w =
                        static_cast<long long>(kw * spec.dilation) - static_cast<long long>(spec.padding);
                    std::size_t ow_lo, ow_hi;
                    detail::valid_range(ys.w, xs.w, spec.stride, off_w, ow_lo, ow_hi);
                    const T wv = w[(c * k + kh) * k + kw];
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const T* src = xp + static_cast<std::size_t>(static_cast<long long>(oh * spec.stride) + off_h) * xs.w;
                        T* dst = yp + oh * ys.w;
                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                            dst[ow] += wv * src[static_cast<long long>(ow * spec.stride) + off_w];
                    }
                }
            }
        }
    }
}

template <typename T>
void depthwise_backward(const Tensor4<T>& gy, const Tensor4<T>& x, const T* w, T* gw, const ConvSpec& spec,
                        Tensor4<T>& gx)
{
    const auto& xs = x.shape();
    const auto& ys = gy.shape();
    const std::size_t k = spec.kernel;
    for (std::size_t c = 0; c < xs.c; ++c) {
        for (std::size_t kh = 0; kh < k; ++kh) {
            const long long off_h = static_cast<long long>(kh * spec.dilation) - static_cast<long long>(spec.padding);
            std::size_t oh_lo, oh_hi;
            detail::valid_range(ys.h, xs.h, spec.stride, off_h, oh_lo, oh_hi);
            for (std::size_t kw = 0; kw < k; ++kw) {
                const long long off_w = static_cast<long long>(kw * spec.dilation) - static_cast<long long>(spec.padding);
                std::size_t ow_lo, ow_hi;
                detail::valid_range(ys.w, xs.w, spec.stride, off_w, ow_lo, ow_hi);
                const std::size_t widx = (c * k + kh) * k + kw;
                const T wv = w[widx];
                double gacc = 0.0;
                for (std::size_t b = 0; b < xs.n; ++b) {
                    const T* xp = x.plane(b, c);
                    const T* gyp = gy.plane(b, c);
                    T* gxp = gx.plane(b, c);
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const std::size_t row = static_cast<std::size_t>(static_cast<long long>(oh * spec.stride) + off_h) * xs.w;
                        const T* src = xp + row;
                        T* gdst = gxp + row;
                        const T* g = gyp + oh * ys.w;
                        T racc = T(0);
                        for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                            const long long ix = static_cast<long long>(ow * spec.stride) + off_w;
                            racc += g[ow] * src[ix];
                            gdst[ix] += wv * g[ow];
                        }
                        gacc += racc;
                    }
                }
                gw[widx] += static_cast<T>(gacc);
            }
        }
    }
}

}  // namespace

void ConvSpec::validate() const
{
    if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || dilation == 0 || groups == 0)
        throw ConfigError("convolution spec fields must be positive");
    if (in_channels % groups != 0 || out_channels % groups != 0)
        throw ConfigError("convolution channels (" + std::to_string(in_channels) + ", " +
                          std::to_string(out_channels) + ") not divisible by groups " + std::to_string(groups));
}

std::size_t ConvSpec::output_size(std::size_t in) const
{
    const long long span = static_cast<long long>(dilation * (kernel - 1) + 1);
    const long long padded = static_cast<long long>(in + 2 * padding);
    if (padded < span)
        throw ShapeError("convolution output size would be non-positive for input extent " + std::to_string(in));
    return static_cast<std::size_t>((padded - span) / static_cast<long long>(stride)) + 1;
}

void TransposedConvSpec::validate() const
{
    if (in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0)
        throw ConfigError("transposed convolution spec fields must be positive");
    if (output_padding >= stride)
        throw ConfigError("transposed convolution output_padding must be smaller than stride");
}

std::size_t TransposedConvSpec::output_size(std::size_t in) const
{
    const long long out = (static_cast<long long>(in) - 1) * static_cast<long long>(stride) -
                          2 * static_cast<long long>(padding) + static_cast<long long>(kernel - 1) +
                          static_cast<long long>(output_padding) + 1;
    if (in == 0 || out < 1)
        throw ShapeError("transposed convolution output size would be non-positive");
    return static_cast<std::size_t>(out);
}

// --- convolution -----------------------------------------------------------

template <typename T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, const ParamTensor<T>& w, const ParamTensor<T>* bias,
                          const ConvSpec& spec)
{
    spec.validate();
    const auto& xs = x.shape();
    require(xs.c == spec.in_channels, "conv2d: input has " + std::to_string(xs.c) + " channels, spec expects " +
                                          std::to_string(spec.in_channels));
    require(w.value.shape() == spec.weight_shape(),
            "conv2d: weight shape " + to_string(w.value.shape()) + " != " + to_string(spec.weight_shape()));
    check_bias(bias, spec.out_channels, "conv2d");
    const std::size_t oh = spec.output_size(xs.h);
    const std::size_t ow = spec.output_size(xs.w);
    Tensor4<T> y(Shape4{xs.n, spec.out_channels, oh, ow});

    if (is_depthwise(spec)) {
        depthwise_forward(x, w.value.data(), spec, y);
    } else {
        const auto g = group_geometry(spec, xs, oh, ow);
        const std::size_t K = g.patch();
        const std::size_t P = g.pixels();
        const std::size_t ng = spec.out_channels / spec.groups;
        const bool direct = is_pointwise(spec);
        std::vector<T> col(direct ? 0 : K * P);
        for (std::size_t b = 0; b < xs.n; ++b) {
            for (std::size_t grp = 0; grp < spec.groups; ++grp) {
                const T* xin = x.plane(b, grp * g.channels);
                const T* B = xin;
                if (!direct) {
                    detail::im2col(xin, g, col.data());
                    B = col.data();
                }
                detail::gemm_acc(ng, P, K, w.value.data() + grp * ng * K, K, B, P, y.plane(b, grp * ng), P);
            }
        }
    }
    if (bias)
        add_bias(y, *bias);
    ensure_finite(y, "conv2d_forward");
    return y;
}

template <typename T>
Tensor4<T> conv2d_backward(const Tensor4<T>& grad_y, const Tensor4<T>& saved_x, ParamTensor<T>& w,
                           ParamTensor<T>* bias, const ConvSpec& spec)
{
    spec.validate();
    const auto& xs = saved_x.shape();
    require(xs.c == spec.in_channels, "conv2d_backward: saved input channel mismatch");
    require(w.value.shape() == spec.weight_shape(), "conv2d_backward: weight shape mismatch");
    check_bias(bias, spec.out_channels, "conv2d_backward");
    const std::size_t oh = spec.output_size(xs.h);
    const std::size_t ow = spec.output_size(xs.w);
    require(grad_y.shape() == Shape4{xs.n, spec.out_channels, oh, ow},
            "conv2d_backward: grad shape " + to_string(grad_y.shape()) + " does not match forward output " +
                to_string(Shape4{xs.n, spec.out_channels, oh, ow}));

    Tensor4<T> grad_x(xs);
    if (is_depthwise(spec)) {
        depthwise_backward(grad_y, saved_x, w.value.data(), w.grad.data(), spec, grad_x);
    } else {
        const auto g = group_geometry(spec, xs, oh, ow);
        const std::size_t K = g.patch();
        const std::size_t P = g.pixels();
        const std::size_t ng = spec.out_channels / spec.groups;
        const bool direct = is_pointwise(spec);
        std::vector<T> col(direct ? 0 : K * P);
        std::vector<T> col_t(K * P);
        std::vector<T> grad_col(direct ? 0 : K * P);
        std::vector<T> w_t(K * ng);
        for (std::size_t grp = 0; grp < spec.groups; ++grp) {
            const T* wg = w.value.data() + grp * ng * K;
            T* gwg = w.grad.data() + grp * ng * K;
            detail::transpose(ng, K, wg, w_t.data());
            for (std::size_t b = 0; b < xs.n; ++b) {
                const T* xin = saved_x.plane(b, grp * g.channels);
                const T* gy = grad_y.plane(b, grp * ng);
                const T* cols = xin;
                if (!direct) {
                    detail::im2col(xin, g, col.data());
                    cols = col.data();
                }
                // dW += dY * col^T
                detail::transpose(K, P, cols, col_t.data());
                detail::gemm_acc(ng, K, P, gy, P, col_t.data(), K, gwg, K);
                // dcol = W^T * dY
                T* gx = grad_x.plane(b, grp * g.channels);
                if (direct) {
                    detail::gemm_acc(K, P, ng, w_t.data(), ng, gy, P, gx, P);
                } else {
                    std::fill(grad_col.begin(), grad_col.end(), T(0));
                    detail::gemm_acc(K, P, ng, w_t.data(), ng, gy, P, grad_col.data(), P);
                    detail::col2im_add(grad_col.data(), g, gx);
                }
            }
        }
    }
    if (bias)
        accumulate_bias_grad(grad_y, *bias);
    ensure_finite(grad_x, "conv2d_backward");
    return grad_x;
}

namespace {

// The convolution whose data-gradient is the transposed convolution: it maps
// the (large) transposed output back onto the (small) transposed input.
detail::ConvGeometry transposed_geometry(const TransposedConvSpec& spec, std::size_t out_h, std::size_t out_w,
                                         std::size_t in_h, std::size_t in_w)
{
    return {spec.out_channels, out_h, out_w, spec.kernel, spec.stride, spec.padding, 1, in_h, in_w};
}

}  // namespace

template <typename T>
Tensor4<T> transposed_conv2d_forward(const Tensor4<T>& x, const ParamTensor<T>& w, const ParamTensor<T>* bias,
                                     const TransposedConvSpec& spec)
{
    spec.validate();
    const auto& xs = x.shape();
    require(xs.c == spec.in_channels, "transposed_conv2d: input has " + std::to_string(xs.c) +
                                          " channels, spec expects " + std::to_string(spec.in_channels));
    require(w.value.shape() == spec.weight_shape(), "transposed_conv2d: weight shape " +
                                                        to_string(w.value.shape()) + " != " +
                                                        to_string(spec.weight_shape()));
    check_bias(bias, spec.out_channels, "transposed_conv2d");
    const std::size_t oh = spec.output_size(xs.h);
    const std::size_t ow = spec.output_size(xs.w);
    Tensor4<T> y(Shape4{xs.n, spec.out_channels, oh, ow});

    const auto g = transposed_geometry(spec, oh, ow, xs.h, xs.w);
    const std::size_t K = g.patch();  // out_channels * k * k
    const std::size_t P = g.pixels(); // input pixels
    const std::size_t C = spec.in_channels;
    std::vector<T> w_t(K * C);
    detail::transpose(C, K, w.value.data(), w_t.data());
    std::vector<T> col(K * P);
    for (std::size_t b = 0; b < xs.n; ++b) {
        std::fill(col.begin(), col.end(), T(0));
        detail::gemm_acc(K, P, C, w_t.data(), C, x.plane(b, 0), P, col.data(), P);
        detail::col2im_add(col.data(), g, y.plane(b, 0));
    }
    if (bias)
        add_bias(y, *bias);
    ensure_finite(y, "transposed_conv2d_forward");
    return y;
}

template <typename T>
Tensor4<T> transposed_conv2d_backward(const Tensor4<T>& grad_y, const Tensor4<T>& saved_x, ParamTensor<T>& w,
                                      ParamTensor<T>* bias, const TransposedConvSpec& spec)
{
    spec.validate();
    const auto& xs = saved_x.shape();
    require(xs.c == spec.in_channels, "transposed_conv2d_backward: saved input channel mismatch");
    require(w.value.shape() == spec.weight_shape(), "transposed_conv2d_backward: weight shape mismatch");
    check_bias(bias, spec.out_channels, "transposed_conv2d_backward");
    const std::size_t oh = spec.output_size(xs.h);
    const std::size_t ow = spec.output_size(xs.w);
    require(grad_y.shape() == Shape4{xs.n, spec.out_channels, oh, ow},
            "transposed_conv2d_backward: grad shape " + to_string(grad_y.shape()) + " does not match forward output");

    const auto g = transposed_geometry(spec, oh, ow, xs.h, xs.w);
    const std::size_t K = g.patch();
    const std::size_t P = g.pixels();
    const std::size_t C = spec.in_channels;
    Tensor4<T> grad_x(xs);
    std::vector<T> col(K * P);
    std::vector<T> col_t(K * P);
    for (std::size_t b = 0; b < xs.n; ++b) {
        detail::im2col(grad_y.plane(b, 0), g, col.data());
        // dx = W * col
        detail::gemm_acc(C, P, K, w.value.data(), K, col.data(), P, grad_x.plane(b, 0), P);
        // dW += x * col^T
        detail::transpose(K, P, col.data(), col_t.data());
        detail::gemm_acc(C, K, P, saved_x.plane(b, 0), P, col_t.data(), K, w.grad.data(), K);
    }
    if (bias)
        accumulate_bias_grad(grad_y, *bias);
    ensure_finite(grad_x, "transposed_conv2d_backward");
    return grad_x;
}

// --- pooling ---------------------------------------------------------------

template <typename T>
MaxPoolResult<T> maxpool2d_forward(const Tensor4<T>& x)
{
    const auto& s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0)
        throw ShapeError("maxpool2d: spatial dims " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                         " must be even");
    if (s.numel() > std::numeric_limits<std::uint32_t>::max())
        throw ShapeError("maxpool2d: tensor too large for 32-bit argmax indices");
    MaxPoolResult<T> r{Tensor4<T>(Shape4{s.n, s.c, s.h / 2, s.w / 2}), {}};
    r.argmax.resize(r.output.size());
    std::size_t o = 0;
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c)
            for (std::size_t y = 0; y < s.h; y += 2)
                for (std::size_t xx = 0; xx < s.w; xx += 2, ++o) {
                    std::size_t best = x.index(b, c, y, xx);
                    const std::size_t cand[3] = {x.index(b, c, y, xx + 1), x.index(b, c, y + 1, xx),
                                                 x.index(b, c, y + 1, xx + 1)};
                    for (std::size_t i : cand)
                        if (x[i] > x[best])
                            best = i;
                    r.output[o] = x[best];
                    r.argmax[o] = static_cast<std::uint32_t>(best);
                }
    if (BranchTrace::recording()) {
        Fnv1a h;
        for (auto a : r.argmax)
            h.add(a);
        BranchTrace::record(h.value);
    }
    ensure_finite(r.output, "maxpool2d_forward");
    return r;
}

template <typename T>
Tensor4<T> maxpool2d_backward(const Tensor4<T>& grad_y, const std::vector<std::uint32_t>& argmax,
                              const Shape4& input_shape)
{
    require(grad_y.size() == argmax.size() &&
                grad_y.shape() == Shape4{input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2},
            "maxpool2d_backward: grad shape does not match pooled shape");
    Tensor4<T> gx(input_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i)
        gx[argmax[i]] += grad_y[i];
    return gx;
}

// --- batch normalization ---------------------------------------------------

template <typename T>
Tensor4<T> batchnorm2d_forward(const Tensor4<T>& x, const ParamTensor<T>& gamma, const ParamTensor<T>& beta,
                               BatchNormState<T>& state, Mode mode, BatchNormCache<T>* cache)
{
    const auto& s = x.shape();
    const Shape4 vec{1, s.c, 1, 1};
    require(gamma.value.shape() == vec && beta.value.shape() == vec && state.running_mean.shape() == vec &&
                state.running_var.shape() == vec,
            "batchnorm2d: parameters do not match " + std::to_string(s.c) + " channels");
    const std::size_t count = s.n * s.plane();
    if (mode == Mode::train && count < 2)
        throw ShapeError("batchnorm2d: train mode needs batch*h*w >= 2, got " + std::to_string(count));

    Tensor4<T> y(s);
    Tensor4<T> x_hat(cache ? s : Shape4{});
    std::vector<T> inv_std(s.c);
    for (std::size_t c = 0; c < s.c; ++c) {
        double mean, var;
        if (mode == Mode::train) {
            double sum = 0.0;
            for (std::size_t b = 0; b < s.n; ++b) {
                const T* p = x.plane(b, c);
                for (std::size_t i = 0; i < s.plane(); ++i)
                    sum += p[i];
            }
            mean = sum / static_cast<double>(count);
            double sq = 0.0;
            for (std::size_t b = 0; b < s.n; ++b) {
                const T* p = x.plane(b, c);
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const double d = p[i] - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(count);
            const double unbiased = sq / static_cast<double>(count - 1);
            state.running_mean[c] =
                static_cast<T>((1.0 - kBatchNormMomentum) * state.running_mean[c] + kBatchNormMomentum * mean);
            state.running_var[c] =
                static_cast<T>((1.0 - kBatchNormMomentum) * state.running_var[c] + kBatchNormMomentum * unbiased);
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        const T istd = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEps));
        const T m = static_cast<T>(mean);
        const T gm = gamma.value[c];
        const T bt = beta.value[c];
        inv_std[c] = istd;
        for (std::size_t b = 0; b < s.n; ++b) {
            const T* p = x.plane(b, c);
            T* q = y.plane(b, c);
            T* h = cache ? x_hat.plane(b, c) : nullptr;
            for (std::size_t i = 0; i < s.plane(); ++i) {
                const T xh = (p[i] - m) * istd;
                if (h)
                    h[i] = xh;
                q[i] = gm * xh + bt;
            }
        }
    }
    if (cache) {
        cache->x_hat = std::move(x_hat);
        cache->inv_std = std::move(inv_std);
        cache->mode = mode;
    }
    ensure_finite(y, "batchnorm2d_forward");
    return y;
}

template <typename T>
Tensor4<T> batchnorm2d_backward(const Tensor4<T>& grad_y, const BatchNormCache<T>& cache, ParamTensor<T>& gamma,
                                ParamTensor<T>& beta)
{
    const auto& s = grad_y.shape();
    require(cache.x_hat.shape() == s, "batchnorm2d_backward: grad shape does not match cached forward");
    require(gamma.value.shape() == Shape4{1, s.c, 1, 1}, "batchnorm2d_backward: channel mismatch");
    const double count = static_cast<double>(s.n * s.plane());
    Tensor4<T> gx(s);
    for (std::size_t c = 0; c < s.c; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < s.n; ++b) {
            const T* g = grad_y.plane(b, c);
            const T* h = cache.x_hat.plane(b, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                sum_dy += g[i];
                sum_dy_xhat += static_cast<double>(g[i]) * h[i];
            }
        }
        gamma.grad[c] += static_cast<T>(sum_dy_xhat);
        beta.grad[c] += static_cast<T>(sum_dy);
        const T scale = gamma.value[c] * cache.inv_std[c];
        if (cache.mode == Mode::train) {
            const T mean_dy = static_cast<T>(sum_dy / count);
            const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / count);
            for (std::size_t b = 0; b < s.n; ++b) {
                const T* g = grad_y.plane(b, c);
                const T* h = cache.x_hat.plane(b, c);
                T* o = gx.plane(b, c);
                for (std::size_t i = 0; i < s.plane(); ++i)
                    o[i] = scale * (g[i] - mean_dy - h[i] * mean_dy_xhat);
            }
        } else {
            for (std::size_t b = 0; b < s.n; ++b) {
                const T* g = grad_y.plane(b, c);
                T* o = gx.plane(b, c);
                for (std::size_t i = 0; i < s.plane(); ++i)
                    o[i] = scale * g[i];
            }
        }
    }
    ensure_finite(gx, "batchnorm2d_backward");
    return gx;
}

// --- elementwise -----------------------------------------------------------

template <typename T>
Tensor4<T> relu_forward(const Tensor4<T>& x)
{
    Tensor4<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = x[i] > T(0) ? x[i] : T(0);
    if (BranchTrace::recording()) {
        Fnv1a h;
        for (std::size_t i = 0; i < x.size(); ++i)
            h.add(x[i] > T(0));
        BranchTrace::record(h.value);
    }
    ensure_finite(y, "relu_forward");
    return y;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& grad_y, const Tensor4<T>& saved_x)
{
    require(grad_y.shape() == saved_x.shape(), "relu_backward: shape mismatch");
    Tensor4<T> gx(saved_x.shape());
    for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] = saved_x[i] > T(0) ? grad_y[i] : T(0);
    return gx;
}

template <typename T>
Tensor4<T> sigmoid_forward(const Tensor4<T>& x)
{
    Tensor4<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        if (v >= T(0)) {
            y[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            y[i] = e / (T(1) + e);
        }
    }
    ensure_finite(y, "sigmoid_forward");
    return y;
}

template <typename T>
Tensor4<T> sigmoid_backward(const Tensor4<T>& grad_y, const Tensor4<T>& saved_y)
{
    require(grad_y.shape() == saved_y.shape(), "sigmoid_backward: shape mismatch");
    Tensor4<T> gx(saved_y.shape());
    for (std::size_t i = 0; i < gx.size(); ++i)
        gx[i] = grad_y[i] * saved_y[i] * (T(1) - saved_y[i]);
    return gx;
}

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b)
{
    require(a.shape() == b.shape(), "add: shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor4<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a[i] + b[i];
    ensure_finite(y, "add");
    return y;
}

// --- channel concatenation -------------------------------------------------

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b)
{
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w,
            "concat_channels: operands " + to_string(sa) + " and " + to_string(sb) + " disagree outside channels");
    Tensor4<T> y(Shape4{sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::size_t pa = sa.c * sa.plane();
    const std::size_t pb = sb.c * sb.plane();
    for (std::size_t n = 0; n < sa.n; ++n) {
        std::copy_n(a.data() + n * pa, pa, y.data() + n * (pa + pb));
        std::copy_n(b.data() + n * pb, pb, y.data() + n * (pa + pb) + pa);
    }
    return y;
}

template <typename T>
Tensor4<T> slice_channels(const Tensor4<T>& x, std::size_t first, std::size_t count)
{
    const auto& s = x.shape();
    require(first + count <= s.c, "slice_channels: range exceeds channel count");
    Tensor4<T> y(Shape4{s.n, count, s.h, s.w});
    for (std::size_t n = 0; n < s.n; ++n)
        std::copy_n(x.plane(n, first), count * s.plane(), y.plane(n, 0));
    return y;
}

// --- loss ------------------------------------------------------------------

namespace {

template <typename T>
void check_bce_inputs(const Tensor4<T>& pred, const Tensor4<T>& target)
{
    require(pred.shape() == target.shape(),
            "bce: prediction " + to_string(pred.shape()) + " vs target " + to_string(target.shape()));
    if (pred.empty())
        throw ShapeError("bce: empty tensors");
    for (std::size_t i = 0; i < target.size(); ++i)
        if (target[i] != T(0) && target[i] != T(1))
            throw ValueError("bce: target value " + std::to_string(static_cast<double>(target[i])) +
                             " is not 0 or 1");
}

template <typename T>
double clamp_prob(T p)
{
    return std::clamp(static_cast<double>(p), kBceEps, 1.0 - kBceEps);
}

}  // namespace

template <typename T>
double bce_loss(const Tensor4<T>& pred, const Tensor4<T>& target)
{
    check_bce_inputs(pred, target);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = clamp_prob(pred[i]);
        acc -= target[i] == T(1) ? std::log(p) : std::log1p(-p);
    }
    if (BranchTrace::recording()) {
        Fnv1a h;
        for (std::size_t i = 0; i < pred.size(); ++i)
            h.add(clamp_prob(pred[i]) != static_cast<double>(pred[i]));
        BranchTrace::record(h.value);
    }
    const double loss = acc / static_cast<double>(pred.size());
    if (!std::isfinite(loss))
        throw NumericError("bce_loss: non-finite loss");
    return loss;
}

template <typename T>
Tensor4<T> bce_backward(const Tensor4<T>& pred, const Tensor4<T>& target)
{
    check_bce_inputs(pred, target);
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    Tensor4<T> g(pred.shape());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = clamp_prob(pred[i]);
        g[i] = static_cast<T>((p - static_cast<double>(target[i])) / (p * (1.0 - p)) * inv_n);
    }
    return g;
}

#define GPUNET_INSTANTIATE_OPS(T)                                                                                   \
    template Tensor4<T> conv2d_forward(const Tensor4<T>&, const ParamTensor<T>&, const ParamTensor<T>*,           \
                                       const ConvSpec&);                                                          \
    template Tensor4<T> conv2d_backward(const Tensor4<T>&, const Tensor4<T>&, ParamTensor<T>&, ParamTensor<T>*,   \
                                        const ConvSpec&);                                                         \
    template Tensor4<T> transposed_conv2d_forward(const Tensor4<T>&, const ParamTensor<T>&, const ParamTensor<T>*, \
                                                  const TransposedConvSpec&);                                     \
    template Tensor4<T> transposed_conv2d_backward(const Tensor4<T>&, const Tensor4<T>&, ParamTensor<T>&,         \
                                                   ParamTensor<T>*, const TransposedConvSpec&);                   \
    template MaxPoolResult<T> maxpool2d_forward(const Tensor4<T>&);                                               \
    template Tensor4<T> maxpool2d_backward(const Tensor4<T>&, const std::vector<std::uint32_t>&, const Shape4&);  \
    template Tensor4<T> batchnorm2d_forward(const Tensor4<T>&, const ParamTensor<T>&, const ParamTensor<T>&,      \
                                            BatchNormState<T>&, Mode, BatchNormCache<T>*);                        \
    template Tensor4<T> batchnorm2d_backward(const Tensor4<T>&, const BatchNormCache<T>&, ParamTensor<T>&,        \
                                             ParamTensor<T>&);                                                    \
    template Tensor4<T> relu_forward(const Tensor4<T>&);                                                          \
    template Tensor4<T> relu_backward(const Tensor4<T>&, const Tensor4<T>&);                                      \
    template Tensor4<T> sigmoid_forward(const Tensor4<T>&);                                                       \
    template Tensor4<T> sigmoid_backward(const Tensor4<T>&, const Tensor4<T>&);                                   \
    template Tensor4<T> add(const Tensor4<T>&, const Tensor4<T>&);                                                \
    template Tensor4<T> concat_channels(const Tensor4<T>&, const Tensor4<T>&);                                    \
    template Tensor4<T> slice_channels(const Tensor4<T>&, std::size_t, std::size_t);                              \
    template double bce_loss(const Tensor4<T>&, const Tensor4<T>&);                                               \
    template Tensor4<T> bce_backward(const Tensor4<T>&, const Tensor4<T>&);

GPUNET_INSTANTIATE_OPS(float)
GPUNET_INSTANTIATE_OPS(double)

}  // namespace gpunet
