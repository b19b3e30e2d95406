#include "gpunet/blocks.hpp"

#include <algorithm>
#include <string>

namespace gpunet {

namespace {

template <typename T>
void accumulate(Tensor4<T>& into, const Tensor4<T>& g)
{
    if (into.empty()) {
        into = g;
        return;
    }
    for (std::size_t i = 0; i < into.size(); ++i)
        into[i] += g[i];
}

}  // namespace

// --- specs -----------------------------------------------------------------

void GhostSpec::validate() const
{
    if (in_channels == 0 || out_channels == 0 || ratio == 0 || kernel == 0 || stride == 0)
        throw ConfigError("ghost module spec fields must be positive");
    if (kernel % 2 == 0)
        throw ConfigError("ghost module primary kernel must be odd, got " + std::to_string(kernel));
    if (bank.size() != ratio - 1)
        throw ConfigError("ghost module bank has " + std::to_string(bank.size()) + " cheap ops, ratio " +
                          std::to_string(ratio) + " needs " + std::to_string(ratio - 1));
    for (const auto& op : bank) {
        if (op.kernel == 0 || op.dilation == 0)
            throw ConfigError("cheap op kernel and dilation must be positive");
        if ((op.dilation * (op.kernel - 1)) % 2 != 0)
            throw ConfigError("cheap op " + std::to_string(op.kernel) + "x" + std::to_string(op.kernel) +
                              " at dilation " + std::to_string(op.dilation) + " cannot preserve spatial size");
    }
}

ConvSpec GhostSpec::primary_conv() const
{
    return ConvSpec{in_channels, intrinsic(), kernel, stride, (kernel - 1) / 2, 1, 1, false};
}

ConvSpec GhostSpec::cheap_conv(std::size_t slot) const
{
    const auto& op = bank.at(slot);
    const std::size_t m = intrinsic();
    return ConvSpec{m, m, op.kernel, 1, op.padding(), op.dilation, m, false};
}

GhostSpec GhostSpec::ghost(std::size_t in, std::size_t out, std::size_t ratio, std::size_t cheap_kernel,
                           std::size_t kernel)
{
    GhostSpec s{in, out, ratio, kernel, 1, {}};
    s.bank.assign(ratio > 0 ? ratio - 1 : 0, CheapOp{cheap_kernel, 1});
    return s;
}

std::vector<CheapOp> GhostSpec::aspp_bank()
{
    return {{3, 1}, {3, 6}, {3, 12}, {3, 18}, {1, 1}};
}

GhostSpec GhostSpec::gp(std::size_t in, std::size_t out, std::size_t kernel)
{
    return GhostSpec{in, out, 6, kernel, 1, aspp_bank()};
}

void BneckSpec::validate() const
{
    first.validate();
    second.validate();
    if (first.in_channels != in_channels || first.out_channels != out_channels || second.in_channels != out_channels ||
        second.out_channels != out_channels)
        throw ConfigError("bottleneck modules must map in->out then out->out");
    if (first.stride != 1 || second.stride != 1)
        throw ConfigError("bottleneck modules must use stride 1");
    const bool identity = in_channels == out_channels;
    if (identity != (shortcut == ShortcutKind::identity))
        throw ConfigError("bottleneck shortcut must be identity exactly when in_channels == out_channels");
}

BneckSpec BneckSpec::make(std::size_t in, std::size_t out, std::size_t ratio, const std::vector<CheapOp>& bank,
                          std::size_t kernel)
{
    BneckSpec s;
    s.in_channels = in;
    s.out_channels = out;
    s.first = GhostSpec{in, out, ratio, kernel, 1, bank};
    s.second = GhostSpec{out, out, ratio, kernel, 1, bank};
    s.shortcut = in == out ? ShortcutKind::identity : ShortcutKind::projection;
    return s;
}

void DoubleConvSpec::validate() const
{
    if (in_channels == 0 || out_channels == 0)
        throw ConfigError("double-conv block channels must be positive");
}

ConvSpec DoubleConvSpec::conv(std::size_t stage) const
{
    return ConvSpec{stage == 0 ? in_channels : out_channels, out_channels, 3, 1, 1, 1, 1, true};
}

// --- GhostModule -----------------------------------------------------------

template <typename T>
GhostModule<T>::GhostModule(GhostSpec spec) : spec_((spec.validate(), std::move(spec))), primary_(spec_.primary_conv())
{
    for (std::size_t j = 0; j + 1 < spec_.ratio; ++j)
        cheap_.emplace_back(spec_.cheap_conv(j).weight_shape());
}

template <typename T>
long GhostModule<T>::output_channel(std::size_t i, std::size_t slot) const
{
    const std::size_t ch = i * spec_.ratio + slot;
    return ch < spec_.out_channels ? static_cast<long>(ch) : -1;
}

template <typename T>
Tensor4<T> GhostModule<T>::forward(const Tensor4<T>& x, Mode mode)
{
    if (x.shape().c != spec_.in_channels)
        throw ShapeError("ghost module: input has " + std::to_string(x.shape().c) + " channels, expected " +
                         std::to_string(spec_.in_channels));
    intrinsic_ = primary_.forward(x, mode);
    const auto& is = intrinsic_.shape();
    const std::size_t m = spec_.intrinsic();
    const std::size_t s = spec_.ratio;
    Tensor4<T> y(Shape4{is.n, spec_.out_channels, is.h, is.w});
    const std::size_t plane = is.plane();
    auto place = [&](const Tensor4<T>& src, std::size_t slot) {
        for (std::size_t i = 0; i < m; ++i) {
            const long ch = output_channel(i, slot);
            if (ch < 0)
                continue;
            for (std::size_t b = 0; b < is.n; ++b)
                std::copy_n(src.plane(b, i), plane, y.plane(b, static_cast<std::size_t>(ch)));
        }
    };
    for (std::size_t j = 0; j + 1 < s; ++j)
        place(conv2d_forward<T>(intrinsic_, cheap_[j], nullptr, spec_.cheap_conv(j)), j);
    place(intrinsic_, s - 1);
    return y;
}

template <typename T>
Tensor4<T> GhostModule<T>::backward(const Tensor4<T>& grad_y)
{
    const auto& is = intrinsic_.shape();
    if (grad_y.shape() != Shape4{is.n, spec_.out_channels, is.h, is.w})
        throw ShapeError("ghost module backward: grad shape " + to_string(grad_y.shape()) + " mismatch");
    const std::size_t m = spec_.intrinsic();
    const std::size_t s = spec_.ratio;
    const std::size_t plane = is.plane();
    auto gather = [&](std::size_t slot) {
        Tensor4<T> g(is);
        for (std::size_t i = 0; i < m; ++i) {
            const long ch = output_channel(i, slot);
            if (ch < 0)
                continue;
            for (std::size_t b = 0; b < is.n; ++b)
                std::copy_n(grad_y.plane(b, static_cast<std::size_t>(ch)), plane, g.plane(b, i));
        }
        return g;
    };
    Tensor4<T> g_intrinsic = gather(s - 1);
    for (std::size_t j = 0; j + 1 < s; ++j)
        accumulate(g_intrinsic, conv2d_backward<T>(gather(j), intrinsic_, cheap_[j], nullptr, spec_.cheap_conv(j)));
    return primary_.backward(g_intrinsic);
}

template <typename T>
void GhostModule<T>::collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out)
{
    primary_.collect_params(prefix + "primary.", out);
    for (std::size_t j = 0; j < cheap_.size(); ++j)
        out.push_back({prefix + "cheap" + std::to_string(j) + ".weight", &cheap_[j]});
}

template <typename T>
void GhostModule<T>::init(std::mt19937_64& rng)
{
    primary_.init(rng);
    for (std::size_t j = 0; j < cheap_.size(); ++j)
        kaiming_uniform(cheap_[j].value, spec_.bank[j].kernel * spec_.bank[j].kernel, rng);
}

// --- Bottleneck ------------------------------------------------------------

template <typename T>
Bottleneck<T>::Bottleneck(BneckSpec spec)
    : spec_((spec.validate(), std::move(spec))),
      ghost1_(spec_.first),
      bn1_(spec_.out_channels),
      ghost2_(spec_.second),
      bn2_(spec_.out_channels)
{
    if (spec_.shortcut == ShortcutKind::projection) {
        proj_ = std::make_unique<Conv2d<T>>(ConvSpec{spec_.in_channels, spec_.out_channels, 1, 1, 0, 1, 1, false});
        proj_bn_ = std::make_unique<BatchNorm2d<T>>(spec_.out_channels);
    }
}

template <typename T>
Tensor4<T> Bottleneck<T>::forward(const Tensor4<T>& x, Mode mode)
{
    if (x.shape().c != spec_.in_channels)
        throw ShapeError("bottleneck: input has " + std::to_string(x.shape().c) + " channels, expected " +
                         std::to_string(spec_.in_channels));
    Tensor4<T> h = ghost1_.forward(x, mode);
    h = bn1_.forward(h, mode);
    h = relu_.forward(h, mode);
    h = ghost2_.forward(h, mode);
    h = bn2_.forward(h, mode);
    if (proj_) {
        Tensor4<T> sc = proj_bn_->forward(proj_->forward(x, mode), mode);
        return add(sc, h);
    }
    return add(x, h);
}

template <typename T>
Tensor4<T> Bottleneck<T>::backward(const Tensor4<T>& grad_y)
{
    Tensor4<T> g = bn2_.backward(grad_y);
    g = ghost2_.backward(g);
    g = relu_.backward(g);
    g = bn1_.backward(g);
    g = ghost1_.backward(g);
    if (proj_)
        accumulate(g, proj_->backward(proj_bn_->backward(grad_y)));
    else
        accumulate(g, grad_y);
    return g;
}

template <typename T>
void Bottleneck<T>::collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out)
{
    ghost1_.collect_params(prefix + "ghost1.", out);
    bn1_.collect_params(prefix + "bn1.", out);
    ghost2_.collect_params(prefix + "ghost2.", out);
    bn2_.collect_params(prefix + "bn2.", out);
    if (proj_) {
        proj_->collect_params(prefix + "shortcut.conv.", out);
        proj_bn_->collect_params(prefix + "shortcut.bn.", out);
    }
}

template <typename T>
void Bottleneck<T>::collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out)
{
    bn1_.collect_buffers(prefix + "bn1.", out);
    bn2_.collect_buffers(prefix + "bn2.", out);
    if (proj_bn_)
        proj_bn_->collect_buffers(prefix + "shortcut.bn.", out);
}

template <typename T>
void Bottleneck<T>::init(std::mt19937_64& rng)
{
    ghost1_.init(rng);
    bn1_.init(rng);
    ghost2_.init(rng);
    bn2_.init(rng);
    if (proj_) {
        proj_->init(rng);
        proj_bn_->init(rng);
    }
}

// --- DoubleConv ------------------------------------------------------------

template <typename T>
DoubleConv<T>::DoubleConv(DoubleConvSpec spec)
    : spec_((spec.validate(), spec)),
      conv1_(spec_.conv(0)),
      bn1_(spec_.out_channels),
      conv2_(spec_.conv(1)),
      bn2_(spec_.out_channels)
{
}

template <typename T>
Tensor4<T> DoubleConv<T>::forward(const Tensor4<T>& x, Mode mode)
{
    Tensor4<T> h = relu1_.forward(bn1_.forward(conv1_.forward(x, mode), mode), mode);
    return relu2_.forward(bn2_.forward(conv2_.forward(h, mode), mode), mode);
}

template <typename T>
Tensor4<T> DoubleConv<T>::backward(const Tensor4<T>& grad_y)
{
    Tensor4<T> g = conv2_.backward(bn2_.backward(relu2_.backward(grad_y)));
    return conv1_.backward(bn1_.backward(relu1_.backward(g)));
}

template <typename T>
void DoubleConv<T>::collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out)
{
    conv1_.collect_params(prefix + "conv1.", out);
    bn1_.collect_params(prefix + "bn1.", out);
    conv2_.collect_params(prefix + "conv2.", out);
    bn2_.collect_params(prefix + "bn2.", out);
}

template <typename T>
void DoubleConv<T>::collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out)
{
    bn1_.collect_buffers(prefix + "bn1.", out);
    bn2_.collect_buffers(prefix + "bn2.", out);
}

template <typename T>
void DoubleConv<T>::init(std::mt19937_64& rng)
{
    conv1_.init(rng);
    bn1_.init(rng);
    conv2_.init(rng);
    bn2_.init(rng);
}

template class GhostModule<float>;
template class GhostModule<double>;
template class Bottleneck<float>;
template class Bottleneck<double>;
template class DoubleConv<float>;
template class DoubleConv<double>;

}  // namespace gpunet
