#pragma once

// Ghost module, GP-module and the residual bottleneck built from two of them.
//
// A ghost module runs one ordinary convolution producing m = ceil(n/s)
// intrinsic maps. Every intrinsic map y'_i then yields s output slots: s-1
// cheap depth-wise convolutions followed by y'_i itself. Outputs are grouped
// by intrinsic map, [g_1(y'_1) .. g_{s-1}(y'_1), y'_1, g_1(y'_2) ..], and the
// surplus tail beyond n channels is dropped.
//
// The GP-module is the same assembly with a bank whose slots share a kernel
// size but use different dilation rates (plus a 1x1 slot).

#include <memory>
#include <vector>

#include "gpunet/layers.hpp"

namespace gpunet {

/// One cheap depth-wise operation of the bank: d x d kernel at a dilation rate.
struct CheapOp {
    std::size_t kernel = 3;
    std::size_t dilation = 1;

    /// Same-size padding r*(d-1)/2.
    std::size_t padding() const { return dilation * (kernel - 1) / 2; }
    friend bool operator==(const CheapOp&, const CheapOp&) = default;
};

struct GhostSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t ratio = 2;   // s
    std::size_t kernel = 3;  // primary convolution kernel k
    std::size_t stride = 1;  // primary convolution stride
    std::vector<CheapOp> bank;  // length s - 1, slot j uses bank[j]

    /// m = ceil(n / s)
    std::size_t intrinsic() const { return (out_channels + ratio - 1) / ratio; }
    /// m * s, before truncation to n.
    std::size_t generated() const { return intrinsic() * ratio; }

    void validate() const;
    ConvSpec primary_conv() const;
    ConvSpec cheap_conv(std::size_t slot) const;

    /// Ghost module: every cheap slot is a d x d depth-wise op at dilation 1.
    static GhostSpec ghost(std::size_t in, std::size_t out, std::size_t ratio = 2, std::size_t cheap_kernel = 3,
                           std::size_t kernel = 3);
    /// GP-module: s = 6 with 3x3 slots at dilations 1, 6, 12, 18 and a 1x1 slot.
    static GhostSpec gp(std::size_t in, std::size_t out, std::size_t kernel = 3);
    /// The GP bank used by gp(): {3x3 r1, 3x3 r6, 3x3 r12, 3x3 r18, 1x1}.
    static std::vector<CheapOp> aspp_bank();
};

enum class ShortcutKind { identity, projection };

struct BneckSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    GhostSpec first;   // in -> out
    GhostSpec second;  // out -> out
    ShortcutKind shortcut = ShortcutKind::identity;

    void validate() const;

    /// Both modules share ratio, primary kernel and bank; the shortcut is
    /// identity when in == out, otherwise a 1x1 projection followed by BN.
    static BneckSpec make(std::size_t in, std::size_t out, std::size_t ratio, const std::vector<CheapOp>& bank,
                          std::size_t kernel = 3);
};

/// Two (3x3 conv pad 1 -> BN -> ReLU) stages, the ordinary U-Net block.
struct DoubleConvSpec {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;

    void validate() const;
    ConvSpec conv(std::size_t stage) const;
};

template <typename T>
class GhostModule final : public Layer<T> {
public:
    explicit GhostModule(GhostSpec spec);

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
    void init(std::mt19937_64& rng) override;

    const GhostSpec& spec() const { return spec_; }
    /// Intrinsic maps of the most recent forward call.
    const Tensor4<T>& intrinsic_maps() const { return intrinsic_; }
    ParamTensor<T>& primary_weight() { return primary_.weight(); }
    ParamTensor<T>& cheap_weight(std::size_t slot) { return cheap_[slot]; }

    /// Output channel holding slot j (0-based, j = s-1 is identity) of intrinsic
    /// map i, or -1 when that slot was truncated.
    long output_channel(std::size_t i, std::size_t slot) const;

private:
    GhostSpec spec_;
    Conv2d<T> primary_;
    std::vector<ParamTensor<T>> cheap_;
    Tensor4<T> intrinsic_;
};

/// out = shortcut(x) + BN(G2(ReLU(BN(G1(x))))), no activation after the sum.
template <typename T>
class Bottleneck final : public Layer<T> {
public:
    explicit Bottleneck(BneckSpec spec);

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
    void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) override;
    void init(std::mt19937_64& rng) override;

    const BneckSpec& spec() const { return spec_; }
    GhostModule<T>& first() { return ghost1_; }
    GhostModule<T>& second() { return ghost2_; }

private:
    BneckSpec spec_;
    GhostModule<T> ghost1_;
    BatchNorm2d<T> bn1_;
    ReLU<T> relu_;
    GhostModule<T> ghost2_;
    BatchNorm2d<T> bn2_;
    std::unique_ptr<Conv2d<T>> proj_;
    std::unique_ptr<BatchNorm2d<T>> proj_bn_;
};

template <typename T>
class DoubleConv final : public Layer<T> {
public:
    explicit DoubleConv(DoubleConvSpec spec);

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode) override;
    Tensor4<T> backward(const Tensor4<T>& grad_y) override;
    void collect_params(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
    void collect_buffers(const std::string& prefix, std::vector<NamedBuffer<T>>& out) override;
    void init(std::mt19937_64& rng) override;

private:
    DoubleConvSpec spec_;
    Conv2d<T> conv1_;
    BatchNorm2d<T> bn1_;
    ReLU<T> relu1_;
    Conv2d<T> conv2_;
    BatchNorm2d<T> bn2_;
    ReLU<T> relu2_;
};

}  // namespace gpunet
