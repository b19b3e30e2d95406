#include "gpunet/model.hpp"

#include <random>
#include <string>

namespace gpunet {

std::string to_string(BlockKind kind)
{
    switch (kind) {
    case BlockKind::ordinary:
        return "unet";
    case BlockKind::ghost:
        return "ghost-unet";
    case BlockKind::gp:
        return "gpu-net";
    }
    return "unknown";
}

std::optional<BlockKind> parse_block_kind(const std::string& name)
{
    if (name == "unet" || name == "ordinary")
        return BlockKind::ordinary;
    if (name == "ghost-unet" || name == "ghost")
        return BlockKind::ghost;
    if (name == "gpu-net" || name == "gp")
        return BlockKind::gp;
    return std::nullopt;
}

// --- ModelConfig -----------------------------------------------------------

void ModelConfig::validate() const
{
    if (widths.size() != 5)
        throw ConfigError("width ladder must have 5 entries (4 levels + bottom), got " + std::to_string(widths.size()));
    if (widths[0] == 0)
        throw ConfigError("width ladder entries must be positive");
    for (std::size_t i = 1; i < widths.size(); ++i)
        if (widths[i] <= widths[i - 1])
            throw ConfigError("width ladder must be strictly increasing");
    if (in_channels == 0 || out_channels == 0)
        throw ConfigError("model channel counts must be positive");
    if (block_kind != BlockKind::ordinary) {
        if (primary_kernel == 0 || primary_kernel % 2 == 0)
            throw ConfigError("primary kernel must be odd");
        if (block_kind == BlockKind::gp && ratio != 0 && ratio != 6)
            throw ConfigError("the GP bank fixes the ratio at 6");
        if (effective_ratio() == 0)
            throw ConfigError("ghost ratio must be positive");
    }
}

std::size_t ModelConfig::effective_ratio() const
{
    switch (block_kind) {
    case BlockKind::ordinary:
        return 1;
    case BlockKind::ghost:
        return ratio == 0 ? 2 : ratio;
    case BlockKind::gp:
        return 6;
    }
    return 1;
}

std::vector<CheapOp> ModelConfig::bank() const
{
    switch (block_kind) {
    case BlockKind::ordinary:
        return {};
    case BlockKind::ghost:
        return std::vector<CheapOp>(effective_ratio() - 1, CheapOp{3, 1});
    case BlockKind::gp:
        return GhostSpec::aspp_bank();
    }
    return {};
}

ModelConfig ModelConfig::unet(std::vector<std::size_t> widths, std::size_t in_channels)
{
    ModelConfig c;
    c.block_kind = BlockKind::ordinary;
    c.widths = std::move(widths);
    c.in_channels = in_channels;
    return c;
}

ModelConfig ModelConfig::ghost_unet(std::vector<std::size_t> widths, std::size_t in_channels)
{
    ModelConfig c = unet(std::move(widths), in_channels);
    c.block_kind = BlockKind::ghost;
    return c;
}

ModelConfig ModelConfig::gpu_net(std::vector<std::size_t> widths, std::size_t in_channels)
{
    ModelConfig c = unet(std::move(widths), in_channels);
    c.block_kind = BlockKind::gp;
    return c;
}

// --- LayerGraph ------------------------------------------------------------

std::vector<std::pair<int, int>> LayerGraph::skip_edges() const
{
    std::vector<std::pair<int, int>> edges;
    for (std::size_t i = 0; i < nodes.size(); ++i)
        if (std::holds_alternative<ConcatSpec>(nodes[i].spec))
            edges.emplace_back(nodes[i].inputs.at(0), static_cast<int>(i));
    return edges;
}

LayerGraph build_model(const ModelConfig& cfg)
{
    cfg.validate();
    LayerGraph g;
    g.config = cfg;
    const auto& W = cfg.widths;

    auto block = [&](std::size_t in, std::size_t out) -> NodeSpec {
        if (cfg.block_kind == BlockKind::ordinary)
            return DoubleConvSpec{in, out};
        return BneckSpec::make(in, out, cfg.effective_ratio(), cfg.bank(), cfg.primary_kernel);
    };
    auto push = [&](std::string name, NodeSpec spec, std::vector<int> inputs) {
        g.nodes.push_back(GraphNode{std::move(name), std::move(spec), std::move(inputs)});
        return static_cast<int>(g.nodes.size()) - 1;
    };

    int prev = kGraphInput;
    std::size_t channels = cfg.in_channels;
    int skips[4];
    for (std::size_t level = 0; level < 4; ++level) {
        skips[level] = push("enc" + std::to_string(level), block(channels, W[level]), {prev});
        prev = push("pool" + std::to_string(level), MaxPoolSpec{}, {skips[level]});
        channels = W[level];
    }
    prev = push("bottom", block(channels, W[4]), {prev});
    channels = W[4];
    for (int level = 3; level >= 0; --level) {
        const std::size_t out = W[static_cast<std::size_t>(level)];
        const std::string l = std::to_string(level);
        const int up = push("up" + l, TransposedConvSpec{channels, out, 3, 2, 1, 1, true}, {prev});
        const int cat = push("cat" + l, ConcatSpec{}, {skips[level], up});
        prev = push("dec" + l, block(2 * out, out), {cat});
        channels = out;
    }
    g.first_block = skips[0];
    g.last_block = prev;
    prev = push("head", ConvSpec{channels, cfg.out_channels, 1, 1, 0, 1, 1, true}, {prev});
    push("sigmoid", SigmoidSpec{}, {prev});
    return g;
}

// --- Network ---------------------------------------------------------------

namespace {

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const NodeSpec& spec)
{
    struct Visitor {
        std::unique_ptr<Layer<T>> operator()(const DoubleConvSpec& s) const
        {
            return std::make_unique<DoubleConv<T>>(s);
        }
        std::unique_ptr<Layer<T>> operator()(const BneckSpec& s) const { return std::make_unique<Bottleneck<T>>(s); }
        std::unique_ptr<Layer<T>> operator()(const MaxPoolSpec&) const { return std::make_unique<MaxPool2d<T>>(); }
        std::unique_ptr<Layer<T>> operator()(const TransposedConvSpec& s) const
        {
            return std::make_unique<TransposedConv2d<T>>(s);
        }
        std::unique_ptr<Layer<T>> operator()(const ConcatSpec&) const { return nullptr; }
        std::unique_ptr<Layer<T>> operator()(const ConvSpec& s) const { return std::make_unique<Conv2d<T>>(s); }
        std::unique_ptr<Layer<T>> operator()(const SigmoidSpec&) const { return std::make_unique<Sigmoid<T>>(); }
    };
    return std::visit(Visitor{}, spec);
}

template <typename T>
void accumulate_grad(Tensor4<T>& into, Tensor4<T>&& g)
{
    if (into.empty()) {
        into = std::move(g);
        return;
    }
    for (std::size_t i = 0; i < into.size(); ++i)
        into[i] += g[i];
}

}  // namespace

template <typename T>
Network<T>::Network(LayerGraph graph) : graph_(std::move(graph))
{
    for (const auto& node : graph_.nodes)
        layers_.push_back(make_layer<T>(node.spec));
}

template <typename T>
Network<T>::~Network() = default;

template <typename T>
void Network<T>::init(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    for (auto& layer : layers_)
        if (layer)
            layer->init(rng);
}

template <typename T>
Tensor4<T> Network<T>::forward(const Tensor4<T>& x, Mode mode)
{
    const auto& s = x.shape();
    if (s.c != graph_.config.in_channels)
        throw ShapeError("model expects " + std::to_string(graph_.config.in_channels) + " input channels, got " +
                         std::to_string(s.c));
    if (s.h == 0 || s.w == 0 || s.h % 16 != 0 || s.w % 16 != 0)
        throw ShapeError("input spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                         " is not divisible by 16 (4 pooling levels); resize or crop the input");
    if (s.n == 0)
        throw ShapeError("empty batch");
    input_shape_ = s;
    outputs_.assign(graph_.nodes.size(), Tensor4<T>{});
    auto source = [&](int idx) -> const Tensor4<T>& { return idx == kGraphInput ? x : outputs_[idx]; };
    for (std::size_t i = 0; i < graph_.nodes.size(); ++i) {
        const auto& node = graph_.nodes[i];
        if (!layers_[i])
            outputs_[i] = concat_channels(source(node.inputs[0]), source(node.inputs[1]));
        else
            outputs_[i] = layers_[i]->forward(source(node.inputs[0]), mode);
    }
    return outputs_.back();
}

template <typename T>
Tensor4<T> Network<T>::backward(const Tensor4<T>& grad_output)
{
    if (outputs_.empty())
        throw Error("backward called before forward");
    if (grad_output.shape() != outputs_.back().shape())
        throw ShapeError("output gradient shape " + to_string(grad_output.shape()) + " does not match output " +
                         to_string(outputs_.back().shape()));
    std::vector<Tensor4<T>> grads(graph_.nodes.size());
    grads.back() = grad_output;
    Tensor4<T> grad_input;
    auto deliver = [&](int idx, Tensor4<T>&& g) {
        if (idx == kGraphInput)
            accumulate_grad(grad_input, std::move(g));
        else
            accumulate_grad(grads[static_cast<std::size_t>(idx)], std::move(g));
    };
    for (std::size_t i = graph_.nodes.size(); i-- > 0;) {
        if (grads[i].empty())
            continue;
        const auto& node = graph_.nodes[i];
        if (!layers_[i]) {
            const auto& a = node.inputs[0] == kGraphInput ? input_shape_ : outputs_[node.inputs[0]].shape();
            deliver(node.inputs[0], slice_channels(grads[i], 0, a.c));
            deliver(node.inputs[1], slice_channels(grads[i], a.c, grads[i].shape().c - a.c));
        } else {
            deliver(node.inputs[0], layers_[i]->backward(grads[i]));
        }
        grads[i] = Tensor4<T>{};
    }
    if (grad_input.empty())
        grad_input = Tensor4<T>(input_shape_);
    return grad_input;
}

template <typename T>
std::vector<NamedParam<T>> Network<T>::params()
{
    std::vector<NamedParam<T>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i])
            layers_[i]->collect_params(graph_.nodes[i].name + ".", out);
    return out;
}

template <typename T>
std::vector<NamedBuffer<T>> Network<T>::buffers()
{
    std::vector<NamedBuffer<T>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i])
            layers_[i]->collect_buffers(graph_.nodes[i].name + ".", out);
    return out;
}

template <typename T>
void Network<T>::zero_grad()
{
    for (auto& p : params())
        p.param->zero_grad();
}

template <typename T>
std::size_t Network<T>::parameter_count()
{
    std::size_t n = 0;
    for (const auto& p : params())
        n += p.param->size();
    return n;
}

template <typename T>
std::vector<Tensor4<T>> Network<T>::collect_feature_maps(const Tensor4<T>& x, FeatureLevel level, Mode mode)
{
    forward(x, mode);
    const auto& t = outputs_.at(static_cast<std::size_t>(level == FeatureLevel::first ? graph_.first_block
                                                                                      : graph_.last_block));
    const auto& s = t.shape();
    std::vector<Tensor4<T>> maps;
    maps.reserve(s.c);
    for (std::size_t c = 0; c < s.c; ++c) {
        Tensor4<T> m(Shape4{1, 1, s.h, s.w});
        std::copy_n(t.plane(0, c), s.plane(), m.data());
        maps.push_back(std::move(m));
    }
    return maps;
}

template class Network<float>;
template class Network<double>;

}  // namespace gpunet
