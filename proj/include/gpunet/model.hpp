#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gpunet/blocks.hpp"

namespace gpunet {

enum class BlockKind { ordinary, ghost, gp };

std::string to_string(BlockKind kind);
/// Accepts "ordinary"/"unet", "ghost"/"ghost-unet", "gp"/"gpu-net".
std::optional<BlockKind> parse_block_kind(const std::string& name);

/// U-Net family configuration. The ghost and GP variants replace each
/// double-conv block with a bottleneck; upsamplers and head stay ordinary.
struct ModelConfig {
    BlockKind block_kind = BlockKind::ordinary;
    std::vector<std::size_t> widths{64, 128, 256, 512, 1024};
    std::size_t in_channels = 3;
    std::size_t out_channels = 1;
    /// Ghost ratio s; 0 selects the preset (2 for ghost, 6 for gp).
    std::size_t ratio = 0;
    /// Kernel of the intrinsic convolution inside ghost/GP modules.
    std::size_t primary_kernel = 1;

    void validate() const;
    std::size_t effective_ratio() const;
    std::vector<CheapOp> bank() const;

    static ModelConfig unet(std::vector<std::size_t> widths = {64, 128, 256, 512, 1024}, std::size_t in_channels = 3);
    static ModelConfig ghost_unet(std::vector<std::size_t> widths = {64, 128, 256, 512, 1024},
                                  std::size_t in_channels = 3);
    static ModelConfig gpu_net(std::vector<std::size_t> widths = {64, 128, 256, 512, 1024},
                               std::size_t in_channels = 3);
};

struct MaxPoolSpec {};
struct ConcatSpec {};
struct SigmoidSpec {};

using NodeSpec =
    std::variant<DoubleConvSpec, BneckSpec, MaxPoolSpec, TransposedConvSpec, ConcatSpec, ConvSpec, SigmoidSpec>;

/// Input index referring to the graph input rather than a node.
inline constexpr int kGraphInput = -1;

struct GraphNode {
    std::string name;
    NodeSpec spec;
    std::vector<int> inputs;  // node indices (or kGraphInput); concat takes (skip, upsampled)
};

/// Ordered, acyclic network description shared by execution and cost walking.
struct LayerGraph {
    ModelConfig config;
    std::vector<GraphNode> nodes;
    int first_block = -1;  // encoder level 0 block
    int last_block = -1;   // decoder level 0 block

    /// Concat nodes: (skip source, concat node) pairs, encoder level i -> decoder level i.
    std::vector<std::pair<int, int>> skip_edges() const;
};

/// encoder: 4 x (block -> maxpool) + bottom block; decoder: 4 x (3x3 stride-2
/// transposed conv halving channels -> concat skip -> block); head: 1x1 conv + sigmoid.
LayerGraph build_model(const ModelConfig& cfg);

enum class FeatureLevel { first, last };

/// An instantiated LayerGraph with parameters.
template <typename T>
class Network {
public:
    explicit Network(LayerGraph graph);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;
    ~Network();

    const LayerGraph& graph() const { return graph_; }
    const ModelConfig& config() const { return graph_.config; }

    /// Kaiming-uniform conv kernels, zero biases, identity BN, in node order.
    void init(std::uint64_t seed);

    /// Probability map with the input's spatial size. Throws ShapeError when
    /// the spatial dims are not divisible by 16.
    Tensor4<T> forward(const Tensor4<T>& x, Mode mode);
    /// Backpropagates dL/d(output) through the most recent forward; returns dL/dx.
    Tensor4<T> backward(const Tensor4<T>& grad_output);

    std::vector<NamedParam<T>> params();
    std::vector<NamedBuffer<T>> buffers();
    void zero_grad();
    std::size_t parameter_count();

    /// Output of node `index` from the most recent forward call.
    const Tensor4<T>& node_output(std::size_t index) const { return outputs_.at(index); }

    /// Runs forward and returns every channel of the first (encoder level 0)
    /// or last (decoder level 0) block output for batch item 0 as (1,1,h,w) maps.
    std::vector<Tensor4<T>> collect_feature_maps(const Tensor4<T>& x, FeatureLevel level, Mode mode = Mode::eval);

private:
    LayerGraph graph_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;  // null for concat nodes
    std::vector<Tensor4<T>> outputs_;
    Shape4 input_shape_{};
};

}  // namespace gpunet
