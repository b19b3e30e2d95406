#pragma once

// Analytic parameter and FLOP accounting.
//
// Conventions: one FLOP is one multiply-accumulate; biases, batch-norm,
// activations and pooling cost zero FLOPs. Batch-norm affine pairs and
// biases do count as parameters.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gpunet/model.hpp"

namespace gpunet {

using Count = std::uint64_t;

/// c*k*k*n/groups (+ n when the spec has a bias).
Count params_conv(const ConvSpec& spec);
/// c*k*k*out_h*out_w*n/groups.
Count flops_conv(const ConvSpec& spec, std::size_t out_h, std::size_t out_w);

Count params_transposed_conv(const TransposedConvSpec& spec);
/// Counted like a convolution evaluated at the output resolution:
/// c*k*k*out_h*out_w*n.
Count flops_transposed_conv(const TransposedConvSpec& spec, std::size_t out_h, std::size_t out_w);

enum class CostMode {
    exact,        ///< sums the actual kernels: c*k*k*m + sum_j m*d_j*d_j
    closed_form,  ///< c*k*k*(n/s) + (n/s)*(s-1)*d*d; needs s | n and a uniform bank
};

Count params_gp(const GhostSpec& spec, CostMode mode = CostMode::exact);
Count flops_gp(const GhostSpec& spec, std::size_t out_h, std::size_t out_w, CostMode mode = CostMode::exact);

Count params_bneck(const BneckSpec& spec);
Count flops_bneck(const BneckSpec& spec, std::size_t h, std::size_t w);
Count params_double_conv(const DoubleConvSpec& spec);
Count flops_double_conv(const DoubleConvSpec& spec, std::size_t h, std::size_t w);

/// Non-negative rational kept in lowest terms.
struct Rational {
    Count num = 0;
    Count den = 1;

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    friend bool operator==(const Rational&, const Rational&) = default;
};

/// (c*s*k*k) / (c*k*k + (s-1)*d*d): parameter compression of a ghost/GP
/// module over an ordinary convolution.
Rational ratio_params(Count c, Count k, Count d, Count s);
/// FLOP acceleration; the spatial factor cancels so it equals ratio_params.
Rational ratio_flops(Count c, Count k, Count d, Count s);

struct CostRow {
    std::string name;
    std::string kind;
    Shape4 output;  // n = 1
    Count params = 0;
    Count flops = 0;
};

struct CostComparison {
    std::string baseline;
    double params_ratio = 0.0;  // baseline / this
    double flops_ratio = 0.0;   // baseline / this
};

struct CostReport {
    std::string model;
    std::size_t input_h = 0, input_w = 0;
    std::vector<CostRow> rows;
    Count total_params = 0;
    Count total_flops = 0;
    std::optional<CostComparison> comparison;

    void compare_against(const CostReport& baseline);
};

/// Walks the graph with shape propagation for a single (1, in, h, w) input.
CostReport model_cost(const LayerGraph& graph, std::size_t input_h, std::size_t input_w);

/// Human-readable aligned table.
std::string format_table(const CostReport& report);
/// Structured text: one JSON object with fields model, input, rows[{name, kind, params, flops}], totals.
std::string format_json(const CostReport& report);

}  // namespace gpunet
