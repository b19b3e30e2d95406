#include "gpunet/cost.hpp"

#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace gpunet {

Count params_conv(const ConvSpec& spec)
{
    const Count c = spec.in_channels, n = spec.out_channels, k = spec.kernel;
    return c * k * k * n / spec.groups + (spec.bias ? n : 0);
}

Count flops_conv(const ConvSpec& spec, std::size_t out_h, std::size_t out_w)
{
    const Count c = spec.in_channels, n = spec.out_channels, k = spec.kernel;
    return c * k * k * static_cast<Count>(out_h) * static_cast<Count>(out_w) * n / spec.groups;
}

Count params_transposed_conv(const TransposedConvSpec& spec)
{
    const Count c = spec.in_channels, n = spec.out_channels, k = spec.kernel;
    return c * k * k * n + (spec.bias ? n : 0);
}

Count flops_transposed_conv(const TransposedConvSpec& spec, std::size_t out_h, std::size_t out_w)
{
    const Count c = spec.in_channels, n = spec.out_channels, k = spec.kernel;
    return c * k * k * static_cast<Count>(out_h) * static_cast<Count>(out_w) * n;
}

namespace {

Count uniform_cheap_kernel(const GhostSpec& spec)
{
    if (spec.bank.empty())
        return 0;
    for (const auto& op : spec.bank)
        if (op.kernel != spec.bank.front().kernel)
            throw ConfigError("closed-form cost needs a uniform cheap kernel size");
    return spec.bank.front().kernel;
}

Count ghost_kernel_terms(const GhostSpec& spec, CostMode mode)
{
    spec.validate();
    const Count c = spec.in_channels, k = spec.kernel, s = spec.ratio;
    if (mode == CostMode::closed_form) {
        if (spec.out_channels % spec.ratio != 0)
            throw ConfigError("closed-form cost needs out_channels divisible by the ratio");
        const Count m = spec.out_channels / s;
        const Count d = uniform_cheap_kernel(spec);
        return c * k * k * m + m * (s - 1) * d * d;
    }
    const Count m = spec.intrinsic();
    Count total = c * k * k * m;
    for (const auto& op : spec.bank)
        total += m * op.kernel * op.kernel;
    return total;
}

Count gcd(Count a, Count b)
{
    return std::gcd(a, b);
}

}  // namespace

Count params_gp(const GhostSpec& spec, CostMode mode)
{
    return ghost_kernel_terms(spec, mode);
}

Count flops_gp(const GhostSpec& spec, std::size_t out_h, std::size_t out_w, CostMode mode)
{
    return ghost_kernel_terms(spec, mode) * static_cast<Count>(out_h) * static_cast<Count>(out_w);
}

Count params_bneck(const BneckSpec& spec)
{
    spec.validate();
    const Count n = spec.out_channels;
    Count total = params_gp(spec.first) + 2 * n + params_gp(spec.second) + 2 * n;
    if (spec.shortcut == ShortcutKind::projection)
        total += params_conv(ConvSpec{spec.in_channels, spec.out_channels, 1, 1, 0, 1, 1, false}) + 2 * n;
    return total;
}

Count flops_bneck(const BneckSpec& spec, std::size_t h, std::size_t w)
{
    spec.validate();
    Count total = flops_gp(spec.first, h, w) + flops_gp(spec.second, h, w);
    if (spec.shortcut == ShortcutKind::projection)
        total += flops_conv(ConvSpec{spec.in_channels, spec.out_channels, 1, 1, 0, 1, 1, false}, h, w);
    return total;
}

Count params_double_conv(const DoubleConvSpec& spec)
{
    const Count n = spec.out_channels;
    return params_conv(spec.conv(0)) + 2 * n + params_conv(spec.conv(1)) + 2 * n;
}

Count flops_double_conv(const DoubleConvSpec& spec, std::size_t h, std::size_t w)
{
    return flops_conv(spec.conv(0), h, w) + flops_conv(spec.conv(1), h, w);
}

Rational ratio_params(Count c, Count k, Count d, Count s)
{
    if (c == 0 || k == 0 || d == 0 || s == 0)
        throw ConfigError("ratio arguments must be positive");
    Count num = c * s * k * k;
    Count den = c * k * k + (s - 1) * d * d;
    const Count g = gcd(num, den);
    return {num / g, den / g};
}

Rational ratio_flops(Count c, Count k, Count d, Count s)
{
    // (c*k*k*n*h*w) / ((n/s)*h*w*(c*k*k + (s-1)*d*d)); n*h*w cancels.
    if (c == 0 || k == 0 || d == 0 || s == 0)
        throw ConfigError("ratio arguments must be positive");
    const Count per_map_conv = c * k * k;
    const Count per_map_ghost = c * k * k + (s - 1) * d * d;
    Count num = per_map_conv * s;
    Count den = per_map_ghost;
    const Count g = gcd(num, den);
    return {num / g, den / g};
}

void CostReport::compare_against(const CostReport& baseline)
{
    comparison = CostComparison{baseline.model,
                                static_cast<double>(baseline.total_params) / static_cast<double>(total_params),
                                static_cast<double>(baseline.total_flops) / static_cast<double>(total_flops)};
}

CostReport model_cost(const LayerGraph& graph, std::size_t input_h, std::size_t input_w)
{
    CostReport report;
    report.model = to_string(graph.config.block_kind);
    report.input_h = input_h;
    report.input_w = input_w;
    const Shape4 input{1, graph.config.in_channels, input_h, input_w};
    std::vector<Shape4> shapes;
    auto source = [&](int idx) { return idx == kGraphInput ? input : shapes.at(static_cast<std::size_t>(idx)); };

    for (const auto& node : graph.nodes) {
        const Shape4 in = source(node.inputs.at(0));
        CostRow row{node.name, "", in, 0, 0};
        std::visit(
            [&](const auto& spec) {
                using S = std::decay_t<decltype(spec)>;
                if constexpr (std::is_same_v<S, DoubleConvSpec>) {
                    row.kind = "double-conv";
                    row.output = {1, spec.out_channels, in.h, in.w};
                    row.params = params_double_conv(spec);
                    row.flops = flops_double_conv(spec, in.h, in.w);
                } else if constexpr (std::is_same_v<S, BneckSpec>) {
                    row.kind = spec.first.ratio == 6 && spec.first.bank == GhostSpec::aspp_bank() ? "gp-bneck"
                                                                                                  : "ghost-bneck";
                    row.output = {1, spec.out_channels, in.h, in.w};
                    row.params = params_bneck(spec);
                    row.flops = flops_bneck(spec, in.h, in.w);
                } else if constexpr (std::is_same_v<S, MaxPoolSpec>) {
                    row.kind = "maxpool";
                    if (in.h % 2 != 0 || in.w % 2 != 0)
                        throw ShapeError("cost walk: odd spatial size at " + node.name);
                    row.output = {1, in.c, in.h / 2, in.w / 2};
                } else if constexpr (std::is_same_v<S, TransposedConvSpec>) {
                    row.kind = "transposed-conv";
                    row.output = {1, spec.out_channels, spec.output_size(in.h), spec.output_size(in.w)};
                    row.params = params_transposed_conv(spec);
                    row.flops = flops_transposed_conv(spec, row.output.h, row.output.w);
                } else if constexpr (std::is_same_v<S, ConcatSpec>) {
                    row.kind = "concat";
                    const Shape4 other = source(node.inputs.at(1));
                    if (other.h != in.h || other.w != in.w)
                        throw ShapeError("cost walk: concat operands disagree at " + node.name);
                    row.output = {1, in.c + other.c, in.h, in.w};
                } else if constexpr (std::is_same_v<S, ConvSpec>) {
                    row.kind = "conv";
                    row.output = {1, spec.out_channels, spec.output_size(in.h), spec.output_size(in.w)};
                    row.params = params_conv(spec);
                    row.flops = flops_conv(spec, row.output.h, row.output.w);
                } else if constexpr (std::is_same_v<S, SigmoidSpec>) {
                    row.kind = "sigmoid";
                    row.output = in;
                }
            },
            node.spec);
        shapes.push_back(row.output);
        report.total_params += row.params;
        report.total_flops += row.flops;
        report.rows.push_back(std::move(row));
    }
    return report;
}

std::string format_table(const CostReport& report)
{
    std::ostringstream os;
    os << "model " << report.model << "  input " << report.input_h << "x" << report.input_w << "\n";
    os << std::left << std::setw(10) << "name" << std::setw(17) << "kind" << std::setw(18) << "output" << std::right
       << std::setw(14) << "params" << std::setw(18) << "flops" << "\n";
    for (const auto& r : report.rows) {
        const std::string out = std::to_string(r.output.c) + "x" + std::to_string(r.output.h) + "x" +
                                std::to_string(r.output.w);
        os << std::left << std::setw(10) << r.name << std::setw(17) << r.kind << std::setw(18) << out << std::right
           << std::setw(14) << r.params << std::setw(18) << r.flops << "\n";
    }
    os << std::fixed << std::setprecision(2);
    os << "total params " << report.total_params << " (" << static_cast<double>(report.total_params) / 1e6
       << " M)\n";
    os << "total flops  " << report.total_flops << " (" << static_cast<double>(report.total_flops) / 1e9
       << " G MAC)\n";
    if (report.comparison) {
        os << std::setprecision(4);
        os << "vs " << report.comparison->baseline << ": params ratio " << report.comparison->params_ratio
           << ", flops ratio " << report.comparison->flops_ratio << "\n";
    }
    return os.str();
}

std::string format_json(const CostReport& report)
{
    nlohmann::ordered_json j;
    j["model"] = report.model;
    j["input"] = {{"height", report.input_h}, {"width", report.input_w}};
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"name", r.name}, {"kind", r.kind}, {"params", r.params}, {"flops", r.flops}});
    j["rows"] = std::move(rows);
    j["total"] = {{"params", report.total_params}, {"flops", report.total_flops}};
    if (report.comparison)
        j["comparison"] = {{"baseline", report.comparison->baseline},
                           {"params_ratio", report.comparison->params_ratio},
                           {"flops_ratio", report.comparison->flops_ratio}};
    return j.dump();
}

}  // namespace gpunet
