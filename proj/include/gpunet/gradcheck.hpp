#pragma once

// Central finite-difference checks of analytic gradients.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gpunet/model.hpp"

namespace gpunet {

/// One differentiable input: the live values the loss reads, the analytic
/// gradient computed beforehand, and optionally the subset of indices to probe.
template <typename T>
struct GradProbe {
    std::string name;
    std::span<T> values;
    std::vector<double> analytic;
    std::vector<std::size_t> indices;  // empty probes every element
};

struct ProbeResult {
    std::string name;
    std::size_t checked = 0;
    /// Elements whose stencil crossed a kink (a ReLU sign, max-pool winner or
    /// BCE clamp changed between x-h, x and x+h); not compared.
    std::size_t skipped = 0;
    double max_abs_err = 0.0;
    /// max(|analytic|, |numeric|) over every compared element of the op.
    double scale = 0.0;
    /// max_abs_err / scale; 0 when all gradients vanish.
    double rel_err = 0.0;
};

struct CheckReport {
    std::string op;
    std::vector<ProbeResult> inputs;
    double tolerance = 0.0;

    double worst() const;
    std::size_t checked() const;
    std::size_t skipped() const;
    /// worst() below tolerance, with at least half of the probes compared.
    bool passed() const;
};

/// Central differences with h = cbrt(eps) * max(1, |x|), the divisor being the
/// actually representable step. Values are restored after each probe. Errors
/// are measured against the op-wide gradient scale, so structurally zero
/// partials (e.g. a conv bias feeding batch norm) do not divide by noise.
template <typename T>
CheckReport finite_difference_check(const std::string& op, const std::function<double()>& loss,
                                    std::vector<GradProbe<T>>& probes, double rel_tol);

enum class GradScope { primitives, blocks, model };

std::optional<GradScope> parse_grad_scope(const std::string& name);

/// 1e-3 (32-bit) / 1e-6 (64-bit) for primitives and blocks; 1e-2 (32-bit) /
/// 1e-6 (64-bit) for the end-to-end model subset.
template <typename T>
double default_tolerance(GradScope scope);

struct SuiteOptions {
    std::uint64_t seed = 1;
    /// Test fixture: skews the analytic conv2d weight gradient so the suite must fail.
    bool corrupt_backward = false;
    /// Model scope only. By default the 32-bit model's analytic gradient is
    /// compared with central differences of a 64-bit replica holding the same
    /// weights, because 32-bit differences of a deep ReLU network are limited
    /// by kink crossings to roughly 1e-2 accuracy. Set to difference the
    /// 32-bit network itself.
    bool same_precision_differences = false;
};

template <typename T>
std::vector<CheckReport> run_gradcheck_suite(GradScope scope, const SuiteOptions& opts = {});

}  // namespace gpunet
