#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "sprompts/tensor.hpp"

namespace sprompts::gradcore {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::int64_t coords_checked = 0;
};

// Central-difference check of reverse-mode gradients. loss_fn must rebuild
// the graph from the current leaf values on every call and return a scalar.
// Error metric per coordinate: |analytic - numeric| / max(1, |analytic|, |numeric|),
// with the difference quotient computed in double. step_h perturbs the float
// parameters directly, so callers should keep losses O(1) in scale.
// max_coords_per_param > 0 checks an evenly strided subset of coordinates.
inline GradCheckResult finite_diff_grad_check(
    const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& params,
    double step_h = 1e-3, std::int64_t max_coords_per_param = 0) {
    for (auto p : params) p.zero_grad(); // drop residue from earlier backwards
    Tensor loss = loss_fn();
    backward(loss);
    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        if (!p.grad_populated())
            throw GradError("finite_diff_grad_check: parameter '" + p.name() +
                            "' received no gradient");
        analytic.push_back(p.grad());
    }
    for (auto p : params) p.zero_grad();

    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto& values = p.values_mut();
        const std::int64_t n = static_cast<std::int64_t>(values.size());
        std::int64_t stride = 1;
        if (max_coords_per_param > 0 && n > max_coords_per_param)
            stride = (n + max_coords_per_param - 1) / max_coords_per_param;
        for (std::int64_t i = 0; i < n; i += stride) {
            const float saved = values[i];
            values[i] = static_cast<float>(saved + step_h);
            const double f_plus = loss_fn().item();
            values[i] = static_cast<float>(saved - step_h);
            const double f_minus = loss_fn().item();
            values[i] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * step_h);
            const double a = analytic[pi][i];
            const double rel = std::abs(a - numeric) /
                               std::max({1.0, std::abs(a), std::abs(numeric)});
            if (rel > result.max_rel_err) result.max_rel_err = rel;
            ++result.coords_checked;
        }
    }
    return result;
}

} // namespace sprompts::gradcore
