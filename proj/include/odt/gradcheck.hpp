#pragma once

// Finite-difference gradient verification, double precision only.
//
// Compares reverse-mode gradients against central differences
// (f(x+h) - f(x-h)) / 2h. Small parameter tensors are swept coordinate by
// coordinate; tensors above `full_limit` elements get `max_coords` randomly
// sampled coordinates so end-to-end model checks stay tractable.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "odt/common.hpp"
#include "odt/tensor.hpp"

namespace odt {

struct GradCheckConfig {
    double h = 1e-5;
    double denom_floor = 1e-2;     // relative error floor, absolute below this scale
    std::int64_t full_limit = 10000;
    int max_coords = 64;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t worst_param = 0;
    std::int64_t worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

// `make_loss` rebuilds the scalar loss graph from the current parameter data.
template <class MakeLoss>
GradCheckResult gradient_check(MakeLoss&& make_loss, const std::vector<TensorPtrD>& params,
                               Rng& rng, const GradCheckConfig& cfg = {}) {
    for (auto& p : params) {
        if (!p->requires_grad) throw UsageError("gradient_check: parameter without requires_grad");
        p->ensure_grad();
        p->zero_grad();
    }
    auto loss = make_loss();
    backward<double>(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }

    GradCheckResult res;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const std::int64_t n = p->numel();
        std::vector<std::int64_t> coords;
        if (n <= cfg.full_limit) {
            coords.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            coords.reserve(static_cast<std::size_t>(cfg.max_coords));
            for (int i = 0; i < cfg.max_coords; ++i) coords.push_back(rng.uniform_int(0, n - 1));
        }
        for (std::int64_t ci : coords) {
            const double v = p->data[static_cast<std::size_t>(ci)];
            p->data[static_cast<std::size_t>(ci)] = v + cfg.h;
            const double lp = make_loss()->item();
            p->data[static_cast<std::size_t>(ci)] = v - cfg.h;
            const double lm = make_loss()->item();
            p->data[static_cast<std::size_t>(ci)] = v;
            const double num = (lp - lm) / (2.0 * cfg.h);
            const double ana = analytic[pi][static_cast<std::size_t>(ci)];
            const double denom = std::max({std::abs(ana), std::abs(num), cfg.denom_floor});
            const double rel = std::abs(ana - num) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = pi;
                res.worst_coord = ci;
                res.analytic = ana;
                res.numeric = num;
            }
        }
    }
    return res;
}

}  // namespace odt
