#pragma once

// Finite-difference verification of reverse-mode gradients. The loss builder
// is re-invoked for every probe so each evaluation runs on a fresh tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "qrlab/params.hpp"
#include "qrlab/tensor.hpp"

namespace qrlab {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

struct GradCheckReport {
    bool ok = true;
    double max_rel_err = 0.0;
    std::vector<GradCheckEntry> entries;
};

/// Central differences with step `h` against one reverse pass.
/// Relative error uses a denominator floor of 1e-2 so that near-zero
/// gradient pairs compare by absolute difference at that scale.
inline GradCheckReport grad_check(const std::function<Tensor(Graph&, ParamStore&)>& build_loss,
                                  ParamStore& params, double tol, double h = 1e-5) {
    GradCheckReport report;

    params.zero_grads();
    {
        Graph g;
        Tensor loss = build_loss(g, params);
        backward(loss, params);
    }

    for (auto& [name, entry] : params) {
        GradCheckEntry out;
        out.name = name;
        std::vector<double> analytic = entry.grad;
        for (std::size_t i = 0; i < entry.value.size(); ++i) {
            const double saved = entry.value[i];
            entry.value[i] = saved + h;
            double up;
            {
                Graph g;
                up = build_loss(g, params).item();
            }
            entry.value[i] = saved - h;
            double down;
            {
                Graph g;
                down = build_loss(g, params).item();
            }
            entry.value[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-2});
            const double rel = std::fabs(a - numeric) / denom;
            if (rel > out.max_rel_err) {
                out.max_rel_err = rel;
                out.analytic_at_worst = a;
                out.numeric_at_worst = numeric;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, out.max_rel_err);
        if (out.max_rel_err > tol) report.ok = false;
        report.entries.push_back(std::move(out));
    }
    params.zero_grads();
    return report;
}

} // namespace qrlab
