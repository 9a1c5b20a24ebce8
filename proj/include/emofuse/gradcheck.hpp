#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "emofuse/tensor.hpp"

namespace emofuse {

// Builds a scalar loss on the given tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    std::size_t coordinates = 0;
};

// Central-difference check of reverse-mode gradients. Each coordinate is
// perturbed by +-h; the error is |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckReport finite_diff_report(const LossBuilder& build, std::span<Tensor* const> params, double h = 1e-5) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("finite_diff_check: h must lie in [1e-7, 1e-3]");

    for (auto* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = build(tape);
        if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: loss is not finite");
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) {
        analytic.push_back(p->grad.empty() ? std::vector<double>(p->data.size(), 0.0) : p->grad);
    }

    auto evaluate = [&] {
        Tape tape(false);
        double v = build(tape).item();
        if (!std::isfinite(v)) throw NumericError("finite_diff_check: perturbed loss is not finite");
        return v;
    };

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi]->data;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = evaluate();
            data[i] = saved - h;
            const double down = evaluate();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[pi][i];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            ++report.coordinates;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = pi;
                report.worst_index = i;
            }
        }
    }
    return report;
}

inline double finite_diff_check(const LossBuilder& build, std::span<Tensor* const> params, double h = 1e-5) {
    return finite_diff_report(build, params, h).max_rel_error;
}

}  // namespace emofuse
