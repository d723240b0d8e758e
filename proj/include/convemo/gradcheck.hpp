#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "convemo/matrix.hpp"

namespace convemo {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int worst_row = -1;
    int worst_col = -1;
    bool passed = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool all_passed = true;
    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
};

// Central-difference check of analytic gradients. `params` are the live
// parameter tensors the scalar function `f` reads; `analytic` are the
// matching gradients (same order and shapes). f is evaluated twice up front
// to detect nondeterminism.
//
// Relative error per entry: |g_a - g_n| / max(1, |g_a| + |g_n|).
struct GradCheckParam {
    std::string name;
    Matrix* value;
    const Matrix* analytic;
};

inline GradCheckReport grad_check(const std::function<double()>& f,
                                  std::vector<GradCheckParam> params,
                                  double tol, double step = 1e-5) {
    const double f0 = f();
    const double f1 = f();
    if (f0 != f1)
        throw NumericError("grad_check: f is not deterministic (" +
                           std::to_string(f0) + " vs " + std::to_string(f1) + ")");

    GradCheckReport report;
    for (auto& p : params) {
        if (!p.value->same_shape(*p.analytic))
            throw ShapeError("grad_check: analytic gradient for " + p.name + " is " +
                             p.analytic->shape_str() + ", parameter is " + p.value->shape_str());
        GradCheckEntry entry;
        entry.name = p.name;
        for (int i = 0; i < p.value->rows(); ++i) {
            for (int j = 0; j < p.value->cols(); ++j) {
                double& x = p.value->at(i, j);
                const double saved = x;
                x = saved + step;
                const double fp = f();
                x = saved - step;
                const double fm = f();
                x = saved;
                const double gn = (fp - fm) / (2.0 * step);
                const double ga = p.analytic->at(i, j);
                const double rel = std::abs(ga - gn) / std::max(1.0, std::abs(ga) + std::abs(gn));
                if (rel > entry.max_rel_err) {
                    entry.max_rel_err = rel;
                    entry.worst_row = i;
                    entry.worst_col = j;
                }
            }
        }
        entry.passed = entry.max_rel_err < tol;
        report.all_passed = report.all_passed && entry.passed;
        report.entries.push_back(entry);
    }
    return report;
}

}  // namespace convemo
