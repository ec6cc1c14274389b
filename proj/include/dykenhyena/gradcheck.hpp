// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dykenhyena/tensor.hpp"

namespace dkh {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t n_checked = 0;
    std::string worst;  // "<param>[<index>]"
    double tol = 0.0;
    bool passed = true;
};

/// Builds a scalar loss on the given graph. Parameters must enter the graph
/// through Graph::param so their gradients land in Tensor::grad.
using LossBuilder = std::function<Var(Graph&)>;

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares reverse-mode gradients with central differences
/// (f(t+h) - f(t-h)) / 2h for every scalar of every parameter.
inline GradCheckReport finite_difference_check(const LossBuilder& f, std::span<Tensor* const> params,
                                               double h, double tol,
                                               std::span<const std::string> names = {}) {
    if (!(h > 0.0)) throw Error("finite_difference_check: h must be positive");
    for (Tensor* p : params) {
        p->requires_grad = true;
        p->zero_grad();
    }
    {
        Graph g;
        g.backward(f(g));
    }
    GradCheckReport rep;
    rep.tol = tol;
    auto eval = [&] {
        Graph g(false);
        return f(g).item();
    };
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.data[i];
            p.data[i] = orig + h;
            const double fp = eval();
            p.data[i] = orig - h;
            const double fm = eval();
            p.data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = relative_error(p.grad[i], numeric);
            ++rep.n_checked;
            if (err > rep.max_rel_error || rep.worst.empty()) {
                rep.max_rel_error = std::max(rep.max_rel_error, err);
                if (err >= rep.max_rel_error)
                    rep.worst = (pi < names.size() ? names[pi] : "param" + std::to_string(pi)) + "[" +
                                std::to_string(i) + "]";
            }
        }
    }
    rep.passed = rep.max_rel_error <= tol;
    return rep;
}

}  // namespace dkh
