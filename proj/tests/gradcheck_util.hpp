#pragma once

#include <functional>

#include "fuseloc/gradcheck.hpp"
#include "fuseloc/params.hpp"

// Composite-block gradient checking: central differences over every trainable
// parameter coordinate of a double-instantiated layer stack.

namespace fuseloc_test {

using fuseloc::ParameterTable;
using fuseloc::Tensor;

// objective: re-evaluates the scalar under the current parameter values.
// analytic_grads: filled once by the caller via the layer backward.
//
// Composite blocks have coordinates whose true gradient is structurally zero
// (a batch-norm downstream absorbs constant shifts exactly); central
// differences only resolve those up to their own round-off. The denominator
// floor of 1e-3 turns the 1e-4 relative gate into an absolute agreement of
// 1e-7 for such coordinates, orders of magnitude above FD noise and below
// any real gradient.
inline double param_gradcheck(ParameterTable<double>& params, const ParameterTable<double>& grads,
                              const std::function<double()>& objective, double eps = 1e-5) {
    std::vector<double*> coords;
    fuseloc::collect_coords(params, &coords);
    const std::vector<double> analytic = fuseloc::collect_grads(params, grads);
    double worst = 0.0;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double saved = *coords[i];
        *coords[i] = saved + eps;
        const double up = objective();
        *coords[i] = saved - eps;
        const double down = objective();
        *coords[i] = saved;
        const double cd = (up - down) / (2.0 * eps);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(cd), 1e-3});
        worst = std::max(worst, std::fabs(analytic[i] - cd) / denom);
    }
    return worst;
}

// random upstream weighting u and the projected scalar objective
template <typename F>
double weighted_objective(const Tensor<double>& u, F&& forward) {
    Tensor<double> y = forward();
    double acc = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) acc += u[i] * y[i];
    return acc;
}

}  // namespace fuseloc_test
