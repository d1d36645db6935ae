#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fuseloc/params.hpp"
#include "fuseloc/primitives.hpp"
#include "fuseloc/rng.hpp"
#include "fuseloc/tensor.hpp"

// Central-difference gradient verification. Checks run entirely in double:
// the deployed float path shares the same template code, so verifying the
// double instantiation verifies the arithmetic while keeping the comparison
// far below the 1e-4 gate.

namespace fuseloc {

inline double relative_gradient_error(double analytic, double numeric) {
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
    return std::fabs(analytic - numeric) / denom;
}

// Generic checker: `coords` are pointers to every differentiable coordinate,
// `analytic` the matching gradient entries, `objective` re-evaluates the
// scalar under the current coordinate values.
inline double max_relative_gradient_error(const std::function<double()>& objective,
                                          const std::vector<double*>& coords,
                                          const std::vector<double>& analytic, double eps) {
    double worst = 0.0;
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double saved = *coords[i];
        *coords[i] = saved + eps;
        const double up = objective();
        *coords[i] = saved - eps;
        const double down = objective();
        *coords[i] = saved;
        const double cd = (up - down) / (2.0 * eps);
        worst = std::max(worst, relative_gradient_error(analytic[i], cd));
    }
    return worst;
}

// Verifies one primitive kind: projects the output against a fixed random
// weighting u, compares primitive_backward against central differences over
// every input and trainable-parameter coordinate. Large return values are a
// result, not an error.
inline double finite_difference_check(const PrimitiveKind& kind, std::vector<Tensor<double>> inputs,
                                      ParameterTable<double> params, double eps,
                                      Mode mode = Mode::kTrain, std::uint64_t seed = 17) {
    Rng rng(seed);
    Tensor<double> out = primitive_forward(kind, inputs, params, mode);
    Tensor<double> u(out.shape());
    for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = rng.normal();

    std::vector<Tensor<double>> input_grads;
    ParameterTable<double> param_grads;
    primitive_backward(kind, inputs, params, u, input_grads, param_grads, mode);

    std::vector<double*> coords;
    std::vector<double> analytic;
    for (std::size_t t = 0; t < inputs.size(); ++t)
        for (std::int64_t i = 0; i < inputs[t].numel(); ++i) {
            coords.push_back(&inputs[t][i]);
            analytic.push_back(input_grads[t][i]);
        }
    for (auto& e : params.entries()) {
        if (!e.trainable) continue;
        const Tensor<double>* grad = param_grads.find(e.path);
        for (std::int64_t i = 0; i < e.value.numel(); ++i) {
            coords.push_back(&e.value[i]);
            analytic.push_back(grad != nullptr ? (*grad)[i] : 0.0);
        }
    }

    auto objective = [&]() {
        Tensor<double> y = primitive_forward(kind, inputs, params, mode);
        double acc = 0.0;
        for (std::int64_t i = 0; i < y.numel(); ++i) acc += u[i] * y[i];
        return acc;
    };
    return max_relative_gradient_error(objective, coords, analytic, eps);
}

// Coordinate span over every trainable tensor of a table, for composite-block
// checks driven from test code.
inline void collect_coords(ParameterTable<double>& params, std::vector<double*>* coords) {
    for (auto& e : params.entries()) {
        if (!e.trainable) continue;
        for (std::int64_t i = 0; i < e.value.numel(); ++i) coords->push_back(&e.value[i]);
    }
}

inline std::vector<double> collect_grads(const ParameterTable<double>& params,
                                         const ParameterTable<double>& grads) {
    std::vector<double> out;
    for (const auto& e : params.entries()) {
        if (!e.trainable) continue;
        const Tensor<double>* g = grads.find(e.path);
        for (std::int64_t i = 0; i < e.value.numel(); ++i) out.push_back(g != nullptr ? (*g)[i] : 0.0);
    }
    return out;
}

}  // namespace fuseloc
