#pragma once

#include "fuseloc/params.hpp"

namespace fuseloc {

// SGD with momentum and coupled weight decay:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
// Momentum buffers live beside the parameters and persist across steps.
// Non-trainable entries (batch-norm running statistics) are untouched.
template <typename T>
void sgd_momentum_step(ParameterTable<T>& params, const ParameterTable<T>& grads, T lr, T momentum,
                       T weight_decay) {
    if (!(lr > T(0))) throw ContractError("diffcore", "sgd: learning rate must be positive");
    for (auto& e : params.entries()) {
        if (!e.trainable) continue;
        const Tensor<T>* g = grads.find(e.path);
        if (g == nullptr)
            throw ContractError("diffcore", "sgd: missing gradient for trainable parameter '" + e.path + "'");
        if (g->shape() != e.value.shape())
            throw ContractError("diffcore", "sgd: gradient shape mismatch for '" + e.path + "'");
        if (e.momentum.numel() == 0) e.momentum = Tensor<T>(e.value.shape());
        for (std::int64_t i = 0; i < e.value.numel(); ++i) {
            const T v = momentum * e.momentum[i] + (*g)[i] + weight_decay * e.value[i];
            e.momentum[i] = v;
            e.value[i] -= lr * v;
        }
    }
}

}  // namespace fuseloc
