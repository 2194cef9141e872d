#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "doufu/tensor.hpp"

namespace gradcheck {

using Loss = std::function<doufu::nn::Var(doufu::nn::Tape&, doufu::nn::ParamStore&)>;

struct Result {
    double worst = 0.0;
    std::string tensor;
};

/// Central differences against the tape, one relative error per parameter tensor:
/// ||analytic - numeric|| / (||analytic|| + ||numeric||).
/// The default step sits near the cube root of machine epsilon, where rounding and truncation balance.
inline Result check(doufu::nn::ParamStore& store, const Loss& loss, double eps = 1e-5) {
    using namespace doufu::nn;
    store.zero_grad();
    {
        Tape t;
        t.backward(loss(t, store));
    }
    auto eval = [&] {
        Tape t;
        return loss(t, store).value().item();
    };
    Result res;
    for (auto& p : store.params()) {
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double keep = p.value[i];
            p.value[i] = keep + eps;
            const double up = eval();
            p.value[i] = keep - eps;
            const double down = eval();
            p.value[i] = keep;
            const double num = (up - down) / (2 * eps), ana = p.grad[i];
            diff2 += (ana - num) * (ana - num);
            a2 += ana * ana;
            n2 += num * num;
        }
        // Both sides at round-off level (e.g. key biases, which softmax cancels exactly).
        if (std::sqrt(a2) < 1e-9 && std::sqrt(n2) < 1e-6) continue;
        const double rel = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-12);
        if (rel > res.worst) res = {rel, p.name};
    }
    store.zero_grad();
    return res;
}

/// Fills a parameter with a deterministic, non-symmetric pattern.
inline void fill(doufu::nn::Parameter& p, double offset = 0.0) {
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = std::sin(1.7 * static_cast<double>(i) + offset) * 0.8;
}

} // namespace gradcheck
