#pragma once

#include <random>

#include "bvfi/ops.hpp"
#include "bvfi/tensor.hpp"

namespace bvfi {

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string worst;  // "input#i[j]" of the worst coordinate
};

/// Compares reverse-mode gradients against central finite differences for
/// every element of every input that requires a gradient. Runs in the
/// tensor's own precision; callers use double for meaningful tolerances.
/// Error metric per coordinate: |analytic − numeric| / max(1, |analytic|, |numeric|).
template <typename F>
GradCheckReport gradcheck(F&& forward, std::vector<Tensor<double>> inputs, double h = 1e-4, double tol = 1e-4) {
    for (auto& in : inputs) {
        in.set_requires_grad(true);
        in.zero_grad();
    }

    Tensor<double> loss = forward();
    check(loss.numel() == 1, "gradcheck: forward must return a scalar");
    check(loss.all_finite(), "gradcheck: non-finite loss");
    backward(loss);

    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs)
        analytic.push_back(in.has_grad() ? in.grad() : std::vector<double>(in.numel(), 0.0));

    GradCheckReport rep;
    NoGradGuard ng;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto& data = inputs[i].data();
        for (size_t j = 0; j < data.size(); ++j) {
            double orig = data[j];
            data[j] = orig + h;
            double fp = forward().item();
            data[j] = orig - h;
            double fm = forward().item();
            data[j] = orig;
            check(std::isfinite(fp) && std::isfinite(fm),
                  "gradcheck: non-finite loss at input#" + std::to_string(i) + "[" + std::to_string(j) + "]");
            double num = (fp - fm) / (2 * h);
            double ana = analytic[i][j];
            double err = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst = "input#" + std::to_string(i) + "[" + std::to_string(j) + "]";
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

/// Scalar loss from a fixed random projection of a tensor; catches backward
/// bugs that a plain sum would cancel out.
template <typename T>
Tensor<T> projection_loss(const Tensor<T>& x, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<T> w(x.numel());
    for (auto& v : w) v = T(dist(rng));
    Tensor<T> weights = Tensor<T>::from(x.shape(), std::move(w));
    return sum(mul(x, weights));
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937& rng, T lo = T(-1), T hi = T(1)) {
    std::uniform_real_distribution<double> dist((double)lo, (double)hi);
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = T(dist(rng));
    return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace bvfi
