#pragma once

// Central finite-difference gradient oracle, independent of the autodiff
// path it checks: the scalar function is re-evaluated at perturbed leaf
// values and compared against the grads produced by backward().

#include <cmath>
#include <functional>
#include <vector>

#include "tucl/tensor.hpp"

namespace gradcheck {

struct Result {
    double max_rel_err = 0.0;
    size_t checked = 0;
};

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
    return std::abs(analytic - numeric) / denom;
}

/// Compare backward() grads of `leaves` against central differences of
/// `scalar_fn` (which must rebuild the graph from the leaves' current
/// data). `element_stride` > 1 checks a deterministic subsample.
inline Result check(std::vector<tucl::Tensor> leaves,
                    const std::function<tucl::Tensor()>& scalar_fn, double step = 1e-4,
                    size_t element_stride = 1) {
    tucl::Tensor loss = scalar_fn();
    for (auto& l : leaves) l.zero_grad();
    tucl::backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves) analytic.push_back(l.mutable_grad());

    Result res;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li].mutable_data();
        for (size_t i = 0; i < data.size(); i += element_stride) {
            const double orig = data[i];
            data[i] = orig + step;
            const double up = scalar_fn().item();
            data[i] = orig - step;
            const double down = scalar_fn().item();
            data[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[li][i], numeric));
            ++res.checked;
        }
    }
    return res;
}

} // namespace gradcheck
