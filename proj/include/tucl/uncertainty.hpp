#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "tucl/model.hpp"
#include "tucl/tensor.hpp"
#include "tucl/volume.hpp"

namespace tucl {

enum class DeltaMode { Quantile, Fixed };

struct Partition {
    std::vector<uint8_t> core;     // U(p) <= delta
    std::vector<uint8_t> boundary; // U(p) >  delta
    double delta = 0.0;
};

/// Core/boundary split of the domain by uncertainty threshold. In quantile
/// mode delta is the ceil(q*n)-th smallest value (ties resolved by <=), so
/// the core is never empty.
inline Partition partition(const std::vector<double>& u, DeltaMode mode, double param) {
    for (double v : u)
        if (v < 0.0) throw contract_error("uncertainty field must be nonnegative");
    Partition out;
    if (mode == DeltaMode::Fixed) {
        if (param < 0.0) throw param_error("fixed delta must be >= 0");
        out.delta = param;
    } else {
        if (param <= 0.0 || param > 1.0) throw param_error("delta quantile must be in (0,1]");
        std::vector<double> sorted(u);
        std::sort(sorted.begin(), sorted.end());
        const auto n = static_cast<int64_t>(sorted.size());
        int64_t idx = static_cast<int64_t>(std::ceil(param * static_cast<double>(n) - 1e-12)) - 1;
        idx = std::clamp<int64_t>(idx, 0, n - 1);
        out.delta = sorted[static_cast<size_t>(idx)];
    }
    out.core.resize(u.size());
    out.boundary.resize(u.size());
    for (size_t i = 0; i < u.size(); ++i) {
        const bool core = u[i] <= out.delta;
        out.core[i] = core ? 1 : 0;
        out.boundary[i] = core ? 0 : 1;
    }
    return out;
}

/// Per-voxel Monte-Carlo variance field with its core/boundary partition.
struct UncertaintyField {
    Tensor u; // W x H x D, nonnegative, no gradient
    int samples = 0;
    Partition part;

    int64_t core_count() const {
        int64_t c = 0;
        for (uint8_t v : part.core) c += v;
        return c;
    }
    int64_t boundary_count() const { return static_cast<int64_t>(part.core.size()) - core_count(); }
};

struct McResult {
    RegionMask mean_prediction; // probabilistic
    Tensor u;                   // W x H x D, population variance averaged over regions
};

/// T stochastic forward passes with independent derived dropout streams.
/// The variance uses divisor T (population variance over the samples) and
/// is averaged over the 3 region channels to one scalar per voxel.
inline McResult mc_uncertainty(const TuclModel& model, const MultiContrastVolume& x, int T,
                               uint64_t seed) {
    if (T < 2) throw param_error("mc_uncertainty: T must be >= 2, got " + std::to_string(T));
    const Dims3 dm = x.dims();
    const int64_t n = dm.voxels();
    std::vector<double> sum(static_cast<size_t>(3 * n), 0.0);
    std::vector<double> sum_sq(static_cast<size_t>(3 * n), 0.0);
    for (int t = 0; t < T; ++t) {
        const uint64_t pass_seed = RngStream::derive(seed, "mc/pass", static_cast<uint64_t>(t)).next_u64();
        Tensor pred = model.forward(x, /*stochastic=*/true, pass_seed).pred;
        const auto& pd = pred.data();
        for (size_t i = 0; i < pd.size(); ++i) {
            sum[i] += pd[i];
            sum_sq[i] += pd[i] * pd[i];
        }
    }
    const double inv_t = 1.0 / static_cast<double>(T);
    std::vector<double> mean_pred(static_cast<size_t>(3 * n));
    std::vector<double> u(static_cast<size_t>(n), 0.0);
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < n; ++i) {
            const size_t ix = static_cast<size_t>(c * n + i);
            const double mu = sum[ix] * inv_t;
            mean_pred[ix] = mu;
            u[static_cast<size_t>(i)] += std::max(0.0, sum_sq[ix] * inv_t - mu * mu) / 3.0;
        }
    McResult out;
    out.mean_prediction.values = Tensor::from_data({3, dm.w, dm.h, dm.d}, std::move(mean_pred));
    out.mean_prediction.binarized = false;
    out.u = Tensor::from_data({dm.w, dm.h, dm.d}, std::move(u));
    return out;
}

inline UncertaintyField make_field(Tensor u, int samples, DeltaMode mode, double param) {
    UncertaintyField f;
    f.part = partition(u.data(), mode, param);
    f.u = std::move(u);
    f.samples = samples;
    return f;
}

/// Partitioned refinement loss: alpha-weighted overlap loss over the core
/// plus beta-weighted overlap loss over the boundary. The overlap loss is
/// soft Dice per region channel restricted to the subset, averaged over
/// channels; an empty subset contributes zero.
inline Tensor dur_loss(const Tensor& y_hat, const RegionMask& y, const UncertaintyField& field,
                       double alpha, double beta, double smooth = 1e-5) {
    if (alpha < 0.0 || beta < 0.0) throw param_error("dur_loss: alpha and beta must be >= 0");
    if (!y.binarized) throw contract_error("dur_loss: ground truth must be binarized");
    if (y_hat.ndim() != 4 || y_hat.dim(0) != 3)
        throw shape_error("dur_loss: prediction must be 3xWxHxD, got " + shape_str(y_hat.shape()));
    if (y_hat.shape() != y.values.shape())
        throw shape_error("dur_loss: prediction/truth shape mismatch");
    const int64_t n = y_hat.size() / 3;
    if (static_cast<int64_t>(field.part.core.size()) != n)
        throw shape_error("dur_loss: partition size does not match volume");

    Tensor y_hat2d = reshape(y_hat, {3, n});
    auto subset_term = [&](const std::vector<uint8_t>& subset) -> Tensor {
        int64_t count = 0;
        for (uint8_t v : subset) count += v;
        if (count == 0) return Tensor::scalar(0.0);
        std::vector<double> mdata(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i)
            mdata[static_cast<size_t>(i)] = subset[static_cast<size_t>(i)];
        Tensor m = Tensor::from_data({1, n}, std::move(mdata));
        // Per-channel soft Dice over the subset: (2*inter + s)/(sum_p + sum_t + s).
        Tensor acc = Tensor::scalar(0.0);
        for (int c = 0; c < 3; ++c) {
            Tensor prow = mul(slice_rows(y_hat2d, c, c + 1), m);
            std::vector<double> trow_data(y.values.data().begin() + c * n,
                                          y.values.data().begin() + (c + 1) * n);
            for (int64_t i = 0; i < n; ++i)
                trow_data[static_cast<size_t>(i)] *= m.data()[static_cast<size_t>(i)];
            Tensor trow = Tensor::from_data({1, n}, std::move(trow_data));
            Tensor numer = add_scalar(scale(sum(mul(prow, trow)), 2.0), smooth);
            Tensor denom = add_scalar(add(sum(prow), sum(trow)), smooth);
            acc = add(acc, sub(Tensor::scalar(1.0), div(numer, denom)));
        }
        return scale(acc, 1.0 / 3.0);
    };

    Tensor core_term = subset_term(field.part.core);
    Tensor boundary_term = subset_term(field.part.boundary);
    return add(scale(core_term, alpha), scale(boundary_term, beta));
}

} // namespace tucl
