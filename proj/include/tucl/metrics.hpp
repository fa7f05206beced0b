#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tucl/errors.hpp"
#include "tucl/tensor.hpp"
#include "tucl/volume.hpp"

namespace tucl {

struct LossWeights {
    double lambda1 = 1.0; // segmentation
    double lambda2 = 0.1; // prompt cycle
    double lambda3 = 0.5; // uncertainty refinement
    double alpha = 1.0;   // core weight
    double beta = 2.0;    // boundary weight

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || alpha < 0 || beta < 0)
            throw param_error("loss weights must be nonnegative");
        if (lambda1 == 0 && lambda2 == 0 && lambda3 == 0)
            throw param_error("at least one lambda must be positive");
    }
};

// ---------------------------------------------------------------------------
// training losses

/// Mean over the 3 regions of (soft Dice loss + BCE) / 2.
inline Tensor seg_loss(const Tensor& y_hat, const RegionMask& y, double smooth = 1e-5) {
    if (!y.binarized) throw contract_error("seg_loss: ground truth must be binarized");
    if (y_hat.shape() != y.values.shape())
        throw shape_error("seg_loss: shape mismatch " + shape_str(y_hat.shape()) + " vs " +
                          shape_str(y.values.shape()));
    const int64_t n = y_hat.size() / 3;
    Tensor p2d = reshape(y_hat, {3, n});
    Tensor acc = Tensor::scalar(0.0);
    for (int c = 0; c < 3; ++c) {
        Tensor p = slice_rows(p2d, c, c + 1);
        Tensor t = Tensor::from_data({1, n}, std::vector<double>(y.values.data().begin() + c * n,
                                                                 y.values.data().begin() + (c + 1) * n));
        Tensor numer = add_scalar(scale(sum(mul(p, t)), 2.0), smooth);
        Tensor denom = add_scalar(add(sum(p), sum(t)), smooth);
        Tensor dice_loss = sub(Tensor::scalar(1.0), div(numer, denom));
        // BCE: -(t log p + (1-t) log(1-p)), clamped for hard probabilities.
        Tensor one_minus_p = sub(Tensor::full({1, n}, 1.0), p);
        Tensor one_minus_t = sub(Tensor::full({1, n}, 1.0), t);
        Tensor bce = scale(mean(add(mul(t, log_clamped(p)), mul(one_minus_t, log_clamped(one_minus_p)))),
                           -1.0);
        acc = add(acc, scale(add(dice_loss, bce), 0.5));
    }
    return scale(acc, 1.0 / 3.0);
}

/// Weighted sum of the three loss parts. Gradient w.r.t. each part is its
/// lambda; a non-finite part raises a numeric error naming the term.
inline Tensor total_loss(const Tensor& seg, const Tensor& tpa, const Tensor& dur,
                         const LossWeights& w) {
    w.validate();
    const char* names[3] = {"L_seg", "L_TPA", "L_DUR"};
    const Tensor* parts[3] = {&seg, &tpa, &dur};
    for (int i = 0; i < 3; ++i) {
        if (parts[i]->size() != 1)
            throw contract_error(std::string("total_loss: ") + names[i] + " must be scalar");
        if (!std::isfinite(parts[i]->item()))
            throw numeric_error(std::string("total_loss: ") + names[i] + " is not finite");
    }
    return add(add(scale(seg, w.lambda1), scale(tpa, w.lambda2)), scale(dur, w.lambda3));
}

// ---------------------------------------------------------------------------
// evaluation metrics

namespace detail {
inline void check_binary(const std::vector<double>& v, const char* what) {
    for (double x : v)
        if (x != 0.0 && x != 1.0)
            throw contract_error(std::string(what) + ": input mask is not binary");
}
} // namespace detail

/// Dice overlap as a percentage; both-empty pairs score 100 by convention.
inline double dice_percent(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.size() != truth.size()) throw shape_error("dice: size mismatch");
    detail::check_binary(pred, "dice");
    detail::check_binary(truth, "dice");
    double inter = 0.0, a = 0.0, b = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        inter += pred[i] * truth[i];
        a += pred[i];
        b += truth[i];
    }
    if (a + b == 0.0) return 100.0;
    return 100.0 * 2.0 * inter / (a + b);
}

namespace detail {

/// Surface voxels: foreground and 6-connected to background or the volume
/// border.
inline std::vector<std::array<int64_t, 3>> surface_voxels(const std::vector<double>& mask,
                                                          const Dims3& dm) {
    std::vector<std::array<int64_t, 3>> out;
    auto at = [&](int64_t x, int64_t y, int64_t z) { return mask[(x * dm.h + y) * dm.d + z]; };
    for (int64_t x = 0; x < dm.w; ++x)
        for (int64_t y = 0; y < dm.h; ++y)
            for (int64_t z = 0; z < dm.d; ++z) {
                if (at(x, y, z) == 0.0) continue;
                bool surf = x == 0 || x == dm.w - 1 || y == 0 || y == dm.h - 1 || z == 0 ||
                            z == dm.d - 1;
                if (!surf)
                    surf = at(x - 1, y, z) == 0.0 || at(x + 1, y, z) == 0.0 ||
                           at(x, y - 1, z) == 0.0 || at(x, y + 1, z) == 0.0 ||
                           at(x, y, z - 1) == 0.0 || at(x, y, z + 1) == 0.0;
                if (surf) out.push_back({x, y, z});
            }
    return out;
}

/// Linear-interpolation percentile of an unsorted sample.
inline double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    if (v.size() == 1) return v[0];
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

inline double directed_hd95(const std::vector<std::array<int64_t, 3>>& from,
                            const std::vector<std::array<int64_t, 3>>& to) {
    std::vector<double> dists;
    dists.reserve(from.size());
    for (const auto& p : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to) {
            const double dx = static_cast<double>(p[0] - q[0]);
            const double dy = static_cast<double>(p[1] - q[1]);
            const double dz = static_cast<double>(p[2] - q[2]);
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        dists.push_back(std::sqrt(best));
    }
    return percentile(std::move(dists), 0.95);
}

} // namespace detail

/// Symmetric 95th-percentile surface distance in mm: max of the two
/// directed 95th percentiles, scaled by voxel spacing. Both masks empty
/// scores 0; exactly one empty scores the volume diagonal.
inline double hd95(const std::vector<double>& pred, const std::vector<double>& truth,
                   const Dims3& dm, double spacing_mm = 1.0) {
    if (static_cast<int64_t>(pred.size()) != dm.voxels() || pred.size() != truth.size())
        throw shape_error("hd95: mask size does not match dims");
    detail::check_binary(pred, "hd95");
    detail::check_binary(truth, "hd95");
    const auto sp = detail::surface_voxels(pred, dm);
    const auto st = detail::surface_voxels(truth, dm);
    if (sp.empty() && st.empty()) return 0.0;
    if (sp.empty() || st.empty()) {
        const double w = static_cast<double>(dm.w), h = static_cast<double>(dm.h),
                     d = static_cast<double>(dm.d);
        return spacing_mm * std::sqrt(w * w + h * h + d * d);
    }
    return spacing_mm * std::max(detail::directed_hd95(sp, st), detail::directed_hd95(st, sp));
}

struct BlandAltman {
    double bias = 0.0;
    double lower = 0.0;
    double upper = 0.0;
};

/// Mean bias and 95% limits of agreement (bias +/- 1.96 * sample std).
inline BlandAltman bland_altman(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.size() != truth.size()) throw shape_error("bland_altman: size mismatch");
    if (pred.size() < 2) throw param_error("bland_altman: need at least 2 pairs");
    const auto n = static_cast<double>(pred.size());
    double bias = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) bias += pred[i] - truth[i];
    bias /= n;
    double ss = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - truth[i] - bias;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / (n - 1.0));
    return {bias, bias - 1.96 * sd, bias + 1.96 * sd};
}

inline double pearson_r(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw shape_error("pearson_r: size mismatch");
    if (a.size() < 2) throw param_error("pearson_r: need at least 2 pairs");
    const auto n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0)
        throw param_error("pearson_r: undefined correlation (zero variance input)");
    return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// evaluation report

struct RegionCaseMetrics {
    double dice = 0.0;       // percent
    double hd95_mm = 0.0;    // mm
    double pred_volume = 0.0; // mm^3
    double true_volume = 0.0; // mm^3
};

struct EvalReport {
    std::vector<std::string> case_ids;
    // per case, indexed [case][region] with regions in WT, TC, ET order
    std::vector<std::array<RegionCaseMetrics, 3>> cases;
    std::array<double, 3> mean_dice{};
    std::array<double, 3> mean_hd95{};
    double ave_dice = 0.0;
    double ave_hd95 = 0.0;
    std::array<std::optional<BlandAltman>, 3> agreement;
    std::array<std::optional<double>, 3> pearson;
    double spacing_mm = 1.0;
};

/// Per-region metrics for one (binarized prediction, truth) pair.
inline std::array<RegionCaseMetrics, 3> case_metrics(const RegionMask& pred,
                                                     const RegionMask& truth,
                                                     double spacing_mm) {
    if (!pred.binarized || !truth.binarized)
        throw contract_error("case_metrics: both masks must be binarized");
    if (pred.values.shape() != truth.values.shape())
        throw shape_error("case_metrics: shape mismatch");
    const Dims3 dm = pred.dims();
    const int64_t n = dm.voxels();
    const double voxel_mm3 = spacing_mm * spacing_mm * spacing_mm;
    std::array<RegionCaseMetrics, 3> out;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> p(pred.values.data().begin() + c * n,
                              pred.values.data().begin() + (c + 1) * n);
        std::vector<double> t(truth.values.data().begin() + c * n,
                              truth.values.data().begin() + (c + 1) * n);
        auto& rm = out[static_cast<size_t>(c)];
        rm.dice = dice_percent(p, t);
        rm.hd95_mm = hd95(p, t, dm, spacing_mm);
        rm.pred_volume = std::accumulate(p.begin(), p.end(), 0.0) * voxel_mm3;
        rm.true_volume = std::accumulate(t.begin(), t.end(), 0.0) * voxel_mm3;
    }
    return out;
}

inline EvalReport aggregate_report(std::vector<std::string> ids,
                                   std::vector<std::array<RegionCaseMetrics, 3>> cases,
                                   double spacing_mm) {
    EvalReport rep;
    rep.case_ids = std::move(ids);
    rep.cases = std::move(cases);
    rep.spacing_mm = spacing_mm;
    const auto n = rep.cases.size();
    if (n == 0) throw param_error("aggregate_report: no cases");
    for (int c = 0; c < 3; ++c) {
        std::vector<double> pv, tv;
        double dsum = 0.0, hsum = 0.0;
        for (const auto& cs : rep.cases) {
            dsum += cs[static_cast<size_t>(c)].dice;
            hsum += cs[static_cast<size_t>(c)].hd95_mm;
            pv.push_back(cs[static_cast<size_t>(c)].pred_volume);
            tv.push_back(cs[static_cast<size_t>(c)].true_volume);
        }
        rep.mean_dice[static_cast<size_t>(c)] = dsum / static_cast<double>(n);
        rep.mean_hd95[static_cast<size_t>(c)] = hsum / static_cast<double>(n);
        if (n >= 2) {
            rep.agreement[static_cast<size_t>(c)] = bland_altman(pv, tv);
            try {
                rep.pearson[static_cast<size_t>(c)] = pearson_r(tv, pv);
            } catch (const param_error&) {
                // zero-variance volumes: correlation undefined, left empty
            }
        }
    }
    rep.ave_dice = (rep.mean_dice[0] + rep.mean_dice[1] + rep.mean_dice[2]) / 3.0;
    rep.ave_hd95 = (rep.mean_hd95[0] + rep.mean_hd95[1] + rep.mean_hd95[2]) / 3.0;
    return rep;
}

} // namespace tucl
