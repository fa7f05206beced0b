#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "tucl/metrics.hpp"
#include "tucl/model.hpp"
#include "tucl/phantom.hpp"
#include "tucl/reporting.hpp"
#include "tucl/uncertainty.hpp"

namespace tucl {

struct TrainConfig {
    int steps = 400;
    int batch = 1;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    LossWeights weights;
    ModelConfig model;
    int mc_samples_train = 4;
    int mc_samples_eval = 8;
    int dur_refresh = 5;           // recompute U for a batch item every k steps
    double dur_warmup = 0.2;       // fraction of steps before L_DUR activates
    DeltaMode delta_mode = DeltaMode::Quantile;
    double delta_param = 0.9;      // quantile (or fixed value in Fixed mode)
    bool use_tpa = true;
    bool use_dur = true;
    uint64_t seed = 1;

    void validate() const {
        if (steps < 1) throw param_error("train: steps must be >= 1");
        if (batch < 1) throw param_error("train: batch must be >= 1");
        weights.validate();
    }

    json to_json() const {
        json j;
        j["steps"] = steps;
        j["batch"] = batch;
        j["lr"] = lr;
        j["beta1"] = beta1;
        j["beta2"] = beta2;
        j["eps"] = eps;
        j["lambda1"] = weights.lambda1;
        j["lambda2"] = weights.lambda2;
        j["lambda3"] = weights.lambda3;
        j["alpha"] = weights.alpha;
        j["beta"] = weights.beta;
        j["model"] = model.to_json();
        j["mc_samples_train"] = mc_samples_train;
        j["mc_samples_eval"] = mc_samples_eval;
        j["dur_refresh"] = dur_refresh;
        j["dur_warmup"] = dur_warmup;
        j["delta_mode"] = delta_mode == DeltaMode::Quantile ? "quantile" : "fixed";
        j["delta_param"] = delta_param;
        j["use_tpa"] = use_tpa;
        j["use_dur"] = use_dur;
        j["seed"] = seed;
        return j;
    }

    static TrainConfig from_json(const json& j) {
        TrainConfig c;
        c.steps = j.value("steps", c.steps);
        c.batch = j.value("batch", c.batch);
        c.lr = j.value("lr", c.lr);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.eps = j.value("eps", c.eps);
        c.weights.lambda1 = j.value("lambda1", c.weights.lambda1);
        c.weights.lambda2 = j.value("lambda2", c.weights.lambda2);
        c.weights.lambda3 = j.value("lambda3", c.weights.lambda3);
        c.weights.alpha = j.value("alpha", c.weights.alpha);
        c.weights.beta = j.value("beta", c.weights.beta);
        if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
        c.mc_samples_train = j.value("mc_samples_train", c.mc_samples_train);
        c.mc_samples_eval = j.value("mc_samples_eval", c.mc_samples_eval);
        c.dur_refresh = j.value("dur_refresh", c.dur_refresh);
        c.dur_warmup = j.value("dur_warmup", c.dur_warmup);
        if (j.value("delta_mode", "quantile") == std::string("fixed"))
            c.delta_mode = DeltaMode::Fixed;
        c.delta_param = j.value("delta_param", c.delta_param);
        c.use_tpa = j.value("use_tpa", c.use_tpa);
        c.use_dur = j.value("use_dur", c.use_dur);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

struct StepRecord {
    int step = 0;
    double l_seg = 0.0;
    double l_tpa = 0.0;
    double l_dur = 0.0;
    double l_total = 0.0;
    double grad_norm = 0.0;
    double delta = 0.0;
    double wall_ms = 0.0; // kept out of the deterministic train log CSV
};

struct TrainLog {
    std::vector<StepRecord> steps;
};

/// Deterministic log (no timing column; wall time goes to a separate file
/// so repeated runs produce byte-identical logs).
inline void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path,
                                const std::string& cfg_hash) {
    std::ostringstream os;
    os << csv_comment(cfg_hash);
    os << "step,L_seg,L_TPA,L_DUR,L_total,grad_norm,delta\n";
    for (const auto& r : log.steps)
        os << r.step << ',' << fmt(r.l_seg) << ',' << fmt(r.l_tpa) << ',' << fmt(r.l_dur) << ','
           << fmt(r.l_total) << ',' << fmt(r.grad_norm) << ',' << fmt(r.delta) << "\n";
    atomic_write(path, os.str());
}

inline void write_timing_csv(const TrainLog& log, const std::filesystem::path& path,
                             const std::string& cfg_hash) {
    std::ostringstream os;
    os << csv_comment(cfg_hash);
    os << "step,wall_ms\n";
    for (const auto& r : log.steps) os << r.step << ',' << fmt(r.wall_ms) << "\n";
    atomic_write(path, os.str());
}

struct TrainResult {
    TuclModel model;
    TrainLog log;
};

/// Empirical risk minimization with the combined objective. Module toggles
/// realize the ablation rows: use_tpa=false bypasses the bottleneck
/// attention and forces lambda2 to 0; use_dur=false forces lambda3 to 0.
/// Deterministic given (config, seed).
inline TrainResult train(const Dataset& dataset, TrainConfig cfg) {
    cfg.validate();
    std::vector<size_t> labeled;
    for (size_t i = 0; i < dataset.size(); ++i)
        if (dataset[i].labeled && dataset[i].mask) labeled.push_back(i);
    if (labeled.empty()) throw param_error("train: dataset has no labeled items");

    LossWeights w = cfg.weights;
    ModelConfig mc = cfg.model;
    mc.use_tpa = cfg.use_tpa;
    if (!cfg.use_tpa) w.lambda2 = 0.0;
    if (!cfg.use_dur) w.lambda3 = 0.0;

    TuclModel model = TuclModel::init(mc, cfg.seed);
    std::vector<Tensor> params = model.parameters();
    AdamState adam;
    TrainLog log;

    const int warmup_steps = static_cast<int>(std::ceil(cfg.dur_warmup * cfg.steps));

    // Per-item uncertainty cache for the DUR loss; entries go stale after
    // dur_refresh steps and are recomputed under stop-gradient.
    struct CachedField {
        UncertaintyField field;
        int computed_at = -1;
    };
    std::vector<std::optional<CachedField>> u_cache(dataset.size());

    // Seeded epoch shuffles over the labeled items.
    std::vector<size_t> order;
    size_t order_pos = 0;
    int epoch = 0;
    auto next_item = [&]() -> size_t {
        if (order_pos >= order.size()) {
            order = labeled;
            RngStream shuffle = RngStream::derive(cfg.seed, "train/order", static_cast<uint64_t>(epoch++));
            for (size_t i = order.size() - 1; i > 0; --i)
                std::swap(order[i], order[shuffle.next_below(i + 1)]);
            order_pos = 0;
        }
        return order[order_pos++];
    };

    for (int step = 1; step <= cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor seg_acc = Tensor::scalar(0.0);
        Tensor tpa_acc = Tensor::scalar(0.0);
        Tensor dur_acc = Tensor::scalar(0.0);
        double delta_sum = 0.0;
        int delta_count = 0;

        for (int b = 0; b < cfg.batch; ++b) {
            const size_t item = next_item();
            const auto& vol = dataset[item].volume;
            const auto& mask = *dataset[item].mask;
            const uint64_t fwd_seed =
                RngStream::derive(cfg.seed, "train/fwd",
                                  static_cast<uint64_t>(step) * 1000003ull + static_cast<uint64_t>(b))
                    .next_u64();
            auto out = model.forward(vol, /*stochastic=*/true, fwd_seed);
            seg_acc = add(seg_acc, seg_loss(out.pred, mask));

            if (cfg.use_tpa) {
                RegionMask y_hat_live;
                y_hat_live.values = out.pred; // graph tensor, gradient flows
                y_hat_live.binarized = false;
                tpa_acc = add(tpa_acc, model.tpa->cycle_loss(out.prompt_feats, y_hat_live));
            }

            if (cfg.use_dur && step > warmup_steps) {
                auto& cached = u_cache[item];
                if (!cached || step - cached->computed_at >= cfg.dur_refresh) {
                    const uint64_t mc_seed =
                        RngStream::derive(cfg.seed, "train/mc",
                                          static_cast<uint64_t>(item) * 1000003ull +
                                              static_cast<uint64_t>(step))
                            .next_u64();
                    auto mcr = mc_uncertainty(model, vol, cfg.mc_samples_train, mc_seed);
                    cached = CachedField{
                        make_field(std::move(mcr.u), cfg.mc_samples_train, cfg.delta_mode,
                                   cfg.delta_param),
                        step};
                }
                dur_acc = add(dur_acc, dur_loss(out.pred, mask, cached->field, w.alpha, w.beta));
                delta_sum += cached->field.part.delta;
                ++delta_count;
            }
        }

        const double inv_b = 1.0 / static_cast<double>(cfg.batch);
        Tensor seg = scale(seg_acc, inv_b);
        Tensor tpa_part = scale(tpa_acc, inv_b);
        Tensor dur_part = scale(dur_acc, inv_b);
        Tensor total = total_loss(seg, tpa_part, dur_part, w);

        zero_grads(params);
        backward(total);
        const double gnorm = grad_norm(params);
        if (!std::isfinite(gnorm))
            throw numeric_error("train: non-finite gradient at step " + std::to_string(step));
        adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);

        StepRecord rec;
        rec.step = step;
        rec.l_seg = seg.item();
        rec.l_tpa = tpa_part.item();
        rec.l_dur = dur_part.item();
        rec.l_total = total.item();
        rec.grad_norm = gnorm;
        rec.delta = delta_count > 0 ? delta_sum / delta_count : 0.0;
        rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                          .count();
        log.steps.push_back(rec);
    }
    return {std::move(model), std::move(log)};
}

// ---------------------------------------------------------------------------
// evaluation and ablation

inline int worker_count() {
    if (const char* env = std::getenv("TUCL_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

namespace detail {
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
    const int workers = std::min<int>(worker_count(), static_cast<int>(n));
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int t = 0; t < workers; ++t)
        pool.emplace_back([&] {
            for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}
} // namespace detail

/// Deterministic inference over every labeled case, optionally dropping a
/// modality from the inputs first (same checkpoint, degraded inputs).
inline EvalReport evaluate_model(const TuclModel& model, const Dataset& eval_set,
                                 double spacing_mm = 1.0,
                                 const std::optional<std::string>& drop = std::nullopt) {
    std::vector<size_t> indices;
    for (size_t i = 0; i < eval_set.size(); ++i)
        if (eval_set[i].mask) indices.push_back(i);
    if (indices.empty()) throw param_error("evaluate_model: no cases with ground truth");
    if (drop) modality_index(*drop); // validate the name up front

    std::vector<std::string> ids(indices.size());
    std::vector<std::array<RegionCaseMetrics, 3>> cases(indices.size());
    detail::parallel_for(indices.size(), [&](size_t k) {
        const auto& item = eval_set[indices[k]];
        const MultiContrastVolume* vol = &item.volume;
        MultiContrastVolume dropped;
        if (drop) {
            dropped = drop_modality(item.volume, *drop);
            vol = &dropped;
        }
        Tensor pred = model.forward(*vol, /*stochastic=*/false, 0).pred;
        RegionMask probs;
        probs.values = pred.detach();
        RegionMask hard = binarize(probs);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "case_%04zu", indices[k]);
        ids[k] = buf;
        cases[k] = case_metrics(hard, *item.mask, spacing_mm);
    });
    return aggregate_report(std::move(ids), std::move(cases), spacing_mm);
}

struct AblationEntry {
    std::string name;
    TrainConfig cfg;
};

/// Train/evaluate one row per configuration (module-toggle protocol).
inline std::vector<std::pair<std::string, EvalReport>> run_ablation(
    const Dataset& train_set, const Dataset& eval_set, const std::vector<AblationEntry>& grid,
    double spacing_mm = 1.0) {
    if (grid.empty()) throw param_error("run_ablation: empty configuration grid");
    std::vector<std::pair<std::string, EvalReport>> rows;
    for (const auto& entry : grid) {
        TrainResult res = train(train_set, entry.cfg);
        rows.emplace_back(entry.name, evaluate_model(res.model, eval_set, spacing_mm));
    }
    return rows;
}

} // namespace tucl
