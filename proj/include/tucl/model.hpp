#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tucl/attention.hpp"
#include "tucl/container.hpp"
#include "tucl/tensor.hpp"
#include "tucl/volume.hpp"

namespace tucl {

struct ModelConfig {
    int enc1_channels = 8;
    int enc2_channels = 16;
    int token_dim = 64;
    int heads = 2;
    int prompt_dim = 32;
    double dropout_rate = 0.1;
    bool use_tpa = true;

    json to_json() const {
        return {{"enc1_channels", enc1_channels}, {"enc2_channels", enc2_channels},
                {"token_dim", token_dim},         {"heads", heads},
                {"prompt_dim", prompt_dim},       {"dropout_rate", dropout_rate},
                {"use_tpa", use_tpa}};
    }
    static ModelConfig from_json(const json& j) {
        ModelConfig c;
        c.enc1_channels = j.value("enc1_channels", c.enc1_channels);
        c.enc2_channels = j.value("enc2_channels", c.enc2_channels);
        c.token_dim = j.value("token_dim", c.token_dim);
        c.heads = j.value("heads", c.heads);
        c.prompt_dim = j.value("prompt_dim", c.prompt_dim);
        c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
        c.use_tpa = j.value("use_tpa", c.use_tpa);
        return c;
    }
};

/// Two-stage encoder/decoder over 4-channel volumes with the prompt
/// attention stack fused at the bottleneck. Outputs 3 sigmoid channels in
/// the fixed order WT, TC, ET at the input resolution.
struct TuclModel {
    ModelConfig cfg;
    Tensor enc1_w, enc1_b;
    Tensor enc2_w, enc2_b;
    Tensor tok_in_w, tok_in_b;   // enc2_channels -> token_dim
    Tensor tok_out_w, tok_out_b; // token_dim -> enc2_channels
    std::optional<TpaModule> tpa;
    Tensor dec1_w, dec1_b;
    Tensor dec2_w, dec2_b;

    static TuclModel init(const ModelConfig& cfg, uint64_t seed) {
        TuclModel m;
        m.cfg = cfg;
        RngStream rng = RngStream::derive(seed, "model/init");
        auto conv_init = [&rng](int cout, int cin, int k) {
            const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k * k));
            return Tensor::randn({cout, cin, k, k, k}, rng, std, true);
        };
        m.enc1_w = conv_init(cfg.enc1_channels, 4, 3);
        m.enc1_b = Tensor::zeros({cfg.enc1_channels}, true);
        m.enc2_w = conv_init(cfg.enc2_channels, cfg.enc1_channels, 3);
        m.enc2_b = Tensor::zeros({cfg.enc2_channels}, true);
        if (cfg.use_tpa) {
            const double s_in = std::sqrt(2.0 / static_cast<double>(cfg.enc2_channels));
            const double s_out = std::sqrt(2.0 / static_cast<double>(cfg.token_dim));
            m.tok_in_w = Tensor::randn({cfg.enc2_channels, cfg.token_dim}, rng, s_in, true);
            m.tok_in_b = Tensor::zeros({cfg.token_dim}, true);
            m.tok_out_w = Tensor::randn({cfg.token_dim, cfg.enc2_channels}, rng, s_out, true);
            m.tok_out_b = Tensor::zeros({cfg.enc2_channels}, true);
            m.tpa = TpaModule::init(cfg.token_dim, cfg.heads, cfg.prompt_dim, rng);
        }
        m.dec1_w = conv_init(cfg.enc1_channels, cfg.enc2_channels, 3);
        m.dec1_b = Tensor::zeros({cfg.enc1_channels}, true);
        m.dec2_w = conv_init(3, cfg.enc1_channels, 3);
        m.dec2_b = Tensor::zeros({3}, true);
        return m;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("enc1_w", enc1_w);
        out.emplace_back("enc1_b", enc1_b);
        out.emplace_back("enc2_w", enc2_w);
        out.emplace_back("enc2_b", enc2_b);
        if (tpa) {
            out.emplace_back("tok_in_w", tok_in_w);
            out.emplace_back("tok_in_b", tok_in_b);
            out.emplace_back("tok_out_w", tok_out_w);
            out.emplace_back("tok_out_b", tok_out_b);
            for (auto& p : tpa->named_parameters()) out.push_back(p);
        }
        out.emplace_back("dec1_w", dec1_w);
        out.emplace_back("dec1_b", dec1_b);
        out.emplace_back("dec2_w", dec2_w);
        out.emplace_back("dec2_b", dec2_b);
        return out;
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    struct ForwardOut {
        Tensor pred;         // 3 x W x H x D probabilities
        Tensor prompt_feats; // 7 x token_dim when TPA is active, else undefined
    };

    ForwardOut forward(const Tensor& x, bool stochastic, uint64_t seed) const {
        if (x.ndim() != 4 || x.dim(0) != 4)
            throw shape_error("model input must be 4xWxHxD, got " + shape_str(x.shape()));
        const int64_t W = x.dim(1), H = x.dim(2), D = x.dim(3);
        if (W % 4 != 0 || H % 4 != 0 || D % 4 != 0)
            throw shape_error("model input dims must be divisible by 4, got " +
                              shape_str(x.shape()));

        RngStream drop1 = RngStream::derive(seed, "drop/enc1");
        RngStream drop2 = RngStream::derive(seed, "drop/enc2");
        RngStream drop3 = RngStream::derive(seed, "drop/dec1");

        Tensor h = relu(add_channel_bias(conv3d(x, enc1_w, 2, 1), enc1_b));
        h = dropout(h, cfg.dropout_rate, drop1, stochastic);
        h = relu(add_channel_bias(conv3d(h, enc2_w, 2, 1), enc2_b));
        h = dropout(h, cfg.dropout_rate, drop2, stochastic);

        Tensor prompt_feats;
        if (tpa) {
            const int64_t c = cfg.enc2_channels;
            const int64_t n = h.size() / c;
            Tensor tokens = transpose2d(reshape(h, {c, n})); // n x c
            tokens = add_row_vector(matmul(tokens, tok_in_w), tok_in_b);
            auto tpa_out = tpa->forward(tokens);
            prompt_feats = tpa_out.prompt_feats;
            Tensor back = add_row_vector(matmul(tpa_out.fused, tok_out_w), tok_out_b);
            h = reshape(transpose2d(back), {c, W / 4, H / 4, D / 4});
        }

        h = upsample_nearest2(h);
        h = relu(add_channel_bias(conv3d(h, dec1_w, 1, 1), dec1_b));
        h = dropout(h, cfg.dropout_rate, drop3, stochastic);
        h = upsample_nearest2(h);
        h = add_channel_bias(conv3d(h, dec2_w, 1, 1), dec2_b);
        return {sigmoid(h), prompt_feats};
    }

    ForwardOut forward(const MultiContrastVolume& v, bool stochastic, uint64_t seed) const {
        return forward(v.intensities, stochastic, seed);
    }
};

/// Threshold each channel, then restore the nesting: TC inside WT, ET
/// inside TC.
inline RegionMask binarize(const RegionMask& probs, double threshold = 0.5) {
    if (probs.binarized) return probs;
    const int64_t n = probs.dims().voxels();
    std::vector<double> out(probs.values.data().size());
    const auto& v = probs.values.data();
    for (int64_t i = 0; i < n; ++i) {
        const double wt = v[0 * n + i] > threshold ? 1.0 : 0.0;
        const double tc = (v[1 * n + i] > threshold ? 1.0 : 0.0) * wt;
        const double et = (v[2 * n + i] > threshold ? 1.0 : 0.0) * tc;
        out[0 * n + i] = wt;
        out[1 * n + i] = tc;
        out[2 * n + i] = et;
    }
    RegionMask m;
    m.values = Tensor::from_data(probs.values.shape(), std::move(out));
    m.binarized = true;
    return m;
}

inline RegionMask to_region_mask(const Tensor& pred) {
    RegionMask m;
    m.values = pred.detach();
    m.binarized = false;
    return m;
}

// ---------------------------------------------------------------------------
// checkpoints

inline void save_checkpoint(TuclModel& model, const std::filesystem::path& base, int64_t step,
                            uint64_t seed) {
    json header;
    header["kind"] = "checkpoint";
    header["version"] = 1;
    header["step"] = step;
    header["seed"] = seed;
    header["config"] = model.cfg.to_json();
    header["params"] = json::array();
    std::vector<double> payload;
    for (auto& [name, t] : model.named_parameters()) {
        header["params"].push_back({{"name", name}, {"shape", t.shape()}});
        payload.insert(payload.end(), t.data().begin(), t.data().end());
    }
    write_container(base, std::move(header), payload);
}

struct Checkpoint {
    TuclModel model;
    int64_t step = 0;
    uint64_t seed = 0;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& base) {
    auto [header, payload] = read_container(base);
    if (header.value("kind", "") != "checkpoint")
        throw io_error("expected kind 'checkpoint' in " + base.string());
    Checkpoint ckpt;
    ckpt.step = header.value("step", int64_t{0});
    ckpt.seed = header.value("seed", uint64_t{0});
    ckpt.model = TuclModel::init(ModelConfig::from_json(header["config"]), ckpt.seed);
    size_t off = 0;
    auto params = ckpt.model.named_parameters();
    const auto& plist = header["params"];
    if (plist.size() != params.size())
        throw io_error("checkpoint parameter list mismatch in " + base.string());
    for (size_t i = 0; i < params.size(); ++i) {
        auto& [name, t] = params[i];
        if (plist[i]["name"].get<std::string>() != name ||
            plist[i]["shape"].get<Shape>() != t.shape())
            throw io_error("checkpoint parameter '" + name + "' mismatch in " + base.string());
        if (off + t.data().size() > payload.size())
            throw io_error("checkpoint payload too short: " + base.string());
        std::copy(payload.begin() + static_cast<int64_t>(off),
                  payload.begin() + static_cast<int64_t>(off + t.data().size()),
                  t.mutable_data().begin());
        off += t.data().size();
    }
    if (off != payload.size()) throw io_error("checkpoint payload too long: " + base.string());
    return ckpt;
}

} // namespace tucl
