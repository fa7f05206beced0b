#pragma once

#include <array>
#include <string>
#include <vector>

#include "tucl/tensor.hpp"
#include "tucl/volume.hpp"

namespace tucl {

/// Learned prompt vocabulary: 4 contrast prompts followed by 3 region
/// prompts, in the fixed order T1, T2, T1ce, FLAIR, WT, TC, ET.
struct PromptSet {
    static constexpr int kCount = 7;
    static constexpr std::array<const char*, 7> kNames = {"T1",   "T2", "T1ce", "FLAIR",
                                                          "WT",   "TC", "ET"};
    Tensor embeddings; // 7 x d_p
    int d_p = 32;

    static PromptSet init(int d_p, RngStream& rng) {
        PromptSet p;
        p.d_p = d_p;
        p.embeddings = Tensor::randn({kCount, d_p}, rng, 0.02, true);
        return p;
    }
};

/// One multi-head scaled dot-product attention block with residual
/// connection and layer normalization.
struct AttentionBlock {
    Tensor wq, wk, wv, wo; // d x d
    Tensor ln_gain, ln_bias; // d
    int heads = 2;
    int width = 0;

    static AttentionBlock init(int d, int heads, RngStream& rng) {
        if (heads < 1 || d % heads != 0)
            throw param_error("attention width " + std::to_string(d) +
                              " must be divisible by head count " + std::to_string(heads));
        AttentionBlock b;
        b.heads = heads;
        b.width = d;
        const double std = 1.0 / std::sqrt(static_cast<double>(d));
        b.wq = Tensor::randn({d, d}, rng, std, true);
        b.wk = Tensor::randn({d, d}, rng, std, true);
        b.wv = Tensor::randn({d, d}, rng, std, true);
        b.wo = Tensor::randn({d, d}, rng, std, true);
        b.ln_gain = Tensor::full({d}, 1.0, true);
        b.ln_bias = Tensor::zeros({d}, true);
        return b;
    }

    std::vector<Tensor> parameters() { return {wq, wk, wv, wo, ln_gain, ln_bias}; }
};

namespace detail {
inline void check_width(const Tensor& t, const AttentionBlock& block, const char* what) {
    if (t.ndim() != 2 || t.dim(1) != block.width)
        throw shape_error(std::string(what) + ": token width " + shape_str(t.shape()) +
                          " does not match block width " + std::to_string(block.width));
}
} // namespace detail

/// Pre-residual multi-head attention mix: queries from q_src, keys/values
/// from kv_src. Returns the projected head concatenation (no residual/LN).
inline Tensor attention_mix(const Tensor& q_src, const Tensor& kv_src,
                            const AttentionBlock& block) {
    detail::check_width(q_src, block, "attention_mix queries");
    detail::check_width(kv_src, block, "attention_mix keys/values");
    const int64_t d = block.width;
    const int64_t hd = d / block.heads;
    Tensor q = matmul(q_src, block.wq);
    Tensor k = matmul(kv_src, block.wk);
    Tensor v = matmul(kv_src, block.wv);
    std::vector<Tensor> head_outs;
    for (int h = 0; h < block.heads; ++h) {
        Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
        Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
        Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
        Tensor scores = scale(matmul(qh, transpose2d(kh)), 1.0 / std::sqrt(static_cast<double>(hd)));
        Tensor weights = softmax(scores, 1); // row-stochastic over keys
        head_outs.push_back(matmul(weights, vh));
    }
    Tensor mixed = block.heads == 1 ? head_outs[0] : concat(head_outs, 1);
    return matmul(mixed, block.wo);
}

/// Self-attention with residual + layer norm; shape-preserving.
inline Tensor intra_attn(const Tensor& tokens, const AttentionBlock& block) {
    Tensor mixed = attention_mix(tokens, tokens, block);
    return layer_norm(add(tokens, mixed), block.ln_gain, block.ln_bias);
}

/// Cross-attention: queries from seg tokens, keys/values from prompt
/// tokens; residual on the query stream + layer norm.
inline Tensor cross_attn(const Tensor& seg_tokens, const Tensor& prompt_tokens,
                         const AttentionBlock& block) {
    Tensor mixed = attention_mix(seg_tokens, prompt_tokens, block);
    return layer_norm(add(seg_tokens, mixed), block.ln_gain, block.ln_bias);
}

/// Prompt attention stack: intra-attention on both streams, then
/// cross-attention fusing the prompt stream into the segmentation stream,
/// plus the feedback remap used by the cycle-consistency loss.
struct TpaModule {
    int d = 64; // shared token width
    PromptSet prompts;
    Tensor prompt_proj_w, prompt_proj_b; // d_p -> d
    AttentionBlock seg_block, prompt_block, cross_block;
    Tensor phi_w, phi_b; // (d+1) -> d_p

    static TpaModule init(int d, int heads, int d_p, RngStream& rng) {
        TpaModule m;
        m.d = d;
        m.prompts = PromptSet::init(d_p, rng);
        m.prompt_proj_w = Tensor::randn({d_p, d}, rng, 1.0 / std::sqrt(static_cast<double>(d_p)), true);
        m.prompt_proj_b = Tensor::zeros({d}, true);
        m.seg_block = AttentionBlock::init(d, heads, rng);
        m.prompt_block = AttentionBlock::init(d, heads, rng);
        m.cross_block = AttentionBlock::init(d, heads, rng);
        m.phi_w = Tensor::randn({d + 1, d_p}, rng, 1.0 / std::sqrt(static_cast<double>(d + 1)), true);
        m.phi_b = Tensor::zeros({d_p}, true);
        return m;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("tpa.prompts", prompts.embeddings);
        out.emplace_back("tpa.prompt_proj_w", prompt_proj_w);
        out.emplace_back("tpa.prompt_proj_b", prompt_proj_b);
        const char* names[3] = {"tpa.seg", "tpa.prompt", "tpa.cross"};
        AttentionBlock* blocks[3] = {&seg_block, &prompt_block, &cross_block};
        for (int i = 0; i < 3; ++i) {
            out.emplace_back(std::string(names[i]) + ".wq", blocks[i]->wq);
            out.emplace_back(std::string(names[i]) + ".wk", blocks[i]->wk);
            out.emplace_back(std::string(names[i]) + ".wv", blocks[i]->wv);
            out.emplace_back(std::string(names[i]) + ".wo", blocks[i]->wo);
            out.emplace_back(std::string(names[i]) + ".ln_gain", blocks[i]->ln_gain);
            out.emplace_back(std::string(names[i]) + ".ln_bias", blocks[i]->ln_bias);
        }
        out.emplace_back("tpa.phi_w", phi_w);
        out.emplace_back("tpa.phi_b", phi_b);
        return out;
    }

    struct ForwardOut {
        Tensor fused;        // m x d
        Tensor prompt_feats; // 7 x d, shared with the cycle loss
    };

    /// CrossAttn(IntraAttn(f_seg), IntraAttn(projected prompts)).
    ForwardOut forward(const Tensor& f_seg) const {
        Tensor prompt_tokens =
            add_row_vector(matmul(prompts.embeddings, prompt_proj_w), prompt_proj_b);
        Tensor f_prompt = intra_attn(prompt_tokens, prompt_block);
        Tensor f_seg_refined = intra_attn(f_seg, seg_block);
        Tensor fused = cross_attn(f_seg_refined, f_prompt, cross_block);
        return {fused, f_prompt};
    }

    /// Remap (prompt features, prediction statistics) back into prompt
    /// space and penalize the squared distance to the prompt embeddings.
    /// Region prompt slots receive their own region's pooled prediction
    /// mean; contrast slots receive the 3-region average.
    Tensor cycle_loss(const Tensor& f_prompt, const RegionMask& y_hat) const {
        if (y_hat.binarized)
            throw contract_error("cycle_loss requires a probabilistic prediction");
        const int64_t n = y_hat.dims().voxels();
        Tensor pooled = mean_rows(reshape(y_hat.values, {3, n})); // [3]
        Tensor contrast_stat = broadcast_scalar(mean(pooled), {4, 1});
        Tensor region_stat = reshape(pooled, {3, 1});
        Tensor stats = concat({contrast_stat, region_stat}, 0); // [7 x 1]
        Tensor phi_in = concat({f_prompt, stats}, 1);           // [7 x (d+1)]
        Tensor remapped = add_row_vector(matmul(phi_in, phi_w), phi_b); // [7 x d_p]
        Tensor diff = sub(prompts.embeddings, remapped);
        return mean(mul(diff, diff));
    }
};

} // namespace tucl
