#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ftx/tensor.hpp"
#include "ftx/types.hpp"

namespace ftx {

// Architectural building blocks. Token IDs and sequence positions are 1-based
// at this boundary, matching the conventions the whole library uses for
// vocabulary and sequences; tensor storage stays 0-based internally.

// One attention head: query/key linear projections into the attention space
// and a value projection into the output space.
template <class T>
struct AttentionHeadParams {
    Tensor<T> w_q, b_q;  // (d_attn x d_x), (d_attn)
    Tensor<T> w_k, b_k;  // (d_attn x d_z), (d_attn)
    Tensor<T> w_v, b_v;  // (d_out x d_z), (d_out)
};

// The full multi-head attention parameter collection: H heads with value
// dimension d_mid, plus the output projection (d_out x H*d_mid).
template <class T>
struct MhaParams {
    std::vector<AttentionHeadParams<T>> heads;
    Tensor<T> w_o, b_o;
};

// Per-vector scale/offset for layer normalization. In rms mode the offset is
// ignored (kept zero) and no mean is subtracted.
template <class T>
struct LayerNormParams {
    Tensor<T> gamma, beta;
    NormMode mode = NormMode::standard;
};

enum class MaskKind { bidirectional, unidirectional };

// Attention mask: bidirectional is all-ones; unidirectional admits context
// position t_z for query position t_x iff t_z <= t_x (and requires a square
// mask).
inline BoolMask make_mask(int lz, int lx, MaskKind kind) {
    if (kind == MaskKind::unidirectional && lz != lx) {
        throw contract_error("make_mask: unidirectional mask requires equal lengths, got " +
                             std::to_string(lz) + " and " + std::to_string(lx));
    }
    BoolMask mask(lz, lx);
    for (int tz = 0; tz < lz; ++tz) {
        for (int tx = 0; tx < lx; ++tx) {
            mask.set(tz, tx, kind == MaskKind::bidirectional || tz <= tx);
        }
    }
    return mask;
}

// Column v of the token embedding matrix, v a 1-based token ID.
template <class T>
Tensor<T> token_embed(Tape<T>* tape, TokenId v, const Tensor<T>& w_e) {
    if (v < 1 || v > w_e.cols()) {
        throw contract_error("token_embed: token ID " + std::to_string(v) + " out of range 1.." +
                             std::to_string(w_e.cols()));
    }
    return gather_columns<T>(tape, w_e, {v - 1});
}

// Column t of the learned positional embedding matrix, t a 1-based position.
template <class T>
Tensor<T> positional_embed(Tape<T>* tape, int t, const Tensor<T>& w_p) {
    if (t < 1) {
        throw contract_error("positional_embed: position must be >= 1, got " + std::to_string(t));
    }
    if (t > w_p.cols()) {
        throw contract_error("positional_embed: position " + std::to_string(t) +
                             " exceeds the maximum context length " + std::to_string(w_p.cols()));
    }
    return gather_columns<T>(tape, w_p, {t - 1});
}

// Hard-coded sinusoidal positional embeddings for positions 1..len:
//   W_p[2i-1, t] = sin(t / max_len^(2i/d_e)),
//   W_p[2i,   t] = cos(t / max_len^(2i/d_e)),   0 < i <= d_e/2
// (rows written 1-based as in the formulas). d_e must be even.
template <class T>
Tensor<T> sinusoidal_positions(int d_e, int max_len, int len) {
    if (d_e % 2 != 0) {
        throw contract_error("sinusoidal_positions: d_e must be even, got " + std::to_string(d_e));
    }
    if (len < 1) {
        throw contract_error("sinusoidal_positions: length must be >= 1");
    }
    Tensor<T> w(d_e, len);
    for (int i = 1; i <= d_e / 2; ++i) {
        const double denom = std::pow(static_cast<double>(max_len),
                                      2.0 * i / static_cast<double>(d_e));
        for (int t = 1; t <= len; ++t) {
            w.at(2 * i - 2, t - 1) = static_cast<T>(std::sin(t / denom));
            w.at(2 * i - 1, t - 1) = static_cast<T>(std::cos(t / denom));
        }
    }
    return w;
}

// Basic single-query attention: the current token's representation e attends
// over a list of context vectors. Deliberately written as the per-token loop
// with explicit alpha weights -- the matrix-form attention below must agree
// with it column by column, and the two code paths check each other.
template <class T>
Tensor<T> single_query_attention(Tape<T>* tape, const Tensor<T>& e,
                                 const std::vector<Tensor<T>>& context,
                                 const AttentionHeadParams<T>& p) {
    if (context.empty()) {
        throw contract_error("single_query_attention: context must be non-empty");
    }
    const int d_attn = p.w_q.rows();
    auto q = add<T>(tape, matmul<T>(tape, p.w_q, e), p.b_q);

    std::vector<Tensor<T>> scores;
    std::vector<Tensor<T>> values;
    scores.reserve(context.size());
    values.reserve(context.size());
    for (const auto& e_t : context) {
        auto k_t = add<T>(tape, matmul<T>(tape, p.w_k, e_t), p.b_k);
        values.push_back(add<T>(tape, matmul<T>(tape, p.w_v, e_t), p.b_v));
        auto dot = matmul<T>(tape, transpose<T>(tape, q), k_t);  // 1x1
        scores.push_back(scale<T>(tape, dot, T(1) / std::sqrt(static_cast<T>(d_attn))));
    }
    auto alpha = softmax_columns<T>(tape, vstack<T>(tape, scores));  // (T x 1)

    Tensor<T> out;
    for (std::size_t t = 0; t < context.size(); ++t) {
        auto alpha_t = gather_entries<T>(tape, alpha, {{static_cast<int>(t), 0}});
        auto term = scale_by_scalar<T>(tape, values[t], alpha_t);
        out = t == 0 ? term : add<T>(tape, out, term);
    }
    return out;
}

// Single masked attention head in matrix form: X carries the primary sequence
// as columns, Z the context sequence. Scores are masked to -inf, then scaled
// by 1/sqrt(d_attn), then column-softmaxed.
template <class T>
Tensor<T> attention(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& z,
                    const AttentionHeadParams<T>& p, const BoolMask& mask) {
    if (mask.lz() != z.cols() || mask.lx() != x.cols()) {
        throw contract_error("attention: mask (" + std::to_string(mask.lz()) + "x" +
                             std::to_string(mask.lx()) + ") does not match sequences " +
                             z.shape_str() + ", " + x.shape_str());
    }
    const int d_attn = p.w_q.rows();
    auto q = add_col_broadcast<T>(tape, matmul<T>(tape, p.w_q, x), p.b_q);
    auto k = add_col_broadcast<T>(tape, matmul<T>(tape, p.w_k, z), p.b_k);
    auto v = add_col_broadcast<T>(tape, matmul<T>(tape, p.w_v, z), p.b_v);
    auto s = matmul<T>(tape, transpose<T>(tape, k), q);
    s = apply_mask<T>(tape, s, mask);
    auto weights =
        softmax_columns<T>(tape, scale<T>(tape, s, T(1) / std::sqrt(static_cast<T>(d_attn))));
    return matmul<T>(tape, v, weights);
}

// Multi-head attention: run every head, stack the head outputs vertically,
// and apply the output projection.
template <class T>
Tensor<T> mh_attention(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& z,
                       const MhaParams<T>& p, const BoolMask& mask) {
    if (p.heads.empty()) {
        throw contract_error("mh_attention: at least one head required");
    }
    std::vector<Tensor<T>> ys;
    ys.reserve(p.heads.size());
    for (const auto& head : p.heads) {
        ys.push_back(attention<T>(tape, x, z, head, mask));
    }
    auto y = vstack<T>(tape, ys);
    return add_col_broadcast<T>(tape, matmul<T>(tape, p.w_o, y), p.b_o);
}

inline constexpr double kLayerNormEps = 1e-5;

// Layer normalization of each column of e; standard mode subtracts the mean
// and applies scale and offset, rms mode divides by the root mean square and
// applies scale only.
template <class T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& e, const LayerNormParams<T>& p) {
    if (p.gamma.rows() != e.rows() || p.gamma.cols() != 1) {
        throw shape_error("layer_norm: gamma " + p.gamma.shape_str() +
                          " does not match activations " + e.shape_str());
    }
    auto normed = normalize_columns<T>(tape, e, static_cast<T>(kLayerNormEps), p.mode);
    auto scaled = mul_col_broadcast<T>(tape, normed, p.gamma);
    if (p.mode == NormMode::rms) {
        return scaled;
    }
    if (p.beta.rows() != e.rows() || p.beta.cols() != 1) {
        throw shape_error("layer_norm: beta " + p.beta.shape_str() +
                          " does not match activations " + e.shape_str());
    }
    return add_col_broadcast<T>(tape, scaled, p.beta);
}

// Unembedding: logits W_u e softmaxed into a distribution over the vocabulary
// (one distribution per column of e).
template <class T>
Tensor<T> unembed(Tape<T>* tape, const Tensor<T>& e, const Tensor<T>& w_u) {
    return softmax_columns<T>(tape, matmul<T>(tape, w_u, e));
}

}  // namespace ftx
