#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "ftx/models.hpp"
#include "ftx/rng.hpp"
#include "ftx/types.hpp"

namespace ftx {

struct SamplerConfig {
    double temperature = 1.0;  // tau >= 0; 0 means greedy argmax
    int gen_len = 0;           // tokens to generate (decoder-only)
    int max_steps = 0;         // hard cap for seq2seq decoding; 0 means max_len - 1
    std::uint64_t seed = 0;

    void validate() const {
        if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
            throw contract_error("sampler config: temperature must be finite and >= 0");
        }
        if (gen_len < 0) {
            throw contract_error("sampler config: generation length must be >= 0");
        }
        if (max_steps < 0) {
            throw contract_error("sampler config: max_steps must be >= 0");
        }
    }
};

// Sample a token ID from q proportional to p^(1/tau). The transform runs in
// log space (q ∝ exp(log p / tau), p = 0 entries pinned at -inf) to dodge
// underflow at small tau. tau = 0 is the greedy limit: argmax of p with ties
// broken toward the lowest ID, consuming no randomness. tau > 0 consumes
// exactly one uniform draw.
template <class T>
TokenId sample_token(const Tensor<T>& p, double tau, Rng& rng) {
    if (p.cols() != 1) {
        throw contract_error("sample_token: expected a probability column, got " + p.shape_str());
    }
    const int n = p.rows();
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = static_cast<double>(p.at(i, 0));
        if (v < 0.0 || !std::isfinite(v)) {
            throw contract_error("sample_token: probabilities must be finite and >= 0");
        }
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw contract_error("sample_token: probabilities sum to " + std::to_string(sum) +
                             ", not 1");
    }

    if (tau == 0.0) {
        int best = 0;
        for (int i = 1; i < n; ++i) {
            if (static_cast<double>(p.at(i, 0)) > static_cast<double>(p.at(best, 0))) best = i;
        }
        return best + 1;
    }

    std::vector<double> logq(n);
    double max_logq = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
        const double v = static_cast<double>(p.at(i, 0));
        logq[i] = v > 0.0 ? std::log(v) / tau : -std::numeric_limits<double>::infinity();
        max_logq = std::max(max_logq, logq[i]);
    }
    std::vector<double> weights(n);
    for (int i = 0; i < n; ++i) {
        weights[i] = std::exp(logq[i] - max_logq);
    }
    return static_cast<TokenId>(rng.categorical(weights)) + 1;
}

// The tempered distribution itself (exposed for distribution-level checks).
template <class T>
std::vector<double> temper_distribution(const Tensor<T>& p, double tau) {
    if (tau <= 0.0) {
        throw contract_error("temper_distribution: tau must be > 0");
    }
    const int n = p.rows();
    std::vector<double> q(n);
    double max_logq = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
        const double v = static_cast<double>(p.at(i, 0));
        q[i] = v > 0.0 ? std::log(v) / tau : -std::numeric_limits<double>::infinity();
        max_logq = std::max(max_logq, q[i]);
    }
    double sum = 0.0;
    for (double& x : q) {
        x = std::exp(x - max_logq);
        sum += x;
    }
    for (double& x : q) x /= sum;
    return q;
}

// Prompted generation with a decoder-only model: re-run the full forward on
// the growing sequence, read the distribution at the last position, sample,
// append. Returns only the generated continuation (gen_len tokens). The
// prompt is taken as given; no bos framing happens here.
template <class T>
std::vector<TokenId> d_inference(const std::vector<TokenId>& prompt, const ModelParams<T>& params,
                                 const HyperParams& hp, const SamplerConfig& cfg) {
    cfg.validate();
    if (prompt.empty()) {
        throw contract_error("d_inference: prompt must be non-empty");
    }
    const int len = static_cast<int>(prompt.size());
    if (hp.positional == PositionalMode::learned && len + cfg.gen_len > hp.max_len) {
        throw contract_error("d_inference: prompt length " + std::to_string(len) +
                             " plus generation length " + std::to_string(cfg.gen_len) +
                             " exceeds max context length " + std::to_string(hp.max_len));
    }
    Rng rng(cfg.seed);
    std::vector<TokenId> x = prompt;
    for (int i = 1; i <= cfg.gen_len; ++i) {
        auto p = d_forward<T>(nullptr, x, params, hp);
        auto col = gather_columns<T>(nullptr, p, {len + i - 2});  // position len+i-1, 1-based
        x.push_back(sample_token<T>(col, cfg.temperature, rng));
    }
    return std::vector<TokenId>(x.begin() + len, x.end());
}

struct EdInferenceResult {
    std::vector<TokenId> ids;  // starts with bos; ends with eos unless truncated
    bool truncated = false;    // max_steps reached before eos was sampled
};

// Seq2seq prediction: start the primary sequence at [bos] and keep sampling
// from the decoder's last column until eos arrives or the step cap is hit
// (default cap: max_len - 1, the longest primary sequence learned positional
// embeddings can still grow into).
template <class T>
EdInferenceResult ed_inference(const std::vector<TokenId>& z, const ModelParams<T>& params,
                               const HyperParams& hp, const SamplerConfig& cfg) {
    cfg.validate();
    const TokenId bos = hp.n_vocab - 1;
    const TokenId eos = hp.n_vocab;
    const int max_steps = cfg.max_steps > 0 ? cfg.max_steps : hp.max_len - 1;

    Rng rng(cfg.seed);
    EdInferenceResult result;
    result.ids = {bos};
    for (int step = 0; step < max_steps; ++step) {
        auto p = ed_forward<T>(nullptr, z, result.ids, params, hp);
        auto col = gather_columns<T>(nullptr, p, {static_cast<int>(result.ids.size()) - 1});
        TokenId y = sample_token<T>(col, cfg.temperature, rng);
        result.ids.push_back(y);
        if (y == eos) {
            return result;
        }
    }
    result.truncated = true;
    return result;
}

}  // namespace ftx
