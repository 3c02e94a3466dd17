#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ftx/models.hpp"
#include "ftx/rng.hpp"
#include "ftx/tensor.hpp"

namespace ftx {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
    int n_epochs = 1;
    double learning_rate = 1e-3;
    double p_mask = 0.15;  // masked-LM corruption probability
    OptimizerKind optimizer = OptimizerKind::sgd;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    int log_every = 1;  // loss-log emission cadence (every k-th record)

    void validate() const {
        if (n_epochs < 0) {
            throw contract_error("train config: n_epochs must be >= 0");
        }
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
            throw contract_error("train config: learning rate must be finite and >= 0");
        }
        if (!(p_mask > 0.0 && p_mask < 1.0)) {
            throw contract_error("train config: p_mask must lie in (0, 1)");
        }
    }
};

struct LossRecord {
    int epoch;   // 1-based
    int sample;  // 1-based within the epoch
    double loss;
};

struct TrainResult {
    std::vector<LossRecord> history;
    std::size_t skipped = 0;  // too-short sequences visited (zero loss terms)
};

// Negative log likelihood of the listed (row, col) entries of a probability
// matrix (0-based indices): -sum log P[r, c].
template <class T>
Tensor<T> negative_log_likelihood(Tape<T>* tape, const Tensor<T>& p,
                                  const std::vector<std::pair<int, int>>& targets) {
    auto picked = gather_entries<T>(tape, p, targets);
    return scale<T>(tape, sum_all<T>(tape, log_elem<T>(tape, picked)), T(-1));
}

// Targets of next-token prediction: column t (1-based) must predict x[t+1],
// for t = 1..len-1.
inline std::vector<std::pair<int, int>> next_token_targets(const std::vector<TokenId>& x) {
    std::vector<std::pair<int, int>> targets;
    for (std::size_t t = 0; t + 1 < x.size(); ++t) {
        targets.push_back({x[t + 1] - 1, static_cast<int>(t)});
    }
    return targets;
}

// --- optimizer steps -------------------------------------------------------

namespace detail {

template <class T>
void check_update_shapes(const Tensor<T>& param, const Tensor<T>& grad, const char* what) {
    if (!param.same_shape(grad)) {
        throw contract_error(std::string(what) + ": gradient " + grad.shape_str() +
                             " does not match parameter " + param.shape_str());
    }
}

}  // namespace detail

// theta <- theta - lr * grad, element-wise.
template <class T>
void sgd_update(Tensor<T>& param, const Tensor<T>& grad, T lr) {
    detail::check_update_shapes(param, grad, "sgd_update");
    auto p = param.mutable_data();
    auto g = grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

template <class T>
void sgd_step(ModelParams<T>& params, const HyperParams& hp, const GradientMap<T>& grads, T lr) {
    for (auto& np : named_params(params, hp)) {
        Tensor<T> t = np.tensor;
        sgd_update(t, grads.at(t), lr);
    }
}

// Per-parameter first/second moment accumulators plus the shared step
// counter, laid out in canonical parameter order.
template <class T>
struct OptimizerState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    long step = 0;

    static OptimizerState make(const ModelParams<T>& params, const HyperParams& hp) {
        OptimizerState st;
        for (const auto& np : named_params(params, hp)) {
            st.m.push_back(Tensor<T>(np.tensor.rows(), np.tensor.cols()));
            st.v.push_back(Tensor<T>(np.tensor.rows(), np.tensor.cols()));
        }
        return st;
    }
};

// One Adam update of a single tensor given its moment accumulators and the
// (already incremented) step count: bias-corrected moments, then
// theta <- theta - lr * mhat / (sqrt(vhat) + eps).
template <class T>
void adam_update(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, long step,
                 T lr, T beta1, T beta2, T eps) {
    detail::check_update_shapes(param, grad, "adam_update");
    detail::check_update_shapes(param, m, "adam_update(m)");
    detail::check_update_shapes(param, v, "adam_update(v)");
    auto p = param.mutable_data();
    auto g = grad.data();
    auto ms = m.mutable_data();
    auto vs = v.mutable_data();
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1), step));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2), step));
    for (std::size_t i = 0; i < p.size(); ++i) {
        ms[i] = beta1 * ms[i] + (T(1) - beta1) * g[i];
        vs[i] = beta2 * vs[i] + (T(1) - beta2) * g[i] * g[i];
        const T mhat = ms[i] / bc1;
        const T vhat = vs[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

template <class T>
void adam_step(ModelParams<T>& params, const HyperParams& hp, const GradientMap<T>& grads,
               OptimizerState<T>& state, const TrainConfig& cfg) {
    auto named = named_params(params, hp);
    if (state.m.size() != named.size()) {
        throw contract_error("adam_step: optimizer state does not match parameter tree");
    }
    ++state.step;
    for (std::size_t i = 0; i < named.size(); ++i) {
        Tensor<T> t = named[i].tensor;
        adam_update(t, grads.at(t), state.m[i], state.v[i], state.step,
                    static_cast<T>(cfg.learning_rate), static_cast<T>(cfg.adam_beta1),
                    static_cast<T>(cfg.adam_beta2), static_cast<T>(cfg.adam_eps));
    }
}

// --- training loops --------------------------------------------------------

namespace detail {

template <class T>
class Stepper {
public:
    Stepper(ModelParams<T>& params, const HyperParams& hp, const TrainConfig& cfg)
        : params_(params), hp_(hp), cfg_(cfg) {
        if (cfg.optimizer == OptimizerKind::adam) {
            state_ = OptimizerState<T>::make(params, hp);
        }
    }

    void apply(const GradientMap<T>& grads) {
        if (cfg_.optimizer == OptimizerKind::adam) {
            adam_step(params_, hp_, grads, state_, cfg_);
        } else {
            sgd_step(params_, hp_, grads, static_cast<T>(cfg_.learning_rate));
        }
    }

private:
    ModelParams<T>& params_;
    const HyperParams& hp_;
    const TrainConfig& cfg_;
    OptimizerState<T> state_;
};

}  // namespace detail

// Next-token-prediction training of a decoder-only model: per-sample forward,
// log loss over positions 1..len-1, gradient, optimizer step. Sequences
// shorter than 2 tokens have no loss terms; they are recorded with loss 0 and
// counted in `skipped`.
template <class T>
TrainResult d_training(const std::vector<std::vector<TokenId>>& seqs, ModelParams<T>& params,
                       const HyperParams& hp, const TrainConfig& cfg) {
    cfg.validate();
    TrainResult result;
    detail::Stepper<T> stepper(params, hp, cfg);
    for (int epoch = 1; epoch <= cfg.n_epochs; ++epoch) {
        for (std::size_t n = 0; n < seqs.size(); ++n) {
            const auto& x = seqs[n];
            if (x.size() < 2) {
                ++result.skipped;
                result.history.push_back({epoch, static_cast<int>(n) + 1, 0.0});
                continue;
            }
            Tape<T> tape;
            auto p = d_forward<T>(&tape, x, params, hp);
            auto loss = negative_log_likelihood<T>(&tape, p, next_token_targets(x));
            auto grads = tape.backward(loss);
            stepper.apply(grads);
            result.history.push_back(
                {epoch, static_cast<int>(n) + 1, static_cast<double>(loss.value())});
        }
    }
    return result;
}

// Seq2seq training of an encoder-decoder model on (context, primary) pairs;
// the loss runs over the primary sequence exactly as in next-token training.
template <class T>
TrainResult ed_training(const std::vector<std::pair<std::vector<TokenId>, std::vector<TokenId>>>& pairs,
                        ModelParams<T>& params, const HyperParams& hp, const TrainConfig& cfg) {
    cfg.validate();
    TrainResult result;
    detail::Stepper<T> stepper(params, hp, cfg);
    for (int epoch = 1; epoch <= cfg.n_epochs; ++epoch) {
        for (std::size_t n = 0; n < pairs.size(); ++n) {
            const auto& [z, x] = pairs[n];
            if (x.size() < 2) {
                ++result.skipped;
                result.history.push_back({epoch, static_cast<int>(n) + 1, 0.0});
                continue;
            }
            Tape<T> tape;
            auto p = ed_forward<T>(&tape, z, x, params, hp);
            auto loss = negative_log_likelihood<T>(&tape, p, next_token_targets(x));
            auto grads = tape.backward(loss);
            stepper.apply(grads);
            result.history.push_back(
                {epoch, static_cast<int>(n) + 1, static_cast<double>(loss.value())});
        }
    }
    return result;
}

// Independent Bernoulli(p_mask) corruption of a sequence: each position is
// replaced by mask_token with probability p_mask (one draw per position, in
// sequence order). Returns the corrupted sequence and the 1-based masked
// positions.
inline std::pair<std::vector<TokenId>, std::vector<int>> mask_sequence(
    const std::vector<TokenId>& x, double p_mask, TokenId mask_token, Rng& rng) {
    std::vector<TokenId> corrupted = x;
    std::vector<int> positions;
    for (std::size_t t = 0; t < x.size(); ++t) {
        if (rng.bernoulli(p_mask)) {
            corrupted[t] = mask_token;
            positions.push_back(static_cast<int>(t) + 1);
        }
    }
    return {corrupted, positions};
}

// Masked-language-model training of an encoder-only model: corrupt each
// sample independently, forward the corrupted sequence, score only the masked
// positions against the original tokens. Samples whose mask set comes up
// empty contribute zero loss (and no update); they are recorded, not
// resampled. Masking consumes exactly len Bernoulli draws per sample visit.
template <class T>
TrainResult e_training(const std::vector<std::vector<TokenId>>& seqs, ModelParams<T>& params,
                       const HyperParams& hp, const TrainConfig& cfg) {
    cfg.validate();
    TrainResult result;
    detail::Stepper<T> stepper(params, hp, cfg);
    Rng rng(cfg.seed);
    const TokenId mask_token = hp.n_vocab - 2;
    for (int epoch = 1; epoch <= cfg.n_epochs; ++epoch) {
        for (std::size_t n = 0; n < seqs.size(); ++n) {
            const auto& x = seqs[n];
            if (x.empty()) {
                ++result.skipped;
                result.history.push_back({epoch, static_cast<int>(n) + 1, 0.0});
                continue;
            }
            auto [corrupted, positions] = mask_sequence(x, cfg.p_mask, mask_token, rng);
            if (positions.empty()) {
                result.history.push_back({epoch, static_cast<int>(n) + 1, 0.0});
                continue;
            }
            Tape<T> tape;
            auto p = e_forward<T>(&tape, corrupted, params, hp);
            std::vector<std::pair<int, int>> targets;
            for (int t : positions) {
                targets.push_back({x[t - 1] - 1, t - 1});
            }
            auto loss = negative_log_likelihood<T>(&tape, p, targets);
            auto grads = tape.backward(loss);
            stepper.apply(grads);
            result.history.push_back(
                {epoch, static_cast<int>(n) + 1, static_cast<double>(loss.value())});
        }
    }
    return result;
}

// Plain (tape-free) next-token log loss of a probability matrix, in nats.
template <class T>
double sequence_loss(const Tensor<T>& p, const std::vector<TokenId>& x) {
    double loss = 0.0;
    for (std::size_t t = 0; t + 1 < x.size(); ++t) {
        const double prob = static_cast<double>(p.at(x[t + 1] - 1, static_cast<int>(t)));
        if (!(prob > 0.0)) {
            throw numeric_error("sequence_loss: zero probability at position " +
                                std::to_string(t + 1));
        }
        loss -= std::log(prob);
    }
    return loss;
}

}  // namespace ftx
