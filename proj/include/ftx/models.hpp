#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ftx/layers.hpp"
#include "ftx/rng.hpp"
#include "ftx/tensor.hpp"
#include "ftx/types.hpp"

namespace ftx {

enum class Arch { encoder_decoder, encoder_only, decoder_only };
enum class PositionalMode { learned, sinusoidal };

inline const char* arch_name(Arch a) {
    switch (a) {
        case Arch::encoder_decoder: return "ed";
        case Arch::encoder_only: return "e";
        default: return "d";
    }
}

struct HyperParams {
    Arch arch = Arch::decoder_only;
    int max_len = 64;      // maximum context length
    int n_layers = 2;      // layer count (encoder-only / decoder-only)
    int n_layers_enc = 2;  // encoder-decoder only
    int n_layers_dec = 2;  // encoder-decoder only
    int n_heads = 2;
    int d_e = 64;
    int d_attn = 32;
    int d_mid = 32;
    int d_mlp = 128;
    int d_f = 0;  // encoder-only final projection width; 0 means "use d_e"
    int n_vocab = 0;
    PositionalMode positional = PositionalMode::learned;
    bool tied_unembedding = false;
    NormMode norm = NormMode::standard;

    int final_width() const { return d_f > 0 ? d_f : d_e; }

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v < 1) {
                throw contract_error(std::string("hyperparams: ") + name + " must be >= 1, got " +
                                     std::to_string(v));
            }
        };
        positive(max_len, "max_len");
        positive(n_heads, "n_heads");
        positive(d_e, "d_e");
        positive(d_attn, "d_attn");
        positive(d_mid, "d_mid");
        positive(d_mlp, "d_mlp");
        positive(n_vocab, "n_vocab");
        auto non_negative = [](int v, const char* name) {
            if (v < 0) {
                throw contract_error(std::string("hyperparams: ") + name + " must be >= 0, got " +
                                     std::to_string(v));
            }
        };
        if (arch == Arch::encoder_decoder) {
            non_negative(n_layers_enc, "n_layers_enc");
            non_negative(n_layers_dec, "n_layers_dec");
        } else {
            non_negative(n_layers, "n_layers");
        }
        if (positional == PositionalMode::sinusoidal && d_e % 2 != 0) {
            throw contract_error("hyperparams: sinusoidal positional mode requires even d_e");
        }
        if (arch == Arch::encoder_only) {
            positive(final_width(), "d_f");
            if (tied_unembedding && final_width() != d_e) {
                throw contract_error(
                    "hyperparams: tied unembedding requires d_f == d_e for encoder-only models");
            }
        }
    }
};

// One post-norm transformer layer (the encoder-only / decoder-only stacks and
// the encoder half of the encoder-decoder all share this parameter shape).
template <class T>
struct TransformerLayerParams {
    MhaParams<T> attn;
    LayerNormParams<T> ln1, ln2;
    Tensor<T> w_mlp1, b_mlp1, w_mlp2, b_mlp2;
};

// One encoder-decoder decoder layer: masked self-attention, cross-attention
// over the encoded context, three layer-norms, and the MLP.
template <class T>
struct EdDecoderLayerParams {
    MhaParams<T> self_attn;
    MhaParams<T> cross_attn;
    LayerNormParams<T> ln3, ln4, ln5;
    Tensor<T> w_mlp3, b_mlp3, w_mlp4, b_mlp4;
};

// The full parameter tree theta of one architecture. Which members are
// populated depends on the hyperparameters' arch tag.
template <class T>
struct ModelParams {
    Tensor<T> w_e;  // token embedding (d_e x N_V)
    Tensor<T> w_p;  // learned positional embedding (d_e x max_len); unset in sinusoidal mode

    std::vector<TransformerLayerParams<T>> layers;          // E / D stack, or the ED encoder
    std::vector<EdDecoderLayerParams<T>> decoder_layers;    // ED only

    Tensor<T> w_f, b_f;           // encoder-only final projection (d_f x d_e), (d_f)
    LayerNormParams<T> final_ln;  // encoder-only (d_f) and decoder-only (d_e)
    Tensor<T> w_u;                // unembedding; unset when tied to w_e
};

template <class T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;  // shares storage with the model's parameter
};

namespace detail {

template <class T>
void collect_mha(const MhaParams<T>& p, const std::string& prefix,
                 std::vector<NamedParam<T>>& out) {
    for (std::size_t h = 0; h < p.heads.size(); ++h) {
        const auto& head = p.heads[h];
        std::string hp = prefix + "h" + std::to_string(h + 1) + ".";
        out.push_back({hp + "w_q", head.w_q});
        out.push_back({hp + "b_q", head.b_q});
        out.push_back({hp + "w_k", head.w_k});
        out.push_back({hp + "b_k", head.b_k});
        out.push_back({hp + "w_v", head.w_v});
        out.push_back({hp + "b_v", head.b_v});
    }
    out.push_back({prefix + "w_o", p.w_o});
    out.push_back({prefix + "b_o", p.b_o});
}

template <class T>
void collect_ln(const LayerNormParams<T>& p, const std::string& prefix,
                std::vector<NamedParam<T>>& out) {
    out.push_back({prefix + "gamma", p.gamma});
    if (p.mode == NormMode::standard) {
        out.push_back({prefix + "beta", p.beta});
    }
}

template <class T>
void collect_layer(const TransformerLayerParams<T>& l, const std::string& prefix,
                   std::vector<NamedParam<T>>& out) {
    collect_mha(l.attn, prefix + "attn.", out);
    collect_ln(l.ln1, prefix + "ln1.", out);
    collect_ln(l.ln2, prefix + "ln2.", out);
    out.push_back({prefix + "mlp.w1", l.w_mlp1});
    out.push_back({prefix + "mlp.b1", l.b_mlp1});
    out.push_back({prefix + "mlp.w2", l.w_mlp2});
    out.push_back({prefix + "mlp.b2", l.b_mlp2});
}

}  // namespace detail

// Canonical enumeration of theta: fixes the initialization draw order, the
// checkpoint record order, and the optimizer's iteration order. The returned
// tensors share storage with the model.
template <class T>
std::vector<NamedParam<T>> named_params(const ModelParams<T>& params, const HyperParams& hp) {
    std::vector<NamedParam<T>> out;
    out.push_back({"w_e", params.w_e});
    if (hp.positional == PositionalMode::learned) {
        out.push_back({"w_p", params.w_p});
    }
    if (hp.arch == Arch::encoder_decoder) {
        for (std::size_t l = 0; l < params.layers.size(); ++l) {
            detail::collect_layer(params.layers[l], "enc." + std::to_string(l + 1) + ".", out);
        }
        for (std::size_t l = 0; l < params.decoder_layers.size(); ++l) {
            const auto& d = params.decoder_layers[l];
            std::string prefix = "dec." + std::to_string(l + 1) + ".";
            detail::collect_mha(d.self_attn, prefix + "self.", out);
            detail::collect_mha(d.cross_attn, prefix + "cross.", out);
            detail::collect_ln(d.ln3, prefix + "ln3.", out);
            detail::collect_ln(d.ln4, prefix + "ln4.", out);
            detail::collect_ln(d.ln5, prefix + "ln5.", out);
            out.push_back({prefix + "mlp.w3", d.w_mlp3});
            out.push_back({prefix + "mlp.b3", d.b_mlp3});
            out.push_back({prefix + "mlp.w4", d.w_mlp4});
            out.push_back({prefix + "mlp.b4", d.b_mlp4});
        }
    } else {
        for (std::size_t l = 0; l < params.layers.size(); ++l) {
            detail::collect_layer(params.layers[l], "layer." + std::to_string(l + 1) + ".", out);
        }
    }
    if (hp.arch == Arch::encoder_only) {
        out.push_back({"w_f", params.w_f});
        out.push_back({"b_f", params.b_f});
    }
    if (hp.arch != Arch::encoder_decoder) {
        detail::collect_ln(params.final_ln, "final_ln.", out);
    }
    if (!hp.tied_unembedding) {
        out.push_back({"w_u", params.w_u});
    }
    return out;
}

template <class T>
std::size_t param_count(const ModelParams<T>& params, const HyperParams& hp) {
    std::size_t n = 0;
    for (const auto& np : named_params(params, hp)) n += np.tensor.size();
    return n;
}

namespace detail {

template <class T>
MhaParams<T> make_mha(const HyperParams& hp) {
    MhaParams<T> p;
    for (int h = 0; h < hp.n_heads; ++h) {
        AttentionHeadParams<T> head;
        head.w_q = Tensor<T>(hp.d_attn, hp.d_e);
        head.b_q = Tensor<T>::vec(hp.d_attn);
        head.w_k = Tensor<T>(hp.d_attn, hp.d_e);
        head.b_k = Tensor<T>::vec(hp.d_attn);
        head.w_v = Tensor<T>(hp.d_mid, hp.d_e);
        head.b_v = Tensor<T>::vec(hp.d_mid);
        p.heads.push_back(std::move(head));
    }
    p.w_o = Tensor<T>(hp.d_e, hp.n_heads * hp.d_mid);
    p.b_o = Tensor<T>::vec(hp.d_e);
    return p;
}

template <class T>
LayerNormParams<T> make_ln(int dim, NormMode mode) {
    return {Tensor<T>::vec(dim), Tensor<T>::vec(dim), mode};
}

template <class T>
TransformerLayerParams<T> make_layer(const HyperParams& hp) {
    TransformerLayerParams<T> l;
    l.attn = make_mha<T>(hp);
    l.ln1 = make_ln<T>(hp.d_e, hp.norm);
    l.ln2 = make_ln<T>(hp.d_e, hp.norm);
    l.w_mlp1 = Tensor<T>(hp.d_mlp, hp.d_e);
    l.b_mlp1 = Tensor<T>::vec(hp.d_mlp);
    l.w_mlp2 = Tensor<T>(hp.d_e, hp.d_mlp);
    l.b_mlp2 = Tensor<T>::vec(hp.d_e);
    return l;
}

}  // namespace detail

// Zero-valued parameter tree with every tensor at its architecture-mandated
// shape and requires_grad set. Loading overwrites these values; training
// starts from init_params instead.
template <class T>
ModelParams<T> make_params(const HyperParams& hp) {
    hp.validate();
    ModelParams<T> p;
    p.w_e = Tensor<T>(hp.d_e, hp.n_vocab);
    if (hp.positional == PositionalMode::learned) {
        p.w_p = Tensor<T>(hp.d_e, hp.max_len);
    }
    if (hp.arch == Arch::encoder_decoder) {
        for (int l = 0; l < hp.n_layers_enc; ++l) {
            p.layers.push_back(detail::make_layer<T>(hp));
        }
        for (int l = 0; l < hp.n_layers_dec; ++l) {
            EdDecoderLayerParams<T> d;
            d.self_attn = detail::make_mha<T>(hp);
            d.cross_attn = detail::make_mha<T>(hp);
            d.ln3 = detail::make_ln<T>(hp.d_e, hp.norm);
            d.ln4 = detail::make_ln<T>(hp.d_e, hp.norm);
            d.ln5 = detail::make_ln<T>(hp.d_e, hp.norm);
            d.w_mlp3 = Tensor<T>(hp.d_mlp, hp.d_e);
            d.b_mlp3 = Tensor<T>::vec(hp.d_mlp);
            d.w_mlp4 = Tensor<T>(hp.d_e, hp.d_mlp);
            d.b_mlp4 = Tensor<T>::vec(hp.d_e);
            p.decoder_layers.push_back(std::move(d));
        }
    } else {
        for (int l = 0; l < hp.n_layers; ++l) {
            p.layers.push_back(detail::make_layer<T>(hp));
        }
    }
    if (hp.arch == Arch::encoder_only) {
        p.w_f = Tensor<T>(hp.final_width(), hp.d_e);
        p.b_f = Tensor<T>::vec(hp.final_width());
        p.final_ln = detail::make_ln<T>(hp.final_width(), hp.norm);
    } else if (hp.arch == Arch::decoder_only) {
        p.final_ln = detail::make_ln<T>(hp.d_e, hp.norm);
    }
    if (!hp.tied_unembedding) {
        int unembed_in = hp.arch == Arch::encoder_only ? hp.final_width() : hp.d_e;
        p.w_u = Tensor<T>(hp.n_vocab, unembed_in);
    }
    for (auto& np : named_params(p, hp)) {
        np.tensor.set_requires_grad(true);
    }
    return p;
}

// Seeded initialization: weight matrices i.i.d. Normal(0, 0.02^2) drawn in
// canonical parameter order (row-major within each tensor), biases and
// layer-norm offsets zero, layer-norm scales one. Deterministic given the
// seed.
template <class T>
ModelParams<T> init_params(const HyperParams& hp, std::uint64_t seed) {
    ModelParams<T> p = make_params<T>(hp);
    Rng rng(seed);
    for (auto& np : named_params(p, hp)) {
        const std::string& name = np.name;
        std::size_t dot = name.rfind('.');
        std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
        auto data = np.tensor.mutable_data();
        if (leaf.rfind("w", 0) == 0) {
            for (auto& x : data) x = static_cast<T>(rng.next_normal() * 0.02);
        } else if (leaf == "gamma") {
            for (auto& x : data) x = T(1);
        }
        // biases and beta stay zero
    }
    return p;
}

namespace detail {

inline void check_sequence(const std::vector<TokenId>& ids, const HyperParams& hp,
                           const char* what) {
    if (ids.empty()) {
        throw contract_error(std::string(what) + ": sequence must be non-empty");
    }
    if (hp.positional == PositionalMode::learned &&
        static_cast<int>(ids.size()) > hp.max_len) {
        throw contract_error(std::string(what) + ": sequence length " +
                             std::to_string(ids.size()) + " exceeds max context length " +
                             std::to_string(hp.max_len));
    }
    for (TokenId id : ids) {
        if (id < 1 || id > hp.n_vocab) {
            throw contract_error(std::string(what) + ": token ID " + std::to_string(id) +
                                 " out of range 1.." + std::to_string(hp.n_vocab));
        }
    }
}

// Initial embedding of a sequence: token embedding plus positional embedding,
// column t holding W_e[:, ids[t]] + W_p[:, t].
template <class T>
Tensor<T> embed_sequence(Tape<T>* tape, const std::vector<TokenId>& ids,
                         const ModelParams<T>& params, const HyperParams& hp) {
    std::vector<int> tok_cols;
    std::vector<int> pos_cols;
    tok_cols.reserve(ids.size());
    pos_cols.reserve(ids.size());
    for (std::size_t t = 0; t < ids.size(); ++t) {
        tok_cols.push_back(ids[t] - 1);
        pos_cols.push_back(static_cast<int>(t));
    }
    auto tok = gather_columns<T>(tape, params.w_e, tok_cols);
    Tensor<T> pos = hp.positional == PositionalMode::learned
                        ? gather_columns<T>(tape, params.w_p, pos_cols)
                        : sinusoidal_positions<T>(hp.d_e, hp.max_len,
                                                  static_cast<int>(ids.size()));
    return add<T>(tape, tok, pos);
}

template <class T>
Tensor<T> mlp_block(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                    const Tensor<T>& w2, const Tensor<T>& b2, Activation act) {
    auto hidden = activation<T>(
        tape, add_col_broadcast<T>(tape, matmul<T>(tape, w1, x), b1), act);
    return add_col_broadcast<T>(tape, matmul<T>(tape, w2, hidden), b2);
}

template <class T>
Tensor<T> unembedding_matrix(Tape<T>* tape, const ModelParams<T>& params,
                             const HyperParams& hp) {
    return hp.tied_unembedding ? transpose<T>(tape, params.w_e) : params.w_u;
}

}  // namespace detail

// Decoder-only forward pass (GPT-2 style): pre-norm masked self-attention and
// MLP blocks with residual additions, a final layer-norm, then unembedding.
// Column t of the result estimates P(x[t+1] | x[1:t]).
template <class T>
Tensor<T> d_forward(Tape<T>* tape, const std::vector<TokenId>& x, const ModelParams<T>& params,
                    const HyperParams& hp) {
    if (hp.arch != Arch::decoder_only) {
        throw contract_error("d_forward: hyperparams are not decoder-only");
    }
    detail::check_sequence(x, hp, "d_forward");
    const int len = static_cast<int>(x.size());
    auto mask = make_mask(len, len, MaskKind::unidirectional);

    auto X = detail::embed_sequence<T>(tape, x, params, hp);
    for (const auto& layer : params.layers) {
        auto normed1 = layer_norm<T>(tape, X, layer.ln1);
        X = add<T>(tape, X, mh_attention<T>(tape, normed1, normed1, layer.attn, mask));
        auto normed2 = layer_norm<T>(tape, X, layer.ln2);
        X = add<T>(tape, X,
                   detail::mlp_block<T>(tape, normed2, layer.w_mlp1, layer.b_mlp1, layer.w_mlp2,
                                        layer.b_mlp2, Activation::gelu));
    }
    X = layer_norm<T>(tape, X, params.final_ln);
    return unembed<T>(tape, X, detail::unembedding_matrix<T>(tape, params, hp));
}

// Encoder-only forward pass (BERT style): post-norm bidirectional attention
// and GELU MLP blocks, then the final projection + GELU + layer-norm, then
// unembedding. Each column of the result is a distribution over the
// vocabulary.
template <class T>
Tensor<T> e_forward(Tape<T>* tape, const std::vector<TokenId>& x, const ModelParams<T>& params,
                    const HyperParams& hp) {
    if (hp.arch != Arch::encoder_only) {
        throw contract_error("e_forward: hyperparams are not encoder-only");
    }
    detail::check_sequence(x, hp, "e_forward");
    const int len = static_cast<int>(x.size());
    auto mask = make_mask(len, len, MaskKind::bidirectional);

    auto X = detail::embed_sequence<T>(tape, x, params, hp);
    for (const auto& layer : params.layers) {
        X = add<T>(tape, X, mh_attention<T>(tape, X, X, layer.attn, mask));
        X = layer_norm<T>(tape, X, layer.ln1);
        X = add<T>(tape, X,
                   detail::mlp_block<T>(tape, X, layer.w_mlp1, layer.b_mlp1, layer.w_mlp2,
                                        layer.b_mlp2, Activation::gelu));
        X = layer_norm<T>(tape, X, layer.ln2);
    }
    X = activation<T>(tape, add_col_broadcast<T>(tape, matmul<T>(tape, params.w_f, X), params.b_f),
                      Activation::gelu);
    X = layer_norm<T>(tape, X, params.final_ln);
    return unembed<T>(tape, X, detail::unembedding_matrix<T>(tape, params, hp));
}

// Encoder-decoder forward pass: the context sequence z runs through the
// bidirectional encoder; the primary sequence x runs through the decoder with
// masked self-attention and cross-attention over the encoded context (all
// post-norm, ReLU MLPs); then unembedding. Column t of the result estimates
// P(x[t+1] | x[1:t], z).
template <class T>
Tensor<T> ed_forward(Tape<T>* tape, const std::vector<TokenId>& z, const std::vector<TokenId>& x,
                     const ModelParams<T>& params, const HyperParams& hp) {
    if (hp.arch != Arch::encoder_decoder) {
        throw contract_error("ed_forward: hyperparams are not encoder-decoder");
    }
    detail::check_sequence(z, hp, "ed_forward(z)");
    detail::check_sequence(x, hp, "ed_forward(x)");
    const int len_z = static_cast<int>(z.size());
    const int len_x = static_cast<int>(x.size());

    auto Z = detail::embed_sequence<T>(tape, z, params, hp);
    auto enc_mask = make_mask(len_z, len_z, MaskKind::bidirectional);
    for (const auto& layer : params.layers) {
        Z = add<T>(tape, Z, mh_attention<T>(tape, Z, Z, layer.attn, enc_mask));
        Z = layer_norm<T>(tape, Z, layer.ln1);
        Z = add<T>(tape, Z,
                   detail::mlp_block<T>(tape, Z, layer.w_mlp1, layer.b_mlp1, layer.w_mlp2,
                                        layer.b_mlp2, Activation::relu));
        Z = layer_norm<T>(tape, Z, layer.ln2);
    }

    auto X = detail::embed_sequence<T>(tape, x, params, hp);
    auto self_mask = make_mask(len_x, len_x, MaskKind::unidirectional);
    auto cross_mask = make_mask(len_z, len_x, MaskKind::bidirectional);
    for (const auto& layer : params.decoder_layers) {
        X = add<T>(tape, X, mh_attention<T>(tape, X, X, layer.self_attn, self_mask));
        X = layer_norm<T>(tape, X, layer.ln3);
        X = add<T>(tape, X, mh_attention<T>(tape, X, Z, layer.cross_attn, cross_mask));
        X = layer_norm<T>(tape, X, layer.ln4);
        X = add<T>(tape, X,
                   detail::mlp_block<T>(tape, X, layer.w_mlp3, layer.b_mlp3, layer.w_mlp4,
                                        layer.b_mlp4, Activation::relu));
        X = layer_norm<T>(tape, X, layer.ln5);
    }
    return unembed<T>(tape, X, detail::unembedding_matrix<T>(tape, params, hp));
}

}  // namespace ftx
