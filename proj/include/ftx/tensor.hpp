#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "ftx/error.hpp"
#include "ftx/rng.hpp"

namespace ftx {

template <class T>
class Tape;

template <class T>
class GradientMap;

// Dense rank-1/rank-2 tensor of real scalars, row-major. Rank-1 tensors are
// stored as (d, 1) columns; the rank is kept only so persistence can round-trip
// it. Copies share storage; storage identity is what gradient maps and
// optimizers key on. Tensors are treated as immutable once they participate in
// a recorded computation (mutation is reserved for setup and optimizer steps).
template <class T>
class Tensor {
    static_assert(std::is_floating_point_v<T>, "Tensor requires a floating-point scalar");

public:
    Tensor() : store_(std::make_shared<Storage>()) {}

    Tensor(int rows, int cols) : rows_(rows), cols_(cols), rank_(2) {
        if (rows <= 0 || cols <= 0) {
            throw shape_error("tensor: dimensions must be positive, got " + shape_str(rows, cols));
        }
        store_ = std::make_shared<Storage>();
        store_->data.assign(static_cast<std::size_t>(rows) * cols, T(0));
    }

    static Tensor zeros(int rows, int cols) { return Tensor(rows, cols); }

    static Tensor full(int rows, int cols, T v) {
        Tensor t(rows, cols);
        for (T& x : t.store_->data) x = v;
        return t;
    }

    static Tensor ones(int rows, int cols) { return full(rows, cols, T(1)); }

    static Tensor identity(int n) {
        Tensor t(n, n);
        for (int i = 0; i < n; ++i) t.at(i, i) = T(1);
        return t;
    }

    // Rank-1 column vector of length d.
    static Tensor vec(int d) {
        Tensor t(d, 1);
        t.rank_ = 1;
        return t;
    }

    static Tensor vec_of(std::initializer_list<T> xs) {
        Tensor t = vec(static_cast<int>(xs.size()));
        int i = 0;
        for (T x : xs) t.store_->data[i++] = x;
        return t;
    }

    static Tensor of(std::initializer_list<std::initializer_list<T>> rows) {
        int r = static_cast<int>(rows.size());
        int c = static_cast<int>(rows.begin()->size());
        Tensor t(r, c);
        int i = 0;
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != c) {
                throw shape_error("tensor: ragged initializer");
            }
            int j = 0;
            for (T x : row) t.at(i, j++) = x;
            ++i;
        }
        return t;
    }

    // Entries i.i.d. Normal(0, stddev^2), drawn row-major.
    static Tensor randn(Rng& rng, int rows, int cols, T stddev) {
        Tensor t(rows, cols);
        for (T& x : t.store_->data) x = static_cast<T>(rng.next_normal()) * stddev;
        return t;
    }

    static Tensor randn_vec(Rng& rng, int d, T stddev) {
        Tensor t = randn(rng, d, 1, stddev);
        t.rank_ = 1;
        return t;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int rank() const { return rank_; }
    std::size_t size() const { return store_->data.size(); }

    T at(int i, int j) const { return store_->data[static_cast<std::size_t>(i) * cols_ + j]; }
    T& at(int i, int j) { return store_->data[static_cast<std::size_t>(i) * cols_ + j]; }

    // Value of a 1x1 scalar tensor.
    T value() const {
        if (rows_ != 1 || cols_ != 1) {
            throw contract_error("value: tensor is not scalar, shape " + shape_str());
        }
        return store_->data[0];
    }

    std::span<const T> data() const { return {store_->data.data(), store_->data.size()}; }
    std::span<T> mutable_data() { return {store_->data.data(), store_->data.size()}; }

    // Storage identity; stable across copies, distinct across clones.
    const void* id() const { return static_cast<const void*>(store_.get()); }

    // Parameter-ness is a property of the storage, so every handle to the
    // same tensor agrees on it.
    bool requires_grad() const { return store_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        store_->requires_grad = b;
        return *this;
    }

    // Deep copy with fresh storage (and no tape linkage).
    Tensor clone() const {
        Tensor t(rows_, cols_);
        t.rank_ = rank_;
        t.store_->requires_grad = store_->requires_grad;
        t.store_->data = store_->data;
        return t;
    }

    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const { return shape_str(rows_, cols_); }

    static std::string shape_str(int r, int c) {
        return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
    }

private:
    struct Storage {
        std::vector<T> data;
        bool requires_grad = false;
    };

    int rows_ = 0;
    int cols_ = 0;
    int rank_ = 2;
    std::shared_ptr<Storage> store_;

    // Linkage of an op result into the tape that recorded it.
    Tape<T>* tape_ = nullptr;
    std::uint64_t tape_id_ = 0;
    int node_ = -1;

    friend class Tape<T>;
    friend class GradientMap<T>;
};

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

// Gradients of a scalar loss with respect to the parameters reachable on a
// tape, keyed by parameter storage identity. Parameters that did not
// contribute to the loss read back as zeros.
template <class T>
class GradientMap {
public:
    Tensor<T> at(const Tensor<T>& p) const {
        auto it = grads_.find(p.id());
        if (it == grads_.end()) {
            Tensor<T> z(p.rows(), p.cols());
            z.rank_ = p.rank();
            return z;
        }
        return it->second;
    }

    bool contains(const Tensor<T>& p) const { return grads_.count(p.id()) > 0; }
    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<const void*, Tensor<T>> grads_;

    friend class Tape<T>;
};

// Recorded computation for one forward-backward cycle. Nodes are appended in
// execution order, so the list is already topologically sorted and a backward
// pass is a single reverse sweep that visits each node exactly once. A tape is
// single-threaded and is consumed by its backward pass.
template <class T>
class Tape {
public:
    Tape() : id_(next_id()++) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int size() const { return static_cast<int>(nodes_.size()); }

    GradientMap<T> backward(const Tensor<T>& loss) {
        if (consumed_) {
            throw contract_error("backward: tape already consumed; re-run the forward pass");
        }
        if (loss.rows() != 1 || loss.cols() != 1) {
            throw contract_error("backward: loss must be scalar, got shape " + loss.shape_str());
        }
        if (loss.tape_ != this || loss.tape_id_ != id_ || loss.node_ < 0) {
            throw contract_error("backward: loss was not produced on this tape");
        }
        consumed_ = true;

        nodes_[loss.node_].grad.assign(1, T(1));
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            if (nodes_[i].back) {
                nodes_[i].back(*this, std::span<const T>(nodes_[i].grad));
            }
        }

        GradientMap<T> out;
        for (const Node& n : nodes_) {
            if (n.leaf_id != nullptr) {
                Tensor<T> g(n.rows, n.cols);
                g.rank_ = n.leaf_rank;
                std::copy(n.grad.begin(), n.grad.end(), g.mutable_data().begin());
                out.grads_.emplace(n.leaf_id, std::move(g));
            }
        }
        return out;
    }

    // --- recording interface used by the op implementations ---

    // Node index of `t` on this tape: its recorded node if it has one, a leaf
    // node if it is a requires_grad parameter, -1 if it is a constant.
    int node_of(const Tensor<T>& t) {
        if (t.tape_ == this && t.tape_id_ == id_ && t.node_ >= 0) {
            return t.node_;
        }
        if (!t.requires_grad()) {
            return -1;
        }
        auto it = leaves_.find(t.id());
        if (it != leaves_.end()) {
            return it->second;
        }
        Node n;
        n.rows = t.rows();
        n.cols = t.cols();
        n.leaf_id = t.id();
        n.leaf_rank = t.rank();
        n.grad.assign(t.size(), T(0));
        nodes_.push_back(std::move(n));
        int idx = static_cast<int>(nodes_.size()) - 1;
        leaves_.emplace(t.id(), idx);
        return idx;
    }

    using BackFn = std::function<void(Tape&, std::span<const T>)>;

    int add_node(int rows, int cols, BackFn back) {
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.grad.assign(static_cast<std::size_t>(rows) * cols, T(0));
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::span<T> grad(int node) { return {nodes_[node].grad.data(), nodes_[node].grad.size()}; }

    void bind(Tensor<T>& t, int node) {
        t.tape_ = this;
        t.tape_id_ = id_;
        t.node_ = node;
    }

private:
    struct Node {
        int rows = 0, cols = 0;
        std::vector<T> grad;
        BackFn back;                     // empty for leaves
        const void* leaf_id = nullptr;   // parameter identity for leaves
        int leaf_rank = 2;
    };

    static std::uint64_t& next_id() {
        static std::uint64_t counter = 1;
        return counter;
    }

    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaves_;
    bool consumed_ = false;
    std::uint64_t id_;
};

using Taped = Tape<double>;
using Tapef = Tape<float>;

enum class Activation { relu, gelu };

// Boolean attention mask, shape (l_z x l_x); mask(tz, tx) says whether token
// tx may attend to context position tz (indices 0-based here).
class BoolMask {
public:
    BoolMask(int lz, int lx) : lz_(lz), lx_(lx), m_(static_cast<std::size_t>(lz) * lx, 0) {
        if (lz <= 0 || lx <= 0) {
            throw contract_error("mask: dimensions must be positive");
        }
    }

    int lz() const { return lz_; }
    int lx() const { return lx_; }

    bool at(int tz, int tx) const { return m_[static_cast<std::size_t>(tz) * lx_ + tx] != 0; }
    void set(int tz, int tx, bool v) { m_[static_cast<std::size_t>(tz) * lx_ + tx] = v ? 1 : 0; }

private:
    int lz_, lx_;
    std::vector<std::uint8_t> m_;
};

namespace detail {

template <class T>
inline void ensure_finite(std::span<const T> xs, const char* op) {
    for (T x : xs) {
        if (!std::isfinite(x)) {
            throw numeric_error(std::string(op) + ": produced a non-finite value");
        }
    }
}

// Variant for ops that legitimately carry the -inf mask sentinel through
// (apply_mask output, scaled masked scores). NaN and +inf still fail.
template <class T>
inline void ensure_not_nan_or_posinf(std::span<const T> xs, const char* op) {
    for (T x : xs) {
        if (std::isnan(x) || x == std::numeric_limits<T>::infinity()) {
            throw numeric_error(std::string(op) + ": produced NaN or +inf");
        }
    }
}

template <class T>
inline T gelu_scalar(T x) {
    // x * Phi(x) with Phi the standard normal CDF.
    return x * T(0.5) * static_cast<T>(std::erfc(-static_cast<double>(x) / 1.4142135623730950488));
}

template <class T>
inline T gelu_grad_scalar(T x) {
    double xd = static_cast<double>(x);
    double phi_cdf = 0.5 * std::erfc(-xd / 1.4142135623730950488);
    double phi_pdf = std::exp(-0.5 * xd * xd) / 2.5066282746310005024;  // sqrt(2*pi)
    return static_cast<T>(phi_cdf + xd * phi_pdf);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations. Each takes the active tape (nullptr for pure
// evaluation), computes the forward value, and records a backward closure when
// any operand is tracked. The primitive set is deliberately small; everything
// else in the library is composed from it.
// ---------------------------------------------------------------------------

// C = A B, with dA += dC B^T and dB += A^T dC.
template <class T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows()) {
        throw shape_error("matmul: inner dimensions disagree: " + a.shape_str() + " vs " +
                          b.shape_str());
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> out(m, n);
    {
        auto A = a.data();
        auto B = b.data();
        auto C = out.mutable_data();
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                T aip = A[static_cast<std::size_t>(i) * k + p];
                if (aip == T(0)) continue;
                const std::size_t brow = static_cast<std::size_t>(p) * n;
                const std::size_t crow = static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    C[crow + j] += aip * B[brow + j];
                }
            }
        }
    }
    detail::ensure_finite<T>(out.data(), "matmul");
    if (tape) {
        int pa = tape->node_of(a);
        int pb = tape->node_of(b);
        if (pa >= 0 || pb >= 0) {
            Tensor<T> as = a, bs = b;  // share storage for the backward pass
            int node = tape->add_node(m, n, [pa, pb, as, bs, m, k, n](Tape<T>& tp,
                                                                      std::span<const T> dout) {
                if (pa >= 0) {
                    auto da = tp.grad(pa);
                    auto B = bs.data();
                    for (int i = 0; i < m; ++i) {
                        for (int p = 0; p < k; ++p) {
                            T acc = 0;
                            for (int j = 0; j < n; ++j) {
                                acc += dout[static_cast<std::size_t>(i) * n + j] *
                                       B[static_cast<std::size_t>(p) * n + j];
                            }
                            da[static_cast<std::size_t>(i) * k + p] += acc;
                        }
                    }
                }
                if (pb >= 0) {
                    auto db = tp.grad(pb);
                    auto A = as.data();
                    for (int p = 0; p < k; ++p) {
                        for (int i = 0; i < m; ++i) {
                            T aip = A[static_cast<std::size_t>(i) * k + p];
                            if (aip == T(0)) continue;
                            for (int j = 0; j < n; ++j) {
                                db[static_cast<std::size_t>(p) * n + j] +=
                                    aip * dout[static_cast<std::size_t>(i) * n + j];
                            }
                        }
                    }
                }
            });
            tape->bind(out, node);
        }
    }
    return out;
}

// C = A + B (same shape).
template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) {
        throw shape_error("add: shapes disagree: " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor<T> out(a.rows(), a.cols());
    auto A = a.data();
    auto B = b.data();
    auto C = out.mutable_data();
    for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + B[i];
    detail::ensure_finite<T>(out.data(), "add");
    if (tape) {
        int pa = tape->node_of(a);
        int pb = tape->node_of(b);
        if (pa >= 0 || pb >= 0) {
            int node =
                tape->add_node(a.rows(), a.cols(), [pa, pb](Tape<T>& tp, std::span<const T> dout) {
                    if (pa >= 0) {
                        auto da = tp.grad(pa);
                        for (std::size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
                    }
                    if (pb >= 0) {
                        auto db = tp.grad(pb);
                        for (std::size_t i = 0; i < dout.size(); ++i) db[i] += dout[i];
                    }
                });
            tape->bind(out, node);
        }
    }
    return out;
}

// C = c * A for a compile-time-constant scalar c. The -inf mask sentinel is
// preserved when c > 0 (scores divided by sqrt(d_attn) after masking).
template <class T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T c) {
    Tensor<T> out(a.rows(), a.cols());
    auto A = a.data();
    auto C = out.mutable_data();
    for (std::size_t i = 0; i < C.size(); ++i) C[i] = c * A[i];
    detail::ensure_not_nan_or_posinf<T>(out.data(), "scale");
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            int node =
                tape->add_node(a.rows(), a.cols(), [pa, c](Tape<T>& tp, std::span<const T> dout) {
                    auto da = tp.grad(pa);
                    for (std::size_t i = 0; i < dout.size(); ++i) da[i] += c * dout[i];
                });
            tape->bind(out, node);
        }
    }
    return out;
}

template <class T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    return add(tape, a, scale(tape, b, T(-1)));
}

// C = A + b 1^T: broadcast a column vector across the columns of A. This is
// the only broadcast the library supports.
template <class T>
Tensor<T> add_col_broadcast(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (b.cols() != 1 || b.rows() != a.rows()) {
        throw shape_error("add_col_broadcast: need (m x n) and (m x 1), got " + a.shape_str() +
                          " and " + b.shape_str());
    }
    const int m = a.rows(), n = a.cols();
    Tensor<T> out(m, n);
    auto A = a.data();
    auto B = b.data();
    auto C = out.mutable_data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            C[static_cast<std::size_t>(i) * n + j] = A[static_cast<std::size_t>(i) * n + j] + B[i];
        }
    }
    detail::ensure_finite<T>(out.data(), "add_col_broadcast");
    if (tape) {
        int pa = tape->node_of(a);
        int pb = tape->node_of(b);
        if (pa >= 0 || pb >= 0) {
            int node = tape->add_node(m, n, [pa, pb, m, n](Tape<T>& tp, std::span<const T> dout) {
                if (pa >= 0) {
                    auto da = tp.grad(pa);
                    for (std::size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
                }
                if (pb >= 0) {
                    auto db = tp.grad(pb);
                    for (int i = 0; i < m; ++i) {
                        T acc = 0;
                        for (int j = 0; j < n; ++j) acc += dout[static_cast<std::size_t>(i) * n + j];
                        db[i] += acc;
                    }
                }
            });
            tape->bind(out, node);
        }
    }
    return out;
}

// C = diag(g) A: scale row i of A by g[i] (column-broadcast Hadamard).
template <class T>
Tensor<T> mul_col_broadcast(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& g) {
    if (g.cols() != 1 || g.rows() != a.rows()) {
        throw shape_error("mul_col_broadcast: need (m x n) and (m x 1), got " + a.shape_str() +
                          " and " + g.shape_str());
    }
    const int m = a.rows(), n = a.cols();
    Tensor<T> out(m, n);
    auto A = a.data();
    auto G = g.data();
    auto C = out.mutable_data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            C[static_cast<std::size_t>(i) * n + j] = A[static_cast<std::size_t>(i) * n + j] * G[i];
        }
    }
    detail::ensure_finite<T>(out.data(), "mul_col_broadcast");
    if (tape) {
        int pa = tape->node_of(a);
        int pg = tape->node_of(g);
        if (pa >= 0 || pg >= 0) {
            Tensor<T> as = a, gs = g;
            int node =
                tape->add_node(m, n, [pa, pg, as, gs, m, n](Tape<T>& tp, std::span<const T> dout) {
                    if (pa >= 0) {
                        auto da = tp.grad(pa);
                        auto G = gs.data();
                        for (int i = 0; i < m; ++i) {
                            for (int j = 0; j < n; ++j) {
                                da[static_cast<std::size_t>(i) * n + j] +=
                                    dout[static_cast<std::size_t>(i) * n + j] * G[i];
                            }
                        }
                    }
                    if (pg >= 0) {
                        auto dg = tp.grad(pg);
                        auto A = as.data();
                        for (int i = 0; i < m; ++i) {
                            T acc = 0;
                            for (int j = 0; j < n; ++j) {
                                acc += dout[static_cast<std::size_t>(i) * n + j] *
                                       A[static_cast<std::size_t>(i) * n + j];
                            }
                            dg[i] += acc;
                        }
                    }
                });
            tape->bind(out, node);
        }
    }
    return out;
}

// C = s * A where s is a 1x1 tensor (differentiable in both operands).
template <class T>
Tensor<T> scale_by_scalar(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& s) {
    if (s.rows() != 1 || s.cols() != 1) {
        throw shape_error("scale_by_scalar: scalar operand must be 1x1, got " + s.shape_str());
    }
    const T sv = s.data()[0];
    Tensor<T> out(a.rows(), a.cols());
    auto A = a.data();
    auto C = out.mutable_data();
    for (std::size_t i = 0; i < C.size(); ++i) C[i] = sv * A[i];
    detail::ensure_finite<T>(out.data(), "scale_by_scalar");
    if (tape) {
        int pa = tape->node_of(a);
        int ps = tape->node_of(s);
        if (pa >= 0 || ps >= 0) {
            Tensor<T> as = a;
            int node =
                tape->add_node(a.rows(), a.cols(),
                               [pa, ps, as, sv](Tape<T>& tp, std::span<const T> dout) {
                                   if (pa >= 0) {
                                       auto da = tp.grad(pa);
                                       for (std::size_t i = 0; i < dout.size(); ++i) {
                                           da[i] += sv * dout[i];
                                       }
                                   }
                                   if (ps >= 0) {
                                       auto ds = tp.grad(ps);
                                       auto A = as.data();
                                       T acc = 0;
                                       for (std::size_t i = 0; i < dout.size(); ++i) {
                                           acc += dout[i] * A[i];
                                       }
                                       ds[0] += acc;
                                   }
                               });
            tape->bind(out, node);
        }
    }
    return out;
}

// C = A^T.
template <class T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& a) {
    const int m = a.rows(), n = a.cols();
    Tensor<T> out(n, m);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            int node = tape->add_node(n, m, [pa, m, n](Tape<T>& tp, std::span<const T> dout) {
                auto da = tp.grad(pa);
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) {
                        da[static_cast<std::size_t>(i) * n + j] +=
                            dout[static_cast<std::size_t>(j) * m + i];
                    }
                }
            });
            tape->bind(out, node);
        }
    }
    return out;
}

// Masked score entries become the IEEE -inf sentinel (exp(-inf) = 0 exactly in
// the softmax that follows). Gradient flows only through unmasked entries.
template <class T>
Tensor<T> apply_mask(Tape<T>* tape, const Tensor<T>& s, const BoolMask& mask) {
    if (s.rows() != mask.lz() || s.cols() != mask.lx()) {
        throw shape_error("apply_mask: scores " + s.shape_str() + " do not match mask (" +
                          std::to_string(mask.lz()) + "x" + std::to_string(mask.lx()) + ")");
    }
    Tensor<T> out(s.rows(), s.cols());
    for (int i = 0; i < s.rows(); ++i) {
        for (int j = 0; j < s.cols(); ++j) {
            out.at(i, j) = mask.at(i, j) ? s.at(i, j) : -std::numeric_limits<T>::infinity();
        }
    }
    detail::ensure_not_nan_or_posinf<T>(out.data(), "apply_mask");
    if (tape) {
        int ps = tape->node_of(s);
        if (ps >= 0) {
            const int m = s.rows(), n = s.cols();
            BoolMask mk = mask;
            int node = tape->add_node(m, n, [ps, mk, m, n](Tape<T>& tp, std::span<const T> dout) {
                auto ds = tp.grad(ps);
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) {
                        if (mk.at(i, j)) {
                            ds[static_cast<std::size_t>(i) * n + j] +=
                                dout[static_cast<std::size_t>(i) * n + j];
                        }
                    }
                }
            });
            tape->bind(out, node);
        }
    }
    return out;
}

// Column-wise softmax: out[:,c] = exp(A[:,c]) / sum_t exp(A[t,c]). Stabilized
// by per-column max subtraction, which leaves the result invariant. -inf
// entries map to exactly 0; a fully -inf column is an error.
template <class T>
Tensor<T> softmax_columns(Tape<T>* tape, const Tensor<T>& a) {
    const int m = a.rows(), n = a.cols();
    Tensor<T> out(m, n);
    for (int j = 0; j < n; ++j) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int i = 0; i < m; ++i) mx = std::max(mx, a.at(i, j));
        if (mx == -std::numeric_limits<T>::infinity()) {
            throw numeric_error("softmax_columns: column " + std::to_string(j) +
                                " is fully masked (all -inf): degenerate distribution");
        }
        if (std::isnan(mx) || mx == std::numeric_limits<T>::infinity()) {
            throw numeric_error("softmax_columns: non-finite score column " + std::to_string(j));
        }
        T sum = 0;
        for (int i = 0; i < m; ++i) {
            T e = std::exp(a.at(i, j) - mx);  // exp(-inf) == +0
            out.at(i, j) = e;
            sum += e;
        }
        for (int i = 0; i < m; ++i) out.at(i, j) /= sum;
    }
    detail::ensure_finite<T>(out.data(), "softmax_columns");
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            Tensor<T> sm = out;  // softmax values needed by the backward pass
            int node = tape->add_node(m, n, [pa, sm, m, n](Tape<T>& tp, std::span<const T> dout) {
                auto da = tp.grad(pa);
                for (int j = 0; j < n; ++j) {
                    T dot = 0;
                    for (int i = 0; i < m; ++i) {
                        dot += sm.at(i, j) * dout[static_cast<std::size_t>(i) * n + j];
                    }
                    for (int i = 0; i < m; ++i) {
                        da[static_cast<std::size_t>(i) * n + j] +=
                            sm.at(i, j) * (dout[static_cast<std::size_t>(i) * n + j] - dot);
                    }
                }
            });
            tape->bind(out, node);
        }
    }
    return out;
}

// Element-wise ReLU or GELU. GELU(x) = x * Phi(x) with the exact normal CDF;
// ReLU takes subgradient 0 at the kink.
template <class T>
Tensor<T> activation(Tape<T>* tape, const Tensor<T>& a, Activation kind) {
    Tensor<T> out(a.rows(), a.cols());
    auto A = a.data();
    auto C = out.mutable_data();
    for (std::size_t i = 0; i < C.size(); ++i) {
        C[i] = kind == Activation::relu ? std::max(T(0), A[i]) : detail::gelu_scalar(A[i]);
    }
    detail::ensure_finite<T>(out.data(), "activation");
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            Tensor<T> as = a;
            int node = tape->add_node(a.rows(), a.cols(),
                                      [pa, as, kind](Tape<T>& tp, std::span<const T> dout) {
                                          auto da = tp.grad(pa);
                                          auto A = as.data();
                                          for (std::size_t i = 0; i < dout.size(); ++i) {
                                              T g = kind == Activation::relu
                                                        ? (A[i] > T(0) ? T(1) : T(0))
                                                        : detail::gelu_grad_scalar(A[i]);
                                              da[i] += g * dout[i];
                                          }
                                      });
            tape->bind(out, node);
        }
    }
    return out;
}

enum class NormMode { standard, rms };

// Normalize each column to zero mean / unit variance (standard) or unit RMS
// (rms), with eps added under the square root. Scale/offset are applied by the
// caller via mul/add_col_broadcast.
template <class T>
Tensor<T> normalize_columns(Tape<T>* tape, const Tensor<T>& a, T eps, NormMode mode) {
    const int m = a.rows(), n = a.cols();
    Tensor<T> out(m, n);
    std::vector<T> inv_sigma(n);
    for (int j = 0; j < n; ++j) {
        T mean = 0;
        if (mode == NormMode::standard) {
            for (int i = 0; i < m; ++i) mean += a.at(i, j);
            mean /= static_cast<T>(m);
        }
        T var = 0;
        for (int i = 0; i < m; ++i) {
            T d = a.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<T>(m);
        T inv = T(1) / std::sqrt(var + eps);
        inv_sigma[j] = inv;
        for (int i = 0; i < m; ++i) out.at(i, j) = (a.at(i, j) - mean) * inv;
    }
    detail::ensure_finite<T>(out.data(), "normalize_columns");
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            Tensor<T> xhat = out;
            int node = tape->add_node(
                m, n, [pa, xhat, inv_sigma, mode, m, n](Tape<T>& tp, std::span<const T> dout) {
                    auto da = tp.grad(pa);
                    for (int j = 0; j < n; ++j) {
                        T mean_dy = 0, mean_dy_xhat = 0;
                        for (int i = 0; i < m; ++i) {
                            T dy = dout[static_cast<std::size_t>(i) * n + j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat.at(i, j);
                        }
                        mean_dy /= static_cast<T>(m);
                        mean_dy_xhat /= static_cast<T>(m);
                        for (int i = 0; i < m; ++i) {
                            T dy = dout[static_cast<std::size_t>(i) * n + j];
                            T dx;
                            if (mode == NormMode::standard) {
                                dx = inv_sigma[j] * (dy - mean_dy - xhat.at(i, j) * mean_dy_xhat);
                            } else {
                                dx = inv_sigma[j] * (dy - xhat.at(i, j) * mean_dy_xhat);
                            }
                            da[static_cast<std::size_t>(i) * n + j] += dx;
                        }
                    }
                });
            tape->bind(out, node);
        }
    }
    return out;
}

// Select columns of A (0-based indices, repeats allowed). Gradient
// scatter-adds back into the selected columns, so repeated indices accumulate.
template <class T>
Tensor<T> gather_columns(Tape<T>* tape, const Tensor<T>& a, const std::vector<int>& cols) {
    if (cols.empty()) {
        throw contract_error("gather_columns: empty index list");
    }
    for (int c : cols) {
        if (c < 0 || c >= a.cols()) {
            throw contract_error("gather_columns: column index " + std::to_string(c) +
                                 " out of range for " + a.shape_str());
        }
    }
    const int m = a.rows(), n = static_cast<int>(cols.size());
    Tensor<T> out(m, n);
    for (int j = 0; j < n; ++j) {
        for (int i = 0; i < m; ++i) out.at(i, j) = a.at(i, cols[j]);
    }
    detail::ensure_finite<T>(out.data(), "gather_columns");
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            const int an = a.cols();
            std::vector<int> cs = cols;
            int node =
                tape->add_node(m, n, [pa, cs, m, n, an](Tape<T>& tp, std::span<const T> dout) {
                    auto da = tp.grad(pa);
                    for (int j = 0; j < n; ++j) {
                        for (int i = 0; i < m; ++i) {
                            da[static_cast<std::size_t>(i) * an + cs[j]] +=
                                dout[static_cast<std::size_t>(i) * n + j];
                        }
                    }
                });
            tape->bind(out, node);
        }
    }
    return out;
}

// Pick individual entries (row, col), 0-based, returned as a (k x 1) column.
template <class T>
Tensor<T> gather_entries(Tape<T>* tape, const Tensor<T>& a,
                         const std::vector<std::pair<int, int>>& entries) {
    if (entries.empty()) {
        throw contract_error("gather_entries: empty index list");
    }
    for (auto [r, c] : entries) {
        if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) {
            throw contract_error("gather_entries: index (" + std::to_string(r) + "," +
                                 std::to_string(c) + ") out of range for " + a.shape_str());
        }
    }
    const int k = static_cast<int>(entries.size());
    Tensor<T> out(k, 1);
    for (int i = 0; i < k; ++i) out.at(i, 0) = a.at(entries[i].first, entries[i].second);
    detail::ensure_finite<T>(out.data(), "gather_entries");
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            const int an = a.cols();
            std::vector<std::pair<int, int>> es = entries;
            int node = tape->add_node(k, 1, [pa, es, an](Tape<T>& tp, std::span<const T> dout) {
                auto da = tp.grad(pa);
                for (std::size_t i = 0; i < es.size(); ++i) {
                    da[static_cast<std::size_t>(es[i].first) * an + es[i].second] += dout[i];
                }
            });
            tape->bind(out, node);
        }
    }
    return out;
}

// Element-wise natural log; entries must be strictly positive.
template <class T>
Tensor<T> log_elem(Tape<T>* tape, const Tensor<T>& a) {
    Tensor<T> out(a.rows(), a.cols());
    auto A = a.data();
    auto C = out.mutable_data();
    for (std::size_t i = 0; i < C.size(); ++i) {
        if (!(A[i] > T(0))) {
            throw numeric_error("log: non-positive entry " + std::to_string(A[i]));
        }
        C[i] = std::log(A[i]);
    }
    detail::ensure_finite<T>(out.data(), "log");
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            Tensor<T> as = a;
            int node = tape->add_node(a.rows(), a.cols(),
                                      [pa, as](Tape<T>& tp, std::span<const T> dout) {
                                          auto da = tp.grad(pa);
                                          auto A = as.data();
                                          for (std::size_t i = 0; i < dout.size(); ++i) {
                                              da[i] += dout[i] / A[i];
                                          }
                                      });
            tape->bind(out, node);
        }
    }
    return out;
}

// Sum of all entries, as a 1x1 tensor.
template <class T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& a) {
    Tensor<T> out(1, 1);
    T acc = 0;
    for (T x : a.data()) acc += x;
    out.at(0, 0) = acc;
    detail::ensure_finite<T>(out.data(), "sum_all");
    if (tape) {
        int pa = tape->node_of(a);
        if (pa >= 0) {
            int node = tape->add_node(1, 1, [pa](Tape<T>& tp, std::span<const T> dout) {
                auto da = tp.grad(pa);
                for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[0];
            });
            tape->bind(out, node);
        }
    }
    return out;
}

// Stack matrices vertically: [A_1; A_2; ...], all with equal column counts.
template <class T>
Tensor<T> vstack(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
        throw contract_error("vstack: empty part list");
    }
    const int n = parts[0].cols();
    int total_rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) {
            throw shape_error("vstack: column counts disagree: " + parts[0].shape_str() + " vs " +
                              p.shape_str());
        }
        total_rows += p.rows();
    }
    Tensor<T> out(total_rows, n);
    int row0 = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < p.rows(); ++i) {
            for (int j = 0; j < n; ++j) out.at(row0 + i, j) = p.at(i, j);
        }
        row0 += p.rows();
    }
    detail::ensure_finite<T>(out.data(), "vstack");
    if (tape) {
        std::vector<int> pnodes(parts.size());
        std::vector<int> prows(parts.size());
        bool any = false;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            pnodes[i] = tape->node_of(parts[i]);
            prows[i] = parts[i].rows();
            any = any || pnodes[i] >= 0;
        }
        if (any) {
            int node =
                tape->add_node(total_rows, n, [pnodes, prows, n](Tape<T>& tp,
                                                                 std::span<const T> dout) {
                    int row0 = 0;
                    for (std::size_t p = 0; p < pnodes.size(); ++p) {
                        if (pnodes[p] >= 0) {
                            auto dp = tp.grad(pnodes[p]);
                            for (int i = 0; i < prows[p]; ++i) {
                                for (int j = 0; j < n; ++j) {
                                    dp[static_cast<std::size_t>(i) * n + j] +=
                                        dout[static_cast<std::size_t>(row0 + i) * n + j];
                                }
                            }
                        }
                        row0 += prows[p];
                    }
                });
            tape->bind(out, node);
        }
    }
    return out;
}

}  // namespace ftx
