#pragma once

#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "ftx/rng.hpp"
#include "ftx/tensor.hpp"

namespace ftx::testutil {

inline Tensord random_tensor(Rng& rng, int rows, int cols, double scale = 1.0) {
    return Tensord::randn(rng, rows, cols, scale);
}

inline double max_abs_diff(const Tensord& a, const Tensord& b) {
    double m = 0.0;
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
    return m;
}

inline bool bitwise_equal(const Tensord& a, const Tensord& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] != bv[i]) return false;
    }
    return true;
}

// Reference matrix product, kept deliberately separate from the library path.
inline Tensord naive_matmul(const Tensord& a, const Tensord& b) {
    Tensord c(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    }
    return c;
}

// Standard normal CDF via an independent erf Taylor series (not std::erf/erfc):
// erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1)).
inline double normal_cdf_series(double x) {
    const double z = x / std::sqrt(2.0);
    double term = z;   // n = 0 term before the 2/sqrt(pi) factor
    double sum = z;
    for (int n = 1; n < 64; ++n) {
        term *= -z * z / n;
        sum += term / (2 * n + 1);
        if (std::abs(term) < 1e-18) break;
    }
    const double erf = 2.0 / std::sqrt(M_PI) * sum;
    return 0.5 * (1.0 + erf);
}

inline std::string test_data_dir() {
    const char* p = std::getenv("FTX_TEST_DATA");
    return p ? std::string(p) : std::string("tests/data");
}

}  // namespace ftx::testutil

#include "ftx/models.hpp"

namespace ftx::testutil {

// Move theta to a generic random point with O(1) activations. Gradient checks
// run here rather than at the tiny 0.02-scale init, where attention-weight
// gradients sit at the finite-difference noise floor (~1e-7 for h = 1e-5) and
// relative comparison is uninformative.
inline void randomize_params(ModelParams<double>& params, const HyperParams& hp, Rng& rng,
                             double weight_scale = 0.4) {
    for (auto& np : named_params(params, hp)) {
        std::string leaf = np.name.substr(np.name.rfind('.') + 1);
        auto data = np.tensor.mutable_data();
        if (leaf == "gamma") {
            for (auto& x : data) x = 1.0 + 0.2 * rng.next_normal();
        } else if (leaf == "beta" || leaf.rfind("b", 0) == 0) {
            for (auto& x : data) x = 0.2 * rng.next_normal();
        } else {
            for (auto& x : data) x = weight_scale * rng.next_normal();
        }
    }
}

}  // namespace ftx::testutil
