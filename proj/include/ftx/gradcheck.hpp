#pragma once

#include <cmath>
#include <cstddef>

#include "ftx/tensor.hpp"

namespace ftx {

// Central-difference gradient of a scalar-valued function with respect to the
// tensor p: (f(p + h e_i) - f(p - h e_i)) / 2h per coordinate. The function is
// re-evaluated with p's storage perturbed in place (and restored afterwards),
// so it must be a pure function of p's current contents. This is the
// independent oracle the reverse-mode engine is checked against: it never
// touches a tape.
template <class T, class F>
Tensor<T> finite_difference_gradient(F&& f, Tensor<T>& p, T h = T(1e-5)) {
    Tensor<T> grad(p.rows(), p.cols());
    auto data = p.mutable_data();
    auto out = grad.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const T saved = data[i];
        data[i] = saved + h;
        const T fp = f();
        data[i] = saved - h;
        const T fm = f();
        data[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw numeric_error("finite_difference_gradient: non-finite f at perturbed point");
        }
        out[i] = (fp - fm) / (2 * h);
    }
    return grad;
}

// Comparison policy for analytic-vs-numeric gradients: a coordinate passes if
// its relative error is within rel_tol; coordinates with |analytic| below
// small_floor are compared absolutely with abs_tol instead.
struct GradCheckStats {
    std::size_t total = 0;
    std::size_t violations = 0;        // coordinates failing their applicable test
    std::size_t violations_large = 0;  // failing coordinates with |analytic| >= small_floor
    double max_rel_err = 0.0;          // over coordinates with |analytic| >= small_floor

    bool all_match() const { return violations == 0; }
};

template <class T>
GradCheckStats compare_gradients(const Tensor<T>& analytic, const Tensor<T>& numeric,
                                 double rel_tol = 1e-4, double small_floor = 1e-8,
                                 double abs_tol = 1e-7) {
    if (!analytic.same_shape(numeric)) {
        throw shape_error("compare_gradients: shapes disagree: " + analytic.shape_str() + " vs " +
                          numeric.shape_str());
    }
    GradCheckStats st;
    auto a = analytic.data();
    auto n = numeric.data();
    st.total = a.size();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double g = static_cast<double>(a[i]);
        const double fd = static_cast<double>(n[i]);
        if (std::abs(g) >= small_floor) {
            const double rel = std::abs(g - fd) / std::max(std::abs(g), std::abs(fd));
            st.max_rel_err = std::max(st.max_rel_err, rel);
            if (rel > rel_tol) {
                ++st.violations;
                ++st.violations_large;
            }
        } else if (std::abs(g - fd) > abs_tol) {
            ++st.violations;
        }
    }
    return st;
}

}  // namespace ftx
