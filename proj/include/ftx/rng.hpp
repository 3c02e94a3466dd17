#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ftx/error.hpp"

namespace ftx {

// Deterministic splittable PRNG (splitmix64). All stochasticity in the
// library (parameter init, masking, sampling) draws from one of these, so a
// run is reproducible from its seed alone.
//
// Draw accounting, for replayability:
//   - next_u64 / next_double consume one state advance each;
//   - next_normal consumes exactly two uniforms (Box-Muller, no cached spare);
//   - bernoulli and categorical consume exactly one uniform each.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller. The sine branch is discarded so every
    // call consumes exactly two uniform draws.
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    bool bernoulli(double p) { return next_double() < p; }

    // Index into a cumulative-sum walk of `weights` (need not be normalized).
    std::size_t categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) {
            if (w < 0.0 || !std::isfinite(w)) {
                throw contract_error("categorical: weights must be finite and non-negative");
            }
            total += w;
        }
        if (total <= 0.0) {
            throw contract_error("categorical: total weight must be positive");
        }
        double r = next_double() * total;
        double cum = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            cum += weights[i];
            if (r < cum) {
                return i;
            }
        }
        return weights.size() - 1;
    }

    // Derive an independent stream; mixing the label through the generator
    // keeps substreams decorrelated without sharing state.
    Rng split(std::uint64_t stream) const {
        Rng probe(state_ ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
        return Rng(probe.next_u64());
    }

private:
    std::uint64_t state_;
};

}  // namespace ftx
