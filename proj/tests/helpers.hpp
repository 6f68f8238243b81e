#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "atc/rng.hpp"
#include "atc/tensor.hpp"

namespace atc::testing {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, float lo = -2.0f,
                            float hi = 2.0f) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

inline bool close(float a, float b, float rtol, float atol) {
    return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

// Elementwise |a-b| <= atol + rtol*max(|a|,|b|); prints the first offender.
inline bool allclose(const std::vector<float>& a, const std::vector<float>& b,
                     float rtol = 1e-4f, float atol = 1e-5f) {
    if (a.size() != b.size()) {
        std::fprintf(stderr, "allclose: size %zu vs %zu\n", a.size(), b.size());
        return false;
    }
    for (size_t i = 0; i < a.size(); ++i) {
        if (!close(a[i], b[i], rtol, atol)) {
            std::fprintf(stderr, "allclose: idx %zu: %.8g vs %.8g (|d|=%.3g)\n", i,
                         static_cast<double>(a[i]), static_cast<double>(b[i]),
                         static_cast<double>(std::abs(a[i] - b[i])));
            return false;
        }
    }
    return true;
}

inline bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (std::memcmp(&a[i], &b[i], sizeof(float)) != 0) {
            std::fprintf(stderr, "bitwise: idx %zu: %.9g vs %.9g\n", i,
                         static_cast<double>(a[i]), static_cast<double>(b[i]));
            return false;
        }
    }
    return true;
}

// Compares a tape-built graph's backward gradients for `x` against central
// differences of a scalar reference. When `ref` is provided it should be an
// independent double-precision reimplementation of the same function (the
// preferred oracle: float32 forward noise would otherwise swamp atol);
// otherwise the float32 graph itself is differenced.
inline bool check_grad_ref(const Tensor& x,
                           const std::function<Tensor(Tape&, const Tensor&)>& build,
                           const std::function<double(const Tensor&)>& ref, float eps = 1e-3f,
                           float rtol = 1e-4f, float atol = 1e-5f) {
    Tape tape;
    Tensor xv = tape.param(x);
    Tensor loss = build(tape, xv);
    tape.backward(loss);
    const std::vector<float> bp = tape.grad(x);
    const Tensor fd = finite_diff_grad(ref, x, eps);
    return allclose(bp, fd.vec(), rtol, atol);
}

// Float32-graph variant for composites without a double reference.
inline bool check_grad(const Tensor& x,
                       const std::function<Tensor(Tape&, const Tensor&)>& build,
                       float eps = 1e-2f, float rtol = 1e-4f, float atol = 1e-5f) {
    Tape tape;
    Tensor xv = tape.param(x);
    Tensor loss = build(tape, xv);
    tape.backward(loss);
    const std::vector<float> bp = tape.grad(x);

    auto f = [&](const Tensor& probe) -> double {
        Tape t2;
        Tensor pv = t2.param(probe);
        return static_cast<double>(build(t2, pv).item());
    };
    const Tensor fd = finite_diff_grad(f, x, eps);
    return allclose(bp, fd.vec(), rtol, atol);
}

}  // namespace atc::testing
