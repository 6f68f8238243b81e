#pragma once

#include <cstdint>

namespace atc::kernels {

// Runtime-selected kernel backend. The scalar path is the reference
// semantics; SIMD variants must be bit-identical to it on the same inputs
// (same per-element operation order, no FMA contraction), so switching the
// backend never changes any numeric result.
enum class Backend { scalar, avx2 };

bool avx2_supported();
Backend detect();            // best backend supported by this CPU
Backend active();
void set_backend(Backend b); // throws ConfigError when unsupported
const char* name(Backend b);

// c[m,n] = a[m,k] * b[k,n], or c += ... when accumulate is set.
// Accumulation over k runs in ascending order for every output element.
// Buffers must not alias.
void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n,
             bool accumulate = false);

void transpose(const float* a, float* at, int rows, int cols);

// Elementwise; out may alias an input.
void add(const float* a, const float* b, float* out, int64_t n);
void sub(const float* a, const float* b, float* out, int64_t n);
void mul(const float* a, const float* b, float* out, int64_t n);
void scale(const float* a, float s, float* out, int64_t n);
void axpy(float alpha, const float* x, float* y, int64_t n);  // y += alpha*x
void relu(const float* x, float* out, int64_t n);

namespace detail {
struct Ops {
    void (*gemm_nn)(const float*, const float*, float*, int, int, int, bool);
    void (*add)(const float*, const float*, float*, int64_t);
    void (*sub)(const float*, const float*, float*, int64_t);
    void (*mul)(const float*, const float*, float*, int64_t);
    void (*scale)(const float*, float, float*, int64_t);
    void (*axpy)(float, const float*, float*, int64_t);
    void (*relu)(const float*, float*, int64_t);
};
const Ops& scalar_ops();
const Ops& avx2_ops();  // valid only when avx2_supported()
}  // namespace detail

}  // namespace atc::kernels
