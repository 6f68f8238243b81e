#include "atc/kernels.hpp"

#include <cstdlib>
#include <cstring>
#include <string>

#include "atc/error.hpp"

namespace atc::kernels {

namespace {

void gemm_nn_scalar(const float* a, const float* b, float* c, int m, int k, int n,
                    bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * k;
        float* crow = c + static_cast<int64_t>(i) * n;
        if (!accumulate) std::memset(crow, 0, sizeof(float) * static_cast<size_t>(n));
        for (int j = 0; j < n; ++j) {
            float acc = crow[j];
            for (int kk = 0; kk < k; ++kk) {
                acc = acc + arow[kk] * b[static_cast<int64_t>(kk) * n + j];
            }
            crow[j] = acc;
        }
    }
}

void add_scalar(const float* a, const float* b, float* o, int64_t n) {
    for (int64_t i = 0; i < n; ++i) o[i] = a[i] + b[i];
}
void sub_scalar(const float* a, const float* b, float* o, int64_t n) {
    for (int64_t i = 0; i < n; ++i) o[i] = a[i] - b[i];
}
void mul_scalar(const float* a, const float* b, float* o, int64_t n) {
    for (int64_t i = 0; i < n; ++i) o[i] = a[i] * b[i];
}
void scale_scalar(const float* a, float s, float* o, int64_t n) {
    for (int64_t i = 0; i < n; ++i) o[i] = a[i] * s;
}
void axpy_scalar(float alpha, const float* x, float* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = y[i] + alpha * x[i];
}
void relu_scalar(const float* x, float* o, int64_t n) {
    for (int64_t i = 0; i < n; ++i) o[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

Backend g_backend = detect();

const detail::Ops& ops() {
    return g_backend == Backend::avx2 ? detail::avx2_ops() : detail::scalar_ops();
}

}  // namespace

namespace detail {
const Ops& scalar_ops() {
    static const Ops table{gemm_nn_scalar, add_scalar,  sub_scalar, mul_scalar,
                           scale_scalar,   axpy_scalar, relu_scalar};
    return table;
}
}  // namespace detail

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") != 0;
#else
    return false;
#endif
}

Backend detect() {
    if (const char* env = std::getenv("ATC_KERNEL")) {
        if (std::string(env) == "scalar") return Backend::scalar;
        if (std::string(env) == "avx2" && avx2_supported()) return Backend::avx2;
    }
    return avx2_supported() ? Backend::avx2 : Backend::scalar;
}

Backend active() { return g_backend; }

void set_backend(Backend b) {
    if (b == Backend::avx2 && !avx2_supported())
        throw ConfigError("kernel backend avx2 not supported on this CPU");
    g_backend = b;
}

const char* name(Backend b) { return b == Backend::avx2 ? "avx2" : "scalar"; }

void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n,
             bool accumulate) {
    ops().gemm_nn(a, b, c, m, k, n, accumulate);
}

void transpose(const float* a, float* at, int rows, int cols) {
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            at[static_cast<int64_t>(j) * rows + i] = a[static_cast<int64_t>(i) * cols + j];
}

void add(const float* a, const float* b, float* o, int64_t n) { ops().add(a, b, o, n); }
void sub(const float* a, const float* b, float* o, int64_t n) { ops().sub(a, b, o, n); }
void mul(const float* a, const float* b, float* o, int64_t n) { ops().mul(a, b, o, n); }
void scale(const float* a, float s, float* o, int64_t n) { ops().scale(a, s, o, n); }
void axpy(float alpha, const float* x, float* y, int64_t n) { ops().axpy(alpha, x, y, n); }
void relu(const float* x, float* o, int64_t n) { ops().relu(x, o, n); }

}  // namespace atc::kernels
