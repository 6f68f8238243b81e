// AVX2 kernel variants. Compiled with per-function target attributes so the
// binary still loads on CPUs without AVX2; dispatch happens at runtime.
//
// Every kernel keeps the exact per-element operation order of the scalar
// reference (ascending k, separate multiply then add), so results are
// bit-identical across backends.

#include "atc/kernels.hpp"

#if defined(__x86_64__) || defined(__i386__)
#define ATC_HAVE_AVX2_TU 1
#include <immintrin.h>
#else
#define ATC_HAVE_AVX2_TU 0
#endif

#include <cstring>

namespace atc::kernels::detail {

#if ATC_HAVE_AVX2_TU

#define ATC_AVX2 __attribute__((target("avx2")))

namespace {

ATC_AVX2 void gemm_nn_avx2(const float* a, const float* b, float* c, int m, int k,
                           int n, bool accumulate) {
    const int n32 = n - n % 32;
    const int n8 = n - n % 8;
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * k;
        float* crow = c + static_cast<int64_t>(i) * n;
        if (!accumulate) std::memset(crow, 0, sizeof(float) * static_cast<size_t>(n));
        int j = 0;
        for (; j < n32; j += 32) {
            __m256 acc0 = _mm256_loadu_ps(crow + j);
            __m256 acc1 = _mm256_loadu_ps(crow + j + 8);
            __m256 acc2 = _mm256_loadu_ps(crow + j + 16);
            __m256 acc3 = _mm256_loadu_ps(crow + j + 24);
            for (int kk = 0; kk < k; ++kk) {
                const __m256 av = _mm256_broadcast_ss(arow + kk);
                const float* brow = b + static_cast<int64_t>(kk) * n + j;
                acc0 = _mm256_add_ps(acc0, _mm256_mul_ps(av, _mm256_loadu_ps(brow)));
                acc1 = _mm256_add_ps(acc1, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 8)));
                acc2 = _mm256_add_ps(acc2, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 16)));
                acc3 = _mm256_add_ps(acc3, _mm256_mul_ps(av, _mm256_loadu_ps(brow + 24)));
            }
            _mm256_storeu_ps(crow + j, acc0);
            _mm256_storeu_ps(crow + j + 8, acc1);
            _mm256_storeu_ps(crow + j + 16, acc2);
            _mm256_storeu_ps(crow + j + 24, acc3);
        }
        for (; j < n8; j += 8) {
            __m256 acc = _mm256_loadu_ps(crow + j);
            for (int kk = 0; kk < k; ++kk) {
                const __m256 av = _mm256_broadcast_ss(arow + kk);
                const __m256 bv = _mm256_loadu_ps(b + static_cast<int64_t>(kk) * n + j);
                acc = _mm256_add_ps(acc, _mm256_mul_ps(av, bv));
            }
            _mm256_storeu_ps(crow + j, acc);
        }
        for (; j < n; ++j) {
            float acc = crow[j];
            for (int kk = 0; kk < k; ++kk)
                acc = acc + arow[kk] * b[static_cast<int64_t>(kk) * n + j];
            crow[j] = acc;
        }
    }
}

ATC_AVX2 void add_avx2(const float* a, const float* b, float* o, int64_t n) {
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) o[i] = a[i] + b[i];
}

ATC_AVX2 void sub_avx2(const float* a, const float* b, float* o, int64_t n) {
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) o[i] = a[i] - b[i];
}

ATC_AVX2 void mul_avx2(const float* a, const float* b, float* o, int64_t n) {
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
    for (; i < n; ++i) o[i] = a[i] * b[i];
}

ATC_AVX2 void scale_avx2(const float* a, float s, float* o, int64_t n) {
    const __m256 sv = _mm256_set1_ps(s);
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), sv));
    for (; i < n; ++i) o[i] = a[i] * s;
}

ATC_AVX2 void axpy_avx2(float alpha, const float* x, float* y, int64_t n) {
    const __m256 av = _mm256_set1_ps(alpha);
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 t = _mm256_mul_ps(av, _mm256_loadu_ps(x + i));
        _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), t));
    }
    for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

ATC_AVX2 void relu_avx2(const float* x, float* o, int64_t n) {
    const __m256 zero = _mm256_setzero_ps();
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(o + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
    for (; i < n; ++i) o[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

}  // namespace

const Ops& avx2_ops() {
    static const Ops table{gemm_nn_avx2, add_avx2,  sub_avx2, mul_avx2,
                           scale_avx2,   axpy_avx2, relu_avx2};
    return table;
}

#else

const Ops& avx2_ops() { return scalar_ops(); }

#endif

}  // namespace atc::kernels::detail
