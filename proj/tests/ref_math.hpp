#pragma once

// Double-precision reference implementations used as finite-difference
// oracles. Deliberately independent of the float32 kernels and tape: plain
// loops, no shared code, double accumulation throughout.

#include <cmath>
#include <vector>

namespace atc::testing::ref {

using dvec = std::vector<double>;

inline dvec to_d(const std::vector<float>& v) { return dvec(v.begin(), v.end()); }

inline dvec matmul(const dvec& a, const dvec& b, int m, int k, int n) {
    dvec c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int p = 0; p < k; ++p)
                acc += a[static_cast<size_t>(i) * k + p] * b[static_cast<size_t>(p) * n + j];
            c[static_cast<size_t>(i) * n + j] = acc;
        }
    return c;
}

inline dvec softmax_rows(const dvec& x, int rows, int cols) {
    dvec p(x.size());
    for (int i = 0; i < rows; ++i) {
        double mx = x[static_cast<size_t>(i) * cols];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[static_cast<size_t>(i) * cols + j]);
        double denom = 0;
        for (int j = 0; j < cols; ++j) {
            p[static_cast<size_t>(i) * cols + j] = std::exp(x[static_cast<size_t>(i) * cols + j] - mx);
            denom += p[static_cast<size_t>(i) * cols + j];
        }
        for (int j = 0; j < cols; ++j) p[static_cast<size_t>(i) * cols + j] /= denom;
    }
    return p;
}

inline dvec sigmoid(const dvec& x) {
    dvec y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
    return y;
}

inline dvec relu(const dvec& x) {
    dvec y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? x[i] : 0.0;
    return y;
}

inline dvec rmsnorm(const dvec& x, const dvec& gain, int rows, int cols, double eps = 1e-6) {
    dvec y(x.size());
    for (int i = 0; i < rows; ++i) {
        double ss = 0;
        for (int j = 0; j < cols; ++j) {
            const double v = x[static_cast<size_t>(i) * cols + j];
            ss += v * v;
        }
        const double r = 1.0 / std::sqrt(ss / cols + eps);
        for (int j = 0; j < cols; ++j)
            y[static_cast<size_t>(i) * cols + j] =
                x[static_cast<size_t>(i) * cols + j] * r * gain[static_cast<size_t>(j)];
    }
    return y;
}

inline dvec rotary(const dvec& x, const std::vector<int>& pos, int rows, int d_model,
                   int heads) {
    const int dh = d_model / heads;
    dvec y(x.size());
    for (int i = 0; i < rows; ++i)
        for (int h = 0; h < heads; ++h)
            for (int p = 0; p < dh / 2; ++p) {
                const double freq = std::pow(10000.0, -2.0 * p / static_cast<double>(dh));
                const double ang = pos[static_cast<size_t>(i)] * freq;
                const double c = std::cos(ang), s = std::sin(ang);
                const size_t idx = static_cast<size_t>(i) * d_model + h * dh + 2 * p;
                y[idx] = x[idx] * c - x[idx + 1] * s;
                y[idx + 1] = x[idx] * s + x[idx + 1] * c;
            }
    return y;
}

inline dvec conv2d(const dvec& x, const dvec& w, const dvec& bias, int ci, int hh, int ww,
                   int co, int k, int stride, int pad) {
    const int oh = (hh + 2 * pad - k) / stride + 1;
    const int ow = (ww + 2 * pad - k) / stride + 1;
    dvec y(static_cast<size_t>(co) * oh * ow, 0.0);
    for (int c = 0; c < co; ++c)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(c)];
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy * stride + ky - pad;
                            const int ix = ox * stride + kx - pad;
                            if (iy < 0 || iy >= hh || ix < 0 || ix >= ww) continue;
                            acc += x[(static_cast<size_t>(ic) * hh + iy) * ww + ix] *
                                   w[((static_cast<size_t>(c) * ci + ic) * k + ky) * k + kx];
                        }
                y[(static_cast<size_t>(c) * oh + oy) * ow + ox] = acc;
            }
    return y;
}

inline dvec avg_pool(const dvec& x, int c, int h, int w, int f) {
    if (f == 1) return x;
    const int oh = h / f, ow = w / f;
    dvec y(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = 0;
                for (int dy = 0; dy < f; ++dy)
                    for (int dx = 0; dx < f; ++dx)
                        acc += x[(static_cast<size_t>(ch) * h + oy * f + dy) * w + ox * f + dx];
                y[(static_cast<size_t>(ch) * oh + oy) * ow + ox] = acc / (f * f);
            }
    return y;
}

inline dvec global_avg_pool(const dvec& x, int c, int h, int w) {
    dvec y(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (int i = 0; i < h * w; ++i) acc += x[static_cast<size_t>(ch) * h * w + i];
        y[static_cast<size_t>(ch)] = acc / (h * w);
    }
    return y;
}

inline double mean(const dvec& x) {
    double s = 0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
}

inline double mse(const dvec& a, const dvec& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

inline double cross_entropy(const dvec& logits, int label) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double denom = 0;
    for (double v : logits) denom += std::exp(v - mx);
    return std::log(denom) - (logits[static_cast<size_t>(label)] - mx);
}

// Attention with per-head softmax: q [m,D], k/v [n,D] -> [m,D].
inline dvec attention(const dvec& q, const dvec& k, const dvec& v, int m, int n, int d_model,
                      int heads, double scale) {
    const int dh = d_model / heads;
    dvec out(static_cast<size_t>(m) * d_model, 0.0);
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < m; ++i) {
            dvec row(static_cast<size_t>(n));
            for (int j = 0; j < n; ++j) {
                double acc = 0;
                for (int d = 0; d < dh; ++d)
                    acc += q[static_cast<size_t>(i) * d_model + h * dh + d] *
                           k[static_cast<size_t>(j) * d_model + h * dh + d];
                row[static_cast<size_t>(j)] = acc * scale;
            }
            const dvec p = softmax_rows(row, 1, n);
            for (int d = 0; d < dh; ++d) {
                double acc = 0;
                for (int j = 0; j < n; ++j)
                    acc += p[static_cast<size_t>(j)] *
                           v[static_cast<size_t>(j) * d_model + h * dh + d];
                out[static_cast<size_t>(i) * d_model + h * dh + d] = acc;
            }
        }
    }
    return out;
}

}  // namespace atc::testing::ref
