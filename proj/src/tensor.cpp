#include "atc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "atc/error.hpp"
#include "atc/kernels.hpp"

namespace atc {

namespace {

int64_t shape_numel(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// Copy a column block [col0, col0+width) of src [rows, cols] into a
// contiguous [rows, width] buffer, and the reverse accumulate.
void pack_cols(const float* src, int rows, int cols, int col0, int width, float* dst) {
    for (int r = 0; r < rows; ++r)
        std::memcpy(dst + static_cast<int64_t>(r) * width,
                    src + static_cast<int64_t>(r) * cols + col0,
                    sizeof(float) * static_cast<size_t>(width));
}
void unpack_cols_add(const float* src, int rows, int cols, int col0, int width, float* dst) {
    for (int r = 0; r < rows; ++r) {
        const float* s = src + static_cast<int64_t>(r) * width;
        float* d = dst + static_cast<int64_t>(r) * cols + col0;
        for (int c = 0; c < width; ++c) d[c] += s[c];
    }
}

// c[m,n] (+)= a[m,k] * b[k,n] with b given untransposed/transposed.
void gemm_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    kernels::gemm_nn(a, b, c, m, k, n, /*accumulate=*/true);
}

}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : v_(std::make_shared<std::vector<float>>(static_cast<size_t>(shape_numel(shape)), 0.0f)),
      shape_(std::move(shape)) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : v_(std::make_shared<std::vector<float>>(std::move(data))), shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<int64_t>(v_->size()))
        throw ShapeError("tensor data size " + std::to_string(v_->size()) +
                         " does not match shape " + shape_str());
}

Tensor Tensor::ones(std::vector<int> shape) {
    Tensor t(std::move(shape));
    std::fill(t.vec().begin(), t.vec().end(), 1.0f);
    return t;
}

int64_t Tensor::numel() const { return v_ ? static_cast<int64_t>(v_->size()) : 0; }

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a scalar, got " + shape_str());
    return (*v_)[0];
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
}

// ---------------------------------------------------------------------------
// Tape plumbing
// ---------------------------------------------------------------------------

Tensor Tape::param(const Tensor& t) {
    if (!t.defined()) throw ContractError("param() on undefined tensor");
    Tensor view = t;
    if (!grads_) {
        view.node_ = -1;
        return view;
    }
    auto it = leaves_.find(t.v_.get());
    if (it != leaves_.end()) {
        view.node_ = it->second;
        return view;
    }
    nodes_.push_back(Node{t.numel(), {}, {}});
    const int id = static_cast<int>(nodes_.size()) - 1;
    leaves_.emplace(t.v_.get(), id);
    view.node_ = id;
    return view;
}

Tensor Tape::make(std::vector<int> shape, std::vector<float> data,
                  std::function<void(Tape&)> back, bool any_input_on_tape) {
    Tensor out(std::move(shape), std::move(data));
    if (grads_ && any_input_on_tape) {
        nodes_.push_back(Node{out.numel(), {}, std::move(back)});
        out.node_ = static_cast<int>(nodes_.size()) - 1;
    }
    return out;
}

float* Tape::grad_buf(int node) {
    Node& n = nodes_[static_cast<size_t>(node)];
    if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.numel), 0.0f);
    return n.grad.data();
}

const float* Tape::grad_of(int node) const {
    if (node < 0) return nullptr;
    const Node& n = nodes_[static_cast<size_t>(node)];
    return n.grad.empty() ? nullptr : n.grad.data();
}

void Tape::backward(const Tensor& loss) {
    if (!grads_) throw ContractError("backward() on a non-recording tape");
    if (loss.numel() != 1)
        throw ContractError("backward() requires a scalar loss, got " + loss.shape_str());
    if (loss.node_ < 0) throw ContractError("loss is not connected to the tape");
    grad_buf(loss.node_)[0] = 1.0f;
    for (int i = loss.node_; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.grad.empty() && n.back) n.back(*this);
    }
}

std::vector<float> Tape::grad(const Tensor& t) const {
    int node = t.node_;
    if (node < 0) {
        auto it = leaves_.find(t.v_.get());
        if (it != leaves_.end()) node = it->second;
    }
    const float* g = grad_of(node);
    if (!g) return std::vector<float>(static_cast<size_t>(t.numel()), 0.0f);
    return std::vector<float>(g, g + t.numel());
}

// Convention for every op below: compute values eagerly, record FLOPs, then
// attach a closure that reads this op's output gradient via its node id and
// accumulates into the input gradients.

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

Tensor Tape::matmul(const Tensor& a, const Tensor& b, FlopBucket bucket) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    kernels::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
    count(bucket, static_cast<int64_t>(m) * k * n);

    const int an = a.node_, bn = b.node_;
    Tensor res = make({m, n}, std::move(out), {}, an >= 0 || bn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [a, b, an, bn, m, k, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            if (an >= 0) {
                // ga += G * b^T
                std::vector<float> bt(static_cast<size_t>(k) * n);
                kernels::transpose(b.data(), bt.data(), k, n);
                gemm_acc(g, bt.data(), t.grad_buf(an), m, n, k);
            }
            if (bn >= 0) {
                // gb += a^T * G
                std::vector<float> at(static_cast<size_t>(m) * k);
                kernels::transpose(a.data(), at.data(), m, k);
                gemm_acc(at.data(), g, t.grad_buf(bn), k, m, n);
            }
        };
    }
    return res;
}

Tensor Tape::add(const Tensor& a, const Tensor& b, FlopBucket bucket) {
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    kernels::add(a.data(), b.data(), out.data(), n);
    count(bucket, n);
    const int an = a.node_, bn = b.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0 || bn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [an, bn, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            if (an >= 0) kernels::axpy(1.0f, g, t.grad_buf(an), n);
            if (bn >= 0) kernels::axpy(1.0f, g, t.grad_buf(bn), n);
        };
    }
    return res;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b, FlopBucket bucket) {
    if (a.shape() != b.shape())
        throw ShapeError("sub shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    kernels::sub(a.data(), b.data(), out.data(), n);
    count(bucket, n);
    const int an = a.node_, bn = b.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0 || bn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [an, bn, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            if (an >= 0) kernels::axpy(1.0f, g, t.grad_buf(an), n);
            if (bn >= 0) kernels::axpy(-1.0f, g, t.grad_buf(bn), n);
        };
    }
    return res;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b, FlopBucket bucket) {
    if (a.shape() != b.shape())
        throw ShapeError("mul shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    kernels::mul(a.data(), b.data(), out.data(), n);
    count(bucket, n);
    const int an = a.node_, bn = b.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0 || bn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [a, b, an, bn, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            if (an >= 0) {
                float* ga = t.grad_buf(an);
                const float* bd = b.data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bd[i];
            }
            if (bn >= 0) {
                float* gb = t.grad_buf(bn);
                const float* ad = a.data();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * ad[i];
            }
        };
    }
    return res;
}

Tensor Tape::scale(const Tensor& a, float s, FlopBucket bucket) {
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    kernels::scale(a.data(), s, out.data(), n);
    count(bucket, n);
    const int an = a.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [an, n, s, self](Tape& t) {
            kernels::axpy(s, t.grad_of(self), t.grad_buf(an), n);
        };
    }
    return res;
}

Tensor Tape::add_rowvec(const Tensor& a, const Tensor& v, FlopBucket bucket) {
    if (a.ndim() != 2 || v.ndim() != 1 || a.dim(1) != v.dim(0))
        throw ShapeError("add_rowvec shape mismatch: " + a.shape_str() + " vs " + v.shape_str());
    const int m = a.dim(0), n = a.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        kernels::add(a.data() + static_cast<int64_t>(i) * n, v.data(),
                     out.data() + static_cast<int64_t>(i) * n, n);
    count(bucket, static_cast<int64_t>(m) * n);
    const int an = a.node_, vn = v.node_;
    Tensor res = make({m, n}, std::move(out), {}, an >= 0 || vn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [an, vn, m, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            if (an >= 0) kernels::axpy(1.0f, g, t.grad_buf(an), static_cast<int64_t>(m) * n);
            if (vn >= 0) {
                float* gv = t.grad_buf(vn);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gv[j] += g[static_cast<int64_t>(i) * n + j];
            }
        };
    }
    return res;
}

Tensor Tape::relu(const Tensor& a, FlopBucket bucket) {
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    kernels::relu(a.data(), out.data(), n);
    count(bucket, n);
    const int an = a.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [a, an, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            float* ga = t.grad_buf(an);
            const float* ad = a.data();
            for (int64_t i = 0; i < n; ++i)
                if (ad[i] > 0.0f) ga[i] += g[i];
        };
    }
    return res;
}

Tensor Tape::sigmoid(const Tensor& a, FlopBucket bucket) {
    const int64_t n = a.numel();
    std::vector<float> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[i] = 1.0f / (1.0f + std::exp(-a.data()[i]));
    count(bucket, 3 * n);
    const int an = a.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        Tensor saved = res;
        nodes_[static_cast<size_t>(self)].back = [saved, an, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            float* ga = t.grad_buf(an);
            const float* s = saved.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s[i] * (1.0f - s[i]);
        };
    }
    return res;
}

Tensor Tape::softmax(const Tensor& a, int axis, FlopBucket bucket) {
    if (axis < 0) axis += a.ndim();
    if (axis < 0 || axis >= a.ndim())
        throw ContractError("softmax axis out of range for " + a.shape_str());
    const int len = a.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);

    std::vector<float> out(static_cast<size_t>(a.numel()));
    const float* x = a.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * len * inner + in;
            float mx = x[base];
            for (int i = 1; i < len; ++i) mx = std::max(mx, x[base + i * inner]);
            float denom = 0.0f;
            for (int i = 0; i < len; ++i) {
                const float e = std::exp(x[base + i * inner] - mx);
                out[static_cast<size_t>(base + i * inner)] = e;
                denom += e;
            }
            for (int i = 0; i < len; ++i) out[static_cast<size_t>(base + i * inner)] /= denom;
        }
    }
    count(bucket, 4 * a.numel());
    const int an = a.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        Tensor saved = res;
        nodes_[static_cast<size_t>(self)].back = [saved, an, outer, inner, len, self](Tape& t) {
            const float* g = t.grad_of(self);
            const float* p = saved.data();
            float* ga = t.grad_buf(an);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * len * inner + in;
                    float dot = 0.0f;
                    for (int i = 0; i < len; ++i)
                        dot += g[base + i * inner] * p[base + i * inner];
                    for (int i = 0; i < len; ++i) {
                        const int64_t idx = base + i * inner;
                        ga[idx] += p[idx] * (g[idx] - dot);
                    }
                }
            }
        };
    }
    return res;
}

Tensor Tape::rmsnorm(const Tensor& x, const Tensor& gain, float eps, FlopBucket bucket) {
    if (x.ndim() != 2 || gain.ndim() != 1 || x.dim(1) != gain.dim(0))
        throw ShapeError("rmsnorm shape mismatch: " + x.shape_str() + " vs " + gain.shape_str());
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    std::vector<float> rinv(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const float* row = x.data() + static_cast<int64_t>(i) * n;
        float ss = 0.0f;
        for (int j = 0; j < n; ++j) ss += row[j] * row[j];
        const float r = 1.0f / std::sqrt(ss / static_cast<float>(n) + eps);
        rinv[static_cast<size_t>(i)] = r;
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(i) * n + j] = row[j] * r * gain.data()[j];
    }
    count(bucket, static_cast<int64_t>(m) * (4 * n + 3));
    const int xn = x.node_, gn = gain.node_;
    Tensor res = make({m, n}, std::move(out), {}, xn >= 0 || gn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [x, gain, rinv, xn, gn, m, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            const float* xd = x.data();
            const float* gd = gain.data();
            for (int i = 0; i < m; ++i) {
                const float r = rinv[static_cast<size_t>(i)];
                const float* grow = g + static_cast<int64_t>(i) * n;
                const float* xrow = xd + static_cast<int64_t>(i) * n;
                if (xn >= 0) {
                    float s = 0.0f;
                    for (int j = 0; j < n; ++j) s += grow[j] * gd[j] * xrow[j];
                    const float c = r * r * r * s / static_cast<float>(n);
                    float* gx = t.grad_buf(xn) + static_cast<int64_t>(i) * n;
                    for (int j = 0; j < n; ++j) gx[j] += grow[j] * r * gd[j] - xrow[j] * c;
                }
                if (gn >= 0) {
                    float* gg = t.grad_buf(gn);
                    for (int j = 0; j < n; ++j) gg[j] += grow[j] * xrow[j] * r;
                }
            }
        };
    }
    return res;
}

Tensor Tape::rotary(const Tensor& x, const std::vector<int>& positions, int heads,
                    FlopBucket bucket) {
    if (x.ndim() != 2) throw ShapeError("rotary expects a 2-d tensor, got " + x.shape_str());
    const int m = x.dim(0), d_model = x.dim(1);
    if (static_cast<int>(positions.size()) != m)
        throw ShapeError("rotary positions size mismatch");
    if (d_model % heads != 0 || (d_model / heads) % 2 != 0)
        throw ConfigError("rotary requires an even per-head dim, got dim " +
                          std::to_string(d_model) + " with " + std::to_string(heads) + " heads");
    const int dh = d_model / heads;
    std::vector<float> out(static_cast<size_t>(m) * d_model);
    const float* xd = x.data();
    for (int i = 0; i < m; ++i) {
        const float pos = static_cast<float>(positions[static_cast<size_t>(i)]);
        for (int h = 0; h < heads; ++h) {
            for (int p = 0; p < dh / 2; ++p) {
                const float freq =
                    std::pow(10000.0f, -2.0f * static_cast<float>(p) / static_cast<float>(dh));
                const float ang = pos * freq;
                const float c = std::cos(ang), s = std::sin(ang);
                const int64_t idx = static_cast<int64_t>(i) * d_model + h * dh + 2 * p;
                const float x0 = xd[idx], x1 = xd[idx + 1];
                out[static_cast<size_t>(idx)] = x0 * c - x1 * s;
                out[static_cast<size_t>(idx) + 1] = x0 * s + x1 * c;
            }
        }
    }
    count(bucket, 3 * static_cast<int64_t>(m) * d_model);
    const int xnode = x.node_;
    Tensor res = make({m, d_model}, std::move(out), {}, xnode >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        auto pos_copy = positions;
        nodes_[static_cast<size_t>(self)].back = [pos_copy, xnode, m, d_model, heads, self](Tape& t) {
            const int dh = d_model / heads;
            const float* g = t.grad_of(self);
            float* gx = t.grad_buf(xnode);
            for (int i = 0; i < m; ++i) {
                const float pos = static_cast<float>(pos_copy[static_cast<size_t>(i)]);
                for (int h = 0; h < heads; ++h) {
                    for (int p = 0; p < dh / 2; ++p) {
                        const float freq = std::pow(
                            10000.0f, -2.0f * static_cast<float>(p) / static_cast<float>(dh));
                        const float ang = pos * freq;
                        const float c = std::cos(ang), s = std::sin(ang);
                        const int64_t idx = static_cast<int64_t>(i) * d_model + h * dh + 2 * p;
                        const float g0 = g[idx], g1 = g[idx + 1];
                        gx[idx] += g0 * c + g1 * s;
                        gx[idx + 1] += -g0 * s + g1 * c;
                    }
                }
            }
        };
    }
    return res;
}

Tensor Tape::attention_scores(const Tensor& q, const Tensor& k, int heads, FlopBucket bucket) {
    if (q.ndim() != 2 || k.ndim() != 2 || q.dim(1) != k.dim(1))
        throw ShapeError("attention_scores shape mismatch: " + q.shape_str() + " vs " +
                         k.shape_str());
    const int m = q.dim(0), n = k.dim(0), d_model = q.dim(1);
    if (d_model % heads != 0) throw ConfigError("embedding dim not divisible by heads");
    const int dh = d_model / heads;
    std::vector<float> out(static_cast<size_t>(heads) * m * n);
    std::vector<float> qh(static_cast<size_t>(m) * dh), kh(static_cast<size_t>(n) * dh),
        kht(static_cast<size_t>(dh) * n);
    for (int h = 0; h < heads; ++h) {
        pack_cols(q.data(), m, d_model, h * dh, dh, qh.data());
        pack_cols(k.data(), n, d_model, h * dh, dh, kh.data());
        kernels::transpose(kh.data(), kht.data(), n, dh);
        kernels::gemm_nn(qh.data(), kht.data(), out.data() + static_cast<int64_t>(h) * m * n,
                         m, dh, n);
    }
    count(bucket, static_cast<int64_t>(m) * n * d_model);
    const int qn = q.node_, kn = k.node_;
    Tensor res = make({heads, m, n}, std::move(out), {}, qn >= 0 || kn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [q, k, qn, kn, m, n, d_model, heads,
                                                  self](Tape& t) {
            const int dh = d_model / heads;
            const float* g = t.grad_of(self);
            std::vector<float> qh(static_cast<size_t>(m) * dh), kh(static_cast<size_t>(n) * dh);
            std::vector<float> tmp(static_cast<size_t>(std::max(m, n)) * dh);
            std::vector<float> gt(static_cast<size_t>(m) * n);
            for (int h = 0; h < heads; ++h) {
                const float* gh = g + static_cast<int64_t>(h) * m * n;
                pack_cols(q.data(), m, d_model, h * dh, dh, qh.data());
                pack_cols(k.data(), n, d_model, h * dh, dh, kh.data());
                if (qn >= 0) {
                    // dq_h = G_h [m,n] * k_h [n,dh]
                    std::fill(tmp.begin(), tmp.begin() + static_cast<int64_t>(m) * dh, 0.0f);
                    kernels::gemm_nn(gh, kh.data(), tmp.data(), m, n, dh);
                    unpack_cols_add(tmp.data(), m, d_model, h * dh, dh, t.grad_buf(qn));
                }
                if (kn >= 0) {
                    // dk_h = G_h^T [n,m] * q_h [m,dh]
                    kernels::transpose(gh, gt.data(), m, n);
                    std::fill(tmp.begin(), tmp.begin() + static_cast<int64_t>(n) * dh, 0.0f);
                    kernels::gemm_nn(gt.data(), qh.data(), tmp.data(), n, m, dh);
                    unpack_cols_add(tmp.data(), n, d_model, h * dh, dh, t.grad_buf(kn));
                }
            }
        };
    }
    return res;
}

Tensor Tape::attention_mix(const Tensor& probs, const Tensor& v, int heads, FlopBucket bucket) {
    if (probs.ndim() != 3 || v.ndim() != 2 || probs.dim(0) != heads || probs.dim(2) != v.dim(0))
        throw ShapeError("attention_mix shape mismatch: " + probs.shape_str() + " vs " +
                         v.shape_str());
    const int m = probs.dim(1), n = probs.dim(2), d_model = v.dim(1);
    if (d_model % heads != 0) throw ConfigError("embedding dim not divisible by heads");
    const int dh = d_model / heads;
    std::vector<float> out(static_cast<size_t>(m) * d_model, 0.0f);
    std::vector<float> vh(static_cast<size_t>(n) * dh), oh(static_cast<size_t>(m) * dh);
    for (int h = 0; h < heads; ++h) {
        pack_cols(v.data(), n, d_model, h * dh, dh, vh.data());
        kernels::gemm_nn(probs.data() + static_cast<int64_t>(h) * m * n, vh.data(), oh.data(),
                         m, n, dh);
        unpack_cols_add(oh.data(), m, d_model, h * dh, dh, out.data());
    }
    count(bucket, static_cast<int64_t>(m) * n * d_model);
    const int pn = probs.node_, vn = v.node_;
    Tensor res = make({m, d_model}, std::move(out), {}, pn >= 0 || vn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [probs, v, pn, vn, m, n, d_model, heads,
                                                  self](Tape& t) {
            const int dh = d_model / heads;
            const float* g = t.grad_of(self);
            std::vector<float> gh(static_cast<size_t>(m) * dh), vh(static_cast<size_t>(n) * dh),
                vht(static_cast<size_t>(dh) * n), pt(static_cast<size_t>(n) * m),
                tmp(static_cast<size_t>(n) * dh);
            for (int h = 0; h < heads; ++h) {
                pack_cols(g, m, d_model, h * dh, dh, gh.data());
                pack_cols(v.data(), n, d_model, h * dh, dh, vh.data());
                const float* ph = probs.data() + static_cast<int64_t>(h) * m * n;
                if (pn >= 0) {
                    // dp_h = G_h [m,dh] * v_h^T [dh,n]
                    kernels::transpose(vh.data(), vht.data(), n, dh);
                    gemm_acc(gh.data(), vht.data(),
                             t.grad_buf(pn) + static_cast<int64_t>(h) * m * n, m, dh, n);
                }
                if (vn >= 0) {
                    // dv_h = p_h^T [n,m] * G_h [m,dh]
                    kernels::transpose(ph, pt.data(), m, n);
                    std::fill(tmp.begin(), tmp.end(), 0.0f);
                    kernels::gemm_nn(pt.data(), gh.data(), tmp.data(), n, m, dh);
                    unpack_cols_add(tmp.data(), n, d_model, h * dh, dh, t.grad_buf(vn));
                }
            }
        };
    }
    return res;
}

Tensor Tape::conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                    int padding, FlopBucket conv_bucket, FlopBucket other_bucket) {
    if (x.ndim() != 3 || w.ndim() != 4)
        throw ShapeError("conv2d expects x[C,H,W], w[Co,Ci,k,k]; got " + x.shape_str() +
                         ", " + w.shape_str());
    const int ci = x.dim(0), hh = x.dim(1), ww = x.dim(2);
    const int co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != ci) throw ShapeError("conv2d channel mismatch");
    if (w.dim(3) != k || k % 2 == 0) throw ConfigError("conv2d kernel must be square and odd");
    if (padding < 0) throw ConfigError("conv2d padding must be >= 0");
    if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
    if ((hh + 2 * padding - k) % stride != 0 || (ww + 2 * padding - k) % stride != 0)
        throw ConfigError("conv2d output dimension is not integral for H=" + std::to_string(hh) +
                          " W=" + std::to_string(ww) + " k=" + std::to_string(k) + " stride=" +
                          std::to_string(stride) + " padding=" + std::to_string(padding));
    const int oh = (hh + 2 * padding - k) / stride + 1;
    const int ow = (ww + 2 * padding - k) / stride + 1;
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != co))
        throw ShapeError("conv2d bias shape mismatch");

    std::vector<float> out(static_cast<size_t>(co) * oh * ow);
    const float* xd = x.data();
    const float* wd = w.data();
    for (int c = 0; c < co; ++c) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                float acc = bias.defined() ? bias.data()[c] : 0.0f;
                for (int ic = 0; ic < ci; ++ic) {
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride + ky - padding;
                        if (iy < 0 || iy >= hh) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride + kx - padding;
                            if (ix < 0 || ix >= ww) continue;
                            acc += xd[(static_cast<int64_t>(ic) * hh + iy) * ww + ix] *
                                   wd[((static_cast<int64_t>(c) * ci + ic) * k + ky) * k + kx];
                        }
                    }
                }
                out[(static_cast<size_t>(c) * oh + oy) * ow + ox] = acc;
            }
        }
    }
    count(conv_bucket, 2ll * co * ci * k * k * oh * ow);
    if (bias.defined()) count(other_bucket, static_cast<int64_t>(co) * oh * ow);

    const int xn = x.node_, wn = w.node_, bn = bias.defined() ? bias.node_ : -1;
    Tensor res = make({co, oh, ow}, std::move(out), {}, xn >= 0 || wn >= 0 || bn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [x, w, xn, wn, bn, ci, hh, ww, co, k, stride,
                                                  padding, oh, ow, self](Tape& t) {
            const float* g = t.grad_of(self);
            const float* xd = x.data();
            const float* wd = w.data();
            float* gx = xn >= 0 ? t.grad_buf(xn) : nullptr;
            float* gw = wn >= 0 ? t.grad_buf(wn) : nullptr;
            float* gb = bn >= 0 ? t.grad_buf(bn) : nullptr;
            for (int c = 0; c < co; ++c) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const float go = g[(static_cast<int64_t>(c) * oh + oy) * ow + ox];
                        if (gb) gb[c] += go;
                        if (!gx && !gw) continue;
                        for (int ic = 0; ic < ci; ++ic) {
                            for (int ky = 0; ky < k; ++ky) {
                                const int iy = oy * stride + ky - padding;
                                if (iy < 0 || iy >= hh) continue;
                                for (int kx = 0; kx < k; ++kx) {
                                    const int ix = ox * stride + kx - padding;
                                    if (ix < 0 || ix >= ww) continue;
                                    const int64_t xi =
                                        (static_cast<int64_t>(ic) * hh + iy) * ww + ix;
                                    const int64_t wi =
                                        ((static_cast<int64_t>(c) * ci + ic) * k + ky) * k + kx;
                                    if (gx) gx[xi] += go * wd[wi];
                                    if (gw) gw[wi] += go * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return res;
}

Tensor Tape::avg_pool(const Tensor& x, int factor, FlopBucket bucket) {
    if (x.ndim() != 3) throw ShapeError("avg_pool expects x[C,H,W], got " + x.shape_str());
    if (factor == 1) return x;
    const int c = x.dim(0), hh = x.dim(1), ww = x.dim(2);
    if (hh % factor != 0 || ww % factor != 0)
        throw ConfigError("avg_pool factor must divide spatial dims");
    const int oh = hh / factor, ow = ww / factor;
    std::vector<float> out(static_cast<size_t>(c) * oh * ow);
    const float inv = 1.0f / static_cast<float>(factor * factor);
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                float acc = 0.0f;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        acc += x.data()[(static_cast<int64_t>(ch) * hh + oy * factor + dy) * ww +
                                        ox * factor + dx];
                out[(static_cast<size_t>(ch) * oh + oy) * ow + ox] = acc * inv;
            }
    count(bucket, x.numel());
    const int xn = x.node_;
    Tensor res = make({c, oh, ow}, std::move(out), {}, xn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [xn, c, hh, ww, factor, oh, ow, inv,
                                                  self](Tape& t) {
            const float* g = t.grad_of(self);
            float* gx = t.grad_buf(xn);
            for (int ch = 0; ch < c; ++ch)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        const float go =
                            g[(static_cast<int64_t>(ch) * oh + oy) * ow + ox] * inv;
                        for (int dy = 0; dy < factor; ++dy)
                            for (int dx = 0; dx < factor; ++dx)
                                gx[(static_cast<int64_t>(ch) * hh + oy * factor + dy) * ww +
                                   ox * factor + dx] += go;
                    }
        };
    }
    return res;
}

Tensor Tape::global_avg_pool(const Tensor& x, FlopBucket bucket) {
    if (x.ndim() != 3) throw ShapeError("global_avg_pool expects x[C,H,W]");
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    std::vector<float> out(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        float acc = 0.0f;
        const float* p = x.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) acc += p[i];
        out[static_cast<size_t>(ch)] = acc / static_cast<float>(hw);
    }
    count(bucket, x.numel());
    const int xn = x.node_;
    Tensor res = make({c}, std::move(out), {}, xn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [xn, c, hw, self](Tape& t) {
            const float* g = t.grad_of(self);
            float* gx = t.grad_buf(xn);
            for (int ch = 0; ch < c; ++ch) {
                const float go = g[ch] / static_cast<float>(hw);
                for (int64_t i = 0; i < hw; ++i) gx[ch * hw + i] += go;
            }
        };
    }
    return res;
}

Tensor Tape::gather_rows(const Tensor& x, const std::vector<int>& rows) {
    if (x.ndim() != 2) throw ShapeError("gather_rows expects a 2-d tensor");
    const int n = x.dim(1);
    const int m = static_cast<int>(rows.size());
    std::vector<float> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        const int r = rows[static_cast<size_t>(i)];
        if (r < 0 || r >= x.dim(0)) throw ContractError("gather_rows index out of range");
        std::memcpy(out.data() + static_cast<int64_t>(i) * n,
                    x.data() + static_cast<int64_t>(r) * n, sizeof(float) * static_cast<size_t>(n));
    }
    const int xn = x.node_;
    Tensor res = make({m, n}, std::move(out), {}, xn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        auto rows_copy = rows;
        nodes_[static_cast<size_t>(self)].back = [rows_copy, xn, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            float* gx = t.grad_buf(xn);
            for (size_t i = 0; i < rows_copy.size(); ++i) {
                float* dst = gx + static_cast<int64_t>(rows_copy[i]) * n;
                const float* src = g + static_cast<int64_t>(i) * n;
                for (int j = 0; j < n; ++j) dst[j] += src[j];
            }
        };
    }
    return res;
}

Tensor Tape::scatter_rows(const Tensor& base, const std::vector<int>& rows, const Tensor& vals) {
    if (base.ndim() != 2 || vals.ndim() != 2 || base.dim(1) != vals.dim(1) ||
        vals.dim(0) != static_cast<int>(rows.size()))
        throw ShapeError("scatter_rows shape mismatch: " + base.shape_str() + " vs " +
                         vals.shape_str());
    const int n = base.dim(1);
    std::vector<float> out(base.vec());
    for (size_t i = 0; i < rows.size(); ++i) {
        const int r = rows[i];
        if (r < 0 || r >= base.dim(0)) throw ContractError("scatter_rows index out of range");
        std::memcpy(out.data() + static_cast<int64_t>(r) * n,
                    vals.data() + static_cast<int64_t>(i) * n,
                    sizeof(float) * static_cast<size_t>(n));
    }
    const int bn = base.node_, vn = vals.node_;
    Tensor res = make(base.shape(), std::move(out), {}, bn >= 0 || vn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        auto rows_copy = rows;
        const int m = base.dim(0);
        nodes_[static_cast<size_t>(self)].back = [rows_copy, bn, vn, m, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            if (vn >= 0) {
                float* gv = t.grad_buf(vn);
                for (size_t i = 0; i < rows_copy.size(); ++i) {
                    const float* src = g + static_cast<int64_t>(rows_copy[i]) * n;
                    float* dst = gv + static_cast<int64_t>(i) * n;
                    for (int j = 0; j < n; ++j) dst[j] += src[j];
                }
            }
            if (bn >= 0) {
                std::vector<uint8_t> replaced(static_cast<size_t>(m), 0);
                for (int r : rows_copy) replaced[static_cast<size_t>(r)] = 1;
                float* gb = t.grad_buf(bn);
                for (int r = 0; r < m; ++r) {
                    if (replaced[static_cast<size_t>(r)]) continue;
                    const float* src = g + static_cast<int64_t>(r) * n;
                    float* dst = gb + static_cast<int64_t>(r) * n;
                    for (int j = 0; j < n; ++j) dst[j] += src[j];
                }
            }
        };
    }
    return res;
}

Tensor Tape::row_lerp(const Tensor& a, const Tensor& b, const Tensor& tsel, FlopBucket bucket) {
    if (a.shape() != b.shape() || a.ndim() != 2 || tsel.ndim() != 1 ||
        tsel.dim(0) != a.dim(0))
        throw ShapeError("row_lerp shape mismatch: " + a.shape_str() + ", " + b.shape_str() +
                         ", " + tsel.shape_str());
    const int m = a.dim(0), n = a.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        const float ti = tsel.data()[i];
        const float* ar = a.data() + static_cast<int64_t>(i) * n;
        const float* br = b.data() + static_cast<int64_t>(i) * n;
        float* orow = out.data() + static_cast<int64_t>(i) * n;
        if (ti == 1.0f) {
            std::memcpy(orow, ar, sizeof(float) * static_cast<size_t>(n));
        } else if (ti == 0.0f) {
            std::memcpy(orow, br, sizeof(float) * static_cast<size_t>(n));
        } else {
            for (int j = 0; j < n; ++j) orow[j] = br[j] + ti * (ar[j] - br[j]);
        }
    }
    count(bucket, 3ll * m * n);
    const int an = a.node_, bn = b.node_, tn = tsel.node_;
    Tensor res = make({m, n}, std::move(out), {}, an >= 0 || bn >= 0 || tn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [a, b, tsel, an, bn, tn, m, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            for (int i = 0; i < m; ++i) {
                const float ti = tsel.data()[i];
                const float* grow = g + static_cast<int64_t>(i) * n;
                if (an >= 0) {
                    float* ga = t.grad_buf(an) + static_cast<int64_t>(i) * n;
                    for (int j = 0; j < n; ++j) ga[j] += grow[j] * ti;
                }
                if (bn >= 0) {
                    float* gb = t.grad_buf(bn) + static_cast<int64_t>(i) * n;
                    for (int j = 0; j < n; ++j) gb[j] += grow[j] * (1.0f - ti);
                }
                if (tn >= 0) {
                    const float* ar = a.data() + static_cast<int64_t>(i) * n;
                    const float* br = b.data() + static_cast<int64_t>(i) * n;
                    float acc = 0.0f;
                    for (int j = 0; j < n; ++j) acc += grow[j] * (ar[j] - br[j]);
                    t.grad_buf(tn)[i] += acc;
                }
            }
        };
    }
    return res;
}

Tensor Tape::sum(const Tensor& a, FlopBucket bucket) {
    float acc = 0.0f;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += a.data()[i];
    count(bucket, n);
    const int an = a.node_;
    Tensor res = make({1}, {acc}, {}, an >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [an, n, self](Tape& t) {
            const float g = t.grad_of(self)[0];
            float* ga = t.grad_buf(an);
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        };
    }
    return res;
}

Tensor Tape::mean(const Tensor& a, FlopBucket bucket) {
    float acc = 0.0f;
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) acc += a.data()[i];
    count(bucket, n + 1);
    const int an = a.node_;
    Tensor res = make({1}, {acc / static_cast<float>(n)}, {}, an >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [an, n, self](Tape& t) {
            const float g = t.grad_of(self)[0] / static_cast<float>(n);
            float* ga = t.grad_buf(an);
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        };
    }
    return res;
}

Tensor Tape::mse(const Tensor& a, const Tensor& b, FlopBucket bucket) {
    if (a.shape() != b.shape())
        throw ShapeError("mse shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t n = a.numel();
    float acc = 0.0f;
    for (int64_t i = 0; i < n; ++i) {
        const float d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    count(bucket, 3 * n);
    const int an = a.node_, bn = b.node_;
    Tensor res = make({1}, {acc / static_cast<float>(n)}, {}, an >= 0 || bn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [a, b, an, bn, n, self](Tape& t) {
            const float g = t.grad_of(self)[0] * 2.0f / static_cast<float>(n);
            for (int64_t i = 0; i < n; ++i) {
                const float d = g * (a.data()[i] - b.data()[i]);
                if (an >= 0) t.grad_buf(an)[i] += d;
                if (bn >= 0) t.grad_buf(bn)[i] -= d;
            }
        };
    }
    return res;
}

Tensor Tape::cross_entropy(const Tensor& logits, int label, FlopBucket bucket) {
    const int64_t n = logits.numel();
    if (label < 0 || label >= n) throw ContractError("cross_entropy label out of range");
    const float* x = logits.data();
    float mx = x[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
    float denom = 0.0f;
    for (int64_t i = 0; i < n; ++i) denom += std::exp(x[i] - mx);
    const float loss = std::log(denom) - (x[label] - mx);
    count(bucket, 4 * n);
    const int ln = logits.node_;
    Tensor res = make({1}, {loss}, {}, ln >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [logits, ln, label, n, mx, denom, self](Tape& t) {
            const float g = t.grad_of(self)[0];
            float* gl = t.grad_buf(ln);
            const float* x = logits.data();
            for (int64_t i = 0; i < n; ++i) {
                const float p = std::exp(x[i] - mx) / denom;
                gl[i] += g * (p - (i == label ? 1.0f : 0.0f));
            }
        };
    }
    return res;
}

Tensor Tape::pick(const Tensor& x, int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x.numel())
        throw ContractError("pick index out of range");
    const int xn = x.node_;
    Tensor res = make({1}, {x.data()[flat_index]}, {}, xn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [xn, flat_index, self](Tape& t) {
            t.grad_buf(xn)[flat_index] += t.grad_of(self)[0];
        };
    }
    return res;
}

Tensor Tape::sub_scalar(const Tensor& a, const Tensor& s, FlopBucket bucket) {
    if (s.numel() != 1) throw ShapeError("sub_scalar expects scalar subtrahend");
    const int64_t n = a.numel();
    const float sv = s.data()[0];
    std::vector<float> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) out[i] = a.data()[i] - sv;
    count(bucket, n);
    const int an = a.node_, sn = s.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0 || sn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [an, sn, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            if (an >= 0) kernels::axpy(1.0f, g, t.grad_buf(an), n);
            if (sn >= 0) {
                float acc = 0.0f;
                for (int64_t i = 0; i < n; ++i) acc += g[i];
                t.grad_buf(sn)[0] -= acc;
            }
        };
    }
    return res;
}

Tensor Tape::mul_scalar(const Tensor& a, const Tensor& s, FlopBucket bucket) {
    if (s.numel() != 1) throw ShapeError("mul_scalar expects a scalar multiplier");
    const int64_t n = a.numel();
    const float sv = s.data()[0];
    std::vector<float> out(static_cast<size_t>(n));
    kernels::scale(a.data(), sv, out.data(), n);
    count(bucket, n);
    const int an = a.node_, sn = s.node_;
    Tensor res = make(a.shape(), std::move(out), {}, an >= 0 || sn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        nodes_[static_cast<size_t>(self)].back = [a, an, sn, sv, n, self](Tape& t) {
            const float* g = t.grad_of(self);
            if (an >= 0) kernels::axpy(sv, g, t.grad_buf(an), n);
            if (sn >= 0) {
                float acc = 0.0f;
                for (int64_t i = 0; i < n; ++i) acc += g[i] * a.data()[i];
                t.grad_buf(sn)[0] += acc;
            }
        };
    }
    return res;
}

Tensor Tape::ste(const Tensor& soft, const Tensor& hard_values) {
    if (soft.shape() != hard_values.shape())
        throw ShapeError("ste shape mismatch: " + soft.shape_str() + " vs " +
                         hard_values.shape_str());
    const int sn = soft.node_;
    Tensor res = make(soft.shape(), hard_values.vec(), {}, sn >= 0);
    if (res.node_ >= 0) {
        const int self = res.node_;
        const int64_t n = soft.numel();
        nodes_[static_cast<size_t>(self)].back = [sn, n, self](Tape& t) {
            kernels::axpy(1.0f, t.grad_of(self), t.grad_buf(sn), n);
        };
    }
    return res;
}

Tensor Tape::reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape numel mismatch: " + x.shape_str());
    Tensor out = x;
    out.shape_ = std::move(shape);
    return out;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        float eps) {
    if (eps <= 0.0f) throw ContractError("finite_diff_grad requires eps > 0");
    Tensor g(x.shape());
    Tensor xp(x.shape(), x.vec());
    for (int64_t i = 0; i < x.numel(); ++i) {
        const float orig = x.data()[i];
        const float hi = orig + eps;
        const float lo = orig - eps;
        xp.data()[i] = hi;
        const double fp = f(xp);
        xp.data()[i] = lo;
        const double fm = f(xp);
        xp.data()[i] = orig;
        g.data()[i] = static_cast<float>((fp - fm) /
                                         (static_cast<double>(hi) - static_cast<double>(lo)));
    }
    return g;
}

}  // namespace atc
