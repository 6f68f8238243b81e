#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "atc/flops.hpp"

namespace atc {

// Dense float32 tensor, row-major. Values are shared and treated as
// immutable once an op has produced them; parameter updates happen between
// tapes.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<float> data);

    static Tensor scalar_of(float v) { return Tensor({1}, {v}); }
    static Tensor ones(std::vector<int> shape);

    bool defined() const { return static_cast<bool>(v_); }
    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const;
    float* data() { return v_->data(); }
    const float* data() const { return v_->data(); }
    std::vector<float>& vec() { return *v_; }
    const std::vector<float>& vec() const { return *v_; }
    float item() const;  // numel()==1
    int node() const { return node_; }

    std::string shape_str() const;

  private:
    friend class Tape;
    std::shared_ptr<std::vector<float>> v_;
    std::vector<int> shape_;
    int node_ = -1;
};

// Reverse-mode tape. Ops append nodes in execution order; backward() replays
// them in reverse, which is a valid topological order by construction.
// A tape built with grads=false skips node creation entirely (inference
// mode) but still feeds the attached FlopCounter.
class Tape {
  public:
    explicit Tape(bool grads = true, FlopCounter* flops = nullptr)
        : grads_(grads), flops_(flops) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return grads_; }
    FlopCounter* flops() const { return flops_; }

    // Registers a differentiable leaf. Idempotent per underlying buffer, so
    // a weight bound twice accumulates one gradient.
    Tensor param(const Tensor& t);
    // Wraps values as a non-differentiable input.
    static Tensor constant(Tensor t) { t.node_ = -1; return t; }

    void backward(const Tensor& loss);
    // Gradient of the last backward() w.r.t. t (leaf or intermediate);
    // zeros if the loss did not reach it.
    std::vector<float> grad(const Tensor& t) const;

    // ---- ops ----
    Tensor matmul(const Tensor& a, const Tensor& b, FlopBucket bucket = FlopBucket::other);
    Tensor add(const Tensor& a, const Tensor& b, FlopBucket bucket = FlopBucket::other);
    Tensor sub(const Tensor& a, const Tensor& b, FlopBucket bucket = FlopBucket::other);
    Tensor mul(const Tensor& a, const Tensor& b, FlopBucket bucket = FlopBucket::other);
    Tensor scale(const Tensor& a, float s, FlopBucket bucket = FlopBucket::other);
    Tensor add_rowvec(const Tensor& a, const Tensor& v, FlopBucket bucket = FlopBucket::other);
    Tensor relu(const Tensor& a, FlopBucket bucket = FlopBucket::other);
    Tensor sigmoid(const Tensor& a, FlopBucket bucket = FlopBucket::other);
    Tensor softmax(const Tensor& a, int axis, FlopBucket bucket = FlopBucket::other);
    Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps = 1e-6f,
                   FlopBucket bucket = FlopBucket::other);
    Tensor rotary(const Tensor& x, const std::vector<int>& positions, int heads,
                  FlopBucket bucket = FlopBucket::other);
    // Scores [heads, m, n] from q [m, D], k [n, D].
    Tensor attention_scores(const Tensor& q, const Tensor& k, int heads,
                            FlopBucket bucket = FlopBucket::other);
    // Mix [m, D] from probs [heads, m, n], v [n, D].
    Tensor attention_mix(const Tensor& probs, const Tensor& v, int heads,
                         FlopBucket bucket = FlopBucket::other);
    Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride,
                  int padding, FlopBucket conv_bucket = FlopBucket::other,
                  FlopBucket other_bucket = FlopBucket::other);
    Tensor avg_pool(const Tensor& x, int factor, FlopBucket bucket = FlopBucket::other);
    Tensor global_avg_pool(const Tensor& x, FlopBucket bucket = FlopBucket::other);
    Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);
    // Copy of `base` with base[rows[i]] replaced by vals[i]; gradients flow
    // to `vals` rows (and to untouched `base` rows when base is on tape).
    Tensor scatter_rows(const Tensor& base, const std::vector<int>& rows, const Tensor& vals);
    // Per-row select/blend: out_i = b_i + t_i * (a_i - b_i); t_i of exactly
    // 0 or 1 short-circuits to a bitwise copy of the selected row.
    Tensor row_lerp(const Tensor& a, const Tensor& b, const Tensor& t,
                    FlopBucket bucket = FlopBucket::other);
    Tensor sum(const Tensor& a, FlopBucket bucket = FlopBucket::other);
    Tensor mean(const Tensor& a, FlopBucket bucket = FlopBucket::other);
    Tensor mse(const Tensor& a, const Tensor& b, FlopBucket bucket = FlopBucket::other);
    Tensor cross_entropy(const Tensor& logits, int label, FlopBucket bucket = FlopBucket::other);
    Tensor pick(const Tensor& x, int64_t flat_index);
    // Broadcast subtract: out = a - s, s scalar tensor.
    Tensor sub_scalar(const Tensor& a, const Tensor& s, FlopBucket bucket = FlopBucket::other);
    // Broadcast multiply: out = a * s, s scalar tensor.
    Tensor mul_scalar(const Tensor& a, const Tensor& s, FlopBucket bucket = FlopBucket::other);
    // Straight-through: forward values are `hard`, gradient passes to `soft`.
    Tensor ste(const Tensor& soft, const Tensor& hard_values);
    Tensor reshape(const Tensor& x, std::vector<int> shape);

  private:
    struct Node {
        int64_t numel = 0;
        std::vector<float> grad;          // allocated lazily during backward
        std::function<void(Tape&)> back;  // empty for leaves
    };

    Tensor make(std::vector<int> shape, std::vector<float> data,
                std::function<void(Tape&)> back, bool any_input_on_tape);
    float* grad_buf(int node);
    const float* grad_of(int node) const;  // nullptr if untouched
    void count(FlopBucket b, int64_t f) {
        if (flops_) flops_->add(b, f);
    }

    bool grads_;
    FlopCounter* flops_;
    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaves_;
};

// Central finite difference of a scalar function, the gradient oracle used
// in tests. The denominator is the measured float32 perturbation, not
// 2*eps, which removes the representation error of x +- eps.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        float eps = 1e-3f);

}  // namespace atc
