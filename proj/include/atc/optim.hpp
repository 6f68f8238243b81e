#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "atc/error.hpp"
#include "atc/rng.hpp"
#include "atc/tensor.hpp"

namespace atc {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

struct AdamState {
    std::vector<float> m, v;
    int64_t step = 0;
};

// Bias-corrected Adam update, in place. NaN/inf gradients abort training
// with the offending parameter named.
inline void adam_step(const std::string& name, Tensor& param, const std::vector<float>& grad,
                      AdamState& st, const AdamConfig& cfg) {
    const int64_t n = param.numel();
    if (static_cast<int64_t>(grad.size()) != n)
        throw ShapeError("adam_step gradient size mismatch for " + name);
    if (st.m.empty()) {
        st.m.assign(static_cast<size_t>(n), 0.0f);
        st.v.assign(static_cast<size_t>(n), 0.0f);
    }
    for (int64_t i = 0; i < n; ++i)
        if (!std::isfinite(grad[static_cast<size_t>(i)]))
            throw TrainError("non-finite gradient for parameter " + name);
    st.step += 1;
    const float c1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(st.step));
    const float c2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(st.step));
    float* p = param.data();
    for (int64_t i = 0; i < n; ++i) {
        const float g = grad[static_cast<size_t>(i)];
        st.m[static_cast<size_t>(i)] = cfg.beta1 * st.m[static_cast<size_t>(i)] +
                                       (1.0f - cfg.beta1) * g;
        st.v[static_cast<size_t>(i)] = cfg.beta2 * st.v[static_cast<size_t>(i)] +
                                       (1.0f - cfg.beta2) * g * g;
        const float mhat = st.m[static_cast<size_t>(i)] / c1;
        const float vhat = st.v[static_cast<size_t>(i)] / c2;
        p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

struct Param {
    std::string name;
    Tensor value;
    AdamState opt;
};

// Named parameter collection owned by a module; the unit for checkpoints,
// freeze hashes and optimizer sweeps.
class ParamSet {
  public:
    Tensor& add(std::string name, std::vector<int> shape) {
        params_.push_back(Param{std::move(name), Tensor(std::move(shape)), {}});
        return params_.back().value;
    }
    // Uniform(-lim, lim) with lim from fan-in/fan-out; each parameter draws
    // from its own stream keyed by name so layouts are order-independent.
    Tensor& add_xavier(std::string name, std::vector<int> shape, int fan_in, int fan_out,
                       Rng& rng) {
        Tensor& t = add(std::move(name), std::move(shape));
        const float lim = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
        Rng stream = rng.fork(fnv1a(params_.back().name.data(), params_.back().name.size()));
        for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = stream.uniform(-lim, lim);
        return t;
    }

    Param& find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return p;
        throw ContractError("unknown parameter " + name);
    }
    std::vector<Param>& all() { return params_; }
    const std::vector<Param>& all() const { return params_; }

    int64_t count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    uint64_t hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : params_) {
            h = fnv1a(p.name.data(), p.name.size(), h);
            h = fnv1a(p.value.data(), sizeof(float) * static_cast<size_t>(p.value.numel()), h);
        }
        return h;
    }

    // One optimizer step over every parameter from tape gradients.
    void apply_grads(Tape& tape, const AdamConfig& cfg, float grad_scale = 1.0f) {
        for (auto& p : params_) {
            std::vector<float> g = tape.grad(p.value);
            if (grad_scale != 1.0f)
                for (auto& v : g) v *= grad_scale;
            adam_step(p.name, p.value, g, p.opt, cfg);
        }
    }

  private:
    std::vector<Param> params_;
};

}  // namespace atc
