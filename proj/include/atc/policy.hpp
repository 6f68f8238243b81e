#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atc/model.hpp"
#include "atc/optim.hpp"
#include "atc/rng.hpp"
#include "atc/scene.hpp"
#include "atc/tensor.hpp"

namespace atc {

struct PolicyConfig {
    std::vector<float> ratios{0.0f, 0.2f, 0.4f, 0.6f, 0.8f};  // candidate cache ratios, ascending
    float tau_start = 2.0f;  // gumbel temperature, annealed linearly in stage II
    float tau_end = 0.5f;
    float tau_s = 0.1f;      // soft-mask sigmoid temperature
    float p_recover = 0.05f; // per-token recovery probability at inference
    int channels = 8;        // conv width of both policy nets
    float flow_norm = 2.0f;  // flow normalization constant (max sprite speed)
    int flow_block = 4;
    int flow_radius = 2;

    int ratio_count() const { return static_cast<int>(ratios.size()); }
    void validate() const;
};

// Hard/soft cache decision for one step. hard[i]=1 means recompute token i,
// 0 means reuse its cached K/V; soft is the differentiable relaxation
// (forward-hard selection happens through an STE blend downstream).
struct CacheMask {
    std::vector<uint8_t> hard;
    Tensor soft;        // [N], on tape when built from tape scores
    float theta = 0.0f; // threshold used by the sigmoid (+-inf at k=0/N)
    int cached = 0;     // k_t, number of zeros in hard
};

struct RatioDecision {
    Tensor soft_probs;              // p-tilde [C], on tape
    Tensor hard_ste;                // one-hot forward, gradient to soft_probs
    std::vector<float> one_hot;
    int index = 0;
    float ratio = 0.0f;
};

// Token saliency scorer: pooled motion-aware input through a small conv
// stack to one score per token in [0,1].
class Selector {
  public:
    Selector(const PolicyConfig& pcfg, const ModelConfig& mcfg, uint64_t seed);
    // v: [5, H, W] motion-aware input; returns [N] scores.
    Tensor forward(Tape& tape, const Tensor& v) const;
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

  private:
    friend struct PolicyBundle;
    ParamSet params_;
    int height_, width_, patch_, channels_;
};

// Scene-level cache-ratio scorer: conv + global average pool + linear head
// to one logit per candidate ratio.
class RatioPredictor {
  public:
    RatioPredictor(const PolicyConfig& pcfg, const ModelConfig& mcfg, uint64_t seed);
    Tensor forward(Tape& tape, const Tensor& v) const;  // [C] logits
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }

  private:
    friend struct PolicyBundle;
    ParamSet params_;
    int channels_, classes_;
};

// Gumbel-softmax with straight-through hard selection. `noise` == nullptr
// disables sampling (deterministic inference); ties pick the lowest index.
RatioDecision gumbel_softmax(Tape& tape, const Tensor& logits, float tau,
                             const std::vector<float>& ratios, Rng* noise);

// Hard top-k cache mask plus steep-sigmoid soft mask at threshold theta_k
// (midpoint of the k-th and (k+1)-th smallest scores; +-inf at k=0/N).
// Ties cache the lower token index first.
CacheMask soft_mask(Tape& tape, const Tensor& scores, int k, float tau_s);

// Expected soft mask under p-tilde: sum_j p_j * sigma((s - theta_{k_j})/tau_s).
// Reduces to soft_mask's relaxation when p is one-hot; this is the path that
// carries task gradients into the ratio predictor.
Tensor soft_mask_mixture(Tape& tape, const Tensor& scores, const Tensor& soft_probs,
                         const std::vector<float>& ratios, int n_tokens, float tau_s);

// Deterministic inference mask: cache the k_t = floor(N*r) lowest scores.
std::vector<uint8_t> select_cache_mask(const std::vector<float>& scores, float ratio);

// Each cached row flips to recompute independently with probability p.
std::vector<uint8_t> apply_stochastic_recovery(std::vector<uint8_t> mask, float p_recover,
                                               Rng& rng);

// Flow-magnitude heuristic baseline: cache the k_t lowest mean-|flow| tokens.
std::vector<uint8_t> rule_based_mask(const MotionField& flow, float ratio, int patch);

// Selector + predictor + config, sharing one checkpoint container.
struct PolicyBundle {
    PolicyConfig cfg;
    Selector selector;
    RatioPredictor predictor;

    PolicyBundle(const PolicyConfig& pcfg, const ModelConfig& mcfg, uint64_t seed);
    void save(const std::string& path) const;
    static PolicyBundle load(const std::string& path, const ModelConfig& mcfg);
    uint64_t hash() const { return selector.params().hash() ^ (predictor.params().hash() * 3); }
};

}  // namespace atc
