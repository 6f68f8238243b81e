#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atc/optim.hpp"
#include "atc/scene.hpp"
#include "atc/tensor.hpp"

namespace atc {

struct ModelConfig {
    int height = 32, width = 32;  // frame dims
    int patch = 4;                // pixels per token side
    int dim = 64;                 // embedding dim D
    int ffn_dim = 256;            // FFN intermediate M
    int layers = 2;               // L
    int heads = 4;
    int vocab = 64;               // action classes (= scene grid^2)

    int tokens() const { return (height / patch) * (width / patch); }  // N
    void validate() const;
};

// Per-layer key/value store with position-preserving partial updates.
// Values are detached snapshots; position ids are purely spatial and never
// change, so preserved rows keep their original rotary encoding.
struct LayerKVCache {
    std::vector<Tensor> k, v;        // per layer, [N, D]
    std::vector<int> positions;      // spatial token ids, 0..N-1
    std::vector<int> last_computed;  // per token, timestep of last recompute
    int step = -1;                   // timestep of last update, -1 = unprimed

    bool primed() const { return step >= 0; }
};

struct StepOutput {
    Tensor logits;                      // [vocab]; on tape when recording
    std::vector<float> attention_sums;  // readout->visual attention, head/layer
                                        // averaged; sums to 1 over tokens
    std::vector<float> saliency;        // min-max normalized to [0,1]
    int n_act = 0;                      // recomputed-token count
};

// Head/layer-averaged readout attention, min-max normalized into [0,1].
// A degenerate all-equal map normalizes to a uniform 0.5.
std::vector<float> extract_attention_saliency(const std::vector<float>& attention_sums);

// Attention output of a single query over one cache layer's (K,V) rows taken
// in the order given by `perm` (identity = stored order). Permuting rows
// jointly must not change the result beyond summation rounding.
Tensor permute_kv_probe(const LayerKVCache& cache, int layer, const std::vector<int>& perm,
                        const Tensor& query, int heads);

// Toy frame-stream backbone: patch tokenizer, pre-norm attention blocks with
// spatial rotary positions and a partially updatable KV cache, one
// always-recomputed readout token (query-only: no other token attends to
// it), and a grid-cell action head.
class Backbone {
  public:
    Backbone(ModelConfig config, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamSet& params() { return params_; }
    const ParamSet& params() const { return params_; }
    uint64_t weight_hash() const { return params_.hash(); }

    // Patch embeddings for the given token rows (row-major grid order).
    Tensor embed_rows(Tape& tape, const Frame& frame, const std::vector<int>& rows) const;

    LayerKVCache make_cache() const;

    // Recomputes every token; (re)writes the whole cache when given.
    StepOutput full_step(Tape& tape, const Frame& frame, LayerKVCache* cache) const;

    // Recomputes rows with mask=1, reuses cached K/V for the rest. The cache
    // must be primed by a prior full_step.
    StepOutput partial_step(Tape& tape, const Frame& frame, const std::vector<uint8_t>& mask,
                            LayerKVCache& cache) const;

    // Training path: forward values equal partial_step with the hard mask;
    // gradients flow through `mask_soft` (a straight-through tensor whose
    // forward values are the hard mask). Computes all rows, then blends
    // fresh K/V against the cache per layer.
    StepOutput blended_step(Tape& tape, const Frame& frame, const Tensor& mask_soft,
                            const std::vector<uint8_t>& hard_mask, LayerKVCache& cache) const;

    void save(const std::string& path) const;
    static Backbone load(const std::string& path);

  private:
    enum class Mode { full, partial, blended };
    StepOutput run_step(Tape& tape, const Frame& frame, const std::vector<uint8_t>& mask,
                        LayerKVCache* cache, const Tensor* mask_soft, Mode mode) const;

    ModelConfig cfg_;
    ParamSet params_;
};

}  // namespace atc
