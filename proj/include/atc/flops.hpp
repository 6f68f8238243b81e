#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace atc {

// Cost attribution for instrumented counting. Matmul-like operations record
// one unit per fused multiply-add; convolutions record two (multiply and
// add counted separately); pointwise work records one unit per scalar op.
// The split below mirrors the analytic per-layer cost model: the three
// *_matmul buckets cover exactly the terms of the closed forms, layer_other
// holds the pointwise remainder of a layer, and everything attributable to
// the readout row, the patch embedding, the action head or the policy nets
// is itemized separately.
enum class FlopBucket {
    embed,        // patch-embedding matmul + bias
    proj_matmul,  // Q/K/V/output projections, visual rows
    attn_matmul,  // attention scores + mixing, visual queries
    ffn_matmul,   // FFN linears, visual rows
    layer_other,  // softmax, norms, rotary, residuals, activations, scaling
    readout,      // all compute for the readout row
    head,         // action head
    policy_conv,  // conv terms of selector/predictor
    policy_other, // pool / activation / linear-head parts of the policy nets
    flow,         // SAD block matching
    other,
    count_
};

inline const char* flop_bucket_name(FlopBucket b) {
    static const char* names[] = {"embed",       "proj_matmul",  "attn_matmul",
                                  "ffn_matmul",  "layer_other",  "readout",
                                  "head",        "policy_conv",  "policy_other",
                                  "flow",        "other"};
    return names[static_cast<size_t>(b)];
}

struct FlopCounter {
    std::array<int64_t, static_cast<size_t>(FlopBucket::count_)> buckets{};

    void add(FlopBucket b, int64_t flops) { buckets[static_cast<size_t>(b)] += flops; }
    int64_t get(FlopBucket b) const { return buckets[static_cast<size_t>(b)]; }
    void reset() { buckets.fill(0); }

    int64_t total() const {
        int64_t t = 0;
        for (auto v : buckets) t += v;
        return t;
    }
    // The three matmul buckets of the per-layer closed forms.
    int64_t transformer_core() const {
        return get(FlopBucket::proj_matmul) + get(FlopBucket::attn_matmul) +
               get(FlopBucket::ffn_matmul);
    }
    // Core plus the pointwise per-layer remainder; compared against the
    // closed forms with 5% headroom.
    int64_t transformer_step() const { return transformer_core() + get(FlopBucket::layer_other); }
    int64_t policy_total() const {
        return get(FlopBucket::policy_conv) + get(FlopBucket::policy_other) +
               get(FlopBucket::flow);
    }
};

}  // namespace atc
