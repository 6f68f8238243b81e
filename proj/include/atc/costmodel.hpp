#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atc/flops.hpp"
#include "atc/model.hpp"
#include "atc/policy.hpp"

namespace atc {

// Closed-form per-layer compute costs. Unit convention: transformer terms
// count one fused multiply-add per unit (matching the instrumented matmul
// counter); convolution terms count multiply and add separately (factor 2),
// matching the conv counter. The mix is inherited from the respective
// closed forms and kept consistent on both the analytic and measured side.

// 4*N*D^2 + 2*N^2*D + 2*N*D*M, per layer.
int64_t flops_baseline(int n_tokens, int dim, int ffn_dim);

int64_t n_active(int n_tokens, double rho);  // N - floor(N*rho)

// 4*Na*D^2 + 2*Na*N*D + 2*Na*D*M with Na = n_active, per layer.
int64_t flops_lac(int n_tokens, double rho, int dim, int ffn_dim);

// One conv layer's closed-form cost: 2*Cout*Cin*k^2*Hout*Wout.
int64_t conv_flops(int c_in, int c_out, int k, int h_out, int w_out);

// Conv spec of the policy nets as built (selector + predictor), for the
// closed-form policy cost.
struct PolicyConvSpec {
    struct Conv {
        int c_in, c_out, k, h_out, w_out;
    };
    std::vector<Conv> convs;
    int64_t flow_flops = 0;

    int64_t total() const;
};

PolicyConvSpec policy_cost_spec(const ModelConfig& mcfg, const PolicyConfig& pcfg);

// Closed-form policy overhead per frame: conv terms + flow estimator.
int64_t flops_policy(const ModelConfig& mcfg, const PolicyConfig& pcfg);

// L*(C_base - C_lac) - C_policy.
int64_t flops_delta(const ModelConfig& mcfg, const PolicyConfig& pcfg, double rho);

// Total instrumented FLOPs of a counted execution; counting must have been
// enabled (null counter is a contract error).
int64_t instrumented_count(const FlopCounter* counter);

struct FlopsReport {
    int n_tokens = 0, dim = 0, ffn_dim = 0, layers = 0, height = 0, width = 0, channels = 0;
    double rho = 0.0;
    int n_act = 0;
    int64_t c_base = 0, c_lac = 0, c_policy = 0;  // per layer / per layer / per frame
    int64_t delta_layer = 0, delta_total = 0;
    // instrumented, one step
    int64_t measured_proj = 0, measured_attn = 0, measured_ffn = 0, measured_layer_other = 0;
    int64_t measured_step = 0;  // proj+attn+ffn+layer_other
    int64_t measured_readout = 0, measured_embed = 0, measured_head = 0;
    int64_t measured_policy_conv = 0, measured_policy_other = 0, measured_flow = 0;
    int64_t measured_total = 0;
    bool has_measured = false;
};

FlopsReport build_flops_report(const ModelConfig& mcfg, const PolicyConfig& pcfg, double rho,
                               const FlopCounter* measured);

std::string flops_csv_header();
std::string flops_csv_row(const FlopsReport& r);
std::string flops_table(const FlopsReport& r);  // printable itemization

}  // namespace atc
