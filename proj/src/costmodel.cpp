#include "atc/costmodel.hpp"

#include <cmath>
#include <sstream>

#include "atc/error.hpp"
#include "atc/flow.hpp"

namespace atc {

int64_t flops_baseline(int n, int d, int m) {
    const int64_t nn = n, dd = d, mm = m;
    return 4 * nn * dd * dd + 2 * nn * nn * dd + 2 * nn * dd * mm;
}

int64_t n_active(int n, double rho) {
    return n - static_cast<int64_t>(std::floor(static_cast<double>(n) * rho));
}

int64_t flops_lac(int n, double rho, int d, int m) {
    const int64_t na = n_active(n, rho), nn = n, dd = d, mm = m;
    return 4 * na * dd * dd + 2 * na * nn * dd + 2 * na * dd * mm;
}

int64_t conv_flops(int c_in, int c_out, int k, int h_out, int w_out) {
    return 2ll * c_out * c_in * k * k * h_out * w_out;
}

int64_t PolicyConvSpec::total() const {
    int64_t t = flow_flops;
    for (const auto& c : convs) t += conv_flops(c.c_in, c.c_out, c.k, c.h_out, c.w_out);
    return t;
}

PolicyConvSpec policy_cost_spec(const ModelConfig& mcfg, const PolicyConfig& pcfg) {
    PolicyConvSpec spec;
    const int h2 = mcfg.height / 2, w2 = mcfg.width / 2;
    const int h4 = mcfg.height / 4, w4 = mcfg.width / 4;
    const int c = pcfg.channels;
    // selector: pool2 -> conv3x3(5->c) -> pool2 -> conv3x3(c->c) -> conv1x1(c->1)
    spec.convs.push_back({5, c, 3, h2, w2});
    spec.convs.push_back({c, c, 3, h4, w4});
    spec.convs.push_back({c, 1, 1, h4, w4});
    // predictor: pool2 -> conv3x3(5->c) -> GAP -> linear
    spec.convs.push_back({5, c, 3, h2, w2});
    spec.flow_flops =
        flow_sad_flops(mcfg.height, mcfg.width, pcfg.flow_block, pcfg.flow_radius);
    return spec;
}

int64_t flops_policy(const ModelConfig& mcfg, const PolicyConfig& pcfg) {
    return policy_cost_spec(mcfg, pcfg).total();
}

int64_t flops_delta(const ModelConfig& mcfg, const PolicyConfig& pcfg, double rho) {
    const int n = mcfg.tokens();
    const int64_t per_layer = flops_baseline(n, mcfg.dim, mcfg.ffn_dim) -
                              flops_lac(n, rho, mcfg.dim, mcfg.ffn_dim);
    return mcfg.layers * per_layer - flops_policy(mcfg, pcfg);
}

int64_t instrumented_count(const FlopCounter* counter) {
    if (!counter) throw ContractError("instrumented_count: counting was not enabled");
    return counter->total();
}

FlopsReport build_flops_report(const ModelConfig& mcfg, const PolicyConfig& pcfg, double rho,
                               const FlopCounter* measured) {
    FlopsReport r;
    r.n_tokens = mcfg.tokens();
    r.dim = mcfg.dim;
    r.ffn_dim = mcfg.ffn_dim;
    r.layers = mcfg.layers;
    r.height = mcfg.height;
    r.width = mcfg.width;
    r.channels = pcfg.channels;
    r.rho = rho;
    r.n_act = static_cast<int>(n_active(r.n_tokens, rho));
    r.c_base = flops_baseline(r.n_tokens, r.dim, r.ffn_dim);
    r.c_lac = flops_lac(r.n_tokens, rho, r.dim, r.ffn_dim);
    r.c_policy = flops_policy(mcfg, pcfg);
    r.delta_layer = r.c_base - r.c_lac;
    r.delta_total = mcfg.layers * r.delta_layer - r.c_policy;
    if (measured) {
        r.has_measured = true;
        r.measured_proj = measured->get(FlopBucket::proj_matmul);
        r.measured_attn = measured->get(FlopBucket::attn_matmul);
        r.measured_ffn = measured->get(FlopBucket::ffn_matmul);
        r.measured_layer_other = measured->get(FlopBucket::layer_other);
        r.measured_step = measured->transformer_step();
        r.measured_readout = measured->get(FlopBucket::readout);
        r.measured_embed = measured->get(FlopBucket::embed);
        r.measured_head = measured->get(FlopBucket::head);
        r.measured_policy_conv = measured->get(FlopBucket::policy_conv);
        r.measured_policy_other = measured->get(FlopBucket::policy_other);
        r.measured_flow = measured->get(FlopBucket::flow);
        r.measured_total = measured->total();
    }
    return r;
}

std::string flops_csv_header() {
    return "n_tokens,dim,ffn_dim,layers,height,width,channels,rho,n_act,"
           "c_base,c_lac,c_policy,delta_layer,delta_total,"
           "measured_proj,measured_attn,measured_ffn,measured_layer_other,measured_step,"
           "measured_readout,measured_embed,measured_head,"
           "measured_policy_conv,measured_policy_other,measured_flow,measured_total";
}

std::string flops_csv_row(const FlopsReport& r) {
    std::ostringstream os;
    os << r.n_tokens << ',' << r.dim << ',' << r.ffn_dim << ',' << r.layers << ',' << r.height
       << ',' << r.width << ',' << r.channels << ',' << r.rho << ',' << r.n_act << ','
       << r.c_base << ',' << r.c_lac << ',' << r.c_policy << ',' << r.delta_layer << ','
       << r.delta_total << ',' << r.measured_proj << ',' << r.measured_attn << ','
       << r.measured_ffn << ',' << r.measured_layer_other << ',' << r.measured_step << ','
       << r.measured_readout << ',' << r.measured_embed << ',' << r.measured_head << ','
       << r.measured_policy_conv << ',' << r.measured_policy_other << ',' << r.measured_flow
       << ',' << r.measured_total;
    return os.str();
}

std::string flops_table(const FlopsReport& r) {
    std::ostringstream os;
    os << "dims: N=" << r.n_tokens << " D=" << r.dim << " M=" << r.ffn_dim << " L=" << r.layers
       << " HxW=" << r.height << "x" << r.width << " rho=" << r.rho << " N_act=" << r.n_act
       << "\n";
    os << "closed form (per layer):\n";
    os << "  C_base        " << r.c_base << "\n";
    os << "  C_lac         " << r.c_lac << "\n";
    os << "  C_policy      " << r.c_policy << " (per frame)\n";
    os << "  dFLOPs/layer  " << r.delta_layer << "\n";
    os << "  dFLOPs total  " << r.delta_total << "\n";
    if (r.has_measured) {
        os << "instrumented (one step):\n";
        os << "  proj matmul   " << r.measured_proj << "\n";
        os << "  attn matmul   " << r.measured_attn << "\n";
        os << "  ffn matmul    " << r.measured_ffn << "\n";
        os << "  layer other   " << r.measured_layer_other << "\n";
        os << "  step total    " << r.measured_step << " (vs L*C_lac = "
           << r.layers * r.c_lac << ")\n";
        os << "  readout row   " << r.measured_readout << "\n";
        os << "  embed         " << r.measured_embed << "\n";
        os << "  head          " << r.measured_head << "\n";
        os << "  policy conv   " << r.measured_policy_conv << "\n";
        os << "  policy other  " << r.measured_policy_other << "\n";
        os << "  flow sad      " << r.measured_flow << "\n";
        os << "  grand total   " << r.measured_total << "\n";
    }
    return os.str();
}

}  // namespace atc
