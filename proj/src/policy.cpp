#include "atc/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "atc/checkpoint.hpp"
#include "atc/error.hpp"
#include "atc/flow.hpp"

namespace atc {

void PolicyConfig::validate() const {
    if (ratios.empty()) throw ConfigError("ratio set must not be empty");
    for (size_t i = 0; i < ratios.size(); ++i) {
        if (ratios[i] < 0.0f || ratios[i] >= 1.0f)
            throw ConfigError("cache ratios must lie in [0,1)");
        if (i > 0 && ratios[i] <= ratios[i - 1])
            throw ConfigError("cache ratios must be strictly ascending");
    }
    if (p_recover < 0.0f || p_recover > 1.0f) throw ConfigError("p_recover must be in [0,1]");
    if (tau_s <= 0.0f || tau_start <= 0.0f || tau_end <= 0.0f)
        throw ConfigError("temperatures must be positive");
    if (channels < 1) throw ConfigError("policy channels must be >= 1");
    if (flow_norm <= 0.0f) throw ConfigError("flow_norm must be positive");
    if (flow_block < 1 || flow_radius < 0) throw ConfigError("invalid flow estimator dims");
}

// Ascending (score, index) order shared by every top-k consumer: ties cache
// the lower index first.
static std::vector<int> ascending_order(const std::vector<float>& scores) {
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        const float sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
        return sa < sb || (sa == sb && a < b);
    });
    return idx;
}

// ---------------------------------------------------------------------------
// selector
// ---------------------------------------------------------------------------

Selector::Selector(const PolicyConfig& pcfg, const ModelConfig& mcfg, uint64_t seed)
    : height_(mcfg.height), width_(mcfg.width), patch_(mcfg.patch), channels_(pcfg.channels) {
    if (height_ % 4 != 0 || width_ % 4 != 0)
        throw ConfigError("selector head requires frame dims divisible by 4");
    if (patch_ % 4 != 0)
        throw ConfigError("selector head requires patch divisible by 4");
    Rng rng(seed ^ 0x5e1ec404ULL);
    const int c = channels_;
    params_.add_xavier("sel.conv1.w", {c, 5, 3, 3}, 5 * 9, c * 9, rng);
    params_.add("sel.conv1.b", {c});
    params_.add_xavier("sel.conv2.w", {c, c, 3, 3}, c * 9, c * 9, rng);
    params_.add("sel.conv2.b", {c});
    params_.add_xavier("sel.conv3.w", {1, c, 1, 1}, c, 1, rng);
    params_.add("sel.conv3.b", {1});
}

Tensor Selector::forward(Tape& tape, const Tensor& v) const {
    if (v.ndim() != 3 || v.dim(0) != 5)
        throw ContractError("selector input must be [5,H,W], got " + v.shape_str());
    ParamSet& ps = const_cast<ParamSet&>(params_);
    auto P = [&](const char* n) { return tape.param(ps.find(n).value); };
    // Downsample twice by pooling, convolve at the reduced resolutions, then
    // pool onto the token grid. Keeps the policy cost far below one backbone
    // layer.
    Tensor x = tape.avg_pool(v, 2, FlopBucket::policy_other);
    x = tape.relu(tape.conv2d(x, P("sel.conv1.w"), P("sel.conv1.b"), 1, 1,
                              FlopBucket::policy_conv, FlopBucket::policy_other),
                  FlopBucket::policy_other);
    x = tape.avg_pool(x, 2, FlopBucket::policy_other);
    x = tape.relu(tape.conv2d(x, P("sel.conv2.w"), P("sel.conv2.b"), 1, 1,
                              FlopBucket::policy_conv, FlopBucket::policy_other),
                  FlopBucket::policy_other);
    x = tape.conv2d(x, P("sel.conv3.w"), P("sel.conv3.b"), 1, 0, FlopBucket::policy_conv,
                    FlopBucket::policy_other);
    // x is [1, H/4, W/4]; token grid is H/patch x W/patch.
    x = tape.avg_pool(x, patch_ / 4, FlopBucket::policy_other);
    const int n = (height_ / patch_) * (width_ / patch_);
    return tape.sigmoid(tape.reshape(x, {n}), FlopBucket::policy_other);
}

// ---------------------------------------------------------------------------
// ratio predictor
// ---------------------------------------------------------------------------

RatioPredictor::RatioPredictor(const PolicyConfig& pcfg, const ModelConfig& mcfg, uint64_t seed)
    : channels_(pcfg.channels), classes_(pcfg.ratio_count()) {
    if (mcfg.height % 2 != 0 || mcfg.width % 2 != 0)
        throw ConfigError("predictor head requires even frame dims");
    Rng rng(seed ^ 0xb8ed1cafULL);
    const int c = channels_;
    params_.add_xavier("pred.conv.w", {c, 5, 3, 3}, 5 * 9, c * 9, rng);
    params_.add("pred.conv.b", {c});
    params_.add_xavier("pred.head.w", {c, classes_}, c, classes_, rng);
    params_.add("pred.head.b", {classes_});
}

Tensor RatioPredictor::forward(Tape& tape, const Tensor& v) const {
    if (v.ndim() != 3 || v.dim(0) != 5)
        throw ContractError("predictor input must be [5,H,W], got " + v.shape_str());
    ParamSet& ps = const_cast<ParamSet&>(params_);
    auto P = [&](const char* n) { return tape.param(ps.find(n).value); };
    Tensor x = tape.avg_pool(v, 2, FlopBucket::policy_other);
    x = tape.relu(tape.conv2d(x, P("pred.conv.w"), P("pred.conv.b"), 1, 1,
                              FlopBucket::policy_conv, FlopBucket::policy_other),
                  FlopBucket::policy_other);
    Tensor g = tape.global_avg_pool(x, FlopBucket::policy_other);  // [C]
    Tensor logits = tape.add_rowvec(
        tape.matmul(tape.reshape(g, {1, channels_}), P("pred.head.w"), FlopBucket::policy_other),
        P("pred.head.b"), FlopBucket::policy_other);
    return tape.reshape(logits, {classes_});
}

// ---------------------------------------------------------------------------
// discrete decisions and relaxations
// ---------------------------------------------------------------------------

RatioDecision gumbel_softmax(Tape& tape, const Tensor& logits, float tau,
                             const std::vector<float>& ratios, Rng* noise) {
    if (tau <= 0.0f) throw ContractError("gumbel_softmax requires tau > 0");
    const int c = static_cast<int>(logits.numel());
    if (c != static_cast<int>(ratios.size()))
        throw ContractError("gumbel_softmax: logits/ratio size mismatch");
    Tensor noisy = logits;
    if (noise) {
        Tensor g({c});
        for (int j = 0; j < c; ++j) g.data()[j] = noise->gumbel();
        noisy = tape.add(logits, Tape::constant(g), FlopBucket::policy_other);
    }
    RatioDecision d;
    d.soft_probs = tape.softmax(tape.scale(noisy, 1.0f / tau, FlopBucket::policy_other), 0,
                                FlopBucket::policy_other);
    int best = 0;
    for (int j = 1; j < c; ++j)
        if (d.soft_probs.data()[j] > d.soft_probs.data()[best]) best = j;
    d.index = best;
    d.ratio = ratios[static_cast<size_t>(best)];
    d.one_hot.assign(static_cast<size_t>(c), 0.0f);
    d.one_hot[static_cast<size_t>(best)] = 1.0f;
    d.hard_ste = tape.ste(d.soft_probs, Tensor({c}, std::vector<float>(d.one_hot)));
    return d;
}

CacheMask soft_mask(Tape& tape, const Tensor& scores, int k, float tau_s) {
    if (tau_s <= 0.0f) throw ContractError("soft_mask requires tau_s > 0");
    const int n = static_cast<int>(scores.numel());
    if (k < 0 || k > n)
        throw ContractError("soft_mask: k=" + std::to_string(k) + " out of [0," +
                            std::to_string(n) + "]");
    CacheMask m;
    m.cached = k;
    m.hard.assign(static_cast<size_t>(n), 1);
    const std::vector<float> vals(scores.data(), scores.data() + n);
    const std::vector<int> order = ascending_order(vals);
    for (int i = 0; i < k; ++i) m.hard[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0;

    if (k == 0) {
        m.theta = -std::numeric_limits<float>::infinity();
        m.soft = Tensor::ones({n});
        return m;
    }
    if (k == n) {
        m.theta = std::numeric_limits<float>::infinity();
        m.soft = Tensor({n});
        return m;
    }
    const int lo = order[static_cast<size_t>(k) - 1], hi = order[static_cast<size_t>(k)];
    Tensor theta = tape.scale(tape.add(tape.pick(scores, lo), tape.pick(scores, hi),
                                       FlopBucket::policy_other),
                              0.5f, FlopBucket::policy_other);
    m.theta = theta.data()[0];
    m.soft = tape.sigmoid(tape.scale(tape.sub_scalar(scores, theta, FlopBucket::policy_other),
                                     1.0f / tau_s, FlopBucket::policy_other),
                          FlopBucket::policy_other);
    return m;
}

Tensor soft_mask_mixture(Tape& tape, const Tensor& scores, const Tensor& soft_probs,
                         const std::vector<float>& ratios, int n_tokens, float tau_s) {
    if (static_cast<int>(soft_probs.numel()) != static_cast<int>(ratios.size()))
        throw ContractError("soft_mask_mixture: probs/ratio size mismatch");
    Tensor acc;
    for (size_t j = 0; j < ratios.size(); ++j) {
        const int k = static_cast<int>(std::floor(static_cast<double>(n_tokens) *
                                                  static_cast<double>(ratios[j])));
        CacheMask mj = soft_mask(tape, scores, k, tau_s);
        Tensor term = tape.mul_scalar(mj.soft, tape.pick(soft_probs, static_cast<int64_t>(j)),
                                      FlopBucket::policy_other);
        acc = acc.defined() ? tape.add(acc, term, FlopBucket::policy_other) : term;
    }
    return acc;
}

std::vector<uint8_t> select_cache_mask(const std::vector<float>& scores, float ratio) {
    if (ratio < 0.0f || ratio >= 1.0f)
        throw ContractError("select_cache_mask: ratio must be in [0,1)");
    const int n = static_cast<int>(scores.size());
    const int k = static_cast<int>(std::floor(static_cast<double>(n) * static_cast<double>(ratio)));
    std::vector<uint8_t> mask(static_cast<size_t>(n), 1);
    const std::vector<int> order = ascending_order(scores);
    for (int i = 0; i < k; ++i) mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0;
    return mask;
}

std::vector<uint8_t> apply_stochastic_recovery(std::vector<uint8_t> mask, float p_recover,
                                               Rng& rng) {
    if (p_recover < 0.0f || p_recover > 1.0f)
        throw ContractError("apply_stochastic_recovery: p_recover must be in [0,1]");
    for (auto& m : mask)
        if (m == 0 && rng.bernoulli(p_recover)) m = 1;
    return mask;
}

std::vector<uint8_t> rule_based_mask(const MotionField& flow, float ratio, int patch) {
    return select_cache_mask(token_flow_magnitude(flow, patch), ratio);
}

// ---------------------------------------------------------------------------
// bundle checkpointing
// ---------------------------------------------------------------------------

PolicyBundle::PolicyBundle(const PolicyConfig& pcfg, const ModelConfig& mcfg, uint64_t seed)
    : cfg(pcfg), selector(pcfg, mcfg, seed), predictor(pcfg, mcfg, seed ^ 0x9d2cf1abULL) {
    cfg.validate();
}

void PolicyBundle::save(const std::string& path) const {
    std::vector<std::pair<std::string, float>> conf{
        {"ratio_count", static_cast<float>(cfg.ratio_count())},
        {"tau_start", cfg.tau_start},
        {"tau_end", cfg.tau_end},
        {"tau_s", cfg.tau_s},
        {"p_recover", cfg.p_recover},
        {"channels", static_cast<float>(cfg.channels)},
        {"flow_norm", cfg.flow_norm},
        {"flow_block", static_cast<float>(cfg.flow_block)},
        {"flow_radius", static_cast<float>(cfg.flow_radius)},
    };
    for (int j = 0; j < cfg.ratio_count(); ++j)
        conf.emplace_back("ratio" + std::to_string(j), cfg.ratios[static_cast<size_t>(j)]);
    ParamSet merged;
    for (const auto& p : selector.params().all()) merged.add(p.name, p.value.shape()) = p.value;
    for (const auto& p : predictor.params().all()) merged.add(p.name, p.value.shape()) = p.value;
    save_blob_file(path, "policy", conf, merged);
}

PolicyBundle PolicyBundle::load(const std::string& path, const ModelConfig& mcfg) {
    const BlobFile f = load_blob_file(path, "policy");
    PolicyConfig pcfg;
    pcfg.ratios.clear();
    const int rc = f.get_int("ratio_count");
    for (int j = 0; j < rc; ++j) pcfg.ratios.push_back(f.get("ratio" + std::to_string(j)));
    pcfg.tau_start = f.get("tau_start");
    pcfg.tau_end = f.get("tau_end");
    pcfg.tau_s = f.get("tau_s");
    pcfg.p_recover = f.get("p_recover");
    pcfg.channels = f.get_int("channels");
    pcfg.flow_norm = f.get("flow_norm");
    pcfg.flow_block = f.get_int("flow_block");
    pcfg.flow_radius = f.get_int("flow_radius");
    PolicyBundle b(pcfg, mcfg, 0);
    for (const auto& [name, tensor] : f.blobs) {
        ParamSet& target = name.rfind("sel.", 0) == 0 ? b.selector.params() : b.predictor.params();
        Param& p = target.find(name);
        if (p.value.shape() != tensor.shape())
            throw ParseError("policy blob shape mismatch for " + name);
        std::copy(tensor.data(), tensor.data() + tensor.numel(), p.value.data());
    }
    return b;
}

}  // namespace atc
