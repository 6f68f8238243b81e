#include "atc/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "atc/binio.hpp"
#include "atc/checkpoint.hpp"
#include "atc/error.hpp"

namespace atc {

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'A', 'T', 'C', 'C', 'K', 'P', 'T', '1'};
}

float BlobFile::get(const std::string& key) const {
    auto it = config.find(key);
    if (it == config.end()) throw ParseError("checkpoint missing config key " + key);
    return it->second;
}
int BlobFile::get_int(const std::string& key) const { return static_cast<int>(get(key)); }

void save_blob_file(const std::string& path, const std::string& kind,
                    const std::vector<std::pair<std::string, float>>& config,
                    const ParamSet& params) {
    BinWriter w(path);
    w.bytes(kCkptMagic, 8);
    w.str(kind);
    w.u32(static_cast<uint32_t>(config.size()));
    for (const auto& [key, value] : config) {
        w.str(key);
        w.f32(value);
    }
    w.u32(static_cast<uint32_t>(params.all().size()));
    for (const auto& p : params.all()) {
        w.str(p.name);
        w.u32(static_cast<uint32_t>(p.value.ndim()));
        for (int d = 0; d < p.value.ndim(); ++d) w.u32(static_cast<uint32_t>(p.value.dim(d)));
        w.f32s(p.value.data(), static_cast<size_t>(p.value.numel()));
    }
    w.close();
}

BlobFile load_blob_file(const std::string& path, const std::string& expected_kind) {
    BinReader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kCkptMagic, 8) != 0)
        throw ParseError("not a checkpoint file: " + path);
    BlobFile f;
    f.kind = r.str();
    if (!expected_kind.empty() && f.kind != expected_kind)
        throw ParseError("checkpoint kind mismatch in " + path + ": want " + expected_kind +
                         ", got " + f.kind);
    const uint32_t nconf = r.u32();
    for (uint32_t i = 0; i < nconf; ++i) {
        const std::string key = r.str();
        f.config[key] = r.f32();
    }
    const uint32_t nblobs = r.u32();
    for (uint32_t i = 0; i < nblobs; ++i) {
        const std::string name = r.str();
        const uint32_t ndim = r.u32();
        std::vector<int> shape;
        for (uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<int>(r.u32()));
        Tensor t(shape);
        r.f32s(t.data(), static_cast<size_t>(t.numel()));
        f.blobs.emplace_back(name, std::move(t));
    }
    return f;
}

void apply_blobs(const BlobFile& file, ParamSet& params) {
    for (const auto& [name, tensor] : file.blobs) {
        Param& p = params.find(name);
        if (p.value.shape() != tensor.shape())
            throw ParseError("checkpoint blob shape mismatch for " + name);
        std::copy(tensor.data(), tensor.data() + tensor.numel(), p.value.data());
    }
}

// ---------------------------------------------------------------------------
// config / saliency / cache probes
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (height <= 0 || width <= 0 || patch <= 0 || dim <= 0 || ffn_dim <= 0 || layers <= 0 ||
        heads <= 0 || vocab <= 0)
        throw ConfigError("model dims must be positive");
    if (height % patch != 0 || width % patch != 0)
        throw ConfigError("patch size must divide frame dims");
    if (dim % heads != 0) throw ConfigError("embedding dim not divisible by heads");
    if ((dim / heads) % 2 != 0) throw ConfigError("per-head dim must be even for rotary pairs");
}

std::vector<float> extract_attention_saliency(const std::vector<float>& attention_sums) {
    float lo = attention_sums.empty() ? 0.0f : attention_sums[0];
    float hi = lo;
    for (float v : attention_sums) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::vector<float> out(attention_sums.size());
    if (hi - lo < 1e-12f) {
        std::fill(out.begin(), out.end(), 0.5f);
        return out;
    }
    const float span = hi - lo;
    for (size_t i = 0; i < out.size(); ++i) out[i] = (attention_sums[i] - lo) / span;
    return out;
}

Tensor permute_kv_probe(const LayerKVCache& cache, int layer, const std::vector<int>& perm,
                        const Tensor& query, int heads) {
    if (layer < 0 || layer >= static_cast<int>(cache.k.size()))
        throw ContractError("permute_kv_probe: layer out of range");
    const Tensor& k = cache.k[static_cast<size_t>(layer)];
    const Tensor& v = cache.v[static_cast<size_t>(layer)];
    const int n = k.dim(0);
    if (static_cast<int>(perm.size()) != n)
        throw ContractError("permute_kv_probe: perm size mismatch");
    std::vector<uint8_t> seen(static_cast<size_t>(n), 0);
    for (int p : perm) {
        if (p < 0 || p >= n || seen[static_cast<size_t>(p)])
            throw ContractError("permute_kv_probe: perm is not a bijection");
        seen[static_cast<size_t>(p)] = 1;
    }
    Tape t(false);
    Tensor kp = t.gather_rows(k, perm);
    Tensor vp = t.gather_rows(v, perm);
    const int dh = k.dim(1) / heads;
    Tensor q = t.scale(query, 1.0f / std::sqrt(static_cast<float>(dh)));
    Tensor probs = t.softmax(t.attention_scores(q, kp, heads), 2);
    return t.attention_mix(probs, vp, heads);
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

Backbone::Backbone(ModelConfig config, uint64_t seed) : cfg_(config) {
    cfg_.validate();
    Rng rng(seed);
    const int d = cfg_.dim, m = cfg_.ffn_dim, pin = 3 * cfg_.patch * cfg_.patch;
    params_.add_xavier("embed.w", {pin, d}, pin, d, rng);
    params_.add("embed.b", {d});
    params_.add_xavier("readout.tok", {1, d}, d, d, rng);
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        Tensor& g1 = params_.add(p + "attn_norm", {d});
        std::fill(g1.vec().begin(), g1.vec().end(), 1.0f);
        params_.add_xavier(p + "wq", {d, d}, d, d, rng);
        params_.add_xavier(p + "wk", {d, d}, d, d, rng);
        params_.add_xavier(p + "wv", {d, d}, d, d, rng);
        params_.add_xavier(p + "wo", {d, d}, d, d, rng);
        Tensor& g2 = params_.add(p + "ffn_norm", {d});
        std::fill(g2.vec().begin(), g2.vec().end(), 1.0f);
        params_.add_xavier(p + "w1", {d, m}, d, m, rng);
        params_.add_xavier(p + "w2", {m, d}, m, d, rng);
    }
    Tensor& gh = params_.add("head_norm", {d});
    std::fill(gh.vec().begin(), gh.vec().end(), 1.0f);
    params_.add_xavier("head.w", {d, cfg_.vocab}, d, cfg_.vocab, rng);
    params_.add("head.b", {cfg_.vocab});
}

LayerKVCache Backbone::make_cache() const {
    LayerKVCache c;
    const int n = cfg_.tokens();
    for (int l = 0; l < cfg_.layers; ++l) {
        c.k.emplace_back(std::vector<int>{n, cfg_.dim});
        c.v.emplace_back(std::vector<int>{n, cfg_.dim});
    }
    c.positions.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) c.positions[static_cast<size_t>(i)] = i;
    c.last_computed.assign(static_cast<size_t>(n), -1);
    c.step = -1;
    return c;
}

Tensor Backbone::embed_rows(Tape& tape, const Frame& frame, const std::vector<int>& rows) const {
    if (frame.height != cfg_.height || frame.width != cfg_.width)
        throw ConfigError("frame dims do not match model config");
    const int p = cfg_.patch;
    const int gw = cfg_.width / p;
    const int pin = 3 * p * p;
    Tensor patches({static_cast<int>(rows.size()), pin});
    for (size_t i = 0; i < rows.size(); ++i) {
        const int r = rows[i];
        const int gy = r / gw, gx = r % gw;
        float* dst = patches.data() + static_cast<int64_t>(i) * pin;
        int o = 0;
        for (int c = 0; c < 3; ++c)
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px) dst[o++] = frame.at(c, gy * p + py, gx * p + px);
    }
    ParamSet& ps = const_cast<ParamSet&>(params_);
    Tensor w = tape.param(ps.find("embed.w").value);
    Tensor b = tape.param(ps.find("embed.b").value);
    return tape.add_rowvec(tape.matmul(patches, w, FlopBucket::embed), b, FlopBucket::embed);
}

StepOutput Backbone::full_step(Tape& tape, const Frame& frame, LayerKVCache* cache) const {
    std::vector<uint8_t> mask(static_cast<size_t>(cfg_.tokens()), 1);
    return run_step(tape, frame, mask, cache, nullptr, Mode::full);
}

StepOutput Backbone::partial_step(Tape& tape, const Frame& frame,
                                  const std::vector<uint8_t>& mask, LayerKVCache& cache) const {
    return run_step(tape, frame, mask, &cache, nullptr, Mode::partial);
}

StepOutput Backbone::blended_step(Tape& tape, const Frame& frame, const Tensor& mask_soft,
                                  const std::vector<uint8_t>& hard_mask,
                                  LayerKVCache& cache) const {
    return run_step(tape, frame, hard_mask, &cache, &mask_soft, Mode::blended);
}

StepOutput Backbone::run_step(Tape& tape, const Frame& frame, const std::vector<uint8_t>& mask,
                              LayerKVCache* cache, const Tensor* mask_soft, Mode mode) const {
    const int n = cfg_.tokens(), heads = cfg_.heads;
    const int dh = cfg_.dim / heads;
    const float qscale = 1.0f / std::sqrt(static_cast<float>(dh));
    if (static_cast<int>(mask.size()) != n) throw ContractError("mask length must equal N");
    if (mode != Mode::full && (!cache || !cache->primed()))
        throw ContractError("partial step requires a primed cache; run full_step at step 0");
    if (mode == Mode::blended && (!mask_soft || mask_soft->numel() != n))
        throw ContractError("blended step requires a soft mask of length N");

    std::vector<int> active;
    for (int i = 0; i < n; ++i)
        if (mask[static_cast<size_t>(i)]) active.push_back(i);

    // Rows whose streams are computed this step. The blended path computes
    // every row and lets the per-layer blend discard cached rows' fresh K/V.
    std::vector<int> compute;
    if (mode == Mode::partial) {
        compute = active;
    } else {
        compute.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) compute[static_cast<size_t>(i)] = i;
    }

    ParamSet& ps = const_cast<ParamSet&>(params_);
    auto P = [&](const std::string& name) { return tape.param(ps.find(name).value); };

    Tensor h = embed_rows(tape, frame, compute);
    Tensor h_ro = P("readout.tok");
    const std::vector<int> ro_pos{n};

    std::vector<float> attn_sums(static_cast<size_t>(n), 0.0f);
    std::vector<Tensor> new_k, new_v;

    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string lp = "layer" + std::to_string(l) + ".";
        Tensor g1 = P(lp + "attn_norm");
        Tensor wq = P(lp + "wq"), wk = P(lp + "wk"), wv = P(lp + "wv"), wo = P(lp + "wo");

        Tensor xn = tape.rmsnorm(h, g1, 1e-6f, FlopBucket::layer_other);
        Tensor q = tape.rotary(tape.matmul(xn, wq, FlopBucket::proj_matmul), compute, heads,
                               FlopBucket::layer_other);
        q = tape.scale(q, qscale, FlopBucket::layer_other);
        Tensor k = tape.rotary(tape.matmul(xn, wk, FlopBucket::proj_matmul), compute, heads,
                               FlopBucket::layer_other);
        Tensor v = tape.matmul(xn, wv, FlopBucket::proj_matmul);

        Tensor rn = tape.rmsnorm(h_ro, g1, 1e-6f, FlopBucket::readout);
        Tensor q_ro = tape.scale(tape.rotary(tape.matmul(rn, wq, FlopBucket::readout), ro_pos,
                                             heads, FlopBucket::readout),
                                 qscale, FlopBucket::readout);

        Tensor k_full, v_full;
        if (mode == Mode::full) {
            k_full = k;
            v_full = v;
        } else if (mode == Mode::partial) {
            k_full =
                tape.scatter_rows(Tape::constant(cache->k[static_cast<size_t>(l)]), active, k);
            v_full =
                tape.scatter_rows(Tape::constant(cache->v[static_cast<size_t>(l)]), active, v);
        } else {
            k_full = tape.row_lerp(k, Tape::constant(cache->k[static_cast<size_t>(l)]),
                                   *mask_soft, FlopBucket::layer_other);
            v_full = tape.row_lerp(v, Tape::constant(cache->v[static_cast<size_t>(l)]),
                                   *mask_soft, FlopBucket::layer_other);
        }
        if (cache) {
            new_k.emplace_back(k_full.shape(), k_full.vec());
            new_v.emplace_back(v_full.shape(), v_full.vec());
        }

        Tensor probs = tape.softmax(
            tape.attention_scores(q, k_full, heads, FlopBucket::attn_matmul), 2,
            FlopBucket::layer_other);
        Tensor ctx = tape.attention_mix(probs, v_full, heads, FlopBucket::attn_matmul);
        h = tape.add(h, tape.matmul(ctx, wo, FlopBucket::proj_matmul), FlopBucket::layer_other);

        Tensor probs_ro = tape.softmax(
            tape.attention_scores(q_ro, k_full, heads, FlopBucket::readout), 2,
            FlopBucket::readout);
        for (int hh = 0; hh < heads; ++hh)
            for (int i = 0; i < n; ++i)
                attn_sums[static_cast<size_t>(i)] +=
                    probs_ro.data()[static_cast<int64_t>(hh) * n + i];
        Tensor ctx_ro = tape.attention_mix(probs_ro, v_full, heads, FlopBucket::readout);
        h_ro = tape.add(h_ro, tape.matmul(ctx_ro, wo, FlopBucket::readout), FlopBucket::readout);

        Tensor g2 = P(lp + "ffn_norm");
        Tensor w1 = P(lp + "w1"), w2 = P(lp + "w2");
        Tensor fn = tape.rmsnorm(h, g2, 1e-6f, FlopBucket::layer_other);
        Tensor f1 =
            tape.relu(tape.matmul(fn, w1, FlopBucket::ffn_matmul), FlopBucket::layer_other);
        h = tape.add(h, tape.matmul(f1, w2, FlopBucket::ffn_matmul), FlopBucket::layer_other);

        Tensor rn2 = tape.rmsnorm(h_ro, g2, 1e-6f, FlopBucket::readout);
        Tensor f1_ro = tape.relu(tape.matmul(rn2, w1, FlopBucket::readout), FlopBucket::readout);
        h_ro = tape.add(h_ro, tape.matmul(f1_ro, w2, FlopBucket::readout), FlopBucket::readout);
    }

    Tensor hn = tape.rmsnorm(h_ro, P("head_norm"), 1e-6f, FlopBucket::head);
    Tensor logits2 = tape.add_rowvec(tape.matmul(hn, P("head.w"), FlopBucket::head),
                                     P("head.b"), FlopBucket::head);
    StepOutput out;
    out.logits = tape.reshape(logits2, {cfg_.vocab});
    const float norm = 1.0f / static_cast<float>(cfg_.layers * heads);
    for (auto& v : attn_sums) v *= norm;
    out.attention_sums = attn_sums;
    out.saliency = extract_attention_saliency(attn_sums);
    out.n_act = static_cast<int>(active.size());

    if (cache) {
        for (int l = 0; l < cfg_.layers; ++l) {
            cache->k[static_cast<size_t>(l)] = std::move(new_k[static_cast<size_t>(l)]);
            cache->v[static_cast<size_t>(l)] = std::move(new_v[static_cast<size_t>(l)]);
        }
        for (int i : active) cache->last_computed[static_cast<size_t>(i)] = frame.timestep;
        cache->step = frame.timestep;
    }
    return out;
}

void Backbone::save(const std::string& path) const {
    save_blob_file(path, "backbone",
                   {{"height", static_cast<float>(cfg_.height)},
                    {"width", static_cast<float>(cfg_.width)},
                    {"patch", static_cast<float>(cfg_.patch)},
                    {"dim", static_cast<float>(cfg_.dim)},
                    {"ffn_dim", static_cast<float>(cfg_.ffn_dim)},
                    {"layers", static_cast<float>(cfg_.layers)},
                    {"heads", static_cast<float>(cfg_.heads)},
                    {"vocab", static_cast<float>(cfg_.vocab)}},
                   params_);
}

Backbone Backbone::load(const std::string& path) {
    const BlobFile f = load_blob_file(path, "backbone");
    ModelConfig cfg;
    cfg.height = f.get_int("height");
    cfg.width = f.get_int("width");
    cfg.patch = f.get_int("patch");
    cfg.dim = f.get_int("dim");
    cfg.ffn_dim = f.get_int("ffn_dim");
    cfg.layers = f.get_int("layers");
    cfg.heads = f.get_int("heads");
    cfg.vocab = f.get_int("vocab");
    Backbone b(cfg, 0);
    apply_blobs(f, b.params_);
    return b;
}

}  // namespace atc
