#include "atc/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "atc/binio.hpp"
#include "atc/rng.hpp"

namespace atc {

namespace {

constexpr char kEpisodeMagic[8] = {'A', 'T', 'C', 'E', 'P', 'I', 'S', '1'};
constexpr uint32_t kEpisodeVersion = 1;

// Deterministic per-coordinate noise in [0,1).
float hash01(uint64_t seed, int a, int b, int c) {
    uint64_t x = seed;
    x ^= 0x9e3779b97f4a7c15ULL * (static_cast<uint64_t>(static_cast<uint32_t>(a)) + 1);
    x ^= 0xbf58476d1ce4e5b9ULL * (static_cast<uint64_t>(static_cast<uint32_t>(b)) + 1);
    x ^= 0x94d049bb133111ebULL * (static_cast<uint64_t>(static_cast<uint32_t>(c)) + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return static_cast<float>(x >> 11) * static_cast<float>(0x1.0p-53);
}

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

struct SpriteSpec {
    int id;
    std::array<float, 3> color;
};

constexpr SpriteSpec kTaskSprite{1, {0.85f, 0.25f, 0.20f}};
constexpr SpriteSpec kDistractorSprite{2, {0.20f, 0.35f, 0.85f}};

std::array<int, 2> sample_velocity(Rng& rng, const SceneConfig& cfg) {
    if (cfg.max_speed == 0) return {0, 0};
    const int lo = std::max(1, cfg.min_speed);
    while (true) {
        const int vy = rng.range(-cfg.max_speed, cfg.max_speed);
        const int vx = rng.range(-cfg.max_speed, cfg.max_speed);
        if (std::max(std::abs(vy), std::abs(vx)) >= lo) return {vy, vx};
    }
}

std::vector<std::array<int, 2>> roll_trajectory(Rng& rng, const SceneConfig& cfg) {
    std::vector<std::array<int, 2>> pos(static_cast<size_t>(cfg.steps) + 1);
    const int ymax = cfg.height - cfg.sprite;
    const int xmax = cfg.width - cfg.sprite;
    pos[0] = {rng.range(0, ymax), rng.range(0, xmax)};
    std::array<int, 2> vel = sample_velocity(rng, cfg);
    for (int t = 0; t < cfg.steps; ++t) {
        if (t > 0 && cfg.hold > 0 && t % cfg.hold == 0) vel = sample_velocity(rng, cfg);
        std::array<int, 2> next;
        for (int axis = 0; axis < 2; ++axis) {
            const int hi = axis == 0 ? ymax : xmax;
            int n = pos[static_cast<size_t>(t)][axis] + vel[axis];
            if (n < 0 || n > hi) {
                vel[axis] = -vel[axis];
                n = pos[static_cast<size_t>(t)][axis] + vel[axis];
            }
            next[axis] = std::clamp(n, 0, hi);
        }
        pos[static_cast<size_t>(t) + 1] = next;
    }
    return pos;
}

void draw_sprite(Frame& f, const SpriteSpec& spec, uint64_t seed, int top, int left, int side) {
    for (int c = 0; c < 3; ++c)
        for (int ly = 0; ly < side; ++ly)
            for (int lx = 0; lx < side; ++lx) {
                // Aperiodic per-sprite texture so block matching has a unique
                // minimum at the true displacement.
                const float n =
                    0.24f * (hash01(seed * 4 + static_cast<uint64_t>(spec.id), lx, ly, c) - 0.5f);
                f.at(c, top + ly, left + lx) = clamp01(spec.color[static_cast<size_t>(c)] + n);
            }
}

int cell_of(const SceneConfig& cfg, const std::array<int, 2>& top_left) {
    const int cy = top_left[0] + cfg.sprite / 2;
    const int cx = top_left[1] + cfg.sprite / 2;
    const int cell_h = cfg.height / cfg.grid;
    const int cell_w = cfg.width / cfg.grid;
    return (cy / cell_h) * cfg.grid + (cx / cell_w);
}

void stamp_footprint(std::vector<uint8_t>& mask, const SceneConfig& cfg,
                     const std::array<int, 2>& p, int side) {
    for (int ly = 0; ly < side; ++ly)
        for (int lx = 0; lx < side; ++lx)
            mask[static_cast<size_t>(p[0] + ly) * cfg.width + (p[1] + lx)] = 1;
}

}  // namespace

void SceneConfig::validate() const {
    if (height <= 0 || width <= 0 || steps <= 0) throw ConfigError("scene dims must be positive");
    if (sprite > height || sprite > width)
        throw ConfigError("sprite side " + std::to_string(sprite) + " exceeds frame " +
                          std::to_string(height) + "x" + std::to_string(width));
    if (max_speed < 0 || min_speed < 0 || min_speed > std::max(max_speed, 0))
        throw ConfigError("invalid speed bounds");
    if (grid <= 0 || height % grid != 0 || width % grid != 0)
        throw ConfigError("label grid must divide frame dims");
    if (texture < 0.0f || texture > 0.5f) throw ConfigError("texture amplitude out of range");
}

Episode generate_episode(const SceneConfig& config, uint64_t seed) {
    config.validate();
    Episode ep;
    ep.config = config;
    ep.seed = seed;

    Rng rng(seed ^ 0xa02cbe4f5d91d2e3ULL);
    Rng task_rng = rng.fork(1);
    Rng dis_rng = rng.fork(2);

    ep.task_pos = roll_trajectory(task_rng, config);
    ep.distractor_pos = config.distractor
                            ? roll_trajectory(dis_rng, config)
                            : std::vector<std::array<int, 2>>(
                                  static_cast<size_t>(config.steps) + 1, {0, 0});

    for (int t = 0; t <= config.steps; ++t) {
        ep.task_cells.push_back(cell_of(config, ep.task_pos[static_cast<size_t>(t)]));
        ep.distractor_cells.push_back(
            config.distractor ? cell_of(config, ep.distractor_pos[static_cast<size_t>(t)]) : -1);
    }
    for (int t = 0; t < config.steps; ++t) ep.labels.push_back(ep.task_cells[static_cast<size_t>(t) + 1]);

    for (int t = 0; t < config.steps; ++t) {
        Frame f;
        f.height = config.height;
        f.width = config.width;
        f.timestep = t;
        f.planes.resize(3 * static_cast<size_t>(config.height) * config.width);
        for (int c = 0; c < 3; ++c) {
            const float base = 0.42f + 0.03f * static_cast<float>(c);
            for (int y = 0; y < config.height; ++y)
                for (int x = 0; x < config.width; ++x)
                    f.at(c, y, x) = clamp01(
                        base + config.texture * (2.0f * hash01(seed, x, y, c) - 1.0f));
        }
        if (config.distractor)
            draw_sprite(f, kDistractorSprite, seed, ep.distractor_pos[static_cast<size_t>(t)][0],
                        ep.distractor_pos[static_cast<size_t>(t)][1], config.sprite);
        draw_sprite(f, kTaskSprite, seed, ep.task_pos[static_cast<size_t>(t)][0],
                    ep.task_pos[static_cast<size_t>(t)][1], config.sprite);
        ep.frames.push_back(std::move(f));
    }

    // Motion mask at t: pixels occupied at t-1 or t by a sprite that moved
    // over that transition. Step 0 has no prior frame and stays empty.
    for (int t = 0; t < config.steps; ++t) {
        std::vector<uint8_t> mask(static_cast<size_t>(config.height) * config.width, 0);
        if (t > 0) {
            const auto add = [&](const std::vector<std::array<int, 2>>& pos) {
                if (pos[static_cast<size_t>(t)] == pos[static_cast<size_t>(t) - 1]) return;
                stamp_footprint(mask, config, pos[static_cast<size_t>(t) - 1], config.sprite);
                stamp_footprint(mask, config, pos[static_cast<size_t>(t)], config.sprite);
            };
            add(ep.task_pos);
            if (config.distractor) add(ep.distractor_pos);
        }
        ep.motion_masks.push_back(std::move(mask));
    }
    return ep;
}

MotionField ground_truth_flow(const Episode& ep, int t) {
    if (t < 1 || t >= ep.step_count())
        throw ContractError("ground_truth_flow: t=" + std::to_string(t) + " out of range [1," +
                            std::to_string(ep.step_count() - 1) + ")");
    MotionField f = MotionField::zeros(ep.config.height, ep.config.width);
    // Distractor first so the task sprite wins where footprints overlap,
    // matching render z-order.
    const auto stamp = [&](const std::vector<std::array<int, 2>>& pos) {
        const auto& cur = pos[static_cast<size_t>(t)];
        const auto& prev = pos[static_cast<size_t>(t) - 1];
        const float dy = static_cast<float>(cur[0] - prev[0]);
        const float dx = static_cast<float>(cur[1] - prev[1]);
        for (int ly = 0; ly < ep.config.sprite; ++ly)
            for (int lx = 0; lx < ep.config.sprite; ++lx) {
                const size_t i =
                    static_cast<size_t>(cur[0] + ly) * ep.config.width + (cur[1] + lx);
                f.dx[i] = dx;
                f.dy[i] = dy;
            }
    };
    if (ep.config.distractor) stamp(ep.distractor_pos);
    stamp(ep.task_pos);
    return f;
}

void save_episode(const Episode& ep, const std::string& path) {
    BinWriter w(path);
    w.bytes(kEpisodeMagic, 8);
    w.u32(kEpisodeVersion);
    w.u32(static_cast<uint32_t>(ep.config.height));
    w.u32(static_cast<uint32_t>(ep.config.width));
    w.u32(static_cast<uint32_t>(ep.config.steps));
    w.u64(ep.seed);
    w.u32(static_cast<uint32_t>(ep.config.sprite));
    w.u32(static_cast<uint32_t>(ep.config.min_speed));
    w.u32(static_cast<uint32_t>(ep.config.max_speed));
    w.u8(ep.config.distractor ? 1 : 0);
    w.f32(ep.config.texture);
    w.u32(static_cast<uint32_t>(ep.config.hold));
    w.u32(static_cast<uint32_t>(ep.config.grid));
    for (int t = 0; t <= ep.config.steps; ++t) {
        w.i32(ep.task_pos[static_cast<size_t>(t)][0]);
        w.i32(ep.task_pos[static_cast<size_t>(t)][1]);
        w.i32(ep.distractor_pos[static_cast<size_t>(t)][0]);
        w.i32(ep.distractor_pos[static_cast<size_t>(t)][1]);
        w.i32(ep.task_cells[static_cast<size_t>(t)]);
        w.i32(ep.distractor_cells[static_cast<size_t>(t)]);
    }
    for (int t = 0; t < ep.config.steps; ++t) w.i32(ep.labels[static_cast<size_t>(t)]);
    for (const auto& m : ep.motion_masks) w.bytes(m.data(), m.size());
    for (const auto& f : ep.frames) w.f32s(f.planes.data(), f.planes.size());
    w.close();
}

Episode load_episode(const std::string& path) {
    BinReader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kEpisodeMagic, 8) != 0)
        throw ParseError("not an episode container: " + path);
    if (r.u32() != kEpisodeVersion) throw ParseError("unsupported episode version in " + path);
    Episode ep;
    ep.config.height = static_cast<int>(r.u32());
    ep.config.width = static_cast<int>(r.u32());
    ep.config.steps = static_cast<int>(r.u32());
    ep.seed = r.u64();
    ep.config.sprite = static_cast<int>(r.u32());
    ep.config.min_speed = static_cast<int>(r.u32());
    ep.config.max_speed = static_cast<int>(r.u32());
    ep.config.distractor = r.u8() != 0;
    ep.config.texture = r.f32();
    ep.config.hold = static_cast<int>(r.u32());
    ep.config.grid = static_cast<int>(r.u32());
    for (int t = 0; t <= ep.config.steps; ++t) {
        ep.task_pos.push_back({r.i32(), r.i32()});
        ep.distractor_pos.push_back({r.i32(), r.i32()});
        ep.task_cells.push_back(r.i32());
        ep.distractor_cells.push_back(r.i32());
    }
    for (int t = 0; t < ep.config.steps; ++t) ep.labels.push_back(r.i32());
    for (int t = 0; t < ep.config.steps; ++t) {
        std::vector<uint8_t> m(static_cast<size_t>(ep.config.height) * ep.config.width);
        r.bytes(m.data(), m.size());
        ep.motion_masks.push_back(std::move(m));
    }
    for (int t = 0; t < ep.config.steps; ++t) {
        Frame f;
        f.height = ep.config.height;
        f.width = ep.config.width;
        f.timestep = t;
        f.planes.resize(3 * static_cast<size_t>(f.height) * f.width);
        r.f32s(f.planes.data(), f.planes.size());
        ep.frames.push_back(std::move(f));
    }
    return ep;
}

void dump_pgm(const Frame& frame, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open for writing: " + path);
    out << "P2\n" << frame.width << " " << frame.height << "\n255\n";
    for (int y = 0; y < frame.height; ++y) {
        for (int x = 0; x < frame.width; ++x) {
            const float lum =
                (frame.at(0, y, x) + frame.at(1, y, x) + frame.at(2, y, x)) / 3.0f;
            out << static_cast<int>(std::lround(lum * 255.0f));
            out << (x + 1 == frame.width ? '\n' : ' ');
        }
    }
}

}  // namespace atc
