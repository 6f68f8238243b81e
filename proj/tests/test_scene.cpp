#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "atc/error.hpp"
#include "atc/flow.hpp"
#include "atc/scene.hpp"

using namespace atc;

namespace {

SceneConfig default_config() { return SceneConfig{}; }

bool frames_equal(const Frame& a, const Frame& b) { return a.planes == b.planes; }

// Minimal hand-built episode: one sprite moving with a fixed velocity on a
// straight line, no distractor.
Episode straight_line_episode(int vy, int vx, int steps = 4) {
    Episode ep;
    ep.config = default_config();
    ep.config.steps = steps;
    ep.config.distractor = false;
    ep.seed = 1;
    ep.frames.resize(static_cast<size_t>(steps));  // only step_count() is used
    std::array<int, 2> pos{12, 8};
    for (int t = 0; t <= steps; ++t) {
        ep.task_pos.push_back(pos);
        ep.distractor_pos.push_back({0, 0});
        pos[0] += vy;
        pos[1] += vx;
    }
    return ep;
}

// Uniform background with an aperiodic textured sprite at (top,left).
Frame sprite_on_uniform(int h, int w, int top, int left, int side) {
    Frame f;
    f.height = h;
    f.width = w;
    f.planes.assign(3 * static_cast<size_t>(h) * w, 0.5f);
    int v = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                f.at(c, top + y, left + x) = 0.05f + 0.9f * static_cast<float>((v * 37) % 97) / 97.0f;
                ++v;
            }
    return f;
}

}  // namespace

TEST_CASE("episode generation is bitwise deterministic") {
    const SceneConfig cfg = default_config();
    const Episode a = generate_episode(cfg, 42);
    const Episode b = generate_episode(cfg, 42);
    REQUIRE(a.step_count() == b.step_count());
    for (int t = 0; t < a.step_count(); ++t) {
        CHECK(frames_equal(a.frames[t], b.frames[t]));
        CHECK(a.motion_masks[t] == b.motion_masks[t]);
    }
    CHECK(a.labels == b.labels);
    CHECK(a.task_pos == b.task_pos);

    const Episode c = generate_episode(cfg, 43);
    CHECK_FALSE(frames_equal(a.frames[0], c.frames[0]));
}

TEST_CASE("static scenes have identical frames and empty motion masks") {
    SceneConfig cfg = default_config();
    cfg.min_speed = 0;
    cfg.max_speed = 0;
    const Episode ep = generate_episode(cfg, 7);
    for (int t = 1; t < ep.step_count(); ++t) {
        CHECK(frames_equal(ep.frames[0], ep.frames[t]));
        for (uint8_t m : ep.motion_masks[t]) CHECK(m == 0);
    }
    const MotionField f = ground_truth_flow(ep, 1);
    for (float v : f.dx) CHECK(v == 0.0f);
    for (float v : f.dy) CHECK(v == 0.0f);
}

TEST_CASE("labels point at the next-step cell of the task sprite") {
    const Episode ep = generate_episode(default_config(), 5);
    for (int t = 0; t < ep.step_count(); ++t) {
        CHECK(ep.labels[t] == ep.task_cells[t + 1]);
        CHECK(ep.labels[t] >= 0);
        CHECK(ep.labels[t] < ep.config.grid * ep.config.grid);
    }
}

TEST_CASE("trajectories stay inside the frame and pixels stay in range") {
    for (uint64_t seed = 0; seed < 30; ++seed) {
        const Episode ep = generate_episode(default_config(), seed);
        for (const auto& p : ep.task_pos) {
            CHECK(p[0] >= 0);
            CHECK(p[1] >= 0);
            CHECK(p[0] <= ep.config.height - ep.config.sprite);
            CHECK(p[1] <= ep.config.width - ep.config.sprite);
        }
        for (const auto& f : ep.frames)
            for (float v : f.planes) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
    }
}

TEST_CASE("ground-truth flow carries the sprite displacement") {
    SUBCASE("horizontal +2 px/frame gives (dx,dy)=(2,0) inside the sprite") {
        const Episode ep = straight_line_episode(0, 2);
        const MotionField f = ground_truth_flow(ep, 1);
        const auto& pos = ep.task_pos[1];
        for (int y = 0; y < ep.config.sprite; ++y)
            for (int x = 0; x < ep.config.sprite; ++x) {
                const size_t i = static_cast<size_t>(pos[0] + y) * ep.config.width + pos[1] + x;
                CHECK(f.dx[i] == 2.0f);
                CHECK(f.dy[i] == 0.0f);
            }
        CHECK(f.dx[0] == 0.0f);
        CHECK(f.dy[0] == 0.0f);
    }
    SUBCASE("velocity (0,-1) marks sprite pixels with (0,-1)") {
        const Episode ep = straight_line_episode(-1, 0);
        const MotionField f = ground_truth_flow(ep, 2);
        const auto& pos = ep.task_pos[2];
        const size_t i = static_cast<size_t>(pos[0]) * ep.config.width + pos[1];
        CHECK(f.dx[i] == 0.0f);
        CHECK(f.dy[i] == -1.0f);
    }
    SUBCASE("t out of range is a contract error") {
        const Episode ep = straight_line_episode(1, 1);
        CHECK_THROWS_AS(ground_truth_flow(ep, 0), ContractError);
        CHECK_THROWS_AS(ground_truth_flow(ep, 4), ContractError);
    }
}

TEST_CASE("motion masks are the union of moved-sprite footprints at t-1 and t") {
    const Episode ep = generate_episode(default_config(), 11);
    for (int t = 1; t < ep.step_count(); ++t) {
        std::vector<uint8_t> want(static_cast<size_t>(ep.config.height) * ep.config.width, 0);
        auto stamp = [&](const std::array<int, 2>& p) {
            for (int y = 0; y < ep.config.sprite; ++y)
                for (int x = 0; x < ep.config.sprite; ++x)
                    want[static_cast<size_t>(p[0] + y) * ep.config.width + p[1] + x] = 1;
        };
        if (ep.task_pos[t] != ep.task_pos[t - 1]) {
            stamp(ep.task_pos[t - 1]);
            stamp(ep.task_pos[t]);
        }
        if (ep.config.distractor && ep.distractor_pos[t] != ep.distractor_pos[t - 1]) {
            stamp(ep.distractor_pos[t - 1]);
            stamp(ep.distractor_pos[t]);
        }
        CHECK(ep.motion_masks[t] == want);
    }
}

TEST_CASE("block matching flow") {
    SUBCASE("identical frames give a zero field") {
        const Episode ep = generate_episode(default_config(), 3);
        const MotionField f = estimate_flow(ep.frames[0], ep.frames[0], 4, 2);
        for (float v : f.dx) CHECK(v == 0.0f);
        for (float v : f.dy) CHECK(v == 0.0f);
    }
    SUBCASE("uniform blank frames tie-break to zero displacement") {
        Frame blank;
        blank.height = blank.width = 16;
        blank.planes.assign(3 * 256, 0.3f);
        const MotionField f = estimate_flow(blank, blank, 4, 3);
        for (float v : f.dx) CHECK(v == 0.0f);
        for (float v : f.dy) CHECK(v == 0.0f);
    }
    SUBCASE("pure translation by (2,0) is recovered on every block covering the sprite") {
        const Frame prev = sprite_on_uniform(32, 32, 12, 8, 6);
        const Frame cur = sprite_on_uniform(32, 32, 12, 10, 6);
        const MotionField f = estimate_flow(prev, cur, 4, 2);
        for (int y = 12; y < 18; ++y)
            for (int x = 10; x < 16; ++x) {
                CHECK(f.dx[static_cast<size_t>(y) * 32 + x] == 2.0f);
                CHECK(f.dy[static_cast<size_t>(y) * 32 + x] == 0.0f);
            }
    }
    SUBCASE("shape mismatch is a contract error") {
        Frame a;
        a.height = a.width = 16;
        a.planes.assign(3 * 256, 0.0f);
        Frame b;
        b.height = b.width = 8;
        b.planes.assign(3 * 64, 0.0f);
        CHECK_THROWS_AS(estimate_flow(a, b, 4, 1), ContractError);
    }
}

TEST_CASE("flow soundness: estimator agrees with the oracle on measurable sprite pixels") {
    // The claim is only well-posed where a match can exist: blocks whose
    // source window at the true displacement stays inside the frame, and
    // sprites that do not overlap each other. Pixels are filtered down to
    // those conditions (sprite clear of borders by block+radius, disjoint
    // inflated bounding boxes); on that set the match must be >= 95%.
    SceneConfig cfg = default_config();
    cfg.texture = 0.0f;  // uniform background
    const int block = 4, radius = cfg.max_speed;
    const int margin = block + radius;
    int64_t agree = 0, total = 0;
    for (uint64_t seed = 100; seed < 140; ++seed) {
        const Episode ep = generate_episode(cfg, seed);
        for (int t = 1; t < ep.step_count(); ++t) {
            const MotionField want = ground_truth_flow(ep, t);
            const MotionField got =
                estimate_flow(ep.frames[t - 1], ep.frames[t], block, radius);
            auto clear_of_border = [&](const std::array<int, 2>& p) {
                return p[0] >= margin && p[1] >= margin &&
                       p[0] <= cfg.height - cfg.sprite - margin &&
                       p[1] <= cfg.width - cfg.sprite - margin;
            };
            auto boxes_disjoint = [&]() {
                const int pad = radius;
                int ty0 = std::min(ep.task_pos[t - 1][0], ep.task_pos[t][0]) - pad;
                int ty1 = std::max(ep.task_pos[t - 1][0], ep.task_pos[t][0]) + cfg.sprite + pad;
                int tx0 = std::min(ep.task_pos[t - 1][1], ep.task_pos[t][1]) - pad;
                int tx1 = std::max(ep.task_pos[t - 1][1], ep.task_pos[t][1]) + cfg.sprite + pad;
                int dy0 = std::min(ep.distractor_pos[t - 1][0], ep.distractor_pos[t][0]) - pad;
                int dy1 = std::max(ep.distractor_pos[t - 1][0], ep.distractor_pos[t][0]) +
                          cfg.sprite + pad;
                int dx0 = std::min(ep.distractor_pos[t - 1][1], ep.distractor_pos[t][1]) - pad;
                int dx1 = std::max(ep.distractor_pos[t - 1][1], ep.distractor_pos[t][1]) +
                          cfg.sprite + pad;
                return ty1 <= dy0 || dy1 <= ty0 || tx1 <= dx0 || dx1 <= tx0;
            };
            if (!boxes_disjoint()) continue;
            auto check_sprite = [&](const std::vector<std::array<int, 2>>& pos) {
                if (pos[static_cast<size_t>(t)] == pos[static_cast<size_t>(t) - 1]) return;
                if (!clear_of_border(pos[static_cast<size_t>(t)]) ||
                    !clear_of_border(pos[static_cast<size_t>(t) - 1]))
                    return;
                for (int y = 0; y < cfg.sprite; ++y)
                    for (int x = 0; x < cfg.sprite; ++x) {
                        const size_t i = static_cast<size_t>(pos[static_cast<size_t>(t)][0] + y) *
                                             cfg.width +
                                         pos[static_cast<size_t>(t)][1] + x;
                        total += 1;
                        if (got.dx[i] == want.dx[i] && got.dy[i] == want.dy[i]) agree += 1;
                    }
            };
            check_sprite(ep.task_pos);
            check_sprite(ep.distractor_pos);
        }
    }
    REQUIRE(total > 500);
    CHECK(static_cast<double>(agree) >= 0.95 * static_cast<double>(total));
}

TEST_CASE("motion-aware input stacking") {
    const Episode ep = generate_episode(default_config(), 9);
    SUBCASE("zero flow leaves channels 4-5 zero and round-trips the frame") {
        const MotionField zero = MotionField::zeros(32, 32);
        const Tensor v = build_motion_input(ep.frames[0], zero, 2.0f);
        REQUIRE(v.shape() == std::vector<int>{5, 32, 32});
        for (size_t i = 0; i < ep.frames[0].planes.size(); ++i)
            CHECK(v.data()[i] == ep.frames[0].planes[i]);
        for (int64_t i = 3 * 1024; i < v.numel(); ++i) CHECK(v.data()[i] == 0.0f);
    }
    SUBCASE("flow normalizes by max speed and clamps") {
        MotionField f = MotionField::zeros(32, 32);
        f.dx.assign(f.dx.size(), 2.0f);
        f.dy.assign(f.dy.size(), -5.0f);
        const Tensor v = build_motion_input(ep.frames[0], f, 2.0f);
        CHECK(v.data()[3 * 1024] == 1.0f);
        CHECK(v.data()[4 * 1024] == -1.0f);
    }
    SUBCASE("non-positive max speed is a contract error") {
        CHECK_THROWS_AS(build_motion_input(ep.frames[0], MotionField::zeros(32, 32), 0.0f),
                        ContractError);
    }
}

TEST_CASE("token flow magnitude pools per patch") {
    MotionField f = MotionField::zeros(8, 8);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) f.dx[static_cast<size_t>(y) * 8 + x] = 2.0f;
    const auto mag = token_flow_magnitude(f, 4);
    REQUIRE(mag.size() == 4);
    CHECK(mag[0] == doctest::Approx(2.0f));
    CHECK(mag[1] == 0.0f);
    CHECK(mag[2] == 0.0f);
    CHECK(mag[3] == 0.0f);
}

TEST_CASE("episode container round-trips and is byte-stable") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "atc_scene_test";
    fs::create_directories(dir);
    const std::string path = (dir / "ep.bin").string();

    const Episode ep = generate_episode(default_config(), 42);
    save_episode(ep, path);
    const Episode back = load_episode(path);
    CHECK(back.seed == ep.seed);
    CHECK(back.labels == ep.labels);
    CHECK(back.task_pos == ep.task_pos);
    CHECK(back.distractor_cells == ep.distractor_cells);
    REQUIRE(back.step_count() == ep.step_count());
    for (int t = 0; t < ep.step_count(); ++t) {
        CHECK(back.frames[t].planes == ep.frames[t].planes);
        CHECK(back.motion_masks[t] == ep.motion_masks[t]);
    }

    const std::string path2 = (dir / "ep2.bin").string();
    save_episode(generate_episode(default_config(), 42), path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(!b1.empty());
    fs::remove_all(dir);
}

TEST_CASE("pgm dump is valid ASCII P2") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "atc_pgm_test";
    fs::create_directories(dir);
    const std::string path = (dir / "f.pgm").string();
    const Episode ep = generate_episode(default_config(), 1);
    dump_pgm(ep.frames[0], path);
    std::ifstream in(path);
    std::string tag;
    int w = 0, h = 0, maxv = 0;
    in >> tag >> w >> h >> maxv;
    CHECK(tag == "P2");
    CHECK(w == 32);
    CHECK(h == 32);
    CHECK(maxv == 255);
    int count = 0, v = 0;
    while (in >> v) {
        CHECK(v >= 0);
        CHECK(v <= 255);
        ++count;
    }
    CHECK(count == 32 * 32);
    fs::remove_all(dir);
}

TEST_CASE("oversized sprite is a configuration error") {
    SceneConfig cfg = default_config();
    cfg.sprite = 40;
    CHECK_THROWS_AS(generate_episode(cfg, 1), ConfigError);
}
