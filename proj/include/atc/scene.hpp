#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "atc/error.hpp"

namespace atc {

// One RGB-ish frame, planes stored [3][H][W] row-major, values in [0,1].
struct Frame {
    int height = 0, width = 0;
    int timestep = 0;
    std::vector<float> planes;

    float at(int c, int y, int x) const {
        return planes[(static_cast<size_t>(c) * height + y) * width + x];
    }
    float& at(int c, int y, int x) {
        return planes[(static_cast<size_t>(c) * height + y) * width + x];
    }
};

// Dense per-pixel displacement in pixels/frame, planes (dx, dy).
struct MotionField {
    int height = 0, width = 0;
    std::vector<float> dx, dy;

    static MotionField zeros(int h, int w) {
        MotionField f;
        f.height = h;
        f.width = w;
        f.dx.assign(static_cast<size_t>(h) * w, 0.0f);
        f.dy.assign(static_cast<size_t>(h) * w, 0.0f);
        return f;
    }
};

struct SceneConfig {
    int height = 32, width = 32;
    int steps = 12;          // T, frames per episode
    int sprite = 6;          // square sprite side, both sprites
    int min_speed = 1;       // per-axis speed bounds in pixels/frame (inf-norm)
    int max_speed = 2;       // 0 => static scene
    bool distractor = true;
    float texture = 0.08f;   // background texture amplitude, 0 => uniform
    int hold = 4;            // steps between velocity resampling
    int grid = 8;            // label grid side; action vocabulary = grid^2

    void validate() const;
};

// A generated episode plus its full ground truth. Regeneration from the
// same (config, seed) is bitwise identical.
struct Episode {
    SceneConfig config;
    uint64_t seed = 0;
    std::vector<Frame> frames;                         // T
    std::vector<std::array<int, 2>> task_pos;          // (T+1) sprite top-left (y,x)
    std::vector<std::array<int, 2>> distractor_pos;    // (T+1)
    std::vector<int> task_cells;                       // (T+1) grid-cell of sprite center
    std::vector<int> distractor_cells;                 // (T+1)
    std::vector<int> labels;                           // T, = task_cells[t+1]
    std::vector<std::vector<uint8_t>> motion_masks;    // T x (H*W), pixels moving at t-1->t

    int step_count() const { return static_cast<int>(frames.size()); }
};

Episode generate_episode(const SceneConfig& config, uint64_t seed);

// Exact displacement field implied by the renderer at transition t-1 -> t.
// Background pixels are zero. Requires 1 <= t < T.
MotionField ground_truth_flow(const Episode& ep, int t);

// Episode container (little-endian binary, documented in the README).
void save_episode(const Episode& ep, const std::string& path);
Episode load_episode(const std::string& path);

// ASCII PGM (P2) luminance dump of one frame, for eyeballing.
void dump_pgm(const Frame& frame, const std::string& path);

}  // namespace atc
