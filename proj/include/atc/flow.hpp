#pragma once

#include <cstdint>
#include <vector>

#include "atc/flops.hpp"
#include "atc/scene.hpp"
#include "atc/tensor.hpp"

namespace atc {

// Block-matching optical flow: per block, the integer displacement in
// [-radius, radius]^2 minimizing the sum of absolute differences between the
// current block and the previous frame window it came from. Ties prefer the
// smaller displacement magnitude, then lexicographic (dy, dx). Candidates
// whose source window leaves the frame are skipped; (0,0) is always valid.
MotionField estimate_flow(const Frame& prev, const Frame& cur, int block, int radius,
                          FlopCounter* flops = nullptr);

// Exact operation count of estimate_flow for these dims: every evaluated
// candidate compares block^2 pixels x 3 channels at 3 ops per compare.
int64_t flow_sad_flops(int height, int width, int block, int radius);

// Motion-aware policy input: channels [R,G,B, dx/max_speed, dy/max_speed],
// flow channels clamped to [-1, 1].
Tensor build_motion_input(const Frame& frame, const MotionField& flow, float max_speed);

// Mean per-token flow magnitude over the patch grid (row-major), the signal
// behind the rule-based caching baseline.
std::vector<float> token_flow_magnitude(const MotionField& flow, int patch);

}  // namespace atc
