#include "atc/flow.hpp"

#include <algorithm>
#include <cmath>

#include "atc/error.hpp"

namespace atc {

MotionField estimate_flow(const Frame& prev, const Frame& cur, int block, int radius,
                          FlopCounter* flops) {
    if (prev.height != cur.height || prev.width != cur.width)
        throw ContractError("estimate_flow: frame shapes differ");
    const int h = cur.height, w = cur.width;
    if (block <= 0 || h % block != 0 || w % block != 0)
        throw ContractError("estimate_flow: block must divide frame dims");
    if (radius < 0) throw ContractError("estimate_flow: radius must be >= 0");

    MotionField out = MotionField::zeros(h, w);
    int64_t compares = 0;
    for (int by = 0; by < h / block; ++by) {
        for (int bx = 0; bx < w / block; ++bx) {
            const int y0 = by * block, x0 = bx * block;
            float best_sad = 0.0f;
            int best_mag = 0, best_dy = 0, best_dx = 0;
            bool first = true;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int sy = y0 - dy, sx = x0 - dx;
                    if (sy < 0 || sx < 0 || sy + block > h || sx + block > w) continue;
                    float sad = 0.0f;
                    for (int c = 0; c < 3; ++c)
                        for (int py = 0; py < block; ++py)
                            for (int px = 0; px < block; ++px)
                                sad += std::abs(cur.at(c, y0 + py, x0 + px) -
                                                prev.at(c, sy + py, sx + px));
                    compares += static_cast<int64_t>(block) * block * 3;
                    const int mag = dy * dy + dx * dx;
                    const bool better =
                        first || sad < best_sad ||
                        (sad == best_sad &&
                         (mag < best_mag ||
                          (mag == best_mag &&
                           (dy < best_dy || (dy == best_dy && dx < best_dx)))));
                    if (better) {
                        best_sad = sad;
                        best_mag = mag;
                        best_dy = dy;
                        best_dx = dx;
                        first = false;
                    }
                }
            }
            for (int py = 0; py < block; ++py)
                for (int px = 0; px < block; ++px) {
                    const size_t i = static_cast<size_t>(y0 + py) * w + (x0 + px);
                    out.dy[i] = static_cast<float>(best_dy);
                    out.dx[i] = static_cast<float>(best_dx);
                }
        }
    }
    if (flops) flops->add(FlopBucket::flow, compares * 3);
    return out;
}

int64_t flow_sad_flops(int height, int width, int block, int radius) {
    int64_t compares = 0;
    for (int by = 0; by < height / block; ++by) {
        for (int bx = 0; bx < width / block; ++bx) {
            const int y0 = by * block, x0 = bx * block;
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    const int sy = y0 - dy, sx = x0 - dx;
                    if (sy < 0 || sx < 0 || sy + block > height || sx + block > width) continue;
                    compares += static_cast<int64_t>(block) * block * 3;
                }
            }
        }
    }
    return compares * 3;
}

Tensor build_motion_input(const Frame& frame, const MotionField& flow, float max_speed) {
    if (frame.height != flow.height || frame.width != flow.width)
        throw ContractError("build_motion_input: frame/flow shapes differ");
    if (!(max_speed > 0.0f)) throw ContractError("build_motion_input: max_speed must be > 0");
    const size_t hw = static_cast<size_t>(frame.height) * frame.width;
    Tensor v({5, frame.height, frame.width});
    std::copy(frame.planes.begin(), frame.planes.end(), v.data());
    const float inv = 1.0f / max_speed;
    for (size_t i = 0; i < hw; ++i) {
        v.data()[3 * hw + i] = std::clamp(flow.dx[i] * inv, -1.0f, 1.0f);
        v.data()[4 * hw + i] = std::clamp(flow.dy[i] * inv, -1.0f, 1.0f);
    }
    return v;
}

std::vector<float> token_flow_magnitude(const MotionField& flow, int patch) {
    if (patch <= 0 || flow.height % patch != 0 || flow.width % patch != 0)
        throw ContractError("token_flow_magnitude: patch must divide dims");
    const int gh = flow.height / patch, gw = flow.width / patch;
    std::vector<float> mag(static_cast<size_t>(gh) * gw, 0.0f);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            float acc = 0.0f;
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px) {
                    const size_t i =
                        static_cast<size_t>(gy * patch + py) * flow.width + (gx * patch + px);
                    acc += std::sqrt(flow.dx[i] * flow.dx[i] + flow.dy[i] * flow.dy[i]);
                }
            mag[static_cast<size_t>(gy) * gw + gx] = acc / static_cast<float>(patch * patch);
        }
    return mag;
}

}  // namespace atc
