#pragma once

#include <string>
#include <vector>

#include "emef/image.hpp"

namespace emef {

// Per-pixel blending weights for the two sources; normalized so
// over + under = 1 at every pixel.
struct WeightMap {
    int height = 0;
    int width = 0;
    std::vector<float> over;
    std::vector<float> under;
};

/// Gaussian-of-luminance weighting favoring mid-tones:
// exp(-(Y - 0.5)^2 / (2 * 0.2^2)), normalized across the two sources.
WeightMap well_exposedness_weights(const ExposurePair& pair);

// The four deterministic fusion targets.
Image fuse_pyramid(const ExposurePair& pair, int levels = 4);
Image fuse_smoothed(const ExposurePair& pair, int radius = 4);
Image fuse_gradient(const ExposurePair& pair);
Image fuse_average(const ExposurePair& pair);

// Dense registry of the ensemble targets, index 0..3.
int fuser_count();
const std::string& fuser_name(int id);
Image run_target(int id, const ExposurePair& pair);

} // namespace emef
