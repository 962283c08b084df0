#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emef/errors.hpp"
#include "emef/tensor.hpp"

namespace emef {

// Interleaved row-major pixels (RGBRGB... for 3 channels), values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::size_t numel() const { return data.size(); }
};

// Linear scene radiance; nonnegative, unbounded above.
struct RadianceMap {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;
};

// Over/under exposed capture of the same scene. Construct via
// make_exposure_pair so the brightness ordering is checked.
struct ExposurePair {
    Image over;
    Image under;
};

ExposurePair make_exposure_pair(Image over, Image under);

// Binary P6 (3-channel) / P5 (1-channel), maxval 255.
Image load_ppm(const std::string& path);
void save_ppm(const Image& img, const std::string& path);

// Deterministic synthetic scene: smooth ramp + soft-edged shapes + one bright
// source, affinely placed in log-radiance so p99/p1 >= 100.
RadianceMap synth_radiance(std::uint64_t seed, int size, int complexity = 6);

// LDR capture model: clamp(2^ev * r / r_p90, 0, 1)^(1/gamma).
Image expose(const RadianceMap& r, float ev, float gamma);

ExposurePair make_pair(const RadianceMap& r, float ev_over, float ev_under, float gamma);

struct PairDir {
    std::vector<std::string> names;
    std::vector<ExposurePair> pairs;
    std::vector<std::string> warnings;
};

// Scans for <name>_oe.ppm / <name>_ue.ppm couples, sorted by name. Orphans
// and dimension-mismatched couples are skipped and reported in `warnings`.
PairDir load_pair_dir(const std::string& dir);

// Rec.601 luma; requires a 3-channel input.
Image to_luminance(const Image& img);

float image_mean(const Image& img);

// Planar [1,C,H,W] tensor from interleaved pixels and back. Values are
// clamped to [0,1] on the way back to an image.
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
    Tensor<T> t({1, img.channels, img.height, img.width});
    T* p = t.mutable_data();
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                p[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * img.width +
                  x] = static_cast<T>(img.at(y, x, c));
    return t;
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
    if (t.rank() != 4 || t.dim(0) != 1)
        throw ShapeError("tensor_to_image expects a [1,C,H,W] tensor");
    const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
    Image img(H, W, C);
    const T* p = t.data();
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                T v = p[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * W + x];
                if (v < T(0)) v = T(0);
                if (v > T(1)) v = T(1);
                img.at(y, x, c) = static_cast<float>(v);
            }
    return img;
}

// Stacks over then under into a [1,2C,H,W] network input.
template <typename T>
Tensor<T> pair_to_tensor(const ExposurePair& pair) {
    Tensor<T> a = image_to_tensor<T>(pair.over);
    Tensor<T> b = image_to_tensor<T>(pair.under);
    return concat_channels(a, b);
}

} // namespace emef
