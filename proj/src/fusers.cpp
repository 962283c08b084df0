#include "emef/fusers.hpp"

#include <algorithm>
#include <cmath>

namespace emef {

namespace {

// Single-channel plane with its own dimensions; pyramid levels shrink.
struct Plane {
    int h = 0, w = 0;
    std::vector<float> v;
    Plane() = default;
    Plane(int h_, int w_, float fill = 0.0f)
        : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {}
    float at(int y, int x) const {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return v[static_cast<std::size_t>(y) * w + x];
    }
    float& ref(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
};

// 5-tap binomial blur, replicate border, separable.
Plane blur5(const Plane& p) {
    static const float k[5] = {1.0f / 16, 4.0f / 16, 6.0f / 16, 4.0f / 16, 1.0f / 16};
    Plane tmp(p.h, p.w), out(p.h, p.w);
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            float acc = 0.0f;
            for (int t = -2; t <= 2; ++t) acc += k[t + 2] * p.at(y, x + t);
            tmp.ref(y, x) = acc;
        }
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            float acc = 0.0f;
            for (int t = -2; t <= 2; ++t) acc += k[t + 2] * tmp.at(y + t, x);
            out.ref(y, x) = acc;
        }
    return out;
}

Plane downsample(const Plane& p) {
    Plane b = blur5(p);
    Plane out((p.h + 1) / 2, (p.w + 1) / 2);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) out.ref(y, x) = b.at(2 * y, 2 * x);
    return out;
}

Plane upsample_to(const Plane& p, int h, int w) {
    Plane big(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) big.ref(y, x) = p.at(y / 2, x / 2);
    return blur5(big);
}

// Box mean with in-bounds window normalization (preserves constants).
Plane box_mean(const Plane& p, int radius) {
    if (radius <= 0) return p;
    Plane tmp(p.h, p.w), out(p.h, p.w);
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            float acc = 0.0f;
            int n = 0;
            for (int t = -radius; t <= radius; ++t) {
                int c = x + t;
                if (c < 0 || c >= p.w) continue;
                acc += p.v[static_cast<std::size_t>(y) * p.w + c];
                ++n;
            }
            tmp.ref(y, x) = acc / static_cast<float>(n);
        }
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            float acc = 0.0f;
            int n = 0;
            for (int t = -radius; t <= radius; ++t) {
                int r = y + t;
                if (r < 0 || r >= p.h) continue;
                acc += tmp.v[static_cast<std::size_t>(r) * p.w + x];
                ++n;
            }
            out.ref(y, x) = acc / static_cast<float>(n);
        }
    return out;
}

Plane luminance_plane(const Image& img) {
    Image y = img.channels == 3 ? to_luminance(img) : img;
    Plane p(img.height, img.width);
    p.v.assign(y.data.begin(), y.data.end());
    return p;
}

// Per-channel planes of an image.
std::vector<Plane> channel_planes(const Image& img) {
    std::vector<Plane> planes(static_cast<std::size_t>(img.channels), Plane(img.height, img.width));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) planes[static_cast<std::size_t>(c)].ref(y, x) = img.at(y, x, c);
    return planes;
}

Image planes_to_image(const std::vector<Plane>& planes) {
    const int h = planes[0].h, w = planes[0].w, ch = static_cast<int>(planes.size());
    Image img(h, w, ch);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < ch; ++c)
                img.at(y, x, c) = std::clamp(planes[static_cast<std::size_t>(c)].at(y, x), 0.0f, 1.0f);
    return img;
}

Plane well_exposedness_plane(const Plane& lum) {
    Plane w(lum.h, lum.w);
    for (std::size_t i = 0; i < lum.v.size(); ++i) {
        const float d = lum.v[i] - 0.5f;
        w.v[i] = std::exp(-(d * d) / (2.0f * 0.2f * 0.2f));
    }
    return w;
}

// Normalizes a pair of weight planes so they sum to one per pixel.
void normalize_pair(Plane& a, Plane& b) {
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        const float s = a.v[i] + b.v[i] + 1e-12f;
        a.v[i] /= s;
        b.v[i] /= s;
    }
}

// Sobel gradient magnitude with replicate border, same size as input.
Plane sobel_magnitude(const Plane& p) {
    Plane g(p.h, p.w);
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            const float gx = (p.at(y - 1, x + 1) + 2 * p.at(y, x + 1) + p.at(y + 1, x + 1)) -
                             (p.at(y - 1, x - 1) + 2 * p.at(y, x - 1) + p.at(y + 1, x - 1));
            const float gy = (p.at(y + 1, x - 1) + 2 * p.at(y + 1, x) + p.at(y + 1, x + 1)) -
                             (p.at(y - 1, x - 1) + 2 * p.at(y - 1, x) + p.at(y - 1, x + 1));
            g.ref(y, x) = std::sqrt(gx * gx + gy * gy);
        }
    return g;
}

Image weighted_blend(const ExposurePair& pair, const Plane& wo, const Plane& wu) {
    Image out(pair.over.height, pair.over.width, pair.over.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < out.channels; ++c)
                out.at(y, x, c) = std::clamp(
                    wo.at(y, x) * pair.over.at(y, x, c) + wu.at(y, x) * pair.under.at(y, x, c),
                    0.0f, 1.0f);
    return out;
}

} // namespace

WeightMap well_exposedness_weights(const ExposurePair& pair) {
    Plane wo = well_exposedness_plane(luminance_plane(pair.over));
    Plane wu = well_exposedness_plane(luminance_plane(pair.under));
    normalize_pair(wo, wu);
    WeightMap map;
    map.height = pair.over.height;
    map.width = pair.over.width;
    map.over = std::move(wo.v);
    map.under = std::move(wu.v);
    return map;
}

Image fuse_pyramid(const ExposurePair& pair, int levels) {
    if (levels < 1) throw ShapeError("pyramid fusion needs at least one level");
    const int div = 1 << (levels - 1);
    if (pair.over.height % div != 0 || pair.over.width % div != 0)
        throw ShapeError("image side not divisible by 2^(levels-1)");

    Plane wo = well_exposedness_plane(luminance_plane(pair.over));
    Plane wu = well_exposedness_plane(luminance_plane(pair.under));
    normalize_pair(wo, wu);

    // Gaussian pyramids of the weights.
    std::vector<Plane> wop{wo}, wup{wu};
    for (int l = 1; l < levels; ++l) {
        wop.push_back(downsample(wop.back()));
        wup.push_back(downsample(wup.back()));
    }

    std::vector<Plane> over_ch = channel_planes(pair.over);
    std::vector<Plane> under_ch = channel_planes(pair.under);
    std::vector<Plane> fused_ch;
    for (std::size_t c = 0; c < over_ch.size(); ++c) {
        // Gaussian pyramids of this channel.
        std::vector<Plane> go{over_ch[c]}, gu{under_ch[c]};
        for (int l = 1; l < levels; ++l) {
            go.push_back(downsample(go.back()));
            gu.push_back(downsample(gu.back()));
        }
        // Blend Laplacian levels; the coarsest level blends the Gaussians.
        Plane acc(go.back().h, go.back().w);
        for (std::size_t i = 0; i < acc.v.size(); ++i)
            acc.v[i] = wop.back().v[i] * go.back().v[i] + wup.back().v[i] * gu.back().v[i];
        for (int l = levels - 2; l >= 0; --l) {
            Plane up_o = upsample_to(go[static_cast<std::size_t>(l) + 1], go[static_cast<std::size_t>(l)].h, go[static_cast<std::size_t>(l)].w);
            Plane up_u = upsample_to(gu[static_cast<std::size_t>(l) + 1], gu[static_cast<std::size_t>(l)].h, gu[static_cast<std::size_t>(l)].w);
            Plane up_acc = upsample_to(acc, go[static_cast<std::size_t>(l)].h, go[static_cast<std::size_t>(l)].w);
            Plane next(go[static_cast<std::size_t>(l)].h, go[static_cast<std::size_t>(l)].w);
            for (std::size_t i = 0; i < next.v.size(); ++i) {
                const float lap_o = go[static_cast<std::size_t>(l)].v[i] - up_o.v[i];
                const float lap_u = gu[static_cast<std::size_t>(l)].v[i] - up_u.v[i];
                next.v[i] = up_acc.v[i] + wop[static_cast<std::size_t>(l)].v[i] * lap_o +
                            wup[static_cast<std::size_t>(l)].v[i] * lap_u;
            }
            acc = std::move(next);
        }
        fused_ch.push_back(std::move(acc));
    }
    return planes_to_image(fused_ch);
}

Image fuse_smoothed(const ExposurePair& pair, int radius) {
    if (radius < 0) throw ShapeError("box smoothing radius must be nonnegative");
    Plane wo = well_exposedness_plane(luminance_plane(pair.over));
    Plane wu = well_exposedness_plane(luminance_plane(pair.under));
    normalize_pair(wo, wu);
    for (int pass = 0; pass < 3 && radius > 0; ++pass) {
        wo = box_mean(wo, radius);
        wu = box_mean(wu, radius);
    }
    normalize_pair(wo, wu);
    return weighted_blend(pair, wo, wu);
}

Image fuse_gradient(const ExposurePair& pair) {
    Plane lo = luminance_plane(pair.over);
    Plane lu = luminance_plane(pair.under);
    Plane go = sobel_magnitude(lo);
    Plane gu = sobel_magnitude(lu);
    Plane eo = well_exposedness_plane(lo);
    Plane eu = well_exposedness_plane(lu);
    // Each gradient map is taken relative to its image's global gradient
    // level, so a mostly-flat exposure still competes hard at its few real
    // edges instead of being drowned out by the busier exposure.
    auto mean_of = [](const Plane& p) {
        double acc = 0.0;
        for (float v : p.v) acc += v;
        return static_cast<float>(acc / static_cast<double>(p.v.size()));
    };
    const float no = mean_of(go) + 1e-6f;
    const float nu = mean_of(gu) + 1e-6f;
    Plane wo(lo.h, lo.w), wu(lo.h, lo.w);
    for (std::size_t i = 0; i < wo.v.size(); ++i) {
        wo.v[i] = (go.v[i] / no + 1e-4f) * eo.v[i];
        wu.v[i] = (gu.v[i] / nu + 1e-4f) * eu.v[i];
    }
    normalize_pair(wo, wu);
    return weighted_blend(pair, wo, wu);
}

Image fuse_average(const ExposurePair& pair) {
    Plane wo = well_exposedness_plane(luminance_plane(pair.over));
    Plane wu = well_exposedness_plane(luminance_plane(pair.under));
    normalize_pair(wo, wu);
    Image blended = weighted_blend(pair, wo, wu);

    // Mild global contrast stretch: 1st..99th percentile onto [0,1].
    std::vector<float> vals = blended.data;
    const std::size_t n = vals.size();
    auto pick = [&](double q) {
        std::size_t idx = static_cast<std::size_t>(q * static_cast<double>(n - 1) + 0.5);
        std::nth_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(idx), vals.end());
        return vals[idx];
    };
    const float p1 = pick(0.01);
    const float p99 = pick(0.99);
    if (p99 - p1 > 1e-6f) {
        const float inv = 1.0f / (p99 - p1);
        for (float& v : blended.data) v = std::clamp((v - p1) * inv, 0.0f, 1.0f);
    }
    return blended;
}

namespace {
const std::vector<std::string> kFuserNames = {"pyramid", "smoothed", "gradient", "average"};
}

int fuser_count() { return static_cast<int>(kFuserNames.size()); }

const std::string& fuser_name(int id) {
    if (id < 0 || id >= fuser_count()) throw ShapeError("unknown fuser id");
    return kFuserNames[static_cast<std::size_t>(id)];
}

Image run_target(int id, const ExposurePair& pair) {
    switch (id) {
        case 0: return fuse_pyramid(pair);
        case 1: return fuse_smoothed(pair);
        case 2: return fuse_gradient(pair);
        case 3: return fuse_average(pair);
        default: throw ShapeError("unknown fuser id");
    }
}

} // namespace emef
