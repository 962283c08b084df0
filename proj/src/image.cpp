#include "emef/image.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "emef/rng.hpp"

namespace emef {

namespace {

void validate_image(const Image& img, const std::string& what) {
    if (img.height <= 0 || img.width <= 0 || (img.channels != 1 && img.channels != 3))
        throw ShapeError(what + ": bad image dimensions");
    if (img.data.size() != static_cast<std::size_t>(img.height) * img.width * img.channels)
        throw ShapeError(what + ": pixel buffer size mismatch");
    for (float v : img.data)
        if (!(v >= 0.0f && v <= 1.0f))
            throw NumericError(what + ": pixel outside [0,1]");
}

// Reads one header token, skipping whitespace and '#' comments.
std::string next_header_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c) && c != '#') {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    if (c != EOF) in.unget();
    return tok;
}

int parse_header_int(std::istream& in, const std::string& path, const std::string& field) {
    std::string tok = next_header_token(in);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
        throw DataError(path + ": malformed " + field + " in header");
    long v = std::stol(tok);
    if (v <= 0 || v > 1 << 20) throw DataError(path + ": unreasonable " + field);
    return static_cast<int>(v);
}

float percentile(std::vector<float> values, double q) {
    if (values.empty()) throw DataError("percentile of empty data");
    std::size_t idx = static_cast<std::size_t>(q * static_cast<double>(values.size() - 1) + 0.5);
    if (idx >= values.size()) idx = values.size() - 1;
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx),
                     values.end());
    return values[idx];
}

} // namespace

ExposurePair make_exposure_pair(Image over, Image under) {
    validate_image(over, "over-exposed image");
    validate_image(under, "under-exposed image");
    if (over.height != under.height || over.width != under.width ||
        over.channels != under.channels)
        throw ShapeError("exposure pair images differ in dimensions");
    if (image_mean(over) < image_mean(under))
        throw DataError("exposure pair ordering violated: over-exposed image is darker");
    return ExposurePair{std::move(over), std::move(under)};
}

Image load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open");
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    int channels = 0;
    if (m0 == 'P' && m1 == '6')
        channels = 3;
    else if (m0 == 'P' && m1 == '5')
        channels = 1;
    else
        throw DataError(path + ": not a binary PPM/PGM (P6/P5) file");
    int width = parse_header_int(in, path, "width");
    int height = parse_header_int(in, path, "height");
    int maxval = parse_header_int(in, path, "maxval");
    if (maxval != 255) throw DataError(path + ": unsupported maxval (must be 255)");
    int ws = in.get();
    if (ws == EOF || !std::isspace(ws)) throw DataError(path + ": missing payload separator");

    Image img(height, width, channels);
    std::vector<unsigned char> raw(img.numel());
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
        throw DataError(path + ": truncated pixel payload");
    for (std::size_t i = 0; i < raw.size(); ++i)
        img.data[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

void save_ppm(const Image& img, const std::string& path) {
    validate_image(img, path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << (img.channels == 3 ? "P6" : "P5") << "\n"
        << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.numel());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        float v = img.data[i] * 255.0f + 0.5f;
        raw[i] = static_cast<unsigned char>(std::clamp(v, 0.0f, 255.0f));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw DataError(path + ": write failed");
}

RadianceMap synth_radiance(std::uint64_t seed, int size, int complexity) {
    if (size < 16) throw ShapeError("synthetic scene size must be at least 16");
    if (complexity < 1) complexity = 1;
    Rng rng = Rng::substream(seed, "radiance");
    const int H = size, W = size, C = 3;
    std::vector<double> logr(static_cast<std::size_t>(H) * W * C, 0.0);

    // The scene lives in log-radiance: a broad mid-range bulk carrying most of
    // the texture, plus compact deep shadows and a compact bright source that
    // stretch the 1st..99th percentile span past 100:1. Keeping the bulk
    // narrow is what makes a single exposure able to cover it.
    auto add_blob = [&](double cx, double cy, double r, const double amp[3], bool super) {
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double u = static_cast<double>(x) / (W - 1);
                const double v = static_cast<double>(y) / (H - 1);
                const double d2 = ((u - cx) * (u - cx) + (v - cy) * (v - cy)) / (r * r);
                const double shape = super ? std::exp(-d2 * d2) : std::exp(-0.5 * d2);
                for (int c = 0; c < C; ++c)
                    logr[(static_cast<std::size_t>(y) * W + x) * C + c] += amp[c] * shape;
            }
    };

    // Smooth base ramp with a slight per-channel tint.
    const double theta = rng.uniform(0.0, 6.283185307179586);
    const double gx = std::cos(theta), gy = std::sin(theta);
    const double ramp = rng.uniform(0.5, 1.0);
    double tint[3];
    for (double& t : tint) t = rng.uniform(-0.1, 0.1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double u = static_cast<double>(x) / (W - 1);
            const double v = static_cast<double>(y) / (H - 1);
            const double base = ramp * (gx * (u - 0.5) + gy * (v - 0.5));
            for (int c = 0; c < C; ++c)
                logr[(static_cast<std::size_t>(y) * W + x) * C + c] = base + tint[c];
        }

    // Medium soft-edged shapes (blobs and boxes) forming the scene's objects.
    for (int s = 0; s < complexity; ++s) {
        const bool blob = rng.uniform() < 0.6;
        const double cx = rng.uniform(0.1, 0.9), cy = rng.uniform(0.1, 0.9);
        const double r = rng.uniform(0.07, 0.22);
        const double amp = rng.uniform(-0.7, 0.7);
        double col[3];
        for (double& t : col) t = amp * rng.uniform(0.85, 1.15);
        if (blob) {
            add_blob(cx, cy, r, col, false);
        } else {
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double u = static_cast<double>(x) / (W - 1);
                    const double v = static_cast<double>(y) / (H - 1);
                    const double edge = 0.03;
                    const double fx = 1.0 / (1.0 + std::exp(-(r - std::abs(u - cx)) / edge));
                    const double fy = 1.0 / (1.0 + std::exp(-(r - std::abs(v - cy)) / edge));
                    const double shape = fx * fy;
                    for (int c = 0; c < C; ++c)
                        logr[(static_cast<std::size_t>(y) * W + x) * C + c] += col[c] * shape;
                }
        }
    }

    // Fine-grained speckle: many small blobs so 8x8 neighbourhoods carry
    // measurable local contrast everywhere.
    const int fine = complexity * 10;
    for (int s = 0; s < fine; ++s) {
        const double cx = rng.uniform(0.0, 1.0), cy = rng.uniform(0.0, 1.0);
        const double r = rng.uniform(0.02, 0.06);
        const double amp = rng.uniform(-0.35, 0.35);
        double col[3];
        for (double& t : col) t = amp * rng.uniform(0.9, 1.1);
        add_blob(cx, cy, r, col, false);
    }

    // Concentrated bright sources: the top percentile. The main plateau is
    // large enough that the brightest couple percent of pixels saturate in
    // every exposure.
    std::vector<std::array<double, 3>> keep_clear;
    const int sources = 1 + (rng.uniform() < 0.4 ? 1 : 0);
    for (int s = 0; s < sources; ++s) {
        const double cx = rng.uniform(0.15, 0.85), cy = rng.uniform(0.15, 0.85);
        const double r = s == 0 ? rng.uniform(0.10, 0.14) : rng.uniform(0.05, 0.08);
        const double amp = s == 0 ? rng.uniform(3.5, 4.2) : rng.uniform(2.8, 3.5);
        double col[3];
        for (double& t : col) t = amp * rng.uniform(0.95, 1.05);
        add_blob(cx, cy, r, col, true);
        keep_clear.push_back({cx, cy, r});
    }

    // Shadow pits, kept clear of the bright sources so neither cancels the
    // other: moderate ones hold recoverable dark detail, one deep pit bottoms
    // out near black in every exposure and anchors the 1st percentile.
    auto clear_spot = [&](double rr) {
        for (int attempt = 0; attempt < 20; ++attempt) {
            const double cx = rng.uniform(0.1, 0.9), cy = rng.uniform(0.1, 0.9);
            bool ok = true;
            for (const auto& s : keep_clear) {
                const double dx = cx - s[0], dy = cy - s[1];
                if (std::sqrt(dx * dx + dy * dy) < 1.2 * (rr + s[2])) ok = false;
            }
            if (ok || attempt == 19) return std::pair<double, double>(cx, cy);
        }
        return std::pair<double, double>(0.5, 0.5);
    };
    const int pits = 3 + complexity / 3;
    for (int s = 0; s < pits; ++s) {
        const double r = rng.uniform(0.07, 0.13);
        const auto [cx, cy] = clear_spot(r);
        const double amp = -rng.uniform(2.5, 3.2);
        double col[3];
        for (double& t : col) t = amp * rng.uniform(0.95, 1.05);
        add_blob(cx, cy, r, col, false);
    }
    {
        const double r = rng.uniform(0.09, 0.12);
        const auto [cx, cy] = clear_spot(r);
        const double amp = -rng.uniform(4.4, 5.2);
        double col[3];
        for (double& t : col) t = amp * rng.uniform(0.97, 1.03);
        add_blob(cx, cy, r, col, false);
    }

    // Guarantee the dynamic-range contract: if the composed field is too flat,
    // stretch it about its median until p99/p1 reaches 120.
    std::vector<float> flat(logr.size());
    for (std::size_t i = 0; i < logr.size(); ++i) flat[i] = static_cast<float>(logr[i]);
    const double p1 = percentile(flat, 0.01);
    const double p50 = percentile(flat, 0.50);
    const double p99 = percentile(flat, 0.99);
    const double span = p99 - p1;
    const double min_span = std::log(120.0);
    const double stretch = span < min_span ? min_span / std::max(span, 1e-6) : 1.0;

    RadianceMap map;
    map.height = H;
    map.width = W;
    map.channels = C;
    map.data.resize(logr.size());
    const double level = std::log(0.5);
    for (std::size_t i = 0; i < logr.size(); ++i)
        map.data[i] = static_cast<float>(std::exp(level + (logr[i] - p50) * stretch));
    return map;
}

Image expose(const RadianceMap& r, float ev, float gamma) {
    if (!(gamma > 0.0f)) throw ShapeError("exposure gamma must be positive");
    if (r.data.empty()) throw DataError("empty radiance map");
    float ref = percentile(r.data, 0.90);
    if (!(ref > 0.0f)) throw DataError("degenerate radiance map: reference percentile is zero");
    const float gain = std::pow(2.0f, ev) / ref;
    Image img(r.height, r.width, r.channels);
    for (std::size_t i = 0; i < r.data.size(); ++i) {
        float v = std::clamp(gain * r.data[i], 0.0f, 1.0f);
        img.data[i] = std::pow(v, 1.0f / gamma);
    }
    return img;
}

ExposurePair make_pair(const RadianceMap& r, float ev_over, float ev_under, float gamma) {
    if (!(ev_over > ev_under))
        throw ShapeError("over-exposure stops must exceed under-exposure stops");
    return make_exposure_pair(expose(r, ev_over, gamma), expose(r, ev_under, gamma));
}

PairDir load_pair_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError(dir + ": not a directory");
    std::vector<std::string> over_names, under_names;
    for (const fs::directory_entry& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string fn = e.path().filename().string();
        if (fn.size() > 7 && fn.substr(fn.size() - 7) == "_oe.ppm")
            over_names.push_back(fn.substr(0, fn.size() - 7));
        else if (fn.size() > 7 && fn.substr(fn.size() - 7) == "_ue.ppm")
            under_names.push_back(fn.substr(0, fn.size() - 7));
    }
    std::sort(over_names.begin(), over_names.end());
    std::sort(under_names.begin(), under_names.end());

    PairDir result;
    for (const std::string& name : over_names) {
        if (!std::binary_search(under_names.begin(), under_names.end(), name)) {
            result.warnings.push_back("orphan over-exposed image: " + name + "_oe.ppm");
            continue;
        }
        try {
            Image over = load_ppm(dir + "/" + name + "_oe.ppm");
            Image under = load_ppm(dir + "/" + name + "_ue.ppm");
            result.pairs.push_back(make_exposure_pair(std::move(over), std::move(under)));
            result.names.push_back(name);
        } catch (const std::exception& ex) {
            result.warnings.push_back("rejected pair " + name + ": " + ex.what());
        }
    }
    for (const std::string& name : under_names)
        if (!std::binary_search(over_names.begin(), over_names.end(), name))
            result.warnings.push_back("orphan under-exposed image: " + name + "_ue.ppm");
    return result;
}

Image to_luminance(const Image& img) {
    if (img.channels != 3) throw ShapeError("luminance conversion expects 3 channels");
    Image out(img.height, img.width, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(y, x, 0) = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) +
                              0.114f * img.at(y, x, 2);
    return out;
}

float image_mean(const Image& img) {
    double acc = 0.0;
    for (float v : img.data) acc += v;
    return img.data.empty() ? 0.0f : static_cast<float>(acc / static_cast<double>(img.data.size()));
}

} // namespace emef
