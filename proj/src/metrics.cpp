#include "emef/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace emef {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

template <typename T>
Tensor<T> gaussian_window_11() {
    const double sigma = 1.5;
    std::vector<T> vals(121);
    double sum = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            const double d2 = (i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0);
            const double v = std::exp(-d2 / (2.0 * sigma * sigma));
            vals[static_cast<std::size_t>(i) * 11 + j] = static_cast<T>(v);
            sum += v;
        }
    for (T& v : vals) v = static_cast<T>(static_cast<double>(v) / sum);
    return Tensor<T>({1, 1, 11, 11}, std::move(vals));
}

// Luminance plane of an image at double precision.
std::vector<double> lum_plane(const Image& img) {
    std::vector<double> y(static_cast<std::size_t>(img.height) * img.width);
    if (img.channels == 1) {
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = img.data[i];
    } else if (img.channels == 3) {
        for (std::size_t i = 0; i < y.size(); ++i)
            y[i] = 0.299 * img.data[3 * i] + 0.587 * img.data[3 * i + 1] +
                   0.114 * img.data[3 * i + 2];
    } else {
        throw ShapeError("metrics expect 1- or 3-channel images");
    }
    return y;
}

std::vector<double> histogram256(const std::vector<double>& y) {
    std::vector<double> h(256, 0.0);
    for (double v : y) {
        int bin = static_cast<int>(v * 255.0 + 0.5);
        bin = std::clamp(bin, 0, 255);
        h[static_cast<std::size_t>(bin)] += 1.0;
    }
    for (double& v : h) v /= static_cast<double>(y.size());
    return h;
}

// Sobel responses on the interior; gx/gy are (H-2)x(W-2).
void sobel(const std::vector<double>& y, int H, int W, std::vector<double>& gx,
           std::vector<double>& gy) {
    gx.assign(static_cast<std::size_t>(H - 2) * (W - 2), 0.0);
    gy.assign(gx.size(), 0.0);
    auto at = [&](int r, int c) { return y[static_cast<std::size_t>(r) * W + c]; };
    for (int r = 1; r + 1 < H; ++r)
        for (int c = 1; c + 1 < W; ++c) {
            const std::size_t o = static_cast<std::size_t>(r - 1) * (W - 2) + (c - 1);
            gx[o] = (at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1)) -
                    (at(r - 1, c - 1) + 2 * at(r, c - 1) + at(r + 1, c - 1));
            gy[o] = (at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1)) -
                    (at(r - 1, c - 1) + 2 * at(r - 1, c) + at(r - 1, c + 1));
        }
}

void check_same_shape(const Image& a, const Image& b, const char* what) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels)
        throw ShapeError(std::string(what) + ": image dimensions differ");
}

} // namespace

// ---- differentiable metrics ------------------------------------------------

template <typename T>
Tensor<T> luminance_tensor(const Tensor<T>& img) {
    if (img.rank() != 4 || img.dim(0) != 1)
        throw ShapeError("luminance_tensor expects a [1,C,H,W] tensor");
    if (img.dim(1) == 1) return img;
    if (img.dim(1) != 3) throw ShapeError("luminance_tensor expects 1 or 3 channels");
    Tensor<T> w({1, 3, 1, 1}, {T(0.299), T(0.587), T(0.114)});
    Tensor<T> b({1}, T(0));
    return conv2d(img, w, b, 1, 0);
}

template <typename T>
Tensor<T> ssim_tensor(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("ssim operands must share a shape");
    Tensor<T> ya = luminance_tensor(a);
    Tensor<T> yb = luminance_tensor(b);
    if (ya.dim(2) < 11 || ya.dim(3) < 11)
        throw ShapeError("ssim needs images of at least 11x11");
    Tensor<T> win = gaussian_window_11<T>();
    Tensor<T> zb({1}, T(0));

    Tensor<T> mu_a = conv2d(ya, win, zb, 1, 0);
    Tensor<T> mu_b = conv2d(yb, win, zb, 1, 0);
    Tensor<T> aa = conv2d(mul(ya, ya), win, zb, 1, 0);
    Tensor<T> bb = conv2d(mul(yb, yb), win, zb, 1, 0);
    Tensor<T> ab = conv2d(mul(ya, yb), win, zb, 1, 0);

    Tensor<T> mu_aa = mul(mu_a, mu_a);
    Tensor<T> mu_bb = mul(mu_b, mu_b);
    Tensor<T> mu_ab = mul(mu_a, mu_b);
    Tensor<T> var_a = sub(aa, mu_aa);
    Tensor<T> var_b = sub(bb, mu_bb);
    Tensor<T> cov = sub(ab, mu_ab);

    Tensor<T> num = mul(add_scalar(scale(mu_ab, T(2)), T(kC1)),
                        add_scalar(scale(cov, T(2)), T(kC2)));
    Tensor<T> den = mul(add_scalar(add(mu_aa, mu_bb), T(kC1)),
                        add_scalar(add(var_a, var_b), T(kC2)));
    return mean_all(divide(num, den));
}

template <typename T>
MefContext<T> make_mef_context(const std::vector<Tensor<T>>& sources, int k, int stride) {
    if (sources.size() < 2) throw ShapeError("MEF-SSIM needs at least two sources");
    if (k < 2 || stride < 1) throw ShapeError("bad MEF-SSIM patch configuration");
    const int H = sources[0].dim(2), W = sources[0].dim(3);
    for (const Tensor<T>& s : sources)
        if (s.rank() != 4 || s.dim(0) != 1 || s.dim(2) != H || s.dim(3) != W)
            throw ShapeError("MEF-SSIM sources must share [1,C,H,W] dimensions");
    if (H < k || W < k) throw ShapeError("MEF-SSIM patch larger than image");

    // Luminance planes, untracked.
    std::vector<std::vector<T>> lum;
    lum.reserve(sources.size());
    for (const Tensor<T>& s : sources) {
        Tensor<T> y = luminance_tensor(s.detached());
        lum.push_back(y.values());
    }

    const int ho = (H - k) / stride + 1;
    const int wo = (W - k) / stride + 1;
    const int L = ho * wo;
    const int P = k * k;
    MefContext<T> ctx;
    ctx.k = k;
    ctx.stride = stride;
    ctx.height = H;
    ctx.width = W;
    ctx.desired = Tensor<T>({P, L});
    ctx.desired_var = Tensor<T>({1, L});

    std::vector<double> patch(static_cast<std::size_t>(P));
    std::vector<double> merged(static_cast<std::size_t>(P));
    std::vector<double> best(static_cast<std::size_t>(P));
    T* dst = ctx.desired.mutable_data();
    T* dvar = ctx.desired_var.mutable_data();

    for (int py = 0; py < ho; ++py)
        for (int px = 0; px < wo; ++px) {
            const int col = py * wo + px;
            std::fill(merged.begin(), merged.end(), 0.0);
            double cmax = 0.0;
            for (const std::vector<T>& y : lum) {
                double mean = 0.0;
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < k; ++j) {
                        const double v =
                            y[static_cast<std::size_t>(py * stride + i) * W + (px * stride + j)];
                        patch[static_cast<std::size_t>(i) * k + j] = v;
                        mean += v;
                    }
                mean /= P;
                double norm2 = 0.0;
                for (int i = 0; i < P; ++i) {
                    patch[static_cast<std::size_t>(i)] -= mean;
                    norm2 += patch[static_cast<std::size_t>(i)] * patch[static_cast<std::size_t>(i)];
                    merged[static_cast<std::size_t>(i)] += patch[static_cast<std::size_t>(i)];
                }
                cmax = std::max(cmax, std::sqrt(norm2));
            }
            double mnorm = 0.0;
            for (int i = 0; i < P; ++i) mnorm += merged[static_cast<std::size_t>(i)] * merged[static_cast<std::size_t>(i)];
            mnorm = std::max(std::sqrt(mnorm), 1e-9);
            double var = 0.0;
            for (int i = 0; i < P; ++i) {
                const double v = cmax * merged[static_cast<std::size_t>(i)] / mnorm;
                best[static_cast<std::size_t>(i)] = v;
                var += v * v;
            }
            for (int i = 0; i < P; ++i)
                dst[static_cast<std::size_t>(i) * L + col] = static_cast<T>(best[static_cast<std::size_t>(i)]);
            dvar[col] = static_cast<T>(var / P);
        }
    return ctx;
}

template <typename T>
Tensor<T> mef_ssim_tensor(const MefContext<T>& ctx, const Tensor<T>& fused) {
    if (fused.rank() != 4 || fused.dim(0) != 1 || fused.dim(2) != ctx.height ||
        fused.dim(3) != ctx.width)
        throw ShapeError("fused image does not match the MEF-SSIM context");
    Tensor<T> y = luminance_tensor(fused);
    Tensor<T> patches = unfold(reshape(y, {ctx.height, ctx.width}), ctx.k, ctx.stride);
    Tensor<T> mean = mean_axes(patches, {0});
    Tensor<T> centered = sub(patches, mean);
    Tensor<T> var = mean_axes(mul(centered, centered), {0});
    Tensor<T> cov = mean_axes(mul(ctx.desired, centered), {0});
    Tensor<T> num = add_scalar(scale(cov, T(2)), T(kC2));
    Tensor<T> den = add_scalar(add(ctx.desired_var, var), T(kC2));
    return mean_all(divide(num, den));
}

// ---- image-level conveniences ----------------------------------------------

double ssim(const Image& a, const Image& b) {
    check_same_shape(a, b, "ssim");
    return ssim_tensor(image_to_tensor<double>(a), image_to_tensor<double>(b)).value();
}

double mef_ssim(const std::vector<Image>& sources, const Image& fused, int stride) {
    std::vector<Tensor<double>> srcs;
    srcs.reserve(sources.size());
    for (const Image& s : sources) {
        check_same_shape(s, fused, "mef_ssim");
        srcs.push_back(image_to_tensor<double>(s));
    }
    MefContext<double> ctx = make_mef_context(srcs, 8, stride);
    return mef_ssim_tensor(ctx, image_to_tensor<double>(fused)).value();
}

// ---- evaluation metrics ------------------------------------------------------

double entropy_en(const Image& img) {
    std::vector<double> h = histogram256(lum_plane(img));
    double en = 0.0;
    for (double p : h)
        if (p > 0.0) en -= p * std::log2(p);
    return en;
}

double cross_entropy_ce(const std::vector<Image>& sources, const Image& fused) {
    if (sources.empty()) throw ShapeError("cross entropy needs at least one source");
    std::vector<double> hf = histogram256(lum_plane(fused));
    double acc = 0.0;
    for (const Image& s : sources) {
        check_same_shape(s, fused, "cross_entropy_ce");
        std::vector<double> hs = histogram256(lum_plane(s));
        double d = 0.0;
        for (int g = 0; g < 256; ++g)
            if (hs[static_cast<std::size_t>(g)] > 0.0)
                d += hs[static_cast<std::size_t>(g)] *
                     std::log2(hs[static_cast<std::size_t>(g)] /
                               std::max(hf[static_cast<std::size_t>(g)], 1e-12));
        acc += d;
    }
    return acc / static_cast<double>(sources.size());
}

double psnr_fusion(const std::vector<Image>& sources, const Image& fused) {
    if (sources.empty()) throw ShapeError("psnr needs at least one source");
    double acc = 0.0;
    for (const Image& s : sources) {
        check_same_shape(s, fused, "psnr_fusion");
        double mse = 0.0;
        for (std::size_t i = 0; i < s.data.size(); ++i) {
            const double d = static_cast<double>(s.data[i]) - fused.data[i];
            mse += d * d;
        }
        mse /= static_cast<double>(s.data.size());
        acc += mse <= 1e-10 ? 100.0 : std::min(100.0, 10.0 * std::log10(1.0 / mse));
    }
    return acc / static_cast<double>(sources.size());
}

double avg_gradient_ag(const Image& img) {
    std::vector<double> y = lum_plane(img);
    const int H = img.height, W = img.width;
    if (H < 2 || W < 2) return 0.0;
    double acc = 0.0;
    for (int r = 0; r + 1 < H; ++r)
        for (int c = 0; c + 1 < W; ++c) {
            const double dx = y[static_cast<std::size_t>(r) * W + c + 1] -
                              y[static_cast<std::size_t>(r) * W + c];
            const double dy = y[static_cast<std::size_t>(r + 1) * W + c] -
                              y[static_cast<std::size_t>(r) * W + c];
            acc += std::sqrt((dx * dx + dy * dy) / 2.0);
        }
    return acc / (static_cast<double>(H - 1) * (W - 1));
}

double edge_intensity_ei(const Image& img) {
    const int H = img.height, W = img.width;
    if (H < 3 || W < 3) return 0.0;
    std::vector<double> gx, gy;
    sobel(lum_plane(img), H, W, gx, gy);
    double acc = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) acc += std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
    return acc / static_cast<double>(gx.size());
}

double spatial_frequency_sf(const Image& img) {
    std::vector<double> y = lum_plane(img);
    const int H = img.height, W = img.width;
    if (H < 2 || W < 2) return 0.0;
    double rf = 0.0, cf = 0.0;
    for (int r = 0; r < H; ++r)
        for (int c = 1; c < W; ++c) {
            const double d = y[static_cast<std::size_t>(r) * W + c] -
                             y[static_cast<std::size_t>(r) * W + c - 1];
            rf += d * d;
        }
    for (int r = 1; r < H; ++r)
        for (int c = 0; c < W; ++c) {
            const double d = y[static_cast<std::size_t>(r) * W + c] -
                             y[static_cast<std::size_t>(r - 1) * W + c];
            cf += d * d;
        }
    rf /= static_cast<double>(H) * (W - 1);
    cf /= static_cast<double>(H - 1) * W;
    return std::sqrt(rf + cf);
}

namespace {

// Edge-preservation sigmoid constants.
constexpr double kGammaG = 0.9994, kKappaG = 15.0, kSigmaG = 0.5;
constexpr double kGammaA = 0.9879, kKappaA = 22.0, kSigmaA = 0.8;

double edge_sigmoid(double gamma, double kappa, double sigma, double x) {
    return gamma / (1.0 + std::exp(-kappa * (x - sigma)));
}

// Per-pixel preservation of one source against the fused image.
double edge_preservation(double ga, double aa, double gf, double af) {
    double gr;
    if (ga <= 1e-12 && gf <= 1e-12)
        gr = 1.0;
    else if (ga <= 1e-12 || gf <= 1e-12)
        gr = 0.0;
    else
        gr = ga > gf ? gf / ga : ga / gf;
    double da = std::abs(aa - af);
    if (da > 3.14159265358979323846 / 2.0) da = 3.14159265358979323846 - da;
    const double ar = 1.0 - da / (3.14159265358979323846 / 2.0);
    // Normalized by the perfect-preservation response so an exact copy
    // scores 1.
    const double ideal = edge_sigmoid(kGammaG, kKappaG, kSigmaG, 1.0) *
                         edge_sigmoid(kGammaA, kKappaA, kSigmaA, 1.0);
    return edge_sigmoid(kGammaG, kKappaG, kSigmaG, gr) *
           edge_sigmoid(kGammaA, kKappaA, kSigmaA, ar) / ideal;
}

// Gradient angle folded to (-pi/2, pi/2].
double fold_angle(double gy, double gx) {
    double a = std::atan2(gy, gx);
    const double half = 3.14159265358979323846 / 2.0;
    if (a > half) a -= 3.14159265358979323846;
    if (a <= -half) a += 3.14159265358979323846;
    return a;
}

} // namespace

double qabf(const std::vector<Image>& sources, const Image& fused) {
    if (sources.size() < 2) throw ShapeError("qabf needs at least two sources");
    const int H = fused.height, W = fused.width;
    if (H < 3 || W < 3) return 0.0;
    std::vector<double> fgx, fgy;
    sobel(lum_plane(fused), H, W, fgx, fgy);

    double num = 0.0, den = 0.0;
    for (const Image& s : sources) {
        check_same_shape(s, fused, "qabf");
        std::vector<double> sgx, sgy;
        sobel(lum_plane(s), H, W, sgx, sgy);
        for (std::size_t i = 0; i < sgx.size(); ++i) {
            const double ga = std::sqrt(sgx[i] * sgx[i] + sgy[i] * sgy[i]);
            const double gf = std::sqrt(fgx[i] * fgx[i] + fgy[i] * fgy[i]);
            const double aa = fold_angle(sgy[i], sgx[i]);
            const double af = fold_angle(fgy[i], fgx[i]);
            num += edge_preservation(ga, aa, gf, af) * ga;
            den += ga;
        }
    }
    if (den < 1e-12) return 1.0; // nothing to preserve
    return num / den;
}

double eval_metric(const std::string& name, const std::vector<Image>& sources,
                   const Image& fused) {
    if (name == "EN") return entropy_en(fused);
    if (name == "CE") return cross_entropy_ce(sources, fused);
    if (name == "PSNR") return psnr_fusion(sources, fused);
    if (name == "AG") return avg_gradient_ag(fused);
    if (name == "EI") return edge_intensity_ei(fused);
    if (name == "SF") return spatial_frequency_sf(fused);
    if (name == "QABF") return qabf(sources, fused);
    if (name == "MEF_SSIM") return mef_ssim(sources, fused);
    if (name == "SSIM") {
        double acc = 0.0;
        for (const Image& s : sources) acc += ssim(s, fused);
        return acc / static_cast<double>(sources.size());
    }
    throw ShapeError("unknown metric: " + name);
}

const std::vector<std::string>& default_metric_names() {
    static const std::vector<std::string> names = {"EN", "CE",  "PSNR", "SSIM", "MEF_SSIM",
                                                   "AG", "EI", "SF",  "QABF"};
    return names;
}

bool metric_lower_is_better(const std::string& name) { return name == "CE"; }

// ---- ranked report ------------------------------------------------------------

std::vector<int> competition_ranks(const std::vector<double>& scores, bool higher_better) {
    std::vector<int> ranks(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        int better = 0;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (j == i) continue;
            const bool j_better =
                higher_better ? scores[j] > scores[i] : scores[j] < scores[i];
            if (j_better) ++better;
        }
        ranks[i] = better + 1;
    }
    return ranks;
}

MetricReport build_report_from_scores(std::vector<std::string> methods,
                                      std::vector<std::string> metrics,
                                      std::vector<std::vector<double>> scores) {
    if (methods.empty()) throw ShapeError("report needs at least one method");
    if (scores.size() != methods.size()) throw ShapeError("score table row count mismatch");
    for (const std::vector<double>& row : scores)
        if (row.size() != metrics.size()) throw ShapeError("score table column count mismatch");

    MetricReport rep;
    rep.methods = std::move(methods);
    rep.metrics = std::move(metrics);
    rep.scores = std::move(scores);
    rep.ranks.assign(rep.methods.size(), std::vector<int>(rep.metrics.size(), 0));
    rep.overall.assign(rep.methods.size(), 0);
    for (std::size_t m = 0; m < rep.metrics.size(); ++m) {
        std::vector<double> column(rep.methods.size());
        for (std::size_t i = 0; i < rep.methods.size(); ++i) column[i] = rep.scores[i][m];
        std::vector<int> ranks = competition_ranks(column, !metric_lower_is_better(rep.metrics[m]));
        for (std::size_t i = 0; i < rep.methods.size(); ++i) {
            rep.ranks[i][m] = ranks[i];
            rep.overall[i] += ranks[i];
        }
    }
    return rep;
}

MetricReport build_report(const std::vector<std::pair<std::string, Image>>& methods,
                          const std::vector<Image>& sources,
                          const std::vector<std::string>& metric_names) {
    if (methods.size() < 2) throw ShapeError("report needs at least two methods");
    std::vector<std::string> names;
    std::vector<std::vector<double>> scores;
    for (const auto& [name, img] : methods) {
        names.push_back(name);
        std::vector<double> row;
        row.reserve(metric_names.size());
        for (const std::string& metric : metric_names)
            row.push_back(eval_metric(metric, sources, img));
        scores.push_back(std::move(row));
    }
    return build_report_from_scores(std::move(names), metric_names, std::move(scores));
}

std::string report_csv(const MetricReport& rep) {
    std::ostringstream os;
    os << "method";
    for (const std::string& m : rep.metrics) os << "," << m << "," << m << "_rank";
    os << ",overall_rank\n";
    os << std::setprecision(6) << std::fixed;
    for (std::size_t i = 0; i < rep.methods.size(); ++i) {
        os << rep.methods[i];
        for (std::size_t m = 0; m < rep.metrics.size(); ++m)
            os << "," << rep.scores[i][m] << "," << rep.ranks[i][m];
        os << "," << rep.overall[i] << "\n";
    }
    return os.str();
}

std::string report_text(const MetricReport& rep) {
    std::size_t name_w = 6;
    for (const std::string& m : rep.methods) name_w = std::max(name_w, m.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "method" << std::right;
    for (const std::string& m : rep.metrics) os << std::setw(15) << m;
    os << std::setw(9) << "overall" << "\n";
    for (std::size_t i = 0; i < rep.methods.size(); ++i) {
        os << std::left << std::setw(static_cast<int>(name_w) + 2) << rep.methods[i]
           << std::right;
        for (std::size_t m = 0; m < rep.metrics.size(); ++m) {
            std::ostringstream cell;
            cell << std::setprecision(4) << std::fixed << rep.scores[i][m] << " ("
                 << rep.ranks[i][m] << ")";
            os << std::setw(15) << cell.str();
        }
        os << std::setw(9) << rep.overall[i] << "\n";
    }
    return os.str();
}

// ---- explicit instantiation -----------------------------------------------------

#define EMEF_INSTANTIATE_METRICS(T)                                                             \
    template Tensor<T> luminance_tensor(const Tensor<T>&);                                      \
    template Tensor<T> ssim_tensor(const Tensor<T>&, const Tensor<T>&);                         \
    template struct MefContext<T>;                                                              \
    template MefContext<T> make_mef_context(const std::vector<Tensor<T>>&, int, int);           \
    template Tensor<T> mef_ssim_tensor(const MefContext<T>&, const Tensor<T>&);

EMEF_INSTANTIATE_METRICS(float)
EMEF_INSTANTIATE_METRICS(double)

#undef EMEF_INSTANTIATE_METRICS

} // namespace emef
