#pragma once

#include <string>
#include <utility>
#include <vector>

#include "emef/image.hpp"
#include "emef/tensor.hpp"

namespace emef {

// ---- differentiable metrics (tensor based) --------------------------------

// [1,3,H,W] -> [1,1,H,W] Rec.601 luma via a fixed 1x1 convolution;
// single-channel input passes through.
template <typename T>
Tensor<T> luminance_tensor(const Tensor<T>& img);

// Standard SSIM: 11x11 Gaussian window sigma=1.5, C1=0.01^2, C2=0.03^2,
// valid padding, mean over window positions. Returns a scalar tensor;
// differentiable when inputs are tracked.
template <typename T>
Tensor<T> ssim_tensor(const Tensor<T>& a, const Tensor<T>& b);

// Precomputed per-patch "desired" statistics of a source set: each 8x8
// luminance patch is mean-removed per source, the strongest contrast is kept
// and the norm-weighted structures are merged into one target patch. Constant
// across a fusion search, so it is built once and reused every iteration.
template <typename T>
struct MefContext {
    int k = 8;
    int stride = 1;
    int height = 0;
    int width = 0;
    Tensor<T> desired;     // [k*k, L], zero-mean desired patches
    Tensor<T> desired_var; // [1, L], population variance per patch
};

template <typename T>
MefContext<T> make_mef_context(const std::vector<Tensor<T>>& sources, int k = 8, int stride = 1);

// MEF-SSIM of a fused candidate against the context's desired patches:
// mean over patches of (2*cov + C2) / (var_desired + var_fused + C2),
// C2 = 0.03^2, population statistics. Differentiable w.r.t. `fused`.
template <typename T>
Tensor<T> mef_ssim_tensor(const MefContext<T>& ctx, const Tensor<T>& fused);

// ---- image-level conveniences (evaluated at 64-bit) ------------------------

double ssim(const Image& a, const Image& b);
double mef_ssim(const std::vector<Image>& sources, const Image& fused, int stride = 1);

// ---- evaluation metrics -----------------------------------------------------

double entropy_en(const Image& img);
double cross_entropy_ce(const std::vector<Image>& sources, const Image& fused);
double psnr_fusion(const std::vector<Image>& sources, const Image& fused);
double avg_gradient_ag(const Image& img);
double edge_intensity_ei(const Image& img);
double spatial_frequency_sf(const Image& img);
double qabf(const std::vector<Image>& sources, const Image& fused);

// Dispatch by metric name (EN, CE, PSNR, SSIM, MEF_SSIM, AG, EI, SF, QABF).
double eval_metric(const std::string& name, const std::vector<Image>& sources,
                   const Image& fused);

const std::vector<std::string>& default_metric_names();
bool metric_lower_is_better(const std::string& name);

// ---- ranked report ----------------------------------------------------------

struct MetricReport {
    std::vector<std::string> methods;
    std::vector<std::string> metrics;
    std::vector<std::vector<double>> scores; // [method][metric]
    std::vector<std::vector<int>> ranks;     // [method][metric]
    std::vector<int> overall;                // [method] = sum of ranks
};

/// Competition ranking: rank = 1 + number of strictly better scores; ties
// share the lower rank value.
std::vector<int> competition_ranks(const std::vector<double>& scores, bool higher_better);

MetricReport build_report_from_scores(std::vector<std::string> methods,
                                      std::vector<std::string> metrics,
                                      std::vector<std::vector<double>> scores);

MetricReport build_report(const std::vector<std::pair<std::string, Image>>& methods,
                          const std::vector<Image>& sources,
                          const std::vector<std::string>& metric_names);

std::string report_csv(const MetricReport& rep);
std::string report_text(const MetricReport& rep);

} // namespace emef
