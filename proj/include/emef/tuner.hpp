#pragma once

#include <string>
#include <vector>

#include "emef/image.hpp"
#include "emef/imitator.hpp"

namespace emef {

// style_code: gradient descent over the n-dimensional style code (the
// paper's main path). latent_code: the same search over the d_latent
// vector, bypassing the mapping MLP. pick_gt / pick_imitation: no search,
// just the best raw fuser output / best single imitation by MEF-SSIM.
enum class TuneMode { style_code, latent_code, pick_gt, pick_imitation };

struct TunerConfig {
    float alpha0 = 0.05f; // initial step size
    int steps = 60;       // iteration cap
    int decay_window = 20; // step size falls linearly to 1/window within a window,
                           // then restarts at half the previous amplitude
    float tol = 1e-4f;     // relative loss-change threshold ...
    int tol_patience = 5;  // ... sustained this many consecutive steps stops early
    TuneMode mode = TuneMode::style_code;

    void validate() const;
};

struct TraceEntry {
    int iteration = 0;
    double loss = 0.0;  // 1 - MEF-SSIM at this iterate
    double alpha = 0.0; // step size applied after the evaluation
    std::vector<float> code;
};

struct TuneResult {
    std::vector<float> best_code; // style code, or latent vector in that mode
    Image best_image;             // one clean forward at best_code
    std::vector<TraceEntry> trace;
    int iterations_used = 0;
    double best_loss = 0.0;
};

// Step size for 0-based iteration t under the windowed decay-and-restart
// schedule.
double tuner_step_size(const TunerConfig& cfg, int t);

// Deterministic softened one-hot used at inference time (hot 0.75, the
// midpoint of the training range; others 0.25).
std::vector<float> inference_code(int hot_index, int n);

// Searches the code space for the fused image maximizing MEF-SSIM against
// the pair, starting from the all-ones code (or its mapped latent). The
// best iterate is retained, so the reported loss never exceeds the initial
// one. Deterministic; no randomness is involved.
TuneResult tune(const ExposurePair& pair, const GeneratorParams<float>& g,
                const TunerConfig& cfg = {});

// End-to-end fusion entry point: dispatches on cfg.mode.
Image fuse(const ExposurePair& pair, const GeneratorParams<float>& g,
           const TunerConfig& cfg = {});

// The selection / latent ablations of the search strategy; cfg.mode must be
// pick_gt, pick_imitation or latent_code.
Image ablation_pick(const ExposurePair& pair, const GeneratorParams<float>& g,
                    const TunerConfig& cfg);

void write_trace_csv(const TuneResult& result, const std::string& path);

const char* tune_mode_name(TuneMode mode);
TuneMode parse_tune_mode(const std::string& name);

} // namespace emef
