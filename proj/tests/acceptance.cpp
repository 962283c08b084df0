// Acceptance suite: nine behavioral criteria for the fusion engine, printed
// one PASS/FAIL line each. Exits with the number of failed criteria.
// Thresholds and run settings are pinned here on purpose — edit consciously.
//
// Lines starting with "# " are progress notes; the verdict lines all match
// "criterion <n>: PASS|FAIL ...". An optional argument restricts the run,
// e.g. "--only 1,2,9" or "--only 5-8" (criteria 5-8 share two pretrained
// models, so asking for any of them trains whatever is needed).

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "emef/fusers.hpp"
#include "emef/image.hpp"
#include "emef/imitator.hpp"
#include "emef/metrics.hpp"
#include "emef/rng.hpp"
#include "emef/tensor.hpp"
#include "emef/training.hpp"
#include "emef/tuner.hpp"

namespace fs = std::filesystem;
using namespace emef;

namespace {

// ---- pinned run settings ---------------------------------------------------

constexpr int kTrainPairs = 64;
constexpr int kHeldOutPairs = 16;
constexpr int kPairSize = 64;
constexpr std::uint64_t kTrainSceneBase = 5000;
constexpr std::uint64_t kHeldSceneBase = 9000;
constexpr float kEvOver = 2.0f, kEvUnder = -2.0f, kGamma = 2.2f;
constexpr std::uint64_t kTrainSeed = 11;
constexpr int kEpochs = 80;

// The tuner's library default step size (0.05) suits long schedules; under
// the halving restarts the total travel is bounded by 21*alpha0, which from
// the all-ones start stops short of the good basin at this scale. 0.5
// converges comfortably inside the 60-step budget.
constexpr float kTuneAlpha0 = 0.5f;
constexpr int kTuneSteps = 60;

// ---- pinned tolerances -------------------------------------------------------

constexpr double kOpGradTol = 1e-4;          // criterion 1, per-op FD mismatch
constexpr double kCompositionGradTol = 1e-3; // criterion 1, generator + MEF-SSIM
constexpr double kGradRuntimeSec = 120.0;    // criterion 1
constexpr double kDemodNormTol = 1e-3;       // criterion 2, |norm^2 - 1|
constexpr double kExactTol = 1e-12;          // criterion 3, closed-form values
constexpr double kMefOffsetTol = 1e-6;       // criterion 3
constexpr double kStitchedMin = 0.999;       // criterion 3
constexpr int kLabelDraws = 100000;          // criterion 4
constexpr double kFidelityMin = 0.85;        // criterion 5, per-target SSIM
constexpr double kPretrainBudgetMin = 30.0;  // criterion 5, CPU minutes
constexpr double kTunePairBudgetSec = 60.0;  // criterion 6, wall seconds
constexpr double kPickMargin = 0.005;        // criterion 7

// ---- reporting ---------------------------------------------------------------

int g_failures = 0;
std::map<int, bool> g_verdicts;

std::string fmt(const char* f, ...) {
    char buf[768];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

void note(const std::string& msg) {
    std::printf("# %s\n", msg.c_str());
    std::fflush(stdout);
}

void report(int id, bool pass, const std::string& detail) {
    std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    g_verdicts[id] = pass;
    if (!pass) ++g_failures;
}

// ---- shared fixtures ------------------------------------------------------------

const std::vector<TrainingSample>& train_dataset() {
    static const std::vector<TrainingSample> ds = [] {
        std::vector<ExposurePair> pairs;
        pairs.reserve(kTrainPairs);
        for (int i = 0; i < kTrainPairs; ++i)
            pairs.push_back(make_pair(
                synth_radiance(kTrainSceneBase + static_cast<std::uint64_t>(i), kPairSize),
                kEvOver, kEvUnder, kGamma));
        return build_dataset(pairs);
    }();
    return ds;
}

const std::vector<ExposurePair>& held_pairs() {
    static const std::vector<ExposurePair> held = [] {
        std::vector<ExposurePair> v;
        v.reserve(kHeldOutPairs);
        for (int h = 0; h < kHeldOutPairs; ++h)
            v.push_back(make_pair(
                synth_radiance(kHeldSceneBase + static_cast<std::uint64_t>(h), kPairSize),
                kEvOver, kEvUnder, kGamma));
        return v;
    }();
    return held;
}

TunerConfig tuner_config() {
    TunerConfig tc;
    tc.alpha0 = kTuneAlpha0;
    tc.steps = kTuneSteps;
    return tc;
}

// Everything criteria 5-8 need from one pretrained model, evaluated on the
// held-out pairs: imitation fidelity, per-target and best-imitation MEF-SSIM,
// and the tuner's behavior/result.
struct DeskEval {
    double cpu_min = 0.0;
    double first_loss = 0.0, last_loss = 0.0;
    double fid[4] = {0, 0, 0, 0};  // mean SSIM(imitation_i, target_i)
    double imit[4] = {0, 0, 0, 0}; // mean MEF-SSIM of imitation i
    double tuned = 0.0;            // mean MEF-SSIM after tuning
    double pick = 0.0;             // mean of per-pair best imitation
    int improved = 0;              // pairs with tuned >= initial (image level)
    bool ones_init = true;
    bool best_is_min = true; // reported best equals the trace minimum
    double worst_pair_sec = 0.0;
};

DeskEval desk_eval(bool hard_labels) {
    note(fmt("pretraining the %s-label model: %d pairs, %d epochs (several minutes)",
             hard_labels ? "hard" : "soft", kTrainPairs, kEpochs));
    TrainingConfig cfg;
    cfg.epochs = kEpochs;
    cfg.seed = kTrainSeed;
    cfg.checkpoint_every = 0;
    cfg.hard_labels = hard_labels;

    DeskEval ev;
    const std::clock_t c0 = std::clock();
    TrainingResult res = pretrain(train_dataset(), cfg, "");
    ev.cpu_min = static_cast<double>(std::clock() - c0) / CLOCKS_PER_SEC / 60.0;
    ev.first_loss = res.history.front().ssim_loss;
    ev.last_loss = res.history.back().ssim_loss;

    const std::vector<float> ones(static_cast<std::size_t>(fuser_count()), 1.0f);
    const TunerConfig tc = tuner_config();
    const int n = static_cast<int>(held_pairs().size());
    for (const ExposurePair& p : held_pairs()) {
        const std::vector<Image> src = {p.over, p.under};

        const auto t0 = std::chrono::steady_clock::now();
        TuneResult r = tune(p, res.generator, tc);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        ev.worst_pair_sec = std::max(ev.worst_pair_sec, secs);

        for (float c : r.trace.front().code)
            if (c != 1.0f) ev.ones_init = false;
        double min_loss = r.trace.front().loss;
        for (const TraceEntry& e : r.trace) min_loss = std::min(min_loss, e.loss);
        if (std::abs(r.best_loss - min_loss) > 1e-12) ev.best_is_min = false;

        const double tuned_s = mef_ssim(src, r.best_image);
        const double init_s = mef_ssim(src, generate_image(p, ones, res.generator));
        ev.tuned += tuned_s;
        if (tuned_s >= init_s) ++ev.improved;

        double best_imit = -1.0;
        for (int i = 0; i < fuser_count(); ++i) {
            Image im = generate_image(p, inference_code(i, fuser_count()), res.generator);
            const double s = mef_ssim(src, im);
            ev.imit[i] += s;
            best_imit = std::max(best_imit, s);
            ev.fid[i] += ssim(im, run_target(i, p));
        }
        ev.pick += best_imit;
    }
    ev.tuned /= n;
    ev.pick /= n;
    for (int i = 0; i < 4; ++i) {
        ev.fid[i] /= n;
        ev.imit[i] /= n;
    }
    note(fmt("%s-label model: loss %.4f->%.4f in %.1f CPU-min; tuned %.4f, pick %.4f, "
             "fid %.3f/%.3f/%.3f/%.3f",
             hard_labels ? "hard" : "soft", ev.first_loss, ev.last_loss, ev.cpu_min, ev.tuned,
             ev.pick, ev.fid[0], ev.fid[1], ev.fid[2], ev.fid[3]));
    return ev;
}

const DeskEval& soft_eval() {
    static const DeskEval ev = desk_eval(false);
    return ev;
}

const DeskEval& hard_eval() {
    static const DeskEval ev = desk_eval(true);
    return ev;
}

// ---- criterion 1: gradients match finite differences ---------------------------

using Tensors = std::vector<Tensor<double>>;

// Central finite differences over every element of every input against one
// reverse-mode sweep. `build` must be a pure function of the input values.
double fd_max_rel_err(const std::function<Tensor<double>(const Tensors&)>& build,
                      Tensors inputs, double h = 1e-6) {
    Tape<double> tape;
    Tensors tracked;
    tracked.reserve(inputs.size());
    for (Tensor<double>& t : inputs) tracked.push_back(t.on(tape));
    Tensor<double> loss = build(tracked);
    tape.backward(loss);

    double worst = 0.0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        double* data = inputs[ti].mutable_data();
        for (std::size_t i = 0; i < inputs[ti].numel(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = build(inputs).value();
            data[i] = saved - h;
            const double down = build(inputs).value();
            data[i] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double an = tracked[ti].grad()[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
    }
    return worst;
}

Tensor<double> rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t.mutable_data()[i] = rng.uniform(lo, hi);
    return t;
}

// Seeded fixed-weight contraction so every output element feeds the scalar
// loss with a distinct coefficient. Pure: the same seed gives the same
// weights on every call.
Tensor<double> pick_loss(const Tensor<double>& out, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> w(out.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) w.mutable_data()[i] = rng.uniform(-1.0, 1.0);
    return sum_all(mul(out, w));
}

void criterion_1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(401);
    double worst_op = 0.0;
    std::string worst_name = "-";

    auto check = [&](const std::string& name,
                     const std::function<Tensor<double>(const Tensors&)>& build,
                     Tensors inputs) {
        const double e = fd_max_rel_err(build, std::move(inputs));
        if (e > worst_op) {
            worst_op = e;
            worst_name = name;
        }
    };

    check("add", [](const Tensors& v) { return pick_loss(add(v[0], v[1]), 402); },
          {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)});
    check("sub", [](const Tensors& v) { return pick_loss(sub(v[0], v[1]), 403); },
          {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)});
    check("mul", [](const Tensors& v) { return pick_loss(mul(v[0], v[1]), 404); },
          {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng)});
    check("divide", [](const Tensors& v) { return pick_loss(divide(v[0], v[1]), 405); },
          {rand_tensor({2, 3}, rng), rand_tensor({2, 3}, rng, 0.5, 1.5)});
    check("scale", [](const Tensors& v) { return pick_loss(scale(v[0], 1.7), 406); },
          {rand_tensor({2, 3}, rng)});
    check("add_scalar", [](const Tensors& v) { return pick_loss(add_scalar(v[0], 0.3), 407); },
          {rand_tensor({2, 3}, rng)});
    {
        // keep the inputs away from the kink at zero
        Tensor<double> x = rand_tensor({2, 3}, rng);
        for (std::size_t i = 0; i < x.numel(); ++i) {
            double& v = x.mutable_data()[i];
            if (std::abs(v) < 0.05) v += v < 0 ? -0.1 : 0.1;
        }
        check("relu", [](const Tensors& v) { return pick_loss(relu(v[0]), 408); }, {x});
        check("leaky_relu",
              [](const Tensors& v) { return pick_loss(leaky_relu(v[0], 0.2), 409); }, {x});
    }
    check("tanh", [](const Tensors& v) { return pick_loss(emef::tanh(v[0]), 410); },
          {rand_tensor({2, 3}, rng)});
    check("sigmoid", [](const Tensors& v) { return pick_loss(sigmoid(v[0]), 411); },
          {rand_tensor({2, 3}, rng)});
    check("sqrt", [](const Tensors& v) { return pick_loss(emef::sqrt(v[0]), 412); },
          {rand_tensor({2, 3}, rng, 0.2, 1.2)});
    check("sum_all", [](const Tensors& v) { return sum_all(v[0]); },
          {rand_tensor({2, 3}, rng)});
    check("mean_all", [](const Tensors& v) { return mean_all(v[0]); },
          {rand_tensor({2, 3}, rng)});
    check("sum_axes", [](const Tensors& v) { return pick_loss(sum_axes(v[0], {0, 2}), 413); },
          {rand_tensor({2, 3, 4}, rng)});
    check("mean_axes", [](const Tensors& v) { return pick_loss(mean_axes(v[0], {1}), 414); },
          {rand_tensor({2, 3, 4}, rng)});
    check("reshape", [](const Tensors& v) { return pick_loss(reshape(v[0], {3, 4}), 415); },
          {rand_tensor({2, 6}, rng)});
    check("concat_channels",
          [](const Tensors& v) { return pick_loss(concat_channels(v[0], v[1]), 416); },
          {rand_tensor({1, 2, 4, 4}, rng), rand_tensor({1, 3, 4, 4}, rng)});
    check("nearest_upsample_2x",
          [](const Tensors& v) { return pick_loss(nearest_upsample_2x(v[0]), 417); },
          {rand_tensor({1, 2, 3, 3}, rng)});
    check("instance_norm",
          [](const Tensors& v) { return pick_loss(instance_norm(v[0], v[1], v[2]), 418); },
          {rand_tensor({1, 2, 5, 5}, rng), rand_tensor({2}, rng, 0.5, 1.5),
           rand_tensor({2}, rng)});
    check("linear", [](const Tensors& v) { return pick_loss(linear(v[0], v[1], v[2]), 419); },
          {rand_tensor({3, 4}, rng), rand_tensor({2, 4}, rng), rand_tensor({2}, rng)});
    check("conv2d",
          [](const Tensors& v) { return pick_loss(conv2d(v[0], v[1], v[2], 2, 1), 420); },
          {rand_tensor({1, 2, 5, 5}, rng), rand_tensor({3, 2, 3, 3}, rng),
           rand_tensor({3}, rng)});
    check("conv2d_modulated",
          [](const Tensors& v) {
              return pick_loss(conv2d_modulated(v[0], v[1], v[2], 1e-8, true), 421);
          },
          {rand_tensor({1, 2, 5, 5}, rng), rand_tensor({3, 2, 3, 3}, rng),
           rand_tensor({2}, rng, 0.5, 1.5)});
    check("unfold", [](const Tensors& v) { return pick_loss(unfold(v[0], 3, 2), 422); },
          {rand_tensor({5, 5}, rng)});
    {
        Tensor<double> targets({2, 3});
        for (std::size_t i = 0; i < targets.numel(); ++i)
            targets.mutable_data()[i] = (i % 2 == 0) ? 1.0 : 0.0;
        check("bce_with_logits_mean",
              [targets](const Tensors& v) { return bce_with_logits_mean(v[0], targets); },
              {rand_tensor({2, 3}, rng)});
    }

    // Full composition: style code -> mapping -> generator -> MEF-SSIM.
    NetConfig net;
    net.input_size = 16;
    net.base_channels = 4;
    net.d_latent = 8;
    Rng init_rng(423);
    const GeneratorParams<double> g = init_generator<double>(net, init_rng);
    const ExposurePair pair = make_pair(synth_radiance(424, 16), kEvOver, kEvUnder, kGamma);
    const Tensor<double> x = pair_to_tensor<double>(pair);
    const MefContext<double> ctx = make_mef_context<double>(
        {image_to_tensor<double>(pair.over), image_to_tensor<double>(pair.under)});
    const double comp_err = fd_max_rel_err(
        [&](const Tensors& v) {
            return sub(Tensor<double>::scalar(1.0),
                       mef_ssim_tensor(ctx, generator_forward(x, v[0], g)));
        },
        {Tensor<double>({net.n_styles}, 1.0)}, 1e-5);

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool pass =
        worst_op <= kOpGradTol && comp_err <= kCompositionGradTol && secs < kGradRuntimeSec;
    report(1, pass,
           fmt("op gradients vs FD: worst %.2e (%s, tol %.0e); generator+MEF-SSIM code "
               "gradient: %.2e (tol %.0e); %.1fs",
               worst_op, worst_name.c_str(), kOpGradTol, comp_err, kCompositionGradTol, secs));
}

// ---- criterion 2: modulated-conv demodulation invariants ------------------------

void criterion_2() {
    Rng rng(431);
    const int Cin = 3, Cout = 4, k = 3, H = 9, c = H / 2;
    Tensor<double> w({Cout, Cin, k, k});
    for (std::size_t i = 0; i < w.numel(); ++i) w.mutable_data()[i] = rng.normal(0.0, 1.0);
    Tensor<double> s({Cin});
    for (int i = 0; i < Cin; ++i) s.mutable_data()[i] = 0.5 + rng.uniform();

    // Recover the effective kernel by feeding unit impulses, one input
    // channel at a time; after demodulation each output channel's squared
    // norm over all taps must come back as 1.
    std::vector<double> norm2(static_cast<std::size_t>(Cout), 0.0);
    for (int ic = 0; ic < Cin; ++ic) {
        Tensor<double> x({1, Cin, H, H}, 0.0);
        x.mutable_data()[(static_cast<std::size_t>(ic) * H + c) * H + c] = 1.0;
        Tensor<double> y = conv2d_modulated(x, w, s, 1e-8, true, 1, k / 2);
        for (int o = 0; o < Cout; ++o)
            for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b) {
                    const double wv = y.at({0, o, c + k / 2 - a, c + k / 2 - b});
                    norm2[static_cast<std::size_t>(o)] += wv * wv;
                }
    }
    double worst = 0.0;
    for (double n : norm2) worst = std::max(worst, std::abs(n - 1.0));

    // Power-of-two rescaling of the style must cancel exactly at eps = 0 on
    // the float path the generator actually runs.
    Rng frng(432);
    Tensor<float> xf({1, Cin, 8, 8});
    for (std::size_t i = 0; i < xf.numel(); ++i)
        xf.mutable_data()[i] = static_cast<float>(frng.uniform());
    Tensor<float> wf({Cout, Cin, k, k});
    for (std::size_t i = 0; i < wf.numel(); ++i)
        wf.mutable_data()[i] = static_cast<float>(frng.normal(0.0, 0.5));
    Tensor<float> sf({Cin});
    for (int i = 0; i < Cin; ++i)
        sf.mutable_data()[i] = 0.5f + static_cast<float>(frng.uniform());
    bool exact = true;
    Tensor<float> base = conv2d_modulated(xf, wf, sf, 0.0f, true);
    for (float a : {0.5f, 2.0f, 4.0f}) {
        Tensor<float> scaled = conv2d_modulated(xf, wf, scale(sf, a), 0.0f, true);
        if (std::memcmp(base.data(), scaled.data(), base.numel() * sizeof(float)) != 0)
            exact = false;
    }

    const bool pass = worst <= kDemodNormTol && exact;
    report(2, pass,
           fmt("demodulated per-channel squared norm: max |n-1| = %.2e (tol %.0e); dyadic "
               "style rescaling at eps=0: %s",
               worst, kDemodNormTol, exact ? "bitwise invariant" : "NOT invariant"));
}

// ---- criterion 3: metric suite properties -----------------------------------

void criterion_3() {
    const ExposurePair pair = make_pair(synth_radiance(303, kPairSize), kEvOver, kEvUnder, kGamma);
    const std::vector<Image> src = {pair.over, pair.under};
    const Image avg = fuse_average(pair);
    std::vector<std::string> bad;

    // plain SSIM: identity and symmetry
    if (std::abs(ssim(avg, avg) - 1.0) > kExactTol) bad.push_back("ssim identity");
    if (std::abs(ssim(pair.over, avg) - ssim(avg, pair.over)) > kExactTol)
        bad.push_back("ssim symmetry");

    // MEF-SSIM ignores a constant luminance offset
    Image lo = avg, hi = avg;
    for (std::size_t i = 0; i < avg.numel(); ++i) {
        lo.data[i] = 0.9f * avg.data[i];
        hi.data[i] = 0.9f * avg.data[i] + 0.1f;
    }
    const double off = std::abs(mef_ssim(src, lo) - mef_ssim(src, hi));
    if (off >= kMefOffsetTol) bad.push_back(fmt("mef offset (%.2e)", off));

    // an image stitched from the desired patches themselves scores ~1
    std::vector<Tensor<double>> srct = {image_to_tensor<double>(pair.over),
                                        image_to_tensor<double>(pair.under)};
    MefContext<double> ctx = make_mef_context(srct, 8, 8);
    Tensor<double> stitched({1, 1, kPairSize, kPairSize});
    double* p = stitched.mutable_data();
    const int tiles = kPairSize / 8;
    for (int ty = 0; ty < tiles; ++ty)
        for (int tx = 0; tx < tiles; ++tx) {
            const int col = ty * tiles + tx;
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j)
                    p[static_cast<std::size_t>(ty * 8 + i) * kPairSize + (tx * 8 + j)] =
                        ctx.desired.at({i * 8 + j, col}) + 0.5;
        }
    const double stitched_score = mef_ssim_tensor(ctx, stitched).value();
    if (stitched_score < kStitchedMin) bad.push_back(fmt("stitched (%.4f)", stitched_score));

    // closed-form statistics values
    const Image flat(kPairSize, kPairSize, 3, 0.37f);
    if (std::abs(entropy_en(flat)) > kExactTol) bad.push_back("EN(flat)=0");
    Image ramp(256, 256, 1);
    for (int y = 0; y < 256; ++y)
        for (int x = 0; x < 256; ++x) ramp.at(y, x, 0) = static_cast<float>(x) / 255.0f;
    if (std::abs(entropy_en(ramp) - 8.0) > kExactTol) bad.push_back("EN(uniform)=8");
    if (avg_gradient_ag(flat) != 0.0) bad.push_back("AG(flat)=0");
    if (edge_intensity_ei(flat) != 0.0) bad.push_back("EI(flat)=0");
    if (spatial_frequency_sf(flat) != 0.0) bad.push_back("SF(flat)=0");
    if (psnr_fusion({avg, avg}, avg) != 100.0) bad.push_back("PSNR cap");

    std::string detail;
    if (bad.empty()) {
        detail = fmt("ssim identity/symmetry exact; mef offset delta %.1e; stitched score "
                     "%.4f; EN/AG/EI/SF/PSNR closed forms exact",
                     off, stitched_score);
    } else {
        detail = "violated:";
        for (const std::string& b : bad) detail += " [" + b + "]";
    }
    report(3, bad.empty(), detail);
}

// ---- criterion 4: soft-label contract -----------------------------------------

void criterion_4() {
    Rng rng(Rng::mix(77, "labels"));
    const int n = fuser_count();
    int bad_hot = 0, bad_cold = 0, bad_argmax = 0;
    for (int d = 0; d < kLabelDraws; ++d) {
        const int hot = d % n;
        const SoftLabel sl = sample_soft_label(hot, n, rng);
        const float h = sl.values[static_cast<std::size_t>(hot)];
        if (!(h > 0.5f && h <= 1.0f)) ++bad_hot;
        int argmax = 0;
        for (int i = 0; i < n; ++i) {
            if (i != hot) {
                const float cv = sl.values[static_cast<std::size_t>(i)];
                if (!(cv >= 0.0f && cv < 0.5f)) ++bad_cold;
            }
            if (sl.values[static_cast<std::size_t>(i)] >
                sl.values[static_cast<std::size_t>(argmax)])
                argmax = i;
        }
        if (argmax != hot || sl.hot_index != hot) ++bad_argmax;
    }
    const bool pass = bad_hot == 0 && bad_cold == 0 && bad_argmax == 0;
    report(4, pass,
           fmt("%d draws: hot in (0.5,1] violations %d, cold in [0,0.5) violations %d, "
               "argmax-recovery misses %d",
               kLabelDraws, bad_hot, bad_cold, bad_argmax));
}

// ---- criteria 5-8: desk-scale training, tuning and ablations --------------------

void criterion_5() {
    const DeskEval& ev = soft_eval();
    double min_fid = 1.0;
    for (double f : ev.fid) min_fid = std::min(min_fid, f);
    const bool pass = ev.cpu_min <= kPretrainBudgetMin && min_fid >= kFidelityMin;
    report(5, pass,
           fmt("pretrain %.1f CPU-min (cap %.0f); held-out imitation SSIM per target "
               "%.3f/%.3f/%.3f/%.3f (floor %.2f)",
               ev.cpu_min, kPretrainBudgetMin, ev.fid[0], ev.fid[1], ev.fid[2], ev.fid[3],
               kFidelityMin));
}

void criterion_6() {
    const DeskEval& ev = soft_eval();
    const bool pass = ev.ones_init && ev.best_is_min && ev.improved == kHeldOutPairs &&
                      ev.worst_pair_sec <= kTunePairBudgetSec;
    report(6, pass,
           fmt("all-ones start: %s; best-so-far = trace minimum: %s; tuned >= initial on "
               "%d/%d pairs; slowest pair %.1fs (cap %.0fs)",
               ev.ones_init ? "yes" : "NO", ev.best_is_min ? "yes" : "NO", ev.improved,
               kHeldOutPairs, ev.worst_pair_sec, kTunePairBudgetSec));
}

void criterion_7() {
    const DeskEval& ev = soft_eval();
    double max_imit = -1.0;
    for (double s : ev.imit) max_imit = std::max(max_imit, s);
    const bool pass = ev.tuned >= max_imit && ev.tuned >= ev.pick - kPickMargin;
    report(7, pass,
           fmt("tuned mean MEF-SSIM %.4f vs imitations %.4f/%.4f/%.4f/%.4f and best-pick "
               "%.4f (margin %.3f)",
               ev.tuned, ev.imit[0], ev.imit[1], ev.imit[2], ev.imit[3], ev.pick, kPickMargin));
    if (!pass && g_verdicts.count(5) && g_verdicts.at(5))
        note("ORDERING VIOLATION: the imitator is faithful (criterion 5 passed) but tuning "
             "did not reach the ensemble advantage");
}

void criterion_8() {
    const double soft = soft_eval().tuned;
    const double hard = hard_eval().tuned;
    report(8, hard <= soft,
           fmt("tuned mean MEF-SSIM: hard-label model %.4f vs soft-label model %.4f", hard,
               soft));
}

// ---- criterion 9: end-to-end byte reproducibility -------------------------------

#ifndef EMEF_CLI_PATH
#define EMEF_CLI_PATH "emef"
#endif

struct CmdResult {
    int code = -1;
    std::string out;
};

CmdResult run_cli(const std::vector<std::string>& args) {
    std::string cmd = EMEF_CLI_PATH;
    for (const std::string& a : args) cmd += " " + a;
    cmd += " 2>&1";
    CmdResult r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[512];
    while (std::fgets(buf, sizeof buf, p)) r.out += buf;
    const int st = pclose(p);
    if (WIFEXITED(st)) r.code = WEXITSTATUS(st);
    return r;
}

bool run_pipeline(const fs::path& dir, std::string& err) {
    const std::string train = (dir / "train").string();
    const std::string test = (dir / "test").string();
    const std::string model = (dir / "model").string();
    const std::string ckpt = model + "/imitator.emef";
    const std::vector<std::pair<std::string, std::vector<std::string>>> steps = {
        {"synth-data(train)",
         {"synth-data", "--out", train, "--seed", "21", "--count", "6", "--size", "32"}},
        {"synth-data(test)",
         {"synth-data", "--out", test, "--seed", "22", "--count", "2", "--size", "32"}},
        {"pretrain",
         {"pretrain", "--data", train, "--out", model, "--epochs", "3", "--checkpoint-every",
          "2", "--seed", "9", "--base-channels", "8", "--d-latent", "16"}},
        {"fuse(style)",
         {"fuse", "--in", test, "--checkpoint", ckpt, "--out", (dir / "fused_style").string(),
          "--mode", "style_code", "--alpha0", "0.5", "--steps", "8"}},
        {"fuse(pick)",
         {"fuse", "--in", test, "--checkpoint", ckpt, "--out", (dir / "fused_pick").string(),
          "--mode", "pick_gt"}},
        {"eval(style)",
         {"eval", "--in", test, "--fused", (dir / "fused_style").string(), "--out",
          (dir / "scores_style.csv").string()}},
        {"eval(pick)",
         {"eval", "--in", test, "--fused", (dir / "fused_pick").string(), "--out",
          (dir / "scores_pick.csv").string()}},
        {"report",
         {"report", "--scores", "ours=" + (dir / "scores_style.csv").string(),
          "pick=" + (dir / "scores_pick.csv").string(), "--out", (dir / "report").string()}},
    };
    for (const auto& [what, args] : steps) {
        const CmdResult r = run_cli(args);
        if (r.code != 0) {
            err = fmt("%s exited %d: %s", what.c_str(), r.code, r.out.c_str());
            return false;
        }
    }
    return true;
}

std::map<std::string, fs::path> tree_files(const fs::path& root) {
    std::map<std::string, fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = e.path();
    return out;
}

bool same_bytes(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return da == db && !da.empty();
}

void criterion_9() {
    note("running the CLI pipeline twice at reduced scale (synth-data / pretrain / fuse / "
         "eval / report)");
    const fs::path base =
        fs::temp_directory_path() / fmt("emef_acceptance_%d", static_cast<int>(getpid()));
    std::error_code ec;
    fs::remove_all(base, ec);
    fs::create_directories(base / "a");
    fs::create_directories(base / "b");

    std::string err;
    bool ok = run_pipeline(base / "a", err) && run_pipeline(base / "b", err);
    std::string detail;
    if (!ok) {
        detail = "pipeline run failed: " + err;
    } else {
        const auto ta = tree_files(base / "a");
        const auto tb = tree_files(base / "b");
        // the interesting artifacts must actually be there
        const char* expected[] = {
            "model/imitator.emef",           "model/imitator_epoch_2.emef",
            "model/history.csv",             "fused_style/pair000_fused.ppm",
            "fused_style/pair000_trace.csv", "fused_pick/pair001_fused.ppm",
            "scores_style.csv",              "report/report.csv",
            "report/report.txt"};
        std::vector<std::string> missing, differing;
        for (const char* e : expected)
            if (!ta.count(e)) missing.push_back(e);
        if (ta.size() != tb.size()) differing.push_back("(file sets differ)");
        for (const auto& [rel, pa] : ta) {
            auto it = tb.find(rel);
            if (it == tb.end())
                differing.push_back(rel + " (only in first run)");
            else if (!same_bytes(pa, it->second))
                differing.push_back(rel);
        }
        ok = missing.empty() && differing.empty();
        if (ok) {
            detail = fmt("two seeded runs produced %zu byte-identical files (checkpoints, "
                         "snapshots, history, fused images, traces, scores, reports)",
                         ta.size());
        } else {
            detail = "mismatches:";
            for (const std::string& m : missing) detail += " missing[" + m + "]";
            for (const std::string& d : differing) detail += " differs[" + d + "]";
        }
    }
    fs::remove_all(base, ec);
    report(9, ok, detail);
}

std::set<int> parse_only(const std::string& spec) {
    std::set<int> out;
    std::size_t pos = 0;
    while (pos < spec.size()) {
        std::size_t comma = spec.find(',', pos);
        if (comma == std::string::npos) comma = spec.size();
        const std::string tok = spec.substr(pos, comma - pos);
        const std::size_t dash = tok.find('-');
        if (dash == std::string::npos) {
            out.insert(std::stoi(tok));
        } else {
            const int lo = std::stoi(tok.substr(0, dash));
            const int hi = std::stoi(tok.substr(dash + 1));
            for (int i = lo; i <= hi; ++i) out.insert(i);
        }
        pos = comma + 1;
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    std::set<int> only = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    for (int i = 1; i < argc; ++i) {
        if (std::string(argv[i]) == "--only" && i + 1 < argc) {
            only = parse_only(argv[i + 1]);
            ++i;
        } else {
            std::fprintf(stderr, "usage: %s [--only 1,2,5-8]\n", argv[0]);
            return 64;
        }
    }
    const std::pair<int, void (*)()> criteria[] = {
        {1, criterion_1}, {2, criterion_2}, {3, criterion_3},
        {4, criterion_4}, {5, criterion_5}, {6, criterion_6},
        {7, criterion_7}, {8, criterion_8}, {9, criterion_9},
    };
    for (const auto& [id, fn] : criteria)
        if (only.count(id)) fn();
    std::printf("%d of %zu criteria failed\n", g_failures, only.size());
    return g_failures;
}
