#include "emef/tuner.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "emef/errors.hpp"
#include "emef/fusers.hpp"
#include "emef/metrics.hpp"

namespace emef {

void TunerConfig::validate() const {
    if (!(alpha0 > 0.0f)) throw ShapeError("tuner alpha0 must be positive");
    if (steps < 1) throw ShapeError("tuner needs at least one step");
    if (decay_window < 1) throw ShapeError("tuner decay window must be positive");
    if (!(tol >= 0.0f)) throw ShapeError("tuner tol must be nonnegative");
    if (tol_patience < 1) throw ShapeError("tuner tol patience must be positive");
}

double tuner_step_size(const TunerConfig& cfg, int t) {
    const int window = cfg.decay_window;
    const int k = t / window;
    const int j = t % window;
    const double amplitude = static_cast<double>(cfg.alpha0) * std::pow(0.5, k);
    return amplitude * static_cast<double>(window - j) / static_cast<double>(window);
}

std::vector<float> inference_code(int hot_index, int n) {
    if (n < 1 || hot_index < 0 || hot_index >= n)
        throw ShapeError("inference code hot index out of range");
    std::vector<float> code(static_cast<std::size_t>(n), 0.25f);
    code[static_cast<std::size_t>(hot_index)] = 0.75f;
    return code;
}

TuneResult tune(const ExposurePair& pair, const GeneratorParams<float>& g,
                const TunerConfig& cfg) {
    cfg.validate();
    if (cfg.mode != TuneMode::style_code && cfg.mode != TuneMode::latent_code)
        throw ShapeError("tune only runs the code-search modes");
    const bool latent_mode = cfg.mode == TuneMode::latent_code;

    Tensor<float> x = pair_to_tensor<float>(pair);
    const MefContext<float> ctx = make_mef_context<float>(
        {image_to_tensor<float>(pair.over), image_to_tensor<float>(pair.under)});

    // Only the code is optimized, so work against a gradient-free view of the
    // weights: backward skips the (expensive) parameter gradients, and
    // concurrent tunes never touch shared buffers.
    const GeneratorParams<float> net = g.detached();

    // All-ones style code; the latent search starts from its mapped image so
    // both modes begin at the same point in generator space.
    std::vector<float> code;
    if (latent_mode) {
        Tensor<float> ones({net.cfg.n_styles}, 1.0f);
        code = mlp_map(ones, net).values();
    } else {
        code.assign(static_cast<std::size_t>(net.cfg.n_styles), 1.0f);
    }
    const int dim = static_cast<int>(code.size());

    auto forward = [&](const Tensor<float>& c) {
        return latent_mode ? generator_forward_latent(x, c, net) : generator_forward(x, c, net);
    };
    auto code_tensor = [&](Tape<float>* tape) {
        Tensor<float> c = latent_mode ? Tensor<float>({1, dim}, code) : Tensor<float>({dim}, code);
        return tape ? c.on(*tape) : c;
    };

    TuneResult res;
    res.best_loss = std::numeric_limits<double>::infinity();
    int stall = 0;

    for (int t = 0; t < cfg.steps; ++t) {
        Tape<float> tape;
        Tensor<float> c = code_tensor(&tape);
        Tensor<float> fused = forward(c);
        Tensor<float> loss = sub(Tensor<float>::scalar(1.0f), mef_ssim_tensor(ctx, fused));
        if (!loss.all_finite())
            throw NumericError("tuning loss diverged at iteration " + std::to_string(t));
        const double loss_v = loss.value();
        const double alpha = tuner_step_size(cfg, t);

        res.trace.push_back({t, loss_v, alpha, code});
        if (loss_v < res.best_loss) {
            res.best_loss = loss_v;
            res.best_code = code;
        }

        if (t > 0) {
            const double prev = res.trace[static_cast<std::size_t>(t) - 1].loss;
            const double rel = std::abs(loss_v - prev) / std::max(std::abs(prev), 1e-12);
            stall = rel < static_cast<double>(cfg.tol) ? stall + 1 : 0;
            if (stall >= cfg.tol_patience) break;
        }

        tape.backward(loss);
        const std::vector<float>& grad = c.grad();
        for (float gv : grad)
            if (!std::isfinite(gv))
                throw NumericError("tuning gradient diverged at iteration " + std::to_string(t));
        for (std::size_t i = 0; i < code.size(); ++i)
            code[i] -= static_cast<float>(alpha) * grad[i];
    }

    res.iterations_used = static_cast<int>(res.trace.size());

    // Re-render the winner so best_image is exactly one forward at best_code.
    code = res.best_code;
    Tensor<float> best = forward(code_tensor(nullptr));
    validate_finite(best, "tuned fusion");
    res.best_image = tensor_to_image(best);
    return res;
}

Image ablation_pick(const ExposurePair& pair, const GeneratorParams<float>& g,
                    const TunerConfig& cfg) {
    if (cfg.mode == TuneMode::latent_code) return tune(pair, g, cfg).best_image;
    if (cfg.mode != TuneMode::pick_gt && cfg.mode != TuneMode::pick_imitation)
        throw ShapeError("ablation_pick handles pick_gt, pick_imitation and latent_code");

    const std::vector<Image> sources = {pair.over, pair.under};
    Image best;
    double best_score = -std::numeric_limits<double>::infinity();
    const int n = cfg.mode == TuneMode::pick_gt ? fuser_count() : g.cfg.n_styles;
    for (int i = 0; i < n; ++i) {
        Image candidate = cfg.mode == TuneMode::pick_gt
                              ? run_target(i, pair)
                              : generate_image(pair, inference_code(i, n), g);
        const double score = mef_ssim(sources, candidate);
        if (score > best_score) {
            best_score = score;
            best = std::move(candidate);
        }
    }
    return best;
}

Image fuse(const ExposurePair& pair, const GeneratorParams<float>& g, const TunerConfig& cfg) {
    if (cfg.mode == TuneMode::style_code || cfg.mode == TuneMode::latent_code)
        return tune(pair, g, cfg).best_image;
    return ablation_pick(pair, g, cfg);
}

void write_trace_csv(const TuneResult& result, const std::string& path) {
    std::ostringstream out;
    out << "iteration,loss,alpha";
    const std::size_t dim = result.best_code.size();
    for (std::size_t i = 0; i < dim; ++i) out << ",c" << i;
    out << '\n';
    out << std::setprecision(10);
    for (const TraceEntry& e : result.trace) {
        out << e.iteration << ',' << e.loss << ',' << e.alpha;
        for (float v : e.code) out << ',' << v;
        out << '\n';
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open trace file for writing: " + path);
    f << out.str();
    if (!f.good()) throw DataError("trace write failed: " + path);
}

const char* tune_mode_name(TuneMode mode) {
    switch (mode) {
    case TuneMode::style_code: return "style_code";
    case TuneMode::latent_code: return "latent_code";
    case TuneMode::pick_gt: return "pick_gt";
    case TuneMode::pick_imitation: return "pick_imitation";
    }
    return "style_code";
}

TuneMode parse_tune_mode(const std::string& name) {
    if (name == "style_code") return TuneMode::style_code;
    if (name == "latent_code") return TuneMode::latent_code;
    if (name == "pick_gt") return TuneMode::pick_gt;
    if (name == "pick_imitation") return TuneMode::pick_imitation;
    throw ShapeError("unknown tune mode: " + name);
}

} // namespace emef
