#include "emef/training.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "emef/adam.hpp"
#include "emef/errors.hpp"
#include "emef/fusers.hpp"
#include "emef/metrics.hpp"

namespace emef {

void TrainingConfig::validate() const {
    if (!(lambda_adv >= 0.0f)) throw ShapeError("training lambda must be nonnegative");
    if (!(lr > 0.0f)) throw ShapeError("training lr must be positive");
    if (epochs < 1) throw ShapeError("training needs at least one epoch");
    const int ds = resolved_decay_start();
    if (ds <= 0 || ds > epochs)
        throw ShapeError("training decay_start must lie in (0, epochs]");
    if (checkpoint_every < 0) throw ShapeError("training checkpoint_every must be nonnegative");
    net.validate();
}

std::vector<TrainingSample> build_dataset(const std::vector<ExposurePair>& pairs,
                                          const std::vector<std::string>& names) {
    if (pairs.empty()) throw DataError("dataset construction needs at least one exposure pair");
    std::vector<TrainingSample> out;
    out.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        TrainingSample s;
        s.pair = pairs[i];
        s.targets.reserve(static_cast<std::size_t>(fuser_count()));
        for (int t = 0; t < fuser_count(); ++t) {
            try {
                s.targets.push_back(run_target(t, pairs[i]));
            } catch (const std::exception& e) {
                const std::string id =
                    i < names.size() ? names[i] : ("#" + std::to_string(i));
                throw DataError("target '" + fuser_name(t) + "' failed on pair " + id + ": " +
                                e.what());
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

SoftLabel sample_soft_label(int hot_index, int n, Rng& rng) {
    if (n < 1 || hot_index < 0 || hot_index >= n)
        throw ShapeError("soft label hot index out of range");
    SoftLabel label;
    label.hot_index = hot_index;
    label.values.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform(); // [0, 1)
        // 1 - u/2 covers (0.5, 1]; u/2 covers [0, 0.5).
        label.values[static_cast<std::size_t>(i)] =
            static_cast<float>(i == hot_index ? 1.0 - 0.5 * u : 0.5 * u);
    }
    return label;
}

template <typename T>
Tensor<T> soft_label_tensor(const SoftLabel& label) {
    Tensor<T> t({static_cast<int>(label.values.size())});
    for (std::size_t i = 0; i < label.values.size(); ++i)
        t.mutable_data()[i] = static_cast<T>(label.values[i]);
    return t;
}

namespace {

template <typename T>
Tensor<T> fidelity_term(const Tensor<T>& output, const Tensor<T>& target) {
    return sub(Tensor<T>::scalar(T(1)), ssim_tensor(output, target));
}

template <typename T>
Tensor<T> adversarial_term(const Tensor<T>& d_fake_logits) {
    return bce_with_logits_mean(d_fake_logits, Tensor<T>(d_fake_logits.shape(), T(1)));
}

} // namespace

template <typename T>
Tensor<T> g_loss(const Tensor<T>& output, const Tensor<T>& target,
                 const Tensor<T>& d_fake_logits, T lambda) {
    Tensor<T> total =
        add(fidelity_term(output, target), scale(adversarial_term(d_fake_logits), lambda));
    validate_finite(total, "generator loss");
    return total;
}

template <typename T>
Tensor<T> d_loss(const Tensor<T>& d_real_logits, const Tensor<T>& d_fake_logits) {
    Tensor<T> real = bce_with_logits_mean(d_real_logits, Tensor<T>(d_real_logits.shape(), T(1)));
    Tensor<T> fake = bce_with_logits_mean(d_fake_logits, Tensor<T>(d_fake_logits.shape(), T(0)));
    Tensor<T> total = add(real, fake);
    validate_finite(total, "critic loss");
    return total;
}

double lr_schedule(const TrainingConfig& cfg, int epoch) {
    const int ds = cfg.resolved_decay_start();
    if (epoch < ds) return cfg.lr;
    return static_cast<double>(cfg.lr) * static_cast<double>(cfg.epochs - epoch) /
           static_cast<double>(cfg.epochs - ds);
}

void write_history_csv(const std::vector<EpochStats>& history, const std::string& path) {
    std::ostringstream out;
    out << "epoch,ssim_loss,adv_loss,lr\n";
    out << std::setprecision(10);
    for (const EpochStats& e : history)
        out << e.epoch << ',' << e.ssim_loss << ',' << e.adv_loss << ',' << e.lr << '\n';
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open history file for writing: " + path);
    f << out.str();
    if (!f.good()) throw DataError("history write failed: " + path);
}

TrainingResult pretrain(const std::vector<TrainingSample>& dataset, const TrainingConfig& cfg,
                        const std::string& out_dir) {
    cfg.validate();
    if (dataset.empty()) throw DataError("pretraining needs a nonempty dataset");
    const int n = cfg.net.n_styles;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const TrainingSample& s = dataset[i];
        if (static_cast<int>(s.targets.size()) != n)
            throw DataError("sample " + std::to_string(i) + " carries " +
                            std::to_string(s.targets.size()) + " targets; the style code has " +
                            std::to_string(n) + " slots");
        for (const Image& t : s.targets)
            if (t.height != s.pair.over.height || t.width != s.pair.over.width ||
                t.channels != 3)
                throw DataError("sample " + std::to_string(i) +
                                " has a target whose size does not match its pair");
    }

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    Rng rng_g = Rng::substream(cfg.seed, "train.init_g");
    Rng rng_d = Rng::substream(cfg.seed, "train.init_d");
    Rng rng_labels = Rng::substream(cfg.seed, "train.labels");

    TrainingResult res;
    res.generator = init_generator<float>(cfg.net, rng_g);
    res.discriminator = init_discriminator<float>(cfg.net, rng_d);

    // Input stacks and target tensors never change; convert them once.
    std::vector<Tensor<float>> xs, gts;
    xs.reserve(dataset.size());
    gts.reserve(dataset.size() * static_cast<std::size_t>(n));
    for (const TrainingSample& s : dataset) {
        xs.push_back(pair_to_tensor<float>(s.pair));
        for (const Image& t : s.targets) gts.push_back(image_to_tensor<float>(t));
    }

    Adam<float> opt_g(res.generator.tensors(), cfg.lr);
    Adam<float> opt_d(res.discriminator.tensors(), cfg.lr);
    std::vector<Tensor<float>> g_tensors = res.generator.tensors();
    std::vector<Tensor<float>> d_tensors = res.discriminator.tensors();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr_e = lr_schedule(cfg, epoch);
        opt_g.set_lr(static_cast<float>(lr_e));
        opt_d.set_lr(static_cast<float>(lr_e));

        double ssim_sum = 0.0, adv_sum = 0.0;
        for (std::size_t si = 0; si < dataset.size(); ++si) {
            const int ti = static_cast<int>((si + static_cast<std::size_t>(epoch)) %
                                            static_cast<std::size_t>(n));
            SoftLabel label;
            if (cfg.hard_labels) {
                label.hot_index = ti;
                label.values.assign(static_cast<std::size_t>(n), 0.0f);
                label.values[static_cast<std::size_t>(ti)] = 1.0f;
            } else {
                label = sample_soft_label(ti, n, rng_labels);
            }
            const Tensor<float>& x = xs[si];
            const Tensor<float>& gt = gts[si * static_cast<std::size_t>(n) +
                                          static_cast<std::size_t>(ti)];

            Tape<float> g_tape;
            GeneratorParams<float> g_tracked = res.generator.on(g_tape);
            Tensor<float> code = soft_label_tensor<float>(label);
            Tensor<float> fake = generator_forward(x, code, g_tracked);

            { // critic step on the detached fake
                Tape<float> d_tape;
                DiscriminatorParams<float> d_tracked = res.discriminator.on(d_tape);
                Tensor<float> real_logits = discriminator_forward(gt, x, d_tracked);
                Tensor<float> fake_logits = discriminator_forward(fake.detached(), x, d_tracked);
                Tensor<float> dl = d_loss(real_logits, fake_logits);
                d_tape.backward(dl);
                opt_d.step();
                for (Tensor<float>& t : d_tensors) t.zero_grad();
            }

            // generator step against the just-updated critic
            Tensor<float> fake_logits = discriminator_forward(fake, x, res.discriminator);
            Tensor<float> fidelity = fidelity_term(fake, gt);
            Tensor<float> adv = adversarial_term(fake_logits);
            Tensor<float> total = add(fidelity, scale(adv, cfg.lambda_adv));
            validate_finite(total, "generator loss");
            g_tape.backward(total);
            opt_g.step();
            for (Tensor<float>& t : g_tensors) t.zero_grad();

            ssim_sum += fidelity.value();
            adv_sum += adv.value();
        }

        EpochStats st;
        st.epoch = epoch + 1;
        st.ssim_loss = ssim_sum / static_cast<double>(dataset.size());
        st.adv_loss = adv_sum / static_cast<double>(dataset.size());
        st.lr = lr_e;
        res.history.push_back(st);

        if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
            (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs)
            save_checkpoint(res.generator,
                            out_dir + "/imitator_epoch_" + std::to_string(epoch + 1) + ".emef");
    }

    if (!out_dir.empty()) {
        save_checkpoint(res.generator, out_dir + "/imitator.emef");
        write_history_csv(res.history, out_dir + "/history.csv");
    }
    return res;
}

template Tensor<float> soft_label_tensor<float>(const SoftLabel&);
template Tensor<double> soft_label_tensor<double>(const SoftLabel&);
template Tensor<float> g_loss<float>(const Tensor<float>&, const Tensor<float>&,
                                     const Tensor<float>&, float);
template Tensor<double> g_loss<double>(const Tensor<double>&, const Tensor<double>&,
                                       const Tensor<double>&, double);
template Tensor<float> d_loss<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> d_loss<double>(const Tensor<double>&, const Tensor<double>&);

} // namespace emef
