#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emef/image.hpp"
#include "emef/imitator.hpp"
#include "emef/rng.hpp"
#include "emef/tensor.hpp"

namespace emef {

// One exposure pair with the outputs of every registered target fuser, in
// registry index order; the index doubles as the base style-code slot.
struct TrainingSample {
    ExposurePair pair;
    std::vector<Image> targets;
};

// Softened one-hot style label: the hot component is drawn from (0.5, 1]
// and every other component from [0, 0.5), so argmax always recovers the
// hot index.
struct SoftLabel {
    std::vector<float> values;
    int hot_index = 0;
};

struct TrainingConfig {
    float lambda_adv = 0.002f; // adversarial weight in the generator loss
    float lr = 2e-4f;
    int epochs = 40;
    int decay_start = -1; // first epoch of linear lr decay; -1 => epochs / 2
    int checkpoint_every = 10;
    std::uint64_t seed = 0;
    bool hard_labels = false; // exact one-hot codes instead of soft draws (ablation)
    NetConfig net;

    // Halfway by default, rounded up so one-epoch runs stay valid.
    int resolved_decay_start() const { return decay_start < 0 ? (epochs + 1) / 2 : decay_start; }
    void validate() const;
};

struct EpochStats {
    int epoch = 0; // 1-based in reports
    double ssim_loss = 0.0;
    double adv_loss = 0.0;
    double lr = 0.0;
};

struct TrainingResult {
    GeneratorParams<float> generator;
    DiscriminatorParams<float> discriminator;
    std::vector<EpochStats> history;
};

// Runs every registered fuser over every pair. `names` (optional, parallel
// to `pairs`) only improves error messages; a fuser failure is rethrown as
// DataError naming the offending pair.
std::vector<TrainingSample> build_dataset(const std::vector<ExposurePair>& pairs,
                                          const std::vector<std::string>& names = {});

SoftLabel sample_soft_label(int hot_index, int n, Rng& rng);

template <typename T>
Tensor<T> soft_label_tensor(const SoftLabel& label);

// Generator objective: (1 - ssim(output, target)) + lambda * BCE(fake
// logits vs. all-real). Both terms are also exposed separately through
// pretrain's history.
template <typename T>
Tensor<T> g_loss(const Tensor<T>& output, const Tensor<T>& target,
                 const Tensor<T>& d_fake_logits, T lambda);

// Critic objective: BCE(real logits vs. all-real) + BCE(fake logits vs.
// all-fake), each averaged over the patch map.
template <typename T>
Tensor<T> d_loss(const Tensor<T>& d_real_logits, const Tensor<T>& d_fake_logits);

// lr for a 0-based epoch: constant before decay_start, then linear to 0.
double lr_schedule(const TrainingConfig& cfg, int epoch);

// Stage-one pre-training. Alternates one critic step (on a detached fake)
// and one generator step per training example, batch size 1; the imitated
// target cycles through the registry across epochs and gets a fresh soft
// label on every visit. Bit-deterministic given (seed, config, dataset).
// If out_dir is nonempty, writes imitator.emef, periodic
// imitator_epoch_<k>.emef snapshots, and history.csv there.
TrainingResult pretrain(const std::vector<TrainingSample>& dataset, const TrainingConfig& cfg,
                        const std::string& out_dir = "");

void write_history_csv(const std::vector<EpochStats>& history, const std::string& path);

} // namespace emef
