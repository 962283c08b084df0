#pragma once

#include <string>
#include <utility>
#include <vector>

#include "emef/image.hpp"
#include "emef/rng.hpp"
#include "emef/tensor.hpp"

namespace emef {

// Architecture hyperparameters shared by the generator and discriminator.
// Spatial sides fed to the generator must be divisible by 2^depth.
struct NetConfig {
    int input_size = 64;    // training crop side
    int base_channels = 32; // first encoder width; doubles per level
    int depth = 4;          // stride-2 encoder levels (= decoder levels)
    int n_styles = 4;       // style-code length (one slot per imitated target)
    int d_latent = 64;      // mapped latent width
    float demod_eps = 1e-8f;

    void validate() const;
    // Channel width of encoder level i (0-based): base_channels << i.
    int encoder_channels(int i) const { return base_channels << i; }
};

// Named parameter tensors in a fixed construction order. The order is what
// checkpoints serialize, so it must stay stable across runs. Copies share
// tensor storage; `on` yields tracked views over the same buffers so the
// optimizer sees gradients accumulated during a recorded forward pass.
template <typename T>
struct ParamSet {
    NetConfig cfg;
    std::vector<std::pair<std::string, Tensor<T>>> items;

    Tensor<T>& at(const std::string& name);
    const Tensor<T>& at(const std::string& name) const;
    bool has(const std::string& name) const;
    void add(const std::string& name, Tensor<T> t);

    std::vector<Tensor<T>> tensors() const; // storage-sharing handles
    ParamSet on(Tape<T>& tape) const;
    // Same storage with no gradient buffers: a read-only view for inference
    // paths, safe to share across threads while a tape is recording.
    ParamSet detached() const;
    std::size_t parameter_count() const;
};

template <typename T>
using GeneratorParams = ParamSet<T>;
template <typename T>
using DiscriminatorParams = ParamSet<T>;

// Fresh networks, weights ~ N(0, 0.02). Instance-norm gains and the style
// affine biases start at one so every modulation scale is initially 1;
// all other biases start at zero. Gradient buffers are pre-allocated.
template <typename T>
GeneratorParams<T> init_generator(const NetConfig& cfg, Rng& rng);
template <typename T>
DiscriminatorParams<T> init_discriminator(const NetConfig& cfg, Rng& rng);

// Two-layer mapping network: code [n_styles] (or [1,n_styles]) -> latent
// [1, d_latent], leaky slope 0.2 between the layers, linear output.
template <typename T>
Tensor<T> mlp_map(const Tensor<T>& code, const GeneratorParams<T>& g);

// Style-modulated conv block: a per-block affine turns the latent into one
// scale per input channel, the kernel is modulated + demodulated with that
// scale, then bias and leaky 0.2. `demodulate`/`eps` are exposed so tests
// can reduce the block to a plain convolution.
template <typename T>
Tensor<T> scb_forward(const Tensor<T>& x, const Tensor<T>& latent, const Tensor<T>& affine_w,
                      const Tensor<T>& affine_b, const Tensor<T>& conv_w, const Tensor<T>& conv_b,
                      T eps, bool demodulate = true);

// UNet generator. `pair` is the [1,6,H,W] over/under stack; `code` is the
// style code. Encoder: depth blocks of stride-2 conv + instance norm +
// leaky, widths base, 2*base, ... Decoder: upsample, concat the matching
// skip, style-modulated conv; the final level concatenates the raw input
// stack and finishes with a plain conv + tanh mapped to [0,1].
template <typename T>
Tensor<T> generator_forward(const Tensor<T>& pair, const Tensor<T>& code,
                            const GeneratorParams<T>& g);

// Same network driven by an externally supplied [1, d_latent] latent,
// skipping the mapping MLP (used by the latent-space ablation).
template <typename T>
Tensor<T> generator_forward_latent(const Tensor<T>& pair, const Tensor<T>& latent,
                                   const GeneratorParams<T>& g);

// PatchGAN-style critic over [candidate, pair] (9 channels): three stride-2
// conv blocks then a 1-channel conv, so the logit map is input/8 per side.
template <typename T>
Tensor<T> discriminator_forward(const Tensor<T>& candidate, const Tensor<T>& pair,
                                const DiscriminatorParams<T>& d);

// Untracked convenience path used by the tuner and CLI.
Image generate_image(const ExposurePair& pair, const std::vector<float>& code,
                     const GeneratorParams<float>& g);

// Binary checkpoint: "EMEF" magic, format version, then length-prefixed
// named tensors (u32 name length / rank / dims, f32 payload), all
// little-endian. The config rides along as a leading "net_config" tensor.
// Writes go to a temp file that is renamed into place. Round trips are
// bit-exact. Malformed or truncated files raise DataError.
void save_checkpoint(const ParamSet<float>& params, const std::string& path);
ParamSet<float> load_checkpoint(const std::string& path);

} // namespace emef
