#include "emef/imitator.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "emef/errors.hpp"

namespace emef {

void NetConfig::validate() const {
    if (input_size <= 0 || base_channels <= 0 || depth <= 0 || n_styles <= 0 || d_latent <= 0)
        throw ShapeError("net config fields must be positive");
    if (depth > 10) throw ShapeError("net config depth is implausibly large");
    const int div = 1 << depth;
    if (input_size % div != 0 || input_size < div)
        throw ShapeError("net config input_size must be divisible by 2^depth");
    if (!(demod_eps >= 0.0f)) throw ShapeError("net config demod_eps must be nonnegative");
}

// ---- parameter sets -------------------------------------------------------

template <typename T>
Tensor<T>& ParamSet<T>::at(const std::string& name) {
    for (auto& kv : items)
        if (kv.first == name) return kv.second;
    throw ShapeError("unknown parameter: " + name);
}

template <typename T>
const Tensor<T>& ParamSet<T>::at(const std::string& name) const {
    for (const auto& kv : items)
        if (kv.first == name) return kv.second;
    throw ShapeError("unknown parameter: " + name);
}

template <typename T>
bool ParamSet<T>::has(const std::string& name) const {
    for (const auto& kv : items)
        if (kv.first == name) return true;
    return false;
}

template <typename T>
void ParamSet<T>::add(const std::string& name, Tensor<T> t) {
    if (has(name)) throw ShapeError("duplicate parameter: " + name);
    t.ensure_grad();
    items.emplace_back(name, std::move(t));
}

template <typename T>
std::vector<Tensor<T>> ParamSet<T>::tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(items.size());
    for (const auto& kv : items) out.push_back(kv.second);
    return out;
}

template <typename T>
ParamSet<T> ParamSet<T>::on(Tape<T>& tape) const {
    ParamSet<T> out;
    out.cfg = cfg;
    out.items.reserve(items.size());
    for (const auto& kv : items) out.items.emplace_back(kv.first, kv.second.on(tape));
    return out;
}

template <typename T>
ParamSet<T> ParamSet<T>::detached() const {
    ParamSet<T> out;
    out.cfg = cfg;
    out.items.reserve(items.size());
    for (const auto& kv : items) out.items.emplace_back(kv.first, kv.second.detached());
    return out;
}

template <typename T>
std::size_t ParamSet<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& kv : items) n += kv.second.numel();
    return n;
}

namespace {

template <typename T>
Tensor<T> normal_tensor(const std::vector<int>& shape, Rng& rng, double stddev) {
    Tensor<T> t(shape);
    T* p = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

template <typename T>
void add_conv(ParamSet<T>& ps, const std::string& prefix, int c_in, int c_out, Rng& rng) {
    ps.add(prefix + ".conv.w", normal_tensor<T>({c_out, c_in, 3, 3}, rng, 0.02));
    ps.add(prefix + ".conv.b", Tensor<T>({c_out}, T(0)));
}

template <typename T>
void add_inorm(ParamSet<T>& ps, const std::string& prefix, int c, Rng&) {
    ps.add(prefix + ".in.g", Tensor<T>({c}, T(1)));
    ps.add(prefix + ".in.b", Tensor<T>({c}, T(0)));
}

constexpr int kPairChannels = 6; // stacked over + under RGB

} // namespace

template <typename T>
GeneratorParams<T> init_generator(const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    GeneratorParams<T> g;
    g.cfg = cfg;

    g.add("mlp.w1", normal_tensor<T>({cfg.d_latent, cfg.n_styles}, rng, 0.02));
    g.add("mlp.b1", Tensor<T>({cfg.d_latent}, T(0)));
    g.add("mlp.w2", normal_tensor<T>({cfg.d_latent, cfg.d_latent}, rng, 0.02));
    g.add("mlp.b2", Tensor<T>({cfg.d_latent}, T(0)));

    for (int i = 0; i < cfg.depth; ++i) {
        const int c_in = (i == 0) ? kPairChannels : cfg.encoder_channels(i - 1);
        const int c_out = cfg.encoder_channels(i);
        const std::string p = "enc" + std::to_string(i);
        add_conv(g, p, c_in, c_out, rng);
        add_inorm(g, p, c_out, rng);
    }

    for (int j = 0; j + 1 < cfg.depth; ++j) {
        const int prev = (j == 0) ? cfg.encoder_channels(cfg.depth - 1)
                                  : cfg.encoder_channels(cfg.depth - 1 - j);
        const int skip = cfg.encoder_channels(cfg.depth - 2 - j);
        const int c_in = prev + skip;
        const std::string p = "dec" + std::to_string(j);
        g.add(p + ".aff.w", normal_tensor<T>({c_in, cfg.d_latent}, rng, 0.02));
        g.add(p + ".aff.b", Tensor<T>({c_in}, T(1)));
        add_conv(g, p, c_in, skip, rng);
    }

    add_conv(g, "head", cfg.encoder_channels(0) + kPairChannels, 3, rng);
    return g;
}

template <typename T>
DiscriminatorParams<T> init_discriminator(const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    DiscriminatorParams<T> d;
    d.cfg = cfg;
    int c_in = kPairChannels + 3; // candidate + pair
    for (int i = 0; i < 3; ++i) {
        const int c_out = cfg.base_channels << (i + 1);
        const std::string p = "d" + std::to_string(i);
        add_conv(d, p, c_in, c_out, rng);
        if (i > 0) add_inorm(d, p, c_out, rng);
        c_in = c_out;
    }
    add_conv(d, "d.out", c_in, 1, rng);
    return d;
}

// ---- forward passes -------------------------------------------------------

template <typename T>
Tensor<T> mlp_map(const Tensor<T>& code, const GeneratorParams<T>& g) {
    Tensor<T> c2 = (code.rank() == 1) ? reshape(code, {1, code.dim(0)}) : code;
    if (c2.rank() != 2 || c2.dim(0) != 1 || c2.dim(1) != g.cfg.n_styles)
        throw ShapeError("mlp_map expects a style code of length n_styles");
    Tensor<T> h = linear(c2, g.at("mlp.w1"), g.at("mlp.b1"));
    h = leaky_relu(h, T(0.2));
    return linear(h, g.at("mlp.w2"), g.at("mlp.b2"));
}

template <typename T>
Tensor<T> scb_forward(const Tensor<T>& x, const Tensor<T>& latent, const Tensor<T>& affine_w,
                      const Tensor<T>& affine_b, const Tensor<T>& conv_w, const Tensor<T>& conv_b,
                      T eps, bool demodulate) {
    Tensor<T> s = linear(latent, affine_w, affine_b); // [1, Cin]
    s = reshape(s, {s.dim(1)});
    Tensor<T> y = conv2d_modulated(x, conv_w, s, eps, demodulate, 1, -1);
    y = add(y, reshape(conv_b, {1, conv_w.dim(0), 1, 1}));
    return leaky_relu(y, T(0.2));
}

template <typename T>
Tensor<T> generator_forward_latent(const Tensor<T>& pair, const Tensor<T>& latent,
                                   const GeneratorParams<T>& g) {
    const NetConfig& cfg = g.cfg;
    if (pair.rank() != 4 || pair.dim(0) != 1 || pair.dim(1) != kPairChannels)
        throw ShapeError("generator_forward expects a [1,6,H,W] exposure stack");
    if (latent.rank() != 2 || latent.dim(0) != 1 || latent.dim(1) != cfg.d_latent)
        throw ShapeError("generator latent must have shape [1, d_latent]");
    const int H = pair.dim(2), W = pair.dim(3);
    const int div = 1 << cfg.depth;
    if (H % div != 0 || W % div != 0 || H < div || W < div)
        throw ShapeError("generator input sides must be positive multiples of 2^depth");

    std::vector<Tensor<T>> skips; // activations above the bottleneck
    Tensor<T> h = pair;
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string p = "enc" + std::to_string(i);
        h = conv2d(h, g.at(p + ".conv.w"), g.at(p + ".conv.b"), 2, 1);
        h = instance_norm(h, g.at(p + ".in.g"), g.at(p + ".in.b"), T(1e-5));
        h = leaky_relu(h, T(0.2));
        if (i + 1 < cfg.depth) skips.push_back(h);
    }

    for (int j = 0; j + 1 < cfg.depth; ++j) {
        h = nearest_upsample_2x(h);
        h = concat_channels(h, skips[static_cast<std::size_t>(cfg.depth - 2 - j)]);
        const std::string p = "dec" + std::to_string(j);
        h = scb_forward(h, latent, g.at(p + ".aff.w"), g.at(p + ".aff.b"), g.at(p + ".conv.w"),
                        g.at(p + ".conv.b"), T(cfg.demod_eps), true);
    }

    h = nearest_upsample_2x(h);
    h = concat_channels(h, pair);
    h = conv2d(h, g.at("head.conv.w"), g.at("head.conv.b"), 1, 1);
    h = tanh(h);
    return scale(add_scalar(h, T(1)), T(0.5));
}

template <typename T>
Tensor<T> generator_forward(const Tensor<T>& pair, const Tensor<T>& code,
                            const GeneratorParams<T>& g) {
    return generator_forward_latent(pair, mlp_map(code, g), g);
}

template <typename T>
Tensor<T> discriminator_forward(const Tensor<T>& candidate, const Tensor<T>& pair,
                                const DiscriminatorParams<T>& d) {
    if (candidate.rank() != 4 || candidate.dim(0) != 1 || candidate.dim(1) != 3)
        throw ShapeError("discriminator_forward expects a [1,3,H,W] candidate");
    if (pair.rank() != 4 || pair.dim(0) != 1 || pair.dim(1) != kPairChannels ||
        pair.dim(2) != candidate.dim(2) || pair.dim(3) != candidate.dim(3))
        throw ShapeError("discriminator_forward expects a matching [1,6,H,W] exposure stack");
    const int H = candidate.dim(2), W = candidate.dim(3);
    if (H % 8 != 0 || W % 8 != 0 || H < 8 || W < 8)
        throw ShapeError("discriminator input sides must be positive multiples of 8");

    Tensor<T> h = concat_channels(candidate, pair);
    for (int i = 0; i < 3; ++i) {
        const std::string p = "d" + std::to_string(i);
        h = conv2d(h, d.at(p + ".conv.w"), d.at(p + ".conv.b"), 2, 1);
        if (i > 0) h = instance_norm(h, d.at(p + ".in.g"), d.at(p + ".in.b"), T(1e-5));
        h = leaky_relu(h, T(0.2));
    }
    return conv2d(h, d.at("d.out.conv.w"), d.at("d.out.conv.b"), 1, 1);
}

Image generate_image(const ExposurePair& pair, const std::vector<float>& code,
                     const GeneratorParams<float>& g) {
    Tensor<float> x = pair_to_tensor<float>(pair);
    Tensor<float> c({static_cast<int>(code.size())}, code);
    Tensor<float> y = generator_forward(x, c, g);
    validate_finite(y, "generator output");
    return tensor_to_image(y);
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'E', 'M', 'E', 'F'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr const char* kConfigName = "net_config";

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

void put_tensor(std::string& out, const std::string& name, const std::vector<int>& shape,
                const float* data, std::size_t numel) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < numel; ++i) put_f32(out, data[i]);
}

struct Reader {
    const unsigned char* p;
    std::size_t left;

    void need(std::size_t n) const {
        if (left < n) throw DataError("checkpoint file is truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
        p += 4;
        left -= 4;
        return v;
    }
    float f32() {
        std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        left -= n;
        return s;
    }
};

} // namespace

void save_checkpoint(const ParamSet<float>& params, const std::string& path) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kCheckpointVersion);
    put_u32(buf, static_cast<std::uint32_t>(params.items.size() + 1));

    const NetConfig& c = params.cfg;
    const float cfg_vals[6] = {static_cast<float>(c.input_size), static_cast<float>(c.base_channels),
                               static_cast<float>(c.depth),      static_cast<float>(c.n_styles),
                               static_cast<float>(c.d_latent),   c.demod_eps};
    put_tensor(buf, kConfigName, {6}, cfg_vals, 6);
    for (const auto& kv : params.items)
        put_tensor(buf, kv.first, kv.second.shape(), kv.second.data(), kv.second.numel());

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open checkpoint for writing: " + tmp);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        out.flush();
        if (!out) throw DataError("checkpoint write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot move checkpoint into place: " + ec.message());
}

ParamSet<float> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (!in.good() && !in.eof()) throw DataError("checkpoint read failed: " + path);

    Reader r{reinterpret_cast<const unsigned char*>(raw.data()), raw.size()};
    if (r.str(4) != std::string(kMagic, 4)) throw DataError("not a checkpoint file: " + path);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    if (count == 0 || count > 100000) throw DataError("checkpoint tensor count is implausible");

    ParamSet<float> ps;
    bool have_cfg = false;
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = r.u32();
        if (name_len == 0 || name_len > 4096) throw DataError("checkpoint tensor name is implausible");
        const std::string name = r.str(name_len);
        const std::uint32_t rank = r.u32();
        if (rank == 0 || rank > 8) throw DataError("checkpoint tensor rank is implausible");
        std::vector<int> shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const std::uint32_t d = r.u32();
            if (d == 0 || d > (1u << 24)) throw DataError("checkpoint tensor dim is implausible");
            shape[i] = static_cast<int>(d);
            numel *= d;
            if (numel > (std::size_t(1) << 27)) throw DataError("checkpoint tensor is implausibly big");
        }
        std::vector<float> vals(numel);
        for (std::size_t i = 0; i < numel; ++i) vals[i] = r.f32();

        if (name == kConfigName) {
            if (have_cfg || numel != 6) throw DataError("checkpoint config block is malformed");
            ps.cfg.input_size = static_cast<int>(vals[0]);
            ps.cfg.base_channels = static_cast<int>(vals[1]);
            ps.cfg.depth = static_cast<int>(vals[2]);
            ps.cfg.n_styles = static_cast<int>(vals[3]);
            ps.cfg.d_latent = static_cast<int>(vals[4]);
            ps.cfg.demod_eps = vals[5];
            have_cfg = true;
        } else {
            if (ps.has(name)) throw DataError("checkpoint has a duplicate tensor: " + name);
            ps.add(name, Tensor<float>(std::move(shape), std::move(vals)));
        }
    }
    if (r.left != 0) throw DataError("checkpoint has trailing bytes");
    if (!have_cfg) throw DataError("checkpoint is missing its config block");
    try {
        ps.cfg.validate();
    } catch (const ShapeError& e) {
        throw DataError(std::string("checkpoint config invalid: ") + e.what());
    }
    return ps;
}

// ---- instantiations -------------------------------------------------------

#define EMEF_INSTANTIATE_IMITATOR(T)                                                              \
    template struct ParamSet<T>;                                                                  \
    template GeneratorParams<T> init_generator<T>(const NetConfig&, Rng&);                        \
    template DiscriminatorParams<T> init_discriminator<T>(const NetConfig&, Rng&);                \
    template Tensor<T> mlp_map<T>(const Tensor<T>&, const GeneratorParams<T>&);                   \
    template Tensor<T> scb_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                      const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,   \
                                      bool);                                                      \
    template Tensor<T> generator_forward<T>(const Tensor<T>&, const Tensor<T>&,                   \
                                            const GeneratorParams<T>&);                          \
    template Tensor<T> generator_forward_latent<T>(const Tensor<T>&, const Tensor<T>&,            \
                                                   const GeneratorParams<T>&);                    \
    template Tensor<T> discriminator_forward<T>(const Tensor<T>&, const Tensor<T>&,               \
                                                const DiscriminatorParams<T>&);

EMEF_INSTANTIATE_IMITATOR(float)
EMEF_INSTANTIATE_IMITATOR(double)

#undef EMEF_INSTANTIATE_IMITATOR

} // namespace emef
