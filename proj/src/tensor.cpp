#include "emef/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace emef {

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// NumPy-style result shape: align trailing dims, each pair equal or 1.
std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
    std::size_t r = std::max(a.size(), b.size());
    std::vector<int> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError("incompatible shapes for broadcast: " + shape_str(a) + " vs " +
                             shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Element strides of a tensor of shape `s` when indexed by coordinates of the
// (right-aligned) broadcast shape `full`; 0 on broadcast dims.
std::vector<std::size_t> bcast_strides(const std::vector<int>& s, const std::vector<int>& full) {
    std::vector<std::size_t> strides(full.size(), 0);
    std::size_t acc = 1;
    std::size_t off = full.size() - s.size();
    for (std::size_t i = s.size(); i-- > 0;) {
        strides[off + i] = (s[i] == 1) ? 0 : acc;
        acc *= static_cast<std::size_t>(s[i]);
    }
    return strides;
}

// Walks every coordinate of `full` in row-major order, maintaining offsets
// into two broadcast operands.
template <typename F>
void for_each_bcast(const std::vector<int>& full, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& body) {
    const std::size_t n = shape_numel(full);
    const int r = static_cast<int>(full.size());
    std::vector<int> idx(full.size(), 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
        body(i, oa, ob);
        for (int d = r - 1; d >= 0; --d) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < full[d]) break;
            oa -= sa[d] * static_cast<std::size_t>(full[d]);
            ob -= sb[d] * static_cast<std::size_t>(full[d]);
            idx[d] = 0;
        }
    }
}

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> inputs) {
    Tape<T>* tape = nullptr;
    for (const Tensor<T>* t : inputs) {
        if (!t->tracked()) continue;
        if (tape && tape != t->tape())
            throw std::logic_error("op inputs recorded on different tapes");
        tape = t->tape();
    }
    return tape;
}

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int conv_out_size(int in, int k, int stride, int pad) {
    int out = (in + 2 * pad - k) / stride + 1;
    if (out <= 0) throw ShapeError("convolution output size would be empty");
    return out;
}

// Gathers conv patches: cols[(ci*k+ki)*k+kj][oy*Wo+ox] = x[n,ci,...] (0 outside).
template <typename T>
void im2col(const T* x, int Cin, int H, int W, int k, int stride, int pad, int Ho, int Wo,
            T* cols) {
    const std::size_t L = static_cast<std::size_t>(Ho) * Wo;
    for (int ci = 0; ci < Cin; ++ci) {
        const T* plane = x + static_cast<std::size_t>(ci) * H * W;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                T* row = cols + (static_cast<std::size_t>(ci) * k * k + ki * k + kj) * L;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) {
                        std::fill(row + static_cast<std::size_t>(oy) * Wo,
                                  row + static_cast<std::size_t>(oy + 1) * Wo, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * W;
                    T* dst = row + static_cast<std::size_t>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kj;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add of column gradients back onto the input plane.
template <typename T>
void col2im_accumulate(const T* cols, int Cin, int H, int W, int k, int stride, int pad, int Ho,
                       int Wo, T* gx) {
    const std::size_t L = static_cast<std::size_t>(Ho) * Wo;
    for (int ci = 0; ci < Cin; ++ci) {
        T* plane = gx + static_cast<std::size_t>(ci) * H * W;
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const T* row = cols + (static_cast<std::size_t>(ci) * k * k + ki * k + kj) * L;
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= H) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * W;
                    const T* src = row + static_cast<std::size_t>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

} // namespace

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(std::vector<int> shape, T fill)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<T>>(shape_numel(shape_), fill)) {}

template <typename T>
Tensor<T>::Tensor(std::vector<int> shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != values.size())
        throw ShapeError("value count does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
}

template <typename T>
T Tensor<T>::value() const {
    if (numel() != 1) throw ShapeError("value() requires a scalar tensor");
    return (*data_)[0];
}

template <typename T>
T Tensor<T>::at(const std::vector<int>& index) const {
    if (index.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t off = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= shape_[i]) throw ShapeError("index out of range");
        off = off * static_cast<std::size_t>(shape_[i]) + static_cast<std::size_t>(index[i]);
    }
    return (*data_)[off];
}

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient buffer");
    return *grad_;
}

template <typename T>
void Tensor<T>::ensure_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<T>>(numel(), T(0));
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::on(Tape<T>& tape) const {
    Tensor<T> out = *this;
    out.ensure_grad();
    out.tape_ = &tape;
    return out;
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
    Tensor<T> out = *this;
    out.grad_.reset();
    out.tape_ = nullptr;
    return out;
}

template <typename T>
bool Tensor<T>::all_finite() const {
    for (const T& v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- Tape -------------------------------------------------------------------

template <typename T>
void Tape<T>::record(std::function<void()> fn) {
    if (consumed_) throw std::logic_error("tape already consumed by backward");
    entries_.push_back(std::move(fn));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (consumed_) throw std::logic_error("tape already consumed by backward");
    if (loss.numel() != 1) throw ShapeError("backward requires a scalar loss");
    if (!loss.tracked() || loss.tape() != this)
        throw std::logic_error("loss is not connected to this tape");
    consumed_ = true;
    (*loss.grad_buffer())[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
}

// ---- op plumbing -----------------------------------------------------------

namespace {

// Finish an op: attach the output to the inputs' tape (if any) and record the
// backward closure produced by `make_backward(out)`.
template <typename T, typename MakeBackward>
Tensor<T> finish(Tensor<T> out, Tape<T>* tape, MakeBackward&& make_backward) {
    if (!tape) return out;
    out = out.on(*tape);
    tape->record(make_backward(out));
    return out;
}

template <typename T, typename Fwd, typename Dfdx>
Tensor<T> unary_op(const Tensor<T>& x, Fwd f, Dfdx dfdx) {
    Tensor<T> out(x.shape());
    const T* px = x.data();
    T* po = out.mutable_data();
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = f(px[i]);
    return finish(out, common_tape<T>({&x}), [x, dfdx](const Tensor<T>& o) {
        return [x, o, dfdx]() {
            if (!x.has_grad()) return;
            const std::vector<T>& go = *o.grad_buffer();
            std::vector<T>& gx = *x.grad_buffer();
            const T* px = x.data();
            const T* py = o.data();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * dfdx(px[i], py[i]);
        };
    });
}

// Binary broadcasting op. `f` computes the value, `dfa`/`dfb` the local
// partials as functions of (a, b, out).
template <typename T, typename F, typename Dfa, typename Dfb>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f, Dfa dfa, Dfb dfb) {
    const std::vector<int> full = broadcast_shape(a.shape(), b.shape());
    const auto sa = bcast_strides(a.shape(), full);
    const auto sb = bcast_strides(b.shape(), full);
    Tensor<T> out(full);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.mutable_data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.numel(); ++i) po[i] = f(pa[i], pb[i]);
    } else {
        for_each_bcast(full, sa, sb,
                       [&](std::size_t i, std::size_t oa, std::size_t ob) { po[i] = f(pa[oa], pb[ob]); });
    }
    return finish(out, common_tape<T>({&a, &b}), [=](const Tensor<T>& o) {
        return [=]() {
            const std::vector<T>& go = *o.grad_buffer();
            const T* pa = a.data();
            const T* pb = b.data();
            const T* py = o.data();
            std::vector<T>* ga = a.has_grad() ? a.grad_buffer() : nullptr;
            std::vector<T>* gb = b.has_grad() ? b.grad_buffer() : nullptr;
            if (!ga && !gb) return;
            for_each_bcast(full, sa, sb, [&](std::size_t i, std::size_t oa, std::size_t ob) {
                if (ga) (*ga)[oa] += go[i] * dfa(pa[oa], pb[ob], py[i]);
                if (gb) (*gb)[ob] += go[i] * dfb(pa[oa], pb[ob], py[i]);
            });
        };
    });
}

} // namespace

// ---- elementwise ops ---------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T, T y, T o) { return -o / y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return unary_op(
        x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return unary_op(
        x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    return unary_op(
        x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary_op(
        x,
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return unary_op(
        x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(1) / (T(2) * y); });
}

// ---- reductions ---------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    const T* px = x.data();
    for (std::size_t i = 0; i < x.numel(); ++i) acc += px[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    return finish(out, common_tape<T>({&x}), [x](const Tensor<T>& o) {
        return [x, o]() {
            if (!x.has_grad()) return;
            const T g = (*o.grad_buffer())[0];
            std::vector<T>& gx = *x.grad_buffer();
            for (T& v : gx) v += g;
        };
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum_axes(const Tensor<T>& x, const std::vector<int>& axes) {
    std::vector<int> oshape = x.shape();
    for (int a : axes) {
        if (a < 0 || a >= x.rank()) throw ShapeError("reduction axis out of range");
        oshape[static_cast<std::size_t>(a)] = 1;
    }
    const auto so = bcast_strides(oshape, x.shape());
    const auto sx = bcast_strides(x.shape(), x.shape());
    Tensor<T> out(oshape, T(0));
    const T* px = x.data();
    T* po = out.mutable_data();
    for_each_bcast(x.shape(), sx, so,
                   [&](std::size_t, std::size_t ox, std::size_t oo) { po[oo] += px[ox]; });
    return finish(out, common_tape<T>({&x}), [=](const Tensor<T>& o) {
        return [=]() {
            if (!x.has_grad()) return;
            const std::vector<T>& go = *o.grad_buffer();
            std::vector<T>& gx = *x.grad_buffer();
            for_each_bcast(x.shape(), sx, so,
                           [&](std::size_t, std::size_t ox, std::size_t oo) { gx[ox] += go[oo]; });
        };
    });
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& x, const std::vector<int>& axes) {
    std::size_t count = 1;
    for (int a : axes) count *= static_cast<std::size_t>(x.dim(a));
    return scale(sum_axes(x, axes), T(1) / static_cast<T>(count));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape changes element count: " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape));
    // Shares both value and gradient storage; no backward entry needed.
    Tensor<T> out = x;
    out.shape_ = std::move(new_shape);
    return out;
}

// ---- structure ops -------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4) throw ShapeError("concat_channels expects 4-D tensors");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels operands differ outside the channel axis");
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor<T> out({N, Ca + Cb, H, W});
    T* po = out.mutable_data();
    const T* pa = a.data();
    const T* pb = b.data();
    for (int n = 0; n < N; ++n) {
        std::copy(pa + static_cast<std::size_t>(n) * Ca * plane,
                  pa + static_cast<std::size_t>(n + 1) * Ca * plane,
                  po + static_cast<std::size_t>(n) * (Ca + Cb) * plane);
        std::copy(pb + static_cast<std::size_t>(n) * Cb * plane,
                  pb + static_cast<std::size_t>(n + 1) * Cb * plane,
                  po + static_cast<std::size_t>(n) * (Ca + Cb) * plane + Ca * plane);
    }
    return finish(out, common_tape<T>({&a, &b}), [=](const Tensor<T>& o) {
        return [=]() {
            const std::vector<T>& go = *o.grad_buffer();
            for (int n = 0; n < N; ++n) {
                const std::size_t base = static_cast<std::size_t>(n) * (Ca + Cb) * plane;
                if (a.has_grad()) {
                    std::vector<T>& ga = *a.grad_buffer();
                    for (std::size_t i = 0; i < static_cast<std::size_t>(Ca) * plane; ++i)
                        ga[static_cast<std::size_t>(n) * Ca * plane + i] += go[base + i];
                }
                if (b.has_grad()) {
                    std::vector<T>& gb = *b.grad_buffer();
                    for (std::size_t i = 0; i < static_cast<std::size_t>(Cb) * plane; ++i)
                        gb[static_cast<std::size_t>(n) * Cb * plane + i] +=
                            go[base + Ca * plane + i];
                }
            }
        };
    });
}

template <typename T>
Tensor<T> nearest_upsample_2x(const Tensor<T>& x) {
    if (x.rank() != 4) throw ShapeError("nearest_upsample_2x expects a 4-D tensor");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> out({N, C, 2 * H, 2 * W});
    const T* px = x.data();
    T* po = out.mutable_data();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* src = px + static_cast<std::size_t>(nc) * H * W;
        T* dst = po + static_cast<std::size_t>(nc) * 4 * H * W;
        for (int y = 0; y < H; ++y) {
            for (int x2 = 0; x2 < W; ++x2) {
                T v = src[static_cast<std::size_t>(y) * W + x2];
                T* d = dst + static_cast<std::size_t>(2 * y) * 2 * W + 2 * x2;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
        }
    }
    return finish(out, common_tape<T>({&x}), [=](const Tensor<T>& o) {
        return [=]() {
            if (!x.has_grad()) return;
            const std::vector<T>& go = *o.grad_buffer();
            std::vector<T>& gx = *x.grad_buffer();
            for (int nc = 0; nc < N * C; ++nc) {
                const T* gsrc = go.data() + static_cast<std::size_t>(nc) * 4 * H * W;
                T* gdst = gx.data() + static_cast<std::size_t>(nc) * H * W;
                for (int y = 0; y < H; ++y) {
                    for (int x2 = 0; x2 < W; ++x2) {
                        const T* g = gsrc + static_cast<std::size_t>(2 * y) * 2 * W + 2 * x2;
                        gdst[static_cast<std::size_t>(y) * W + x2] +=
                            g[0] + g[1] + g[2 * W] + g[2 * W + 1];
                    }
                }
            }
        };
    });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps) {
    if (x.rank() != 4) throw ShapeError("instance_norm expects a 4-D tensor");
    const int C = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw ShapeError("instance_norm affine parameters must have shape [C]");
    Tensor<T> mu = mean_axes(x, {2, 3});
    Tensor<T> centered = sub(x, mu);
    Tensor<T> var = mean_axes(mul(centered, centered), {2, 3});
    Tensor<T> inv = divide(Tensor<T>::scalar(T(1)), sqrt(add_scalar(var, eps)));
    Tensor<T> normalized = mul(centered, inv);
    Tensor<T> g4 = reshape(gamma, {1, C, 1, 1});
    Tensor<T> b4 = reshape(beta, {1, C, 1, 1});
    return add(mul(normalized, g4), b4);
}

// ---- linear algebra --------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
        throw ShapeError("linear expects x [M,in], w [out,in], b [out]");
    const int M = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    if (w.dim(1) != in || b.dim(0) != out_dim)
        throw ShapeError("linear parameter shapes are inconsistent");
    Tensor<T> out({M, out_dim});
    {
        Eigen::Map<const MatRM<T>> X(x.data(), M, in);
        Eigen::Map<const MatRM<T>> W(w.data(), out_dim, in);
        Eigen::Map<MatRM<T>> Y(out.mutable_data(), M, out_dim);
        Y.noalias() = X * W.transpose();
        for (int r = 0; r < M; ++r)
            for (int c = 0; c < out_dim; ++c) Y(r, c) += b.data()[c];
    }
    return finish(out, common_tape<T>({&x, &w, &b}), [=](const Tensor<T>& o) {
        return [=]() {
            const std::vector<T>& go = *o.grad_buffer();
            Eigen::Map<const MatRM<T>> GO(go.data(), M, out_dim);
            Eigen::Map<const MatRM<T>> X(x.data(), M, in);
            Eigen::Map<const MatRM<T>> W(w.data(), out_dim, in);
            if (x.has_grad()) {
                Eigen::Map<MatRM<T>> GX(x.grad_buffer()->data(), M, in);
                GX.noalias() += GO * W;
            }
            if (w.has_grad()) {
                Eigen::Map<MatRM<T>> GW(w.grad_buffer()->data(), out_dim, in);
                GW.noalias() += GO.transpose() * X;
            }
            if (b.has_grad()) {
                std::vector<T>& gb = *b.grad_buffer();
                for (int r = 0; r < M; ++r)
                    for (int c = 0; c < out_dim; ++c) gb[static_cast<std::size_t>(c)] += GO(r, c);
            }
        };
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int pad) {
    if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1)
        throw ShapeError("conv2d expects x [N,C,H,W], w [O,C,k,k], b [O]");
    const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != Cin) throw ShapeError("conv2d channel mismatch between input and weights");
    if (w.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d kernels must be square with odd k");
    if (b.dim(0) != Cout) throw ShapeError("conv2d bias length mismatch");
    if (stride < 1 || pad < 0) throw ShapeError("conv2d requires stride >= 1 and pad >= 0");
    const int Ho = conv_out_size(H, k, stride, pad);
    const int Wo = conv_out_size(W, k, stride, pad);
    const int CKK = Cin * k * k;
    const std::size_t L = static_cast<std::size_t>(Ho) * Wo;

    Tensor<T> out({N, Cout, Ho, Wo});
    {
        std::vector<T> cols(static_cast<std::size_t>(CKK) * L);
        Eigen::Map<const MatRM<T>> Wm(w.data(), Cout, CKK);
        for (int n = 0; n < N; ++n) {
            im2col(x.data() + static_cast<std::size_t>(n) * Cin * H * W, Cin, H, W, k, stride,
                   pad, Ho, Wo, cols.data());
            Eigen::Map<const MatRM<T>> Cm(cols.data(), CKK, static_cast<int>(L));
            Eigen::Map<MatRM<T>> Om(out.mutable_data() + static_cast<std::size_t>(n) * Cout * L,
                                    Cout, static_cast<int>(L));
            Om.noalias() = Wm * Cm;
            for (int co = 0; co < Cout; ++co) Om.row(co).array() += b.data()[co];
        }
    }
    return finish(out, common_tape<T>({&x, &w, &b}), [=](const Tensor<T>& o) {
        return [=]() {
            const std::vector<T>& go = *o.grad_buffer();
            const bool need_x = x.has_grad(), need_w = w.has_grad(), need_b = b.has_grad();
            if (!need_x && !need_w && !need_b) return;
            std::vector<T> cols(static_cast<std::size_t>(CKK) * L);
            Eigen::Map<const MatRM<T>> Wm(w.data(), Cout, CKK);
            for (int n = 0; n < N; ++n) {
                Eigen::Map<const MatRM<T>> GO(go.data() + static_cast<std::size_t>(n) * Cout * L,
                                              Cout, static_cast<int>(L));
                if (need_w || need_x) {
                    im2col(x.data() + static_cast<std::size_t>(n) * Cin * H * W, Cin, H, W, k,
                           stride, pad, Ho, Wo, cols.data());
                }
                if (need_w) {
                    Eigen::Map<const MatRM<T>> Cm(cols.data(), CKK, static_cast<int>(L));
                    Eigen::Map<MatRM<T>> GW(w.grad_buffer()->data(), Cout, CKK);
                    GW.noalias() += GO * Cm.transpose();
                }
                if (need_x) {
                    MatRM<T> GC = Wm.transpose() * GO;
                    col2im_accumulate(GC.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                                      x.grad_buffer()->data() +
                                          static_cast<std::size_t>(n) * Cin * H * W);
                }
                if (need_b) {
                    std::vector<T>& gb = *b.grad_buffer();
                    for (int co = 0; co < Cout; ++co) gb[static_cast<std::size_t>(co)] += GO.row(co).sum();
                }
            }
        };
    });
}

template <typename T>
Tensor<T> conv2d_modulated(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& s, T eps,
                           bool demodulate, int stride, int pad) {
    if (w.rank() != 4) throw ShapeError("conv2d_modulated expects 4-D weights");
    const int Cout = w.dim(0), Cin = w.dim(1), k = w.dim(2);
    if (s.rank() != 1 || s.dim(0) != Cin)
        throw ShapeError("modulation style must have one scale per input channel");
    if (eps < T(0)) throw ShapeError("demodulation eps must be nonnegative");
    if (pad < 0) pad = k / 2;

    Tensor<T> modulated = mul(w, reshape(s, {1, Cin, 1, 1}));
    if (demodulate) {
        Tensor<T> sumsq = sum_axes(mul(modulated, modulated), {1, 2, 3}); // [Cout,1,1,1]
        Tensor<T> norm = sqrt(add_scalar(sumsq, eps));
        modulated = divide(modulated, norm);
    }
    Tensor<T> zero_bias({Cout}, T(0));
    return conv2d(x, modulated, zero_bias, stride, pad);
}

template <typename T>
Tensor<T> unfold(const Tensor<T>& x, int k, int stride) {
    if (x.rank() != 2) throw ShapeError("unfold expects a 2-D tensor");
    if (k < 1 || stride < 1) throw ShapeError("unfold requires k >= 1 and stride >= 1");
    const int H = x.dim(0), W = x.dim(1);
    if (H < k || W < k) throw ShapeError("unfold window larger than input");
    const int ho = (H - k) / stride + 1;
    const int wo = (W - k) / stride + 1;
    const std::size_t L = static_cast<std::size_t>(ho) * wo;
    Tensor<T> out({k * k, static_cast<int>(L)});
    const T* px = x.data();
    T* po = out.mutable_data();
    for (int ki = 0; ki < k; ++ki)
        for (int kj = 0; kj < k; ++kj) {
            T* row = po + (static_cast<std::size_t>(ki) * k + kj) * L;
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox)
                    row[static_cast<std::size_t>(oy) * wo + ox] =
                        px[static_cast<std::size_t>(oy * stride + ki) * W + (ox * stride + kj)];
        }
    return finish(out, common_tape<T>({&x}), [=](const Tensor<T>& o) {
        return [=]() {
            if (!x.has_grad()) return;
            const std::vector<T>& go = *o.grad_buffer();
            std::vector<T>& gx = *x.grad_buffer();
            for (int ki = 0; ki < k; ++ki)
                for (int kj = 0; kj < k; ++kj) {
                    const T* row = go.data() + (static_cast<std::size_t>(ki) * k + kj) * L;
                    for (int oy = 0; oy < ho; ++oy)
                        for (int ox = 0; ox < wo; ++ox)
                            gx[static_cast<std::size_t>(oy * stride + ki) * W +
                               (ox * stride + kj)] += row[static_cast<std::size_t>(oy) * wo + ox];
                }
        };
    });
}

// ---- losses / validation ------------------------------------------------------------

template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.shape() != targets.shape())
        throw ShapeError("bce_with_logits_mean requires matching shapes");
    const std::size_t n = logits.numel();
    const T* z = logits.data();
    const T* t = targets.data();
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        // max(z,0) - z*t + log(1 + exp(-|z|))
        T m = z[i] > T(0) ? z[i] : T(0);
        acc += m - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(n));
    return finish(out, common_tape<T>({&logits}), [=](const Tensor<T>& o) {
        return [=]() {
            if (!logits.has_grad()) return;
            const T g = (*o.grad_buffer())[0] / static_cast<T>(n);
            std::vector<T>& gz = *logits.grad_buffer();
            const T* z = logits.data();
            const T* t = targets.data();
            for (std::size_t i = 0; i < n; ++i) {
                T s;
                if (z[i] >= T(0))
                    s = T(1) / (T(1) + std::exp(-z[i]));
                else {
                    T e = std::exp(z[i]);
                    s = e / (T(1) + e);
                }
                gz[i] += g * (s - t[i]);
            }
        };
    });
}

template <typename T>
const Tensor<T>& validate_finite(const Tensor<T>& x, const std::string& what) {
    const T* p = x.data();
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (!std::isfinite(p[i]))
            throw NumericError(what + ": non-finite value at flat index " + std::to_string(i));
    return x;
}

// ---- explicit instantiation -----------------------------------------------------

#define EMEF_INSTANTIATE_TENSOR(T)                                                               \
    template class Tensor<T>;                                                                    \
    template class Tape<T>;                                                                      \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> divide(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> scale(const Tensor<T>&, T);                                               \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
    template Tensor<T> relu(const Tensor<T>&);                                                   \
    template Tensor<T> leaky_relu(const Tensor<T>&, T);                                          \
    template Tensor<T> tanh(const Tensor<T>&);                                                   \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                \
    template Tensor<T> sqrt(const Tensor<T>&);                                                   \
    template Tensor<T> sum_all(const Tensor<T>&);                                                \
    template Tensor<T> mean_all(const Tensor<T>&);                                               \
    template Tensor<T> sum_axes(const Tensor<T>&, const std::vector<int>&);                      \
    template Tensor<T> mean_axes(const Tensor<T>&, const std::vector<int>&);                     \
    template Tensor<T> reshape(const Tensor<T>&, std::vector<int>);                              \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> nearest_upsample_2x(const Tensor<T>&);                                    \
    template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);   \
    template Tensor<T> conv2d_modulated(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                        T, bool, int, int);                                      \
    template Tensor<T> unfold(const Tensor<T>&, int, int);                                       \
    template Tensor<T> bce_with_logits_mean(const Tensor<T>&, const Tensor<T>&);                 \
    template const Tensor<T>& validate_finite(const Tensor<T>&, const std::string&);

EMEF_INSTANTIATE_TENSOR(float)
EMEF_INSTANTIATE_TENSOR(double)

#undef EMEF_INSTANTIATE_TENSOR

} // namespace emef
