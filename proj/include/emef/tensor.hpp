#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "emef/errors.hpp"

namespace emef {

template <typename T>
class Tape;

// Dense n-dimensional array with optional participation in reverse-mode
// differentiation. Values are immutable once produced by an op; parameter
// buffers are mutated only by the optimizer between passes. Copies are
// shallow (shared storage).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, T fill = T(0));
    Tensor(std::vector<int> shape, std::vector<T> values);

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    bool empty() const { return numel() == 0; }

    const T* data() const { return data_->data(); }
    T* mutable_data() { return data_->data(); }
    const std::vector<T>& values() const { return *data_; }

    // Scalar access; requires numel() == 1.
    T value() const;
    T at(const std::vector<int>& index) const;

    bool tracked() const { return tape_ != nullptr; }
    Tape<T>* tape() const { return tape_; }
    bool has_grad() const { return grad_ != nullptr; }
    const std::vector<T>& grad() const;
    std::vector<T>* grad_buffer() const { return grad_.get(); }
    void ensure_grad();
    void zero_grad();

    // Returns a view sharing data and gradient storage, registered on `tape`.
    // Ops whose inputs carry a tape record their backward rule on it.
    Tensor on(Tape<T>& tape) const;
    // Same storage, no tape participation.
    Tensor detached() const;

    bool all_finite() const;

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<T>> data_;
    std::shared_ptr<std::vector<T>> grad_;
    Tape<T>* tape_ = nullptr;

    template <typename U>
    friend Tensor<U> reshape(const Tensor<U>& x, std::vector<int> new_shape);
};

// Records one closure per op in execution order; backward() replays them in
// reverse exactly once. Single-owner, single-threaded, consumed by one
// backward pass.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> fn);
    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

    // Seeds d(loss)/d(loss) = 1 and propagates to every tracked leaf.
    void backward(const Tensor<T>& loss);

private:
    std::vector<std::function<void()>> entries_;
    bool consumed_ = false;
};

// ---- elementwise / scalar ops ------------------------------------------

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T c);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T c);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <typename T> Tensor<T> tanh(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);

// ---- reductions and structure ops --------------------------------------

template <typename T> Tensor<T> sum_all(const Tensor<T>& x);
template <typename T> Tensor<T> mean_all(const Tensor<T>& x);
// Keeps reduced axes as size-1 dims.
template <typename T> Tensor<T> sum_axes(const Tensor<T>& x, const std::vector<int>& axes);
template <typename T> Tensor<T> mean_axes(const Tensor<T>& x, const std::vector<int>& axes);

// Metadata-only; shares value and gradient storage.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape);

// 4-D [N,C,H,W] ops.
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> nearest_upsample_2x(const Tensor<T>& x);

// Per-(sample, channel) plane normalization to zero mean / unit variance,
// then affine: gamma * xhat + beta. gamma/beta have shape [C].
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5));

// ---- linear algebra ------------------------------------------------------

// x: [M, in], w: [out, in], b: [out] -> [M, out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Cross-correlation with zero padding. x: [N,Cin,H,W], w: [Cout,Cin,k,k],
// b: [Cout]. Output H' = floor((H + 2*pad - k)/stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int pad = 0);

// Per-input-channel weight modulation w'[o,i,k,l] = s[i] * w[o,i,k,l]; if
// demodulate, each output channel is rescaled by 1/sqrt(sum w'^2 + eps)
// before the convolution. Differentiable in x, w and s.
template <typename T>
Tensor<T> conv2d_modulated(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& s,
                           T eps, bool demodulate, int stride = 1, int pad = -1);

// Sliding-window extraction: x [H,W] -> [k*k, L] with L the number of
// window positions at the given stride, no padding.
template <typename T>
Tensor<T> unfold(const Tensor<T>& x, int k, int stride = 1);

// ---- losses / validation -------------------------------------------------

// Mean over elements of the numerically stable binary cross entropy between
// logits and constant 0/1 targets.
template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& targets);

// Throws NumericError naming `what` if any element is NaN/Inf.
template <typename T>
const Tensor<T>& validate_finite(const Tensor<T>& x, const std::string& what);

} // namespace emef
