#include "emef/adam.hpp"

#include <cmath>

namespace emef {

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, T lr, T beta1, T beta2, T eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Tensor<T>& p : params_) {
        if (!p.has_grad())
            throw std::logic_error("parameter registered without a gradient buffer");
        m_.emplace_back(p.numel(), T(0));
        v_.emplace_back(p.numel(), T(0));
    }
}

template <typename T>
void Adam<T>::zero_grad() {
    for (Tensor<T>& p : params_) p.zero_grad();
}

template <typename T>
void Adam<T>::step() {
    ++step_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(step_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor<T>& p = params_[i];
        const std::vector<T>& g = *p.grad_buffer();
        std::vector<T>& m = m_[i];
        std::vector<T>& v = v_[i];
        T* w = p.mutable_data();
        for (std::size_t j = 0; j < g.size(); ++j) {
            m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[j] * g[j];
            T mhat = m[j] / bc1;
            T vhat = v[j] / bc2;
            w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

template class Adam<float>;
template class Adam<double>;

} // namespace emef
