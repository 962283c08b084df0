#pragma once

#include <vector>

#include "emef/tensor.hpp"

namespace emef {

// Adam with bias correction. Holds first/second moment buffers aligned with
// the registered parameter list; step() consumes the parameters' gradient
// buffers and updates their values in place.
template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>> params, T lr, T beta1 = T(0.5), T beta2 = T(0.999),
         T eps = T(1e-8));

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }
    long step_count() const { return step_; }

    void zero_grad();
    void step();

private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    T lr_, beta1_, beta2_, eps_;
    long step_ = 0;
};

} // namespace emef
