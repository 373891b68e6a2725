#pragma once

#include <cmath>

#include "lrq/tensor.hpp"

namespace lrq {

/// Step-decay schedule computed fresh from the base rate each step, so long
/// runs cannot accumulate drift: lr(t) = base * factor^floor(t / period).
template <typename T>
T step_decay_lr(T base_lr, double factor, int64_t step, int64_t period) {
    if (period <= 0) return base_lr;
    const auto k = static_cast<double>(step / period);
    return static_cast<T>(static_cast<double>(base_lr) * std::pow(factor, k));
}

template <typename T>
class AdamT {
public:
    explicit AdamT(std::vector<TensorT<T>> params, T lr = T(0.5), T beta1 = T(0.9),
                   T beta2 = T(0.999), T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(lr > T(0))) throw ConfigError("learning rate must be positive");
        if (beta1 < T(0) || beta1 >= T(1) || beta2 < T(0) || beta2 >= T(1))
            throw ConfigError("adam betas must be in [0,1)");
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), T(0));
            v_[i].assign(params_[i].numel(), T(0));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }
    int64_t steps() const { return t_; }

    void step() {
        ++t_;
        const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), t_));
        const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto* node = params_[i].raw();
            if (node->grad.empty()) continue;
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < node->data.size(); ++j) {
                const T g = node->grad[j];
                m[j] = beta1_ * m[j] + (T(1) - beta1_) * g;
                v[j] = beta2_ * v[j] + (T(1) - beta2_) * g * g;
                node->data[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

private:
    std::vector<TensorT<T>> params_;
    T lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

using Adam = AdamT<float>;

template <typename T>
class SGDNesterovT {
public:
    explicit SGDNesterovT(std::vector<TensorT<T>> params, T lr, T momentum = T(0.9),
                          T weight_decay = T(0))
        : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
        if (!(lr > T(0))) throw ConfigError("learning rate must be positive");
        if (momentum < T(0) || momentum >= T(1)) throw ConfigError("momentum must be in [0,1)");
        if (weight_decay < T(0)) throw ConfigError("weight decay must be >= 0");
        vel_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) vel_[i].assign(params_[i].numel(), T(0));
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    void step() {
        for (size_t i = 0; i < params_.size(); ++i) {
            auto* node = params_[i].raw();
            if (node->grad.empty()) continue;
            auto& vel = vel_[i];
            for (size_t j = 0; j < node->data.size(); ++j) {
                // L2 regularization folded into the gradient
                const T g = node->grad[j] + weight_decay_ * node->data[j];
                vel[j] = momentum_ * vel[j] + g;
                node->data[j] -= lr_ * (g + momentum_ * vel[j]);
            }
        }
    }

private:
    std::vector<TensorT<T>> params_;
    T lr_, momentum_, weight_decay_;
    std::vector<std::vector<T>> vel_;
};

using SGDNesterov = SGDNesterovT<float>;

}  // namespace lrq
