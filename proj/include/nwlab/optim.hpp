#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "nwlab/autograd.hpp"

namespace nwlab {

// Joint L2-norm gradient clipping. Returns the applied scale (1 when the norm
// is already within the threshold).
template <typename T>
T clip_global_norm(const std::vector<TensorT<T>*>& grads, T threshold) {
    if (threshold <= T(0)) throw std::invalid_argument("clip threshold must be > 0");
    double sq = 0.0;
    for (const auto* g : grads)
        for (int64_t i = 0; i < g->numel(); ++i) {
            const double v = static_cast<double>((*g)[i]);
            sq += v * v;
        }
    const double norm = std::sqrt(sq);
    // small guard so re-clipping an already-clipped set is an exact no-op
    if (norm <= static_cast<double>(threshold) * (1.0 + 1e-12)) return T(1);
    const T s = static_cast<T>(static_cast<double>(threshold) / norm);
    for (auto* g : grads)
        for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] *= s;
    return s;
}

template <typename T>
T clip_global_norm_params(const std::vector<Var<T>>& params, T threshold) {
    std::vector<TensorT<T>*> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(&p->ensure_grad());
    return clip_global_norm(grads, threshold);
}

template <typename T>
void zero_grads(const std::vector<Var<T>>& params) {
    for (const auto& p : params) {
        p->ensure_grad();
        p->zero_grad();
    }
}

// Adam with bias correction. The paper's "momentum 0.5" is the first-moment
// coefficient; the second moment and epsilon follow common defaults.
template <typename T>
class Adam {
public:
    explicit Adam(std::vector<Var<T>> params, T lr = T(1e-4), T beta1 = T(0.5),
                  T beta2 = T(0.999), T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.push_back(TensorT<T>::zeros(p->value.shape()));
            v_.push_back(TensorT<T>::zeros(p->value.shape()));
        }
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1_), t_));
        const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2_), t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            const TensorT<T>& g = p->ensure_grad();
            if (!g.same_shape(p->value))
                throw std::invalid_argument("adam: gradient shape mismatch");
            for (int64_t i = 0; i < g.numel(); ++i) {
                m_[k][i] = beta1_ * m_[k][i] + (T(1) - beta1_) * g[i];
                v_[k][i] = beta2_ * v_[k][i] + (T(1) - beta2_) * g[i] * g[i];
                const T mhat = m_[k][i] / bc1;
                const T vhat = v_[k][i] / bc2;
                p->value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    int64_t step_count() const { return t_; }
    const std::vector<Var<T>>& params() const { return params_; }

private:
    std::vector<Var<T>> params_;
    std::vector<TensorT<T>> m_, v_;
    T lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

template <typename T>
class AdaGrad {
public:
    explicit AdaGrad(std::vector<Var<T>> params, T lr = T(1e-4), T eps = T(1e-8))
        : params_(std::move(params)), lr_(lr), eps_(eps) {
        for (const auto& p : params_) accum_.push_back(TensorT<T>::zeros(p->value.shape()));
    }

    void step() {
        ++t_;
        for (size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            const TensorT<T>& g = p->ensure_grad();
            if (!g.same_shape(p->value))
                throw std::invalid_argument("adagrad: gradient shape mismatch");
            for (int64_t i = 0; i < g.numel(); ++i) {
                accum_[k][i] += g[i] * g[i];
                p->value[i] -= lr_ * g[i] / (std::sqrt(accum_[k][i]) + eps_);
            }
        }
    }

    int64_t step_count() const { return t_; }
    const std::vector<Var<T>>& params() const { return params_; }

private:
    std::vector<Var<T>> params_;
    std::vector<TensorT<T>> accum_;
    T lr_, eps_;
    int64_t t_ = 0;
};

} // namespace nwlab
