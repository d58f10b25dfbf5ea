#ifndef MEGA_OPTIM_HPP
#define MEGA_OPTIM_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mega/autodiff.hpp"

namespace mega {

class Adam {
  public:
    Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
        }
    }

    void zero_grad() {
        for (const auto& p : params_)
            if (!p->grad.data.empty()) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }

    // One update from the gradients currently stored on the parameters.
    void step() {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            p->ensure_grad();
            for (std::size_t j = 0; j < p->value.data.size(); ++j) {
                double g = p->grad.data[j];
                double m = m_[i].data[j] = beta1_ * m_[i].data[j] + (1.0 - beta1_) * g;
                double v = v_[i].data[j] = beta2_ * v_[i].data[j] + (1.0 - beta2_) * g * g;
                p->value.data[j] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
            }
        }
    }

    // Update from externally accumulated gradients (same order as params).
    void step_with(const std::vector<Tensor>& grads) {
        require(grads.size() == params_.size(), "Adam::step_with: gradient count mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) {
            params_[i]->ensure_grad();
            params_[i]->grad.data = grads[i].data;
        }
        step();
    }

    const std::vector<Var>& params() const { return params_; }
    double lr() const { return lr_; }
    std::int64_t steps_taken() const { return t_; }

    // Moment state, exposed for checkpointing.
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void set_steps_taken(std::int64_t t) { t_ = t; }

  private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

}  // namespace mega

#endif
