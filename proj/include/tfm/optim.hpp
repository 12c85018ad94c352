#pragma once

// Adam optimizer over named parameter tensors.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tfm/tensor.hpp"

namespace tfm {

class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Registers a parameter with an optional per-parameter learning-rate
    // multiplier (used for the encoder's lower learning rate).
    void add_param(const std::string& name, Tensor t, double lr_scale = 1.0) {
        states_.push_back({name, t, std::vector<double>(t.size(), 0.0),
                           std::vector<double>(t.size(), 0.0), lr_scale});
    }

    std::size_t step_count() const { return step_; }

    void step() {
        ++step_;
        double bc1 = 1.0 - std::pow(beta1_, (double)step_);
        double bc2 = 1.0 - std::pow(beta2_, (double)step_);
        for (auto& s : states_) {
            if (s.param.grad().empty()) continue;
            const auto& g = s.param.grad();
            auto& d = s.param.data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
                double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
                d[i] -= lr_ * s.lr_scale * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& s : states_) s.param.zero_grad();
    }

private:
    struct State {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
        double lr_scale;
    };

    double lr_, beta1_, beta2_, eps_;
    std::size_t step_ = 0;
    std::vector<State> states_;
};

}  // namespace tfm
