#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>

#include "autodiff.hpp"

namespace oneclip {

struct AdamConfig {
    double learning_rate = 0.02;
    double beta1 = 0.0;   // no momentum, matching style-GAN practice
    double beta2 = 0.99;
    double eps = 1e-8;
};

// Adam over a ParamStore. Every eligible parameter is stepped on every call
// (missing gradients count as zero), so the moment trajectories depend only on
// the sequence of steps — a requirement for bit-exact checkpoint resume.
class AdamOptimizer {
public:
    AdamOptimizer() = default;
    explicit AdamOptimizer(AdamConfig cfg) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }

    std::map<std::string, std::pair<Tensor, Tensor>>& moments() { return moments_; }
    const std::map<std::string, std::pair<Tensor, Tensor>>& moments() const { return moments_; }

    void step(ParamStore& params, const std::function<bool(const ParamTensor&)>& eligible) {
        ++t_;
        double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& p : params.items()) {
            if (!eligible(p)) continue;
            auto& [m, v] = moments_[p.name];
            if (m.empty()) {
                m = Tensor(p.value.shape());
                v = Tensor(p.value.shape());
            }
            bool has_grad = !p.grad.empty();
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                double g = has_grad ? p.grad[i] : 0.0;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                double mh = m[i] / c1;
                double vh = v[i] / c2;
                p.value[i] -= cfg_.learning_rate * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
        params.zero_grads();
    }

private:
    AdamConfig cfg_;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_;
    std::int64_t t_ = 0;
};

}  // namespace oneclip
