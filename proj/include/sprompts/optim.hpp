#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "sprompts/tensor.hpp"

namespace sprompts::gradcore {

// SGD with classical momentum: v <- mu * v + g, p <- p - lr * v.
// step() consumes the gradients: it errors on any parameter the last backward
// pass never reached, then zeroes all grads so stale values cannot leak into
// the next step.
class SgdMomentum {
public:
    explicit SgdMomentum(float momentum) : momentum_(momentum) {}

    void add_param(const Tensor& p) {
        if (!p.requires_grad())
            throw GradError("SgdMomentum: tensor '" + p.name() +
                            "' does not require grad");
        slots_.push_back({p, std::vector<float>(p.values().size(), 0.0f)});
    }

    std::size_t param_count() const { return slots_.size(); }

    void step(float lr) {
        for (auto& s : slots_)
            if (!s.param.grad_populated())
                throw GradError("SgdMomentum: no gradient for parameter '" +
                                s.param.name() + "'; it is not part of the loss graph");
        for (auto& s : slots_) {
            const auto& g = s.param.grad();
            auto& v = s.velocity;
            auto& p = s.param.values_mut();
            for (std::size_t i = 0; i < p.size(); ++i) {
                v[i] = momentum_ * v[i] + g[i];
                p[i] -= lr * v[i];
            }
            s.param.zero_grad();
        }
    }

private:
    struct Slot {
        Tensor param;
        std::vector<float> velocity;
    };
    float momentum_;
    std::vector<Slot> slots_;
};

// Cosine annealing from base_lr at step 0 to 0 at step total_steps.
class CosineLr {
public:
    CosineLr(float base_lr, std::int64_t total_steps)
        : base_lr_(base_lr), total_steps_(total_steps) {
        if (total_steps <= 0)
            throw GradError("CosineLr: total_steps must be positive");
    }

    float at(std::int64_t step) const {
        if (step < 0 || step > total_steps_)
            throw GradError("CosineLr: step " + std::to_string(step) +
                            " outside [0, " + std::to_string(total_steps_) + "]");
        const double t = static_cast<double>(step) / static_cast<double>(total_steps_);
        return static_cast<float>(0.5 * base_lr_ * (1.0 + std::cos(3.14159265358979323846 * t)));
    }

private:
    double base_lr_;
    std::int64_t total_steps_;
};

} // namespace sprompts::gradcore
