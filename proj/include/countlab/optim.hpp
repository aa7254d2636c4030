#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "countlab/autodiff.hpp"

namespace countlab {

/// Step learning-rate schedule: `base_rate` until `decay_start_epoch`, then
/// multiplied by `decay_factor` at that epoch and again every
/// `decay_interval` epochs. Epochs are 0-based.
struct LearningRateSchedule {
    double base_rate = 1e-3;
    double decay_factor = 0.25;
    int decay_interval = 2;
    int decay_start_epoch = 15;

    double rate(int epoch) const {
        if (epoch < decay_start_epoch || decay_interval <= 0) return base_rate;
        const int decays = 1 + (epoch - decay_start_epoch) / decay_interval;
        return base_rate * std::pow(decay_factor, decays);
    }

    void validate() const {
        if (!(base_rate > 0.0) || !std::isfinite(base_rate)) throw std::invalid_argument("schedule: base rate must be positive");
        if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw std::invalid_argument("schedule: decay factor must be in (0,1]");
        if (decay_interval <= 0) throw std::invalid_argument("schedule: decay interval must be positive");
    }
};

class NonFiniteGradient : public std::runtime_error {
public:
    NonFiniteGradient(const std::string& what, std::int64_t batch) : std::runtime_error(what), batch_(batch) {}
    std::int64_t batch() const noexcept { return batch_; }

private:
    std::int64_t batch_;
};

struct AdamState {
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::int64_t step = 0;
    LearningRateSchedule schedule;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_parameters(const ParameterStore& params, LearningRateSchedule schedule) {
        AdamState state;
        state.schedule = schedule;
        for (const auto& v : params.values()) {
            state.first_moment.push_back(Tensor::zeros_like(v));
            state.second_moment.push_back(Tensor::zeros_like(v));
        }
        return state;
    }
};

/// One bias-corrected Adam update at the rate scheduled for `epoch`. The
/// update is rejected (parameters untouched) if any gradient is non-finite.
inline void adam_step(ParameterStore& params, const Gradients& grads, AdamState& state, int epoch,
                      std::int64_t batch_id = -1) {
    if (grads.size() != params.size() || state.first_moment.size() != params.size())
        throw std::invalid_argument("adam_step: parameter/gradient/state counts differ");
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (grads[p].shape() != params.value(p).shape())
            throw std::invalid_argument("adam_step: gradient shape " + shape_str(grads[p].shape()) +
                                        " does not match parameter '" + params.name(p) + "' " +
                                        shape_str(params.value(p).shape()));
        if (!grads[p].all_finite())
            throw NonFiniteGradient("adam_step: non-finite gradient for '" + params.name(p) + "' in batch " +
                                        std::to_string(batch_id),
                                    batch_id);
    }
    ++state.step;
    const double lr = state.schedule.rate(epoch);
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& w = params.value(p);
        Tensor& m = state.first_moment[p];
        Tensor& v = state.second_moment[p];
        const Tensor& g = grads[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

}  // namespace countlab
