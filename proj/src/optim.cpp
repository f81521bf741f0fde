#include "kvpacket/optim.hpp"

#include <cmath>

#include "kvpacket/error.hpp"

namespace kvp {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.lr <= 0) throw ConfigError("AdamW: lr must be positive");
    for (const auto& p : params_) {
        if (!p.requires_grad()) throw StateError("AdamW: parameter does not require grad");
        m_.push_back(Tensor::Array::Zero(p.numel()));
        v_.push_back(Tensor::Array::Zero(p.numel()));
    }
}

void AdamW::step() {
    ++t_;
    float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
    float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        const auto& g = params_[i].grad();
        auto& m = m_[i];
        auto& v = v_[i];
        m = cfg_.beta1 * m + (1.0f - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0f - cfg_.beta2) * g.square();
        auto& x = params_[i].mutable_value();
        x -= cfg_.lr * cfg_.weight_decay * x;
        x -= cfg_.lr * (m / bc1) / ((v / bc2).sqrt() + cfg_.eps);
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

float lr_schedule(float peak, int64_t step, int64_t total_steps, int64_t warmup_steps) {
    if (total_steps < 1) throw ConfigError("lr_schedule: total_steps must be >= 1");
    if (warmup_steps > 0 && step < warmup_steps)
        return peak * static_cast<float>(step + 1) / static_cast<float>(warmup_steps);
    float left = static_cast<float>(total_steps - step) / static_cast<float>(total_steps - warmup_steps);
    return peak * std::max(0.0f, left);
}

} // namespace kvp
