#pragma once

#include <vector>

#include "kvpacket/tensor.hpp"

namespace kvp {

struct AdamWConfig {
    float lr = 5e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

// Decoupled weight decay; moment buffers per parameter, bias-corrected.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg);

    void step();
    void zero_grad();

    void set_lr(float lr) { cfg_.lr = lr; }
    float lr() const { return cfg_.lr; }
    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<Tensor::Array> m_, v_;
    AdamWConfig cfg_;
    int64_t t_ = 0;
};

// Linear decay from peak to zero over total steps, with optional warmup.
float lr_schedule(float peak, int64_t step, int64_t total_steps, int64_t warmup_steps = 0);

} // namespace kvp
