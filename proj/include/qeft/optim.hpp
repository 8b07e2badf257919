#pragma once

#include <span>
#include <vector>

namespace qeft {

struct AdamParams {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Bias-corrected Adam; `step` is 1-based.
void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                 int step, const AdamParams& p);

double global_norm(const std::vector<std::span<float>>& grads);
// Scales every gradient by max_norm / norm when norm exceeds max_norm. Returns the pre-clip norm.
double clip_global_norm(const std::vector<std::span<float>>& grads, double max_norm);

} // namespace qeft
