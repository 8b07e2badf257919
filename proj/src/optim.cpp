#include "qeft/optim.hpp"

#include "qeft/error.hpp"

#include <cmath>

namespace qeft {

void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m, std::span<float> v,
                 int step, const AdamParams& p) {
    require(param.size() == grad.size() && m.size() == grad.size() && v.size() == grad.size(),
            ErrorKind::shape_mismatch, "adam_update: buffer sizes differ");
    require(step >= 1, ErrorKind::invalid_argument, "adam_update: step is 1-based");
    const double bc1 = 1.0 - std::pow(static_cast<double>(p.beta1), step);
    const double bc2 = 1.0 - std::pow(static_cast<double>(p.beta2), step);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const float g = grad[i];
        m[i] = p.beta1 * m[i] + (1.0f - p.beta1) * g;
        v[i] = p.beta2 * v[i] + (1.0f - p.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] -= static_cast<float>(p.lr * mhat / (std::sqrt(vhat) + p.eps));
    }
}

double global_norm(const std::vector<std::span<float>>& grads) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (float x : g) {
            sq += static_cast<double>(x) * x;
        }
    }
    return std::sqrt(sq);
}

double clip_global_norm(const std::vector<std::span<float>>& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (max_norm > 0.0 && norm > max_norm) {
        const auto s = static_cast<float>(max_norm / norm);
        for (const auto& g : grads) {
            for (float& x : g) {
                x *= s;
            }
        }
    }
    return norm;
}

} // namespace qeft
