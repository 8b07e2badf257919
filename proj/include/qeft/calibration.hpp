#pragma once

#include "qeft/model.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qeft {

// Running sums of 2 * sum_t X[j,t]^2 per layer; lambda() divides by the
// number of accumulated sequences.
struct HessianDiag {
    std::map<LayerId, std::vector<double>> sums;
    int sample_count = 0;

    std::vector<double> lambda(LayerId id) const;
    bool has(LayerId id) const { return sums.count(id) != 0; }
};

// Full H = 2 X X^T, accumulated the same way. Used by OPTQ.
struct FullHessian {
    int n = 0;
    std::vector<double> sum; // n x n
    int sample_count = 0;

    std::vector<double> mean() const;
};

HessianDiag accumulate_hessian_diag(const ForwardTrace& trace, std::optional<HessianDiag> running = std::nullopt);
void accumulate_hessian_full(std::map<LayerId, FullHessian>& acc, const ForwardTrace& trace);

// Runs the dense model over every sequence with tracing enabled.
HessianDiag calibrate_diag(const DenseModel& model, const std::vector<std::vector<int>>& seqs);
std::map<LayerId, FullHessian> calibrate_full(const DenseModel& model, const std::vector<std::vector<int>>& seqs);

// s_j = lambda_j * ||dW[:, j]||^2
std::vector<double> column_sensitivity(std::span<const double> lambda, const Matrix& delta_w);

// Indices of the k largest scores, lowest index first among ties, returned ascending.
std::vector<int> select_local_topk(std::span<const double> scores, int k);

struct GlobalWeakColumns {
    int k = 0;
    std::vector<int> resid_indices;
    std::vector<std::vector<int>> ffn_indices; // per block, d_ff space
    std::vector<std::vector<int>> wo_indices;  // per block, attention-output space
    std::vector<double> s_global;

    friend bool operator==(const GlobalWeakColumns&, const GlobalWeakColumns&) = default;
};

struct GlobalSelection {
    std::vector<int> indices;
    std::vector<double> scores;
};

// Mean-normalized lambda of every layer's local top-k is summed into one
// score vector; the global pick is its top-k. Layers must share a length.
GlobalSelection select_global_indices(const std::vector<std::vector<double>>& lambdas, int k);

// Residual group: Q/K/V, up/gate of every block and the head. k_ffn < 0
// uses k for the FFN intermediate axis as well.
GlobalWeakColumns select_global(const HessianDiag& h, const ModelConfig& config, int k, int k_ffn = -1);

enum class SensitivityMetric { lambda_dw, lambda_only, grad_sq, grad_sq_over_h };

const char* to_string(SensitivityMetric m);

struct SensitivityReport {
    SensitivityMetric metric = SensitivityMetric::lambda_only;
    std::map<LayerId, std::vector<double>> scores;
    // Layers where a zero curvature met a nonzero gradient (score +inf).
    std::vector<LayerId> flagged;
};

// Squared column norms of dL/dW at the model's weights, summed over the
// dataset; with grad_sq_over_h divided by the layer's lambda.
SensitivityReport gradient_column_metric(const DenseModel& model, const std::vector<SequenceBatch>& dataset,
                                         const HessianDiag& h, SensitivityMetric variant);

SensitivityReport lambda_report(const HessianDiag& h);

struct CalibrationReport {
    HessianDiag hessian;
    GlobalWeakColumns weak;
};

// One JSON record per layer followed by one record for the global selection.
void write_calibration_report(const std::string& path, const CalibrationReport& report);
CalibrationReport read_calibration_report(const std::string& path);

} // namespace qeft
