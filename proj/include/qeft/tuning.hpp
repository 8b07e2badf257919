#pragma once

#include "qeft/calibration.hpp"
#include "qeft/optim.hpp"
#include "qeft/qmodel.hpp"

#include <map>
#include <span>
#include <vector>

namespace qeft {

struct CostCounters {
    long long weight_grad_fma = 0;
    long long full_weight_grad_fma = 0; // what a dense weight gradient would cost
    long long saved_elems = 0;
    long long full_saved_elems = 0;

    void merge(const CostCounters& o) {
        weight_grad_fma += o.weight_grad_fma;
        full_weight_grad_fma += o.full_weight_grad_fma;
        saved_elems += o.saved_elems;
        full_saved_elems += o.full_saved_elems;
    }
    friend bool operator==(const CostCounters&, const CostCounters&) = default;
};

// Per-layer training state: the weak-column slice of the last forward input
// and Adam moments shaped like the weak block.
struct TrainableLayerState {
    Matrix saved;    // k x T
    int tokens = -1; // T of the pending forward, -1 when none
    Matrix m, v;     // oc x k
    int step = 0;
};

TrainableLayerState make_state(const QuantizedLinear& q);

// Input channel (layer input coordinates) read by each weak-block column.
std::vector<int> weak_input_columns(const QLayer& l);

// x is T x IC (token-major); returns T x OC, identical to the inference kernel.
Matrix qlinear_forward_train(const QLayer& l, const Matrix& x, TrainableLayerState& state,
                             CostCounters* counters = nullptr);

struct QBackward {
    Matrix dx;      // T x IC
    Matrix dw_weak; // oc x k
};

// dX uses the full dequantized weight; only the weak-column weight gradient
// is formed, from the saved slice. Consumes the pending forward.
QBackward qlinear_backward(TrainableLayerState& state, const Matrix& dy, const QLayer& l,
                           CostCounters* counters = nullptr);

// Bias-corrected Adam on the weak block only. Non-finite gradients raise ErrorKind::numeric.
void adam_step(TrainableLayerState& state, QLayer& l, const Matrix& dw_weak, const AdamParams& p);

struct FinetuneConfig {
    float lr = 1e-3f;
    int steps = 200;
    int batch = 4;
    int seq_len = 64;
    int grad_accum = 4;
    float max_grad_norm = 0.3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    std::uint64_t seed = 7;
    int log_every = 10;
};

struct FinetuneLogEntry {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0; // before clipping
    CostCounters counters;  // this step only
};

struct FinetuneResult {
    QuantizedModel model; // last good model when diverged
    std::vector<FinetuneLogEntry> log;
    CostCounters counters; // all steps
    bool diverged = false;
    int steps_done = 0;
};

FinetuneResult finetune(const QuantizedModel& model, std::span<const int> tokens, const FinetuneConfig& cfg);

// Linear backend that trains weak blocks; frozen dense head, frozen codes.
class TuningBackend : public LinearBackend {
public:
    explicit TuningBackend(const QuantizedModel& model);
    Matrix forward(LayerId id, const Matrix& x) override;
    Matrix backward(LayerId id, const Matrix& dy) override;

    void zero_grads();
    std::vector<Matrix>& grads() { return grads_; }
    std::vector<TrainableLayerState>& states() { return states_; }
    const CostCounters& counters() const { return counters_; }
    void reset_counters() { counters_ = {}; }

private:
    const QuantizedModel& model_;
    std::vector<TrainableLayerState> states_;
    std::vector<Matrix> grads_;
    CostCounters counters_;
};

// Top-k input channels per linear layer (head included) by gradient-based scores.
std::map<LayerId, std::vector<int>> criterion_mask(const DenseModel& model, const std::vector<SequenceBatch>& dataset,
                                                   const HessianDiag& h, int k, SensitivityMetric variant);

// min over theta of 0.5 * ||A theta^T - Y||_F^2, starting from theta0.
struct LsqInstance {
    Matrix a;       // T x IC
    Matrix targets; // T x OC
    Matrix theta0;  // OC x IC
};

// Exact infimum with updates restricted to the masked input columns.
double masked_lsq_loss(const LsqInstance& inst, std::span<const int> mask);

struct MaskOracleResult {
    std::vector<int> best_mask;
    double best_loss = 0.0;
    std::vector<std::pair<std::vector<int>, double>> table; // every mask in lexicographic order
};

// Enumerates all C(IC, k) masks; refuses more than 10^4.
MaskOracleResult mask_oracle_bruteforce(const LsqInstance& inst, int k);

// Column scores at theta0: grad_sq = ||dL/dtheta[:, i]||^2, grad_sq_over_h divides by 2 * sum_t a_ti^2.
std::vector<double> lsq_column_scores(const LsqInstance& inst, SensitivityMetric variant);
std::vector<int> criterion_mask_lsq(const LsqInstance& inst, int k, SensitivityMetric variant);

} // namespace qeft
