#pragma once

#include "qeft/calibration.hpp"
#include "qeft/kernels.hpp"
#include "qeft/model.hpp"
#include "qeft/quantizer.hpp"
#include "qeft/reorder.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace qeft {

enum class ReorderMode : std::uint8_t { none = 0, online = 1, ogr = 2 };

const char* to_string(ReorderMode m);
std::optional<ReorderMode> parse_reorder_mode(const std::string& s);

struct QLayer {
    QuantizedLinear q;
    // Runtime input gather (online reordering only), p[new] = old.
    std::optional<Permutation> online_perm;

    friend bool operator==(const QLayer&, const QLayer&) = default;
};

// Block linears are quantized; the head stays dense. With OGR the backbone,
// head and every layer live in the reordered coordinates of `plan`.
struct QuantizedModel {
    Backbone backbone;
    std::vector<QLayer> layers; // block_linear_layers order
    Matrix head;
    ReorderPlan plan;
    ReorderMode reorder = ReorderMode::ogr;
    int k = 0;
    int k_ffn = 0;
    QuantizeOptions options;

    const ModelConfig& config() const { return backbone.config; }
    QLayer& layer(LayerId id);
    const QLayer& layer(LayerId id) const;

    friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

// The kernel a layer uses by default given its layout.
KernelPath native_path(const QLayer& l);

struct PipelineOptions {
    int k = 8;
    int k_ffn = -1; // < 0: same as k
    ReorderMode reorder = ReorderMode::ogr;
    QuantizeOptions quant{};
};

struct PipelineResult {
    QuantizedModel model;
    HessianDiag hessian;
    GlobalWeakColumns weak; // only meaningful for ReorderMode::ogr
};

// calibrate -> select -> (reorder) -> full Hessian -> quantize every block linear.
PipelineResult quantize_model(const DenseModel& dense, const std::vector<std::vector<int>>& calib,
                              const PipelineOptions& opt);

// OGR path from an existing selection; `hessian` may be reused from a previous calibration.
PipelineResult quantize_with_selection(const DenseModel& dense, const std::vector<std::vector<int>>& calib,
                                       const GlobalWeakColumns& weak, const HessianDiag& hessian,
                                       const PipelineOptions& opt);

// Reconstructs full-precision weights in the original coordinates.
DenseModel dequantize_model(const QuantizedModel& q);

// Hash of the architecture (config without seed, layer shapes).
std::uint64_t fingerprint(const ModelConfig& c);

// Inference-only linear backend over the quantized layers. Each layer runs
// its native kernel, or the reference oracle when `reference` is set.
class QuantBackend : public LinearBackend {
public:
    explicit QuantBackend(const QuantizedModel& model, bool reference = false,
                          std::map<LayerId, KernelStats>* stats = nullptr);
    Matrix forward(LayerId id, const Matrix& x) override;
    Matrix backward(LayerId id, const Matrix& dy) override;

private:
    const QuantizedModel& model_;
    bool reference_;
    std::map<LayerId, KernelStats>* stats_;
};

Matrix forward_batch(const QuantizedModel& model, const SequenceBatch& batch, bool reference = false);
double evaluate_loss(const QuantizedModel& model, std::span<const int> tokens, int seq_len = 64, int batch = 8);

struct GenerateResult {
    std::vector<int> tokens;                   // generated continuation only
    std::map<LayerId, KernelStats> stats;      // summed over one run
    double tokens_per_sec = 0.0;               // median over repeats
    std::vector<double> run_tokens_per_sec;
};

// Greedy batch-1 decoding; the context is re-run every step over the last
// max_seq tokens.
GenerateResult bench_generate(const QuantizedModel& model, std::span<const int> prompt, int n_tokens,
                              int repeats = 1, bool reference = false);

} // namespace qeft
