#pragma once

#include "qeft/tensor.hpp"

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qeft {

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int head_dim = 16;
    int d_ff = 256;
    int n_blocks = 4;
    int vocab_size = 256;
    int max_seq = 128;
    std::uint64_t seed = 7;

    // Throws ErrorKind::invalid_config.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class LinearKind : std::uint8_t { q, k, v, o, up, gate, down, head };

constexpr int kLinearsPerBlock = 7;

struct LayerId {
    int block = 0; // -1 for the head
    LinearKind kind = LinearKind::q;

    static LayerId head() { return {-1, LinearKind::head}; }

    std::string name() const;
    friend auto operator<=>(const LayerId&, const LayerId&) = default;
};

const char* to_string(LinearKind kind);
std::optional<LayerId> parse_layer_name(const std::string& name);

// Attention Q/K/V, FFN up/gate and the head read the residual stream.
inline bool is_residual_fed(LinearKind k) {
    return k == LinearKind::q || k == LinearKind::k || k == LinearKind::v || k == LinearKind::up ||
           k == LinearKind::gate || k == LinearKind::head;
}

int in_features(const ModelConfig& c, LinearKind k);
int out_features(const ModelConfig& c, LinearKind k);
// Dense index in [0, n_blocks * 7 + 1): per-block layers in kind order, head last.
int layer_index(const ModelConfig& c, LayerId id);
// Every linear layer, per block in kind order, then the head.
std::vector<LayerId> all_linear_layers(const ModelConfig& c);
// Same as all_linear_layers without the head.
std::vector<LayerId> block_linear_layers(const ModelConfig& c);

// Embedding and normalization gains shared by the dense and quantized models.
struct Backbone {
    ModelConfig config;
    Matrix embedding; // vocab x d_model
    std::vector<std::vector<float>> norm1;
    std::vector<std::vector<float>> norm2;
    std::vector<float> final_norm;

    friend bool operator==(const Backbone&, const Backbone&) = default;
};

struct BlockLinears {
    Matrix wq, wk, wv, wo, wup, wgate, wdown;
    friend bool operator==(const BlockLinears&, const BlockLinears&) = default;
};

struct DenseModel {
    Backbone backbone;
    std::vector<BlockLinears> blocks;
    Matrix head; // vocab x d_model

    const ModelConfig& config() const { return backbone.config; }
    Matrix& linear(LayerId id);
    const Matrix& linear(LayerId id) const;

    friend bool operator==(const DenseModel&, const DenseModel&) = default;
};

DenseModel init_model(const ModelConfig& config);
DenseModel zeros_like(const DenseModel& m);
// Every trainable tensor in a fixed order.
std::vector<std::span<float>> parameter_views(DenseModel& m);

// B sequences of equal length, flattened token-major.
struct SequenceBatch {
    int batch = 0;
    int seq_len = 0;
    std::vector<int> tokens;
    std::vector<int> targets; // optional; same length as tokens when present

    int positions() const { return batch * seq_len; }
};

SequenceBatch single_sequence(std::span<const int> tokens);

struct TraceEntry {
    LayerId id;
    Matrix x; // IC x tokens
};

struct ForwardTrace {
    int tokens = 0;
    std::vector<TraceEntry> entries; // one per linear layer, execution order
};

// Strategy for the linear layers of the transformer. forward may save
// whatever backward later needs; backward returns dX and accumulates any
// weight gradients the implementation owns.
class LinearBackend {
public:
    virtual ~LinearBackend() = default;
    virtual Matrix forward(LayerId id, const Matrix& x) = 0;
    virtual Matrix backward(LayerId id, const Matrix& dy) = 0;
};

struct BlockCache {
    Matrix h_in;
    std::vector<float> rstd1;
    Matrix q, k, v; // q and k after rotary embedding
    std::vector<float> probs; // batch x heads x T x T, causal
    Matrix h_mid;
    std::vector<float> rstd2;
    Matrix up, gate;
};

struct ForwardCache {
    SequenceBatch input;
    std::vector<BlockCache> blocks;
    Matrix h_final;
    std::vector<float> rstd_final;
};

struct BackboneGrads {
    Matrix embedding;
    std::vector<std::vector<float>> norm1, norm2;
    std::vector<float> final_norm;
};

// Logits, one row per position (positions x vocab).
Matrix transformer_forward(const Backbone& bb, LinearBackend& linears, const SequenceBatch& batch,
                           ForwardCache* cache = nullptr);
// Propagates dlogits back to the embedding. Backbone grads are accumulated
// into `grads` when it is non-null.
void transformer_backward(const Backbone& bb, LinearBackend& linears, const ForwardCache& cache,
                          const Matrix& dlogits, BackboneGrads* grads);

BackboneGrads zero_backbone_grads(const Backbone& bb);

// Plain dense linear layers, optionally recording a trace and weight grads.
class DenseBackend : public LinearBackend {
public:
    explicit DenseBackend(const DenseModel& model, ForwardTrace* trace = nullptr, DenseModel* grads = nullptr);
    Matrix forward(LayerId id, const Matrix& x) override;
    Matrix backward(LayerId id, const Matrix& dy) override;

private:
    const DenseModel& model_;
    ForwardTrace* trace_;
    DenseModel* grads_;
    std::vector<Matrix> saved_;
};

struct ForwardResult {
    Matrix logits; // positions x vocab
    std::optional<ForwardTrace> trace;
};

// Causal next-token logits for one sequence.
ForwardResult forward(const DenseModel& model, std::span<const int> tokens, bool trace = false);
Matrix forward_batch(const DenseModel& model, const SequenceBatch& batch);

// Mean negative log-likelihood over positions.
double cross_entropy(const Matrix& logits, std::span<const int> targets);
// Same, also writing dL/dlogits (scaled by 1/positions) into dlogits.
double cross_entropy_grad(const Matrix& logits, std::span<const int> targets, Matrix& dlogits);

struct TrainConfig {
    int steps = 2000;
    float lr = 3e-3f;
    int batch = 4;
    int seq_len = 64;
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float eps = 1e-8f;
    float max_grad_norm = 1.0f;
    std::uint64_t seed = 7;
    int log_every = 100;
    bool cosine = true;       // cosine decay from lr to lr * min_lr_ratio
    float min_lr_ratio = 0.0f;
};

float scheduled_lr(const TrainConfig& cfg, int step);

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct TrainResult {
    DenseModel model;
    std::vector<TrainLogEntry> log;
};

// Full-parameter Adam training on random windows of `tokens`.
TrainResult train_dense(const DenseModel& model, std::span<const int> tokens, const TrainConfig& cfg);

} // namespace qeft
