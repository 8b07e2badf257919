#include "qeft/model.hpp"

#include "qeft/data.hpp"
#include "qeft/error.hpp"
#include "qeft/optim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qeft {

namespace {

constexpr float kNormEps = 1e-5f;
constexpr double kRopeBase = 10000.0;

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// y = x * rstd * gain, row by row.
Matrix rmsnorm_forward(const Matrix& x, std::span<const float> gain, std::vector<float>& rstd) {
    Matrix y(x.rows, x.cols);
    rstd.assign(x.rows, 0.0f);
    for (int t = 0; t < x.rows; ++t) {
        double ss = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            ss += static_cast<double>(x(t, j)) * x(t, j);
        }
        const float r = static_cast<float>(1.0 / std::sqrt(ss / x.cols + kNormEps));
        rstd[t] = r;
        for (int j = 0; j < x.cols; ++j) {
            y(t, j) = x(t, j) * r * gain[j];
        }
    }
    return y;
}

Matrix rmsnorm_backward(const Matrix& x, std::span<const float> gain, const std::vector<float>& rstd,
                        const Matrix& dy, std::vector<float>* dgain) {
    Matrix dx(x.rows, x.cols);
    const int d = x.cols;
    for (int t = 0; t < x.rows; ++t) {
        const float r = rstd[t];
        double dot = 0.0;
        for (int j = 0; j < d; ++j) {
            dot += static_cast<double>(dy(t, j)) * gain[j] * x(t, j);
        }
        const float coef = static_cast<float>(dot / d) * r * r * r;
        for (int j = 0; j < d; ++j) {
            dx(t, j) = gain[j] * dy(t, j) * r - x(t, j) * coef;
        }
        if (dgain != nullptr) {
            for (int j = 0; j < d; ++j) {
                (*dgain)[j] += dy(t, j) * x(t, j) * r;
            }
        }
    }
    return dx;
}

struct RopeTable {
    int half = 0;
    std::vector<float> cos, sin; // pos x half

    RopeTable(int seq_len, int head_dim) : half(head_dim / 2) {
        cos.resize(static_cast<std::size_t>(seq_len) * half);
        sin.resize(cos.size());
        for (int p = 0; p < seq_len; ++p) {
            for (int i = 0; i < half; ++i) {
                const double theta = p * std::pow(kRopeBase, -2.0 * i / head_dim);
                cos[static_cast<std::size_t>(p) * half + i] = static_cast<float>(std::cos(theta));
                sin[static_cast<std::size_t>(p) * half + i] = static_cast<float>(std::sin(theta));
            }
        }
    }
};

// Rotates adjacent channel pairs inside every head; direction -1 applies the inverse.
void apply_rope(Matrix& m, const RopeTable& rope, int seq_len, int n_heads, int head_dim, float direction) {
    for (int r = 0; r < m.rows; ++r) {
        const int pos = r % seq_len;
        for (int h = 0; h < n_heads; ++h) {
            float* base = m.ptr(r, h * head_dim);
            for (int i = 0; i < rope.half; ++i) {
                const float c = rope.cos[static_cast<std::size_t>(pos) * rope.half + i];
                const float s = direction * rope.sin[static_cast<std::size_t>(pos) * rope.half + i];
                const float a = base[2 * i];
                const float b = base[2 * i + 1];
                base[2 * i] = a * c - b * s;
                base[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

Matrix attention_forward(const ModelConfig& c, int batch, int seq_len, const Matrix& q, const Matrix& k,
                         const Matrix& v, std::vector<float>& probs) {
    const int H = c.n_heads;
    const int hd = c.head_dim;
    const int T = seq_len;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    Matrix out(q.rows, q.cols);
    probs.assign(static_cast<std::size_t>(batch) * H * T * T, 0.0f);
#pragma omp parallel for collapse(2) schedule(static) if (batch * H > 1 && T >= 32)
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < H; ++h) {
            std::vector<float> s(T);
            for (int t = 0; t < T; ++t) {
                const float* qt = q.ptr(b * T + t, h * hd);
                float mx = -INFINITY;
                for (int u = 0; u <= t; ++u) {
                    const float* ku = k.ptr(b * T + u, h * hd);
                    float dot = 0.0f;
                    for (int i = 0; i < hd; ++i) {
                        dot += qt[i] * ku[i];
                    }
                    s[u] = dot * scale;
                    mx = std::max(mx, s[u]);
                }
                double sum = 0.0;
                for (int u = 0; u <= t; ++u) {
                    s[u] = std::exp(s[u] - mx);
                    sum += s[u];
                }
                float* p = &probs[((static_cast<std::size_t>(b) * H + h) * T + t) * T];
                float* ot = out.ptr(b * T + t, h * hd);
                for (int u = 0; u <= t; ++u) {
                    p[u] = static_cast<float>(s[u] / sum);
                    const float* vu = v.ptr(b * T + u, h * hd);
                    for (int i = 0; i < hd; ++i) {
                        ot[i] += p[u] * vu[i];
                    }
                }
            }
        }
    }
    return out;
}

void attention_backward(const ModelConfig& c, int batch, int seq_len, const Matrix& q, const Matrix& k,
                        const Matrix& v, const std::vector<float>& probs, const Matrix& dout, Matrix& dq,
                        Matrix& dk, Matrix& dv) {
    const int H = c.n_heads;
    const int hd = c.head_dim;
    const int T = seq_len;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    dq = Matrix(q.rows, q.cols);
    dk = Matrix(k.rows, k.cols);
    dv = Matrix(v.rows, v.cols);
#pragma omp parallel for collapse(2) schedule(static) if (batch * H > 1 && T >= 32)
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < H; ++h) {
            std::vector<float> dp(T);
            for (int t = 0; t < T; ++t) {
                const float* p = &probs[((static_cast<std::size_t>(b) * H + h) * T + t) * T];
                const float* dot_ = dout.ptr(b * T + t, h * hd);
                double pdp = 0.0;
                for (int u = 0; u <= t; ++u) {
                    const float* vu = v.ptr(b * T + u, h * hd);
                    float acc = 0.0f;
                    for (int i = 0; i < hd; ++i) {
                        acc += dot_[i] * vu[i];
                    }
                    dp[u] = acc;
                    pdp += static_cast<double>(p[u]) * acc;
                    float* dvu = dv.ptr(b * T + u, h * hd);
                    for (int i = 0; i < hd; ++i) {
                        dvu[i] += p[u] * dot_[i];
                    }
                }
                const float* qt = q.ptr(b * T + t, h * hd);
                float* dqt = dq.ptr(b * T + t, h * hd);
                for (int u = 0; u <= t; ++u) {
                    const float ds = p[u] * (dp[u] - static_cast<float>(pdp)) * scale;
                    const float* ku = k.ptr(b * T + u, h * hd);
                    float* dku = dk.ptr(b * T + u, h * hd);
                    for (int i = 0; i < hd; ++i) {
                        dqt[i] += ds * ku[i];
                        dku[i] += ds * qt[i];
                    }
                }
            }
        }
    }
}

const LinearKind kBlockKinds[kLinearsPerBlock] = {LinearKind::q,  LinearKind::k,    LinearKind::v,   LinearKind::o,
                                                  LinearKind::up, LinearKind::gate, LinearKind::down};

} // namespace

void ModelConfig::validate() const {
    require(d_model >= 1 && n_heads >= 1 && head_dim >= 1 && d_ff >= 1 && n_blocks >= 1 && vocab_size >= 1 &&
                max_seq >= 1,
            ErrorKind::invalid_config, "model config: all dimensions must be >= 1");
    require(d_model == n_heads * head_dim, ErrorKind::invalid_config,
            "model config: d_model must equal n_heads * head_dim");
    require(head_dim % 2 == 0, ErrorKind::invalid_config, "model config: head_dim must be even for rotary embedding");
    require(d_ff >= d_model, ErrorKind::invalid_config, "model config: d_ff must be >= d_model");
}

const char* to_string(LinearKind kind) {
    switch (kind) {
    case LinearKind::q: return "wq";
    case LinearKind::k: return "wk";
    case LinearKind::v: return "wv";
    case LinearKind::o: return "wo";
    case LinearKind::up: return "wup";
    case LinearKind::gate: return "wgate";
    case LinearKind::down: return "wdown";
    case LinearKind::head: return "head";
    }
    return "?";
}

std::string LayerId::name() const {
    if (kind == LinearKind::head) {
        return "head";
    }
    return "blocks." + std::to_string(block) + "." + to_string(kind);
}

std::optional<LayerId> parse_layer_name(const std::string& name) {
    if (name == "head") {
        return LayerId::head();
    }
    if (name.rfind("blocks.", 0) != 0) {
        return std::nullopt;
    }
    const auto dot = name.find('.', 7);
    if (dot == std::string::npos) {
        return std::nullopt;
    }
    int block = 0;
    try {
        block = std::stoi(name.substr(7, dot - 7));
    } catch (...) {
        return std::nullopt;
    }
    const std::string kind = name.substr(dot + 1);
    for (LinearKind k : kBlockKinds) {
        if (kind == to_string(k)) {
            return LayerId{block, k};
        }
    }
    return std::nullopt;
}

int in_features(const ModelConfig& c, LinearKind k) { return k == LinearKind::down ? c.d_ff : c.d_model; }

int out_features(const ModelConfig& c, LinearKind k) {
    switch (k) {
    case LinearKind::up:
    case LinearKind::gate: return c.d_ff;
    case LinearKind::head: return c.vocab_size;
    default: return c.d_model;
    }
}

int layer_index(const ModelConfig& c, LayerId id) {
    if (id.kind == LinearKind::head) {
        return c.n_blocks * kLinearsPerBlock;
    }
    require(id.block >= 0 && id.block < c.n_blocks, ErrorKind::out_of_range, "layer block out of range");
    return id.block * kLinearsPerBlock + static_cast<int>(id.kind);
}

std::vector<LayerId> block_linear_layers(const ModelConfig& c) {
    std::vector<LayerId> ids;
    for (int b = 0; b < c.n_blocks; ++b) {
        for (LinearKind k : kBlockKinds) {
            ids.push_back({b, k});
        }
    }
    return ids;
}

std::vector<LayerId> all_linear_layers(const ModelConfig& c) {
    auto ids = block_linear_layers(c);
    ids.push_back(LayerId::head());
    return ids;
}

Matrix& DenseModel::linear(LayerId id) {
    return const_cast<Matrix&>(static_cast<const DenseModel&>(*this).linear(id));
}

const Matrix& DenseModel::linear(LayerId id) const {
    if (id.kind == LinearKind::head) {
        return head;
    }
    require(id.block >= 0 && id.block < static_cast<int>(blocks.size()), ErrorKind::out_of_range,
            "layer block out of range");
    const BlockLinears& b = blocks[id.block];
    switch (id.kind) {
    case LinearKind::q: return b.wq;
    case LinearKind::k: return b.wk;
    case LinearKind::v: return b.wv;
    case LinearKind::o: return b.wo;
    case LinearKind::up: return b.wup;
    case LinearKind::gate: return b.wgate;
    case LinearKind::down: return b.wdown;
    case LinearKind::head: break;
    }
    return head;
}

DenseModel init_model(const ModelConfig& config) {
    config.validate();
    Rng rng(config.seed);
    DenseModel m;
    m.backbone.config = config;
    m.backbone.embedding = Matrix(config.vocab_size, config.d_model);
    fill_normal(m.backbone.embedding, rng, 0.02f);
    const float std_in = 0.02f;
    const float std_resid = 0.02f / std::sqrt(2.0f * config.n_blocks);
    for (int b = 0; b < config.n_blocks; ++b) {
        BlockLinears bl;
        for (LinearKind k : kBlockKinds) {
            Matrix w(out_features(config, k), in_features(config, k));
            fill_normal(w, rng, (k == LinearKind::o || k == LinearKind::down) ? std_resid : std_in);
            switch (k) {
            case LinearKind::q: bl.wq = std::move(w); break;
            case LinearKind::k: bl.wk = std::move(w); break;
            case LinearKind::v: bl.wv = std::move(w); break;
            case LinearKind::o: bl.wo = std::move(w); break;
            case LinearKind::up: bl.wup = std::move(w); break;
            case LinearKind::gate: bl.wgate = std::move(w); break;
            case LinearKind::down: bl.wdown = std::move(w); break;
            case LinearKind::head: break;
            }
        }
        m.blocks.push_back(std::move(bl));
        m.backbone.norm1.emplace_back(config.d_model, 1.0f);
        m.backbone.norm2.emplace_back(config.d_model, 1.0f);
    }
    m.backbone.final_norm.assign(config.d_model, 1.0f);
    m.head = Matrix(config.vocab_size, config.d_model);
    fill_normal(m.head, rng, std_in);
    return m;
}

DenseModel zeros_like(const DenseModel& m) {
    DenseModel z = m;
    for (auto span : parameter_views(z)) {
        std::fill(span.begin(), span.end(), 0.0f);
    }
    return z;
}

std::vector<std::span<float>> parameter_views(DenseModel& m) {
    std::vector<std::span<float>> views;
    views.emplace_back(m.backbone.embedding.data);
    for (int b = 0; b < static_cast<int>(m.blocks.size()); ++b) {
        views.emplace_back(m.backbone.norm1[b]);
        views.emplace_back(m.backbone.norm2[b]);
        for (LinearKind k : kBlockKinds) {
            views.emplace_back(m.linear({b, k}).data);
        }
    }
    views.emplace_back(m.backbone.final_norm);
    views.emplace_back(m.head.data);
    return views;
}

SequenceBatch single_sequence(std::span<const int> tokens) {
    SequenceBatch b;
    b.batch = tokens.empty() ? 0 : 1;
    b.seq_len = static_cast<int>(tokens.size());
    b.tokens.assign(tokens.begin(), tokens.end());
    return b;
}

BackboneGrads zero_backbone_grads(const Backbone& bb) {
    BackboneGrads g;
    g.embedding = Matrix(bb.embedding.rows, bb.embedding.cols);
    for (std::size_t b = 0; b < bb.norm1.size(); ++b) {
        g.norm1.emplace_back(bb.norm1[b].size(), 0.0f);
        g.norm2.emplace_back(bb.norm2[b].size(), 0.0f);
    }
    g.final_norm.assign(bb.final_norm.size(), 0.0f);
    return g;
}

Matrix transformer_forward(const Backbone& bb, LinearBackend& linears, const SequenceBatch& batch,
                           ForwardCache* cache) {
    const ModelConfig& c = bb.config;
    const int n = batch.positions();
    require(static_cast<int>(batch.tokens.size()) == n, ErrorKind::shape_mismatch,
            "forward: token count does not match batch shape");
    require(batch.seq_len <= c.max_seq, ErrorKind::out_of_range,
            "forward: sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq " +
                std::to_string(c.max_seq));
    for (int tok : batch.tokens) {
        require(tok >= 0 && tok < c.vocab_size, ErrorKind::out_of_range,
                "forward: token id " + std::to_string(tok) + " outside vocabulary");
    }
    if (cache != nullptr) {
        cache->input = batch;
        cache->blocks.assign(c.n_blocks, {});
    }
    if (n == 0) {
        return Matrix(0, c.vocab_size);
    }

    Matrix h(n, c.d_model);
    for (int t = 0; t < n; ++t) {
        const auto src = bb.embedding.row(batch.tokens[t]);
        std::copy(src.begin(), src.end(), h.row(t).begin());
    }
    const RopeTable rope(batch.seq_len, c.head_dim);

    for (int b = 0; b < c.n_blocks; ++b) {
        std::vector<float> rstd1;
        const Matrix a = rmsnorm_forward(h, bb.norm1[b], rstd1);
        Matrix q = linears.forward({b, LinearKind::q}, a);
        Matrix k = linears.forward({b, LinearKind::k}, a);
        Matrix v = linears.forward({b, LinearKind::v}, a);
        apply_rope(q, rope, batch.seq_len, c.n_heads, c.head_dim, 1.0f);
        apply_rope(k, rope, batch.seq_len, c.n_heads, c.head_dim, 1.0f);
        std::vector<float> probs;
        const Matrix attn = attention_forward(c, batch.batch, batch.seq_len, q, k, v, probs);
        const Matrix o = linears.forward({b, LinearKind::o}, attn);
        Matrix h_mid = h;
        add_inplace(h_mid, o);

        std::vector<float> rstd2;
        const Matrix bn = rmsnorm_forward(h_mid, bb.norm2[b], rstd2);
        Matrix up = linears.forward({b, LinearKind::up}, bn);
        Matrix gate = linears.forward({b, LinearKind::gate}, bn);
        Matrix act(n, c.d_ff);
        for (std::size_t i = 0; i < act.data.size(); ++i) {
            const float g = gate.data[i];
            act.data[i] = g * sigmoid(g) * up.data[i];
        }
        const Matrix down = linears.forward({b, LinearKind::down}, act);
        Matrix h_out = h_mid;
        add_inplace(h_out, down);

        if (cache != nullptr) {
            BlockCache& bc = cache->blocks[b];
            bc.h_in = std::move(h);
            bc.rstd1 = std::move(rstd1);
            bc.q = std::move(q);
            bc.k = std::move(k);
            bc.v = std::move(v);
            bc.probs = std::move(probs);
            bc.h_mid = std::move(h_mid);
            bc.rstd2 = std::move(rstd2);
            bc.up = std::move(up);
            bc.gate = std::move(gate);
        }
        h = std::move(h_out);
    }

    std::vector<float> rstd_f;
    const Matrix f = rmsnorm_forward(h, bb.final_norm, rstd_f);
    Matrix logits = linears.forward(LayerId::head(), f);
    if (cache != nullptr) {
        cache->h_final = std::move(h);
        cache->rstd_final = std::move(rstd_f);
    }
    return logits;
}

void transformer_backward(const Backbone& bb, LinearBackend& linears, const ForwardCache& cache,
                          const Matrix& dlogits, BackboneGrads* grads) {
    const ModelConfig& c = bb.config;
    const SequenceBatch& batch = cache.input;
    const int n = batch.positions();
    if (n == 0) {
        return;
    }
    require(dlogits.rows == n && dlogits.cols == c.vocab_size, ErrorKind::shape_mismatch,
            "backward: dlogits shape mismatch");
    const RopeTable rope(batch.seq_len, c.head_dim);

    const Matrix df = linears.backward(LayerId::head(), dlogits);
    Matrix dh = rmsnorm_backward(cache.h_final, bb.final_norm, cache.rstd_final, df,
                                 grads != nullptr ? &grads->final_norm : nullptr);

    for (int b = c.n_blocks - 1; b >= 0; --b) {
        const BlockCache& bc = cache.blocks[b];
        // FFN
        const Matrix dact = linears.backward({b, LinearKind::down}, dh);
        Matrix dup(n, c.d_ff);
        Matrix dgate(n, c.d_ff);
        for (std::size_t i = 0; i < dact.data.size(); ++i) {
            const float g = bc.gate.data[i];
            const float s = sigmoid(g);
            dup.data[i] = dact.data[i] * g * s;
            dgate.data[i] = dact.data[i] * bc.up.data[i] * s * (1.0f + g * (1.0f - s));
        }
        Matrix dbn = linears.backward({b, LinearKind::up}, dup);
        add_inplace(dbn, linears.backward({b, LinearKind::gate}, dgate));
        add_inplace(dh, rmsnorm_backward(bc.h_mid, bb.norm2[b], bc.rstd2, dbn,
                                         grads != nullptr ? &grads->norm2[b] : nullptr));

        // Attention
        const Matrix dattn = linears.backward({b, LinearKind::o}, dh);
        Matrix dq, dk, dv;
        attention_backward(c, batch.batch, batch.seq_len, bc.q, bc.k, bc.v, bc.probs, dattn, dq, dk, dv);
        apply_rope(dq, rope, batch.seq_len, c.n_heads, c.head_dim, -1.0f);
        apply_rope(dk, rope, batch.seq_len, c.n_heads, c.head_dim, -1.0f);
        Matrix da = linears.backward({b, LinearKind::q}, dq);
        add_inplace(da, linears.backward({b, LinearKind::k}, dk));
        add_inplace(da, linears.backward({b, LinearKind::v}, dv));
        add_inplace(dh, rmsnorm_backward(bc.h_in, bb.norm1[b], bc.rstd1, da,
                                         grads != nullptr ? &grads->norm1[b] : nullptr));
    }

    if (grads != nullptr) {
        for (int t = 0; t < n; ++t) {
            auto dst = grads->embedding.row(batch.tokens[t]);
            const auto src = dh.row(t);
            for (int j = 0; j < c.d_model; ++j) {
                dst[j] += src[j];
            }
        }
    }
}

DenseBackend::DenseBackend(const DenseModel& model, ForwardTrace* trace, DenseModel* grads)
    : model_(model), trace_(trace), grads_(grads) {
    if (grads_ != nullptr) {
        saved_.resize(static_cast<std::size_t>(model.config().n_blocks) * kLinearsPerBlock + 1);
    }
}

Matrix DenseBackend::forward(LayerId id, const Matrix& x) {
    if (trace_ != nullptr) {
        trace_->tokens = x.rows;
        trace_->entries.push_back({id, transpose(x)});
    }
    if (grads_ != nullptr) {
        saved_[layer_index(model_.config(), id)] = x;
    }
    return matmul_nt(x, model_.linear(id));
}

Matrix DenseBackend::backward(LayerId id, const Matrix& dy) {
    const Matrix& w = model_.linear(id);
    if (grads_ != nullptr) {
        matmul_tn_accumulate(grads_->linear(id), dy, saved_[layer_index(model_.config(), id)]);
    }
    return matmul_nn(dy, w);
}

ForwardResult forward(const DenseModel& model, std::span<const int> tokens, bool trace) {
    ForwardResult result;
    ForwardTrace tr;
    DenseBackend backend(model, trace ? &tr : nullptr);
    result.logits = transformer_forward(model.backbone, backend, single_sequence(tokens));
    if (trace) {
        result.trace = std::move(tr);
    }
    return result;
}

Matrix forward_batch(const DenseModel& model, const SequenceBatch& batch) {
    DenseBackend backend(model);
    return transformer_forward(model.backbone, backend, batch);
}

double cross_entropy(const Matrix& logits, std::span<const int> targets) {
    require(static_cast<int>(targets.size()) == logits.rows, ErrorKind::shape_mismatch,
            "cross_entropy: one target per position required");
    if (logits.rows == 0) {
        return 0.0;
    }
    double total = 0.0;
    for (int t = 0; t < logits.rows; ++t) {
        const auto row = logits.row(t);
        const int y = targets[t];
        require(y >= 0 && y < logits.cols, ErrorKind::out_of_range, "cross_entropy: target outside vocabulary");
        const float mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (float v : row) {
            sum += std::exp(static_cast<double>(v) - mx);
        }
        total += std::log(sum) + mx - row[y];
    }
    return total / logits.rows;
}

double cross_entropy_grad(const Matrix& logits, std::span<const int> targets, Matrix& dlogits) {
    require(static_cast<int>(targets.size()) == logits.rows, ErrorKind::shape_mismatch,
            "cross_entropy: one target per position required");
    dlogits = Matrix(logits.rows, logits.cols);
    if (logits.rows == 0) {
        return 0.0;
    }
    const double inv_n = 1.0 / logits.rows;
    double total = 0.0;
    for (int t = 0; t < logits.rows; ++t) {
        const auto row = logits.row(t);
        const int y = targets[t];
        require(y >= 0 && y < logits.cols, ErrorKind::out_of_range, "cross_entropy: target outside vocabulary");
        const float mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (float v : row) {
            sum += std::exp(static_cast<double>(v) - mx);
        }
        total += std::log(sum) + mx - row[y];
        auto drow = dlogits.row(t);
        for (int j = 0; j < logits.cols; ++j) {
            drow[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / sum * inv_n);
        }
        drow[y] -= static_cast<float>(inv_n);
    }
    return total * inv_n;
}

float scheduled_lr(const TrainConfig& cfg, int step) {
    if (!cfg.cosine || cfg.steps <= 1) {
        return cfg.lr;
    }
    const double pi = 3.14159265358979323846;
    const double frac = static_cast<double>(step - 1) / (cfg.steps - 1);
    const double f = cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * 0.5 * (1.0 + std::cos(pi * frac));
    return static_cast<float>(cfg.lr * f);
}

TrainResult train_dense(const DenseModel& model, std::span<const int> tokens, const TrainConfig& cfg) {
    require(cfg.steps >= 0 && cfg.batch >= 1 && cfg.seq_len >= 1, ErrorKind::invalid_argument,
            "train_dense: invalid hyperparameters");
    TrainResult result{model, {}};
    if (cfg.steps == 0) {
        return result;
    }
    DenseModel& m = result.model;
    DenseModel grads = zeros_like(m);
    DenseModel mom1 = zeros_like(m);
    DenseModel mom2 = zeros_like(m);
    auto pv = parameter_views(m);
    auto gv = parameter_views(grads);
    auto m1v = parameter_views(mom1);
    auto m2v = parameter_views(mom2);
    AdamParams adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
    Rng rng(cfg.seed);

    for (int step = 1; step <= cfg.steps; ++step) {
        adam.lr = scheduled_lr(cfg, step);
        for (auto g : gv) {
            std::fill(g.begin(), g.end(), 0.0f);
        }
        const SequenceBatch batch = sample_batch(tokens, cfg.batch, cfg.seq_len, rng);
        ForwardCache cache;
        DenseBackend backend(m, nullptr, &grads);
        const Matrix logits = transformer_forward(m.backbone, backend, batch, &cache);
        Matrix dlogits;
        const double loss = cross_entropy_grad(logits, batch.targets, dlogits);
        if (!std::isfinite(loss)) {
            std::ostringstream os;
            os << "train_dense: non-finite loss at step " << step;
            fail(ErrorKind::numeric, os.str());
        }
        BackboneGrads bg = zero_backbone_grads(m.backbone);
        transformer_backward(m.backbone, backend, cache, dlogits, &bg);
        grads.backbone.embedding = std::move(bg.embedding);
        grads.backbone.norm1 = std::move(bg.norm1);
        grads.backbone.norm2 = std::move(bg.norm2);
        grads.backbone.final_norm = std::move(bg.final_norm);
        gv = parameter_views(grads);
        const double gnorm = clip_global_norm(gv, cfg.max_grad_norm);
        for (std::size_t i = 0; i < pv.size(); ++i) {
            adam_update(pv[i], gv[i], m1v[i], m2v[i], step, adam);
        }
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1 || step == cfg.steps)) {
            result.log.push_back({step, loss, gnorm});
        }
    }
    return result;
}

} // namespace qeft
