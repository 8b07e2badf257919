#include "qeft/qmodel.hpp"

#include "qeft/data.hpp"
#include "qeft/error.hpp"

#include <algorithm>
#include <chrono>

namespace qeft {

namespace {

std::vector<double> permute_hessian(std::span<const double> h, const Permutation& p) {
    const int n = p.size();
    std::vector<double> out(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
        const std::size_t src = static_cast<std::size_t>(p.old_of(i)) * n;
        for (int j = 0; j < n; ++j) {
            out[static_cast<std::size_t>(i) * n + j] = h[src + p.old_of(j)];
        }
    }
    return out;
}

std::vector<int> trailing(int n, int k) {
    std::vector<int> v(k);
    for (int i = 0; i < k; ++i) {
        v[i] = n - k + i;
    }
    return v;
}

int resolved_k_ffn(const PipelineOptions& opt) { return opt.k_ffn < 0 ? opt.k : opt.k_ffn; }

QuantizedModel empty_model(const DenseModel& src, const PipelineOptions& opt) {
    QuantizedModel q;
    q.backbone = src.backbone;
    q.head = src.head;
    q.reorder = opt.reorder;
    q.k = opt.k;
    q.k_ffn = resolved_k_ffn(opt);
    q.options = opt.quant;
    q.options.layout = Layout::structured; // per-layer layouts live on the layers
    return q;
}

void check_k(const ModelConfig& c, const PipelineOptions& opt) {
    require(opt.k >= 0 && opt.k <= c.d_model, ErrorKind::out_of_range,
            "k = " + std::to_string(opt.k) + " outside [0, d_model]");
    const int kf = resolved_k_ffn(opt);
    require(kf >= 0 && kf <= c.d_ff, ErrorKind::out_of_range, "k_ffn = " + std::to_string(kf) + " outside [0, d_ff]");
}

} // namespace

const char* to_string(ReorderMode m) {
    switch (m) {
    case ReorderMode::none: return "none";
    case ReorderMode::online: return "online";
    case ReorderMode::ogr: return "ogr";
    }
    return "?";
}

std::optional<ReorderMode> parse_reorder_mode(const std::string& s) {
    if (s == "none") return ReorderMode::none;
    if (s == "online") return ReorderMode::online;
    if (s == "ogr") return ReorderMode::ogr;
    return std::nullopt;
}

QLayer& QuantizedModel::layer(LayerId id) {
    return const_cast<QLayer&>(static_cast<const QuantizedModel&>(*this).layer(id));
}

const QLayer& QuantizedModel::layer(LayerId id) const {
    require(id.kind != LinearKind::head && id.block >= 0 && id.block < config().n_blocks, ErrorKind::out_of_range,
            "quantized model has no layer " + id.name());
    const auto i = static_cast<std::size_t>(layer_index(config(), id));
    require(i < layers.size(), ErrorKind::out_of_range, "quantized model has no layer " + id.name());
    return layers[i];
}

KernelPath native_path(const QLayer& l) {
    if (l.q.layout == Layout::irregular) {
        return KernelPath::irregular;
    }
    return l.online_perm ? KernelPath::online_reorder : KernelPath::structured;
}

PipelineResult quantize_model(const DenseModel& dense, const std::vector<std::vector<int>>& calib,
                              const PipelineOptions& opt) {
    const ModelConfig& c = dense.config();
    check_k(c, opt);
    HessianDiag h = calibrate_diag(dense, calib);
    if (opt.reorder == ReorderMode::ogr) {
        GlobalWeakColumns weak = select_global(h, c, opt.k, resolved_k_ffn(opt));
        return quantize_with_selection(dense, calib, weak, h, opt);
    }

    PipelineResult res{empty_model(dense, opt), std::move(h), {}};
    res.model.plan = identity_plan(c);
    std::map<LayerId, FullHessian> full;
    if (opt.quant.mode == QuantMode::optq) {
        full = calibrate_full(dense, calib);
    }
    for (const LayerId id : block_linear_layers(c)) {
        const Matrix& w = dense.linear(id);
        const int kk = id.kind == LinearKind::down ? resolved_k_ffn(opt) : opt.k;
        const std::vector<int> idx = select_local_topk(res.hessian.lambda(id), std::min(kk, w.cols));
        const std::vector<double> hm = full.count(id) ? full.at(id).mean() : std::vector<double>{};
        QLayer layer;
        QuantizeOptions qo = opt.quant;
        if (opt.reorder == ReorderMode::none) {
            qo.layout = Layout::irregular;
            layer.q = quantize_layer(w, idx, hm, qo);
        } else {
            Permutation p = weak_to_tail(w.cols, idx);
            const std::vector<double> hp = hm.empty() ? hm : permute_hessian(hm, p);
            qo.layout = Layout::structured;
            layer.q = quantize_layer(permute_columns(w, p), trailing(w.cols, static_cast<int>(idx.size())), hp, qo);
            layer.online_perm = std::move(p);
        }
        res.model.layers.push_back(std::move(layer));
    }
    return res;
}

PipelineResult quantize_with_selection(const DenseModel& dense, const std::vector<std::vector<int>>& calib,
                                       const GlobalWeakColumns& weak, const HessianDiag& hessian,
                                       const PipelineOptions& opt) {
    const ModelConfig& c = dense.config();
    check_k(c, opt);
    require(static_cast<int>(weak.resid_indices.size()) == opt.k, ErrorKind::checkpoint_mismatch,
            "weak column selection has " + std::to_string(weak.resid_indices.size()) + " indices, expected k = " +
                std::to_string(opt.k));
    PipelineOptions o = opt;
    o.reorder = ReorderMode::ogr;
    PipelineResult res{empty_model(dense, o), hessian, weak};
    res.model.plan = build_plan(weak, c);
    const DenseModel reordered = apply_ogr(dense, res.model.plan);
    res.model.backbone = reordered.backbone;
    res.model.head = reordered.head;
    std::map<LayerId, FullHessian> full;
    if (opt.quant.mode == QuantMode::optq) {
        full = calibrate_full(reordered, calib);
    }
    for (const LayerId id : block_linear_layers(c)) {
        const Matrix& w = reordered.linear(id);
        const std::vector<double> hm = full.count(id) ? full.at(id).mean() : std::vector<double>{};
        QuantizeOptions qo = opt.quant;
        QLayer layer;
        if (id.kind == LinearKind::o) {
            qo.layout = Layout::irregular;
            layer.q = quantize_layer(w, res.model.plan.wo_irregular.at(id.block), hm, qo);
        } else {
            const int kk = id.kind == LinearKind::down ? static_cast<int>(weak.ffn_indices.at(id.block).size())
                                                       : opt.k;
            qo.layout = Layout::structured;
            layer.q = quantize_layer(w, trailing(w.cols, kk), hm, qo);
        }
        res.model.layers.push_back(std::move(layer));
    }
    return res;
}

DenseModel dequantize_model(const QuantizedModel& q) {
    const ModelConfig& c = q.config();
    DenseModel d;
    d.backbone = q.backbone;
    d.head = q.head;
    d.blocks.resize(c.n_blocks);
    for (const LayerId id : block_linear_layers(c)) {
        const QLayer& l = q.layer(id);
        Matrix w = dequantize(l.q);
        if (l.online_perm) {
            w = permute_columns(w, l.online_perm->inverse());
        }
        d.linear(id) = std::move(w);
    }
    if (q.reorder == ReorderMode::ogr) {
        d = apply_ogr(d, q.plan.inverse());
    }
    return d;
}

std::uint64_t fingerprint(const ModelConfig& c) {
    std::uint64_t h = 14695981039346656037ull;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    for (const int v : {c.d_model, c.n_heads, c.head_dim, c.d_ff, c.n_blocks, c.vocab_size, c.max_seq}) {
        mix(static_cast<std::uint64_t>(v));
    }
    for (const LayerId id : all_linear_layers(c)) {
        mix(static_cast<std::uint64_t>(out_features(c, id.kind)));
        mix(static_cast<std::uint64_t>(in_features(c, id.kind)));
    }
    return h;
}

QuantBackend::QuantBackend(const QuantizedModel& model, bool reference, std::map<LayerId, KernelStats>* stats)
    : model_(model), reference_(reference), stats_(stats) {}

Matrix QuantBackend::forward(LayerId id, const Matrix& x) {
    if (id.kind == LinearKind::head) {
        return matmul_nt(x, model_.head);
    }
    const QLayer& l = model_.layer(id);
    const KernelPath path = reference_ ? KernelPath::reference : native_path(l);
    const Permutation* perm = l.online_perm ? &*l.online_perm : nullptr;
    const auto t0 = std::chrono::steady_clock::now();
    Matrix y = matmul_quantized(l.q, x, path, perm);
    if (stats_ != nullptr) {
        const auto t1 = std::chrono::steady_clock::now();
        KernelStats s = analytic_stats(l.q, path);
        s.bytes_read *= x.rows;
        s.fma *= x.rows;
        s.calls = x.rows;
        s.elapsed_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
        KernelStats& acc = (*stats_)[id];
        acc.path = path;
        acc.merge(s);
    }
    return y;
}

Matrix QuantBackend::backward(LayerId, const Matrix&) {
    fail(ErrorKind::invalid_argument, "QuantBackend is inference-only");
}

Matrix forward_batch(const QuantizedModel& model, const SequenceBatch& batch, bool reference) {
    QuantBackend backend(model, reference);
    return transformer_forward(model.backbone, backend, batch);
}

double evaluate_loss(const QuantizedModel& model, std::span<const int> tokens, int seq_len, int batch) {
    return evaluate_loss([&](const SequenceBatch& b) { return forward_batch(model, b); }, tokens, seq_len, batch);
}

GenerateResult bench_generate(const QuantizedModel& model, std::span<const int> prompt, int n_tokens, int repeats,
                              bool reference) {
    const ModelConfig& c = model.config();
    require(static_cast<int>(prompt.size()) <= c.max_seq, ErrorKind::out_of_range,
            "prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq " + std::to_string(c.max_seq));
    require(n_tokens >= 0 && repeats >= 1, ErrorKind::invalid_argument, "bench_generate: bad token or repeat count");
    require(n_tokens == 0 || !prompt.empty(), ErrorKind::invalid_argument, "bench_generate: empty prompt");
    GenerateResult res;
    if (n_tokens == 0) {
        return res;
    }
    for (int r = 0; r < repeats; ++r) {
        std::map<LayerId, KernelStats> stats;
        QuantBackend backend(model, reference, &stats);
        std::vector<int> ctx(prompt.begin(), prompt.end());
        std::vector<int> out;
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < n_tokens; ++i) {
            const std::size_t start = ctx.size() > static_cast<std::size_t>(c.max_seq) ? ctx.size() - c.max_seq : 0;
            const SequenceBatch b = single_sequence(std::span<const int>(ctx).subspan(start));
            const Matrix logits = transformer_forward(model.backbone, backend, b);
            const auto last = logits.row(logits.rows - 1);
            const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
            ctx.push_back(next);
            out.push_back(next);
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.run_tokens_per_sec.push_back(n_tokens / std::max(sec, 1e-12));
        if (r == 0) {
            res.tokens = std::move(out);
            res.stats = std::move(stats);
        }
    }
    std::vector<double> v = res.run_tokens_per_sec;
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    res.tokens_per_sec = v[v.size() / 2];
    return res;
}

} // namespace qeft
