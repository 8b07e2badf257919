#include "qeft/tuning.hpp"

#include "qeft/data.hpp"
#include "qeft/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qeft {

TrainableLayerState make_state(const QuantizedLinear& q) {
    TrainableLayerState s;
    s.m = Matrix(q.oc, q.k);
    s.v = Matrix(q.oc, q.k);
    return s;
}

std::vector<int> weak_input_columns(const QLayer& l) {
    std::vector<int> cols = l.q.weak_indices;
    if (l.online_perm) {
        for (int& c : cols) {
            c = l.online_perm->old_of(c);
        }
    }
    return cols;
}

Matrix qlinear_forward_train(const QLayer& l, const Matrix& x, TrainableLayerState& state, CostCounters* counters) {
    const QuantizedLinear& q = l.q;
    require(x.cols == q.ic, ErrorKind::shape_mismatch, "qlinear_forward_train: input width differs from IC");
    const Permutation* perm = l.online_perm ? &*l.online_perm : nullptr;
    Matrix y = matmul_quantized(q, x, native_path(l), perm);
    const std::vector<int> cols = weak_input_columns(l);
    state.saved = Matrix(q.k, x.rows);
    for (int i = 0; i < q.k; ++i) {
        for (int t = 0; t < x.rows; ++t) {
            state.saved(i, t) = x(t, cols[i]);
        }
    }
    state.tokens = x.rows;
    if (counters != nullptr) {
        counters->saved_elems += static_cast<long long>(q.k) * x.rows;
        counters->full_saved_elems += static_cast<long long>(q.ic) * x.rows;
    }
    return y;
}

QBackward qlinear_backward(TrainableLayerState& state, const Matrix& dy, const QLayer& l, CostCounters* counters) {
    const QuantizedLinear& q = l.q;
    require(state.tokens >= 0, ErrorKind::invalid_argument, "qlinear_backward: no pending forward for this layer");
    require(dy.rows == state.tokens && dy.cols == q.oc && state.saved.rows == q.k, ErrorKind::shape_mismatch,
            "qlinear_backward: dY does not match the saved forward state");
    const int t_count = dy.rows;
    QBackward out;
    out.dw_weak = Matrix(q.oc, q.k);
    for (int t = 0; t < t_count; ++t) {
        const auto g = dy.row(t);
        for (int o = 0; o < q.oc; ++o) {
            const float go = g[o];
            if (go == 0.0f) {
                continue;
            }
            float* dw = q.k > 0 ? out.dw_weak.ptr(o, 0) : nullptr;
            for (int i = 0; i < q.k; ++i) {
                dw[i] += go * state.saved(i, t);
            }
        }
    }
    const Matrix dx_local = matmul_nn(dy, dequantize(q));
    if (l.online_perm) {
        out.dx = Matrix(t_count, q.ic);
        const auto& fwd = l.online_perm->forward();
        for (int t = 0; t < t_count; ++t) {
            for (int c = 0; c < q.ic; ++c) {
                out.dx(t, fwd[c]) = dx_local(t, c);
            }
        }
    } else {
        out.dx = dx_local;
    }
    if (counters != nullptr) {
        counters->weight_grad_fma += static_cast<long long>(q.oc) * q.k * t_count;
        counters->full_weight_grad_fma += static_cast<long long>(q.oc) * q.ic * t_count;
    }
    state.tokens = -1;
    return out;
}

void adam_step(TrainableLayerState& state, QLayer& l, const Matrix& dw_weak, const AdamParams& p) {
    QuantizedLinear& q = l.q;
    require(dw_weak.rows == q.oc && dw_weak.cols == q.k && state.m.same_shape(dw_weak), ErrorKind::shape_mismatch,
            "adam_step: gradient does not match the weak block");
    require(all_finite(dw_weak.data), ErrorKind::numeric, "adam_step: non-finite weak-column gradient");
    ++state.step;
    adam_update(q.weak.data, dw_weak.data, state.m.data, state.v.data, state.step, p);
}

TuningBackend::TuningBackend(const QuantizedModel& model) : model_(model) {
    for (const QLayer& l : model.layers) {
        states_.push_back(make_state(l.q));
        grads_.emplace_back(l.q.oc, l.q.k);
    }
}

Matrix TuningBackend::forward(LayerId id, const Matrix& x) {
    if (id.kind == LinearKind::head) {
        return matmul_nt(x, model_.head);
    }
    const auto i = static_cast<std::size_t>(layer_index(model_.config(), id));
    return qlinear_forward_train(model_.layers[i], x, states_[i], &counters_);
}

Matrix TuningBackend::backward(LayerId id, const Matrix& dy) {
    if (id.kind == LinearKind::head) {
        return matmul_nn(dy, model_.head);
    }
    const auto i = static_cast<std::size_t>(layer_index(model_.config(), id));
    QBackward b = qlinear_backward(states_[i], dy, model_.layers[i], &counters_);
    add_inplace(grads_[i], b.dw_weak);
    return std::move(b.dx);
}

void TuningBackend::zero_grads() {
    for (Matrix& g : grads_) {
        std::fill(g.data.begin(), g.data.end(), 0.0f);
    }
}

FinetuneResult finetune(const QuantizedModel& model, std::span<const int> tokens, const FinetuneConfig& cfg) {
    require(cfg.steps >= 0 && cfg.batch >= 1 && cfg.seq_len >= 1 && cfg.grad_accum >= 1, ErrorKind::invalid_config,
            "finetune: steps, batch, seq_len and grad_accum must be positive");
    require(cfg.seq_len <= model.config().max_seq, ErrorKind::invalid_config, "finetune: seq_len exceeds max_seq");
    require(!tokens.empty(), ErrorKind::invalid_argument, "finetune: empty dataset");
    FinetuneResult res{model, {}, {}, false, 0};
    QuantizedModel& m = res.model;
    TuningBackend backend(m);
    Rng rng(cfg.seed);
    const AdamParams ap{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps};
    for (int step = 1; step <= cfg.steps; ++step) {
        backend.zero_grads();
        backend.reset_counters();
        double loss = 0.0;
        for (int a = 0; a < cfg.grad_accum; ++a) {
            const SequenceBatch b = sample_batch(tokens, cfg.batch, cfg.seq_len, rng);
            ForwardCache cache;
            const Matrix logits = transformer_forward(m.backbone, backend, b, &cache);
            Matrix dlogits;
            loss += cross_entropy_grad(logits, b.targets, dlogits);
            scale_inplace(dlogits, 1.0f / static_cast<float>(cfg.grad_accum));
            transformer_backward(m.backbone, backend, cache, dlogits, nullptr);
        }
        loss /= cfg.grad_accum;
        std::vector<std::span<float>> views;
        for (Matrix& g : backend.grads()) {
            views.emplace_back(g.data);
        }
        const double gn = global_norm(views);
        if (!std::isfinite(loss) || !std::isfinite(gn)) {
            res.diverged = true;
            break;
        }
        clip_global_norm(views, cfg.max_grad_norm);
        std::vector<Matrix> backup;
        for (const QLayer& l : m.layers) {
            backup.push_back(l.q.weak);
        }
        bool finite = true;
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            adam_step(backend.states()[i], m.layers[i], backend.grads()[i], ap);
            finite = finite && all_finite(m.layers[i].q.weak.data);
        }
        if (!finite) {
            for (std::size_t i = 0; i < m.layers.size(); ++i) {
                m.layers[i].q.weak = std::move(backup[i]);
            }
            res.diverged = true;
            break;
        }
        res.counters.merge(backend.counters());
        res.steps_done = step;
        if (step % std::max(1, cfg.log_every) == 0 || step == 1 || step == cfg.steps) {
            res.log.push_back({step, loss, gn, backend.counters()});
        }
    }
    return res;
}

std::map<LayerId, std::vector<int>> criterion_mask(const DenseModel& model, const std::vector<SequenceBatch>& dataset,
                                                   const HessianDiag& h, int k, SensitivityMetric variant) {
    const SensitivityReport rep = gradient_column_metric(model, dataset, h, variant);
    std::map<LayerId, std::vector<int>> out;
    for (const auto& [id, scores] : rep.scores) {
        require(k >= 0 && k <= static_cast<int>(scores.size()), ErrorKind::out_of_range,
                "criterion_mask: k exceeds IC of " + id.name());
        out[id] = select_local_topk(scores, k);
    }
    return out;
}

namespace {

// Solves the symmetric system in place by Gaussian elimination with partial
// pivoting; directions with a vanishing pivot get a zero coefficient.
std::vector<double> solve_sym(std::vector<double> a, std::vector<double> b, int n) {
    std::vector<int> piv_col(n, -1);
    std::vector<double> x(n, 0.0);
    double scale = 0.0;
    for (double v : a) {
        scale = std::max(scale, std::abs(v));
    }
    const double tiny = scale * 1e-12;
    std::vector<char> used(n, 0);
    for (int c = 0; c < n; ++c) {
        int best = -1;
        double bv = tiny;
        for (int r = 0; r < n; ++r) {
            if (!used[r] && std::abs(a[r * n + c]) > bv) {
                bv = std::abs(a[r * n + c]);
                best = r;
            }
        }
        if (best < 0) {
            continue;
        }
        used[best] = 1;
        piv_col[c] = best;
        for (int r = 0; r < n; ++r) {
            if (r == best) {
                continue;
            }
            const double f = a[r * n + c] / a[best * n + c];
            if (f == 0.0) {
                continue;
            }
            for (int j = c; j < n; ++j) {
                a[r * n + j] -= f * a[best * n + j];
            }
            b[r] -= f * b[best];
        }
    }
    for (int c = 0; c < n; ++c) {
        if (piv_col[c] >= 0) {
            x[c] = b[piv_col[c]] / a[piv_col[c] * n + c];
        }
    }
    return x;
}

void check_instance(const LsqInstance& inst) {
    require(inst.a.rows == inst.targets.rows && inst.theta0.rows == inst.targets.cols &&
                inst.theta0.cols == inst.a.cols,
            ErrorKind::shape_mismatch, "least-squares instance has inconsistent shapes");
}

double binom(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;
    }
    return r;
}

} // namespace

double masked_lsq_loss(const LsqInstance& inst, std::span<const int> mask) {
    check_instance(inst);
    const int t_count = inst.a.rows;
    const int ic = inst.a.cols;
    const int oc = inst.targets.cols;
    const int k = static_cast<int>(mask.size());
    for (int j : mask) {
        require(j >= 0 && j < ic, ErrorKind::out_of_range, "masked_lsq_loss: mask index out of range");
    }
    std::vector<double> g(static_cast<std::size_t>(k) * k, 0.0);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            double s = 0.0;
            for (int t = 0; t < t_count; ++t) {
                s += static_cast<double>(inst.a(t, mask[i])) * inst.a(t, mask[j]);
            }
            g[i * k + j] = s;
        }
    }
    double loss = 0.0;
    for (int o = 0; o < oc; ++o) {
        std::vector<double> r(t_count);
        for (int t = 0; t < t_count; ++t) {
            double pred = 0.0;
            for (int j = 0; j < ic; ++j) {
                pred += static_cast<double>(inst.theta0(o, j)) * inst.a(t, j);
            }
            r[t] = inst.targets(t, o) - pred;
        }
        std::vector<double> rhs(k, 0.0);
        for (int i = 0; i < k; ++i) {
            for (int t = 0; t < t_count; ++t) {
                rhs[i] += static_cast<double>(inst.a(t, mask[i])) * r[t];
            }
        }
        const std::vector<double> d = k > 0 ? solve_sym(g, rhs, k) : std::vector<double>{};
        for (int t = 0; t < t_count; ++t) {
            double e = r[t];
            for (int i = 0; i < k; ++i) {
                e -= d[i] * inst.a(t, mask[i]);
            }
            loss += 0.5 * e * e;
        }
    }
    return loss;
}

MaskOracleResult mask_oracle_bruteforce(const LsqInstance& inst, int k) {
    check_instance(inst);
    const int ic = inst.a.cols;
    require(k >= 0 && k <= ic, ErrorKind::out_of_range, "mask_oracle_bruteforce: k outside [0, IC]");
    require(binom(ic, k) <= 1e4, ErrorKind::invalid_argument, "mask_oracle_bruteforce: more than 10^4 masks");
    MaskOracleResult res;
    std::vector<int> mask(k);
    std::iota(mask.begin(), mask.end(), 0);
    bool first = true;
    while (true) {
        const double l = masked_lsq_loss(inst, mask);
        res.table.emplace_back(mask, l);
        if (first || l < res.best_loss) {
            res.best_loss = l;
            res.best_mask = mask;
            first = false;
        }
        int i = k - 1;
        while (i >= 0 && mask[i] == ic - k + i) {
            --i;
        }
        if (i < 0) {
            break;
        }
        ++mask[i];
        for (int j = i + 1; j < k; ++j) {
            mask[j] = mask[j - 1] + 1;
        }
    }
    return res;
}

std::vector<double> lsq_column_scores(const LsqInstance& inst, SensitivityMetric variant) {
    check_instance(inst);
    require(variant == SensitivityMetric::grad_sq || variant == SensitivityMetric::grad_sq_over_h,
            ErrorKind::invalid_argument, "lsq_column_scores: variant must be grad_sq or grad_sq_over_h");
    const int t_count = inst.a.rows;
    const int ic = inst.a.cols;
    const int oc = inst.targets.cols;
    std::vector<double> scores(ic, 0.0);
    std::vector<double> resid(static_cast<std::size_t>(t_count) * oc);
    for (int t = 0; t < t_count; ++t) {
        for (int o = 0; o < oc; ++o) {
            double pred = 0.0;
            for (int j = 0; j < ic; ++j) {
                pred += static_cast<double>(inst.theta0(o, j)) * inst.a(t, j);
            }
            resid[static_cast<std::size_t>(t) * oc + o] = pred - inst.targets(t, o);
        }
    }
    for (int i = 0; i < ic; ++i) {
        double h = 0.0;
        for (int t = 0; t < t_count; ++t) {
            h += 2.0 * static_cast<double>(inst.a(t, i)) * inst.a(t, i);
        }
        double s = 0.0;
        for (int o = 0; o < oc; ++o) {
            double g = 0.0;
            for (int t = 0; t < t_count; ++t) {
                g += resid[static_cast<std::size_t>(t) * oc + o] * inst.a(t, i);
            }
            s += g * g;
        }
        if (variant == SensitivityMetric::grad_sq_over_h) {
            s = h > 0.0 ? s / h : (s > 0.0 ? INFINITY : 0.0);
        }
        scores[i] = s;
    }
    return scores;
}

std::vector<int> criterion_mask_lsq(const LsqInstance& inst, int k, SensitivityMetric variant) {
    require(k >= 0 && k <= inst.a.cols, ErrorKind::out_of_range, "criterion_mask: k exceeds IC");
    return select_local_topk(lsq_column_scores(inst, variant), k);
}

} // namespace qeft
