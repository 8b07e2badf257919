#include "qeft/calibration.hpp"

#include "qeft/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace qeft {

std::vector<double> HessianDiag::lambda(LayerId id) const {
    const auto it = sums.find(id);
    require(it != sums.end(), ErrorKind::out_of_range, "no hessian diagonal for " + id.name());
    std::vector<double> out = it->second;
    if (sample_count > 0) {
        for (double& v : out) {
            v /= sample_count;
        }
    }
    return out;
}

std::vector<double> FullHessian::mean() const {
    std::vector<double> out = sum;
    if (sample_count > 0) {
        for (double& v : out) {
            v /= sample_count;
        }
    }
    return out;
}

HessianDiag accumulate_hessian_diag(const ForwardTrace& trace, std::optional<HessianDiag> running) {
    HessianDiag h = running ? std::move(*running) : HessianDiag{};
    const bool fresh = h.sums.empty();
    if (!fresh) {
        require(h.sums.size() == trace.entries.size(), ErrorKind::shape_mismatch,
                "accumulate_hessian_diag: trace layer set differs from running state");
    }
    for (const TraceEntry& e : trace.entries) {
        auto it = h.sums.find(e.id);
        if (fresh) {
            it = h.sums.emplace(e.id, std::vector<double>(e.x.rows, 0.0)).first;
        }
        require(it != h.sums.end(), ErrorKind::shape_mismatch,
                "accumulate_hessian_diag: unexpected layer " + e.id.name());
        require(static_cast<int>(it->second.size()) == e.x.rows, ErrorKind::shape_mismatch,
                "accumulate_hessian_diag: IC mismatch for " + e.id.name());
        for (int j = 0; j < e.x.rows; ++j) {
            double ss = 0.0;
            for (float v : e.x.row(j)) {
                ss += static_cast<double>(v) * v;
            }
            it->second[j] += 2.0 * ss;
        }
    }
    h.sample_count += 1;
    return h;
}

void accumulate_hessian_full(std::map<LayerId, FullHessian>& acc, const ForwardTrace& trace) {
    for (const TraceEntry& e : trace.entries) {
        FullHessian& fh = acc[e.id];
        const int n = e.x.rows;
        if (fh.n == 0) {
            fh.n = n;
            fh.sum.assign(static_cast<std::size_t>(n) * n, 0.0);
        }
        require(fh.n == n, ErrorKind::shape_mismatch, "accumulate_hessian_full: IC mismatch for " + e.id.name());
        const int T = e.x.cols;
#pragma omp parallel for schedule(dynamic, 8) if (n >= 128)
        for (int i = 0; i < n; ++i) {
            const float* xi = e.x.ptr(i, 0);
            for (int j = 0; j <= i; ++j) {
                const float* xj = e.x.ptr(j, 0);
                double s = 0.0;
                for (int t = 0; t < T; ++t) {
                    s += static_cast<double>(xi[t]) * xj[t];
                }
                fh.sum[static_cast<std::size_t>(i) * n + j] += 2.0 * s;
                if (j != i) {
                    fh.sum[static_cast<std::size_t>(j) * n + i] += 2.0 * s;
                }
            }
        }
        fh.sample_count += 1;
    }
}

HessianDiag calibrate_diag(const DenseModel& model, const std::vector<std::vector<int>>& seqs) {
    std::optional<HessianDiag> h;
    for (const auto& s : seqs) {
        auto r = forward(model, s, true);
        h = accumulate_hessian_diag(*r.trace, std::move(h));
    }
    return h ? *h : HessianDiag{};
}

std::map<LayerId, FullHessian> calibrate_full(const DenseModel& model, const std::vector<std::vector<int>>& seqs) {
    std::map<LayerId, FullHessian> acc;
    for (const auto& s : seqs) {
        auto r = forward(model, s, true);
        accumulate_hessian_full(acc, *r.trace);
    }
    return acc;
}

std::vector<double> column_sensitivity(std::span<const double> lambda, const Matrix& delta_w) {
    require(static_cast<int>(lambda.size()) == delta_w.cols, ErrorKind::shape_mismatch,
            "column_sensitivity: lambda length must equal IC");
    std::vector<double> s(lambda.size(), 0.0);
    for (int r = 0; r < delta_w.rows; ++r) {
        const auto row = delta_w.row(r);
        for (int j = 0; j < delta_w.cols; ++j) {
            s[j] += static_cast<double>(row[j]) * row[j];
        }
    }
    for (std::size_t j = 0; j < s.size(); ++j) {
        s[j] *= lambda[j];
    }
    return s;
}

std::vector<int> select_local_topk(std::span<const double> scores, int k) {
    const int n = static_cast<int>(scores.size());
    require(k >= 0 && k <= n, ErrorKind::out_of_range,
            "select_local_topk: k=" + std::to_string(k) + " exceeds IC=" + std::to_string(n));
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

GlobalSelection select_global_indices(const std::vector<std::vector<double>>& lambdas, int k) {
    require(!lambdas.empty(), ErrorKind::invalid_argument, "select_global: no layers");
    const std::size_t d = lambdas.front().size();
    GlobalSelection sel;
    sel.scores.assign(d, 0.0);
    for (const auto& lam : lambdas) {
        require(lam.size() == d, ErrorKind::shape_mismatch, "select_global: layers disagree on IC");
        const double mean = std::accumulate(lam.begin(), lam.end(), 0.0) / static_cast<double>(d);
        if (mean <= 0.0) {
            continue;
        }
        for (int j : select_local_topk(lam, k)) {
            sel.scores[j] += lam[j] / mean;
        }
    }
    sel.indices = select_local_topk(sel.scores, k);
    return sel;
}

GlobalWeakColumns select_global(const HessianDiag& h, const ModelConfig& config, int k, int k_ffn) {
    if (k_ffn < 0) {
        k_ffn = k;
    }
    GlobalWeakColumns g;
    g.k = k;
    std::vector<std::vector<double>> resid;
    for (const LayerId id : all_linear_layers(config)) {
        if (is_residual_fed(id.kind)) {
            resid.push_back(h.lambda(id));
        }
    }
    auto sel = select_global_indices(resid, k);
    g.resid_indices = std::move(sel.indices);
    g.s_global = std::move(sel.scores);
    for (int b = 0; b < config.n_blocks; ++b) {
        g.ffn_indices.push_back(select_global_indices({h.lambda({b, LinearKind::down})}, k_ffn).indices);
        g.wo_indices.push_back(select_local_topk(h.lambda({b, LinearKind::o}), k));
    }
    return g;
}

const char* to_string(SensitivityMetric m) {
    switch (m) {
    case SensitivityMetric::lambda_dw: return "lambda_dw";
    case SensitivityMetric::lambda_only: return "lambda_only";
    case SensitivityMetric::grad_sq: return "grad_sq";
    case SensitivityMetric::grad_sq_over_h: return "grad_sq_over_h";
    }
    return "?";
}

SensitivityReport gradient_column_metric(const DenseModel& model, const std::vector<SequenceBatch>& dataset,
                                         const HessianDiag& h, SensitivityMetric variant) {
    require(!dataset.empty(), ErrorKind::invalid_argument, "gradient_column_metric: empty dataset");
    require(variant == SensitivityMetric::grad_sq || variant == SensitivityMetric::grad_sq_over_h,
            ErrorKind::invalid_argument, "gradient_column_metric: variant must be grad_sq or grad_sq_over_h");
    DenseModel grads = zeros_like(model);
    for (const SequenceBatch& b : dataset) {
        DenseBackend backend(model, nullptr, &grads);
        ForwardCache cache;
        const Matrix logits = transformer_forward(model.backbone, backend, b, &cache);
        Matrix dlogits;
        cross_entropy_grad(logits, b.targets, dlogits);
        transformer_backward(model.backbone, backend, cache, dlogits, nullptr);
    }
    SensitivityReport rep;
    rep.metric = variant;
    for (const LayerId id : all_linear_layers(model.config())) {
        const Matrix& g = grads.linear(id);
        std::vector<double> score(g.cols, 0.0);
        for (int r = 0; r < g.rows; ++r) {
            for (int c = 0; c < g.cols; ++c) {
                score[c] += static_cast<double>(g(r, c)) * g(r, c);
            }
        }
        if (variant == SensitivityMetric::grad_sq_over_h) {
            const auto lam = h.lambda(id);
            bool flagged = false;
            for (int c = 0; c < g.cols; ++c) {
                if (lam[c] > 0.0) {
                    score[c] /= lam[c];
                } else if (score[c] > 0.0) {
                    score[c] = std::numeric_limits<double>::infinity();
                    flagged = true;
                }
            }
            if (flagged) {
                rep.flagged.push_back(id);
            }
        }
        rep.scores.emplace(id, std::move(score));
    }
    return rep;
}

SensitivityReport lambda_report(const HessianDiag& h) {
    SensitivityReport rep;
    rep.metric = SensitivityMetric::lambda_only;
    for (const auto& [id, sum] : h.sums) {
        rep.scores.emplace(id, h.lambda(id));
    }
    return rep;
}

void write_calibration_report(const std::string& path, const CalibrationReport& report) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "cannot write " + path);
    const int k = report.weak.k;
    for (const auto& [id, sum] : report.hessian.sums) {
        const auto lam = report.hessian.lambda(id);
        nlohmann::json rec;
        rec["record"] = "layer";
        rec["layer"] = id.name();
        rec["ic"] = lam.size();
        rec["metric"] = to_string(SensitivityMetric::lambda_only);
        rec["samples"] = report.hessian.sample_count;
        rec["lambda"] = lam;
        rec["topk"] = select_local_topk(lam, std::min<int>(k, static_cast<int>(lam.size())));
        out << rec.dump() << '\n';
    }
    nlohmann::json g;
    g["record"] = "global";
    g["k"] = k;
    g["resid_indices"] = report.weak.resid_indices;
    g["ffn_indices"] = report.weak.ffn_indices;
    g["wo_indices"] = report.weak.wo_indices;
    g["s_global"] = report.weak.s_global;
    out << g.dump() << '\n';
    require(out.good(), ErrorKind::io, "failed writing " + path);
}

CalibrationReport read_calibration_report(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open " + path);
    CalibrationReport rep;
    bool have_global = false;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            const auto rec = nlohmann::json::parse(line);
            const std::string kind = rec.at("record");
            if (kind == "layer") {
                const auto id = parse_layer_name(rec.at("layer").get<std::string>());
                require(id.has_value(), ErrorKind::format, path + ":" + std::to_string(lineno) + ": unknown layer");
                const int samples = rec.at("samples").get<int>();
                auto lam = rec.at("lambda").get<std::vector<double>>();
                for (double& v : lam) {
                    v *= samples;
                }
                rep.hessian.sample_count = samples;
                rep.hessian.sums[*id] = std::move(lam);
            } else if (kind == "global") {
                rep.weak.k = rec.at("k").get<int>();
                rep.weak.resid_indices = rec.at("resid_indices").get<std::vector<int>>();
                rep.weak.ffn_indices = rec.at("ffn_indices").get<std::vector<std::vector<int>>>();
                rep.weak.wo_indices = rec.at("wo_indices").get<std::vector<std::vector<int>>>();
                rep.weak.s_global = rec.at("s_global").get<std::vector<double>>();
                have_global = true;
            }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::format, path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    require(have_global, ErrorKind::format, path + ": missing global selection record");
    return rep;
}

} // namespace qeft
