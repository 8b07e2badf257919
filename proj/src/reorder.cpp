#include "qeft/reorder.hpp"

#include "qeft/error.hpp"

#include <algorithm>
#include <numeric>

namespace qeft {

Permutation::Permutation(std::vector<int> forward) : fwd_(std::move(forward)), inv_(fwd_.size(), -1) {
    const int n = static_cast<int>(fwd_.size());
    for (int i = 0; i < n; ++i) {
        const int o = fwd_[i];
        require(o >= 0 && o < n && inv_[o] == -1, ErrorKind::invalid_argument, "permutation is not a bijection");
        inv_[o] = i;
    }
}

Permutation Permutation::identity(int n) {
    std::vector<int> f(n);
    std::iota(f.begin(), f.end(), 0);
    return Permutation(std::move(f));
}

bool Permutation::is_identity() const {
    for (std::size_t i = 0; i < fwd_.size(); ++i) {
        if (fwd_[i] != static_cast<int>(i)) {
            return false;
        }
    }
    return true;
}

Permutation Permutation::inverse() const { return Permutation(inv_); }

Permutation weak_to_tail(int n, std::span<const int> weak) {
    std::vector<char> is_weak(n, 0);
    for (int j : weak) {
        require(j >= 0 && j < n, ErrorKind::out_of_range,
                "build_plan: weak index " + std::to_string(j) + " outside dimension " + std::to_string(n));
        require(!is_weak[j], ErrorKind::invalid_argument, "build_plan: duplicate weak index");
        is_weak[j] = 1;
    }
    std::vector<int> f;
    f.reserve(n);
    for (int j = 0; j < n; ++j) {
        if (!is_weak[j]) {
            f.push_back(j);
        }
    }
    for (int j = 0; j < n; ++j) {
        if (is_weak[j]) {
            f.push_back(j);
        }
    }
    return Permutation(std::move(f));
}

ReorderPlan ReorderPlan::inverse() const {
    ReorderPlan inv;
    inv.p_resid = p_resid.inverse();
    for (const auto& p : p_ffn) {
        inv.p_ffn.push_back(p.inverse());
    }
    inv.wo_irregular = wo_irregular;
    return inv;
}

ReorderPlan identity_plan(const ModelConfig& c) {
    ReorderPlan p;
    p.p_resid = Permutation::identity(c.d_model);
    for (int b = 0; b < c.n_blocks; ++b) {
        p.p_ffn.push_back(Permutation::identity(c.d_ff));
        p.wo_irregular.emplace_back();
    }
    return p;
}

ReorderPlan build_plan(const GlobalWeakColumns& gwc, const ModelConfig& c) {
    require(static_cast<int>(gwc.ffn_indices.size()) == c.n_blocks &&
                static_cast<int>(gwc.wo_indices.size()) == c.n_blocks,
            ErrorKind::shape_mismatch, "build_plan: per-block index sets do not match n_blocks");
    ReorderPlan p;
    p.p_resid = weak_to_tail(c.d_model, gwc.resid_indices);
    for (int b = 0; b < c.n_blocks; ++b) {
        p.p_ffn.push_back(weak_to_tail(c.d_ff, gwc.ffn_indices[b]));
        for (int j : gwc.wo_indices[b]) {
            require(j >= 0 && j < c.d_model, ErrorKind::out_of_range, "build_plan: W_O weak index out of range");
        }
        std::vector<int> wo = gwc.wo_indices[b];
        std::sort(wo.begin(), wo.end());
        p.wo_irregular.push_back(std::move(wo));
    }
    return p;
}

Matrix permute_columns(const Matrix& m, const Permutation& p) {
    require(p.size() == m.cols, ErrorKind::shape_mismatch, "permute_columns: dimension mismatch");
    Matrix out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            out(r, c) = m(r, p.old_of(c));
        }
    }
    return out;
}

Matrix permute_rows(const Matrix& m, const Permutation& p) {
    require(p.size() == m.rows, ErrorKind::shape_mismatch, "permute_rows: dimension mismatch");
    Matrix out(m.rows, m.cols);
    for (int r = 0; r < m.rows; ++r) {
        const auto src = m.row(p.old_of(r));
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

const Permutation* input_permutation(const ReorderPlan& plan, LayerId id) {
    switch (id.kind) {
    case LinearKind::o: return nullptr;
    case LinearKind::down: return &plan.p_ffn.at(id.block);
    default: return &plan.p_resid;
    }
}

const Permutation* output_permutation(const ReorderPlan& plan, LayerId id) {
    switch (id.kind) {
    case LinearKind::o:
    case LinearKind::down: return &plan.p_resid;
    case LinearKind::up:
    case LinearKind::gate: return &plan.p_ffn.at(id.block);
    default: return nullptr;
    }
}

DenseModel apply_ogr(const DenseModel& model, const ReorderPlan& plan) {
    const ModelConfig& c = model.config();
    require(plan.p_resid.size() == c.d_model && static_cast<int>(plan.p_ffn.size()) == c.n_blocks,
            ErrorKind::shape_mismatch, "apply_ogr: plan does not match model dimensions");
    for (const auto& p : plan.p_ffn) {
        require(p.size() == c.d_ff, ErrorKind::shape_mismatch, "apply_ogr: FFN permutation has wrong dimension");
    }
    DenseModel out = model;
    const Permutation& pr = plan.p_resid;
    out.backbone.embedding = permute_columns(model.backbone.embedding, pr);
    for (int b = 0; b < c.n_blocks; ++b) {
        out.backbone.norm1[b] = pr.apply<float>(model.backbone.norm1[b]);
        out.backbone.norm2[b] = pr.apply<float>(model.backbone.norm2[b]);
    }
    out.backbone.final_norm = pr.apply<float>(model.backbone.final_norm);
    for (const LayerId id : all_linear_layers(c)) {
        Matrix w = model.linear(id);
        if (const Permutation* in = input_permutation(plan, id)) {
            w = permute_columns(w, *in);
        }
        if (const Permutation* outp = output_permutation(plan, id)) {
            w = permute_rows(w, *outp);
        }
        out.linear(id) = std::move(w);
    }
    return out;
}

} // namespace qeft
