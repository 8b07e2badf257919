#pragma once

#include "qeft/calibration.hpp"
#include "qeft/model.hpp"

#include <span>
#include <vector>

namespace qeft {

// p[new] = old.
class Permutation {
public:
    Permutation() = default;
    explicit Permutation(std::vector<int> forward);
    static Permutation identity(int n);

    int size() const { return static_cast<int>(fwd_.size()); }
    int old_of(int new_index) const { return fwd_[new_index]; }
    int new_of(int old_index) const { return inv_[old_index]; }
    const std::vector<int>& forward() const { return fwd_; }
    const std::vector<int>& inverse_map() const { return inv_; }
    bool is_identity() const;
    Permutation inverse() const;

    // out[new] = v[p[new]]
    template <typename T>
    std::vector<T> apply(std::span<const T> v) const {
        std::vector<T> out(v.size());
        for (std::size_t i = 0; i < fwd_.size(); ++i) {
            out[i] = v[fwd_[i]];
        }
        return out;
    }

    friend bool operator==(const Permutation& a, const Permutation& b) { return a.fwd_ == b.fwd_; }

private:
    std::vector<int> fwd_;
    std::vector<int> inv_;
};

// Non-weak channels first in original order, then the weak channels in ascending order.
Permutation weak_to_tail(int n, std::span<const int> weak);

struct ReorderPlan {
    Permutation p_resid;                       // over d_model
    std::vector<Permutation> p_ffn;            // per block, over d_ff
    std::vector<std::vector<int>> wo_irregular; // per block, W_O weak columns (never reordered)

    ReorderPlan inverse() const;
    friend bool operator==(const ReorderPlan&, const ReorderPlan&) = default;
};

ReorderPlan identity_plan(const ModelConfig& c);
ReorderPlan build_plan(const GlobalWeakColumns& gwc, const ModelConfig& c);

// Permutes every residual-stream axis by p_resid and each FFN intermediate
// axis by p_ffn. W_O's input axis (head concatenation order) is left alone.
DenseModel apply_ogr(const DenseModel& model, const ReorderPlan& plan);

// Rows and/or columns of a matrix.
Matrix permute_columns(const Matrix& m, const Permutation& p);
Matrix permute_rows(const Matrix& m, const Permutation& p);

// Permutation applied to a layer's input channels by the plan (nullptr for W_O).
const Permutation* input_permutation(const ReorderPlan& plan, LayerId id);
// Permutation applied to a layer's output channels by the plan (nullptr for Q/K/V).
const Permutation* output_permutation(const ReorderPlan& plan, LayerId id);

} // namespace qeft
