#include "qeft/merging.hpp"

#include "qeft/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace qeft {

namespace {

// Weak-block positions sorted by original column.
std::vector<int> order_by_original(const std::vector<int>& orig) {
    std::vector<int> order(orig.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return orig[a] < orig[b]; });
    return order;
}

bool same_frozen(const QuantizedLinear& a, const QuantizedLinear& b) {
    return a.oc == b.oc && a.ic == b.ic && a.k == b.k && a.bits == b.bits && a.group_size == b.group_size &&
           a.layout == b.layout && a.packed == b.packed && a.scales == b.scales && a.zeros == b.zeros &&
           a.weak_indices == b.weak_indices && a.weak.rows == b.weak.rows && a.weak.cols == b.weak.cols;
}

void check_fingerprint(const ModelConfig& c, const WeakDelta& d) {
    require(fingerprint(c) == d.fingerprint, ErrorKind::checkpoint_mismatch,
            "delta fingerprint does not match the target architecture");
}

} // namespace

std::vector<int> weak_columns_original(const QuantizedModel& m, LayerId id) {
    const QLayer& l = m.layer(id);
    std::vector<int> out;
    out.reserve(l.q.k);
    const Permutation* in = m.reorder == ReorderMode::ogr ? input_permutation(m.plan, id) : nullptr;
    for (const int c : l.q.weak_indices) {
        int j = c;
        if (l.online_perm) {
            j = l.online_perm->old_of(j);
        }
        if (in != nullptr) {
            j = in->old_of(j);
        }
        out.push_back(j);
    }
    return out;
}

std::vector<int> rows_original(const QuantizedModel& m, LayerId id) {
    const QLayer& l = m.layer(id);
    std::vector<int> out(l.q.oc);
    const Permutation* p = m.reorder == ReorderMode::ogr ? output_permutation(m.plan, id) : nullptr;
    for (int r = 0; r < l.q.oc; ++r) {
        out[r] = p != nullptr ? p->old_of(r) : r;
    }
    return out;
}

WeakDelta extract_delta(const QuantizedModel& tuned, const QuantizedModel& base) {
    auto need = [](bool ok, const std::string& what) {
        require(ok, ErrorKind::not_descendant, "not a weak-column descendant: " + what);
    };
    need(tuned.config() == base.config(), "model config differs");
    need(tuned.backbone == base.backbone, "embedding or norm gains differ");
    need(tuned.head == base.head, "head differs");
    need(tuned.plan == base.plan && tuned.reorder == base.reorder, "reorder plan differs");
    need(tuned.layers.size() == base.layers.size(), "layer count differs");

    WeakDelta d;
    d.k = base.k;
    d.fingerprint = fingerprint(base.config());
    d.plan = base.plan;
    for (const LayerId id : block_linear_layers(base.config())) {
        const QLayer& t = tuned.layer(id);
        const QLayer& b = base.layer(id);
        need(same_frozen(t.q, b.q) && t.online_perm == b.online_perm, "frozen components of " + id.name() + " differ");
        const std::vector<int> cols = weak_columns_original(base, id);
        const std::vector<int> rows = rows_original(base, id);
        const std::vector<int> order = order_by_original(cols);
        LayerDelta ld;
        ld.id = id;
        ld.oc = b.q.oc;
        for (const int i : order) {
            ld.indices.push_back(cols[i]);
        }
        ld.delta.assign(static_cast<std::size_t>(ld.oc) * ld.indices.size(), 0.0);
        for (int r = 0; r < b.q.oc; ++r) {
            for (std::size_t s = 0; s < order.size(); ++s) {
                const int i = order[s];
                ld.at(rows[r], static_cast<int>(s)) =
                    static_cast<double>(t.q.weak(r, i)) - static_cast<double>(b.q.weak(r, i));
            }
        }
        d.layers.push_back(std::move(ld));
    }
    return d;
}

DenseModel apply_to_dense(const DenseModel& target, const WeakDelta& delta) {
    check_fingerprint(target.config(), delta);
    DenseModel out = target;
    for (const LayerDelta& ld : delta.layers) {
        Matrix& w = out.linear(ld.id);
        require(ld.oc == w.rows, ErrorKind::shape_mismatch, "delta rows differ from " + ld.id.name());
        for (const int j : ld.indices) {
            require(j >= 0 && j < w.cols, ErrorKind::out_of_range, "delta index out of range in " + ld.id.name());
        }
        for (int r = 0; r < w.rows; ++r) {
            for (int i = 0; i < ld.k(); ++i) {
                float& v = w(r, ld.indices[i]);
                v = static_cast<float>(static_cast<double>(v) + ld.at(r, i));
            }
        }
    }
    return out;
}

QuantizedModel apply_to_quantized(const QuantizedModel& target, const WeakDelta& delta) {
    check_fingerprint(target.config(), delta);
    QuantizedModel out = target;
    for (const LayerDelta& ld : delta.layers) {
        const std::vector<int> cols = weak_columns_original(target, ld.id);
        const std::vector<int> order = order_by_original(cols);
        std::vector<int> sorted;
        for (const int i : order) {
            sorted.push_back(cols[i]);
        }
        require(sorted == ld.indices, ErrorKind::checkpoint_mismatch,
                "weak index set of " + ld.id.name() + " differs between delta and target");
        const std::vector<int> rows = rows_original(target, ld.id);
        QuantizedLinear& q = out.layer(ld.id).q;
        require(ld.oc == q.oc, ErrorKind::shape_mismatch, "delta rows differ from " + ld.id.name());
        for (int r = 0; r < q.oc; ++r) {
            for (std::size_t s = 0; s < order.size(); ++s) {
                float& v = q.weak(r, order[s]);
                v = static_cast<float>(static_cast<double>(v) + ld.at(rows[r], static_cast<int>(s)));
            }
        }
    }
    return out;
}

WeakDelta negate(const WeakDelta& d) {
    WeakDelta n = d;
    for (LayerDelta& ld : n.layers) {
        for (double& v : ld.delta) {
            v = -v;
        }
    }
    return n;
}

} // namespace qeft
