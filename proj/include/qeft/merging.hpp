#pragma once

#include "qeft/qmodel.hpp"

#include <cstdint>
#include <vector>

namespace qeft {

struct LayerDelta {
    LayerId id;
    int oc = 0;
    std::vector<int> indices;  // original input coordinates, ascending
    std::vector<double> delta; // oc x indices.size(), rows in original output order

    int k() const { return static_cast<int>(indices.size()); }
    double at(int r, int i) const { return delta[static_cast<std::size_t>(r) * indices.size() + i]; }
    double& at(int r, int i) { return delta[static_cast<std::size_t>(r) * indices.size() + i]; }

    friend bool operator==(const LayerDelta&, const LayerDelta&) = default;
};

// Weak-column update of a tuned model relative to its base, in original
// (unreordered) coordinates.
struct WeakDelta {
    int k = 0;
    std::uint64_t fingerprint = 0;
    ReorderPlan plan; // plan of the source model
    std::vector<LayerDelta> layers;

    friend bool operator==(const WeakDelta&, const WeakDelta&) = default;
};

// Original input coordinate of every weak column of a layer, in weak-block order.
std::vector<int> weak_columns_original(const QuantizedModel& m, LayerId id);
// Original output coordinate of every row of a layer.
std::vector<int> rows_original(const QuantizedModel& m, LayerId id);

// Throws ErrorKind::not_descendant when anything but the weak blocks differs.
WeakDelta extract_delta(const QuantizedModel& tuned, const QuantizedModel& base);

// Adds the delta in 64-bit and rounds once; all other entries are untouched.
DenseModel apply_to_dense(const DenseModel& target, const WeakDelta& delta);
// Refuses (ErrorKind::checkpoint_mismatch) when a layer's weak index set differs.
QuantizedModel apply_to_quantized(const QuantizedModel& target, const WeakDelta& delta);

WeakDelta negate(const WeakDelta& d);

} // namespace qeft
