#pragma once

#include "qeft/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace qeft {

enum class Layout : std::uint8_t {
    structured = 0, // weak columns are the trailing k input channels
    irregular = 1,  // weak columns stay at their original positions
};

enum class QuantMode : std::uint8_t { optq = 0, rtn = 1 };

const char* to_string(Layout l);
const char* to_string(QuantMode m);

struct GroupParams {
    float scale = 1.0f;
    float zero = 0.0f;

    friend bool operator==(const GroupParams&, const GroupParams&) = default;
};

inline int max_code(int bits) { return (1 << bits) - 1; }
std::uint8_t quantize_value(float w, GroupParams p, int bits);
inline float dequantize_value(std::uint8_t code, GroupParams p) { return static_cast<float>(code) * p.scale + p.zero; }

// Min-max range shrunk around its midpoint by alpha; alpha = 1 is plain min-max.
GroupParams range_params(std::span<const float> w, int bits, float alpha = 1.0f);
double group_error(std::span<const float> w, GroupParams p, int bits);

struct GroupQuant {
    std::vector<std::uint8_t> codes;
    GroupParams params;
};

GroupQuant rtn_quantize_group(std::span<const float> w, int bits);

struct GridOptions {
    int steps = 100;
    float alpha_min = 0.5f;

    friend bool operator==(const GridOptions&, const GridOptions&) = default;
};

// Grid over alpha in [alpha_min, 1] minimizing the group's squared
// reconstruction error. alpha = 1 is always on the grid.
GroupParams grid_search_group_params(std::span<const float> w, int bits, const GridOptions& opt = {});
std::vector<float> grid_alphas(const GridOptions& opt);

struct OptqResult {
    std::vector<std::uint8_t> codes; // oc x m
    bool fallback = false;           // Cholesky failed; codes are independent rounding
};

// Greedy column-order rounding with inverse-Hessian error feedback.
// `hessian` is m x m row-major; `params` holds oc x ceil(m / group_size)
// pre-searched group parameters.
OptqResult optq_quantize(const Matrix& w, std::span<const double> hessian, std::span<const GroupParams> params,
                         int bits, int group_size, double damp = 0.01);

// Independent nearest rounding under fixed group params.
std::vector<std::uint8_t> round_to_params(const Matrix& w, std::span<const GroupParams> params, int bits,
                                          int group_size);

struct QuantizedLinear {
    int oc = 0;
    int ic = 0;
    int k = 0;
    int bits = 4;
    int group_size = 32;
    Layout layout = Layout::structured;
    std::vector<std::uint8_t> packed; // oc rows of packed_row_bytes(ic - k, bits)
    std::vector<float> scales;        // oc x groups_per_row()
    std::vector<float> zeros;
    Matrix weak;                      // oc x k
    std::vector<int> weak_indices;    // sorted, layer-local input coordinates
    bool optq_fallback = false;

    int dense_cols() const { return ic - k; }
    int groups_per_row() const;
    int row_bytes() const;
    // Input channel of every quantized column, ascending.
    std::vector<int> dense_indices() const;
    GroupParams group(int row, int g) const {
        const std::size_t i = static_cast<std::size_t>(row) * groups_per_row() + g;
        return {scales[i], zeros[i]};
    }

    friend bool operator==(const QuantizedLinear&, const QuantizedLinear&) = default;
};

struct QuantizeOptions {
    int bits = 4;
    int group_size = 32; // <= 0 means one group per row (per-channel)
    QuantMode mode = QuantMode::optq;
    GridOptions grid{};
    double damp = 0.01;
    Layout layout = Layout::structured;

    friend bool operator==(const QuantizeOptions&, const QuantizeOptions&) = default;
};

// W is OC x IC in the layer's local coordinates. `hessian` (IC x IC, mean
// 2XX^T) is required for optq and ignored for rtn. Structured layout
// requires weak_indices == {IC-k, ..., IC-1}.
QuantizedLinear quantize_layer(const Matrix& w, std::span<const int> weak_indices, std::span<const double> hessian,
                               const QuantizeOptions& opt);

// OC x IC reconstruction in the layer's local coordinates.
Matrix dequantize(const QuantizedLinear& q);

struct LayerError {
    double exact = 0.0;  // sum_i ||W_i X - What_i X||^2
    double approx = 0.0; // sum_i dW_i (X X^T) dW_i^T
    double ratio = 1.0;  // exact / approx
};

// X is IC x T (trace orientation).
LayerError layer_error(const Matrix& w, const QuantizedLinear& q, const Matrix& x);
LayerError layer_error(const Matrix& w, const Matrix& w_hat, const Matrix& x);

void validate(const QuantizedLinear& q);

} // namespace qeft
