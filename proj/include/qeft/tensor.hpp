#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace qeft {

// Row-major float matrix. Activations are token-major (tokens x channels);
// linear weights are output-channel-major (OC x IC).
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int r, int c, float fill = 0.0f)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

    float& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    float operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    float* ptr(int r, int c) { return data.data() + static_cast<std::size_t>(r) * cols + c; }
    const float* ptr(int r, int c) const { return data.data() + static_cast<std::size_t>(r) * cols + c; }

    std::span<float> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
    std::span<const float> row(int r) const {
        return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    friend bool operator==(const Matrix&, const Matrix&) = default;
};

Matrix transpose(const Matrix& m);

// Y = X * W^T  (X: n x in, W: out x in) -> n x out. Rows run in parallel.
Matrix matmul_nt(const Matrix& x, const Matrix& w);
// Y = A * B  (A: n x m, B: m x p) -> n x p.
Matrix matmul_nn(const Matrix& a, const Matrix& b);
// G += DY^T * X  (DY: n x out, X: n x in, G: out x in).
void matmul_tn_accumulate(Matrix& g, const Matrix& dy, const Matrix& x);

// Serial 64-bit accumulation oracle for matmul_nt.
Matrix matmul_nt_reference(const Matrix& x, const Matrix& w);

void add_inplace(Matrix& a, const Matrix& b);
void scale_inplace(Matrix& a, float s);
bool all_finite(std::span<const float> v);

// max_i |a_i - b_i| / max_i |b_i|; 0 when both are zero.
double max_rel_error(std::span<const float> a, std::span<const float> b);
double max_abs_diff(std::span<const float> a, std::span<const float> b);

using Rng = std::mt19937_64;

void fill_normal(Matrix& m, Rng& rng, float stddev);
void fill_uniform(Matrix& m, Rng& rng, float lo, float hi);

} // namespace qeft
