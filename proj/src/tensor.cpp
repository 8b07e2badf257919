#include "qeft/tensor.hpp"

#include "qeft/error.hpp"

#include <algorithm>
#include <cmath>

namespace qeft {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr long long kParallelWork = 1 << 15;

} // namespace

Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            t(c, r) = m(r, c);
        }
    }
    return t;
}

Matrix matmul_nt(const Matrix& x, const Matrix& w) {
    require(x.cols == w.cols, ErrorKind::shape_mismatch, "matmul_nt: inner dimensions differ");
    const Matrix wt = transpose(w);
    Matrix y(x.rows, w.rows);
    const int n = x.rows;
    const int in = x.cols;
    const int out = w.rows;
    const long long work = static_cast<long long>(n) * in * out;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int t = 0; t < n; ++t) {
        float* yr = y.data.data() + static_cast<std::size_t>(t) * out;
        const float* xr = x.data.data() + static_cast<std::size_t>(t) * in;
        for (int i = 0; i < in; ++i) {
            const float xv = xr[i];
            const float* wr = wt.data.data() + static_cast<std::size_t>(i) * out;
            for (int o = 0; o < out; ++o) {
                yr[o] += xv * wr[o];
            }
        }
    }
    return y;
}

Matrix matmul_nn(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, ErrorKind::shape_mismatch, "matmul_nn: inner dimensions differ");
    Matrix y(a.rows, b.cols);
    const int n = a.rows;
    const int m = a.cols;
    const int p = b.cols;
    const long long work = static_cast<long long>(n) * m * p;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int t = 0; t < n; ++t) {
        float* yr = y.data.data() + static_cast<std::size_t>(t) * p;
        const float* ar = a.data.data() + static_cast<std::size_t>(t) * m;
        for (int i = 0; i < m; ++i) {
            const float av = ar[i];
            if (av == 0.0f) {
                continue;
            }
            const float* br = b.data.data() + static_cast<std::size_t>(i) * p;
            for (int j = 0; j < p; ++j) {
                yr[j] += av * br[j];
            }
        }
    }
    return y;
}

void matmul_tn_accumulate(Matrix& g, const Matrix& dy, const Matrix& x) {
    require(dy.rows == x.rows && g.rows == dy.cols && g.cols == x.cols, ErrorKind::shape_mismatch,
            "matmul_tn_accumulate: shape mismatch");
    const int n = dy.rows;
    const int out = dy.cols;
    const int in = x.cols;
    const long long work = static_cast<long long>(n) * in * out;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int o = 0; o < out; ++o) {
        float* gr = g.data.data() + static_cast<std::size_t>(o) * in;
        for (int t = 0; t < n; ++t) {
            const float d = dy(t, o);
            if (d == 0.0f) {
                continue;
            }
            const float* xr = x.data.data() + static_cast<std::size_t>(t) * in;
            for (int i = 0; i < in; ++i) {
                gr[i] += d * xr[i];
            }
        }
    }
}

Matrix matmul_nt_reference(const Matrix& x, const Matrix& w) {
    require(x.cols == w.cols, ErrorKind::shape_mismatch, "matmul_nt_reference: inner dimensions differ");
    Matrix y(x.rows, w.rows);
    for (int t = 0; t < x.rows; ++t) {
        for (int o = 0; o < w.rows; ++o) {
            double acc = 0.0;
            for (int i = 0; i < x.cols; ++i) {
                acc += static_cast<double>(x(t, i)) * static_cast<double>(w(o, i));
            }
            y(t, o) = static_cast<float>(acc);
        }
    }
    return y;
}

void add_inplace(Matrix& a, const Matrix& b) {
    require(a.same_shape(b), ErrorKind::shape_mismatch, "add_inplace: shape mismatch");
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] += b.data[i];
    }
}

void scale_inplace(Matrix& a, float s) {
    for (float& v : a.data) {
        v *= s;
    }
}

bool all_finite(std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

double max_rel_error(std::span<const float> a, std::span<const float> b) {
    require(a.size() == b.size(), ErrorKind::shape_mismatch, "max_rel_error: length mismatch");
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
        den = std::max(den, std::abs(static_cast<double>(b[i])));
    }
    if (num == 0.0) {
        return 0.0;
    }
    return den == 0.0 ? num : num / den;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    require(a.size() == b.size(), ErrorKind::shape_mismatch, "max_abs_diff: length mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

void fill_normal(Matrix& m, Rng& rng, float stddev) {
    std::normal_distribution<float> dist(0.0f, stddev);
    for (float& v : m.data) {
        v = dist(rng);
    }
}

void fill_uniform(Matrix& m, Rng& rng, float lo, float hi) {
    std::uniform_real_distribution<float> dist(lo, hi);
    for (float& v : m.data) {
        v = dist(rng);
    }
}

const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::invalid_config: return "invalid configuration";
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::shape_mismatch: return "shape mismatch";
    case ErrorKind::out_of_range: return "out of range";
    case ErrorKind::io: return "i/o error";
    case ErrorKind::bad_magic: return "bad magic";
    case ErrorKind::unsupported_version: return "unsupported version";
    case ErrorKind::truncated: return "truncated file";
    case ErrorKind::checksum_mismatch: return "checksum mismatch";
    case ErrorKind::format: return "malformed file";
    case ErrorKind::checkpoint_mismatch: return "checkpoint mismatch";
    case ErrorKind::not_descendant: return "not a weak-column descendant";
    case ErrorKind::numeric: return "numeric failure";
    }
    return "unknown error";
}

} // namespace qeft
