#include "qeft/kernels.hpp"

#include "qeft/error.hpp"
#include "qeft/pack.hpp"

#include <algorithm>

namespace qeft {

namespace {

// Row-parallel only when a call carries enough work to amortize the fork.
constexpr long long kRowParallelWork = 1 << 16;

inline std::uint8_t code4(const std::uint8_t* row, int c) { return (row[c >> 1] >> ((c & 1) << 2)) & 0x0f; }

float structured_row(const QuantizedLinear& q, int r, const float* x) {
    const int m = q.dense_cols();
    const int gs = q.group_size;
    const int gpr = q.groups_per_row();
    const std::uint8_t* row = q.packed.data() + static_cast<std::size_t>(r) * q.row_bytes();
    const float* scales = q.scales.data() + static_cast<std::size_t>(r) * gpr;
    const float* zeros = q.zeros.data() + static_cast<std::size_t>(r) * gpr;
    float acc_q = 0.0f;
    for (int g = 0; g < gpr; ++g) {
        const float s = scales[g];
        const float z = zeros[g];
        const int c0 = g * gs;
        const int c1 = std::min(m, c0 + gs);
        if (q.bits == 4) {
            for (int c = c0; c < c1; ++c) {
                acc_q += (static_cast<float>(code4(row, c)) * s + z) * x[c];
            }
        } else {
            for (int c = c0; c < c1; ++c) {
                acc_q += (static_cast<float>(packed_code_at(row, c, q.bits)) * s + z) * x[c];
            }
        }
    }
    float acc_w = 0.0f;
    const float* w = q.weak.ptr(r, 0);
    const float* xw = x + m;
    for (int i = 0; i < q.k; ++i) {
        acc_w += w[i] * xw[i];
    }
    return acc_q + acc_w;
}

float irregular_row(const QuantizedLinear& q, int r, const float* x) {
    const int gs = q.group_size;
    const int gpr = q.groups_per_row();
    const std::uint8_t* row = q.packed.data() + static_cast<std::size_t>(r) * q.row_bytes();
    const float* scales = q.scales.data() + static_cast<std::size_t>(r) * gpr;
    const float* zeros = q.zeros.data() + static_cast<std::size_t>(r) * gpr;
    const float* w = q.k > 0 ? q.weak.ptr(r, 0) : nullptr;
    const int* widx = q.weak_indices.data();
    float acc_q = 0.0f;
    float acc_w = 0.0f;
    int c = 0;
    int wi = 0;
    for (int j = 0; j < q.ic; ++j) {
        if (wi < q.k && widx[wi] == j) {
            acc_w += w[wi] * x[j];
            ++wi;
        } else {
            const int g = c / gs;
            const std::uint8_t code = q.bits == 4 ? code4(row, c) : packed_code_at(row, c, q.bits);
            acc_q += (static_cast<float>(code) * scales[g] + zeros[g]) * x[j];
            ++c;
        }
    }
    return acc_q + acc_w;
}

template <typename RowFn>
void run_rows(const QuantizedLinear& q, std::span<float> y, Exec exec, RowFn fn) {
    const long long work = static_cast<long long>(q.oc) * q.ic;
    if (exec == Exec::parallel && work >= kRowParallelWork) {
#pragma omp parallel for schedule(static)
        for (int r = 0; r < q.oc; ++r) {
            y[r] = fn(r);
        }
    } else {
        for (int r = 0; r < q.oc; ++r) {
            y[r] = fn(r);
        }
    }
}

void check_io(const QuantizedLinear& q, std::size_t xn, std::size_t yn, const char* where) {
    require(xn == static_cast<std::size_t>(q.ic) && yn == static_cast<std::size_t>(q.oc), ErrorKind::shape_mismatch,
            std::string(where) + ": vector length mismatch");
}

} // namespace

const char* to_string(KernelPath p) {
    switch (p) {
    case KernelPath::structured: return "structured";
    case KernelPath::irregular: return "irregular";
    case KernelPath::online_reorder: return "online";
    case KernelPath::reference: return "reference";
    }
    return "?";
}

std::optional<KernelPath> parse_kernel_path(const std::string& s) {
    if (s == "structured") return KernelPath::structured;
    if (s == "irregular") return KernelPath::irregular;
    if (s == "online" || s == "online_reorder") return KernelPath::online_reorder;
    if (s == "reference") return KernelPath::reference;
    return std::nullopt;
}

KernelStats analytic_stats(const QuantizedLinear& q, KernelPath path) {
    KernelStats s;
    s.path = path;
    s.calls = 1;
    s.fma = static_cast<long long>(q.oc) * q.ic;
    const long long per_row = q.row_bytes() + static_cast<long long>(q.groups_per_row()) * 2 * sizeof(float) +
                              static_cast<long long>(q.k) * sizeof(float);
    s.bytes_read = static_cast<long long>(q.oc) * per_row;
    switch (path) {
    case KernelPath::structured: break;
    case KernelPath::irregular: s.bytes_read += static_cast<long long>(q.oc) * q.k * sizeof(int); break;
    case KernelPath::online_reorder: s.bytes_read += static_cast<long long>(q.ic) * sizeof(int); break;
    case KernelPath::reference: s.bytes_read += static_cast<long long>(q.oc) * q.ic * sizeof(float); break;
    }
    return s;
}

void matvec_structured(const QuantizedLinear& q, std::span<const float> x, std::span<float> y, Exec exec) {
    require(q.layout == Layout::structured, ErrorKind::invalid_argument, "matvec_structured: layer is not structured");
    check_io(q, x.size(), y.size(), "matvec_structured");
    run_rows(q, y, exec, [&](int r) { return structured_row(q, r, x.data()); });
}

void matvec_irregular(const QuantizedLinear& q, std::span<const float> x, std::span<float> y, Exec exec) {
    require(q.layout == Layout::irregular, ErrorKind::invalid_argument, "matvec_irregular: layer is not irregular");
    check_io(q, x.size(), y.size(), "matvec_irregular");
    run_rows(q, y, exec, [&](int r) { return irregular_row(q, r, x.data()); });
}

void matvec_online_reorder(const QuantizedLinear& q, std::span<const float> x_original, const Permutation& perm,
                           std::span<float> y, Exec exec) {
    require(perm.size() == q.ic, ErrorKind::shape_mismatch, "matvec_online_reorder: permutation does not match IC");
    check_io(q, x_original.size(), y.size(), "matvec_online_reorder");
    std::vector<float> xp(q.ic);
    const auto& fwd = perm.forward();
    for (int i = 0; i < q.ic; ++i) {
        xp[i] = x_original[fwd[i]];
    }
    matvec_structured(q, xp, y, exec);
}

void matvec_reference(const QuantizedLinear& q, std::span<const float> x, std::span<float> y) {
    check_io(q, x.size(), y.size(), "matvec_reference");
    const Matrix w = dequantize(q);
    for (int r = 0; r < q.oc; ++r) {
        double acc = 0.0;
        for (int j = 0; j < q.ic; ++j) {
            acc += static_cast<double>(w(r, j)) * x[j];
        }
        y[r] = static_cast<float>(acc);
    }
}

std::vector<float> matvec(const QuantizedLinear& q, std::span<const float> x, KernelPath path,
                          const Permutation* perm, Exec exec) {
    std::vector<float> y(q.oc);
    switch (path) {
    case KernelPath::structured: matvec_structured(q, x, y, exec); break;
    case KernelPath::irregular: matvec_irregular(q, x, y, exec); break;
    case KernelPath::online_reorder:
        require(perm != nullptr, ErrorKind::invalid_argument, "online reorder path needs a permutation");
        matvec_online_reorder(q, x, *perm, y, exec);
        break;
    case KernelPath::reference:
        if (perm != nullptr) {
            std::vector<float> xp(q.ic);
            for (int i = 0; i < q.ic; ++i) {
                xp[i] = x[perm->old_of(i)];
            }
            matvec_reference(q, xp, y);
        } else {
            matvec_reference(q, x, y);
        }
        break;
    }
    return y;
}

Matrix matmul_quantized(const QuantizedLinear& q, const Matrix& x, KernelPath path, const Permutation* perm) {
    require(x.cols == q.ic, ErrorKind::shape_mismatch, "matmul_quantized: input width differs from IC");
    Matrix y(x.rows, q.oc);
    if (path == KernelPath::reference) {
        for (int t = 0; t < x.rows; ++t) {
            const auto yt = matvec(q, x.row(t), path, perm, Exec::serial);
            std::copy(yt.begin(), yt.end(), y.row(t).begin());
        }
        return y;
    }
    if (path == KernelPath::online_reorder) {
        require(perm != nullptr, ErrorKind::invalid_argument, "online reorder path needs a permutation");
    }
    const long long work = static_cast<long long>(x.rows) * q.oc * q.ic;
#pragma omp parallel for schedule(static) if (work >= kRowParallelWork && x.rows > 1)
    for (int t = 0; t < x.rows; ++t) {
        auto yt = y.row(t);
        const auto xt = x.row(t);
        switch (path) {
        case KernelPath::structured: matvec_structured(q, xt, yt, Exec::serial); break;
        case KernelPath::irregular: matvec_irregular(q, xt, yt, Exec::serial); break;
        case KernelPath::online_reorder: matvec_online_reorder(q, xt, *perm, yt, Exec::serial); break;
        case KernelPath::reference: break;
        }
    }
    return y;
}

StructuredView to_structured(const QuantizedLinear& irregular) {
    StructuredView v{irregular, weak_to_tail(irregular.ic, irregular.weak_indices)};
    v.q.layout = Layout::structured;
    for (int i = 0; i < v.q.k; ++i) {
        v.q.weak_indices[i] = v.q.ic - v.q.k + i;
    }
    return v;
}

} // namespace qeft
