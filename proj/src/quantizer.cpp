#include "qeft/quantizer.hpp"

#include "qeft/error.hpp"
#include "qeft/pack.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace qeft {

namespace {

using DMat = std::vector<double>; // n x n row-major

std::optional<DMat> cholesky_lower(const DMat& a, int n) {
    DMat l(static_cast<std::size_t>(n) * n, 0.0);
    for (int j = 0; j < n; ++j) {
        double d = a[static_cast<std::size_t>(j) * n + j];
        for (int p = 0; p < j; ++p) {
            d -= l[static_cast<std::size_t>(j) * n + p] * l[static_cast<std::size_t>(j) * n + p];
        }
        if (!(d > 0.0) || !std::isfinite(d)) {
            return std::nullopt;
        }
        const double ljj = std::sqrt(d);
        l[static_cast<std::size_t>(j) * n + j] = ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = a[static_cast<std::size_t>(i) * n + j];
            for (int p = 0; p < j; ++p) {
                s -= l[static_cast<std::size_t>(i) * n + p] * l[static_cast<std::size_t>(j) * n + p];
            }
            l[static_cast<std::size_t>(i) * n + j] = s / ljj;
        }
    }
    return l;
}

// Inverse of a lower-triangular matrix.
DMat lower_inverse(const DMat& l, int n) {
    DMat inv(static_cast<std::size_t>(n) * n, 0.0);
    for (int j = 0; j < n; ++j) {
        inv[static_cast<std::size_t>(j) * n + j] = 1.0 / l[static_cast<std::size_t>(j) * n + j];
        for (int i = j + 1; i < n; ++i) {
            double s = 0.0;
            for (int p = j; p < i; ++p) {
                s += l[static_cast<std::size_t>(i) * n + p] * inv[static_cast<std::size_t>(p) * n + j];
            }
            inv[static_cast<std::size_t>(i) * n + j] = -s / l[static_cast<std::size_t>(i) * n + i];
        }
    }
    return inv;
}

// Upper factor U of H^-1 = U^T U, after damping.
std::optional<DMat> inverse_hessian_upper(std::span<const double> hessian, int n, double damp) {
    DMat h(hessian.begin(), hessian.end());
    double mean_diag = 0.0;
    for (int j = 0; j < n; ++j) {
        mean_diag += h[static_cast<std::size_t>(j) * n + j];
    }
    mean_diag /= n;
    if (mean_diag <= 0.0) {
        mean_diag = 1.0;
    }
    for (int j = 0; j < n; ++j) {
        double& d = h[static_cast<std::size_t>(j) * n + j];
        if (d == 0.0) {
            d = 1.0;
        }
        d += damp * mean_diag;
    }
    const auto l = cholesky_lower(h, n);
    if (!l) {
        return std::nullopt;
    }
    const DMat li = lower_inverse(*l, n);
    DMat hinv(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int p = i; p < n; ++p) {
                s += li[static_cast<std::size_t>(p) * n + i] * li[static_cast<std::size_t>(p) * n + j];
            }
            hinv[static_cast<std::size_t>(i) * n + j] = s;
            hinv[static_cast<std::size_t>(j) * n + i] = s;
        }
    }
    const auto lc = cholesky_lower(hinv, n);
    if (!lc) {
        return std::nullopt;
    }
    DMat u(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            u[static_cast<std::size_t>(j) * n + i] = (*lc)[static_cast<std::size_t>(i) * n + j];
        }
    }
    return u;
}

int group_count(int m, int g) { return m == 0 ? 0 : (m + g - 1) / g; }

void check_finite(std::span<const float> w, const char* where) {
    require(all_finite(w), ErrorKind::numeric, std::string(where) + ": non-finite weights");
}

} // namespace

const char* to_string(Layout l) { return l == Layout::structured ? "structured" : "irregular"; }
const char* to_string(QuantMode m) { return m == QuantMode::optq ? "optq" : "rtn"; }

std::uint8_t quantize_value(float w, GroupParams p, int bits) {
    const float q = std::round((w - p.zero) / p.scale);
    const float c = std::clamp(q, 0.0f, static_cast<float>(max_code(bits)));
    return static_cast<std::uint8_t>(c);
}

GroupParams range_params(std::span<const float> w, int bits, float alpha) {
    require(!w.empty(), ErrorKind::invalid_argument, "range_params: empty group");
    const auto [mn_it, mx_it] = std::minmax_element(w.begin(), w.end());
    const float mn = *mn_it;
    const float mx = *mx_it;
    if (mx == mn) {
        return {1.0f, mn};
    }
    GroupParams p;
    if (alpha == 1.0f) {
        p.scale = (mx - mn) / static_cast<float>(max_code(bits));
        p.zero = mn;
    } else {
        const float mid = 0.5f * (mx + mn);
        const float half = 0.5f * (mx - mn) * alpha;
        p.scale = (2.0f * half) / static_cast<float>(max_code(bits));
        p.zero = mid - half;
    }
    if (!(p.scale > 0.0f)) {
        p.scale = 1.0f;
    }
    return p;
}

double group_error(std::span<const float> w, GroupParams p, int bits) {
    double e = 0.0;
    for (float v : w) {
        const double d = static_cast<double>(v) - dequantize_value(quantize_value(v, p, bits), p);
        e += d * d;
    }
    return e;
}

GroupQuant rtn_quantize_group(std::span<const float> w, int bits) {
    require(!w.empty(), ErrorKind::invalid_argument, "rtn_quantize_group: empty group");
    check_finite(w, "rtn_quantize_group");
    GroupQuant g;
    g.params = range_params(w, bits, 1.0f);
    g.codes.reserve(w.size());
    for (float v : w) {
        g.codes.push_back(quantize_value(v, g.params, bits));
    }
    return g;
}

std::vector<float> grid_alphas(const GridOptions& opt) {
    require(opt.steps >= 1, ErrorKind::invalid_argument, "grid search: grid_steps must be >= 1");
    require(opt.alpha_min > 0.0f && opt.alpha_min <= 1.0f, ErrorKind::invalid_argument,
            "grid search: alpha_min must be in (0, 1]");
    std::vector<float> a;
    if (opt.steps == 1) {
        a.push_back(1.0f);
        return a;
    }
    for (int i = 0; i < opt.steps - 1; ++i) {
        a.push_back(opt.alpha_min + static_cast<float>(i) * (1.0f - opt.alpha_min) / static_cast<float>(opt.steps - 1));
    }
    a.push_back(1.0f);
    return a;
}

GroupParams grid_search_group_params(std::span<const float> w, int bits, const GridOptions& opt) {
    check_finite(w, "grid_search_group_params");
    const auto alphas = grid_alphas(opt);
    // alpha = 1 first; later candidates must be strictly better.
    GroupParams best = range_params(w, bits, 1.0f);
    double best_err = group_error(w, best, bits);
    for (auto it = alphas.rbegin() + 1; it != alphas.rend(); ++it) {
        const GroupParams p = range_params(w, bits, *it);
        const double e = group_error(w, p, bits);
        if (e < best_err) {
            best_err = e;
            best = p;
        }
    }
    return best;
}

std::vector<std::uint8_t> round_to_params(const Matrix& w, std::span<const GroupParams> params, int bits,
                                          int group_size) {
    const int m = w.cols;
    const int gpr = group_count(m, group_size);
    require(params.size() == static_cast<std::size_t>(w.rows) * gpr, ErrorKind::shape_mismatch,
            "round_to_params: group parameter count mismatch");
    std::vector<std::uint8_t> codes(static_cast<std::size_t>(w.rows) * m);
    for (int r = 0; r < w.rows; ++r) {
        for (int c = 0; c < m; ++c) {
            codes[static_cast<std::size_t>(r) * m + c] =
                quantize_value(w(r, c), params[static_cast<std::size_t>(r) * gpr + c / group_size], bits);
        }
    }
    return codes;
}

OptqResult optq_quantize(const Matrix& w, std::span<const double> hessian, std::span<const GroupParams> params,
                         int bits, int group_size, double damp) {
    const int oc = w.rows;
    const int m = w.cols;
    require(hessian.size() == static_cast<std::size_t>(m) * m, ErrorKind::shape_mismatch,
            "optq_quantize: hessian must be m x m");
    require(group_size >= 1, ErrorKind::invalid_argument, "optq_quantize: group_size must be >= 1");
    const int gpr = group_count(m, group_size);
    require(params.size() == static_cast<std::size_t>(oc) * gpr, ErrorKind::shape_mismatch,
            "optq_quantize: group parameter count mismatch");
    check_finite(w.data, "optq_quantize");

    OptqResult res;
    if (m == 0) {
        return res;
    }
    const auto u = inverse_hessian_upper(hessian, m, damp);
    if (!u) {
        res.codes = round_to_params(w, params, bits, group_size);
        res.fallback = true;
        return res;
    }
    res.codes.assign(static_cast<std::size_t>(oc) * m, 0);
#pragma omp parallel for schedule(static) if (oc * m >= 16384)
    for (int r = 0; r < oc; ++r) {
        std::vector<double> row(w.row(r).begin(), w.row(r).end());
        for (int j = 0; j < m; ++j) {
            const GroupParams p = params[static_cast<std::size_t>(r) * gpr + j / group_size];
            const std::uint8_t c = quantize_value(static_cast<float>(row[j]), p, bits);
            res.codes[static_cast<std::size_t>(r) * m + j] = c;
            const double err = (row[j] - dequantize_value(c, p)) / (*u)[static_cast<std::size_t>(j) * m + j];
            const double* urow = u->data() + static_cast<std::size_t>(j) * m;
            for (int l = j + 1; l < m; ++l) {
                row[l] -= err * urow[l];
            }
        }
    }
    return res;
}

int QuantizedLinear::groups_per_row() const { return group_count(dense_cols(), group_size); }

int QuantizedLinear::row_bytes() const { return packed_row_bytes(dense_cols(), bits); }

std::vector<int> QuantizedLinear::dense_indices() const {
    std::vector<int> out;
    out.reserve(dense_cols());
    std::size_t wi = 0;
    for (int j = 0; j < ic; ++j) {
        if (wi < weak_indices.size() && weak_indices[wi] == j) {
            ++wi;
        } else {
            out.push_back(j);
        }
    }
    return out;
}

void validate(const QuantizedLinear& q) {
    require(q.oc >= 0 && q.ic >= 0 && q.k >= 0 && q.k <= q.ic, ErrorKind::format, "quantized layer: bad dimensions");
    require(q.bits >= 1 && q.bits <= 8, ErrorKind::format, "quantized layer: bits out of range");
    require(q.group_size >= 1, ErrorKind::format, "quantized layer: group size must be >= 1");
    require(static_cast<int>(q.weak_indices.size()) == q.k, ErrorKind::format,
            "quantized layer: weak index count differs from k");
    for (std::size_t i = 0; i < q.weak_indices.size(); ++i) {
        require(q.weak_indices[i] >= 0 && q.weak_indices[i] < q.ic, ErrorKind::format,
                "quantized layer: weak index out of range");
        require(i == 0 || q.weak_indices[i - 1] < q.weak_indices[i], ErrorKind::format,
                "quantized layer: weak indices must be sorted and unique");
    }
    if (q.layout == Layout::structured) {
        for (int i = 0; i < q.k; ++i) {
            require(q.weak_indices[i] == q.ic - q.k + i, ErrorKind::format,
                    "quantized layer: structured layout requires trailing weak columns");
        }
    }
    require(q.packed.size() == static_cast<std::size_t>(q.oc) * q.row_bytes(), ErrorKind::format,
            "quantized layer: packed size mismatch");
    const std::size_t ng = static_cast<std::size_t>(q.oc) * q.groups_per_row();
    require(q.scales.size() == ng && q.zeros.size() == ng, ErrorKind::format,
            "quantized layer: group parameter count mismatch");
    require(q.weak.rows == q.oc && q.weak.cols == q.k, ErrorKind::format, "quantized layer: weak block shape mismatch");
}

QuantizedLinear quantize_layer(const Matrix& w, std::span<const int> weak_indices, std::span<const double> hessian,
                               const QuantizeOptions& opt) {
    const int oc = w.rows;
    const int ic = w.cols;
    const int k = static_cast<int>(weak_indices.size());
    require(k <= ic, ErrorKind::out_of_range, "quantize_layer: k exceeds IC");
    require(opt.bits >= 2 && opt.bits <= 8, ErrorKind::invalid_argument, "quantize_layer: bits must be in [2, 8]");
    check_finite(w.data, "quantize_layer");

    QuantizedLinear q;
    q.oc = oc;
    q.ic = ic;
    q.k = k;
    q.bits = opt.bits;
    q.layout = opt.layout;
    q.weak_indices.assign(weak_indices.begin(), weak_indices.end());
    for (int i = 0; i < k; ++i) {
        require(q.weak_indices[i] >= 0 && q.weak_indices[i] < ic, ErrorKind::out_of_range,
                "quantize_layer: weak index out of range");
        require(i == 0 || q.weak_indices[i - 1] < q.weak_indices[i], ErrorKind::invalid_argument,
                "quantize_layer: weak indices must be sorted and unique");
        if (opt.layout == Layout::structured) {
            require(q.weak_indices[i] == ic - k + i, ErrorKind::invalid_argument,
                    "quantize_layer: structured layout requires the weak columns to be the trailing k");
        }
    }
    const int m = ic - k;
    q.group_size = opt.group_size <= 0 ? std::max(m, 1) : opt.group_size;
    const int gpr = q.groups_per_row();
    const auto dense = q.dense_indices();

    q.weak = Matrix(oc, k);
    for (int r = 0; r < oc; ++r) {
        for (int i = 0; i < k; ++i) {
            q.weak(r, i) = w(r, q.weak_indices[i]);
        }
    }
    Matrix wd(oc, m);
    for (int r = 0; r < oc; ++r) {
        for (int c = 0; c < m; ++c) {
            wd(r, c) = w(r, dense[c]);
        }
    }

    std::vector<GroupParams> params(static_cast<std::size_t>(oc) * gpr);
    for (int r = 0; r < oc; ++r) {
        for (int g = 0; g < gpr; ++g) {
            const int c0 = g * q.group_size;
            const int c1 = std::min(m, c0 + q.group_size);
            const std::span<const float> grp(wd.ptr(r, c0), static_cast<std::size_t>(c1 - c0));
            params[static_cast<std::size_t>(r) * gpr + g] =
                opt.mode == QuantMode::optq ? grid_search_group_params(grp, opt.bits, opt.grid)
                                            : range_params(grp, opt.bits, 1.0f);
        }
    }

    std::vector<std::uint8_t> codes;
    if (opt.mode == QuantMode::optq) {
        require(hessian.size() == static_cast<std::size_t>(ic) * ic, ErrorKind::shape_mismatch,
                "quantize_layer: optq mode needs an IC x IC hessian");
        std::vector<double> hd(static_cast<std::size_t>(m) * m);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < m; ++j) {
                hd[static_cast<std::size_t>(i) * m + j] = hessian[static_cast<std::size_t>(dense[i]) * ic + dense[j]];
            }
        }
        auto res = optq_quantize(wd, hd, params, opt.bits, q.group_size, opt.damp);
        codes = std::move(res.codes);
        q.optq_fallback = res.fallback;
    } else {
        codes = round_to_params(wd, params, opt.bits, q.group_size);
    }
    q.packed = pack_codes(codes, oc, m, opt.bits);
    q.scales.resize(params.size());
    q.zeros.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        q.scales[i] = params[i].scale;
        q.zeros[i] = params[i].zero;
    }
    return q;
}

Matrix dequantize(const QuantizedLinear& q) {
    Matrix w(q.oc, q.ic);
    const auto dense = q.dense_indices();
    const int m = q.dense_cols();
    const int rb = q.row_bytes();
    for (int r = 0; r < q.oc; ++r) {
        const std::uint8_t* row = q.packed.data() + static_cast<std::size_t>(r) * rb;
        for (int c = 0; c < m; ++c) {
            w(r, dense[c]) = dequantize_value(packed_code_at(row, c, q.bits), q.group(r, c / q.group_size));
        }
        for (int i = 0; i < q.k; ++i) {
            w(r, q.weak_indices[i]) = q.weak(r, i);
        }
    }
    return w;
}

LayerError layer_error(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
    require(w.same_shape(w_hat) && x.rows == w.cols, ErrorKind::shape_mismatch, "layer_error: shape mismatch");
    const int oc = w.rows;
    const int ic = w.cols;
    const int T = x.cols;
    LayerError e;
    std::vector<double> dw(static_cast<std::size_t>(ic));
    // X X^T
    std::vector<double> g(static_cast<std::size_t>(ic) * ic, 0.0);
    for (int i = 0; i < ic; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int t = 0; t < T; ++t) {
                s += static_cast<double>(x(i, t)) * x(j, t);
            }
            g[static_cast<std::size_t>(i) * ic + j] = s;
            g[static_cast<std::size_t>(j) * ic + i] = s;
        }
    }
    for (int r = 0; r < oc; ++r) {
        for (int j = 0; j < ic; ++j) {
            dw[j] = static_cast<double>(w(r, j)) - static_cast<double>(w_hat(r, j));
        }
        for (int t = 0; t < T; ++t) {
            double y = 0.0;
            for (int j = 0; j < ic; ++j) {
                y += dw[j] * x(j, t);
            }
            e.exact += y * y;
        }
        for (int i = 0; i < ic; ++i) {
            double s = 0.0;
            for (int j = 0; j < ic; ++j) {
                s += g[static_cast<std::size_t>(i) * ic + j] * dw[j];
            }
            e.approx += dw[i] * s;
        }
    }
    e.ratio = e.approx > 0.0 ? e.exact / e.approx : 1.0;
    return e;
}

LayerError layer_error(const Matrix& w, const QuantizedLinear& q, const Matrix& x) {
    require(w.rows == q.oc && w.cols == q.ic, ErrorKind::shape_mismatch, "layer_error: layer shape mismatch");
    return layer_error(w, dequantize(q), x);
}

} // namespace qeft
