#pragma once

#include "qeft/quantizer.hpp"
#include "qeft/reorder.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace qeft {

enum class KernelPath : std::uint8_t { structured, irregular, online_reorder, reference };

const char* to_string(KernelPath p);
std::optional<KernelPath> parse_kernel_path(const std::string& s);

enum class Exec : std::uint8_t { serial, parallel };

struct KernelStats {
    long long elapsed_ns = 0;
    long long bytes_read = 0; // analytic weight bytes touched
    long long fma = 0;
    long long calls = 0;
    KernelPath path = KernelPath::structured;

    void merge(const KernelStats& o) {
        elapsed_ns += o.elapsed_ns;
        bytes_read += o.bytes_read;
        fma += o.fma;
        calls += o.calls;
    }
};

// Bytes and multiply-adds of one matvec call; elapsed_ns is left at 0.
KernelStats analytic_stats(const QuantizedLinear& q, KernelPath path);

// y = W_quant * x[0, IC-k) + W_weak * x[IC-k, IC): one pass per row,
// dequantize-and-accumulate then the weak block.
void matvec_structured(const QuantizedLinear& q, std::span<const float> x, std::span<float> y,
                       Exec exec = Exec::parallel);
// Walks the original column order, branching on every weak index.
void matvec_irregular(const QuantizedLinear& q, std::span<const float> x, std::span<float> y,
                      Exec exec = Exec::parallel);
// Gathers x into the layer's reordered channel order (p[new] = old) first.
void matvec_online_reorder(const QuantizedLinear& q, std::span<const float> x_original, const Permutation& perm,
                           std::span<float> y, Exec exec = Exec::parallel);
// Full dequantization, then a serial 64-bit accumulated product.
void matvec_reference(const QuantizedLinear& q, std::span<const float> x, std::span<float> y);

std::vector<float> matvec(const QuantizedLinear& q, std::span<const float> x, KernelPath path,
                          const Permutation* perm = nullptr, Exec exec = Exec::parallel);

// Token-major batch (T x IC): one matvec per token, tokens in parallel.
Matrix matmul_quantized(const QuantizedLinear& q, const Matrix& x, KernelPath path, const Permutation* perm = nullptr);

// Same weights viewed with the weak block moved to the tail; x must be
// permuted by the returned permutation to use it.
struct StructuredView {
    QuantizedLinear q;
    Permutation perm;
};
StructuredView to_structured(const QuantizedLinear& irregular);

} // namespace qeft
