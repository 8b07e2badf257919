#include "qeft/pack.hpp"

#include "qeft/error.hpp"

namespace qeft {

int packed_row_bytes(int m, int bits) { return (m * bits + 7) / 8; }

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int oc, int m, int bits) {
    require(bits >= 1 && bits <= 8, ErrorKind::invalid_argument, "pack_codes: bits must be in [1, 8]");
    require(codes.size() == static_cast<std::size_t>(oc) * m, ErrorKind::shape_mismatch,
            "pack_codes: code count does not match shape");
    const int rb = packed_row_bytes(m, bits);
    const unsigned maxq = (1u << bits) - 1u;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(oc) * rb, 0);
    for (int r = 0; r < oc; ++r) {
        std::uint8_t* row = out.data() + static_cast<std::size_t>(r) * rb;
        for (int c = 0; c < m; ++c) {
            const unsigned code = codes[static_cast<std::size_t>(r) * m + c];
            require(code <= maxq, ErrorKind::out_of_range,
                    "pack_codes: code " + std::to_string(code) + " out of range for " + std::to_string(bits) + " bits");
            const int bit = c * bits;
            const int byte = bit >> 3;
            const int shift = bit & 7;
            row[byte] = static_cast<std::uint8_t>(row[byte] | ((code << shift) & 0xffu));
            if (shift + bits > 8) {
                row[byte + 1] = static_cast<std::uint8_t>(row[byte + 1] | (code >> (8 - shift)));
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, int oc, int m, int bits) {
    require(bits >= 1 && bits <= 8, ErrorKind::invalid_argument, "unpack_codes: bits must be in [1, 8]");
    const int rb = packed_row_bytes(m, bits);
    require(bytes.size() == static_cast<std::size_t>(oc) * rb, ErrorKind::shape_mismatch,
            "unpack_codes: byte count does not match shape");
    std::vector<std::uint8_t> codes(static_cast<std::size_t>(oc) * m);
    for (int r = 0; r < oc; ++r) {
        const std::uint8_t* row = bytes.data() + static_cast<std::size_t>(r) * rb;
        for (int c = 0; c < m; ++c) {
            codes[static_cast<std::size_t>(r) * m + c] = packed_code_at(row, c, bits);
        }
    }
    return codes;
}

} // namespace qeft
