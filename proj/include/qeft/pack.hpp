#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace qeft {

// Bytes per packed row of m codes.
int packed_row_bytes(int m, int bits);

// Row-major; each row is a little-endian bitstream (code c occupies bits
// [c*bits, (c+1)*bits) of the row) padded to a byte boundary. For 4-bit
// codes the even column sits in the low nibble.
std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int oc, int m, int bits);
std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, int oc, int m, int bits);

// Single code from one packed row.
inline std::uint8_t packed_code_at(const std::uint8_t* row, int col, int bits) {
    const int bit = col * bits;
    const int byte = bit >> 3;
    const int shift = bit & 7;
    unsigned v = row[byte] >> shift;
    if (shift + bits > 8) {
        v |= static_cast<unsigned>(row[byte + 1]) << (8 - shift);
    }
    return static_cast<std::uint8_t>(v & ((1u << bits) - 1u));
}

} // namespace qeft
