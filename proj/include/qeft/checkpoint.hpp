#pragma once

#include "qeft/merging.hpp"
#include "qeft/model.hpp"
#include "qeft/qmodel.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace qeft {

// Container layout (little-endian):
//   "QEFT" u16 version u32 record_count
//   per record: u8 tag, u16 name_len, name, u8 ndims, u32 dims[ndims], u8 bits,
//               u32 group_size, u32 k, u8 layout, u32 payload_count,
//               per payload: u64 length, bytes
//   u32 CRC32 of everything before it
constexpr std::uint16_t kContainerVersion = 1;

enum class RecordTag : std::uint8_t { tensor = 1, quantized = 2, index = 3, metadata = 4, delta = 5 };

struct Record {
    RecordTag tag = RecordTag::tensor;
    std::string name;
    std::vector<std::uint32_t> dims;
    std::uint8_t bits = 32;
    std::uint32_t group_size = 0;
    std::uint32_t k = 0;
    std::uint8_t layout = 0;
    std::vector<std::vector<std::uint8_t>> payloads;

    friend bool operator==(const Record&, const Record&) = default;
};

std::vector<std::uint8_t> encode_container(const std::vector<Record>& records);
// Throws bad_magic, unsupported_version, truncated, checksum_mismatch or format.
std::vector<Record> decode_container(std::span<const std::uint8_t> bytes);

// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file_bytes(const std::string& path);

using Metadata = std::map<std::string, std::string>;

enum class CheckpointKind : std::uint8_t { dense, quantized, delta, plan };
const char* to_string(CheckpointKind k);

struct Checkpoint {
    CheckpointKind kind = CheckpointKind::dense;
    Metadata metadata;
    std::optional<DenseModel> dense;
    std::optional<QuantizedModel> quantized;
    std::optional<WeakDelta> delta;
    std::optional<ReorderPlan> plan;
};

std::vector<Record> to_records(const DenseModel& m, const Metadata& meta = {});
std::vector<Record> to_records(const QuantizedModel& m, const Metadata& meta = {});
std::vector<Record> to_records(const WeakDelta& d, const Metadata& meta = {});
std::vector<Record> to_records(const ReorderPlan& p, const ModelConfig& c, const Metadata& meta = {});
Checkpoint from_records(const std::vector<Record>& records);

void save_checkpoint(const std::string& path, const DenseModel& m, const Metadata& meta = {});
void save_checkpoint(const std::string& path, const QuantizedModel& m, const Metadata& meta = {});
void save_checkpoint(const std::string& path, const WeakDelta& d, const Metadata& meta = {});
void save_plan(const std::string& path, const ReorderPlan& p, const ModelConfig& c, const Metadata& meta = {});
Checkpoint load_checkpoint(const std::string& path);

// Kind-checked loaders; a wrong kind raises ErrorKind::checkpoint_mismatch.
DenseModel load_dense(const std::string& path);
QuantizedModel load_quantized(const std::string& path);
WeakDelta load_delta(const std::string& path);
ReorderPlan load_plan(const std::string& path);

} // namespace qeft
