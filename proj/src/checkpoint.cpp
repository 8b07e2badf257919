#include "qeft/checkpoint.hpp"

#include "qeft/error.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace qeft {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

class Writer {
public:
    void u8(std::uint8_t v) { buf.push_back(v); }
    void u16(std::uint16_t v) { put(&v, 2); }
    void u32(std::uint32_t v) { put(&v, 4); }
    void u64(std::uint64_t v) { put(&v, 8); }
    void bytes(const void* p, std::size_t n) { put(p, n); }

    std::vector<std::uint8_t> buf;

private:
    void put(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    std::span<const std::uint8_t> take(std::uint64_t n) {
        need(n);
        auto s = b_.subspan(pos_, static_cast<std::size_t>(n));
        pos_ += static_cast<std::size_t>(n);
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return b_.size() - pos_; }

private:
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::uint64_t n) const {
        require(n <= remaining(), ErrorKind::truncated,
                "container truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) + ")");
    }

    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

template <typename T>
std::vector<std::uint8_t> raw_bytes(std::span<const T> v) {
    std::vector<std::uint8_t> out(v.size() * sizeof(T));
    if (!v.empty()) {
        std::memcpy(out.data(), v.data(), out.size());
    }
    return out;
}

std::vector<std::uint8_t> int_bytes(const std::vector<int>& v) {
    std::vector<std::uint32_t> u(v.begin(), v.end());
    return raw_bytes<std::uint32_t>(u);
}

template <typename T>
std::vector<T> from_bytes(const std::vector<std::uint8_t>& b, const std::string& what) {
    require(b.size() % sizeof(T) == 0, ErrorKind::format, what + ": payload length is not a multiple of the element");
    std::vector<T> out(b.size() / sizeof(T));
    if (!out.empty()) {
        std::memcpy(out.data(), b.data(), b.size());
    }
    return out;
}

std::vector<int> ints_from(const std::vector<std::uint8_t>& b, const std::string& what) {
    const auto u = from_bytes<std::uint32_t>(b, what);
    return {u.begin(), u.end()};
}

Record tensor_record(const std::string& name, const Matrix& m) {
    Record r;
    r.tag = RecordTag::tensor;
    r.name = name;
    r.dims = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
    r.payloads.push_back(raw_bytes<float>(m.data));
    return r;
}

Record vector_record(const std::string& name, const std::vector<float>& v) {
    Record r;
    r.tag = RecordTag::tensor;
    r.name = name;
    r.dims = {static_cast<std::uint32_t>(v.size())};
    r.payloads.push_back(raw_bytes<float>(v));
    return r;
}

Record index_record(const std::string& name, const std::vector<int>& v) {
    Record r;
    r.tag = RecordTag::index;
    r.name = name;
    r.dims = {static_cast<std::uint32_t>(v.size())};
    r.payloads.push_back(int_bytes(v));
    return r;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_float(float v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

Record metadata_record(const Metadata& meta) {
    std::string text;
    for (const auto& [k, v] : meta) {
        require(k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
                ErrorKind::invalid_argument, "metadata key/value contains a reserved character: " + k);
        text += k + "=" + v + "\n";
    }
    Record r;
    r.tag = RecordTag::metadata;
    r.name = "meta";
    r.bits = 8;
    r.dims = {static_cast<std::uint32_t>(text.size())};
    r.payloads.emplace_back(text.begin(), text.end());
    return r;
}

Metadata parse_metadata(const Record& r) {
    require(r.payloads.size() == 1, ErrorKind::format, "metadata record must have one payload");
    Metadata m;
    std::istringstream in(std::string(r.payloads[0].begin(), r.payloads[0].end()));
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::format, "malformed metadata line: " + line);
        m[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return m;
}

void put_config(Metadata& m, const ModelConfig& c) {
    m["config.d_model"] = std::to_string(c.d_model);
    m["config.n_heads"] = std::to_string(c.n_heads);
    m["config.head_dim"] = std::to_string(c.head_dim);
    m["config.d_ff"] = std::to_string(c.d_ff);
    m["config.n_blocks"] = std::to_string(c.n_blocks);
    m["config.vocab_size"] = std::to_string(c.vocab_size);
    m["config.max_seq"] = std::to_string(c.max_seq);
    m["config.seed"] = std::to_string(c.seed);
}

const std::string& meta_at(const Metadata& m, const std::string& key) {
    const auto it = m.find(key);
    require(it != m.end(), ErrorKind::format, "checkpoint metadata lacks '" + key + "'");
    return it->second;
}

long long meta_int(const Metadata& m, const std::string& key) {
    const std::string& s = meta_at(m, key);
    try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        require(used == s.size(), ErrorKind::format, "metadata '" + key + "' is not an integer");
        return v;
    } catch (const std::logic_error&) {
        fail(ErrorKind::format, "metadata '" + key + "' is not an integer: " + s);
    }
}

std::uint64_t meta_u64(const Metadata& m, const std::string& key) {
    const std::string& s = meta_at(m, key);
    try {
        return std::stoull(s);
    } catch (const std::logic_error&) {
        fail(ErrorKind::format, "metadata '" + key + "' is not an unsigned integer: " + s);
    }
}

double meta_double(const Metadata& m, const std::string& key) {
    const std::string& s = meta_at(m, key);
    try {
        return std::stod(s);
    } catch (const std::logic_error&) {
        fail(ErrorKind::format, "metadata '" + key + "' is not a number: " + s);
    }
}

ModelConfig get_config(const Metadata& m) {
    ModelConfig c;
    c.d_model = static_cast<int>(meta_int(m, "config.d_model"));
    c.n_heads = static_cast<int>(meta_int(m, "config.n_heads"));
    c.head_dim = static_cast<int>(meta_int(m, "config.head_dim"));
    c.d_ff = static_cast<int>(meta_int(m, "config.d_ff"));
    c.n_blocks = static_cast<int>(meta_int(m, "config.n_blocks"));
    c.vocab_size = static_cast<int>(meta_int(m, "config.vocab_size"));
    c.max_seq = static_cast<int>(meta_int(m, "config.max_seq"));
    c.seed = meta_u64(m, "config.seed");
    try {
        c.validate();
    } catch (const Error& e) {
        fail(ErrorKind::format, std::string("checkpoint config invalid: ") + e.what());
    }
    return c;
}

void plan_records(std::vector<Record>& out, const ReorderPlan& p) {
    out.push_back(index_record("plan.p_resid", p.p_resid.forward()));
    for (std::size_t b = 0; b < p.p_ffn.size(); ++b) {
        out.push_back(index_record("plan.p_ffn." + std::to_string(b), p.p_ffn[b].forward()));
    }
    for (std::size_t b = 0; b < p.wo_irregular.size(); ++b) {
        out.push_back(index_record("plan.wo." + std::to_string(b), p.wo_irregular[b]));
    }
}

class RecordIndex {
public:
    explicit RecordIndex(const std::vector<Record>& recs) {
        for (const Record& r : recs) {
            require(by_name_.emplace(r.name, &r).second, ErrorKind::format, "duplicate record '" + r.name + "'");
        }
    }
    const Record& get(const std::string& name, RecordTag tag) const {
        const auto it = by_name_.find(name);
        require(it != by_name_.end(), ErrorKind::format, "checkpoint lacks record '" + name + "'");
        require(it->second->tag == tag, ErrorKind::format, "record '" + name + "' has an unexpected tag");
        return *it->second;
    }
    bool has(const std::string& name) const { return by_name_.count(name) != 0; }

private:
    std::map<std::string, const Record*> by_name_;
};

void need_payloads(const Record& r, std::size_t n) {
    require(r.payloads.size() == n, ErrorKind::format,
            "record '" + r.name + "' has " + std::to_string(r.payloads.size()) + " payloads, expected " +
                std::to_string(n));
}

Matrix read_matrix(const RecordIndex& idx, const std::string& name, int rows, int cols) {
    const Record& r = idx.get(name, RecordTag::tensor);
    need_payloads(r, 1);
    require(r.dims == std::vector<std::uint32_t>{static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols)},
            ErrorKind::format, "record '" + name + "' has unexpected dimensions");
    Matrix m(rows, cols);
    m.data = from_bytes<float>(r.payloads[0], name);
    require(m.data.size() == static_cast<std::size_t>(rows) * cols, ErrorKind::format,
            "record '" + name + "' payload size mismatch");
    return m;
}

std::vector<float> read_vector(const RecordIndex& idx, const std::string& name, int n) {
    const Record& r = idx.get(name, RecordTag::tensor);
    need_payloads(r, 1);
    auto v = from_bytes<float>(r.payloads[0], name);
    require(r.dims == std::vector<std::uint32_t>{static_cast<std::uint32_t>(n)} && v.size() == static_cast<std::size_t>(n),
            ErrorKind::format, "record '" + name + "' has unexpected dimensions");
    return v;
}

std::vector<int> read_indices(const RecordIndex& idx, const std::string& name) {
    const Record& r = idx.get(name, RecordTag::index);
    need_payloads(r, 1);
    auto v = ints_from(r.payloads[0], name);
    require(r.dims.size() == 1 && r.dims[0] == v.size(), ErrorKind::format, "record '" + name + "' size mismatch");
    return v;
}

Permutation read_permutation(const RecordIndex& idx, const std::string& name, int n) {
    auto v = read_indices(idx, name);
    require(static_cast<int>(v.size()) == n, ErrorKind::format, "permutation '" + name + "' has the wrong length");
    try {
        return Permutation(std::move(v));
    } catch (const Error& e) {
        fail(ErrorKind::format, "permutation '" + name + "': " + e.what());
    }
}

ReorderPlan read_plan(const RecordIndex& idx, const ModelConfig& c) {
    ReorderPlan p;
    p.p_resid = read_permutation(idx, "plan.p_resid", c.d_model);
    for (int b = 0; b < c.n_blocks; ++b) {
        p.p_ffn.push_back(read_permutation(idx, "plan.p_ffn." + std::to_string(b), c.d_ff));
        p.wo_irregular.push_back(read_indices(idx, "plan.wo." + std::to_string(b)));
    }
    return p;
}

Backbone read_backbone(const RecordIndex& idx, const ModelConfig& c) {
    Backbone bb;
    bb.config = c;
    bb.embedding = read_matrix(idx, "embedding", c.vocab_size, c.d_model);
    for (int b = 0; b < c.n_blocks; ++b) {
        bb.norm1.push_back(read_vector(idx, "norm1." + std::to_string(b), c.d_model));
        bb.norm2.push_back(read_vector(idx, "norm2." + std::to_string(b), c.d_model));
    }
    bb.final_norm = read_vector(idx, "final_norm", c.d_model);
    return bb;
}

void backbone_records(std::vector<Record>& out, const Backbone& bb) {
    out.push_back(tensor_record("embedding", bb.embedding));
    for (std::size_t b = 0; b < bb.norm1.size(); ++b) {
        out.push_back(vector_record("norm1." + std::to_string(b), bb.norm1[b]));
        out.push_back(vector_record("norm2." + std::to_string(b), bb.norm2[b]));
    }
    out.push_back(vector_record("final_norm", bb.final_norm));
}

Record quantized_record(const std::string& name, const QLayer& l) {
    const QuantizedLinear& q = l.q;
    Record r;
    r.tag = RecordTag::quantized;
    r.name = name;
    r.dims = {static_cast<std::uint32_t>(q.oc), static_cast<std::uint32_t>(q.ic)};
    r.bits = static_cast<std::uint8_t>(q.bits);
    r.group_size = static_cast<std::uint32_t>(q.group_size);
    r.k = static_cast<std::uint32_t>(q.k);
    r.layout = static_cast<std::uint8_t>(q.layout);
    r.payloads.push_back(q.packed);
    r.payloads.push_back(raw_bytes<float>(q.scales));
    r.payloads.push_back(raw_bytes<float>(q.zeros));
    r.payloads.push_back(raw_bytes<float>(q.weak.data));
    r.payloads.push_back(int_bytes(q.weak_indices));
    r.payloads.push_back({static_cast<std::uint8_t>(q.optq_fallback ? 1 : 0)});
    r.payloads.push_back(l.online_perm ? int_bytes(l.online_perm->forward()) : std::vector<std::uint8_t>{});
    return r;
}

QLayer read_qlayer(const Record& r, int oc, int ic) {
    need_payloads(r, 7);
    require(r.dims == std::vector<std::uint32_t>{static_cast<std::uint32_t>(oc), static_cast<std::uint32_t>(ic)},
            ErrorKind::format, "quantized record '" + r.name + "' has unexpected dimensions");
    require(r.layout <= 1, ErrorKind::format, "quantized record '" + r.name + "' has an unknown layout");
    require(r.k <= static_cast<std::uint32_t>(ic), ErrorKind::format, "quantized record '" + r.name + "': k > IC");
    QLayer l;
    QuantizedLinear& q = l.q;
    q.oc = oc;
    q.ic = ic;
    q.k = static_cast<int>(r.k);
    q.bits = r.bits;
    q.group_size = static_cast<int>(r.group_size);
    q.layout = static_cast<Layout>(r.layout);
    q.packed = r.payloads[0];
    q.scales = from_bytes<float>(r.payloads[1], r.name);
    q.zeros = from_bytes<float>(r.payloads[2], r.name);
    q.weak = Matrix(oc, q.k);
    q.weak.data = from_bytes<float>(r.payloads[3], r.name);
    require(q.weak.data.size() == static_cast<std::size_t>(oc) * q.k, ErrorKind::format,
            "quantized record '" + r.name + "': weak block size mismatch");
    q.weak_indices = ints_from(r.payloads[4], r.name);
    require(r.payloads[5].size() == 1, ErrorKind::format, "quantized record '" + r.name + "': bad flags");
    q.optq_fallback = r.payloads[5][0] != 0;
    validate(q);
    if (!r.payloads[6].empty()) {
        auto p = ints_from(r.payloads[6], r.name);
        require(static_cast<int>(p.size()) == ic, ErrorKind::format,
                "quantized record '" + r.name + "': online permutation length mismatch");
        try {
            l.online_perm = Permutation(std::move(p));
        } catch (const Error& e) {
            fail(ErrorKind::format, "quantized record '" + r.name + "': " + e.what());
        }
    }
    return l;
}

void merge_user_meta(Metadata& base, const Metadata& user) {
    for (const auto& [k, v] : user) {
        base.emplace(k, v); // reserved keys win
    }
}

} // namespace

std::vector<std::uint8_t> encode_container(const std::vector<Record>& records) {
    Writer w;
    w.bytes("QEFT", 4);
    w.u16(kContainerVersion);
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const Record& r : records) {
        require(r.name.size() <= 0xffff && r.dims.size() <= 0xff, ErrorKind::invalid_argument,
                "record '" + r.name + "' name or rank too large");
        w.u8(static_cast<std::uint8_t>(r.tag));
        w.u16(static_cast<std::uint16_t>(r.name.size()));
        w.bytes(r.name.data(), r.name.size());
        w.u8(static_cast<std::uint8_t>(r.dims.size()));
        for (const std::uint32_t d : r.dims) {
            w.u32(d);
        }
        w.u8(r.bits);
        w.u32(r.group_size);
        w.u32(r.k);
        w.u8(r.layout);
        w.u32(static_cast<std::uint32_t>(r.payloads.size()));
        for (const auto& p : r.payloads) {
            w.u64(p.size());
            w.bytes(p.data(), p.size());
        }
    }
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), w.buf.data(), static_cast<uInt>(w.buf.size()));
    w.u32(static_cast<std::uint32_t>(crc));
    return std::move(w.buf);
}

std::vector<Record> decode_container(std::span<const std::uint8_t> bytes) {
    require(bytes.size() >= 4 && std::memcmp(bytes.data(), "QEFT", 4) == 0, ErrorKind::bad_magic,
            "not a QEFT container (bad magic)");
    Reader in(bytes);
    in.take(4);
    const std::uint16_t version = in.u16();
    require(version == kContainerVersion, ErrorKind::unsupported_version,
            "unsupported container version " + std::to_string(version));
    const std::uint32_t count = in.u32();
    std::vector<Record> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        Record r;
        const std::uint8_t tag = in.u8();
        require(tag >= 1 && tag <= 5, ErrorKind::format, "unknown record tag " + std::to_string(tag));
        r.tag = static_cast<RecordTag>(tag);
        const auto name = in.take(in.u16());
        r.name.assign(name.begin(), name.end());
        const std::uint8_t nd = in.u8();
        for (int d = 0; d < nd; ++d) {
            r.dims.push_back(in.u32());
        }
        r.bits = in.u8();
        r.group_size = in.u32();
        r.k = in.u32();
        r.layout = in.u8();
        const std::uint32_t np = in.u32();
        for (std::uint32_t p = 0; p < np; ++p) {
            const auto data = in.take(in.u64());
            r.payloads.emplace_back(data.begin(), data.end());
        }
        out.push_back(std::move(r));
    }
    const std::size_t body = in.pos();
    const std::uint32_t stored = in.u32();
    require(in.remaining() == 0, ErrorKind::format, "trailing bytes after container checksum");
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(body));
    require(static_cast<std::uint32_t>(crc) == stored, ErrorKind::checksum_mismatch, "container checksum mismatch");
    return out;
}

void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(f), ErrorKind::io, "cannot open " + tmp.string() + " for writing");
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        require(static_cast<bool>(f), ErrorKind::io, "write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    require(!ec, ErrorKind::io, "cannot move " + tmp.string() + " into place: " + ec.message());
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::io, "cannot open " + path);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

const char* to_string(CheckpointKind k) {
    switch (k) {
    case CheckpointKind::dense: return "dense";
    case CheckpointKind::quantized: return "quantized";
    case CheckpointKind::delta: return "delta";
    case CheckpointKind::plan: return "plan";
    }
    return "?";
}

std::vector<Record> to_records(const DenseModel& m, const Metadata& meta) {
    Metadata md{{"kind", "dense"}};
    put_config(md, m.config());
    merge_user_meta(md, meta);
    std::vector<Record> out{metadata_record(md)};
    backbone_records(out, m.backbone);
    for (const LayerId id : all_linear_layers(m.config())) {
        out.push_back(tensor_record(id.name(), m.linear(id)));
    }
    return out;
}

std::vector<Record> to_records(const QuantizedModel& m, const Metadata& meta) {
    Metadata md{{"kind", "quantized"}};
    put_config(md, m.config());
    md["reorder"] = to_string(m.reorder);
    md["k"] = std::to_string(m.k);
    md["k_ffn"] = std::to_string(m.k_ffn);
    md["bits"] = std::to_string(m.options.bits);
    md["group_size"] = std::to_string(m.options.group_size);
    md["mode"] = to_string(m.options.mode);
    md["grid_steps"] = std::to_string(m.options.grid.steps);
    md["grid_alpha_min"] = fmt_float(m.options.grid.alpha_min);
    md["damp"] = fmt_double(m.options.damp);
    md["fingerprint"] = std::to_string(fingerprint(m.config()));
    merge_user_meta(md, meta);
    std::vector<Record> out{metadata_record(md)};
    backbone_records(out, m.backbone);
    out.push_back(tensor_record("head", m.head));
    plan_records(out, m.plan);
    for (const LayerId id : block_linear_layers(m.config())) {
        out.push_back(quantized_record(id.name(), m.layer(id)));
    }
    return out;
}

std::vector<Record> to_records(const WeakDelta& d, const Metadata& meta) {
    Metadata md{{"kind", "delta"}, {"k", std::to_string(d.k)}, {"fingerprint", std::to_string(d.fingerprint)}};
    merge_user_meta(md, meta);
    std::vector<Record> out{metadata_record(md)};
    plan_records(out, d.plan);
    for (const LayerDelta& ld : d.layers) {
        Record r;
        r.tag = RecordTag::delta;
        r.name = ld.id.name();
        r.bits = 64;
        r.k = static_cast<std::uint32_t>(ld.k());
        r.dims = {static_cast<std::uint32_t>(ld.oc), static_cast<std::uint32_t>(ld.k())};
        r.payloads.push_back(raw_bytes<double>(ld.delta));
        r.payloads.push_back(int_bytes(ld.indices));
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<Record> to_records(const ReorderPlan& p, const ModelConfig& c, const Metadata& meta) {
    Metadata md{{"kind", "plan"}};
    put_config(md, c);
    merge_user_meta(md, meta);
    std::vector<Record> out{metadata_record(md)};
    plan_records(out, p);
    return out;
}

Checkpoint from_records(const std::vector<Record>& records) {
    const RecordIndex idx(records);
    Checkpoint ck;
    ck.metadata = parse_metadata(idx.get("meta", RecordTag::metadata));
    const std::string& kind = meta_at(ck.metadata, "kind");
    if (kind == "dense") {
        ck.kind = CheckpointKind::dense;
        const ModelConfig c = get_config(ck.metadata);
        DenseModel m;
        m.backbone = read_backbone(idx, c);
        m.blocks.resize(c.n_blocks);
        for (const LayerId id : block_linear_layers(c)) {
            m.linear(id) = read_matrix(idx, id.name(), out_features(c, id.kind), in_features(c, id.kind));
        }
        m.head = read_matrix(idx, "head", c.vocab_size, c.d_model);
        ck.dense = std::move(m);
    } else if (kind == "quantized") {
        ck.kind = CheckpointKind::quantized;
        const ModelConfig c = get_config(ck.metadata);
        QuantizedModel m;
        m.backbone = read_backbone(idx, c);
        m.head = read_matrix(idx, "head", c.vocab_size, c.d_model);
        m.plan = read_plan(idx, c);
        const auto reorder = parse_reorder_mode(meta_at(ck.metadata, "reorder"));
        require(reorder.has_value(), ErrorKind::format, "unknown reorder mode in checkpoint");
        m.reorder = *reorder;
        m.k = static_cast<int>(meta_int(ck.metadata, "k"));
        m.k_ffn = static_cast<int>(meta_int(ck.metadata, "k_ffn"));
        m.options.bits = static_cast<int>(meta_int(ck.metadata, "bits"));
        m.options.group_size = static_cast<int>(meta_int(ck.metadata, "group_size"));
        const std::string& mode = meta_at(ck.metadata, "mode");
        require(mode == "optq" || mode == "rtn", ErrorKind::format, "unknown quantization mode " + mode);
        m.options.mode = mode == "optq" ? QuantMode::optq : QuantMode::rtn;
        m.options.grid.steps = static_cast<int>(meta_int(ck.metadata, "grid_steps"));
        m.options.grid.alpha_min = static_cast<float>(meta_double(ck.metadata, "grid_alpha_min"));
        m.options.damp = meta_double(ck.metadata, "damp");
        for (const LayerId id : block_linear_layers(c)) {
            m.layers.push_back(read_qlayer(idx.get(id.name(), RecordTag::quantized), out_features(c, id.kind),
                                           in_features(c, id.kind)));
        }
        ck.quantized = std::move(m);
    } else if (kind == "delta") {
        ck.kind = CheckpointKind::delta;
        WeakDelta d;
        d.k = static_cast<int>(meta_int(ck.metadata, "k"));
        d.fingerprint = meta_u64(ck.metadata, "fingerprint");
        d.plan.p_resid = Permutation(read_indices(idx, "plan.p_resid"));
        for (int b = 0; idx.has("plan.p_ffn." + std::to_string(b)); ++b) {
            d.plan.p_ffn.emplace_back(read_indices(idx, "plan.p_ffn." + std::to_string(b)));
            d.plan.wo_irregular.push_back(read_indices(idx, "plan.wo." + std::to_string(b)));
        }
        for (const Record& r : records) {
            if (r.tag != RecordTag::delta) {
                continue;
            }
            need_payloads(r, 2);
            const auto id = parse_layer_name(r.name);
            require(id.has_value(), ErrorKind::format, "delta record has unknown layer name " + r.name);
            LayerDelta ld;
            ld.id = *id;
            ld.indices = ints_from(r.payloads[1], r.name);
            ld.delta = from_bytes<double>(r.payloads[0], r.name);
            require(r.dims.size() == 2 && r.dims[1] == ld.indices.size(), ErrorKind::format,
                    "delta record '" + r.name + "' dimension mismatch");
            ld.oc = static_cast<int>(r.dims[0]);
            require(ld.delta.size() == static_cast<std::size_t>(ld.oc) * ld.indices.size(), ErrorKind::format,
                    "delta record '" + r.name + "' payload size mismatch");
            d.layers.push_back(std::move(ld));
        }
        ck.delta = std::move(d);
    } else if (kind == "plan") {
        ck.kind = CheckpointKind::plan;
        ck.plan = read_plan(idx, get_config(ck.metadata));
    } else {
        fail(ErrorKind::format, "unknown checkpoint kind '" + kind + "'");
    }
    return ck;
}

void save_checkpoint(const std::string& path, const DenseModel& m, const Metadata& meta) {
    write_file_atomic(path, encode_container(to_records(m, meta)));
}

void save_checkpoint(const std::string& path, const QuantizedModel& m, const Metadata& meta) {
    write_file_atomic(path, encode_container(to_records(m, meta)));
}

void save_checkpoint(const std::string& path, const WeakDelta& d, const Metadata& meta) {
    write_file_atomic(path, encode_container(to_records(d, meta)));
}

void save_plan(const std::string& path, const ReorderPlan& p, const ModelConfig& c, const Metadata& meta) {
    write_file_atomic(path, encode_container(to_records(p, c, meta)));
}

Checkpoint load_checkpoint(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return from_records(decode_container(bytes));
}

namespace {

Checkpoint load_kind(const std::string& path, CheckpointKind want) {
    Checkpoint ck = load_checkpoint(path);
    require(ck.kind == want, ErrorKind::checkpoint_mismatch,
            path + " holds a " + to_string(ck.kind) + " checkpoint, expected " + to_string(want));
    return ck;
}

} // namespace

DenseModel load_dense(const std::string& path) { return std::move(*load_kind(path, CheckpointKind::dense).dense); }

QuantizedModel load_quantized(const std::string& path) {
    return std::move(*load_kind(path, CheckpointKind::quantized).quantized);
}

WeakDelta load_delta(const std::string& path) { return std::move(*load_kind(path, CheckpointKind::delta).delta); }

ReorderPlan load_plan(const std::string& path) { return std::move(*load_kind(path, CheckpointKind::plan).plan); }

} // namespace qeft
