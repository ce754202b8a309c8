#include "gatenorm/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <fmt/core.h>
#include <json.hpp>

namespace gatenorm {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// dtypes
// ---------------------------------------------------------------------------

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::f16:
        case DType::bf16: return 2;
        case DType::f32: return 4;
    }
    return 0;
}

std::string_view dtype_name(DType dtype) {
    switch (dtype) {
        case DType::f16: return "F16";
        case DType::bf16: return "BF16";
        case DType::f32: return "F32";
    }
    return "?";
}

std::optional<DType> parse_dtype(std::string_view name) {
    if (name == "F16") return DType::f16;
    if (name == "BF16") return DType::bf16;
    if (name == "F32") return DType::f32;
    return std::nullopt;
}

float half_to_float(std::uint16_t bits) {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
    const std::uint32_t exp = (bits >> 10) & 0x1fu;
    const std::uint32_t mant = bits & 0x3ffu;
    if (exp == 0) {
        // zero or subnormal: mant * 2^-24
        const float mag = static_cast<float>(mant) * 0x1.0p-24f;
        return sign ? -mag : mag;
    }
    if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
    return std::bit_cast<float>(sign | ((exp + 112u) << 23) | (mant << 13));
}

std::uint16_t float_to_half(float value) {
    std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    x &= 0x7fffffffu;
    if (x >= 0x7f800000u) return sign | 0x7c00u | (x > 0x7f800000u ? 0x200u : 0u);
    if (x >= 0x477ff000u) return sign | 0x7c00u;  // rounds past 65504
    if (x < 0x38800000u) {
        // Below the smallest normal half: scaling by 2^24 is exact, so the
        // round-to-nearest-even of the scaled value is the subnormal mantissa.
        const float scaled = std::bit_cast<float>(x) * 0x1.0p24f;
        return sign | static_cast<std::uint16_t>(std::nearbyint(scaled));
    }
    // Rebias the exponent and round the dropped 13 mantissa bits to nearest even.
    const std::uint32_t odd = (x >> 13) & 1u;
    x += 0xc8000fffu + odd;
    return sign | static_cast<std::uint16_t>(x >> 13);
}

float bf16_to_float(std::uint16_t bits) { return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16); }

std::uint16_t float_to_bf16(float value) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    if ((x & 0x7fffffffu) > 0x7f800000u) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
    const std::uint32_t odd = (x >> 16) & 1u;
    return static_cast<std::uint16_t>((x + 0x7fffu + odd) >> 16);
}

namespace {

float decode_one(const std::byte* p, DType dtype) {
    switch (dtype) {
        case DType::f16: {
            const auto bits = static_cast<std::uint16_t>(std::to_integer<unsigned>(p[0]) |
                                                         (std::to_integer<unsigned>(p[1]) << 8));
            return half_to_float(bits);
        }
        case DType::bf16: {
            const auto bits = static_cast<std::uint16_t>(std::to_integer<unsigned>(p[0]) |
                                                         (std::to_integer<unsigned>(p[1]) << 8));
            return bf16_to_float(bits);
        }
        case DType::f32: {
            std::uint32_t bits = 0;
            for (int i = 3; i >= 0; --i) bits = (bits << 8) | std::to_integer<std::uint32_t>(p[i]);
            return std::bit_cast<float>(bits);
        }
    }
    return 0.0f;
}

}  // namespace

void encode_values(std::span<const float> values, DType dtype, std::vector<std::byte>& out) {
    const std::size_t width = dtype_size(dtype);
    const std::size_t base = out.size();
    out.resize(base + values.size() * width);
    std::byte* p = out.data() + base;
    for (const float v : values) {
        std::uint32_t bits = 0;
        switch (dtype) {
            case DType::f16: bits = float_to_half(v); break;
            case DType::bf16: bits = float_to_bf16(v); break;
            case DType::f32: bits = std::bit_cast<std::uint32_t>(v); break;
        }
        for (std::size_t i = 0; i < width; ++i) p[i] = static_cast<std::byte>((bits >> (8 * i)) & 0xffu);
        p += width;
    }
}

// ---------------------------------------------------------------------------
// Header
// ---------------------------------------------------------------------------

std::uint64_t TensorRecord::element_count() const {
    std::uint64_t n = 1;
    for (const auto d : shape) n *= d;
    return n;
}

std::string_view header_fault_name(HeaderFault fault) {
    switch (fault) {
        case HeaderFault::truncated: return "truncated";
        case HeaderFault::malformed_length: return "malformed_length";
        case HeaderFault::non_utf8: return "non_utf8";
        case HeaderFault::invalid_json: return "invalid_json";
        case HeaderFault::bad_record: return "bad_record";
        case HeaderFault::unknown_dtype: return "unknown_dtype";
        case HeaderFault::bad_shape: return "bad_shape";
        case HeaderFault::shape_size_mismatch: return "shape_size_mismatch";
        case HeaderFault::out_of_bounds: return "out_of_bounds";
        case HeaderFault::overlapping_ranges: return "overlapping_ranges";
    }
    return "unknown";
}

HeaderError::HeaderError(HeaderFault fault, std::string record, const std::string& detail)
    : FormatError(record.empty() ? fmt::format("checkpoint header {}: {}", header_fault_name(fault), detail)
                                 : fmt::format("checkpoint header {} in record '{}': {}", header_fault_name(fault),
                                               record, detail)),
      fault_(fault),
      record_(std::move(record)) {}

CheckpointIndex::CheckpointIndex(std::uint64_t header_bytes, std::uint64_t data_region_length,
                                 std::map<std::string, TensorRecord> records, std::string metadata_json)
    : header_bytes_(header_bytes),
      data_region_length_(data_region_length),
      records_(std::move(records)),
      metadata_json_(std::move(metadata_json)) {}

const TensorRecord* CheckpointIndex::find(std::string_view name) const {
    const auto it = records_.find(std::string(name));
    return it == records_.end() ? nullptr : &it->second;
}

const TensorRecord& CheckpointIndex::at(std::string_view name) const {
    const TensorRecord* r = find(name);
    if (r == nullptr) throw FormatError(fmt::format("checkpoint has no tensor named '{}'", name));
    return *r;
}

namespace {

// Headers larger than this are rejected outright rather than allocated.
constexpr std::uint64_t kMaxHeaderBytes = 100ull << 20;

bool valid_utf8(std::span<const std::byte> bytes) {
    std::size_t i = 0;
    const std::size_t n = bytes.size();
    auto at = [&](std::size_t k) { return std::to_integer<unsigned>(bytes[k]); };
    while (i < n) {
        const unsigned c = at(i);
        std::size_t len;
        std::uint32_t cp;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xe0) == 0xc0) {
            len = 2;
            cp = c & 0x1f;
        } else if ((c & 0xf0) == 0xe0) {
            len = 3;
            cp = c & 0x0f;
        } else if ((c & 0xf8) == 0xf0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + len > n) return false;
        for (std::size_t k = 1; k < len; ++k) {
            const unsigned cc = at(i + k);
            if ((cc & 0xc0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3f);
        }
        // overlong forms, surrogates, beyond U+10FFFF
        if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000)) return false;
        if ((cp >= 0xd800 && cp <= 0xdfff) || cp > 0x10ffff) return false;
        i += len;
    }
    return true;
}

TensorRecord parse_record(const std::string& name, const json& entry) {
    if (!entry.is_object()) throw HeaderError(HeaderFault::bad_record, name, "entry is not an object");
    const auto dt = entry.find("dtype");
    const auto sh = entry.find("shape");
    const auto off = entry.find("data_offsets");
    if (dt == entry.end() || sh == entry.end() || off == entry.end()) {
        throw HeaderError(HeaderFault::bad_record, name, "entry needs dtype, shape and data_offsets");
    }
    if (!dt->is_string()) throw HeaderError(HeaderFault::bad_record, name, "dtype is not a string");
    const auto dtype = parse_dtype(dt->get<std::string>());
    if (!dtype) throw HeaderError(HeaderFault::unknown_dtype, name, fmt::format("dtype {}", dt->dump()));

    if (!sh->is_array()) throw HeaderError(HeaderFault::bad_record, name, "shape is not an array");
    TensorRecord rec;
    rec.name = name;
    rec.dtype = *dtype;
    std::uint64_t count = 1;
    for (const auto& d : *sh) {
        if (!d.is_number_unsigned()) throw HeaderError(HeaderFault::bad_shape, name, fmt::format("extent {}", d.dump()));
        const auto extent = d.get<std::uint64_t>();
        if (extent == 0) throw HeaderError(HeaderFault::bad_shape, name, "zero extent");
        if (count > UINT64_MAX / extent / dtype_size(*dtype)) {
            throw HeaderError(HeaderFault::bad_shape, name, "element count overflows");
        }
        count *= extent;
        rec.shape.push_back(extent);
    }

    if (!off->is_array() || off->size() != 2 || !(*off)[0].is_number_unsigned() || !(*off)[1].is_number_unsigned()) {
        throw HeaderError(HeaderFault::bad_record, name, "data_offsets must be two unsigned integers");
    }
    rec.range.begin = (*off)[0].get<std::uint64_t>();
    rec.range.end = (*off)[1].get<std::uint64_t>();
    if (rec.range.begin >= rec.range.end) {
        throw HeaderError(HeaderFault::out_of_bounds, name,
                          fmt::format("empty or inverted range [{}, {})", rec.range.begin, rec.range.end));
    }
    const std::uint64_t expected = count * dtype_size(*dtype);
    if (rec.range.length() != expected) {
        throw HeaderError(HeaderFault::shape_size_mismatch, name,
                          fmt::format("range holds {} bytes, shape needs {}", rec.range.length(), expected));
    }
    return rec;
}

}  // namespace

CheckpointIndex parse_header(std::span<const std::byte> prefix, std::uint64_t file_size) {
    if (prefix.size() < 8 || file_size < 8) {
        throw HeaderError(HeaderFault::truncated, {}, "file shorter than the 8-byte length prefix");
    }
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | std::to_integer<std::uint64_t>(prefix[i]);
    if (n == 0 || n > file_size - 8 || n > kMaxHeaderBytes) {
        throw HeaderError(HeaderFault::malformed_length, {},
                          fmt::format("header length {} invalid for a {}-byte file", n, file_size));
    }
    if (prefix.size() < 8 + n) {
        throw HeaderError(HeaderFault::truncated, {}, fmt::format("need {} header bytes, have {}", n, prefix.size() - 8));
    }
    const auto text = prefix.subspan(8, n);
    if (!valid_utf8(text)) throw HeaderError(HeaderFault::non_utf8, {}, "header is not valid UTF-8");

    const auto* chars = reinterpret_cast<const char*>(text.data());
    json doc = json::parse(chars, chars + text.size(), nullptr, /*allow_exceptions=*/false);
    if (doc.is_discarded() || !doc.is_object()) {
        throw HeaderError(HeaderFault::invalid_json, {}, "header is not a JSON object");
    }

    const std::uint64_t data_len = file_size - 8 - n;
    std::map<std::string, TensorRecord> records;
    std::string metadata;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (it.key() == "__metadata__") {
            metadata = it.value().dump();
            continue;
        }
        TensorRecord rec = parse_record(it.key(), it.value());
        if (rec.range.end > data_len) {
            throw HeaderError(HeaderFault::out_of_bounds, rec.name,
                              fmt::format("range [{}, {}) exceeds data region of {} bytes", rec.range.begin,
                                          rec.range.end, data_len));
        }
        records.emplace(rec.name, std::move(rec));
    }

    std::vector<const TensorRecord*> by_offset;
    by_offset.reserve(records.size());
    for (const auto& [name, rec] : records) by_offset.push_back(&rec);
    std::sort(by_offset.begin(), by_offset.end(), [](const TensorRecord* a, const TensorRecord* b) {
        return a->range.begin != b->range.begin ? a->range.begin < b->range.begin : a->name < b->name;
    });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->range.begin < by_offset[i - 1]->range.end) {
            throw HeaderError(HeaderFault::overlapping_ranges, by_offset[i]->name,
                              fmt::format("overlaps '{}'", by_offset[i - 1]->name));
        }
    }
    return CheckpointIndex(n, data_len, std::move(records), std::move(metadata));
}

CheckpointIndex parse_header(const ByteSource& source) {
    const std::uint64_t size = source.size();
    if (size < 8) throw HeaderError(HeaderFault::truncated, {}, "file shorter than the 8-byte length prefix");
    std::vector<std::byte> prefix(8);
    source.read(0, prefix);
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | std::to_integer<std::uint64_t>(prefix[i]);
    if (n == 0 || n > size - 8 || n > kMaxHeaderBytes) {
        throw HeaderError(HeaderFault::malformed_length, {},
                          fmt::format("header length {} invalid for a {}-byte file", n, size));
    }
    prefix.resize(8 + n);
    source.read(8, std::span<std::byte>(prefix).subspan(8));
    return parse_header(prefix, size);
}

// ---------------------------------------------------------------------------
// Byte sources
// ---------------------------------------------------------------------------

FileSource::FileSource(const std::filesystem::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd_ < 0) throw IoError(fmt::format("cannot open '{}': {}", path.string(), std::strerror(errno)));
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
        ::close(fd_);
        throw IoError(fmt::format("cannot stat '{}'", path.string()));
    }
    size_ = static_cast<std::uint64_t>(st.st_size);
}

FileSource::~FileSource() {
    if (fd_ >= 0) ::close(fd_);
}

void FileSource::read(std::uint64_t offset, std::span<std::byte> out) const {
    std::size_t done = 0;
    while (done < out.size()) {
        const ssize_t got = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
        if (got < 0 && errno == EINTR) continue;
        if (got <= 0) {
            throw IoError(fmt::format("short read of '{}' at offset {} ({} of {} bytes)", path_.string(), offset, done,
                                      out.size()));
        }
        done += static_cast<std::size_t>(got);
    }
}

void MemorySource::read(std::uint64_t offset, std::span<std::byte> out) const {
    if (offset > bytes_.size() || out.size() > bytes_.size() - offset) {
        throw IoError(fmt::format("read of {} bytes at offset {} past end of {}-byte buffer", out.size(), offset,
                                  bytes_.size()));
    }
    std::memcpy(out.data(), bytes_.data() + offset, out.size());
}

// ---------------------------------------------------------------------------
// Tensor reads
// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kDecodeChunkElements = 1 << 16;

// Decode the record in chunks, handing each element's flat index and value to
// `sink`. Peak scratch is one chunk of raw bytes.
template <typename Sink>
void decode_record(const CheckpointIndex& index, const TensorRecord& rec, const ByteSource& source, Sink sink) {
    const std::size_t width = dtype_size(rec.dtype);
    const std::uint64_t count = rec.element_count();
    std::vector<std::byte> raw(std::min<std::uint64_t>(count, kDecodeChunkElements) * width);
    for (std::uint64_t first = 0; first < count; first += kDecodeChunkElements) {
        const std::uint64_t n = std::min<std::uint64_t>(kDecodeChunkElements, count - first);
        const std::span<std::byte> chunk(raw.data(), n * width);
        source.read(index.data_offset() + rec.range.begin + first * width, chunk);
        for (std::uint64_t k = 0; k < n; ++k) sink(first + k, decode_one(chunk.data() + k * width, rec.dtype));
    }
}

const TensorRecord& rank2_record(const CheckpointIndex& index, std::string_view name) {
    const TensorRecord& rec = index.at(name);
    if (rec.rank() != 2) throw FormatError(fmt::format("tensor '{}' has rank {}, expected 2", name, rec.rank()));
    return rec;
}

}  // namespace

Tensor2D read_tensor(const CheckpointIndex& index, std::string_view name, const ByteSource& source) {
    const TensorRecord& rec = rank2_record(index, name);
    Tensor2D t(rec.shape[0], rec.shape[1]);
    float* out = t.values().data();
    decode_record(index, rec, source, [out](std::uint64_t i, float v) { out[i] = v; });
    return t;
}

Tensor2D read_tensor_transposed(const CheckpointIndex& index, std::string_view name, const ByteSource& source) {
    const TensorRecord& rec = rank2_record(index, name);
    const std::uint64_t rows = rec.shape[0];
    const std::uint64_t cols = rec.shape[1];
    Tensor2D t(cols, rows);
    float* out = t.values().data();
    decode_record(index, rec, source, [out, rows, cols](std::uint64_t i, float v) {
        out[(i % cols) * rows + i / cols] = v;
    });
    return t;
}

Vector read_vector(const CheckpointIndex& index, std::string_view name, const ByteSource& source) {
    const TensorRecord& rec = index.at(name);
    if (rec.rank() != 1) throw FormatError(fmt::format("tensor '{}' has rank {}, expected 1", name, rec.rank()));
    Vector v(rec.shape[0]);
    decode_record(index, rec, source, [&v](std::uint64_t i, float x) { v[i] = x; });
    return v;
}

// ---------------------------------------------------------------------------
// Naming
// ---------------------------------------------------------------------------

std::string_view role_name(Role role) {
    switch (role) {
        case Role::query: return "q";
        case Role::key: return "k";
        case Role::value: return "v";
        case Role::output: return "o";
        case Role::mlp_up: return "up";
        case Role::mlp_down: return "down";
        case Role::attn_norm: return "attn_norm";
        case Role::mlp_norm: return "mlp_norm";
        case Role::attn_norm_bias: return "attn_norm_bias";
        case Role::mlp_norm_bias: return "mlp_norm_bias";
    }
    return "?";
}

namespace {

const std::map<Role, std::string>& llama_suffixes() {
    static const std::map<Role, std::string> suffixes = {
        {Role::query, "self_attn.q_proj.weight"},
        {Role::key, "self_attn.k_proj.weight"},
        {Role::value, "self_attn.v_proj.weight"},
        {Role::output, "self_attn.o_proj.weight"},
        {Role::mlp_up, "mlp.up_proj.weight"},
        {Role::mlp_down, "mlp.down_proj.weight"},
        {Role::attn_norm, "input_layernorm.weight"},
        {Role::mlp_norm, "post_attention_layernorm.weight"},
        {Role::attn_norm_bias, "input_layernorm.bias"},
        {Role::mlp_norm_bias, "post_attention_layernorm.bias"},
    };
    return suffixes;
}

NamingScheme prefixed_llama(std::string name, const std::string& prefix) {
    NamingScheme s;
    s.name = std::move(name);
    for (const auto& [role, suffix] : llama_suffixes()) s.patterns[role] = prefix + suffix;
    s.index_base = 0;
    s.embedding = "model.embed_tokens.weight";
    s.final_norm = "model.norm.weight";
    s.final_norm_bias = "model.norm.bias";
    s.lm_head = "lm_head.weight";
    return s;
}

std::optional<Role> role_from_key(std::string_view key) {
    for (const Role r : kAllRoles) {
        if (role_name(r) == key) return r;
    }
    return std::nullopt;
}

// Match `name` against a pattern with one "{i}"; returns the decimal index.
std::optional<std::uint64_t> match_pattern(std::string_view pattern, std::string_view name) {
    const auto pos = pattern.find("{i}");
    if (pos == std::string_view::npos) return std::nullopt;
    const std::string_view head = pattern.substr(0, pos);
    const std::string_view tail = pattern.substr(pos + 3);
    if (name.size() <= head.size() + tail.size()) return std::nullopt;
    if (name.substr(0, head.size()) != head || name.substr(name.size() - tail.size()) != tail) return std::nullopt;
    const std::string_view digits = name.substr(head.size(), name.size() - head.size() - tail.size());
    if (digits.size() > 1 && digits.front() == '0') return std::nullopt;
    std::uint64_t value = 0;
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
    if (ec != std::errc{} || ptr != digits.data() + digits.size()) return std::nullopt;
    return value;
}

}  // namespace

NamingScheme NamingScheme::llama() { return prefixed_llama("llama", "model.layers.{i}."); }

NamingScheme NamingScheme::parse(std::string_view spec) {
    if (spec == "llama") return llama();
    if (spec.find('=') == std::string_view::npos) {
        if (spec.find("{i}") == std::string_view::npos) {
            throw UsageError(fmt::format("naming scheme '{}' is neither 'llama' nor a pattern containing {{i}}", spec));
        }
        return prefixed_llama(std::string(spec), std::string(spec));
    }
    NamingScheme s = llama();
    s.name = std::string(spec);
    s.patterns.clear();
    std::size_t start = 0;
    while (start <= spec.size()) {
        const auto comma = spec.find(',', start);
        const std::string_view item = spec.substr(start, comma == std::string_view::npos ? spec.npos : comma - start);
        start = comma == std::string_view::npos ? spec.size() + 1 : comma + 1;
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string_view::npos) throw UsageError(fmt::format("naming scheme item '{}' lacks '='", item));
        const std::string_view key = item.substr(0, eq);
        const std::string_view value = item.substr(eq + 1);
        if (key == "base") {
            std::uint64_t base = 0;
            const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), base);
            if (ec != std::errc{} || ptr != value.data() + value.size()) {
                throw UsageError(fmt::format("naming scheme base '{}' is not a number", value));
            }
            s.index_base = base;
        } else if (auto role = role_from_key(key)) {
            if (value.find("{i}") == std::string_view::npos) {
                throw UsageError(fmt::format("pattern for role '{}' lacks {{i}}", key));
            }
            s.patterns[*role] = std::string(value);
        } else {
            throw UsageError(fmt::format("unknown naming scheme role '{}'", key));
        }
    }
    if (!s.patterns.count(Role::query) || !s.patterns.count(Role::key)) {
        throw UsageError("naming scheme must define patterns for q and k");
    }
    return s;
}

const std::string& LayerTensors::name(Role role) const {
    const auto it = names.find(role);
    if (it == names.end()) throw FormatError(fmt::format("layer has no '{}' tensor", role_name(role)));
    return it->second;
}

LayerTensorMap enumerate_layers(const CheckpointIndex& index, const NamingScheme& scheme) {
    std::map<std::uint64_t, LayerTensors> found;
    for (const auto& [name, rec] : index.records()) {
        for (const auto& [role, pattern] : scheme.patterns) {
            const auto idx = match_pattern(pattern, name);
            if (idx && *idx >= scheme.index_base) {
                found[*idx - scheme.index_base].names[role] = name;
            }
        }
    }
    if (found.empty()) {
        throw FormatError(fmt::format("no layer tensors match naming scheme '{}'", scheme.name));
    }
    const std::uint64_t num_layers = found.rbegin()->first + 1;
    LayerTensorMap map;
    map.layers.resize(num_layers);
    for (std::uint64_t l = 0; l < num_layers; ++l) {
        const auto it = found.find(l);
        for (const Role required : {Role::query, Role::key}) {
            if (it == found.end() || !it->second.has(required)) {
                throw FormatError(fmt::format("layer {} (name index {}) is missing its {} tensor", l + 1,
                                              l + scheme.index_base, required == Role::query ? "query" : "key"));
            }
        }
        map.layers[l] = it->second;
    }
    return map;
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

void CheckpointWriter::add(std::string name, DType dtype, std::vector<std::uint64_t> shape, Producer values) {
    entries_.push_back({std::move(name), dtype, std::move(shape), std::move(values)});
}

void CheckpointWriter::write(std::ostream& out) const {
    ordered_json header = ordered_json::object();
    if (!metadata_.empty()) {
        ordered_json meta = ordered_json::object();
        for (const auto& [k, v] : metadata_) meta[k] = v;
        header["__metadata__"] = meta;
    }
    std::uint64_t offset = 0;
    for (const auto& e : entries_) {
        std::uint64_t count = 1;
        for (const auto d : e.shape) count *= d;
        const std::uint64_t bytes = count * dtype_size(e.dtype);
        header[e.name] = {{"dtype", dtype_name(e.dtype)}, {"shape", e.shape}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::byte len[8];
    const std::uint64_t n = text.size();
    for (int i = 0; i < 8; ++i) len[i] = static_cast<std::byte>((n >> (8 * i)) & 0xffu);
    out.write(reinterpret_cast<const char*>(len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));

    std::vector<std::byte> buffer;
    for (const auto& e : entries_) {
        const std::vector<float> values = e.values();
        std::uint64_t count = 1;
        for (const auto d : e.shape) count *= d;
        if (values.size() != count) {
            throw ContractError(fmt::format("entry '{}' produced {} values for {} elements", e.name, values.size(), count));
        }
        buffer.clear();
        encode_values(values, e.dtype, buffer);
        out.write(reinterpret_cast<const char*>(buffer.data()), static_cast<std::streamsize>(buffer.size()));
    }
    if (!out) throw IoError("failed writing checkpoint stream");
}

void CheckpointWriter::write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot create '{}'", path.string()));
    write(out);
}

std::vector<std::byte> CheckpointWriter::to_bytes() const {
    std::ostringstream os(std::ios::binary);
    write(os);
    const std::string s = os.str();
    const auto* p = reinterpret_cast<const std::byte*>(s.data());
    return {p, p + s.size()};
}

}  // namespace gatenorm
