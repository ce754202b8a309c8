#pragma once

// Reading and writing the tensor-container checkpoint layout:
//
//   [u64 little-endian N][N bytes UTF-8 JSON header][data region]
//
// The header maps tensor names to {"dtype", "shape", "data_offsets"}, with
// offsets relative to the start of the data region. An optional
// "__metadata__" entry is kept verbatim and otherwise ignored.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gatenorm/error.hpp"
#include "gatenorm/tensor.hpp"

namespace gatenorm {

enum class DType { f16, bf16, f32 };

std::size_t dtype_size(DType dtype);
std::string_view dtype_name(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);

float half_to_float(std::uint16_t bits);
std::uint16_t float_to_half(float value);
float bf16_to_float(std::uint16_t bits);
std::uint16_t float_to_bf16(float value);

struct ByteRange {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
    std::uint64_t length() const { return end - begin; }
};

struct TensorRecord {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::uint64_t> shape;
    ByteRange range;

    std::uint64_t element_count() const;
    std::size_t rank() const { return shape.size(); }
};

/// The distinct ways a header can be rejected.
enum class HeaderFault {
    truncated,            // fewer bytes than the length prefix promises
    malformed_length,     // length prefix is zero or exceeds the file
    non_utf8,
    invalid_json,
    bad_record,           // record is not an object or lacks/garbles a field
    unknown_dtype,
    bad_shape,            // non-positive or overflowing extent
    shape_size_mismatch,  // byte length != elements * dtype size
    out_of_bounds,        // range escapes the data region or begin >= end
    overlapping_ranges,
};

std::string_view header_fault_name(HeaderFault fault);

class HeaderError : public FormatError {
public:
    HeaderError(HeaderFault fault, std::string record, const std::string& detail);
    HeaderFault fault() const noexcept { return fault_; }
    /// Offending record name; empty for file-level faults.
    const std::string& record() const noexcept { return record_; }

private:
    HeaderFault fault_;
    std::string record_;
};

class CheckpointIndex {
public:
    CheckpointIndex(std::uint64_t header_bytes, std::uint64_t data_region_length,
                    std::map<std::string, TensorRecord> records, std::string metadata_json);

    std::uint64_t header_bytes() const noexcept { return header_bytes_; }
    /// File offset where the data region starts.
    std::uint64_t data_offset() const noexcept { return 8 + header_bytes_; }
    std::uint64_t data_region_length() const noexcept { return data_region_length_; }

    const std::map<std::string, TensorRecord>& records() const noexcept { return records_; }
    const TensorRecord* find(std::string_view name) const;
    /// Throws FormatError when the name is absent.
    const TensorRecord& at(std::string_view name) const;

    /// The raw "__metadata__" object serialized back to JSON, or empty.
    const std::string& metadata_json() const noexcept { return metadata_json_; }

private:
    std::uint64_t header_bytes_;
    std::uint64_t data_region_length_;
    std::map<std::string, TensorRecord> records_;
    std::string metadata_json_;
};

/// Random-access byte source. Implementations must be safe for concurrent
/// reads of disjoint ranges.
class ByteSource {
public:
    virtual ~ByteSource() = default;
    virtual std::uint64_t size() const = 0;
    /// Fill `out` from `offset`; throws IoError on short reads.
    virtual void read(std::uint64_t offset, std::span<std::byte> out) const = 0;
};

class FileSource final : public ByteSource {
public:
    explicit FileSource(const std::filesystem::path& path);
    ~FileSource() override;
    FileSource(const FileSource&) = delete;
    FileSource& operator=(const FileSource&) = delete;

    std::uint64_t size() const override { return size_; }
    void read(std::uint64_t offset, std::span<std::byte> out) const override;
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    int fd_ = -1;
    std::uint64_t size_ = 0;
};

class MemorySource final : public ByteSource {
public:
    explicit MemorySource(std::span<const std::byte> bytes) : bytes_(bytes) {}
    std::uint64_t size() const override { return bytes_.size(); }
    void read(std::uint64_t offset, std::span<std::byte> out) const override;

private:
    std::span<const std::byte> bytes_;
};

/// Parse and validate a header. `prefix` must hold at least the 8-byte length
/// and the header itself; `file_size` is the size of the whole file and
/// bounds the data region.
CheckpointIndex parse_header(std::span<const std::byte> prefix, std::uint64_t file_size);
CheckpointIndex parse_header(const ByteSource& source);

/// Decode a rank-2 record to float32, in stored orientation.
Tensor2D read_tensor(const CheckpointIndex& index, std::string_view name, const ByteSource& source);
/// Decode a rank-2 record directly into its transpose.
Tensor2D read_tensor_transposed(const CheckpointIndex& index, std::string_view name, const ByteSource& source);
/// Decode a rank-1 record (norm gains, biases).
Vector read_vector(const CheckpointIndex& index, std::string_view name, const ByteSource& source);

// ---------------------------------------------------------------------------
// Layer naming
// ---------------------------------------------------------------------------

enum class Role {
    query,
    key,
    value,
    output,
    mlp_up,
    mlp_down,
    attn_norm,
    mlp_norm,
    attn_norm_bias,
    mlp_norm_bias,
};

inline constexpr Role kAllRoles[] = {Role::query,    Role::key,       Role::value,     Role::output,
                                     Role::mlp_up,   Role::mlp_down,  Role::attn_norm, Role::mlp_norm,
                                     Role::attn_norm_bias, Role::mlp_norm_bias};

std::string_view role_name(Role role);

/// Name patterns for each per-layer role ("{i}" is the layer number as it
/// appears in the file) plus the non-layer tensors.
struct NamingScheme {
    std::string name;
    std::map<Role, std::string> patterns;
    /// Number used in names for the first layer (0 for LLaMA-style files).
    std::uint64_t index_base = 0;
    std::string embedding;
    std::string final_norm;
    std::string final_norm_bias;
    std::string lm_head;

    /// "model.layers.{i}.self_attn.q_proj.weight" and friends.
    static NamingScheme llama();

    /// Accepts "llama"; a layer-prefix template such as "transformer.h.{i}."
    /// (role suffixes follow the LLaMA convention); or an explicit role list
    /// "q=<pat>,k=<pat>[,v=..,o=..,up=..,down=..,attn_norm=..,mlp_norm=..][,base=<n>]".
    static NamingScheme parse(std::string_view spec);
};

struct LayerTensors {
    std::map<Role, std::string> names;

    bool has(Role role) const { return names.count(role) != 0; }
    const std::string& name(Role role) const;
};

struct LayerTensorMap {
    /// layers[0] is layer 1.
    std::vector<LayerTensors> layers;

    std::size_t num_layers() const noexcept { return layers.size(); }
    const LayerTensors& layer(std::size_t one_based) const { return layers.at(one_based - 1); }
};

/// Bind every per-layer tensor of the index to its role. Layers are numbered
/// 1..L, L being inferred from the largest matched index. Throws FormatError
/// when nothing matches or a layer lacks its query or key tensor.
LayerTensorMap enumerate_layers(const CheckpointIndex& index, const NamingScheme& scheme);

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

/// Streams a checkpoint: all entries are declared first (so the header can be
/// written), then the data of each entry is produced on demand in
/// declaration order. Peak memory is one entry's values.
class CheckpointWriter {
public:
    using Producer = std::function<std::vector<float>()>;

    void add(std::string name, DType dtype, std::vector<std::uint64_t> shape, Producer values);
    void set_metadata(std::map<std::string, std::string> metadata) { metadata_ = std::move(metadata); }

    void write(std::ostream& out) const;
    void write(const std::filesystem::path& path) const;
    std::vector<std::byte> to_bytes() const;

private:
    struct Entry {
        std::string name;
        DType dtype;
        std::vector<std::uint64_t> shape;
        Producer values;
    };
    std::vector<Entry> entries_;
    std::map<std::string, std::string> metadata_;
};

/// Encode float32 values in the given dtype, little-endian.
void encode_values(std::span<const float> values, DType dtype, std::vector<std::byte>& out);

}  // namespace gatenorm
