#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "gatenorm/checkpoint.hpp"
#include "gatenorm/model.hpp"
#include "gatenorm/scoring.hpp"
#include "test_support.hpp"

namespace gatenorm {
namespace {

std::vector<std::byte> assemble(const std::string& header, std::size_t data_bytes, std::byte fill = std::byte{0}) {
    std::vector<std::byte> out(8);
    const std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) out[i] = static_cast<std::byte>((n >> (8 * i)) & 0xff);
    for (const char c : header) out.push_back(static_cast<std::byte>(c));
    out.insert(out.end(), data_bytes, fill);
    return out;
}

std::vector<std::byte> f32_bytes(std::initializer_list<float> values) {
    std::vector<std::byte> out;
    for (const float v : values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((bits >> (8 * i)) & 0xff));
    }
    return out;
}

HeaderFault fault_of(const std::vector<std::byte>& file) {
    try {
        parse_header(file, file.size());
    } catch (const HeaderError& e) {
        return e.fault();
    }
    ADD_FAILURE() << "header was accepted";
    return HeaderFault::truncated;
}

std::string record_of(const std::vector<std::byte>& file) {
    try {
        parse_header(file, file.size());
    } catch (const HeaderError& e) {
        return e.record();
    }
    return "<accepted>";
}

TEST(ParseHeader, HandAssembledSingleTensor) {
    const std::string header = R"({"a":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})";
    auto file = assemble(header, 0);
    const auto data = f32_bytes({1, 2, 3, 4});
    file.insert(file.end(), data.begin(), data.end());
    const CheckpointIndex index = parse_header(file, file.size());
    ASSERT_EQ(index.records().size(), 1u);
    const TensorRecord& a = index.at("a");
    EXPECT_EQ(a.range.begin, 0u);
    EXPECT_EQ(a.range.end, 16u);
    EXPECT_EQ(a.dtype, DType::f32);
    EXPECT_EQ(index.header_bytes(), header.size());
    EXPECT_EQ(index.data_region_length(), 16u);

    MemorySource src(file);
    EXPECT_EQ(read_tensor(index, "a", src), Tensor2D::from_rows({{1, 2}, {3, 4}}));
    EXPECT_EQ(read_tensor_transposed(index, "a", src), Tensor2D::from_rows({{1, 3}, {2, 4}}));
}

TEST(ParseHeader, EmptyRecordSet) {
    const auto file = assemble("{}", 0);
    EXPECT_TRUE(parse_header(file, file.size()).records().empty());
}

TEST(ParseHeader, MetadataIsKept) {
    const auto file = assemble(R"({"__metadata__":{"k":"v"}})", 0);
    const auto index = parse_header(file, file.size());
    EXPECT_TRUE(index.records().empty());
    EXPECT_EQ(nlohmann::json::parse(index.metadata_json())["k"], "v");
}

TEST(ParseHeader, EachFaultIsDistinctAndNamesTheRecord) {
    EXPECT_EQ(fault_of(std::vector<std::byte>(5)), HeaderFault::truncated);
    auto zero_len = assemble("{}", 0);
    std::fill(zero_len.begin(), zero_len.begin() + 8, std::byte{0});
    EXPECT_EQ(fault_of(zero_len), HeaderFault::malformed_length);
    auto long_len = assemble("{}", 0);
    long_len[0] = std::byte{0xff};
    EXPECT_EQ(fault_of(long_len), HeaderFault::malformed_length);

    std::string bad_utf8 = R"({"a":"x"})";
    bad_utf8[7] = static_cast<char>(0xff);
    EXPECT_EQ(fault_of(assemble(bad_utf8, 0)), HeaderFault::non_utf8);
    EXPECT_EQ(fault_of(assemble("{\"a\":", 0)), HeaderFault::invalid_json);
    EXPECT_EQ(fault_of(assemble("[1,2]", 0)), HeaderFault::invalid_json);

    const auto bad_record = assemble(R"({"w":{"dtype":"F32","shape":[2,2]}})", 16);
    EXPECT_EQ(fault_of(bad_record), HeaderFault::bad_record);
    EXPECT_EQ(record_of(bad_record), "w");

    const auto unknown = assemble(R"({"w":{"dtype":"I8","shape":[2,2],"data_offsets":[0,4]}})", 4);
    EXPECT_EQ(fault_of(unknown), HeaderFault::unknown_dtype);
    EXPECT_EQ(record_of(unknown), "w");

    EXPECT_EQ(fault_of(assemble(R"({"w":{"dtype":"F32","shape":[0,2],"data_offsets":[0,4]}})", 4)),
              HeaderFault::bad_shape);
    EXPECT_EQ(fault_of(assemble(R"({"w":{"dtype":"F32","shape":[-1,2],"data_offsets":[0,4]}})", 4)),
              HeaderFault::bad_shape);

    const auto mismatch = assemble(R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,15]}})", 16);
    EXPECT_EQ(fault_of(mismatch), HeaderFault::shape_size_mismatch);
    EXPECT_EQ(record_of(mismatch), "w");

    EXPECT_EQ(fault_of(assemble(R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})", 8)),
              HeaderFault::out_of_bounds);

    const auto overlap = assemble(
        R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}})",
        12);
    EXPECT_EQ(fault_of(overlap), HeaderFault::overlapping_ranges);
    EXPECT_EQ(record_of(overlap), "b");
}

// Independent check of every index invariant, used to judge fuzz survivors.
void expect_index_invariants(const CheckpointIndex& index) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
    for (const auto& [name, rec] : index.records()) {
        std::uint64_t elements = 1;
        for (const auto d : rec.shape) {
            ASSERT_GT(d, 0u) << name;
            elements *= d;
        }
        ASSERT_LT(rec.range.begin, rec.range.end) << name;
        ASSERT_LE(rec.range.end, index.data_region_length()) << name;
        ASSERT_EQ(rec.range.length(), elements * dtype_size(rec.dtype)) << name;
        ranges.emplace_back(rec.range.begin, rec.range.end);
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i) ASSERT_LE(ranges[i - 1].second, ranges[i].first);
}

TEST(ParseHeader, FuzzedMutationsAreClassified) {
    ModelConfig config;
    config.num_layers = 2;
    config.dim = 8;
    config.heads = 2;
    config.ffn_dim = 16;
    config.vocab = 16;
    const auto valid = synth_checkpoint_bytes(config, 1, {});
    std::uint64_t n = 0;
    for (int i = 7; i >= 0; --i) n = (n << 8) | std::to_integer<std::uint64_t>(valid[i]);

    Rng rng(99);
    std::size_t rejected = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto file = valid;
        switch (rng.below(6)) {
            case 0:  // flip random header bits
                for (int k = 0; k < 1 + static_cast<int>(rng.below(4)); ++k) {
                    file[8 + rng.below(n)] ^= static_cast<std::byte>(1u << rng.below(8));
                }
                break;
            case 1:  // overwrite a header byte with a structural character
                file[8 + rng.below(n)] = static_cast<std::byte>("{}[],:\"0123456789-"[rng.below(18)]);
                break;
            case 2:  // truncate
                file.resize(rng.below(file.size()));
                break;
            case 3:  // corrupt the length prefix
                file[rng.below(8)] = static_cast<std::byte>(rng.below(256));
                break;
            case 4: {  // replace a digit in the header with another digit
                std::vector<std::size_t> digits;
                for (std::size_t i = 8; i < 8 + n; ++i) {
                    const char c = static_cast<char>(file[i]);
                    if (c >= '0' && c <= '9') digits.push_back(i);
                }
                file[digits[rng.below(digits.size())]] = static_cast<std::byte>('0' + rng.below(10));
                break;
            }
            default:  // drop the data region tail
                file.resize(8 + n + rng.below(file.size() - 8 - n));
                break;
        }
        try {
            const CheckpointIndex index = parse_header(file, file.size());
            expect_index_invariants(index);
        } catch (const HeaderError& e) {
            ++rejected;
            EXPECT_FALSE(header_fault_name(e.fault()).empty());
        }
        // Any other exception type escapes and fails the test.
    }
    EXPECT_GT(rejected, 500u);
}

TEST(Decode, HalfAndBfloatConventions) {
    EXPECT_EQ(half_to_float(0x3C00), 1.0f);
    EXPECT_EQ(bf16_to_float(0xC000), -2.0f);
    // Independent decode of every half bit pattern from the IEEE-754 field layout.
    for (std::uint32_t bits = 0; bits < 0x10000; ++bits) {
        const int sign = (bits >> 15) & 1;
        const int exp = (bits >> 10) & 0x1f;
        const int mant = bits & 0x3ff;
        double ref;
        if (exp == 0x1f) continue;
        if (exp == 0) {
            ref = std::ldexp(mant, -24);
        } else {
            ref = std::ldexp(1024 + mant, exp - 25);
        }
        if (sign) ref = -ref;
        ASSERT_EQ(half_to_float(static_cast<std::uint16_t>(bits)), static_cast<float>(ref)) << bits;
    }
    EXPECT_TRUE(std::isinf(half_to_float(0x7C00)));
    EXPECT_TRUE(std::isnan(half_to_float(0x7E00)));
    for (std::uint32_t bits = 0; bits < 0x10000; bits += 7) {
        const std::uint32_t wide = bits << 16;
        float ref;
        std::memcpy(&ref, &wide, 4);
        if (std::isnan(ref)) continue;
        ASSERT_EQ(bf16_to_float(static_cast<std::uint16_t>(bits)), ref);
    }
}

TEST(Decode, HalfEncodeRoundsToNearest) {
    Rng rng(5);
    for (int i = 0; i < 10000; ++i) {
        const float x = static_cast<float>(rng.normal() * 10);
        const float y = half_to_float(float_to_half(x));
        // Nearest representable half: no neighbour is closer.
        const std::uint16_t h = float_to_half(x);
        const float up = half_to_float(static_cast<std::uint16_t>(h + 1));
        const float down = half_to_float(static_cast<std::uint16_t>(h - 1));
        ASSERT_LE(std::abs(y - x), std::abs(up - x));
        ASSERT_LE(std::abs(y - x), std::abs(down - x));
    }
}

TEST(ReadTensor, ErrorsAreReported) {
    const std::string header =
        R"({"a":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]},"g":{"dtype":"F32","shape":[4],"data_offsets":[16,32]}})";
    const auto file = assemble(header, 32);
    const auto index = parse_header(file, file.size());
    MemorySource src(file);
    EXPECT_THROW(read_tensor(index, "missing", src), FormatError);
    EXPECT_THROW(read_tensor(index, "g", src), FormatError);
    EXPECT_EQ(read_vector(index, "g", src).size(), 4u);
    EXPECT_THROW(read_vector(index, "a", src), FormatError);
    const std::vector<std::byte> short_file(file.begin(), file.end() - 4);
    MemorySource short_src(short_file);
    EXPECT_THROW(read_vector(index, "g", short_src), IoError);
}

ModelConfig small_config(std::size_t layers = 4) {
    ModelConfig c;
    c.num_layers = layers;
    c.dim = 16;
    c.heads = 4;
    c.ffn_dim = 32;
    c.vocab = 32;
    c.max_seq = 16;
    return c;
}

TEST(EnumerateLayers, SynthesizedLlamaNames) {
    const auto bytes = synth_checkpoint_bytes(small_config(4), 3, {});
    const auto index = parse_header(bytes, bytes.size());
    const auto map = enumerate_layers(index, NamingScheme::llama());
    ASSERT_EQ(map.num_layers(), 4u);
    for (std::size_t l = 1; l <= 4; ++l) {
        for (const Role r : {Role::query, Role::key, Role::value, Role::output, Role::mlp_up, Role::mlp_down,
                             Role::attn_norm, Role::mlp_norm}) {
            EXPECT_TRUE(map.layer(l).has(r)) << l << " " << role_name(r);
        }
        EXPECT_EQ(map.layer(l).name(Role::query), fmt::format("model.layers.{}.self_attn.q_proj.weight", l - 1));
    }
}

TEST(EnumerateLayers, MissingKeyNamesLayer) {
    CheckpointWriter w;
    for (int i = 0; i < 4; ++i) {
        w.add(fmt::format("model.layers.{}.self_attn.q_proj.weight", i), DType::f32, {2, 2},
              [] { return std::vector<float>(4, 1.0f); });
        if (i != 2) {
            w.add(fmt::format("model.layers.{}.self_attn.k_proj.weight", i), DType::f32, {2, 2},
                  [] { return std::vector<float>(4, 1.0f); });
        }
    }
    const auto bytes = w.to_bytes();
    const auto index = parse_header(bytes, bytes.size());
    try {
        enumerate_layers(index, NamingScheme::llama());
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 3"), std::string::npos) << e.what();
    }
}

TEST(EnumerateLayers, CustomPatternWithoutMatches) {
    const auto bytes = synth_checkpoint_bytes(small_config(2), 3, {});
    const auto index = parse_header(bytes, bytes.size());
    EXPECT_THROW(enumerate_layers(index, NamingScheme::parse("transformer.h.{i}.")), FormatError);
    EXPECT_THROW(NamingScheme::parse("nothing"), UsageError);
}

TEST(EnumerateLayers, CustomRolePatternsAndBase) {
    CheckpointWriter w;
    for (int i = 1; i <= 3; ++i) {
        w.add(fmt::format("blk{}.wq", i), DType::f32, {2, 2}, [] { return std::vector<float>(4, 1.0f); });
        w.add(fmt::format("blk{}.wk", i), DType::f32, {2, 2}, [] { return std::vector<float>(4, 1.0f); });
    }
    const auto bytes = w.to_bytes();
    const auto index = parse_header(bytes, bytes.size());
    const auto map = enumerate_layers(index, NamingScheme::parse("q=blk{i}.wq,k=blk{i}.wk,base=1"));
    ASSERT_EQ(map.num_layers(), 3u);
    EXPECT_EQ(map.layer(1).name(Role::key), "blk1.wk");
    EXPECT_FALSE(map.layer(1).has(Role::value));
}

TEST(Synth, Deterministic) {
    const std::vector<SuppressionEntry> sup = {{2, 0.5f}};
    EXPECT_EQ(synth_checkpoint_bytes(small_config(), 7, sup), synth_checkpoint_bytes(small_config(), 7, sup));
    EXPECT_NE(synth_checkpoint_bytes(small_config(), 7, sup), synth_checkpoint_bytes(small_config(), 8, sup));
}

TEST(Synth, SuppressionScalesGateNorm) {
    ModelConfig c = small_config(8);
    c.dim = 64;
    const auto plain = synth_checkpoint_bytes(c, 11, {});
    const std::vector<SuppressionEntry> sup = {{5, 1e-3f}};
    const auto suppressed = synth_checkpoint_bytes(c, 11, sup);
    const auto score = [](const std::vector<std::byte>& b) {
        const auto index = parse_header(b, b.size());
        MemorySource src(b);
        return score_checkpoint(index, enumerate_layers(index, NamingScheme::llama()), src).scores;
    };
    const auto a = score(plain);
    const auto b = score(suppressed);
    for (std::size_t l = 0; l < 8; ++l) {
        const double expected = l == 4 ? 1e-3 * a[l].m : a[l].m;
        EXPECT_LE(testing::rel_diff(b[l].m, expected), 1e-5) << "layer " << l + 1;
    }
}

TEST(Synth, UnsuppressedScoresShareOrderOfMagnitude) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ModelConfig c = small_config(8);
        c.dim = 64;
        const auto bytes = synth_checkpoint_bytes(c, seed, {});
        const auto index = parse_header(bytes, bytes.size());
        MemorySource src(bytes);
        const auto scores = score_checkpoint(index, enumerate_layers(index, NamingScheme::llama()), src).scores;
        double lo = scores[0].m, hi = scores[0].m;
        for (const auto& s : scores) {
            lo = std::min(lo, s.m);
            hi = std::max(hi, s.m);
        }
        EXPECT_LT(hi / lo, 10.0) << "seed " << seed;
    }
}

TEST(Synth, RejectsBadSuppression) {
    const std::vector<SuppressionEntry> out_of_range = {{9, 0.5f}};
    EXPECT_THROW(synth_checkpoint_bytes(small_config(4), 1, out_of_range), ContractError);
    const std::vector<SuppressionEntry> zero = {{1, 0.0f}};
    EXPECT_THROW(synth_checkpoint_bytes(small_config(4), 1, zero), ContractError);
}

TEST(Synth, RoundTripIsBitwiseForF32AndBoundedForHalf) {
    const ModelConfig c = small_config(3);
    const Model model = init_random(c, 21);
    for (const DType dt : {DType::f32, DType::f16, DType::bf16}) {
        SynthOptions options;
        options.dtype = dt;
        const auto bytes = synth_checkpoint_bytes(c, 21, {}, options);
        const auto index = parse_header(bytes, bytes.size());
        MemorySource src(bytes);
        const auto map = enumerate_layers(index, NamingScheme::llama());
        for (std::size_t l = 1; l <= 3; ++l) {
            const Tensor2D wq = read_tensor_transposed(index, map.layer(l).name(Role::query), src);
            const Tensor2D& ref = model.blocks[l - 1].wq;
            if (dt == DType::f32) {
                EXPECT_EQ(wq, ref);
            } else {
                const double rel = dt == DType::f16 ? std::ldexp(1.0, -11) : std::ldexp(1.0, -8);
                for (std::size_t i = 0; i < ref.size(); ++i) {
                    ASSERT_LE(std::abs(wq.values()[i] - ref.values()[i]), rel * std::abs(ref.values()[i]) + 1e-7);
                }
            }
        }
    }
}

TEST(Synth, QkOnlyHoldsOnlyProjectionsNeededForScoring) {
    SynthOptions options;
    options.qk_only = true;
    const auto bytes = synth_checkpoint_bytes(small_config(2), 1, {}, options);
    const auto index = parse_header(bytes, bytes.size());
    EXPECT_EQ(index.records().size(), 4u);
    const auto map = enumerate_layers(index, NamingScheme::llama());
    EXPECT_FALSE(map.layer(1).has(Role::value));
}

TEST(Writer, StreamAndBytesAgree) {
    CheckpointWriter w;
    w.add("x", DType::f16, {3}, [] { return std::vector<float>{1, 2, 3}; });
    w.set_metadata({{"k", "v"}});
    std::ostringstream os;
    w.write(os);
    const std::string s = os.str();
    const auto bytes = w.to_bytes();
    ASSERT_EQ(s.size(), bytes.size());
    EXPECT_EQ(std::memcmp(s.data(), bytes.data(), s.size()), 0);
    const auto index = parse_header(bytes, bytes.size());
    MemorySource src(bytes);
    EXPECT_EQ(read_vector(index, "x", src), (std::vector<float>{1, 2, 3}));
}

}  // namespace
}  // namespace gatenorm
