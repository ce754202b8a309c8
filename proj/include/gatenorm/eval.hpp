#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gatenorm/model.hpp"
#include "gatenorm/scoring.hpp"

namespace gatenorm {

/// Pre-tokenized ids. On disk: "TOKS", u32 version (1), u32 vocab, u32 count,
/// then count little-endian u32 ids.
struct TokenStream {
    std::uint32_t vocab = 0;
    std::vector<std::uint32_t> ids;

    static constexpr std::uint32_t kVersion = 1;

    /// Throws ContractError on vocab 0 or an id >= vocab.
    void validate() const;

    std::vector<std::byte> to_bytes() const;
    static TokenStream from_bytes(std::span<const std::byte> bytes);
    void save(const std::filesystem::path& path) const;
    static TokenStream load(const std::filesystem::path& path);

    /// Uniform ids from Rng(seed).
    static TokenStream synthetic(std::uint32_t vocab, std::size_t count, std::uint64_t seed);

    /// Consecutive non-overlapping windows of `length` ids; the last one may
    /// be shorter.
    std::vector<std::span<const std::uint32_t>> windows(std::size_t length) const;
};

/// Sum of -log softmax(logits_t)[tokens_{t+1}] over t = 0..S-2, and the
/// number of predicted positions.
struct NllSum {
    double nll = 0.0;
    std::size_t count = 0;
};
NllSum sequence_nll(const Tensor2D& logits, std::span<const std::uint32_t> tokens);

struct PerplexityResult {
    double perplexity = 0.0;
    std::size_t predicted = 0;
    std::uint64_t macs = 0;
};

/// exp(mean next-token NLL) over all windows of `window` tokens (0 means the
/// model's max_seq). Windows do not share context.
PerplexityResult evaluate_perplexity(const Model& model, const PlanApplication& application, const TokenStream& stream,
                                     std::size_t window = 0);
double perplexity(const Model& model, const PlanApplication& application, const TokenStream& stream,
                  std::size_t window = 0);

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

enum class SublayerKind { attention, mlp };
std::string_view sublayer_name(SublayerKind kind);

struct TimingEntry {
    SublayerKind kind = SublayerKind::attention;
    std::size_t seq_len = 0;
    double median_s = 0.0;
    double min_s = 0.0;
    std::size_t runs = 0;
};

struct TimingProfile {
    std::vector<TimingEntry> entries;

    /// Throws ContractError when absent.
    const TimingEntry& at(SublayerKind kind, std::size_t seq_len) const;
};

struct ProfileOptions {
    std::size_t runs = 5;
    std::size_t warmup = 2;
    std::uint64_t seed = 1;
};

/// Time attention_forward and mlp_forward of the first block on random
/// post-norm activations. Only one profile may run per process at a time.
TimingProfile profile_sublayers(const Model& model, std::span<const std::size_t> lengths,
                                const ProfileOptions& options = {});

// ---------------------------------------------------------------------------
// Plans and sweeps
// ---------------------------------------------------------------------------

struct PlanOverlap {
    std::vector<std::size_t> shared;
    std::vector<std::size_t> only_a;
    std::vector<std::size_t> only_b;
    double jaccard = 1.0;
};

/// Set comparison of removed layers. Two empty plans have Jaccard 1. Throws
/// ContractError on differing unit or layer count.
PlanOverlap plan_overlap(const PruningPlan& a, const PruningPlan& b);

struct SweepRow {
    PlanMethod method = PlanMethod::gate_norm;
    std::size_t n = 0;
    double perplexity = 0.0;
    double flop_reduction = 0.0;
};

struct SweepOptions {
    std::vector<PlanMethod> methods = {PlanMethod::gate_norm, PlanMethod::data_driven_attn,
                                       PlanMethod::data_driven_block, PlanMethod::random_attn};
    std::vector<std::size_t> counts = {0, 1, 2, 4};
    std::size_t window = 0;
    /// Seed for the random planners.
    std::uint64_t plan_seed = 1;
    /// Sequences for the data-driven importances; empty means the evaluation
    /// stream itself.
    const TokenStream* calibration = nullptr;
};

/// One row per (method, N) in the given order. Scores and importances are
/// computed once per method.
std::vector<SweepRow> sweep(const Model& model, const TokenStream& stream, const SweepOptions& options);

/// "# report/1 sweep" line, then "method,N,perplexity,flop_reduction".
std::string sweep_to_csv(std::span<const SweepRow> rows);

/// Data-driven importance of every layer over the given windows:
/// Imp_attn for data-driven-attn, Imp_block for data-driven-block.
std::vector<std::pair<std::size_t, double>> data_importances(const Model& model, const TokenStream& stream,
                                                             PlanMethod method, std::size_t window = 0);

}  // namespace gatenorm
