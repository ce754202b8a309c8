#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gatenorm/checkpoint.hpp"
#include "gatenorm/hash.hpp"
#include "gatenorm/tensor.hpp"

namespace gatenorm {

struct Model;

enum class ScoreMode { whole_matrix, per_head };

std::string_view score_mode_name(ScoreMode mode);
/// Accepts "whole"/"whole-matrix" and "per-head".
ScoreMode parse_score_mode(std::string_view name);

/// Gate-norm of one attention sublayer.
struct GateScore {
    std::size_t layer = 0;  // 1-based
    double m = 0.0;
    ScoreMode mode = ScoreMode::whole_matrix;
};

/// Wq · Wkᵀ for math-orientation (D x D) projections.
Tensor2D gate_matrix(const Tensor2D& wq, const Tensor2D& wk);

/// Frobenius norm of the gate matrix. In per-head mode the heads are the
/// contiguous column slices of width D/H and the result is
/// sqrt(sum_h |Wq^(h) Wk^(h)ᵀ|_F²).
double gate_norm(const Tensor2D& wq, const Tensor2D& wk, ScoreMode mode, std::size_t heads = 1);

/// Replicate key (or value) head blocks so a grouped-query projection
/// (D x D_kv, D_kv = kv_heads * head_dim) matches `heads` query heads.
/// Query head h reads key head h / (heads / kv_heads).
Tensor2D expand_kv_heads(const Tensor2D& w, std::size_t heads, std::size_t head_dim);

struct ScoreOptions {
    ScoreMode mode = ScoreMode::whole_matrix;
    /// Query head count. Required for per-head mode and for grouped-query
    /// checkpoints; 0 means unknown.
    std::size_t heads = 0;
};

struct CheckpointScores {
    std::vector<GateScore> scores;
    std::string fingerprint;
};

/// Score every layer, reading one layer's query and key tensors at a time and
/// releasing them before the next layer is read.
CheckpointScores score_checkpoint(const CheckpointIndex& index, const LayerTensorMap& map, const ByteSource& source,
                                  const ScoreOptions& options = {});

/// Score file: "# scores/1 mode=<mode> source_fingerprint=<fp>", then
/// "layer,gate_norm" and one row per layer in ascending order.
std::string scores_to_text(const CheckpointScores& scores);
/// Throws FormatError on any deviation from the layout above.
CheckpointScores scores_from_text(std::string_view text);

/// Same scores for an in-memory model.
CheckpointScores score_model(const Model& model, ScoreMode mode = ScoreMode::whole_matrix);

/// Fingerprint accumulated over each layer's math-orientation Wq then Wk.
class WeightFingerprint {
public:
    explicit WeightFingerprint(std::size_t num_layers);
    void add_layer(const Tensor2D& wq, const Tensor2D& wk);
    std::string hex() const { return hash_.hex(); }

private:
    Fnv1a64 hash_;
};

// ---------------------------------------------------------------------------
// Pruning plans
// ---------------------------------------------------------------------------

enum class PlanMethod { gate_norm, data_driven_attn, data_driven_block, random_attn, random_block };
enum class PruneUnit { attention_sublayer, full_block };

std::string_view method_name(PlanMethod method);
/// Accepts the canonical names and the CLI short forms data-attn / data-block.
PlanMethod parse_method(std::string_view name);
std::string_view unit_name(PruneUnit unit);
PruneUnit parse_unit(std::string_view name);
PruneUnit default_unit(PlanMethod method);

struct PruningPlan {
    PlanMethod method = PlanMethod::gate_norm;
    PruneUnit unit = PruneUnit::attention_sublayer;
    std::size_t num_layers = 0;
    /// 1-based layer indices in removal-priority order.
    std::vector<std::size_t> removed;
    /// Full per-layer score list (layer order) for score-based methods.
    std::optional<std::vector<double>> scores;
    std::string source_fingerprint;
    std::optional<std::uint64_t> seed;

    bool operator==(const PruningPlan&) const = default;
};

/// Throws ContractError unless removed indices are unique and in [1, L].
void validate_plan(const PruningPlan& plan);

/// Sort ascending by m (ties: lower layer first) and take the first n.
PruningPlan plan_one_shot(std::span<const GateScore> scores, std::size_t n, std::string fingerprint = {});

/// n distinct layers drawn uniformly without replacement: a partial
/// Fisher-Yates shuffle of 1..L driven by Rng(seed).
PruningPlan plan_random(std::size_t num_layers, std::size_t n, PruneUnit unit, std::uint64_t seed,
                        std::string fingerprint = {});

/// Remove the n lowest-importance layers (ties: lower layer first).
/// `importances` holds (layer, score) pairs, exactly one per layer 1..L.
PruningPlan plan_from_importance(std::span<const std::pair<std::size_t, double>> importances, std::size_t n,
                                 PruneUnit unit, PlanMethod method, std::string fingerprint = {});

/// "plan/1" JSON document with a stable key order.
std::string plan_to_json(const PruningPlan& plan);
PruningPlan plan_from_json(std::string_view text);

}  // namespace gatenorm
