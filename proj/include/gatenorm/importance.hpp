#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gatenorm/model.hpp"
#include "gatenorm/tensor.hpp"

namespace gatenorm {

// ---------------------------------------------------------------------------
// Cosine importances
// ---------------------------------------------------------------------------

struct ImportanceOptions {
    /// Subtract each sequence's mean token from both sides before comparing.
    bool centered = false;
    /// Per trace, per position; true marks a padding token that is left out
    /// of every average. Empty means no padding anywhere.
    std::vector<std::vector<bool>> padding;
};

/// 1 - mean cos(X_l, X_{l+1}) for every layer. Needs captured inputs.
std::vector<double> block_importance(std::span<const ForwardTrace> traces, const ImportanceOptions& options = {});
/// 1 - mean cos(X_l, Y_l). Needs captured inputs and post-attention states.
std::vector<double> attn_importance(std::span<const ForwardTrace> traces, const ImportanceOptions& options = {});
/// 1 - mean cos(Y_l, X_{l+1}).
std::vector<double> mlp_importance(std::span<const ForwardTrace> traces, const ImportanceOptions& options = {});
/// sum_t |AttnOut_l,t| / sum_t |X_l,t|. A zero denominator is a ContractError.
std::vector<double> norm_ratio(std::span<const ForwardTrace> traces, const ImportanceOptions& options = {});

/// 1 - mean over rows of cos(a_t, b_t) for one pair of S x D activations,
/// optionally centering both first. Used by the sweeps that only need a
/// single layer.
double pair_importance(const Tensor2D& a, const Tensor2D& b, bool centered);

struct LayerImportance {
    std::size_t layer = 0;
    double imp_block = 0.0;
    double imp_attn = 0.0;
    double imp_mlp = 0.0;
    double norm_ratio = 0.0;
    double gate_norm = 0.0;

    bool operator==(const LayerImportance&) const = default;
};

struct ImportanceReport {
    std::vector<LayerImportance> layers;
    std::size_t tokens = 0;
    bool centered = false;

    static constexpr std::string_view kHeader = "layer,imp_block,imp_attn,imp_mlp,norm_ratio,gate_norm,tokens,centered";

    std::string to_csv() const;
    /// Throws FormatError on a wrong header, bad numbers or mixed token counts.
    static ImportanceReport from_csv(std::string_view text);

    bool operator==(const ImportanceReport&) const = default;
};

/// Every measure for every layer. Traces must capture everything but logits.
ImportanceReport build_report(const Model& model, std::span<const ForwardTrace> traces,
                              const ImportanceOptions& options = {});

// ---------------------------------------------------------------------------
// Bound validators
// ---------------------------------------------------------------------------

/// Outcome of one validator. Slack is bound minus measured quantity, so a
/// sound bound keeps every slack >= 0; a result passes when min_slack >= -1e-6
/// and max_residual stays under its tolerance.
struct BoundCheckResult {
    std::string name;
    std::size_t trials = 0;
    double min_slack = 0.0;
    double max_residual = 0.0;
    double residual_tolerance = 0.0;
    std::map<std::string, double> constants;
    std::string detail;
    bool passed = false;

    static constexpr double kSlackTolerance = 1e-6;

    /// Recompute `passed` from the slack and residual fields.
    void finish();
    /// Fold another result of the same check into this one.
    void merge(const BoundCheckResult& other);
};

/// |u|² = |x+u|² + |x|² - 2|x||x+u|cos(x, x+u) (relative residual, limit
/// 1e-5) and | |x+u| - |x| | <= |u|. The sum x + u is formed in float.
BoundCheckResult law_of_cosines_check(std::span<const float> x, std::span<const float> u);

/// |z_iᵀ M z_j| / sqrt(d_h) <= |z_i| |z_j| |M|_F / sqrt(d_h) for all i, j.
/// Logits come from the float kernels; slack is reported relative to the
/// bound so that it is scale-free.
BoundCheckResult logit_bound_check(const Tensor2D& z, const Tensor2D& m, std::size_t head_dim);

enum class SoftmaxFault {
    none,
    /// Exponentiate the numerator with exp(x - max) but the normalizer with
    /// exp(x + max): the sign of the stabilizing shift flipped in one place.
    negated_stabilizer,
};

/// Softmax of row[0, support) with an optional seeded fault.
Vector checked_softmax(std::span<const float> row, std::size_t support, SoftmaxFault fault = SoftmaxFault::none);

/// For each row with max |L| = eps over its support of size S', requires
/// max_j |A_j - 1/S'| <= (e^{2 eps} - 1) / S' and that A sums to 1 within 1e-6.
BoundCheckResult softmax_uniformity_check(std::span<const Vector> logit_rows, std::span<const std::size_t> supports,
                                          SoftmaxFault fault = SoftmaxFault::none);

struct UpdateDecomposition {
    Vector u;      // support-mean of the value rows
    Vector delta;  // sum_j (A_j - 1/S') v_j
    BoundCheckResult check;
};

/// Split one attention output row into the shared shift u and the
/// token-specific part delta. `attn_row` is the engine's output for the row;
/// the reconstruction residual is measured relative to the largest value
/// entry. Also checks |delta| <= (sum_j |A_j - 1/S'|) max_j |v_j|.
UpdateDecomposition update_decomposition(std::span<const float> weights, const Tensor2D& value_rows,
                                         std::span<const float> attn_row);

struct SweepPoint {
    double t = 0.0;    // Wq scale
    double m = 0.0;    // gate-norm at that scale
    double imp = 0.0;  // importance at that scale
};

/// C = max(imp / m) over points with t <= 0.1 and m > 0; requires
/// imp <= 1.05 C m at every point with m > 0 and imp <= 1e-5 where m = 0.
/// Also reports the log-log slope of imp against m (must be >= 0.8).
/// Needs at least 3 distinct t values.
BoundCheckResult importance_bound_fit(std::span<const SweepPoint> points);

// ---------------------------------------------------------------------------
// Randomized suites
// ---------------------------------------------------------------------------

struct SuiteOptions {
    std::uint64_t seed = 1;
    std::size_t cosine_trials = 10000;
    std::size_t logit_trials = 10000;
    std::size_t softmax_rows = 1000;  // per epsilon
    std::vector<double> epsilons = {1e-3, 1e-2, 1e-1};
    std::size_t decomposition_rows = 1000;
    std::size_t sweep_seeds = 4;
    std::vector<double> sweep_scales = {1.0, 1e-1, 1e-2, 1e-3};
    SoftmaxFault fault = SoftmaxFault::none;
};

BoundCheckResult run_cosine_suite(const SuiteOptions& options);
BoundCheckResult run_logit_suite(const SuiteOptions& options);
BoundCheckResult run_uniformity_suite(const SuiteOptions& options);
BoundCheckResult run_decomposition_suite(const SuiteOptions& options);

struct ScaleSweepOptions {
    ModelConfig config;  // causal is forced off: the shared shift must be row-independent
    std::size_t layer = 0;  // 0 means the middle layer
    std::size_t sequences = 4;
    std::size_t seq_len = 64;
    std::vector<double> scales = {1.0, 1e-1, 1e-2, 1e-3};
    bool centered = true;
};

/// Scale Wq of one layer by each t and record (t, m, Imp_attn) for the model
/// init_random(config, seed). Earlier layers are unaffected, so the layer
/// input is computed once.
std::vector<SweepPoint> scale_sweep(const ScaleSweepOptions& options, std::uint64_t seed);

/// As scale_sweep, but records max_i |AttnOut_i - u| (the distance from the
/// uniform-attention limit) in place of the importance.
std::vector<SweepPoint> suppression_limit_sweep(const ScaleSweepOptions& options, std::uint64_t seed);

/// Least-squares slope of log(y) against log(x) over points with x, y > 0.
double loglog_slope(std::span<const double> x, std::span<const double> y);

BoundCheckResult run_importance_bound_suite(const SuiteOptions& options);

/// The five checks in a fixed order: logit bound, softmax uniformity, update
/// decomposition, law of cosines, importance bound.
std::vector<BoundCheckResult> run_bound_suite(const SuiteOptions& options);

std::string bound_results_to_json(std::span<const BoundCheckResult> results);

}  // namespace gatenorm
