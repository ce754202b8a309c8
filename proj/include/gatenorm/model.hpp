#pragma once

// Desk-scale decoder-only transformer. Pre-norm blocks:
//
//   Z = Norm(X)         AttnOut = MHA(Z)      Y = X + AttnOut
//   U = Norm(Y)         MLP = Act(U W1) W2    X' = Y + MLP
//
// All projections are stored in math orientation (activations multiply from
// the left: Q = Z Wq), heads are contiguous column slices of width D/H, and
// per-head outputs are concatenated before Wo.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gatenorm/checkpoint.hpp"
#include "gatenorm/scoring.hpp"
#include "gatenorm/tensor.hpp"

namespace gatenorm {

struct ModelConfig {
    std::size_t num_layers = 8;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t vocab = 256;
    std::size_t max_seq = 128;
    NormKind norm = NormKind::rms_norm;
    ActivationKind act = ActivationKind::gelu;
    bool causal = true;
    bool rope = false;
    float norm_eps = 1e-5f;
    float rope_base = 10000.0f;

    std::size_t head_dim() const { return dim / heads; }
    /// Throws ContractError on zero counts or D not divisible by H.
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(std::string_view text);
    bool operator==(const ModelConfig&) const = default;
};

/// Scale Wq of one layer (1-based) by `factor`.
struct SuppressionEntry {
    std::size_t layer = 0;
    float factor = 1.0f;
};

/// Parse "5:1e-3,7:1e-3".
std::vector<SuppressionEntry> parse_suppression(std::string_view text);

struct NormParams {
    Vector gain;
    Vector bias;  // empty for RMSNorm
};

struct BlockWeights {
    Tensor2D wq, wk, wv, wo;  // D x D
    Tensor2D w1;              // D x F
    Tensor2D w2;              // F x D
    NormParams attn_norm;
    NormParams mlp_norm;
};

struct Model {
    ModelConfig config;
    Tensor2D embedding;  // V x D
    std::vector<BlockWeights> blocks;
    NormParams final_norm;
    Tensor2D head;  // D x V
};

/// Tensors a model is built from. Each one is drawn from its own stream
/// seeded by (seed, tensor kind, layer), so any subset can be regenerated
/// independently of the rest.
enum class WeightKind { embedding, query, key, value, output, mlp_up, mlp_down, head };

/// Deterministic initial value of one tensor, in math orientation, before
/// suppression. Entries are N(0, 1/D); the embedding is N(0, 1).
Tensor2D init_weight(const ModelConfig& config, std::uint64_t seed, WeightKind kind, std::size_t layer);

/// Seeded model; suppression multiplies the chosen layers' Wq. Factors must
/// be finite and >= 0.
Model init_random(const ModelConfig& config, std::uint64_t seed, std::span<const SuppressionEntry> suppression = {});

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct LayerFlags {
    /// Skip the attention sublayer entirely: AttnOut = 0, Y = X.
    bool attn_disabled = false;
    /// Skip the whole block: X' = X.
    bool block_disabled = false;
    /// Compute attention, then discard its output. Arithmetically the same as
    /// attn_disabled; exists to check that equivalence.
    bool zero_attn_out = false;
};

class PlanApplication {
public:
    static PlanApplication none(std::size_t num_layers);
    /// Throws ContractError when the plan's layer count differs.
    static PlanApplication from_plan(const PruningPlan& plan, std::size_t num_layers);

    const std::vector<LayerFlags>& flags() const noexcept { return flags_; }
    std::vector<LayerFlags>& flags() noexcept { return flags_; }
    std::size_t attention_removed() const;
    std::size_t blocks_removed() const;

private:
    std::vector<LayerFlags> flags_;
};

struct CaptureFlags {
    bool inputs = true;    // X_l
    bool attn_out = true;  // AttnOut_l
    bool post_attn = true; // Y_l
    bool mlp_out = true;   // MLP_l
    bool logits = true;

    static CaptureFlags all() { return {}; }
    static CaptureFlags logits_only() { return {false, false, false, false, true}; }
};

/// Per-layer activations, all S x D. Vectors are indexed by layer - 1;
/// `x` has L + 1 entries, x[L] being the residual stream after the last
/// block. Tensors not selected by the capture flags are left empty.
struct ForwardTrace {
    std::vector<Tensor2D> x;
    std::vector<Tensor2D> attn_out;
    std::vector<Tensor2D> y;
    std::vector<Tensor2D> mlp_out;
    Tensor2D logits;  // S x V
    std::uint64_t macs = 0;
};

/// Multi-head attention over post-norm activations Z (S x D). `macs`, when
/// given, is incremented by 4 S D² + 2 S² D.
Tensor2D attention_forward(const Tensor2D& z, const BlockWeights& weights, const ModelConfig& config,
                           std::uint64_t* macs = nullptr);

/// Internals of one attention call, for the bound validators.
struct AttentionDetail {
    std::vector<Tensor2D> logits;         // per head, S x S, scaled by 1/sqrt(d_h), before masking
    std::vector<Tensor2D> probabilities;  // per head, S x S
    std::vector<Tensor2D> value_out;      // per head, V^(h) Wo^(h), S x D
    Tensor2D output;                      // sum_h probabilities[h] * value_out[h]
};
AttentionDetail attention_detail(const Tensor2D& z, const BlockWeights& weights, const ModelConfig& config);

/// Act(U W1) W2. `macs` is incremented by 2 S D F.
Tensor2D mlp_forward(const Tensor2D& u, const BlockWeights& weights, const ModelConfig& config,
                     std::uint64_t* macs = nullptr);

Tensor2D apply_norm(const Tensor2D& x, const NormParams& params, const ModelConfig& config);

struct BlockCapture {
    Tensor2D attn_out;
    Tensor2D post_attn;
    Tensor2D mlp_out;
};

/// One block. Fills `capture` (when non-null) with AttnOut, Y and MLP.
Tensor2D block_forward(const Tensor2D& x, const BlockWeights& weights, const ModelConfig& config,
                       const LayerFlags& flags, BlockCapture* capture = nullptr, std::uint64_t* macs = nullptr);

/// Embedding lookup, L blocks, final norm and output head.
ForwardTrace model_forward(std::span<const std::uint32_t> tokens, const Model& model,
                           const PlanApplication& application, const CaptureFlags& capture = {});

/// Multiply-accumulates of one attention sublayer at sequence length s.
std::uint64_t attention_macs(const ModelConfig& config, std::size_t s);
std::uint64_t mlp_macs(const ModelConfig& config, std::size_t s);

// ---------------------------------------------------------------------------
// Checkpoint binding
// ---------------------------------------------------------------------------

/// Build a model from a checkpoint whose per-layer tensors are bound by `map`
/// and whose global tensors follow `scheme`. Stored (out, in) projections are
/// transposed to math orientation; grouped-query key/value projections are
/// expanded to all query heads.
Model load_from_checkpoint(const CheckpointIndex& index, const LayerTensorMap& map, const NamingScheme& scheme,
                           const ByteSource& source, const ModelConfig& config);

struct SynthOptions {
    DType dtype = DType::f32;
    /// Only write query and key projections (enough for scoring).
    bool qk_only = false;
};

/// Serialize the model init_random(config, seed, suppression) with LLaMA-style
/// names, streaming one tensor at a time. Suppression factors must be > 0.
void synth_checkpoint(const ModelConfig& config, std::uint64_t seed, std::span<const SuppressionEntry> suppression,
                      std::ostream& out, const SynthOptions& options = {});
std::vector<std::byte> synth_checkpoint_bytes(const ModelConfig& config, std::uint64_t seed,
                                              std::span<const SuppressionEntry> suppression,
                                              const SynthOptions& options = {});

/// Write an in-memory model with LLaMA-style names.
void write_model_checkpoint(const Model& model, std::ostream& out, DType dtype = DType::f32);

}  // namespace gatenorm
