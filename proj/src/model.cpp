#include "gatenorm/model.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <cmath>
#include <ostream>
#include <sstream>

#include <fmt/core.h>
#include <json.hpp>

#include "gatenorm/rng.hpp"

namespace gatenorm {

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (num_layers == 0 || dim == 0 || heads == 0 || ffn_dim == 0 || vocab == 0 || max_seq == 0) {
        throw ContractError("model config counts must all be positive");
    }
    if (dim % heads != 0) throw ContractError(fmt::format("dim {} is not divisible by {} heads", dim, heads));
    if (rope && head_dim() % 2 != 0) throw ContractError("rotary embeddings need an even head size");
    if (!(norm_eps >= 0.0f)) throw ContractError("norm_eps must be >= 0");
}

std::string ModelConfig::to_json() const {
    nlohmann::ordered_json j;
    j["num_layers"] = num_layers;
    j["dim"] = dim;
    j["heads"] = heads;
    j["ffn_dim"] = ffn_dim;
    j["vocab"] = vocab;
    j["max_seq"] = max_seq;
    j["norm"] = norm == NormKind::rms_norm ? "rms" : "layer";
    j["act"] = act == ActivationKind::gelu ? "gelu" : "silu";
    j["causal"] = causal;
    j["rope"] = rope;
    j["norm_eps"] = norm_eps;
    j["rope_base"] = rope_base;
    return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw FormatError("model config is not a JSON object");
    ModelConfig c;
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            const auto& v = it.value();
            if (k == "num_layers") c.num_layers = v.get<std::size_t>();
            else if (k == "dim") c.dim = v.get<std::size_t>();
            else if (k == "heads") c.heads = v.get<std::size_t>();
            else if (k == "ffn_dim") c.ffn_dim = v.get<std::size_t>();
            else if (k == "vocab") c.vocab = v.get<std::size_t>();
            else if (k == "max_seq") c.max_seq = v.get<std::size_t>();
            else if (k == "causal") c.causal = v.get<bool>();
            else if (k == "rope") c.rope = v.get<bool>();
            else if (k == "norm_eps") c.norm_eps = v.get<float>();
            else if (k == "rope_base") c.rope_base = v.get<float>();
            else if (k == "norm") {
                const auto s = v.get<std::string>();
                if (s == "rms") c.norm = NormKind::rms_norm;
                else if (s == "layer") c.norm = NormKind::layer_norm;
                else throw FormatError(fmt::format("unknown norm '{}'", s));
            } else if (k == "act") {
                const auto s = v.get<std::string>();
                if (s == "gelu") c.act = ActivationKind::gelu;
                else if (s == "silu") c.act = ActivationKind::silu;
                else throw FormatError(fmt::format("unknown activation '{}'", s));
            } else {
                throw FormatError(fmt::format("unknown model config key '{}'", k));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("malformed model config: {}", e.what()));
    }
    c.validate();
    return c;
}

std::vector<SuppressionEntry> parse_suppression(std::string_view text) {
    std::vector<SuppressionEntry> out;
    std::size_t start = 0;
    while (start < text.size()) {
        auto comma = text.find(',', start);
        if (comma == std::string_view::npos) comma = text.size();
        const std::string_view item = text.substr(start, comma - start);
        start = comma + 1;
        if (item.empty()) continue;
        const auto colon = item.find(':');
        if (colon == std::string_view::npos) throw UsageError(fmt::format("suppression '{}' is not layer:factor", item));
        SuppressionEntry e;
        const auto [p1, ec1] = std::from_chars(item.data(), item.data() + colon, e.layer);
        const auto [p2, ec2] = std::from_chars(item.data() + colon + 1, item.data() + item.size(), e.factor);
        if (ec1 != std::errc{} || p1 != item.data() + colon || ec2 != std::errc{} || p2 != item.data() + item.size()) {
            throw UsageError(fmt::format("suppression '{}' is not layer:factor", item));
        }
        out.push_back(e);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

Tensor2D init_weight(const ModelConfig& config, std::uint64_t seed, WeightKind kind, std::size_t layer) {
    const std::size_t d = config.dim;
    std::size_t rows = d, cols = d;
    double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    switch (kind) {
        case WeightKind::embedding:
            rows = config.vocab;
            stddev = 1.0;
            break;
        case WeightKind::mlp_up: cols = config.ffn_dim; break;
        case WeightKind::mlp_down: rows = config.ffn_dim; break;
        case WeightKind::head: cols = config.vocab; break;
        default: break;
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(kind) + 1, layer));
    std::vector<float> values(rows * cols);
    for (float& v : values) v = static_cast<float>(rng.normal() * stddev);
    return Tensor2D(rows, cols, std::move(values));
}

namespace {

NormParams unit_norm(const ModelConfig& config) {
    NormParams p;
    p.gain.assign(config.dim, 1.0f);
    if (config.norm == NormKind::layer_norm) p.bias.assign(config.dim, 0.0f);
    return p;
}

void check_suppression(const ModelConfig& config, std::span<const SuppressionEntry> suppression, bool allow_zero) {
    for (const auto& s : suppression) {
        if (s.layer < 1 || s.layer > config.num_layers) {
            throw ContractError(fmt::format("suppression layer {} outside [1, {}]", s.layer, config.num_layers));
        }
        const bool ok = std::isfinite(s.factor) && (allow_zero ? s.factor >= 0.0f : s.factor > 0.0f);
        if (!ok) throw ContractError(fmt::format("suppression factor {} for layer {} is invalid", s.factor, s.layer));
    }
}

float suppression_factor(std::span<const SuppressionEntry> suppression, std::size_t layer) {
    float f = 1.0f;
    for (const auto& s : suppression) {
        if (s.layer == layer) f *= s.factor;
    }
    return f;
}

}  // namespace

Model init_random(const ModelConfig& config, std::uint64_t seed, std::span<const SuppressionEntry> suppression) {
    config.validate();
    check_suppression(config, suppression, /*allow_zero=*/true);
    Model m;
    m.config = config;
    m.embedding = init_weight(config, seed, WeightKind::embedding, 0);
    m.blocks.resize(config.num_layers);
    for (std::size_t l = 1; l <= config.num_layers; ++l) {
        BlockWeights& b = m.blocks[l - 1];
        b.wq = init_weight(config, seed, WeightKind::query, l);
        const float f = suppression_factor(suppression, l);
        if (f != 1.0f) {
            for (float& v : b.wq.values()) v *= f;
        }
        b.wk = init_weight(config, seed, WeightKind::key, l);
        b.wv = init_weight(config, seed, WeightKind::value, l);
        b.wo = init_weight(config, seed, WeightKind::output, l);
        b.w1 = init_weight(config, seed, WeightKind::mlp_up, l);
        b.w2 = init_weight(config, seed, WeightKind::mlp_down, l);
        b.attn_norm = unit_norm(config);
        b.mlp_norm = unit_norm(config);
    }
    m.final_norm = unit_norm(config);
    m.head = init_weight(config, seed, WeightKind::head, 0);
    return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

PlanApplication PlanApplication::none(std::size_t num_layers) {
    PlanApplication a;
    a.flags_.resize(num_layers);
    return a;
}

PlanApplication PlanApplication::from_plan(const PruningPlan& plan, std::size_t num_layers) {
    if (plan.num_layers != num_layers) {
        throw ContractError(fmt::format("plan covers {} layers, model has {}", plan.num_layers, num_layers));
    }
    validate_plan(plan);
    PlanApplication a = none(num_layers);
    for (const std::size_t l : plan.removed) {
        if (plan.unit == PruneUnit::attention_sublayer) {
            a.flags_[l - 1].attn_disabled = true;
        } else {
            a.flags_[l - 1].block_disabled = true;
        }
    }
    return a;
}

std::size_t PlanApplication::attention_removed() const {
    return static_cast<std::size_t>(std::count_if(flags_.begin(), flags_.end(), [](const LayerFlags& f) {
        return f.attn_disabled || f.block_disabled;
    }));
}

std::size_t PlanApplication::blocks_removed() const {
    return static_cast<std::size_t>(
        std::count_if(flags_.begin(), flags_.end(), [](const LayerFlags& f) { return f.block_disabled; }));
}

std::uint64_t attention_macs(const ModelConfig& config, std::size_t s) {
    const std::uint64_t d = config.dim;
    return 4 * s * d * d + 2 * static_cast<std::uint64_t>(s) * s * d;
}

std::uint64_t mlp_macs(const ModelConfig& config, std::size_t s) {
    return 2 * static_cast<std::uint64_t>(s) * config.dim * config.ffn_dim;
}

Tensor2D apply_norm(const Tensor2D& x, const NormParams& params, const ModelConfig& config) {
    Tensor2D out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const Vector r = config.norm == NormKind::rms_norm ? rms_norm(x.row(i), params.gain, config.norm_eps)
                                                           : layer_norm(x.row(i), params.gain, params.bias,
                                                                        config.norm_eps);
        std::copy(r.begin(), r.end(), out.row(i).begin());
    }
    return out;
}

namespace {

void check_activations(const Tensor2D& z, const ModelConfig& config) {
    if (z.empty() || z.cols() != config.dim) {
        throw ContractError(fmt::format("activations {} do not have width {}", z.shape_string(), config.dim));
    }
    if (z.rows() > config.max_seq) {
        throw ContractError(fmt::format("sequence length {} exceeds max_seq {}", z.rows(), config.max_seq));
    }
}

// Rotate consecutive pairs (2p, 2p+1) inside each head by pos * base^(-2p/d_h).
void apply_rope(Tensor2D& t, const ModelConfig& config) {
    const std::size_t dh = config.head_dim();
    for (std::size_t pos = 0; pos < t.rows(); ++pos) {
        auto row = t.row(pos);
        for (std::size_t p = 0; p < dh / 2; ++p) {
            const double freq = std::pow(static_cast<double>(config.rope_base), -2.0 * p / static_cast<double>(dh));
            const double angle = static_cast<double>(pos) * freq;
            const auto c = static_cast<float>(std::cos(angle));
            const auto s = static_cast<float>(std::sin(angle));
            for (std::size_t h = 0; h < config.heads; ++h) {
                float& a = row[h * dh + 2 * p];
                float& b = row[h * dh + 2 * p + 1];
                const float a0 = a, b0 = b;
                a = a0 * c - b0 * s;
                b = a0 * s + b0 * c;
            }
        }
    }
}

Tensor2D head_columns(const Tensor2D& t, std::size_t h, std::size_t dh) {
    Tensor2D out(t.rows(), dh);
    for (std::size_t i = 0; i < t.rows(); ++i) {
        const auto src = t.row(i).subspan(h * dh, dh);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

// Scaled, masked, normalized attention weights of one head.
Tensor2D head_probabilities(const Tensor2D& qh, const Tensor2D& kh, const ModelConfig& config, Tensor2D* raw_logits) {
    Tensor2D scores = matmul_transposed(qh, kh);
    const float scale = 1.0f / std::sqrt(static_cast<float>(config.head_dim()));
    for (float& v : scores.values()) v *= scale;
    if (raw_logits != nullptr) *raw_logits = scores;
    const std::size_t s = scores.rows();
    for (std::size_t i = 0; i < s; ++i) softmax_prefix(scores.row(i), config.causal ? i + 1 : s);
    return scores;
}

struct Projections {
    Tensor2D q, k, v;
};

Projections project(const Tensor2D& z, const BlockWeights& w, const ModelConfig& config) {
    Projections p{matmul(z, w.wq), matmul(z, w.wk), matmul(z, w.wv)};
    if (config.rope) {
        apply_rope(p.q, config);
        apply_rope(p.k, config);
    }
    return p;
}

}  // namespace

Tensor2D attention_forward(const Tensor2D& z, const BlockWeights& weights, const ModelConfig& config,
                           std::uint64_t* macs) {
    check_activations(z, config);
    const std::size_t s = z.rows();
    const std::size_t dh = config.head_dim();
    const Projections p = project(z, weights, config);

    Tensor2D concat(s, config.dim);
    for (std::size_t h = 0; h < config.heads; ++h) {
        const Tensor2D probs = head_probabilities(head_columns(p.q, h, dh), head_columns(p.k, h, dh), config, nullptr);
        const Tensor2D out = matmul(probs, head_columns(p.v, h, dh));
        for (std::size_t i = 0; i < s; ++i) std::copy_n(out.row(i).begin(), dh, concat.row(i).begin() + h * dh);
    }
    if (macs != nullptr) *macs += attention_macs(config, s);
    return matmul(concat, weights.wo);
}

AttentionDetail attention_detail(const Tensor2D& z, const BlockWeights& weights, const ModelConfig& config) {
    check_activations(z, config);
    const std::size_t s = z.rows();
    const std::size_t dh = config.head_dim();
    const Projections p = project(z, weights, config);

    AttentionDetail d;
    d.output = Tensor2D(s, config.dim);
    for (std::size_t h = 0; h < config.heads; ++h) {
        Tensor2D logits;
        Tensor2D probs = head_probabilities(head_columns(p.q, h, dh), head_columns(p.k, h, dh), config, &logits);
        Tensor2D wo_rows(dh, config.dim);
        for (std::size_t r = 0; r < dh; ++r) {
            const auto src = weights.wo.row(h * dh + r);
            std::copy(src.begin(), src.end(), wo_rows.row(r).begin());
        }
        Tensor2D value_out = matmul(head_columns(p.v, h, dh), wo_rows);
        add_inplace(d.output, matmul(probs, value_out));
        d.logits.push_back(std::move(logits));
        d.probabilities.push_back(std::move(probs));
        d.value_out.push_back(std::move(value_out));
    }
    return d;
}

Tensor2D mlp_forward(const Tensor2D& u, const BlockWeights& weights, const ModelConfig& config, std::uint64_t* macs) {
    check_activations(u, config);
    Tensor2D hidden = matmul(u, weights.w1);
    activation_inplace(hidden, config.act);
    if (macs != nullptr) *macs += mlp_macs(config, u.rows());
    return matmul(hidden, weights.w2);
}

Tensor2D block_forward(const Tensor2D& x, const BlockWeights& weights, const ModelConfig& config,
                       const LayerFlags& flags, BlockCapture* capture, std::uint64_t* macs) {
    check_activations(x, config);
    if (flags.block_disabled) {
        if (capture != nullptr) {
            capture->attn_out = Tensor2D(x.rows(), x.cols());
            capture->post_attn = x;
            capture->mlp_out = Tensor2D(x.rows(), x.cols());
        }
        return x;
    }

    Tensor2D attn;
    Tensor2D y;
    if (flags.attn_disabled) {
        attn = Tensor2D(x.rows(), x.cols());
        y = x;
    } else {
        attn = attention_forward(apply_norm(x, weights.attn_norm, config), weights, config, macs);
        if (flags.zero_attn_out) std::fill(attn.values().begin(), attn.values().end(), 0.0f);
        y = add(x, attn);
    }

    Tensor2D mlp = mlp_forward(apply_norm(y, weights.mlp_norm, config), weights, config, macs);
    Tensor2D next = add(y, mlp);
    if (capture != nullptr) {
        capture->attn_out = std::move(attn);
        capture->post_attn = std::move(y);
        capture->mlp_out = std::move(mlp);
    }
    return next;
}

ForwardTrace model_forward(std::span<const std::uint32_t> tokens, const Model& model,
                           const PlanApplication& application, const CaptureFlags& capture) {
    const ModelConfig& config = model.config;
    if (tokens.empty()) throw ContractError("forward needs at least one token");
    if (tokens.size() > config.max_seq) {
        throw ContractError(fmt::format("sequence length {} exceeds max_seq {}", tokens.size(), config.max_seq));
    }
    if (application.flags().size() != model.blocks.size()) {
        throw ContractError(fmt::format("plan application covers {} layers, model has {}", application.flags().size(),
                                        model.blocks.size()));
    }
    Tensor2D x(tokens.size(), config.dim);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= config.vocab) {
            throw ContractError(fmt::format("token id {} at position {} is outside vocab {}", tokens[i], i, config.vocab));
        }
        const auto src = model.embedding.row(tokens[i]);
        std::copy(src.begin(), src.end(), x.row(i).begin());
    }

    ForwardTrace trace;
    const std::size_t num_layers = model.blocks.size();
    if (capture.inputs) trace.x.reserve(num_layers + 1);
    for (std::size_t l = 0; l < num_layers; ++l) {
        if (capture.inputs) trace.x.push_back(x);
        BlockCapture cap;
        x = block_forward(x, model.blocks[l], config, application.flags()[l], &cap, &trace.macs);
        if (capture.attn_out) trace.attn_out.push_back(std::move(cap.attn_out));
        if (capture.post_attn) trace.y.push_back(std::move(cap.post_attn));
        if (capture.mlp_out) trace.mlp_out.push_back(std::move(cap.mlp_out));
    }
    if (capture.inputs) trace.x.push_back(x);

    const Tensor2D h = apply_norm(x, model.final_norm, config);
    trace.macs += matmul_macs(h.rows(), h.cols(), model.head.cols());
    if (capture.logits) trace.logits = matmul(h, model.head);
    return trace;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void expect_shape(const CheckpointIndex& index, const std::string& name, std::vector<std::uint64_t> shape) {
    const TensorRecord& rec = index.at(name);
    if (rec.shape != shape) {
        std::string want, got;
        for (auto d : shape) want += fmt::format("{}{}", want.empty() ? "" : "x", d);
        for (auto d : rec.shape) got += fmt::format("{}{}", got.empty() ? "" : "x", d);
        throw FormatError(fmt::format("tensor '{}' has shape {} but the config implies {}", name, got, want));
    }
}

NormParams load_norm(const CheckpointIndex& index, const std::string& gain, const std::string& bias,
                     const ByteSource& source, const ModelConfig& config) {
    expect_shape(index, gain, {config.dim});
    NormParams p;
    p.gain = read_vector(index, gain, source);
    if (config.norm == NormKind::layer_norm) {
        expect_shape(index, bias, {config.dim});
        p.bias = read_vector(index, bias, source);
    }
    return p;
}

// Key/value projection: stored (D_kv, D), expanded to D x D in math orientation.
Tensor2D load_kv(const CheckpointIndex& index, const std::string& name, const ByteSource& source,
                 const ModelConfig& config) {
    const TensorRecord& rec = index.at(name);
    const std::uint64_t dh = config.head_dim();
    if (rec.rank() != 2 || rec.shape[1] != config.dim || rec.shape[0] == 0 || rec.shape[0] % dh != 0 ||
        rec.shape[0] > config.dim || config.heads % (rec.shape[0] / dh) != 0) {
        expect_shape(index, name, {config.dim, config.dim});
    }
    return expand_kv_heads(read_tensor_transposed(index, name, source), config.heads, dh);
}

}  // namespace

Model load_from_checkpoint(const CheckpointIndex& index, const LayerTensorMap& map, const NamingScheme& scheme,
                           const ByteSource& source, const ModelConfig& config) {
    config.validate();
    if (map.num_layers() != config.num_layers) {
        throw FormatError(fmt::format("checkpoint has {} layers, config expects {}", map.num_layers(), config.num_layers));
    }
    std::vector<Role> required = {Role::query,  Role::key,      Role::value,     Role::output,
                                  Role::mlp_up, Role::mlp_down, Role::attn_norm, Role::mlp_norm};
    if (config.norm == NormKind::layer_norm) {
        required.push_back(Role::attn_norm_bias);
        required.push_back(Role::mlp_norm_bias);
    }
    std::string missing;
    for (std::size_t l = 1; l <= map.num_layers(); ++l) {
        std::string roles;
        for (const Role r : required) {
            if (!map.layer(l).has(r)) roles += fmt::format("{}{}", roles.empty() ? "" : ", ", role_name(r));
        }
        if (!roles.empty()) missing += fmt::format("{}layer {}: {}", missing.empty() ? "" : "; ", l, roles);
    }
    for (const std::string* global : {&scheme.embedding, &scheme.final_norm, &scheme.lm_head}) {
        if (index.find(*global) == nullptr) missing += fmt::format("{}{}", missing.empty() ? "" : "; ", *global);
    }
    if (config.norm == NormKind::layer_norm && index.find(scheme.final_norm_bias) == nullptr) {
        missing += fmt::format("{}{}", missing.empty() ? "" : "; ", scheme.final_norm_bias);
    }
    if (!missing.empty()) throw FormatError(fmt::format("checkpoint lacks tensors needed for a model: {}", missing));

    const std::uint64_t d = config.dim, f = config.ffn_dim, v = config.vocab;
    Model m;
    m.config = config;
    expect_shape(index, scheme.embedding, {v, d});
    m.embedding = read_tensor(index, scheme.embedding, source);
    m.blocks.resize(config.num_layers);
    for (std::size_t l = 1; l <= config.num_layers; ++l) {
        const LayerTensors& names = map.layer(l);
        BlockWeights& b = m.blocks[l - 1];
        expect_shape(index, names.name(Role::query), {d, d});
        b.wq = read_tensor_transposed(index, names.name(Role::query), source);
        b.wk = load_kv(index, names.name(Role::key), source, config);
        b.wv = load_kv(index, names.name(Role::value), source, config);
        expect_shape(index, names.name(Role::output), {d, d});
        b.wo = read_tensor_transposed(index, names.name(Role::output), source);
        expect_shape(index, names.name(Role::mlp_up), {f, d});
        b.w1 = read_tensor_transposed(index, names.name(Role::mlp_up), source);
        expect_shape(index, names.name(Role::mlp_down), {d, f});
        b.w2 = read_tensor_transposed(index, names.name(Role::mlp_down), source);
        const bool ln = config.norm == NormKind::layer_norm;
        b.attn_norm = load_norm(index, names.name(Role::attn_norm), ln ? names.name(Role::attn_norm_bias) : "",
                                source, config);
        b.mlp_norm = load_norm(index, names.name(Role::mlp_norm), ln ? names.name(Role::mlp_norm_bias) : "",
                               source, config);
    }
    m.final_norm = load_norm(index, scheme.final_norm, scheme.final_norm_bias, source, config);
    expect_shape(index, scheme.lm_head, {v, d});
    m.head = read_tensor_transposed(index, scheme.lm_head, source);
    return m;
}

namespace {

std::string layer_name(const NamingScheme& scheme, Role role, std::size_t layer) {
    std::string pattern = scheme.patterns.at(role);
    pattern.replace(pattern.find("{i}"), 3, std::to_string(layer - 1 + scheme.index_base));
    return pattern;
}

std::vector<std::uint64_t> stored_shape(const Tensor2D& math) { return {math.cols(), math.rows()}; }

std::vector<std::uint64_t> model_tensor_shape(const ModelConfig& c, WeightKind kind) {
    switch (kind) {
        case WeightKind::embedding: return {c.vocab, c.dim};
        case WeightKind::mlp_up: return {c.ffn_dim, c.dim};
        case WeightKind::mlp_down: return {c.dim, c.ffn_dim};
        case WeightKind::head: return {c.vocab, c.dim};
        default: return {c.dim, c.dim};
    }
}

std::map<std::string, std::string> model_metadata(const ModelConfig& config) {
    return {{"format", "gatenorm"}, {"config", config.to_json()}};
}

void add_norm(CheckpointWriter& w, const std::string& gain, const std::string& bias, const NormParams& params,
              DType dtype) {
    w.add(gain, dtype, {params.gain.size()}, [&params] { return params.gain; });
    if (!params.bias.empty()) w.add(bias, dtype, {params.bias.size()}, [&params] { return params.bias; });
}

void add_unit_norm(CheckpointWriter& w, const std::string& gain, const std::string& bias, const ModelConfig& c,
                   DType dtype) {
    const std::size_t d = c.dim;
    w.add(gain, dtype, {d}, [d] { return std::vector<float>(d, 1.0f); });
    if (c.norm == NormKind::layer_norm) w.add(bias, dtype, {d}, [d] { return std::vector<float>(d, 0.0f); });
}

CheckpointWriter synth_writer(const ModelConfig& config, std::uint64_t seed,
                              std::span<const SuppressionEntry> suppression, const SynthOptions& options) {
    config.validate();
    check_suppression(config, suppression, /*allow_zero=*/false);
    const NamingScheme scheme = NamingScheme::llama();
    const std::vector<SuppressionEntry> supp(suppression.begin(), suppression.end());
    CheckpointWriter w;
    auto metadata = model_metadata(config);
    metadata["seed"] = std::to_string(seed);
    w.set_metadata(std::move(metadata));

    const auto add_weight = [&](const std::string& name, WeightKind kind, std::size_t layer) {
        const bool transposed = kind != WeightKind::embedding;
        w.add(name, options.dtype, model_tensor_shape(config, kind), [=] {
            Tensor2D t = init_weight(config, seed, kind, layer);
            if (kind == WeightKind::query) {
                const float f = suppression_factor(supp, layer);
                if (f != 1.0f) {
                    for (float& v : t.values()) v *= f;
                }
            }
            return transposed ? transpose(t).release() : t.release();
        });
    };

    if (!options.qk_only) add_weight(scheme.embedding, WeightKind::embedding, 0);
    for (std::size_t l = 1; l <= config.num_layers; ++l) {
        add_weight(layer_name(scheme, Role::query, l), WeightKind::query, l);
        add_weight(layer_name(scheme, Role::key, l), WeightKind::key, l);
        if (options.qk_only) continue;
        add_weight(layer_name(scheme, Role::value, l), WeightKind::value, l);
        add_weight(layer_name(scheme, Role::output, l), WeightKind::output, l);
        add_weight(layer_name(scheme, Role::mlp_up, l), WeightKind::mlp_up, l);
        add_weight(layer_name(scheme, Role::mlp_down, l), WeightKind::mlp_down, l);
        add_unit_norm(w, layer_name(scheme, Role::attn_norm, l), layer_name(scheme, Role::attn_norm_bias, l), config,
                      options.dtype);
        add_unit_norm(w, layer_name(scheme, Role::mlp_norm, l), layer_name(scheme, Role::mlp_norm_bias, l), config,
                      options.dtype);
    }
    if (!options.qk_only) {
        add_unit_norm(w, scheme.final_norm, scheme.final_norm_bias, config, options.dtype);
        add_weight(scheme.lm_head, WeightKind::head, 0);
    }
    return w;
}

}  // namespace

void synth_checkpoint(const ModelConfig& config, std::uint64_t seed, std::span<const SuppressionEntry> suppression,
                      std::ostream& out, const SynthOptions& options) {
    synth_writer(config, seed, suppression, options).write(out);
}

std::vector<std::byte> synth_checkpoint_bytes(const ModelConfig& config, std::uint64_t seed,
                                              std::span<const SuppressionEntry> suppression,
                                              const SynthOptions& options) {
    return synth_writer(config, seed, suppression, options).to_bytes();
}

void write_model_checkpoint(const Model& model, std::ostream& out, DType dtype) {
    const ModelConfig& c = model.config;
    const NamingScheme scheme = NamingScheme::llama();
    CheckpointWriter w;
    w.set_metadata(model_metadata(c));
    const auto add_stored = [&](const std::string& name, const Tensor2D& math) {
        w.add(name, dtype, stored_shape(math), [&math] { return transpose(math).release(); });
    };
    w.add(scheme.embedding, dtype, {model.embedding.rows(), model.embedding.cols()},
          [&model] { return std::vector<float>(model.embedding.values().begin(), model.embedding.values().end()); });
    for (std::size_t l = 1; l <= model.blocks.size(); ++l) {
        const BlockWeights& b = model.blocks[l - 1];
        add_stored(layer_name(scheme, Role::query, l), b.wq);
        add_stored(layer_name(scheme, Role::key, l), b.wk);
        add_stored(layer_name(scheme, Role::value, l), b.wv);
        add_stored(layer_name(scheme, Role::output, l), b.wo);
        add_stored(layer_name(scheme, Role::mlp_up, l), b.w1);
        add_stored(layer_name(scheme, Role::mlp_down, l), b.w2);
        add_norm(w, layer_name(scheme, Role::attn_norm, l), layer_name(scheme, Role::attn_norm_bias, l), b.attn_norm,
                 dtype);
        add_norm(w, layer_name(scheme, Role::mlp_norm, l), layer_name(scheme, Role::mlp_norm_bias, l), b.mlp_norm,
                 dtype);
    }
    add_norm(w, scheme.final_norm, scheme.final_norm_bias, model.final_norm, dtype);
    add_stored(scheme.lm_head, model.head);
    w.write(out);
}

}  // namespace gatenorm
