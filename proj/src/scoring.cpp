#include "gatenorm/scoring.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>

#include <fmt/core.h>
#include <json.hpp>

#include "gatenorm/model.hpp"
#include "gatenorm/rng.hpp"

namespace gatenorm {

std::string_view score_mode_name(ScoreMode mode) {
    return mode == ScoreMode::whole_matrix ? "whole" : "per-head";
}

ScoreMode parse_score_mode(std::string_view name) {
    if (name == "whole" || name == "whole-matrix") return ScoreMode::whole_matrix;
    if (name == "per-head") return ScoreMode::per_head;
    throw UsageError(fmt::format("unknown score mode '{}' (expected whole or per-head)", name));
}

Tensor2D gate_matrix(const Tensor2D& wq, const Tensor2D& wk) {
    if (wq.empty() || wq.rows() != wq.cols() || wk.rows() != wq.rows() || wk.cols() != wq.cols()) {
        throw ContractError(
            fmt::format("gate matrix needs square Wq and Wk of equal size, got {} and {}", wq.shape_string(),
                        wk.shape_string()));
    }
    return matmul_transposed(wq, wk);
}

namespace {

Tensor2D column_slice(const Tensor2D& w, std::size_t first, std::size_t width) {
    Tensor2D out(w.rows(), width);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const auto src = w.row(r).subspan(first, width);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

}  // namespace

double gate_norm(const Tensor2D& wq, const Tensor2D& wk, ScoreMode mode, std::size_t heads) {
    if (mode == ScoreMode::whole_matrix) return frobenius_norm(gate_matrix(wq, wk));

    if (heads == 0 || wq.cols() % heads != 0) {
        throw ContractError(fmt::format("per-head gate norm: width {} not divisible by {} heads", wq.cols(), heads));
    }
    if (wq.empty() || wq.rows() != wq.cols() || wk.rows() != wq.rows() || wk.cols() != wq.cols()) {
        throw ContractError(fmt::format("gate matrix needs square Wq and Wk of equal size, got {} and {}",
                                        wq.shape_string(), wk.shape_string()));
    }
    const std::size_t width = wq.cols() / heads;
    double sum = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
        const double f = frobenius_norm(matmul_transposed(column_slice(wq, h * width, width),
                                                          column_slice(wk, h * width, width)));
        sum += f * f;
    }
    return std::sqrt(sum);
}

Tensor2D expand_kv_heads(const Tensor2D& w, std::size_t heads, std::size_t head_dim) {
    if (head_dim == 0 || w.cols() % head_dim != 0) {
        throw ContractError(fmt::format("kv projection width {} is not a multiple of head size {}", w.cols(), head_dim));
    }
    const std::size_t kv_heads = w.cols() / head_dim;
    if (kv_heads == 0 || heads % kv_heads != 0) {
        throw ContractError(fmt::format("{} query heads cannot share {} kv heads", heads, kv_heads));
    }
    if (kv_heads == heads) return w;
    const std::size_t group = heads / kv_heads;
    Tensor2D out(w.rows(), heads * head_dim);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const auto src = w.row(r);
        auto dst = out.row(r);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t kv = h / group;
            std::copy_n(src.begin() + kv * head_dim, head_dim, dst.begin() + h * head_dim);
        }
    }
    return out;
}

WeightFingerprint::WeightFingerprint(std::size_t num_layers) {
    const std::uint64_t n = num_layers;
    hash_.update(std::as_bytes(std::span(&n, 1)));
}

void WeightFingerprint::add_layer(const Tensor2D& wq, const Tensor2D& wk) {
    for (const Tensor2D* w : {&wq, &wk}) {
        const std::uint64_t shape[2] = {w->rows(), w->cols()};
        hash_.update(std::as_bytes(std::span(shape)));
        hash_.update(std::as_bytes(w->values()));
    }
}

CheckpointScores score_checkpoint(const CheckpointIndex& index, const LayerTensorMap& map, const ByteSource& source,
                                  const ScoreOptions& options) {
    CheckpointScores out;
    WeightFingerprint fp(map.num_layers());
    out.scores.reserve(map.num_layers());
    for (std::size_t l = 1; l <= map.num_layers(); ++l) {
        const LayerTensors& names = map.layer(l);
        try {
            // Stored (out, in) -> math (in, out).
            Tensor2D wq = read_tensor_transposed(index, names.name(Role::query), source);
            Tensor2D wk = read_tensor_transposed(index, names.name(Role::key), source);
            fp.add_layer(wq, wk);
            if (wk.cols() != wq.cols()) {
                if (options.heads == 0) {
                    throw ContractError(fmt::format("key width {} differs from query width {}; grouped-query "
                                                    "checkpoints need the query head count",
                                                    wk.cols(), wq.cols()));
                }
                if (wq.cols() % options.heads != 0) {
                    throw ContractError(fmt::format("query width {} not divisible by {} heads", wq.cols(), options.heads));
                }
                wk = expand_kv_heads(wk, options.heads, wq.cols() / options.heads);
            }
            out.scores.push_back({l, gate_norm(wq, wk, options.mode, options.heads), options.mode});
        } catch (const ContractError& e) {
            throw ContractError(fmt::format("layer {}: {}", l, e.what()));
        } catch (const FormatError& e) {
            throw FormatError(fmt::format("layer {}: {}", l, e.what()));
        } catch (const IoError& e) {
            throw IoError(fmt::format("layer {}: {}", l, e.what()));
        }
    }
    out.fingerprint = fp.hex();
    return out;
}

std::string scores_to_text(const CheckpointScores& scores) {
    const ScoreMode mode = scores.scores.empty() ? ScoreMode::whole_matrix : scores.scores.front().mode;
    std::string out = fmt::format("# scores/1 mode={} source_fingerprint={}\nlayer,gate_norm\n", score_mode_name(mode),
                                  scores.fingerprint.empty() ? "none" : scores.fingerprint);
    for (const auto& s : scores.scores) out += fmt::format("{},{:.17g}\n", s.layer, s.m);
    return out;
}

CheckpointScores scores_from_text(std::string_view text) {
    std::vector<std::string_view> lines;
    for (std::size_t start = 0; start < text.size();) {
        auto nl = text.find('\n', start);
        if (nl == std::string_view::npos) nl = text.size();
        lines.push_back(text.substr(start, nl - start));
        start = nl + 1;
    }
    constexpr std::string_view kPrefix = "# scores/1 mode=";
    constexpr std::string_view kFp = " source_fingerprint=";
    if (lines.size() < 2 || lines[0].substr(0, kPrefix.size()) != kPrefix || lines[1] != "layer,gate_norm") {
        throw FormatError("not a scores/1 file");
    }
    const std::string_view rest = lines[0].substr(kPrefix.size());
    const auto fp_pos = rest.find(kFp);
    if (fp_pos == std::string_view::npos) throw FormatError("scores/1 header lacks source_fingerprint");
    ScoreMode mode;
    try {
        mode = parse_score_mode(rest.substr(0, fp_pos));
    } catch (const UsageError& e) {
        throw FormatError(e.what());
    }
    CheckpointScores out;
    out.fingerprint = std::string(rest.substr(fp_pos + kFp.size()));
    if (out.fingerprint == "none") out.fingerprint.clear();
    for (std::size_t i = 2; i < lines.size(); ++i) {
        const auto line = lines[i];
        const auto comma = line.find(',');
        GateScore g;
        g.mode = mode;
        if (comma == std::string_view::npos) throw FormatError(fmt::format("scores line {} lacks a comma", i + 1));
        const auto [p1, e1] = std::from_chars(line.data(), line.data() + comma, g.layer);
        const auto [p2, e2] = std::from_chars(line.data() + comma + 1, line.data() + line.size(), g.m);
        if (e1 != std::errc{} || p1 != line.data() + comma || e2 != std::errc{} || p2 != line.data() + line.size()) {
            throw FormatError(fmt::format("scores line {} is malformed", i + 1));
        }
        if (g.layer != out.scores.size() + 1) throw FormatError(fmt::format("scores line {} is out of order", i + 1));
        if (!(g.m >= 0.0) || !std::isfinite(g.m)) throw FormatError(fmt::format("scores line {} has an invalid score", i + 1));
        out.scores.push_back(g);
    }
    if (out.scores.empty()) throw FormatError("scores file has no rows");
    return out;
}

CheckpointScores score_model(const Model& model, ScoreMode mode) {
    CheckpointScores out;
    WeightFingerprint fp(model.blocks.size());
    for (std::size_t l = 1; l <= model.blocks.size(); ++l) {
        const BlockWeights& b = model.blocks[l - 1];
        fp.add_layer(b.wq, b.wk);
        out.scores.push_back({l, gate_norm(b.wq, b.wk, mode, model.config.heads), mode});
    }
    out.fingerprint = fp.hex();
    return out;
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

std::string_view method_name(PlanMethod method) {
    switch (method) {
        case PlanMethod::gate_norm: return "gate-norm";
        case PlanMethod::data_driven_attn: return "data-driven-attn";
        case PlanMethod::data_driven_block: return "data-driven-block";
        case PlanMethod::random_attn: return "random-attn";
        case PlanMethod::random_block: return "random-block";
    }
    return "?";
}

PlanMethod parse_method(std::string_view name) {
    if (name == "gate-norm") return PlanMethod::gate_norm;
    if (name == "data-driven-attn" || name == "data-attn") return PlanMethod::data_driven_attn;
    if (name == "data-driven-block" || name == "data-block") return PlanMethod::data_driven_block;
    if (name == "random-attn") return PlanMethod::random_attn;
    if (name == "random-block") return PlanMethod::random_block;
    throw UsageError(fmt::format("unknown method '{}'", name));
}

std::string_view unit_name(PruneUnit unit) {
    return unit == PruneUnit::attention_sublayer ? "attention-sublayer" : "full-block";
}

PruneUnit parse_unit(std::string_view name) {
    if (name == "attention-sublayer") return PruneUnit::attention_sublayer;
    if (name == "full-block") return PruneUnit::full_block;
    throw FormatError(fmt::format("unknown pruning unit '{}'", name));
}

PruneUnit default_unit(PlanMethod method) {
    return method == PlanMethod::data_driven_block || method == PlanMethod::random_block ? PruneUnit::full_block
                                                                                         : PruneUnit::attention_sublayer;
}

void validate_plan(const PruningPlan& plan) {
    std::set<std::size_t> seen;
    for (const std::size_t l : plan.removed) {
        if (l < 1 || l > plan.num_layers) {
            throw ContractError(fmt::format("plan removes layer {} outside [1, {}]", l, plan.num_layers));
        }
        if (!seen.insert(l).second) throw ContractError(fmt::format("plan removes layer {} twice", l));
    }
    if (plan.scores && plan.scores->size() != plan.num_layers) {
        throw ContractError(fmt::format("plan carries {} scores for {} layers", plan.scores->size(), plan.num_layers));
    }
}

namespace {

void check_count(std::size_t n, std::size_t num_layers) {
    if (n > num_layers) throw ContractError(fmt::format("prune count {} exceeds layer count {}", n, num_layers));
}

// Layers ordered by ascending score, lower layer first on ties.
std::vector<std::size_t> ascending_layers(const std::vector<double>& by_layer) {
    std::vector<std::size_t> order(by_layer.size());
    std::iota(order.begin(), order.end(), std::size_t{1});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return by_layer[a - 1] < by_layer[b - 1]; });
    return order;
}

}  // namespace

PruningPlan plan_one_shot(std::span<const GateScore> scores, std::size_t n, std::string fingerprint) {
    const std::size_t num_layers = scores.size();
    check_count(n, num_layers);
    std::vector<double> by_layer(num_layers, 0.0);
    std::vector<bool> seen(num_layers, false);
    for (const GateScore& s : scores) {
        if (s.layer < 1 || s.layer > num_layers || seen[s.layer - 1]) {
            throw ContractError(fmt::format("score list must hold each layer 1..{} once (bad layer {})", num_layers,
                                            s.layer));
        }
        if (!(s.m >= 0.0)) throw ContractError(fmt::format("layer {} has invalid gate norm {}", s.layer, s.m));
        seen[s.layer - 1] = true;
        by_layer[s.layer - 1] = s.m;
    }
    PruningPlan plan;
    plan.method = PlanMethod::gate_norm;
    plan.unit = PruneUnit::attention_sublayer;
    plan.num_layers = num_layers;
    const auto order = ascending_layers(by_layer);
    plan.removed.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
    plan.scores = std::move(by_layer);
    plan.source_fingerprint = std::move(fingerprint);
    return plan;
}

PruningPlan plan_random(std::size_t num_layers, std::size_t n, PruneUnit unit, std::uint64_t seed,
                        std::string fingerprint) {
    check_count(n, num_layers);
    std::vector<std::size_t> layers(num_layers);
    std::iota(layers.begin(), layers.end(), std::size_t{1});
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(num_layers - i));
        std::swap(layers[i], layers[j]);
    }
    PruningPlan plan;
    plan.method = unit == PruneUnit::full_block ? PlanMethod::random_block : PlanMethod::random_attn;
    plan.unit = unit;
    plan.num_layers = num_layers;
    plan.removed.assign(layers.begin(), layers.begin() + static_cast<std::ptrdiff_t>(n));
    plan.source_fingerprint = std::move(fingerprint);
    plan.seed = seed;
    return plan;
}

PruningPlan plan_from_importance(std::span<const std::pair<std::size_t, double>> importances, std::size_t n,
                                 PruneUnit unit, PlanMethod method, std::string fingerprint) {
    const std::size_t num_layers = importances.size();
    check_count(n, num_layers);
    std::vector<double> by_layer(num_layers, 0.0);
    std::vector<bool> seen(num_layers, false);
    for (const auto& [layer, score] : importances) {
        if (layer < 1 || layer > num_layers) {
            throw ContractError(fmt::format("importance for layer {} outside [1, {}]", layer, num_layers));
        }
        if (seen[layer - 1]) throw ContractError(fmt::format("duplicate importance entry for layer {}", layer));
        if (std::isnan(score)) throw ContractError(fmt::format("importance for layer {} is NaN", layer));
        seen[layer - 1] = true;
        by_layer[layer - 1] = score;
    }
    PruningPlan plan;
    plan.method = method;
    plan.unit = unit;
    plan.num_layers = num_layers;
    const auto order = ascending_layers(by_layer);
    plan.removed.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
    plan.scores = std::move(by_layer);
    plan.source_fingerprint = std::move(fingerprint);
    return plan;
}

std::string plan_to_json(const PruningPlan& plan) {
    validate_plan(plan);
    nlohmann::ordered_json doc;
    doc["version"] = "plan/1";
    doc["method"] = method_name(plan.method);
    doc["unit"] = unit_name(plan.unit);
    doc["num_layers"] = plan.num_layers;
    doc["removed"] = plan.removed;
    doc["scores"] = plan.scores ? nlohmann::ordered_json(*plan.scores) : nlohmann::ordered_json(nullptr);
    doc["source_fingerprint"] = plan.source_fingerprint;
    doc["seed"] = plan.seed ? nlohmann::ordered_json(*plan.seed) : nlohmann::ordered_json(nullptr);
    return doc.dump(2) + "\n";
}

PruningPlan plan_from_json(std::string_view text) {
    const auto doc = nlohmann::json::parse(text, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw FormatError("plan document is not a JSON object");
    try {
        if (doc.at("version").get<std::string>() != "plan/1") {
            throw FormatError(fmt::format("unsupported plan version {}", doc.at("version").dump()));
        }
        PruningPlan plan;
        plan.method = parse_method(doc.at("method").get<std::string>());
        plan.unit = parse_unit(doc.at("unit").get<std::string>());
        plan.num_layers = doc.at("num_layers").get<std::size_t>();
        plan.removed = doc.at("removed").get<std::vector<std::size_t>>();
        if (!doc.at("scores").is_null()) plan.scores = doc.at("scores").get<std::vector<double>>();
        plan.source_fingerprint = doc.at("source_fingerprint").get<std::string>();
        if (!doc.at("seed").is_null()) plan.seed = doc.at("seed").get<std::uint64_t>();
        validate_plan(plan);
        return plan;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("malformed plan document: {}", e.what()));
    } catch (const UsageError& e) {
        throw FormatError(e.what());
    } catch (const ContractError& e) {
        throw FormatError(fmt::format("invalid plan document: {}", e.what()));
    }
}

}  // namespace gatenorm
