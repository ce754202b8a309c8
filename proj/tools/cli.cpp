#include "cli.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/chrono.h>
#include <fmt/core.h>
#include <fmt/ostream.h>
#include <json.hpp>

#include "gatenorm/checkpoint.hpp"
#include "gatenorm/error.hpp"
#include "gatenorm/eval.hpp"
#include "gatenorm/hash.hpp"
#include "gatenorm/importance.hpp"
#include "gatenorm/memtrack.hpp"
#include "gatenorm/model.hpp"
#include "gatenorm/scoring.hpp"

namespace gatenorm::cli {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open '{}'", path));
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError(fmt::format("failed reading '{}'", path));
    return ss.str();
}

void write_text(const std::string& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError(fmt::format("failed writing '{}'", path));
}

std::string file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open '{}'", path));
    Fnv1a64 h;
    std::vector<char> buf(1 << 20);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto n = static_cast<std::size_t>(in.gcount());
        h.update(std::as_bytes(std::span<const char>(buf.data(), n)));
    }
    if (in.bad()) throw IoError(fmt::format("failed reading '{}'", path));
    return h.hex();
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

class Manifest {
public:
    void input(const std::string& path) {
        if (!path.empty()) inputs_[path] = file_hash(path);
    }

    void write(const CLI::App& sub, const std::string& out_path) const {
        ojson j;
        j["schema"] = "manifest/1";
        j["command"] = sub.get_name();
        ojson params = ojson::object();
        for (const CLI::Option* opt : sub.get_options()) {
            if (opt == sub.get_help_ptr()) continue;
            std::string value;
            if (opt->count() > 0) {
                const auto& res = opt->results();
                for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
            } else {
                value = opt->get_default_str();
                if (value.size() >= 2 && value.front() == '[' && value.back() == ']') value = value.substr(1, value.size() - 2);
            }
            params[opt->get_name()] = value;
        }
        j["parameters"] = params;
        ojson in = ojson::object();
        for (const auto& [path, hash] : inputs_) in[path] = hash;
        j["inputs"] = in;
        j["tool_version"] = kToolVersion;
        const auto now = std::chrono::system_clock::now();
        j["timestamp"] = fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(now)));
        write_text(out_path + ".manifest.json", j.dump(2) + "\n");
    }

private:
    std::map<std::string, std::string> inputs_;
};

// ---------------------------------------------------------------------------
// Shared option groups
// ---------------------------------------------------------------------------

struct ModelArgs {
    std::string config;
    std::string checkpoint;
    std::string naming = "llama";
    std::uint64_t seed = 1;
    std::string suppress;
};

struct TokenArgs {
    std::string stream;
    std::size_t tokens = 4096;
    std::uint64_t stream_seed = 1;
    std::size_t window = 0;
};

void add_model_options(CLI::App* app, ModelArgs& a, bool with_checkpoint = true) {
    app->add_option("--config", a.config, "Model config JSON file (defaults to the built-in toy shape)");
    if (with_checkpoint) {
        app->add_option("--checkpoint", a.checkpoint, "Load weights from a checkpoint instead of seeding them");
        app->add_option("--naming-scheme", a.naming, "Tensor naming scheme")->capture_default_str();
    }
    app->add_option("--seed", a.seed, "Weight seed")->capture_default_str();
    app->add_option("--suppress", a.suppress, "Scale Wq of layers, e.g. 5:1e-3,7:1e-3");
}

void add_token_options(CLI::App* app, TokenArgs& a) {
    app->add_option("--stream", a.stream, "Token stream file (TOKS format)");
    app->add_option("--tokens", a.tokens, "Synthetic token count when no stream is given")->capture_default_str();
    app->add_option("--stream-seed", a.stream_seed, "Synthetic token seed")->capture_default_str();
    app->add_option("--window", a.window, "Evaluation window length (0 = model max_seq)")->capture_default_str();
}

DType require_dtype(const std::string& name) {
    std::string upper = name;
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    const auto d = parse_dtype(upper);
    if (!d) throw UsageError(fmt::format("unknown dtype '{}' (expected f32, f16 or bf16)", name));
    return *d;
}

ModelConfig load_config(const std::string& path) { return ModelConfig::from_json(read_text(path)); }

std::optional<ModelConfig> config_from_metadata(const CheckpointIndex& index) {
    if (index.metadata_json().empty()) return std::nullopt;
    const auto meta = nlohmann::json::parse(index.metadata_json(), nullptr, false);
    if (meta.is_discarded() || !meta.is_object() || !meta.contains("config") || !meta["config"].is_string()) {
        return std::nullopt;
    }
    return ModelConfig::from_json(meta["config"].get<std::string>());
}

struct OpenCheckpoint {
    std::unique_ptr<FileSource> source;
    std::optional<CheckpointIndex> index;
    NamingScheme scheme;
    LayerTensorMap map;
};

OpenCheckpoint open_checkpoint(const std::string& path, const std::string& naming) {
    OpenCheckpoint c;
    c.source = std::make_unique<FileSource>(path);
    c.index.emplace(parse_header(*c.source));
    c.scheme = NamingScheme::parse(naming);
    c.map = enumerate_layers(*c.index, c.scheme);
    return c;
}

Model build_model(const ModelArgs& a, Manifest& manifest) {
    const auto suppression = parse_suppression(a.suppress);
    if (!a.checkpoint.empty()) {
        if (!suppression.empty()) throw UsageError("--suppress only applies to seeded models, not --checkpoint");
        manifest.input(a.checkpoint);
        OpenCheckpoint c = open_checkpoint(a.checkpoint, a.naming);
        std::optional<ModelConfig> config;
        if (!a.config.empty()) {
            manifest.input(a.config);
            config = load_config(a.config);
        } else {
            config = config_from_metadata(*c.index);
        }
        if (!config) throw UsageError("checkpoint carries no model config; pass --config");
        return load_from_checkpoint(*c.index, c.map, c.scheme, *c.source, *config);
    }
    ModelConfig config;
    if (!a.config.empty()) {
        manifest.input(a.config);
        config = load_config(a.config);
    }
    return init_random(config, a.seed, suppression);
}

TokenStream load_tokens(const TokenArgs& a, const Model& model, Manifest& manifest) {
    if (!a.stream.empty()) {
        manifest.input(a.stream);
        return TokenStream::load(a.stream);
    }
    return TokenStream::synthetic(static_cast<std::uint32_t>(model.config.vocab), a.tokens, a.stream_seed);
}

PruningPlan load_plan(const std::string& path, Manifest& manifest) {
    manifest.input(path);
    return plan_from_json(read_text(path));
}

std::string join(const std::vector<std::size_t>& v, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += fmt::format("{}{}", i ? sep : "", v[i]);
    return out;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

struct ScoreArgs {
    std::string checkpoint;
    std::string naming = "llama";
    std::string mode = "whole";
    std::size_t heads = 0;
    std::string out;
};

CheckpointScores score_file(const std::string& path, const std::string& naming, const std::string& mode,
                            std::size_t heads) {
    ScoreOptions options;
    options.mode = parse_score_mode(mode);
    OpenCheckpoint c = open_checkpoint(path, naming);
    options.heads = heads;
    if (options.heads == 0) {
        if (const auto config = config_from_metadata(*c.index)) options.heads = config->heads;
    }
    return score_checkpoint(*c.index, c.map, *c.source, options);
}

int cmd_score(const CLI::App& sub, const ScoreArgs& a, std::ostream& out) {
    Manifest manifest;
    manifest.input(a.checkpoint);
    const CheckpointScores scores = score_file(a.checkpoint, a.naming, a.mode, a.heads);
    write_text(a.out, scores_to_text(scores));
    manifest.write(sub, a.out);
    fmt::print(out, "scored {} layers ({}) -> {}\n", scores.scores.size(), scores.fingerprint, a.out);
    return kSuccess;
}

// ---------------------------------------------------------------------------
// plan
// ---------------------------------------------------------------------------

struct PlanArgs {
    std::string scores;
    std::string method = "gate-norm";
    std::size_t n = 0;
    std::uint64_t plan_seed = 1;
    std::string mode = "whole";
    std::size_t heads = 0;
    ModelArgs model;
    TokenArgs tokens;
    std::string out;
};

int cmd_plan(const CLI::App& sub, const PlanArgs& a, std::ostream& out) {
    Manifest manifest;
    const PlanMethod method = parse_method(a.method);
    PruningPlan plan;
    const bool seeded_model = a.model.checkpoint.empty();

    if (method == PlanMethod::gate_norm || method == PlanMethod::random_attn || method == PlanMethod::random_block) {
        CheckpointScores scores;
        if (!a.scores.empty()) {
            manifest.input(a.scores);
            scores = scores_from_text(read_text(a.scores));
        } else if (!a.model.checkpoint.empty()) {
            manifest.input(a.model.checkpoint);
            scores = score_file(a.model.checkpoint, a.model.naming, a.mode, a.heads);
        } else {
            const Model model = build_model(a.model, manifest);
            scores = score_model(model, parse_score_mode(a.mode));
        }
        if (method == PlanMethod::gate_norm) {
            plan = plan_one_shot(scores.scores, a.n, scores.fingerprint);
        } else {
            plan = plan_random(scores.scores.size(), a.n, default_unit(method), a.plan_seed, scores.fingerprint);
        }
    } else {
        if (!a.scores.empty()) throw UsageError("data-driven methods need a model, not a score file");
        (void)seeded_model;
        const Model model = build_model(a.model, manifest);
        const TokenStream stream = load_tokens(a.tokens, model, manifest);
        const auto importances = data_importances(model, stream, method, a.tokens.window);
        plan = plan_from_importance(importances, a.n, default_unit(method), method, score_model(model).fingerprint);
    }
    write_text(a.out, plan_to_json(plan));
    manifest.write(sub, a.out);
    fmt::print(out, "{} plan over {} layers removes [{}] -> {}\n", method_name(plan.method), plan.num_layers,
               join(plan.removed, ","), a.out);
    return kSuccess;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
    ModelArgs model;
    TokenArgs tokens;
    std::string plan;
    bool centered = false;
    std::string out;
};

int cmd_simulate(const CLI::App& sub, const SimulateArgs& a, std::ostream& out) {
    Manifest manifest;
    const Model model = build_model(a.model, manifest);
    const std::string fingerprint = score_model(model).fingerprint;
    PlanApplication application = PlanApplication::none(model.blocks.size());
    std::optional<PruningPlan> plan;
    if (!a.plan.empty()) {
        plan = load_plan(a.plan, manifest);
        if (!plan->source_fingerprint.empty() && plan->source_fingerprint != fingerprint) {
            throw ContractError(fmt::format("plan was made for weights {} but the model is {}",
                                            plan->source_fingerprint, fingerprint));
        }
        application = PlanApplication::from_plan(*plan, model.blocks.size());
    }
    const TokenStream stream = load_tokens(a.tokens, model, manifest);
    if (stream.ids.empty()) throw ContractError("simulate needs tokens");
    if (stream.vocab > model.config.vocab) {
        throw ContractError(fmt::format("stream vocab {} exceeds model vocab {}", stream.vocab, model.config.vocab));
    }

    const std::size_t window = a.tokens.window == 0 ? model.config.max_seq : a.tokens.window;
    std::vector<ForwardTrace> traces;
    NllSum nll;
    std::uint64_t macs = 0;
    for (const auto w : stream.windows(window)) {
        ForwardTrace t = model_forward(w, model, application);
        const NllSum s = sequence_nll(t.logits, w);
        nll.nll += s.nll;
        nll.count += s.count;
        macs += t.macs;
        t.logits = Tensor2D();
        traces.push_back(std::move(t));
    }
    if (nll.count == 0) throw ContractError("token stream has no position to predict");
    const double ppl = std::exp(nll.nll / static_cast<double>(nll.count));

    ImportanceOptions options;
    options.centered = a.centered;
    const ImportanceReport report = build_report(model, traces, options);
    write_text(a.out, report.to_csv());

    ojson summary;
    summary["schema"] = "simulate/1";
    summary["perplexity"] = ppl;
    summary["predicted"] = nll.count;
    summary["tokens"] = report.tokens;
    summary["macs"] = macs;
    summary["source_fingerprint"] = fingerprint;
    if (plan) {
        summary["plan"] = {{"method", std::string(method_name(plan->method))},
                           {"unit", std::string(unit_name(plan->unit))},
                           {"removed", plan->removed}};
    } else {
        summary["plan"] = nullptr;
    }
    write_text(a.out + ".summary.json", summary.dump(2) + "\n");
    manifest.write(sub, a.out);
    fmt::print(out, "perplexity {:.6f} over {} predictions; report -> {}\n", ppl, nll.count, a.out);
    return kSuccess;
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

struct ValidateArgs {
    std::size_t trials = 10000;
    std::size_t rows = 1000;
    std::size_t sweep_seeds = 4;
    std::uint64_t seed = 1;
    std::string fault = "none";
    std::string out;
};

int cmd_validate(const CLI::App& sub, const ValidateArgs& a, std::ostream& out) {
    SuiteOptions options;
    options.seed = a.seed;
    options.cosine_trials = a.trials;
    options.logit_trials = a.trials;
    options.softmax_rows = a.rows;
    options.decomposition_rows = a.rows;
    options.sweep_seeds = a.sweep_seeds;
    if (a.fault == "negated-stabilizer") {
        options.fault = SoftmaxFault::negated_stabilizer;
    } else if (a.fault != "none") {
        throw UsageError(fmt::format("unknown fault '{}' (expected none or negated-stabilizer)", a.fault));
    }
    const auto results = run_bound_suite(options);
    bool all = true;
    for (const auto& r : results) {
        fmt::print(out, "{:<22} {} trials={} min_slack={:.3g} max_residual={:.3g}{}\n", r.name,
                   r.passed ? "PASS" : "FAIL", r.trials, r.min_slack, r.max_residual,
                   r.detail.empty() ? "" : "  (" + r.detail + ")");
        all = all && r.passed;
    }
    if (!a.out.empty()) {
        write_text(a.out, bound_results_to_json(results));
        Manifest().write(sub, a.out);
    }
    if (!all) throw ContractError("one or more bound checks failed");
    return kSuccess;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
    std::string checkpoint;
    std::string naming = "llama";
    std::size_t layers = 8;
    std::size_t dim = 2048;
    std::string dtype = "f16";
    std::size_t repeats = 3;
    std::uint64_t seed = 1;
    std::string scratch;
    std::size_t profile_dim = 0;
    std::vector<std::size_t> profile_lengths = {512, 1024, 2048, 4096};
    std::size_t profile_runs = 5;
    std::string out;
};

int cmd_bench(const CLI::App& sub, const BenchArgs& a, std::ostream& out) {
    if (a.repeats == 0) throw UsageError("--repeats must be positive");
    Manifest manifest;
    std::string path = a.checkpoint;
    bool temporary = false;
    if (path.empty()) {
        ModelConfig config;
        config.num_layers = a.layers;
        config.dim = a.dim;
        config.heads = a.dim % 64 == 0 ? a.dim / 64 : 1;
        config.ffn_dim = 1;
        config.vocab = 1;
        config.max_seq = 1;
        SynthOptions options;
        options.dtype = require_dtype(a.dtype);
        options.qk_only = true;
        const fs::path dir = a.scratch.empty() ? fs::temp_directory_path() : fs::path(a.scratch);
        path = (dir / fmt::format("gatenorm-bench-{}x{}-{}-{}.safetensors", a.layers, a.dim, a.dtype, a.seed)).string();
        std::ofstream file(path, std::ios::binary | std::ios::trunc);
        if (!file) throw IoError(fmt::format("cannot create '{}'", path));
        synth_checkpoint(config, a.seed, {}, file, options);
        file.close();
        if (!file) throw IoError(fmt::format("failed writing '{}'", path));
        temporary = true;
    } else {
        manifest.input(path);
    }

    ojson j;
    j["schema"] = "bench/1";
    try {
        std::vector<double> seconds;
        std::size_t peak = 0;
        std::uint64_t pair_bytes = 0;
        CheckpointScores scores;
        for (std::size_t r = 0; r < a.repeats; ++r) {
            memtrack::Scope scope;
            const auto t0 = std::chrono::steady_clock::now();
            {
                OpenCheckpoint c = open_checkpoint(path, a.naming);
                scores = score_checkpoint(*c.index, c.map, *c.source);
                for (std::size_t l = 1; l <= c.map.num_layers(); ++l) {
                    const auto& q = c.index->at(c.map.layer(l).name(Role::query));
                    const auto& k = c.index->at(c.map.layer(l).name(Role::key));
                    pair_bytes = std::max<std::uint64_t>(pair_bytes, 4 * (q.element_count() + k.element_count()));
                }
            }
            const auto t1 = std::chrono::steady_clock::now();
            seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
            peak = std::max(peak, scope.peak_growth());
        }
        auto sorted = seconds;
        std::sort(sorted.begin(), sorted.end());
        j["checkpoint"] = temporary ? "synthetic" : path;
        j["layers"] = scores.scores.size();
        j["pair_bytes"] = pair_bytes;
        j["ceiling_bytes"] = 3 * pair_bytes;
        j["peak_bytes"] = peak;
        j["within_ceiling"] = peak <= 3 * pair_bytes;
        j["source_fingerprint"] = scores.fingerprint;
        ojson ms = ojson::array();
        for (const auto& s : scores.scores) ms.push_back(s.m);
        j["scores"] = ms;
        j["scoring_seconds"] = seconds;
        j["scoring_median_s"] = sorted[sorted.size() / 2];
        j["scoring_min_s"] = sorted.front();
        fmt::print(out, "scored {} layers: median {:.3f} s, peak {:.1f} MiB (ceiling {:.1f} MiB)\n", scores.scores.size(),
                   sorted[sorted.size() / 2], static_cast<double>(peak) / (1 << 20),
                   static_cast<double>(3 * pair_bytes) / (1 << 20));
    } catch (...) {
        if (temporary) fs::remove(path);
        throw;
    }
    if (temporary) fs::remove(path);

    if (a.profile_dim > 0) {
        ModelConfig config;
        config.num_layers = 1;
        config.dim = a.profile_dim;
        config.heads = a.profile_dim % 64 == 0 ? a.profile_dim / 64 : 1;
        config.ffn_dim = 4 * a.profile_dim;
        config.vocab = 16;
        config.max_seq = *std::max_element(a.profile_lengths.begin(), a.profile_lengths.end());
        const Model model = init_random(config, a.seed);
        ProfileOptions po;
        po.runs = a.profile_runs;
        po.seed = a.seed;
        const TimingProfile profile = profile_sublayers(model, a.profile_lengths, po);
        ojson entries = ojson::array();
        for (const auto& e : profile.entries) {
            entries.push_back({{"kind", std::string(sublayer_name(e.kind))},
                               {"seq_len", e.seq_len},
                               {"median_s", e.median_s},
                               {"min_s", e.min_s},
                               {"runs", e.runs}});
            fmt::print(out, "{:<9} S={:<5} median {:.4f} s  min {:.4f} s\n", sublayer_name(e.kind), e.seq_len, e.median_s,
                       e.min_s);
        }
        j["profile"] = {{"dim", a.profile_dim}, {"entries", entries}};
    }
    write_text(a.out, j.dump(2) + "\n");
    manifest.write(sub, a.out);
    return kSuccess;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string out;
};

struct SweepTable {
    std::vector<std::string> rows;
};

SweepTable parse_sweep_table(const std::string& text, const std::string& path) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    std::getline(in, line);
    if (line != "method,N,perplexity,flop_reduction") throw FormatError(fmt::format("'{}': bad sweep header", path));
    SweepTable t;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::count(line.begin(), line.end(), ',') != 3) {
            throw FormatError(fmt::format("'{}': malformed sweep row '{}'", path, line));
        }
        t.rows.push_back(line);
    }
    return t;
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

int cmd_report(const CLI::App& sub, const ReportArgs& a, std::ostream& out) {
    Manifest manifest;
    std::vector<std::pair<std::string, SweepTable>> sweeps;
    std::vector<std::pair<std::string, PruningPlan>> plans;
    std::vector<std::pair<std::string, CheckpointScores>> scores;
    std::vector<std::pair<std::string, ImportanceReport>> importances;
    for (const auto& path : a.inputs) {
        manifest.input(path);
        const std::string text = read_text(path);
        if (text.rfind("# report/1 sweep", 0) == 0) {
            sweeps.emplace_back(path, parse_sweep_table(text, path));
        } else if (text.rfind("# scores/1", 0) == 0) {
            scores.emplace_back(path, scores_from_text(text));
        } else if (text.rfind(ImportanceReport::kHeader, 0) == 0) {
            importances.emplace_back(path, ImportanceReport::from_csv(text));
        } else if (!text.empty() && text.front() == '{') {
            plans.emplace_back(path, plan_from_json(text));
        } else {
            throw FormatError(fmt::format("'{}' is not a sweep table, score file, importance report or plan", path));
        }
    }

    std::optional<std::size_t> layers;
    const auto check_layers = [&](std::size_t l, const std::string& path) {
        if (layers && *layers != l) {
            throw ContractError(fmt::format("'{}' covers {} layers but earlier inputs cover {}", path, l, *layers));
        }
        layers = l;
    };
    for (const auto& [p, plan] : plans) check_layers(plan.num_layers, p);
    for (const auto& [p, s] : scores) check_layers(s.scores.size(), p);
    for (const auto& [p, r] : importances) check_layers(r.layers.size(), p);

    std::string text;
    if (a.inputs.size() == 1) {
        // A single input is reproduced in its canonical form.
        if (!sweeps.empty()) {
            text = "# report/1 sweep\nmethod,N,perplexity,flop_reduction\n";
            for (const auto& r : sweeps.front().second.rows) text += r + "\n";
        } else if (!plans.empty()) {
            text = plan_to_json(plans.front().second);
        } else if (!scores.empty()) {
            text = scores_to_text(scores.front().second);
        } else {
            text = importances.front().second.to_csv();
        }
    } else {
        if (!sweeps.empty()) {
            text += "# report/1 sweep\nmethod,N,perplexity,flop_reduction\n";
            for (const auto& [p, t] : sweeps) {
                for (const auto& r : t.rows) text += r + "\n";
            }
        }
        if (plans.size() >= 2) {
            text += "# report/1 plan-overlap\nplan_a,plan_b,shared,jaccard,only_a,only_b\n";
            for (std::size_t i = 0; i < plans.size(); ++i) {
                for (std::size_t j = i + 1; j < plans.size(); ++j) {
                    const PlanOverlap o = plan_overlap(plans[i].second, plans[j].second);
                    text += fmt::format("{},{},{},{:.17g},{},{}\n", stem(plans[i].first), stem(plans[j].first),
                                        o.shared.size(), o.jaccard, join(o.only_a, " "), join(o.only_b, " "));
                }
            }
        }
        if (!scores.empty() || !importances.empty()) {
            text += "# report/1 scatter\nlayer";
            for (const auto& [p, s] : scores) text += fmt::format(",{}.gate_norm", stem(p));
            for (const auto& [p, r] : importances) {
                const std::string s = stem(p);
                text += fmt::format(",{0}.imp_attn,{0}.imp_block,{0}.imp_mlp,{0}.norm_ratio", s);
            }
            text += "\n";
            for (std::size_t l = 0; l < layers.value_or(0); ++l) {
                text += fmt::format("{}", l + 1);
                for (const auto& [p, s] : scores) text += fmt::format(",{:.17g}", s.scores[l].m);
                for (const auto& [p, r] : importances) {
                    const auto& li = r.layers[l];
                    text += fmt::format(",{:.17g},{:.17g},{:.17g},{:.17g}", li.imp_attn, li.imp_block, li.imp_mlp,
                                        li.norm_ratio);
                }
                text += "\n";
            }
        }
    }
    write_text(a.out, text);
    manifest.write(sub, a.out);
    fmt::print(out, "merged {} inputs -> {}\n", a.inputs.size(), a.out);
    return kSuccess;
}

// ---------------------------------------------------------------------------
// synth, stream, sweep
// ---------------------------------------------------------------------------

struct SynthArgs {
    ModelArgs model;
    std::string dtype = "f32";
    bool qk_only = false;
    std::string out;
};

int cmd_synth(const CLI::App& sub, const SynthArgs& a, std::ostream& out) {
    Manifest manifest;
    ModelConfig config;
    if (!a.model.config.empty()) {
        manifest.input(a.model.config);
        config = load_config(a.model.config);
    }
    SynthOptions options;
    options.dtype = require_dtype(a.dtype);
    options.qk_only = a.qk_only;
    const auto suppression = parse_suppression(a.model.suppress);
    std::ofstream file(a.out, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError(fmt::format("cannot open '{}' for writing", a.out));
    synth_checkpoint(config, a.model.seed, suppression, file, options);
    file.close();
    if (!file) throw IoError(fmt::format("failed writing '{}'", a.out));
    manifest.write(sub, a.out);
    fmt::print(out, "wrote {}-layer checkpoint -> {}\n", config.num_layers, a.out);
    return kSuccess;
}

struct StreamArgs {
    std::uint32_t vocab = 256;
    std::size_t count = 4096;
    std::uint64_t seed = 1;
    std::string out;
};

int cmd_stream(const CLI::App& sub, const StreamArgs& a, std::ostream& out) {
    TokenStream::synthetic(a.vocab, a.count, a.seed).save(a.out);
    Manifest().write(sub, a.out);
    fmt::print(out, "wrote {} tokens -> {}\n", a.count, a.out);
    return kSuccess;
}

struct SweepArgs {
    ModelArgs model;
    TokenArgs tokens;
    std::vector<std::string> methods = {"gate-norm", "data-attn", "data-block", "random-attn"};
    std::vector<std::size_t> counts = {0, 1, 2, 4};
    std::uint64_t plan_seed = 1;
    std::string out;
};

int cmd_sweep(const CLI::App& sub, const SweepArgs& a, std::ostream& out) {
    Manifest manifest;
    const Model model = build_model(a.model, manifest);
    const TokenStream stream = load_tokens(a.tokens, model, manifest);
    SweepOptions options;
    options.methods.clear();
    for (const auto& m : a.methods) options.methods.push_back(parse_method(m));
    options.counts = a.counts;
    options.window = a.tokens.window;
    options.plan_seed = a.plan_seed;
    const auto rows = sweep(model, stream, options);
    write_text(a.out, sweep_to_csv(rows));
    manifest.write(sub, a.out);
    fmt::print(out, "swept {} cells -> {}\n", rows.size(), a.out);
    return kSuccess;
}

int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::usage: return kUsage;
        case ErrorKind::input_format:
        case ErrorKind::io: return kInputFormat;
        case ErrorKind::contract: return kContract;
    }
    return kInternal;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Data-free attention-sublayer pruning toolkit"};
    app.name(args.empty() ? "gatenorm" : fs::path(args.front()).filename().string());
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    ScoreArgs score;
    auto* s_score = app.add_subcommand("score", "Gate-norm of every attention sublayer of a checkpoint");
    s_score->add_option("--checkpoint", score.checkpoint, "Checkpoint file")->required();
    s_score->add_option("--naming-scheme", score.naming, "Tensor naming scheme")->capture_default_str();
    s_score->add_option("--mode", score.mode, "whole or per-head")->capture_default_str();
    s_score->add_option("--heads", score.heads, "Query head count (0 = from checkpoint metadata)")->capture_default_str();
    s_score->add_option("--out", score.out, "Score file")->required();

    PlanArgs plan;
    auto* s_plan = app.add_subcommand("plan", "One-shot pruning plan");
    s_plan->add_option("--scores", plan.scores, "Score file from 'score'");
    s_plan->add_option("--method", plan.method, "gate-norm, data-attn, data-block, random-attn or random-block")
        ->capture_default_str();
    s_plan->add_option("-N,--count", plan.n, "Layers to remove")->required();
    s_plan->add_option("--plan-seed", plan.plan_seed, "Seed of the random planners")->capture_default_str();
    s_plan->add_option("--mode", plan.mode, "Score mode when scoring on the fly")->capture_default_str();
    s_plan->add_option("--heads", plan.heads, "Query head count for per-head or grouped-query scoring")
        ->capture_default_str();
    add_model_options(s_plan, plan.model);
    add_token_options(s_plan, plan.tokens);
    s_plan->add_option("--out", plan.out, "Plan file")->required();

    SimulateArgs sim;
    auto* s_sim = app.add_subcommand("simulate", "Run the toy model and report data-driven importances");
    add_model_options(s_sim, sim.model);
    add_token_options(s_sim, sim.tokens);
    s_sim->add_option("--plan", sim.plan, "Plan to apply");
    s_sim->add_flag("--centered", sim.centered, "Mean-center activations before comparing");
    s_sim->add_option("--out", sim.out, "Importance report")->required();

    ValidateArgs val;
    auto* s_val = app.add_subcommand("validate", "Randomized bound-check battery");
    s_val->add_option("--trials", val.trials, "Trials of the cosine and logit checks")->capture_default_str();
    s_val->add_option("--rows", val.rows, "Rows per epsilon for softmax, and decomposition rows")->capture_default_str();
    s_val->add_option("--sweep-seeds", val.sweep_seeds, "Models in the scaling sweep")->capture_default_str();
    s_val->add_option("--seed", val.seed, "Seed")->capture_default_str();
    s_val->add_option("--inject-fault", val.fault, "none or negated-stabilizer")->capture_default_str();
    s_val->add_option("--out", val.out, "Results file");

    BenchArgs bench;
    auto* s_bench = app.add_subcommand("bench", "Scoring time and peak memory, optional sublayer timing");
    s_bench->add_option("--checkpoint", bench.checkpoint, "Checkpoint to score (default: synthesize one)");
    s_bench->add_option("--naming-scheme", bench.naming, "Tensor naming scheme")->capture_default_str();
    s_bench->add_option("--layers", bench.layers, "Synthetic layer count")->capture_default_str();
    s_bench->add_option("--dim", bench.dim, "Synthetic hidden size")->capture_default_str();
    s_bench->add_option("--dtype", bench.dtype, "Synthetic dtype")->capture_default_str();
    s_bench->add_option("--repeats", bench.repeats, "Scoring repetitions")->capture_default_str();
    s_bench->add_option("--seed", bench.seed, "Seed")->capture_default_str();
    s_bench->add_option("--scratch", bench.scratch, "Directory for the synthetic checkpoint");
    s_bench->add_option("--profile-dim", bench.profile_dim, "Hidden size of the sublayer profile (0 = skip)")
        ->capture_default_str();
    s_bench->add_option("--profile-lengths", bench.profile_lengths, "Sequence lengths to profile")
        ->delimiter(',')
        ->capture_default_str();
    s_bench->add_option("--profile-runs", bench.profile_runs, "Timed runs per point")->capture_default_str();
    s_bench->add_option("--out", bench.out, "Results file")->required();

    ReportArgs report;
    auto* s_report = app.add_subcommand("report", "Merge sweep tables, plans, scores and importance reports");
    s_report->add_option("--inputs", report.inputs, "Input files")->required()->expected(1, -1);
    s_report->add_option("--out", report.out, "Merged report")->required();

    SynthArgs synth;
    auto* s_synth = app.add_subcommand("synth", "Write a seeded synthetic checkpoint");
    add_model_options(s_synth, synth.model, false);
    s_synth->add_option("--dtype", synth.dtype, "f32, f16 or bf16")->capture_default_str();
    s_synth->add_flag("--qk-only", synth.qk_only, "Only query and key projections");
    s_synth->add_option("--out", synth.out, "Checkpoint file")->required();

    StreamArgs stream;
    auto* s_stream = app.add_subcommand("stream", "Write a seeded synthetic token stream");
    s_stream->add_option("--vocab", stream.vocab, "Vocabulary size")->capture_default_str();
    s_stream->add_option("--count", stream.count, "Token count")->capture_default_str();
    s_stream->add_option("--seed", stream.seed, "Seed")->capture_default_str();
    s_stream->add_option("--out", stream.out, "Stream file")->required();

    SweepArgs sw;
    auto* s_sweep = app.add_subcommand("sweep", "Perplexity against layers removed for several planners");
    add_model_options(s_sweep, sw.model);
    add_token_options(s_sweep, sw.tokens);
    s_sweep->add_option("--methods", sw.methods, "Planners")->delimiter(',')->capture_default_str();
    s_sweep->add_option("-N,--counts", sw.counts, "Removal counts")->delimiter(',')->capture_default_str();
    s_sweep->add_option("--plan-seed", sw.plan_seed, "Seed of the random planners")->capture_default_str();
    s_sweep->add_option("--out", sw.out, "Sweep table")->required();

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    if (argv.empty()) argv.push_back("gatenorm");
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kSuccess : kUsage;
    }

    try {
        if (*s_score) return cmd_score(*s_score, score, out);
        if (*s_plan) return cmd_plan(*s_plan, plan, out);
        if (*s_sim) return cmd_simulate(*s_sim, sim, out);
        if (*s_val) return cmd_validate(*s_val, val, out);
        if (*s_bench) return cmd_bench(*s_bench, bench, out);
        if (*s_report) return cmd_report(*s_report, report, out);
        if (*s_synth) return cmd_synth(*s_synth, synth, out);
        if (*s_stream) return cmd_stream(*s_stream, stream, out);
        if (*s_sweep) return cmd_sweep(*s_sweep, sw, out);
    } catch (const Error& e) {
        fmt::print(err, "error: {}\n", e.what());
        return exit_code_for(e);
    } catch (const std::exception& e) {
        fmt::print(err, "internal error: {}\n", e.what());
        return kInternal;
    }
    return kUsage;
}

}  // namespace gatenorm::cli
