#include "gatenorm/eval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include <fmt/core.h>

#include "gatenorm/error.hpp"
#include "gatenorm/importance.hpp"
#include "gatenorm/rng.hpp"

namespace gatenorm {

// ---------------------------------------------------------------------------
// Token streams
// ---------------------------------------------------------------------------

void TokenStream::validate() const {
    if (vocab == 0) throw ContractError("token stream vocab must be positive");
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab) throw ContractError(fmt::format("token {} at position {} is >= vocab {}", ids[i], i, vocab));
    }
}

namespace {

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::span<const std::byte> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::to_integer<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::byte> TokenStream::to_bytes() const {
    validate();
    if (ids.size() > 0xffffffffu) throw ContractError("token stream too long for a 32-bit count");
    std::vector<std::byte> out;
    out.reserve(16 + 4 * ids.size());
    for (const char c : {'T', 'O', 'K', 'S'}) out.push_back(static_cast<std::byte>(c));
    put_u32(out, kVersion);
    put_u32(out, vocab);
    put_u32(out, static_cast<std::uint32_t>(ids.size()));
    for (const auto id : ids) put_u32(out, id);
    return out;
}

TokenStream TokenStream::from_bytes(std::span<const std::byte> bytes) {
    if (bytes.size() < 16) throw FormatError(fmt::format("token stream is {} bytes, shorter than its header", bytes.size()));
    if (std::memcmp(bytes.data(), "TOKS", 4) != 0) throw FormatError("token stream lacks the TOKS magic");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kVersion) throw FormatError(fmt::format("unsupported token stream version {}", version));
    TokenStream s;
    s.vocab = get_u32(bytes, 8);
    const std::uint64_t count = get_u32(bytes, 12);
    if (bytes.size() != 16 + 4 * count) {
        throw FormatError(fmt::format("token stream declares {} ids but holds {} bytes of data", count, bytes.size() - 16));
    }
    if (s.vocab == 0) throw FormatError("token stream vocab is 0");
    s.ids.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        s.ids[i] = get_u32(bytes, 16 + 4 * i);
        if (s.ids[i] >= s.vocab) {
            throw FormatError(fmt::format("token {} at position {} is >= vocab {}", s.ids[i], i, s.vocab));
        }
    }
    return s;
}

void TokenStream::save(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(fmt::format("failed writing '{}'", path.string()));
}

TokenStream TokenStream::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open token stream '{}'", path.string()));
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError(fmt::format("failed reading '{}'", path.string()));
    return from_bytes(std::as_bytes(std::span<const char>(raw)));
}

TokenStream TokenStream::synthetic(std::uint32_t vocab, std::size_t count, std::uint64_t seed) {
    if (vocab == 0) throw ContractError("token stream vocab must be positive");
    TokenStream s;
    s.vocab = vocab;
    s.ids.resize(count);
    Rng rng(seed);
    for (auto& id : s.ids) id = static_cast<std::uint32_t>(rng.below(vocab));
    return s;
}

std::vector<std::span<const std::uint32_t>> TokenStream::windows(std::size_t length) const {
    if (length == 0) throw ContractError("window length must be positive");
    std::vector<std::span<const std::uint32_t>> out;
    for (std::size_t start = 0; start < ids.size(); start += length) {
        out.emplace_back(ids.data() + start, std::min(length, ids.size() - start));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

NllSum sequence_nll(const Tensor2D& logits, std::span<const std::uint32_t> tokens) {
    if (logits.rows() != tokens.size()) {
        throw ContractError(fmt::format("{} logit rows for {} tokens", logits.rows(), tokens.size()));
    }
    NllSum s;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        const auto row = logits.row(t);
        const std::uint32_t next = tokens[t + 1];
        if (next >= row.size()) throw ContractError(fmt::format("token {} outside {} logits", next, row.size()));
        const double mx = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (const float v : row) sum += std::exp(static_cast<double>(v) - mx);
        s.nll += mx + std::log(sum) - static_cast<double>(row[next]);
        ++s.count;
    }
    return s;
}

PerplexityResult evaluate_perplexity(const Model& model, const PlanApplication& application, const TokenStream& stream,
                                     std::size_t window) {
    if (stream.ids.empty()) throw ContractError("perplexity needs a nonempty token stream");
    if (stream.vocab > model.config.vocab) {
        throw ContractError(fmt::format("stream vocab {} exceeds model vocab {}", stream.vocab, model.config.vocab));
    }
    const std::size_t len = window == 0 ? model.config.max_seq : window;
    NllSum total;
    PerplexityResult r;
    for (const auto w : stream.windows(len)) {
        if (w.size() < 2) continue;
        const ForwardTrace trace = model_forward(w, model, application, CaptureFlags::logits_only());
        const NllSum s = sequence_nll(trace.logits, w);
        total.nll += s.nll;
        total.count += s.count;
        r.macs += trace.macs;
    }
    if (total.count == 0) throw ContractError("token stream has no position to predict");
    r.predicted = total.count;
    r.perplexity = std::exp(total.nll / static_cast<double>(total.count));
    return r;
}

double perplexity(const Model& model, const PlanApplication& application, const TokenStream& stream,
                  std::size_t window) {
    return evaluate_perplexity(model, application, stream, window).perplexity;
}

// ---------------------------------------------------------------------------
// Timing
// ---------------------------------------------------------------------------

std::string_view sublayer_name(SublayerKind kind) { return kind == SublayerKind::attention ? "attention" : "mlp"; }

const TimingEntry& TimingProfile::at(SublayerKind kind, std::size_t seq_len) const {
    for (const auto& e : entries) {
        if (e.kind == kind && e.seq_len == seq_len) return e;
    }
    throw ContractError(fmt::format("no {} timing at length {}", sublayer_name(kind), seq_len));
}

namespace {

std::atomic<bool> g_profiling{false};

class ProfileGuard {
public:
    ProfileGuard() {
        if (g_profiling.exchange(true)) throw ContractError("another timing profile is already running");
    }
    ~ProfileGuard() { g_profiling.store(false); }
    ProfileGuard(const ProfileGuard&) = delete;
    ProfileGuard& operator=(const ProfileGuard&) = delete;
};

template <typename F>
TimingEntry time_runs(SublayerKind kind, std::size_t seq_len, const ProfileOptions& options, F&& body) {
    for (std::size_t i = 0; i < options.warmup; ++i) body();
    std::vector<double> times;
    for (std::size_t i = 0; i < options.runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        body();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    TimingEntry e;
    e.kind = kind;
    e.seq_len = seq_len;
    e.runs = n;
    e.min_s = times.front();
    e.median_s = n % 2 == 1 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
    return e;
}

}  // namespace

TimingProfile profile_sublayers(const Model& model, std::span<const std::size_t> lengths,
                                const ProfileOptions& options) {
    if (options.runs < 5) throw ContractError("timing profiles need at least 5 runs");
    if (model.blocks.empty()) throw ContractError("model has no blocks to profile");
    for (const auto s : lengths) {
        if (s == 0 || s > model.config.max_seq) {
            throw ContractError(fmt::format("profile length {} outside [1, {}]", s, model.config.max_seq));
        }
    }
    ProfileGuard guard;
    const BlockWeights& w = model.blocks.front();
    TimingProfile p;
    Rng rng(options.seed);
    for (const auto s : lengths) {
        Tensor2D z(s, model.config.dim);
        for (float& v : z.values()) v = static_cast<float>(rng.normal());
        p.entries.push_back(time_runs(SublayerKind::attention, s, options, [&] {
            const Tensor2D out = attention_forward(z, w, model.config);
            if (out.empty()) throw ContractError("empty attention output");
        }));
        p.entries.push_back(time_runs(SublayerKind::mlp, s, options, [&] {
            const Tensor2D out = mlp_forward(z, w, model.config);
            if (out.empty()) throw ContractError("empty mlp output");
        }));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Plans and sweeps
// ---------------------------------------------------------------------------

PlanOverlap plan_overlap(const PruningPlan& a, const PruningPlan& b) {
    if (a.unit != b.unit) {
        throw ContractError(fmt::format("cannot compare a {} plan with a {} plan", unit_name(a.unit), unit_name(b.unit)));
    }
    if (a.num_layers != b.num_layers) {
        throw ContractError(fmt::format("cannot compare plans over {} and {} layers", a.num_layers, b.num_layers));
    }
    const std::set<std::size_t> sa(a.removed.begin(), a.removed.end());
    const std::set<std::size_t> sb(b.removed.begin(), b.removed.end());
    PlanOverlap o;
    std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(o.shared));
    std::set_difference(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(o.only_a));
    std::set_difference(sb.begin(), sb.end(), sa.begin(), sa.end(), std::back_inserter(o.only_b));
    const std::size_t uni = o.shared.size() + o.only_a.size() + o.only_b.size();
    o.jaccard = uni == 0 ? 1.0 : static_cast<double>(o.shared.size()) / static_cast<double>(uni);
    return o;
}

std::vector<std::pair<std::size_t, double>> data_importances(const Model& model, const TokenStream& stream,
                                                             PlanMethod method, std::size_t window) {
    if (method != PlanMethod::data_driven_attn && method != PlanMethod::data_driven_block) {
        throw ContractError(fmt::format("{} is not a data-driven method", method_name(method)));
    }
    if (stream.ids.empty()) throw ContractError("data-driven importance needs calibration tokens");
    const std::size_t len = window == 0 ? model.config.max_seq : window;
    CaptureFlags capture{true, false, method == PlanMethod::data_driven_attn, false, false};
    std::vector<ForwardTrace> traces;
    for (const auto w : stream.windows(len)) {
        traces.push_back(model_forward(w, model, PlanApplication::none(model.blocks.size()), capture));
    }
    const auto imp = method == PlanMethod::data_driven_attn ? attn_importance(traces) : block_importance(traces);
    std::vector<std::pair<std::size_t, double>> out;
    for (std::size_t l = 0; l < imp.size(); ++l) out.emplace_back(l + 1, imp[l]);
    return out;
}

std::vector<SweepRow> sweep(const Model& model, const TokenStream& stream, const SweepOptions& options) {
    const std::size_t layers = model.blocks.size();
    for (const auto n : options.counts) {
        if (n > layers) throw ContractError(fmt::format("sweep count {} exceeds {} layers", n, layers));
    }
    const PerplexityResult base = evaluate_perplexity(model, PlanApplication::none(layers), stream, options.window);
    const TokenStream& calibration = options.calibration != nullptr ? *options.calibration : stream;

    std::vector<SweepRow> rows;
    for (const PlanMethod method : options.methods) {
        std::vector<GateScore> scores;
        std::vector<std::pair<std::size_t, double>> importances;
        if (method == PlanMethod::gate_norm) scores = score_model(model).scores;
        if (method == PlanMethod::data_driven_attn || method == PlanMethod::data_driven_block) {
            importances = data_importances(model, calibration, method, options.window);
        }
        for (const auto n : options.counts) {
            PruningPlan plan;
            switch (method) {
                case PlanMethod::gate_norm: plan = plan_one_shot(scores, n); break;
                case PlanMethod::data_driven_attn:
                case PlanMethod::data_driven_block:
                    plan = plan_from_importance(importances, n, default_unit(method), method);
                    break;
                case PlanMethod::random_attn:
                case PlanMethod::random_block:
                    plan = plan_random(layers, n, default_unit(method), options.plan_seed);
                    plan.method = method;
                    break;
            }
            SweepRow row;
            row.method = method;
            row.n = n;
            const PerplexityResult r =
                evaluate_perplexity(model, PlanApplication::from_plan(plan, layers), stream, options.window);
            row.perplexity = r.perplexity;
            row.flop_reduction = 1.0 - static_cast<double>(r.macs) / static_cast<double>(base.macs);
            rows.push_back(row);
        }
    }
    return rows;
}

std::string sweep_to_csv(std::span<const SweepRow> rows) {
    std::string out = "# report/1 sweep\nmethod,N,perplexity,flop_reduction\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{},{:.17g},{:.17g}\n", method_name(r.method), r.n, r.perplexity, r.flop_reduction);
    }
    return out;
}

}  // namespace gatenorm
