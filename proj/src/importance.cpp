#include "gatenorm/importance.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include <fmt/core.h>
#include <json.hpp>

#include "gatenorm/error.hpp"
#include "gatenorm/rng.hpp"
#include "gatenorm/scoring.hpp"

namespace gatenorm {

namespace {

bool is_padding(const ImportanceOptions& options, std::size_t trace, std::size_t pos) {
    if (options.padding.empty()) return false;
    const auto& mask = options.padding.at(trace);
    return pos < mask.size() && mask[pos];
}

void check_padding(std::span<const ForwardTrace> traces, const ImportanceOptions& options) {
    if (!options.padding.empty() && options.padding.size() != traces.size()) {
        throw ContractError(fmt::format("{} padding masks for {} traces", options.padding.size(), traces.size()));
    }
}

// Column mean over the non-padding rows of one trace.
Vector valid_mean(const Tensor2D& a, const ImportanceOptions& options, std::size_t trace) {
    Vector mean(a.cols(), 0.0f);
    std::vector<double> acc(a.cols(), 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        if (is_padding(options, trace, i)) continue;
        const auto r = a.row(i);
        for (std::size_t c = 0; c < a.cols(); ++c) acc[c] += r[c];
        ++n;
    }
    if (n == 0) return mean;
    for (std::size_t c = 0; c < a.cols(); ++c) mean[c] = static_cast<float>(acc[c] / static_cast<double>(n));
    return mean;
}

Tensor2D centered_copy(const Tensor2D& a, const ImportanceOptions& options, std::size_t trace) {
    const Vector mean = valid_mean(a, options, trace);
    Tensor2D out = a;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t c = 0; c < out.cols(); ++c) r[c] -= mean[c];
    }
    return out;
}

struct CosineSum {
    double sum = 0.0;
    std::size_t count = 0;
};

void accumulate_cosines(const Tensor2D& a, const Tensor2D& b, const ImportanceOptions& options, std::size_t trace,
                        CosineSum& acc) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ContractError(fmt::format("cannot compare activations {} and {}", a.shape_string(), b.shape_string()));
    }
    const Tensor2D* pa = &a;
    const Tensor2D* pb = &b;
    Tensor2D ca, cb;
    if (options.centered) {
        ca = centered_copy(a, options, trace);
        cb = centered_copy(b, options, trace);
        pa = &ca;
        pb = &cb;
    }
    for (std::size_t i = 0; i < a.rows(); ++i) {
        if (is_padding(options, trace, i)) continue;
        acc.sum += cosine(pa->row(i), pb->row(i));
        ++acc.count;
    }
}

using Selector = const Tensor2D& (*)(const ForwardTrace&, std::size_t);

const Tensor2D& pick(const std::vector<Tensor2D>& v, std::size_t l, const char* what) {
    if (l >= v.size() || v[l].empty()) throw ContractError(fmt::format("trace lacks {} for layer {}", what, l + 1));
    return v[l];
}

const Tensor2D& input_of(const ForwardTrace& t, std::size_t l) { return pick(t.x, l, "block inputs"); }
const Tensor2D& output_of(const ForwardTrace& t, std::size_t l) { return pick(t.x, l + 1, "block outputs"); }
const Tensor2D& post_attn_of(const ForwardTrace& t, std::size_t l) { return pick(t.y, l, "post-attention states"); }

std::size_t layer_count(std::span<const ForwardTrace> traces) {
    if (traces.empty()) throw ContractError("importance needs at least one trace");
    const std::size_t n = traces.front().x.empty() ? 0 : traces.front().x.size() - 1;
    if (n == 0) throw ContractError("traces do not capture block inputs");
    for (const auto& t : traces) {
        if (t.x.size() != n + 1) throw ContractError("traces disagree on the layer count");
    }
    return n;
}

std::vector<double> cosine_importance(std::span<const ForwardTrace> traces, const ImportanceOptions& options,
                                      Selector first, Selector second) {
    check_padding(traces, options);
    const std::size_t layers = layer_count(traces);
    std::vector<double> out(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        CosineSum acc;
        for (std::size_t k = 0; k < traces.size(); ++k) {
            accumulate_cosines(first(traces[k], l), second(traces[k], l), options, k, acc);
        }
        if (acc.count == 0) throw ContractError("every token is padding");
        out[l] = 1.0 - acc.sum / static_cast<double>(acc.count);
    }
    return out;
}

std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

}  // namespace

std::vector<double> block_importance(std::span<const ForwardTrace> traces, const ImportanceOptions& options) {
    return cosine_importance(traces, options, input_of, output_of);
}

std::vector<double> attn_importance(std::span<const ForwardTrace> traces, const ImportanceOptions& options) {
    return cosine_importance(traces, options, input_of, post_attn_of);
}

std::vector<double> mlp_importance(std::span<const ForwardTrace> traces, const ImportanceOptions& options) {
    return cosine_importance(traces, options, post_attn_of, output_of);
}

std::vector<double> norm_ratio(std::span<const ForwardTrace> traces, const ImportanceOptions& options) {
    check_padding(traces, options);
    const std::size_t layers = layer_count(traces);
    std::vector<double> out(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < traces.size(); ++k) {
            const Tensor2D& x = input_of(traces[k], l);
            const Tensor2D& a = pick(traces[k].attn_out, l, "attention outputs");
            for (std::size_t i = 0; i < x.rows(); ++i) {
                if (is_padding(options, k, i)) continue;
                num += l2_norm(a.row(i));
                den += l2_norm(x.row(i));
            }
        }
        if (!(den > 0.0)) throw ContractError(fmt::format("norm ratio of layer {}: inputs have zero norm", l + 1));
        out[l] = num / den;
    }
    return out;
}

double pair_importance(const Tensor2D& a, const Tensor2D& b, bool centered) {
    ImportanceOptions options;
    options.centered = centered;
    CosineSum acc;
    accumulate_cosines(a, b, options, 0, acc);
    if (acc.count == 0) throw ContractError("importance needs at least one token");
    return 1.0 - acc.sum / static_cast<double>(acc.count);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

std::string ImportanceReport::to_csv() const {
    std::string out(kHeader);
    out += '\n';
    for (const auto& l : layers) {
        out += fmt::format("{},{},{},{},{},{},{},{}\n", l.layer, fmt_double(l.imp_block), fmt_double(l.imp_attn),
                           fmt_double(l.imp_mlp), fmt_double(l.norm_ratio), fmt_double(l.gate_norm), tokens,
                           centered ? "true" : "false");
    }
    return out;
}

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

template <typename T>
T parse_number(std::string_view s, std::string_view what) {
    T v{};
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw FormatError(fmt::format("bad {} '{}' in importance report", what, s));
    }
    return v;
}

}  // namespace

ImportanceReport ImportanceReport::from_csv(std::string_view text) {
    auto lines = split(text, '\n');
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty() || lines.front() != kHeader) throw FormatError("importance report header is missing or wrong");
    ImportanceReport r;
    bool first = true;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = split(lines[i], ',');
        if (f.size() != 8) throw FormatError(fmt::format("importance report line {} has {} fields", i + 1, f.size()));
        LayerImportance l;
        l.layer = parse_number<std::size_t>(f[0], "layer");
        l.imp_block = parse_number<double>(f[1], "imp_block");
        l.imp_attn = parse_number<double>(f[2], "imp_attn");
        l.imp_mlp = parse_number<double>(f[3], "imp_mlp");
        l.norm_ratio = parse_number<double>(f[4], "norm_ratio");
        l.gate_norm = parse_number<double>(f[5], "gate_norm");
        const auto tokens = parse_number<std::size_t>(f[6], "tokens");
        if (f[7] != "true" && f[7] != "false") throw FormatError(fmt::format("bad centered flag '{}'", f[7]));
        const bool centered = f[7] == "true";
        if (first) {
            r.tokens = tokens;
            r.centered = centered;
            first = false;
        } else if (tokens != r.tokens || centered != r.centered) {
            throw FormatError("importance report rows disagree on tokens or centering");
        }
        if (l.layer != r.layers.size() + 1) throw FormatError(fmt::format("importance report line {} is out of order", i + 1));
        r.layers.push_back(l);
    }
    return r;
}

ImportanceReport build_report(const Model& model, std::span<const ForwardTrace> traces,
                              const ImportanceOptions& options) {
    const auto block = block_importance(traces, options);
    const auto attn = attn_importance(traces, options);
    const auto mlp = mlp_importance(traces, options);
    const auto ratio = norm_ratio(traces, options);
    const auto scores = score_model(model).scores;
    if (scores.size() != block.size()) throw ContractError("traces and model disagree on the layer count");

    ImportanceReport r;
    r.centered = options.centered;
    for (std::size_t k = 0; k < traces.size(); ++k) {
        for (std::size_t i = 0; i < traces[k].x.front().rows(); ++i) {
            if (!is_padding(options, k, i)) ++r.tokens;
        }
    }
    for (std::size_t l = 0; l < block.size(); ++l) {
        r.layers.push_back({l + 1, block[l], attn[l], mlp[l], ratio[l], scores[l].m});
    }
    return r;
}

// ---------------------------------------------------------------------------
// Validators
// ---------------------------------------------------------------------------

void BoundCheckResult::finish() {
    passed = min_slack >= -kSlackTolerance && max_residual <= residual_tolerance;
}

void BoundCheckResult::merge(const BoundCheckResult& other) {
    if (trials == 0) {
        *this = other;
        return;
    }
    trials += other.trials;
    min_slack = std::min(min_slack, other.min_slack);
    max_residual = std::max(max_residual, other.max_residual);
    passed = passed && other.passed;
    if (!other.detail.empty() && detail.find(other.detail) == std::string::npos) {
        detail += detail.empty() ? other.detail : "; " + other.detail;
    }
}

namespace {

BoundCheckResult start(std::string name, double residual_tolerance) {
    BoundCheckResult r;
    r.name = std::move(name);
    r.min_slack = std::numeric_limits<double>::infinity();
    r.residual_tolerance = residual_tolerance;
    return r;
}

}  // namespace

BoundCheckResult law_of_cosines_check(std::span<const float> x, std::span<const float> u) {
    if (x.size() != u.size() || x.empty()) throw ContractError("law of cosines needs equal-length nonempty vectors");
    Vector y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + u[i];
    const double nx = l2_norm(x);
    const double ny = l2_norm(y);
    const double nu = l2_norm(u);
    if (!(nx > 0.0) || !(ny > 0.0)) throw ContractError("law of cosines needs |x| > 0 and |x + u| > 0");
    const double c = cosine(x, y);

    BoundCheckResult r = start("law_of_cosines", 1e-5);
    r.trials = 1;
    const double scale = std::max({nx * nx, ny * ny, nu * nu});
    r.max_residual = std::abs(nu * nu - (ny * ny + nx * nx - 2.0 * nx * ny * c)) / scale;
    r.min_slack = (nu - std::abs(ny - nx)) / std::max({nx, ny, nu});
    r.finish();
    return r;
}

BoundCheckResult logit_bound_check(const Tensor2D& z, const Tensor2D& m, std::size_t head_dim) {
    if (z.empty() || m.rows() != z.cols() || m.cols() != z.cols() || head_dim == 0) {
        throw ContractError(
            fmt::format("logit bound needs Z (S x D) and M (D x D), got {} and {}", z.shape_string(), m.shape_string()));
    }
    Tensor2D logits = matmul_transposed(matmul(z, m), z);
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
    for (float& v : logits.values()) v *= scale;

    const double mf = frobenius_norm(m);
    const double root = std::sqrt(static_cast<double>(head_dim));
    std::vector<double> norms(z.rows());
    for (std::size_t i = 0; i < z.rows(); ++i) norms[i] = l2_norm(z.row(i));

    BoundCheckResult r = start("logit_bound", 0.0);
    r.trials = 1;
    double max_abs = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t j = 0; j < z.rows(); ++j) {
            const double q = std::abs(static_cast<double>(logits(i, j)));
            const double bound = norms[i] * norms[j] * mf / root;
            const double slack = bound > 0.0 ? (bound - q) / bound : -q;
            r.min_slack = std::min(r.min_slack, slack);
            max_abs = std::max(max_abs, q);
        }
    }
    r.constants["max_abs_logit"] = max_abs;
    r.constants["gate_norm"] = mf;
    r.finish();
    return r;
}

Vector checked_softmax(std::span<const float> row, std::size_t support, SoftmaxFault fault) {
    if (support == 0 || support > row.size()) throw ContractError("softmax support must be in [1, row length]");
    Vector out(row.begin(), row.end());
    if (fault == SoftmaxFault::none) {
        softmax_prefix(out, support);
        return out;
    }
    float mx = row[0];
    for (std::size_t j = 1; j < support; ++j) mx = std::max(mx, row[j]);
    double den = 0.0;
    for (std::size_t j = 0; j < support; ++j) den += std::exp(static_cast<double>(row[j] + mx));
    for (std::size_t j = 0; j < out.size(); ++j) {
        out[j] = j < support ? static_cast<float>(std::exp(static_cast<double>(row[j] - mx)) / den) : 0.0f;
    }
    return out;
}

BoundCheckResult softmax_uniformity_check(std::span<const Vector> logit_rows, std::span<const std::size_t> supports,
                                          SoftmaxFault fault) {
    if (logit_rows.size() != supports.size()) throw ContractError("one support size per logit row is required");
    BoundCheckResult r = start("softmax_uniformity", 1e-6);
    double max_eps = 0.0;
    for (std::size_t k = 0; k < logit_rows.size(); ++k) {
        const auto& row = logit_rows[k];
        const std::size_t s = supports[k];
        const Vector a = checked_softmax(row, s, fault);
        double eps = 0.0, dev = 0.0, sum = 0.0, masked = 0.0;
        const double uniform = 1.0 / static_cast<double>(s);
        for (std::size_t j = 0; j < s; ++j) {
            eps = std::max(eps, std::abs(static_cast<double>(row[j])));
            dev = std::max(dev, std::abs(static_cast<double>(a[j]) - uniform));
            sum += a[j];
        }
        for (std::size_t j = s; j < a.size(); ++j) masked = std::max(masked, std::abs(static_cast<double>(a[j])));
        const double bound = std::expm1(2.0 * eps) / static_cast<double>(s);
        r.min_slack = std::min(r.min_slack, bound - dev);
        r.max_residual = std::max({r.max_residual, std::abs(sum - 1.0), masked});
        max_eps = std::max(max_eps, eps);
        ++r.trials;
    }
    if (r.trials == 0) r.min_slack = 0.0;
    r.constants["max_eps"] = max_eps;
    r.finish();
    return r;
}

UpdateDecomposition update_decomposition(std::span<const float> weights, const Tensor2D& value_rows,
                                         std::span<const float> attn_row) {
    const std::size_t s = weights.size();
    if (s == 0 || value_rows.rows() != s || attn_row.size() != value_rows.cols()) {
        throw ContractError(fmt::format("update decomposition: {} weights, values {}, output width {}", s,
                                        value_rows.shape_string(), attn_row.size()));
    }
    const std::size_t d = value_rows.cols();
    const double uniform = 1.0 / static_cast<double>(s);
    std::vector<double> u(d, 0.0), delta(d, 0.0);
    double l1 = 0.0, max_row = 0.0, max_entry = 0.0;
    for (std::size_t j = 0; j < s; ++j) {
        const auto v = value_rows.row(j);
        const double w = static_cast<double>(weights[j]) - uniform;
        l1 += std::abs(w);
        max_row = std::max(max_row, l2_norm(v));
        for (std::size_t c = 0; c < d; ++c) {
            u[c] += v[c];
            delta[c] += w * v[c];
            max_entry = std::max(max_entry, std::abs(static_cast<double>(v[c])));
        }
    }
    UpdateDecomposition out;
    out.u.resize(d);
    out.delta.resize(d);
    double residual = 0.0, delta_sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
        u[c] /= static_cast<double>(s);
        out.u[c] = static_cast<float>(u[c]);
        out.delta[c] = static_cast<float>(delta[c]);
        residual = std::max(residual, std::abs(static_cast<double>(attn_row[c]) - (u[c] + delta[c])));
        delta_sq += delta[c] * delta[c];
    }
    BoundCheckResult& r = out.check;
    r = start("update_decomposition", 1e-6);
    r.trials = 1;
    r.max_residual = max_entry > 0.0 ? residual / max_entry : residual;
    const double bound = l1 * max_row;
    r.min_slack = max_row > 0.0 ? (bound - std::sqrt(delta_sq)) / max_row : 0.0;
    r.finish();
    return out;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ContractError("slope needs paired samples");
    std::vector<std::pair<double, double>> p;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0 && y[i] > 0.0) p.emplace_back(std::log(x[i]), std::log(y[i]));
    }
    if (p.size() < 2) throw ContractError("slope needs at least two positive samples");
    double mx = 0.0, my = 0.0;
    for (const auto& [a, b] : p) {
        mx += a;
        my += b;
    }
    mx /= static_cast<double>(p.size());
    my /= static_cast<double>(p.size());
    double sxy = 0.0, sxx = 0.0;
    for (const auto& [a, b] : p) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if (!(sxx > 0.0)) throw ContractError("slope needs at least two distinct x values");
    return sxy / sxx;
}

BoundCheckResult importance_bound_fit(std::span<const SweepPoint> points) {
    std::vector<double> ts;
    for (const auto& p : points) {
        if (std::find(ts.begin(), ts.end(), p.t) == ts.end()) ts.push_back(p.t);
    }
    if (ts.size() < 3) throw ContractError(fmt::format("importance bound fit needs 3 sweep points, got {}", ts.size()));

    double c = 0.0;
    bool any = false;
    for (const auto& p : points) {
        if (p.t <= 0.1 && p.m > 0.0) {
            c = std::max(c, p.imp / p.m);
            any = true;
        }
    }
    if (!any) throw ContractError("importance bound fit has no point with t <= 0.1 and m > 0");

    BoundCheckResult r = start("importance_bound", 1e-5);
    std::vector<double> ms, imps;
    for (const auto& p : points) {
        ++r.trials;
        if (p.m > 0.0) {
            const double bound = 1.05 * c * p.m;
            r.min_slack = std::min(r.min_slack, bound > 0.0 ? (bound - p.imp) / bound : -p.imp);
            ms.push_back(p.m);
            imps.push_back(p.imp);
        } else {
            r.max_residual = std::max(r.max_residual, std::abs(p.imp));
        }
    }
    if (r.min_slack == std::numeric_limits<double>::infinity()) r.min_slack = 0.0;
    const double slope = loglog_slope(ms, imps);
    r.constants["C"] = c;
    r.constants["slope"] = slope;
    r.finish();
    if (slope < 0.8) {
        r.passed = false;
        r.detail = fmt::format("log-log slope {:.3f} below 0.8", slope);
    }
    if (r.min_slack < -BoundCheckResult::kSlackTolerance) {
        r.detail += fmt::format("{}importance exceeds 1.05 C m by {:.3g} relative", r.detail.empty() ? "" : "; ",
                                -r.min_slack);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Sweeps and suites
// ---------------------------------------------------------------------------

namespace {

std::vector<std::uint32_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<std::uint32_t> t(n);
    for (auto& v : t) v = static_cast<std::uint32_t>(rng.below(vocab));
    return t;
}

Tensor2D random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Tensor2D t(rows, cols);
    for (float& v : t.values()) v = static_cast<float>(rng.normal() * stddev);
    return t;
}

struct SweepSetup {
    ModelConfig config;
    Model model;
    std::size_t layer = 0;
    std::vector<Tensor2D> inputs;  // X_l per sequence
    std::vector<Tensor2D> normed;  // Norm(X_l) per sequence
};

SweepSetup prepare_sweep(const ScaleSweepOptions& options, std::uint64_t seed) {
    SweepSetup s;
    s.config = options.config;
    s.config.causal = false;
    s.config.max_seq = std::max(s.config.max_seq, options.seq_len);
    s.config.validate();
    s.layer = options.layer == 0 ? (s.config.num_layers + 1) / 2 : options.layer;
    if (s.layer > s.config.num_layers) throw ContractError(fmt::format("sweep layer {} out of range", s.layer));
    if (options.sequences == 0 || options.seq_len == 0) throw ContractError("sweep needs tokens");
    s.model = init_random(s.config, seed);
    Rng rng(derive_seed(seed, 0x70c, 0));
    CaptureFlags capture{true, false, false, false, false};
    for (std::size_t k = 0; k < options.sequences; ++k) {
        const auto tokens = random_tokens(rng, options.seq_len, s.config.vocab);
        ForwardTrace t = model_forward(tokens, s.model, PlanApplication::none(s.config.num_layers), capture);
        s.normed.push_back(apply_norm(t.x[s.layer - 1], s.model.blocks[s.layer - 1].attn_norm, s.config));
        s.inputs.push_back(std::move(t.x[s.layer - 1]));
    }
    return s;
}

BlockWeights scaled_query(const BlockWeights& base, double t) {
    BlockWeights w = base;
    const auto f = static_cast<float>(t);
    for (float& v : w.wq.values()) v *= f;
    return w;
}

}  // namespace

std::vector<SweepPoint> scale_sweep(const ScaleSweepOptions& options, std::uint64_t seed) {
    const SweepSetup s = prepare_sweep(options, seed);
    std::vector<SweepPoint> points;
    for (const double t : options.scales) {
        const BlockWeights w = scaled_query(s.model.blocks[s.layer - 1], t);
        SweepPoint p;
        p.t = t;
        p.m = gate_norm(w.wq, w.wk, ScoreMode::whole_matrix);
        double sum = 0.0;
        for (std::size_t k = 0; k < s.inputs.size(); ++k) {
            const Tensor2D y = add(s.inputs[k], attention_forward(s.normed[k], w, s.config));
            sum += pair_importance(s.inputs[k], y, options.centered);
        }
        p.imp = sum / static_cast<double>(s.inputs.size());
        points.push_back(p);
    }
    return points;
}

std::vector<SweepPoint> suppression_limit_sweep(const ScaleSweepOptions& options, std::uint64_t seed) {
    const SweepSetup s = prepare_sweep(options, seed);
    const BlockWeights& base = s.model.blocks[s.layer - 1];
    std::vector<Vector> shifts;
    for (const auto& z : s.normed) shifts.push_back(column_mean(matmul(matmul(z, base.wv), base.wo)));

    std::vector<SweepPoint> points;
    for (const double t : options.scales) {
        const BlockWeights w = scaled_query(base, t);
        SweepPoint p;
        p.t = t;
        p.m = gate_norm(w.wq, w.wk, ScoreMode::whole_matrix);
        for (std::size_t k = 0; k < s.normed.size(); ++k) {
            const Tensor2D a = attention_forward(s.normed[k], w, s.config);
            for (std::size_t i = 0; i < a.rows(); ++i) {
                double sq = 0.0;
                for (std::size_t c = 0; c < a.cols(); ++c) {
                    const double d = static_cast<double>(a(i, c)) - shifts[k][c];
                    sq += d * d;
                }
                p.imp = std::max(p.imp, std::sqrt(sq));
            }
        }
        points.push_back(p);
    }
    return points;
}

BoundCheckResult run_cosine_suite(const SuiteOptions& options) {
    Rng rng(derive_seed(options.seed, 0xc05, 0));
    BoundCheckResult total = start("law_of_cosines", 1e-5);
    for (std::size_t k = 0; k < options.cosine_trials; ++k) {
        const std::size_t d = 2 + rng.below(63);
        Vector x(d), u(d);
        for (float& v : x) v = static_cast<float>(rng.normal());
        const double scale = k % 16 == 0 ? 0.0 : std::pow(10.0, -3.0 + 4.0 * rng.uniform());
        for (float& v : u) v = static_cast<float>(rng.normal() * scale);
        total.merge(law_of_cosines_check(x, u));
    }
    total.finish();
    return total;
}

BoundCheckResult run_logit_suite(const SuiteOptions& options) {
    Rng rng(derive_seed(options.seed, 0x106, 0));
    BoundCheckResult total = start("logit_bound", 0.0);
    for (std::size_t k = 0; k < options.logit_trials; ++k) {
        static constexpr std::size_t kDims[] = {4, 8, 16, 32};
        const std::size_t d = kDims[rng.below(4)];
        const std::size_t s = 1 + rng.below(8);
        const std::size_t heads = std::size_t{1} << rng.below(3);
        const double zscale = std::pow(10.0, -2.0 + 3.0 * rng.uniform());
        Tensor2D z = random_tensor(rng, s, d, zscale);
        Tensor2D m;
        if (k % 10 == 0) {
            // Rank one with every token aligned to it: the bound is attained.
            Tensor2D a = random_tensor(rng, d, 1, 1.0);
            m = matmul_transposed(a, a);
            for (std::size_t i = 0; i < s; ++i) {
                const auto f = static_cast<float>(rng.normal());
                for (std::size_t c = 0; c < d; ++c) z(i, c) = f * a(c, 0);
            }
        } else {
            const double wscale = std::pow(10.0, -3.0 + 3.0 * rng.uniform()) / std::sqrt(static_cast<double>(d));
            m = matmul_transposed(random_tensor(rng, d, d, wscale), random_tensor(rng, d, d, wscale));
        }
        total.merge(logit_bound_check(z, m, d / heads));
    }
    total.finish();
    return total;
}

BoundCheckResult run_uniformity_suite(const SuiteOptions& options) {
    Rng rng(derive_seed(options.seed, 0x50f, 0));
    std::vector<Vector> rows;
    std::vector<std::size_t> supports;
    for (const double eps : options.epsilons) {
        for (std::size_t k = 0; k < options.softmax_rows; ++k) {
            const std::size_t s = 1 + rng.below(64);
            Vector row(s + rng.below(8));
            for (float& v : row) v = static_cast<float>(eps * (2.0 * rng.uniform() - 1.0));
            row[rng.below(s)] = static_cast<float>(rng.below(2) == 0 ? eps : -eps);
            rows.push_back(std::move(row));
            supports.push_back(s);
        }
    }
    BoundCheckResult r = softmax_uniformity_check(rows, supports, options.fault);
    if (!r.passed) {
        r.detail = fmt::format("min slack {:.3g}, max normalization residual {:.3g}", r.min_slack, r.max_residual);
    }
    return r;
}

BoundCheckResult run_decomposition_suite(const SuiteOptions& options) {
    Rng rng(derive_seed(options.seed, 0xdec, 0));
    ModelConfig config;
    config.num_layers = 1;
    config.dim = 16;
    config.heads = 1;
    config.ffn_dim = 16;
    config.vocab = 16;
    config.max_seq = 32;
    config.causal = true;
    BoundCheckResult total = start("update_decomposition", 1e-6);
    std::size_t rows = 0;
    for (std::uint64_t trial = 0; rows < options.decomposition_rows; ++trial) {
        const Model model = init_random(config, derive_seed(options.seed, 0xdec, trial + 1));
        BlockWeights w = model.blocks[0];
        const auto q = static_cast<float>(std::pow(10.0, -3.0 + 4.0 * rng.uniform()));
        for (float& v : w.wq.values()) v *= q;
        const Tensor2D z = random_tensor(rng, config.max_seq, config.dim, 1.0);
        const AttentionDetail d = attention_detail(z, w, config);
        for (std::size_t i = 0; i < z.rows() && rows < options.decomposition_rows; ++i, ++rows) {
            const std::size_t support = i + 1;
            const auto weights = d.probabilities[0].row(i).subspan(0, support);
            Tensor2D values(support, config.dim);
            for (std::size_t j = 0; j < support; ++j) {
                std::copy_n(d.value_out[0].row(j).begin(), config.dim, values.row(j).begin());
            }
            total.merge(update_decomposition(weights, values, d.output.row(i)).check);
        }
    }
    total.finish();
    return total;
}

BoundCheckResult run_importance_bound_suite(const SuiteOptions& options) {
    BoundCheckResult total = start("importance_bound", 1e-5);
    double c_min = std::numeric_limits<double>::infinity(), c_max = 0.0;
    double slope_min = std::numeric_limits<double>::infinity();
    ScaleSweepOptions sweep;
    sweep.scales = options.sweep_scales;
    for (std::size_t k = 0; k < options.sweep_seeds; ++k) {
        const auto points = scale_sweep(sweep, derive_seed(options.seed, 0x5ca1e, k));
        const BoundCheckResult r = importance_bound_fit(points);
        c_min = std::min(c_min, r.constants.at("C"));
        c_max = std::max(c_max, r.constants.at("C"));
        slope_min = std::min(slope_min, r.constants.at("slope"));
        total.merge(r);
    }
    total.constants = {{"C_min", c_min}, {"C_max", c_max}, {"slope_min", slope_min}};
    return total;
}

std::vector<BoundCheckResult> run_bound_suite(const SuiteOptions& options) {
    return {run_logit_suite(options), run_uniformity_suite(options), run_decomposition_suite(options),
            run_cosine_suite(options), run_importance_bound_suite(options)};
}

std::string bound_results_to_json(std::span<const BoundCheckResult> results) {
    nlohmann::ordered_json j;
    j["schema"] = "validate/1";
    bool all = true;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : results) {
        nlohmann::ordered_json e;
        e["name"] = r.name;
        e["trials"] = r.trials;
        e["min_slack"] = r.min_slack;
        e["max_residual"] = r.max_residual;
        e["residual_tolerance"] = r.residual_tolerance;
        nlohmann::ordered_json c = nlohmann::ordered_json::object();
        for (const auto& [k, v] : r.constants) c[k] = v;
        e["constants"] = c;
        e["passed"] = r.passed;
        e["detail"] = r.detail;
        arr.push_back(e);
        all = all && r.passed;
    }
    j["results"] = arr;
    j["passed"] = all;
    return j.dump(2) + "\n";
}

}  // namespace gatenorm
