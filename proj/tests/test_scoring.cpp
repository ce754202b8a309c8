#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "gatenorm/error.hpp"
#include "gatenorm/model.hpp"
#include "gatenorm/scoring.hpp"
#include "test_support.hpp"

namespace gatenorm {
namespace {

using testing::random_tensor;
using testing::rel_diff;

// ||Wq Wk^T||_F from plain loops in double, optionally restricted to head column slices.
double oracle_gate_norm(const Tensor2D& wq, const Tensor2D& wk, std::size_t heads) {
    const std::size_t d = wq.rows();
    const std::size_t width = wq.cols() / heads;
    double total = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (std::size_t c = h * width; c < (h + 1) * width; ++c) s += static_cast<double>(wq(i, c)) * wk(j, c);
                total += s * s;
            }
        }
    }
    return std::sqrt(total);
}

std::vector<GateScore> scores_of(std::initializer_list<double> ms) {
    std::vector<GateScore> out;
    std::size_t l = 1;
    for (const double m : ms) out.push_back({l++, m, ScoreMode::whole_matrix});
    return out;
}

TEST(GateMatrix, Examples) {
    EXPECT_EQ(gate_matrix(Tensor2D::identity(4), Tensor2D::identity(4)), Tensor2D::identity(4));
    Rng rng(1);
    const Tensor2D wk = random_tensor(4, 4, rng);
    const Tensor2D zero = gate_matrix(Tensor2D(4, 4), wk);
    for (const float v : zero.values()) EXPECT_EQ(v, 0.0f);
    const Tensor2D a = random_tensor(3, 3, rng);
    const Tensor2D b = random_tensor(3, 3, rng);
    const Tensor2D m = gate_matrix(a, b);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) s += static_cast<double>(a(i, k)) * b(j, k);
            EXPECT_NEAR(m(i, j), s, 1e-6);
        }
    }
    EXPECT_THROW(gate_matrix(Tensor2D(4, 4), Tensor2D(4, 3)), ContractError);
}

TEST(GateNorm, IdentityGivesSqrtD) {
    for (const std::size_t d : {4u, 64u, 256u}) {
        const Tensor2D i = Tensor2D::identity(d);
        EXPECT_LE(rel_diff(gate_norm(i, i, ScoreMode::whole_matrix), std::sqrt(static_cast<double>(d))), 1e-6);
    }
}

TEST(GateNorm, ScalingWqScalesM) {
    Rng rng(2);
    const Tensor2D wq = random_tensor(16, 16, rng);
    const Tensor2D wk = random_tensor(16, 16, rng);
    const double base = gate_norm(wq, wk, ScoreMode::whole_matrix);
    for (const float t : {2.0f, 0.5f, 1e-3f, 37.0f}) {
        EXPECT_LE(rel_diff(gate_norm(scaled(wq, t), wk, ScoreMode::whole_matrix), t * base), 1e-6) << t;
    }
}

TEST(GateNorm, BothModesMatchDenseOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor2D wq = random_tensor(8, 8, rng);
        const Tensor2D wk = random_tensor(8, 8, rng);
        EXPECT_LE(rel_diff(gate_norm(wq, wk, ScoreMode::whole_matrix), oracle_gate_norm(wq, wk, 1)), 1e-5);
        EXPECT_LE(rel_diff(gate_norm(wq, wk, ScoreMode::per_head, 2), oracle_gate_norm(wq, wk, 2)), 1e-5);
    }
    EXPECT_THROW(gate_norm(Tensor2D(8, 8), Tensor2D(8, 8), ScoreMode::per_head, 3), ContractError);
}

TEST(GateNorm, SubmultiplicativeAndZeroOnlyForZero) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor2D wq = random_tensor(12, 12, rng);
        const Tensor2D wk = random_tensor(12, 12, rng);
        const double m = gate_norm(wq, wk, ScoreMode::whole_matrix);
        EXPECT_GT(m, 0.0);
        EXPECT_LE(m, frobenius_norm(wq) * frobenius_norm(wk) * (1 + 1e-6));
    }
    EXPECT_EQ(gate_norm(Tensor2D(5, 5), Tensor2D::identity(5), ScoreMode::whole_matrix), 0.0);
}

TEST(ExpandKvHeads, ReplicatesBlocks) {
    Rng rng(5);
    const Tensor2D wk = random_tensor(8, 4, rng);  // 2 kv heads of width 2
    const Tensor2D e = expand_kv_heads(wk, 4, 2);
    ASSERT_EQ(e.cols(), 8u);
    for (std::size_t h = 0; h < 4; ++h) {
        const std::size_t src = h / 2;
        for (std::size_t r = 0; r < 8; ++r) {
            for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(e(r, h * 2 + c), wk(r, src * 2 + c));
        }
    }
    EXPECT_EQ(expand_kv_heads(wk, 2, 2), wk);
    EXPECT_THROW(expand_kv_heads(wk, 3, 2), ContractError);
}

CheckpointScores score_bytes(const std::vector<std::byte>& bytes, const ScoreOptions& options = {}) {
    const auto index = parse_header(bytes, bytes.size());
    MemorySource src(bytes);
    return score_checkpoint(index, enumerate_layers(index, NamingScheme::llama()), src, options);
}

ModelConfig toy(std::size_t layers = 8) {
    ModelConfig c;
    c.num_layers = layers;
    c.dim = 64;
    c.heads = 4;
    c.ffn_dim = 256;
    return c;
}

TEST(ScoreCheckpoint, PlantedLayersHaveSmallestScores) {
    const std::vector<SuppressionEntry> sup = {{5, 1e-3f}, {7, 1e-3f}};
    const Model model = init_random(toy(), 9, sup);
    const auto scores = score_bytes(synth_checkpoint_bytes(toy(), 9, sup)).scores;
    ASSERT_EQ(scores.size(), 8u);
    std::vector<std::size_t> order(8);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a].m < scores[b].m; });
    EXPECT_EQ(std::set<std::size_t>({order[0] + 1, order[1] + 1}), std::set<std::size_t>({5, 7}));
    for (std::size_t l = 0; l < 8; ++l) {
        EXPECT_EQ(scores[l].layer, l + 1);
        const double oracle = oracle_gate_norm(model.blocks[l].wq, model.blocks[l].wk, 1);
        EXPECT_LE(rel_diff(scores[l].m, oracle), 1e-5);
    }
}

TEST(ScoreCheckpoint, AllZeroWeightsScoreZero) {
    CheckpointWriter w;
    for (int i = 0; i < 3; ++i) {
        for (const char* role : {"q", "k"}) {
            w.add(fmt::format("model.layers.{}.self_attn.{}_proj.weight", i, role), DType::f16, {4, 4},
                  [] { return std::vector<float>(16, 0.0f); });
        }
    }
    for (const auto& s : score_bytes(w.to_bytes()).scores) EXPECT_EQ(s.m, 0.0);
}

TEST(ScoreCheckpoint, RescoringIsBitwiseIdentical) {
    const auto bytes = synth_checkpoint_bytes(toy(4), 3, {});
    const auto a = score_bytes(bytes);
    const auto b = score_bytes(bytes);
    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(a.scores[l].m, b.scores[l].m);
    EXPECT_EQ(a.fingerprint, b.fingerprint);
    EXPECT_EQ(a.fingerprint, score_model(init_random(toy(4), 3)).fingerprint);
}

TEST(ScoreCheckpoint, MatchesInMemoryModelInBothModes) {
    const Model model = init_random(toy(3), 4);
    const auto bytes = synth_checkpoint_bytes(toy(3), 4, {});
    for (const ScoreMode mode : {ScoreMode::whole_matrix, ScoreMode::per_head}) {
        ScoreOptions options;
        options.mode = mode;
        options.heads = 4;
        const auto from_file = score_bytes(bytes, options).scores;
        const auto in_memory = score_model(model, mode).scores;
        for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(from_file[l].m, in_memory[l].m);
    }
    EXPECT_THROW(score_bytes(bytes, ScoreOptions{ScoreMode::per_head, 0}), ContractError);
}

TEST(ScoreCheckpoint, GroupedQueryKeysAreReplicated) {
    // D = 8, 4 query heads of width 2, 2 key heads; stored (out, in).
    Rng rng(6);
    const Tensor2D wq = random_tensor(8, 8, rng);
    const Tensor2D wk = random_tensor(8, 4, rng);
    CheckpointWriter w;
    w.add("model.layers.0.self_attn.q_proj.weight", DType::f32, {8, 8}, [&] { return transpose(wq).release(); });
    w.add("model.layers.0.self_attn.k_proj.weight", DType::f32, {4, 8}, [&] { return transpose(wk).release(); });
    const auto bytes = w.to_bytes();
    const auto s = score_bytes(bytes, ScoreOptions{ScoreMode::whole_matrix, 4}).scores;

    Tensor2D expanded(8, 8);
    for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t c = 0; c < 8; ++c) expanded(r, c) = wk(r, ((c / 2) / 2) * 2 + c % 2);
    }
    EXPECT_LE(rel_diff(s[0].m, oracle_gate_norm(wq, expanded, 1)), 1e-5);
    EXPECT_THROW(score_bytes(bytes), ContractError);
}

TEST(ScoreFile, RoundTripAndRejection) {
    CheckpointScores s;
    s.scores = scores_of({1.5, 0.25, 1e-300});
    s.fingerprint = "fnv1a64:0123456789abcdef";
    const std::string text = scores_to_text(s);
    const auto back = scores_from_text(text);
    ASSERT_EQ(back.scores.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(back.scores[i].m, s.scores[i].m);
    EXPECT_EQ(back.fingerprint, s.fingerprint);
    EXPECT_EQ(scores_to_text(back), text);
    EXPECT_THROW(scores_from_text("layer,gate_norm\n1,2\n"), FormatError);
    EXPECT_THROW(scores_from_text("# scores/1 mode=whole source_fingerprint=none\nlayer,gate_norm\n2,1\n"), FormatError);
    EXPECT_THROW(scores_from_text("# scores/1 mode=whole source_fingerprint=none\nlayer,gate_norm\n1,abc\n"), FormatError);
}

TEST(PlanOneShot, Examples) {
    EXPECT_EQ(plan_one_shot(scores_of({3, 1, 2}), 2).removed, (std::vector<std::size_t>{2, 3}));
    EXPECT_TRUE(plan_one_shot(scores_of({3, 1, 2}), 0).removed.empty());
    EXPECT_EQ(plan_one_shot(scores_of({1, 1, 5}), 1).removed, (std::vector<std::size_t>{1}));
    EXPECT_THROW(plan_one_shot(scores_of({1, 2}), 3), ContractError);
    const auto p = plan_one_shot(scores_of({3, 1, 2}), 1, "fp");
    EXPECT_EQ(p.unit, PruneUnit::attention_sublayer);
    EXPECT_EQ(p.method, PlanMethod::gate_norm);
    EXPECT_EQ(p.num_layers, 3u);
    EXPECT_EQ(*p.scores, (std::vector<double>{3, 1, 2}));
    EXPECT_EQ(p.source_fingerprint, "fp");
}

TEST(PlanOneShot, MatchesReferenceSortOnFuzzedScores) {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t l = 1 + rng.below(40);
        std::vector<GateScore> scores;
        for (std::size_t i = 1; i <= l; ++i) scores.push_back({i, static_cast<double>(rng.below(10)), ScoreMode::whole_matrix});
        const std::size_t n = rng.below(l + 1);
        // Reference: stable selection by repeated minimum search.
        std::vector<std::size_t> ref;
        std::vector<bool> taken(l, false);
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t best = l;
            for (std::size_t i = 0; i < l; ++i) {
                if (!taken[i] && (best == l || scores[i].m < scores[best].m)) best = i;
            }
            taken[best] = true;
            ref.push_back(best + 1);
        }
        ASSERT_EQ(plan_one_shot(scores, n).removed, ref);
    }
}

TEST(PlanOneShot, InvariantUnderCommonRescaleAndMonotoneMaps) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<GateScore> a, b, c;
        for (std::size_t i = 1; i <= 12; ++i) {
            const double m = rng.uniform() * 10;
            a.push_back({i, m, ScoreMode::whole_matrix});
            b.push_back({i, 3.7 * m, ScoreMode::whole_matrix});
            c.push_back({i, std::exp(m), ScoreMode::whole_matrix});
        }
        const std::size_t n = rng.below(13);
        EXPECT_EQ(plan_one_shot(a, n).removed, plan_one_shot(b, n).removed);
        EXPECT_EQ(plan_one_shot(a, n).removed, plan_one_shot(c, n).removed);
    }
}

TEST(PlanOneShot, PlantedRecoveryAcrossSeeds) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const std::vector<SuppressionEntry> sup = {{2, 1e-2f}, {6, 1e-2f}, {7, 1e-2f}};
        const auto scores = score_model(init_random(toy(), seed, sup)).scores;
        auto removed = plan_one_shot(scores, 3).removed;
        std::sort(removed.begin(), removed.end());
        EXPECT_EQ(removed, (std::vector<std::size_t>{2, 6, 7})) << "seed " << seed;
    }
}

TEST(PlanRandom, ExhaustiveAndDeterministic) {
    auto all = plan_random(40, 40, PruneUnit::attention_sublayer, 3).removed;
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expected(40);
    std::iota(expected.begin(), expected.end(), 1);
    EXPECT_EQ(all, expected);
    EXPECT_EQ(plan_random(30, 7, PruneUnit::full_block, 5), plan_random(30, 7, PruneUnit::full_block, 5));
    const auto p = plan_random(30, 7, PruneUnit::full_block, 5);
    EXPECT_EQ(p.method, PlanMethod::random_block);
    EXPECT_EQ(p.seed, 5u);
    EXPECT_THROW(plan_random(3, 4, PruneUnit::full_block, 1), ContractError);
}

TEST(PlanRandom, SelectionFrequencyIsUniform) {
    std::vector<int> counts(10, 0);
    const int seeds = 10000;
    for (int s = 0; s < seeds; ++s) ++counts[plan_random(10, 1, PruneUnit::attention_sublayer, s).removed[0] - 1];
    const double sigma = std::sqrt(seeds * 0.1 * 0.9);
    for (const int c : counts) EXPECT_LE(std::abs(c - seeds * 0.1), 3 * sigma);
}

TEST(PlanFromImportance, Examples) {
    const std::vector<std::pair<std::size_t, double>> equal = {{1, 0.5}, {2, 0.5}, {3, 0.5}, {4, 0.5}};
    EXPECT_EQ(plan_from_importance(equal, 2, PruneUnit::full_block, PlanMethod::data_driven_block).removed,
              (std::vector<std::size_t>{1, 2}));
    const std::vector<std::pair<std::size_t, double>> inc = {{1, 0.1}, {2, 0.2}, {3, 0.3}, {4, 0.4}};
    const auto p = plan_from_importance(inc, 3, PruneUnit::full_block, PlanMethod::data_driven_block);
    EXPECT_EQ(p.removed, (std::vector<std::size_t>{1, 2, 3}));
    EXPECT_EQ(p.unit, PruneUnit::full_block);
    const std::vector<std::pair<std::size_t, double>> dup = {{1, 0.1}, {1, 0.2}};
    EXPECT_THROW(plan_from_importance(dup, 1, PruneUnit::full_block, PlanMethod::data_driven_block), ContractError);
    EXPECT_THROW(plan_from_importance(inc, 5, PruneUnit::full_block, PlanMethod::data_driven_block), ContractError);
}

TEST(PlanJson, RoundTripAndValidation) {
    PruningPlan p = plan_random(12, 4, PruneUnit::full_block, 77, "fnv1a64:00000000000000ff");
    EXPECT_EQ(plan_from_json(plan_to_json(p)), p);
    PruningPlan q = plan_one_shot(scores_of({0.5, 0.25, 1.0 / 3}), 2);
    EXPECT_EQ(plan_from_json(plan_to_json(q)), q);
    const std::string text = plan_to_json(q);
    EXPECT_EQ(text.find("\"version\""), text.find('"'));
    EXPECT_THROW(plan_from_json("{}"), FormatError);
    EXPECT_THROW(plan_from_json("not json"), FormatError);

    PruningPlan bad = q;
    bad.removed = {2, 2};
    EXPECT_THROW(validate_plan(bad), ContractError);
    bad.removed = {4};
    EXPECT_THROW(validate_plan(bad), ContractError);
}

TEST(Names, ParseRoundTrip) {
    for (const auto m : {PlanMethod::gate_norm, PlanMethod::data_driven_attn, PlanMethod::data_driven_block,
                         PlanMethod::random_attn, PlanMethod::random_block}) {
        EXPECT_EQ(parse_method(method_name(m)), m);
    }
    EXPECT_EQ(parse_method("data-attn"), PlanMethod::data_driven_attn);
    EXPECT_EQ(parse_method("data-block"), PlanMethod::data_driven_block);
    EXPECT_THROW(parse_method("magic"), UsageError);
    EXPECT_EQ(parse_score_mode("per-head"), ScoreMode::per_head);
    EXPECT_EQ(parse_score_mode("whole"), ScoreMode::whole_matrix);
    EXPECT_EQ(parse_unit(unit_name(PruneUnit::full_block)), PruneUnit::full_block);
}

}  // namespace
}  // namespace gatenorm
