#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cli.hpp"
#include "gatenorm/importance.hpp"
#include "gatenorm/scoring.hpp"

namespace gatenorm {
namespace {

namespace fs = std::filesystem;

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("gatenorm_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    int run(std::vector<std::string> args) {
        args.insert(args.begin(), "gatenorm");
        std::ostringstream o, e;
        const int code = cli::run(args, o, e);
        out_ = o.str();
        err_ = e.str();
        return code;
    }

    static std::string slurp(const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    }
    static void spit(const std::string& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

    fs::path dir_;
    std::string out_, err_;
};

std::vector<std::vector<std::string>> csv_rows(const std::string& text, std::size_t skip) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    for (std::size_t i = 0; i < skip; ++i) std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

TEST_F(Cli, ExitCodes) {
    EXPECT_EQ(run({}), cli::kUsage);
    EXPECT_EQ(run({"nonsense"}), cli::kUsage);
    EXPECT_EQ(run({"score", "--help"}), cli::kSuccess);
    EXPECT_EQ(run({"score", "--out", path("s.txt")}), cli::kUsage);
    EXPECT_EQ(run({"score", "--checkpoint", path("missing.ckpt"), "--out", path("s.txt")}), cli::kInputFormat);
    spit(path("garbage.ckpt"), "this is not a checkpoint");
    EXPECT_EQ(run({"score", "--checkpoint", path("garbage.ckpt"), "--out", path("s.txt")}), cli::kInputFormat);
    EXPECT_FALSE(err_.empty());
    EXPECT_EQ(run({"score", "--checkpoint", path("garbage.ckpt"), "--mode", "diagonal", "--out", path("s.txt")}),
              cli::kUsage);
    EXPECT_EQ(run({"synth", "--dtype", "f64", "--out", path("x.ckpt")}), cli::kUsage);
    EXPECT_EQ(run({"plan", "-N", "9", "--out", path("p.json")}), cli::kContract);
}

TEST_F(Cli, ScoreSyntheticCheckpoint) {
    ASSERT_EQ(run({"synth", "--seed", "3", "--suppress", "2:1e-3", "--dtype", "f16", "--out", path("m.ckpt")}), 0)
        << err_;
    ASSERT_EQ(run({"score", "--checkpoint", path("m.ckpt"), "--out", path("a.txt")}), 0) << err_;
    const CheckpointScores s = scores_from_text(slurp(path("a.txt")));
    ASSERT_EQ(s.scores.size(), 8u);
    for (std::size_t l = 0; l < 8; ++l) EXPECT_EQ(s.scores[l].layer, l + 1);
    const auto lowest = std::min_element(s.scores.begin(), s.scores.end(),
                                         [](const GateScore& a, const GateScore& b) { return a.m < b.m; });
    EXPECT_EQ(lowest->layer, 2u);

    ASSERT_EQ(run({"score", "--checkpoint", path("m.ckpt"), "--out", path("b.txt")}), 0);
    EXPECT_EQ(slurp(path("a.txt")), slurp(path("b.txt")));
    const auto manifest = nlohmann::json::parse(slurp(path("a.txt.manifest.json")));
    EXPECT_EQ(manifest["schema"], "manifest/1");
    EXPECT_EQ(manifest["command"], "score");
    EXPECT_TRUE(manifest["inputs"].contains(path("m.ckpt")));
    EXPECT_EQ(manifest["parameters"]["--mode"], "whole");
    EXPECT_TRUE(manifest.contains("tool_version"));
    EXPECT_TRUE(manifest.contains("timestamp"));

    ASSERT_EQ(run({"score", "--checkpoint", path("m.ckpt"), "--mode", "per-head", "--out", path("h.txt")}), 0)
        << err_;
    EXPECT_EQ(scores_from_text(slurp(path("h.txt"))).scores.front().mode, ScoreMode::per_head);
}

TEST_F(Cli, PlanFromScoreFile) {
    CheckpointScores s;
    s.fingerprint = "fnv1a64:0000000000000001";
    for (const double m : {3.0, 1.0, 2.0}) s.scores.push_back({s.scores.size() + 1, m, ScoreMode::whole_matrix});
    spit(path("s.txt"), scores_to_text(s));
    ASSERT_EQ(run({"plan", "--scores", path("s.txt"), "-N", "2", "--out", path("p.json")}), 0) << err_;
    const PruningPlan p = plan_from_json(slurp(path("p.json")));
    EXPECT_EQ(p.removed, (std::vector<std::size_t>{2, 3}));
    EXPECT_EQ(p.num_layers, 3u);
    EXPECT_EQ(p.source_fingerprint, s.fingerprint);
    EXPECT_TRUE(fs::exists(path("p.json.manifest.json")));

    EXPECT_EQ(run({"plan", "--scores", path("s.txt"), "-N", "4", "--out", path("q.json")}), cli::kContract);
    spit(path("bad.txt"), "layer,gate_norm\n1,2\n");
    EXPECT_EQ(run({"plan", "--scores", path("bad.txt"), "-N", "1", "--out", path("q.json")}), cli::kInputFormat);
}

TEST_F(Cli, RandomPlansAreReproducible) {
    const std::vector<std::string> base = {"plan", "--method", "random-attn", "-N", "3", "--plan-seed", "17"};
    auto a = base, b = base, c = base;
    a.insert(a.end(), {"--out", path("a.json")});
    b.insert(b.end(), {"--out", path("b.json")});
    c[6] = "18";
    c.insert(c.end(), {"--out", path("c.json")});
    ASSERT_EQ(run(a), 0) << err_;
    ASSERT_EQ(run(b), 0);
    ASSERT_EQ(run(c), 0);
    EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
    const PruningPlan p = plan_from_json(slurp(path("a.json")));
    EXPECT_EQ(p.removed, plan_random(8, 3, PruneUnit::attention_sublayer, 17).removed);
    EXPECT_EQ(p.seed, std::optional<std::uint64_t>(17));
    EXPECT_NE(plan_from_json(slurp(path("c.json"))).removed, p.removed);
}

TEST_F(Cli, SimulateReportsAndPlannedRunRanksPlantedLayers) {
    const std::vector<std::string> model = {"--seed", "2", "--suppress", "5:1e-3,7:1e-3", "--tokens", "1024"};
    auto sim = model;
    sim.insert(sim.begin(), "simulate");
    sim.insert(sim.end(), {"--out", path("r.csv")});
    ASSERT_EQ(run(sim), 0) << err_;
    const ImportanceReport r = ImportanceReport::from_csv(slurp(path("r.csv")));
    ASSERT_EQ(r.layers.size(), 8u);
    std::vector<std::size_t> by_m(8), by_imp(8);
    for (std::size_t l = 0; l < 8; ++l) by_m[l] = by_imp[l] = l;
    std::sort(by_m.begin(), by_m.end(), [&](auto a, auto b) { return r.layers[a].gate_norm < r.layers[b].gate_norm; });
    std::sort(by_imp.begin(), by_imp.end(),
              [&](auto a, auto b) { return r.layers[a].imp_attn < r.layers[b].imp_attn; });
    const std::set<std::size_t> planted = {4, 6};
    EXPECT_EQ(std::set<std::size_t>(by_m.begin(), by_m.begin() + 2), planted);
    EXPECT_EQ(std::set<std::size_t>(by_imp.begin(), by_imp.begin() + 2), planted);

    const auto summary = nlohmann::json::parse(slurp(path("r.csv.summary.json")));
    EXPECT_EQ(summary["schema"], "simulate/1");
    const double base = summary["perplexity"].get<double>();
    EXPECT_GE(base, 1.0);

    auto plan = model;
    plan.insert(plan.begin(), "plan");
    plan.insert(plan.end(), {"-N", "0", "--out", path("p0.json")});
    ASSERT_EQ(run(plan), 0) << err_;
    auto sim0 = sim;
    sim0.back() = path("r0.csv");
    sim0.insert(sim0.end(), {"--plan", path("p0.json")});
    ASSERT_EQ(run(sim0), 0) << err_;
    EXPECT_EQ(nlohmann::json::parse(slurp(path("r0.csv.summary.json")))["perplexity"].get<double>(), base);

    auto stale = sim0;
    stale[2] = "3";
    stale[stale.size() - 3] = path("r1.csv");
    EXPECT_EQ(run(stale), cli::kContract);
}

TEST_F(Cli, ValidateInjectedFaultFailsUniformity) {
    ASSERT_EQ(run({"validate", "--trials", "200", "--rows", "50", "--sweep-seeds", "1", "--inject-fault",
                   "negated-stabilizer", "--out", path("v.json")}),
              cli::kContract);
    const auto j = nlohmann::json::parse(slurp(path("v.json")));
    EXPECT_EQ(j["schema"], "validate/1");
    EXPECT_FALSE(j["passed"].get<bool>());
    bool uniformity_failed = false;
    for (const auto& r : j["results"]) {
        for (const char* key : {"name", "trials", "min_slack", "max_residual", "passed", "detail"}) {
            EXPECT_TRUE(r.contains(key)) << key;
        }
        if (r["name"].get<std::string>().find("uniform") != std::string::npos) {
            uniformity_failed = !r["passed"].get<bool>();
        }
    }
    EXPECT_TRUE(uniformity_failed);
}

TEST_F(Cli, BenchIsRepeatableOutsideTimings) {
    const std::vector<std::string> args = {"bench", "--layers", "2", "--dim", "128", "--repeats", "1", "--scratch",
                                           dir_.string()};
    auto a = args, b = args;
    a.insert(a.end(), {"--out", path("a.json")});
    b.insert(b.end(), {"--out", path("b.json")});
    ASSERT_EQ(run(a), 0) << err_;
    ASSERT_EQ(run(b), 0) << err_;
    auto ja = nlohmann::json::parse(slurp(path("a.json")));
    auto jb = nlohmann::json::parse(slurp(path("b.json")));
    EXPECT_EQ(ja["schema"], "bench/1");
    for (auto* j : {&ja, &jb}) {
        for (auto it = j->begin(); it != j->end();) {
            const std::string k = it.key();
            if (k.find("_s") != std::string::npos || k.find("time") != std::string::npos) {
                it = j->erase(it);
            } else {
                ++it;
            }
        }
    }
    EXPECT_EQ(ja, jb);
}

TEST_F(Cli, ReportIdentityMismatchAndScatterJoin) {
    ASSERT_EQ(run({"synth", "--seed", "4", "--out", path("m.ckpt")}), 0) << err_;
    ASSERT_EQ(run({"score", "--checkpoint", path("m.ckpt"), "--out", path("scores.txt")}), 0) << err_;
    ASSERT_EQ(run({"report", "--inputs", path("scores.txt"), "--out", path("one.txt")}), 0) << err_;
    EXPECT_EQ(slurp(path("one.txt")), slurp(path("scores.txt")));

    ASSERT_EQ(run({"sweep", "--seed", "4", "--tokens", "256", "--methods", "gate-norm", "-N", "0", "1", "--out",
                   path("sw.csv")}),
              0)
        << err_;
    ASSERT_EQ(run({"report", "--inputs", path("sw.csv"), "--out", path("sw2.csv")}), 0);
    EXPECT_EQ(slurp(path("sw2.csv")), slurp(path("sw.csv")));

    ASSERT_EQ(run({"simulate", "--checkpoint", path("m.ckpt"), "--tokens", "256", "--out", path("imp.csv")}), 0)
        << err_;
    ASSERT_EQ(run({"report", "--inputs", path("scores.txt"), path("imp.csv"), "--out", path("scatter.csv")}), 0)
        << err_;
    const std::string text = slurp(path("scatter.csv"));
    ASSERT_EQ(text.rfind("# report/1 scatter\n", 0), 0u);
    const auto rows = csv_rows(text, 2);
    const CheckpointScores s = scores_from_text(slurp(path("scores.txt")));
    const ImportanceReport r = ImportanceReport::from_csv(slurp(path("imp.csv")));
    ASSERT_EQ(rows.size(), 8u);
    for (std::size_t l = 0; l < 8; ++l) {
        ASSERT_EQ(rows[l].size(), 6u);
        EXPECT_EQ(std::stoul(rows[l][0]), l + 1);
        EXPECT_EQ(std::stod(rows[l][1]), s.scores[l].m);
        EXPECT_EQ(std::stod(rows[l][2]), r.layers[l].imp_attn);
        EXPECT_EQ(std::stod(rows[l][3]), r.layers[l].imp_block);
        EXPECT_EQ(std::stod(rows[l][5]), r.layers[l].norm_ratio);
    }

    ASSERT_EQ(run({"plan", "--method", "random-attn", "-N", "1", "--out", path("p8.json")}), 0);
    PruningPlan p4 = plan_from_json(slurp(path("p8.json")));
    p4.num_layers = 4;
    p4.removed = {1};
    spit(path("p4.json"), plan_to_json(p4));
    EXPECT_EQ(run({"report", "--inputs", path("scores.txt"), path("p4.json"), "--out", path("x.txt")}), cli::kContract);
    spit(path("junk.txt"), "hello\n");
    EXPECT_EQ(run({"report", "--inputs", path("junk.txt"), "--out", path("x.txt")}), cli::kInputFormat);
}

TEST_F(Cli, SweepIsIdempotent) {
    const std::vector<std::string> args = {"sweep", "--tokens", "256", "--methods", "gate-norm", "random-attn",
                                           "-N", "0", "2"};
    auto a = args, b = args;
    a.insert(a.end(), {"--out", path("a.csv")});
    b.insert(b.end(), {"--out", path("b.csv")});
    ASSERT_EQ(run(a), 0) << err_;
    ASSERT_EQ(run(b), 0);
    EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
    EXPECT_EQ(csv_rows(slurp(path("a.csv")), 2).size(), 4u);
    const auto m = nlohmann::json::parse(slurp(path("a.csv.manifest.json")));
    EXPECT_EQ(m["command"], "sweep");
    EXPECT_EQ(m["parameters"]["--methods"], "gate-norm,random-attn");
}

}  // namespace
}  // namespace gatenorm
