#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>

#include "small_config.hpp"
#include "vf/core/errors.hpp"
#include "vf/core/hash.hpp"
#include "vf/harness.hpp"

namespace fs = std::filesystem;
using namespace vf;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path d = fs::temp_directory_path() / ("vf_harness_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// One shared pipeline run for the end-to-end tests.
const fs::path& pipeline_out() {
    static const fs::path out = [] {
        const fs::path d = fresh_dir("e2e");
        run_pipeline(fixtures::small_config(d));
        return d;
    }();
    return out;
}

}  // namespace

TEST(HarnessConfig, JsonRoundTripKeepsDefaultsAndFields) {
    ExperimentConfig c = fixtures::small_config("somewhere");
    c.vae.beta = 0.25;
    c.predictor.diffusion_steps = 3;
    const nlohmann::json j = c;
    ExperimentConfig back;
    from_json(j, back);
    EXPECT_EQ(nlohmann::json(back), j);

    // Partial sections keep the remaining defaults.
    ExperimentConfig partial;
    from_json(nlohmann::json::parse(R"({"vae": {"epochs": 7}, "p": 4})"), partial);
    EXPECT_EQ(partial.vae.epochs, 7);
    EXPECT_DOUBLE_EQ(partial.vae.beta, ExperimentConfig{}.vae.beta);
    EXPECT_EQ(partial.p, 4);
    EXPECT_EQ(partial.q, 6);
}

TEST(HarnessConfig, FileLoadingAndEnvironmentOverride) {
    const fs::path dir = fresh_dir("cfg");
    fs::create_directories(dir);
    const fs::path file = dir / "c.json";
    std::ofstream(file) << R"({"out": "from_file", "seed": 9, "horizons": [1, 3]})";
    ::unsetenv("VF_OUT");
    ExperimentConfig c = load_config(file);
    EXPECT_EQ(c.out, "from_file");
    EXPECT_EQ(c.seed, 9u);
    ::setenv("VF_OUT", "from_env", 1);
    c = load_config(file);
    EXPECT_EQ(c.out, "from_env");
    ::unsetenv("VF_OUT");
    EXPECT_EQ(load_config(std::nullopt).out, ExperimentConfig{}.out);

    std::ofstream(file) << R"({"horizons": [7]})";
    EXPECT_THROW(load_config(file), ConfigError);
    std::ofstream(file) << R"({"split": {"train": 0.5, "val": 0.5, "test": 0.5}})";
    EXPECT_THROW(load_config(file), ConfigError);
    std::ofstream(file) << R"({"variants": {"GRU": ["STVE"], "DCRNN": ["NONE"]}})";
    EXPECT_THROW(load_config(file), ConfigError);
    std::ofstream(file) << "{not json";
    EXPECT_THROW(load_config(file), ConfigError);
    fs::remove_all(dir);
}

TEST(HarnessConfig, StageSeedsAreStableAndDistinct) {
    ExperimentConfig c;
    std::set<std::uint64_t> seen;
    for (const auto& s : kStages) {
        EXPECT_EQ(stage_seed(c, s), stage_seed(c, s));
        seen.insert(stage_seed(c, s));
    }
    EXPECT_EQ(seen.size(), kStages.size());
    ExperimentConfig other;
    other.seed = 1;
    EXPECT_NE(stage_seed(c, "train-vae"), stage_seed(other, "train-vae"));
}

TEST(HarnessStages, MissingDependencyNamesTheAbsentStage) {
    const auto c = fixtures::small_config(fresh_dir("missing"));
    try {
        run_stage("evaluate", c);
        FAIL() << "expected a dependency error";
    } catch (const MissingDependencyError& e) {
        EXPECT_NE(std::string(e.what()).find("preprocess"), std::string::npos) << e.what();
    }
    run_stage("synth", c);
    run_stage("preprocess", c);
    try {
        run_stage("embed", c);
        FAIL() << "expected a dependency error";
    } catch (const MissingDependencyError& e) {
        EXPECT_NE(std::string(e.what()).find("train-vae"), std::string::npos) << e.what();
    }
    EXPECT_THROW(run_stage("bogus", c), ConfigError);
    fs::remove_all(c.out);
}

TEST(HarnessStages, EndToEndFillsEveryResultCell) {
    const fs::path& out = pipeline_out();
    const auto c = fixtures::small_config(out);
    const auto rows = read_results(out / "evaluate" / "results.csv");
    std::set<std::tuple<std::string, std::string, int>> cells;
    for (const auto& r : rows) {
        EXPECT_TRUE(std::isfinite(r.mae) && r.mae >= 0.0);
        cells.emplace(r.model, r.variant, r.horizon);
    }
    std::size_t expected = 0;
    for (const auto& m : c.models)
        for (const auto& v : c.variants.at(m))
            for (int h : c.horizons) {
                ++expected;
                EXPECT_TRUE(cells.contains(std::make_tuple(m, v, h))) << m << "/" << v << " h" << h;
            }
    EXPECT_EQ(rows.size(), expected);
    for (const auto& s : kStages) EXPECT_TRUE(fs::exists(out / s / "manifest.json")) << s;
    EXPECT_TRUE(fs::exists(out / "interpret" / "pca.json"));
    EXPECT_TRUE(fs::exists(out / "interpret" / "decodes" / "pc1_decode_alpha+3.png"));
}

TEST(HarnessStages, RerunWithSameConfigIsNoOp) {
    const fs::path& out = pipeline_out();
    const auto c = fixtures::small_config(out);
    const std::string before = slurp(out / "evaluate" / "results.csv");
    const auto mtime = fs::last_write_time(out / "train-vae" / "manifest.json");
    for (const auto& r : run_pipeline(c)) EXPECT_TRUE(r.skipped) << r.stage;
    EXPECT_EQ(fs::last_write_time(out / "train-vae" / "manifest.json"), mtime);
    EXPECT_EQ(slurp(out / "evaluate" / "results.csv"), before);
}

TEST(HarnessStages, ChangedConfigInvalidatesDownstreamOnly) {
    const fs::path dir = fresh_dir("invalidate");
    fs::copy(pipeline_out(), dir, fs::copy_options::recursive);
    auto c = fixtures::small_config(dir);
    c.horizons = {1, 3};
    const auto results = run_pipeline(c);
    for (const auto& r : results) EXPECT_EQ(r.skipped, r.stage != "evaluate") << r.stage;
    EXPECT_EQ(read_results(dir / "evaluate" / "results.csv").size(), 2u * 4u);
    fs::remove_all(dir);
}

TEST(HarnessStages, LeakageAuditIsCleanAndDetectsFullRangeStatistics) {
    const LeakageAudit a = audit_leakage(pipeline_out());
    EXPECT_TRUE(a.clean);
    EXPECT_EQ(a.findings.size(), 4u);
    EXPECT_GT(a.test_start, 0u);

    auto c = fixtures::small_config(fresh_dir("leak"));
    c.data.full_range_stats = true;
    run_stage("synth", c);
    run_stage("preprocess", c);
    const LeakageAudit b = audit_leakage(c.out);
    EXPECT_FALSE(b.clean);
    fs::remove_all(c.out);
}

TEST(HarnessReport, SingleRowAndTieRule) {
    auto t = pivot_report({{"GRU", "TVE", 1, 2.0}, {"GRU", "TVE", 3, 1.0}});
    ASSERT_EQ(t.size(), 1u);
    EXPECT_TRUE(t[0].best.at(1) && t[0].best.at(3));

    t = pivot_report({{"GRU", "VE", 1, 1.0}, {"GRU", "TE", 1, 1.0}, {"GRU", "NONE", 1, 2.0}});
    for (const auto& r : t) EXPECT_EQ(r.best.at(1), r.variant == "TE") << r.variant;

    EXPECT_THROW(pivot_report({{"GRU", "VE", 1, 1.0}, {"GRU", "TE", 2, 1.0}}), std::invalid_argument);
    EXPECT_THROW(pivot_report({}), std::invalid_argument);
}

TEST(HarnessReport, BestFlagsMatchBruteForceMinimum) {
    std::mt19937_64 rng(3);
    const std::vector<std::string> models{"GRU", "DCRNN"}, variants{"NONE", "TE", "VE", "TVE", "STVE"};
    const std::vector<int> hs{1, 2, 3, 6};
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ResultRow> rows;
        std::uniform_int_distribution<int> coarse(0, 4);  // coarse values force ties
        for (const auto& m : models)
            for (const auto& v : variants)
                for (int h : hs) rows.push_back({m, v, h, 1.0 + 0.5 * coarse(rng)});
        std::shuffle(rows.begin(), rows.end(), rng);
        const auto table = pivot_report(rows);
        ASSERT_EQ(table.size(), models.size() * variants.size());
        for (const auto& m : models)
            for (int h : hs) {
                double best = 1e300;
                std::string who;
                for (const auto& r : rows)
                    if (r.model == m && r.horizon == h && (r.mae < best || (r.mae == best && r.variant < who))) {
                        best = r.mae;
                        who = r.variant;
                    }
                for (const auto& row : table)
                    if (row.model == m) EXPECT_EQ(row.best.at(h), row.variant == who) << m << " h" << h;
            }
    }
}

TEST(HarnessReport, WritesCsvTextAndPlots) {
    const fs::path& out = pipeline_out();
    const fs::path dir = fresh_dir("report");
    const auto table = report({out / "evaluate" / "results.csv"}, dir);
    EXPECT_EQ(table.size(), 4u);
    const std::string csv = slurp(dir / "report" / "table.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "model,variant,mae_h1,best_h1,mae_h2,best_h2,mae_h3,best_h3");
    EXPECT_TRUE(fs::exists(dir / "report" / "table.txt"));
    EXPECT_TRUE(fs::exists(dir / "report" / "GRU_mae.png"));
    EXPECT_TRUE(fs::exists(dir / "report" / "DCRNN_mae.png"));
    EXPECT_THROW(report({dir / "nope.csv"}, dir), MissingDependencyError);
    fs::remove_all(dir);
}
