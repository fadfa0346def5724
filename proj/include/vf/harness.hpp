#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vf/forecaster.hpp"
#include "vf/predictors.hpp"
#include "vf/synth.hpp"
#include "vf/vae.hpp"

namespace vf {

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct DataConfig {
    std::string source = "synth";  // "synth" or "files"
    SynthConfig synth;
    std::uint64_t synth_seed = 0;
    // source == "files": grid [T,H,W,n_c] and traffic [T,n_s,n_f] as .f32 with sidecars, plus a graph.
    std::string grid_path, traffic_path, edges_path, coords_path;
    int proximity_k = 3;           // graph from sensor coordinates when no edge list is given
    bool full_range_stats = false; // statistics over the whole timeline instead of the non-test head
};

struct InterpretConfig {
    double threshold = 0.997;
    std::string grouping = "weekday/weekend";
    std::vector<double> alphas{-3.0, 3.0};  // multiples of sqrt(explained variance)
    int decode_components = 2;
};

struct ExperimentConfig {
    std::string out = "runs/default";
    std::uint64_t seed = 0;
    int p = 6, q = 6, d = 8;
    SplitRatios split;
    DataConfig data;
    VaeConfig vae = [] { VaeConfig v; v.beta = 1e-3; return v; }();
    ForecasterConfig forecaster;
    PredictorConfig predictor;  // shared hyperparameters; model/variant/seed are set per run
    std::vector<std::string> models{"GRU", "DCRNN"};
    std::map<std::string, std::vector<std::string>> variants{
        {"GRU", {"NONE", "TE", "VE", "TVE"}}, {"DCRNN", {"NONE", "STE", "SVE", "STVE"}}};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<int> horizons{1, 2, 3, 6};
    InterpretConfig interpret;
    int eval_workers = 0;  // 0: hardware concurrency

    // Throws ConfigError.
    void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Reads a JSON config (missing fields keep defaults); VF_OUT overrides `out`.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& path);

inline const std::vector<std::string> kStages{"synth",           "preprocess",      "train-vae", "embed",
                                              "train-forecaster", "train-predictor", "evaluate",  "interpret"};

struct StageResult {
    std::string stage;
    bool skipped = false;  // manifest matched; nothing recomputed
    std::filesystem::path dir;
};

std::uint64_t stage_seed(const ExperimentConfig& cfg, const std::string& stage);

// Runs one stage. Throws MissingDependencyError if an upstream stage has no manifest.
StageResult run_stage(const std::string& stage, const ExperimentConfig& cfg);
std::vector<StageResult> run_pipeline(const ExperimentConfig& cfg);

// Every training-stage manifest reads only indices below the test start.
struct LeakageAudit {
    bool clean = true;
    std::size_t test_start = 0;
    std::vector<std::string> findings;  // one line per checked stage
};
LeakageAudit audit_leakage(const std::filesystem::path& out);

struct ResultRow {
    std::string model, variant;
    int horizon = 0;
    double mae = 0.0;
};
std::vector<ResultRow> read_results(const std::filesystem::path& csv);

struct ReportRow {
    std::string model, variant;
    std::map<int, double> mae;
    std::map<int, bool> best;
};
// Pivot per model; per horizon the smallest MAE within the model is flagged, ties to the
// lexicographically smallest variant name. Throws if rows disagree on their horizon set.
std::vector<ReportRow> pivot_report(const std::vector<ResultRow>& rows);
std::string render_report(const std::vector<ReportRow>& table);
// Reads one or more results CSVs, writes `<out>/report/table.csv` and `table.txt`.
std::vector<ReportRow> report(const std::vector<std::filesystem::path>& csvs, const std::filesystem::path& out);

}  // namespace vf
