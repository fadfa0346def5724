#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "vf/core/array_io.hpp"
#include "vf/core/errors.hpp"
#include "vf/harness.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "master seed");
    sub->add_option("--out", c.out, "output root (overrides config and VF_OUT)");
}

vf::ExperimentConfig resolve(const Common& c) {
    vf::ExperimentConfig cfg = vf::load_config(c.config.empty() ? std::nullopt : std::optional<fs::path>(c.config));
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    cfg.validate();
    return cfg;
}

void print(const vf::StageResult& r) {
    fmt::print("{:<17} {}  {}\n", r.stage, r.skipped ? "up to date" : "done", r.dir.string());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vf: traffic prediction with urban-vibrancy embeddings"};
    app.require_subcommand(1);
    Common common;
    std::string model, variant;
    std::vector<std::string> results;

    for (const auto& stage : vf::kStages) {
        auto* sub = app.add_subcommand(stage, "run the " + stage + " stage");
        add_common(sub, common);
        if (stage == "train-predictor") {
            sub->add_option("--model", model, "restrict to one model (GRU or DCRNN)");
            sub->add_option("--variant", variant, "restrict to one variant (needs --model)")->needs("--model");
        }
    }
    auto* all = app.add_subcommand("all", "run every stage in order, then report");
    add_common(all, common);
    auto* rep = app.add_subcommand("report", "pivot results CSVs into a table and plots");
    add_common(rep, common);
    rep->add_option("--results", results, "results CSVs (default: <out>/evaluate/results.csv)");
    auto* audit = app.add_subcommand("audit", "check manifests for test-range reads");
    add_common(audit, common);
    auto* dump = app.add_subcommand("config", "print the resolved configuration");
    add_common(dump, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;  // usage errors share the config-error code
    }
    try {
        vf::ExperimentConfig cfg = resolve(common);
        auto* sub = app.get_subcommands().front();
        const std::string verb = sub->get_name();
        if (verb == "config") {
            std::cout << nlohmann::json(cfg).dump(2) << "\n";
        } else if (verb == "audit") {
            const auto a = vf::audit_leakage(cfg.out);
            for (const auto& f : a.findings) fmt::print("{}\n", f);
            fmt::print("{}\n", a.clean ? "clean" : "LEAKAGE");
            return a.clean ? 0 : 1;
        } else if (verb == "report" || verb == "all") {
            if (verb == "all")
                for (const auto& r : vf::run_pipeline(cfg)) print(r);
            std::vector<fs::path> csvs(results.begin(), results.end());
            if (csvs.empty()) csvs.push_back(fs::path(cfg.out) / "evaluate" / "results.csv");
            vf::report(csvs, cfg.out);
            std::cout << vf::read_text(fs::path(cfg.out) / "report" / "table.txt");
        } else {
            if (verb == "train-predictor" && !model.empty()) {
                const auto it = cfg.variants.find(model);
                cfg.variants = {{model, variant.empty() && it != cfg.variants.end() ? it->second : std::vector<std::string>{variant}}};
                cfg.models = {model};
                cfg.validate();
            }
            print(vf::run_stage(verb, cfg));
        }
    } catch (const vf::ConfigError& e) {
        fmt::print(stderr, "config error: {}\n", e.what());
        return 2;
    } catch (const vf::MissingDependencyError& e) {
        fmt::print(stderr, "{}\n", e.what());
        return 3;
    } catch (const vf::NumericalError& e) {
        fmt::print(stderr, "numerical failure: {}\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 0;
}
