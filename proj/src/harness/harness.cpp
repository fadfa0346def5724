#include "vf/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "vf/core/array_io.hpp"
#include "vf/core/errors.hpp"
#include "vf/core/hash.hpp"
#include "vf/core/png.hpp"
#include "vf/graphs.hpp"
#include "vf/interpret.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace vf {

// ---------------------------------------------------------------- config

void to_json(json& j, const SynthConfig& c) {
    j = {{"height", c.height},
         {"width", c.width},
         {"days", c.days},
         {"start_time", c.start_time},
         {"inactive_fraction", c.inactive_fraction},
         {"commercial_centers", c.commercial_centers},
         {"commercial_radius", c.commercial_radius},
         {"base_level", c.base_level},
         {"base_spread", c.base_spread},
         {"daily_amplitude", c.daily_amplitude},
         {"weekly_amplitude", c.weekly_amplitude},
         {"weekend_effect", c.weekend_effect},
         {"seasonal_amplitude", c.seasonal_amplitude},
         {"seasonal_period_days", c.seasonal_period_days},
         {"noise_level", c.noise_level},
         {"white_noise", c.white_noise},
         {"drift_std", c.drift_std},
         {"drift_rho", c.drift_rho},
         {"event_rate_per_day", c.event_rate_per_day},
         {"event_amplitude", c.event_amplitude},
         {"event_radius", c.event_radius},
         {"sensors", c.sensors},
         {"sensor_lag", c.sensor_lag},
         {"sensor_radius", c.sensor_radius},
         {"traffic_noise", c.traffic_noise},
         {"traffic_scale", c.traffic_scale}};
}

void from_json(const json& j, SynthConfig& c) {
#define VF_FIELD(name) c.name = j.value(#name, c.name)
    VF_FIELD(height);
    VF_FIELD(width);
    VF_FIELD(days);
    VF_FIELD(start_time);
    VF_FIELD(inactive_fraction);
    VF_FIELD(commercial_centers);
    VF_FIELD(commercial_radius);
    VF_FIELD(base_level);
    VF_FIELD(base_spread);
    VF_FIELD(daily_amplitude);
    VF_FIELD(weekly_amplitude);
    VF_FIELD(weekend_effect);
    VF_FIELD(seasonal_amplitude);
    VF_FIELD(seasonal_period_days);
    VF_FIELD(noise_level);
    VF_FIELD(white_noise);
    VF_FIELD(drift_std);
    VF_FIELD(drift_rho);
    VF_FIELD(event_rate_per_day);
    VF_FIELD(event_amplitude);
    VF_FIELD(event_radius);
    VF_FIELD(sensors);
    VF_FIELD(sensor_lag);
    VF_FIELD(sensor_radius);
    VF_FIELD(traffic_noise);
    VF_FIELD(traffic_scale);
#undef VF_FIELD
}

namespace {

json data_json(const DataConfig& d) {
    return {{"source", d.source},           {"synth", d.synth},
            {"synth_seed", d.synth_seed},   {"grid_path", d.grid_path},
            {"traffic_path", d.traffic_path}, {"edges_path", d.edges_path},
            {"coords_path", d.coords_path}, {"proximity_k", d.proximity_k},
            {"full_range_stats", d.full_range_stats}};
}

json interpret_json(const InterpretConfig& c) {
    return {{"threshold", c.threshold}, {"grouping", c.grouping}, {"alphas", c.alphas}, {"decode_components", c.decode_components}};
}

}  // namespace

void to_json(json& j, const ExperimentConfig& c) {
    j = {{"out", c.out},
         {"seed", c.seed},
         {"p", c.p},
         {"q", c.q},
         {"d", c.d},
         {"split", {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}}},
         {"data", data_json(c.data)},
         {"vae", c.vae},
         {"forecaster", c.forecaster},
         {"predictor", c.predictor},
         {"models", c.models},
         {"variants", c.variants},
         {"seeds", c.seeds},
         {"horizons", c.horizons},
         {"interpret", interpret_json(c.interpret)},
         {"eval_workers", c.eval_workers}};
}

void from_json(const json& j, ExperimentConfig& c) {
    c.out = j.value("out", c.out);
    c.seed = j.value("seed", c.seed);
    c.p = j.value("p", c.p);
    c.q = j.value("q", c.q);
    c.d = j.value("d", c.d);
    if (j.contains("split")) {
        const json& s = j.at("split");
        c.split.train = s.value("train", c.split.train);
        c.split.val = s.value("val", c.split.val);
        c.split.test = s.value("test", c.split.test);
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        c.data.source = d.value("source", c.data.source);
        if (d.contains("synth")) from_json(d.at("synth"), c.data.synth);
        c.data.synth_seed = d.value("synth_seed", c.data.synth_seed);
        c.data.grid_path = d.value("grid_path", c.data.grid_path);
        c.data.traffic_path = d.value("traffic_path", c.data.traffic_path);
        c.data.edges_path = d.value("edges_path", c.data.edges_path);
        c.data.coords_path = d.value("coords_path", c.data.coords_path);
        c.data.proximity_k = d.value("proximity_k", c.data.proximity_k);
        c.data.full_range_stats = d.value("full_range_stats", c.data.full_range_stats);
    }
    if (j.contains("vae")) from_json(j.at("vae"), c.vae);
    if (j.contains("forecaster")) from_json(j.at("forecaster"), c.forecaster);
    if (j.contains("predictor")) from_json(j.at("predictor"), c.predictor);
    c.models = j.value("models", c.models);
    if (j.contains("variants")) c.variants = j.at("variants").get<std::map<std::string, std::vector<std::string>>>();
    c.seeds = j.value("seeds", c.seeds);
    c.horizons = j.value("horizons", c.horizons);
    if (j.contains("interpret")) {
        const json& i = j.at("interpret");
        c.interpret.threshold = i.value("threshold", c.interpret.threshold);
        c.interpret.grouping = i.value("grouping", c.interpret.grouping);
        c.interpret.alphas = i.value("alphas", c.interpret.alphas);
        c.interpret.decode_components = i.value("decode_components", c.interpret.decode_components);
    }
    c.eval_workers = j.value("eval_workers", c.eval_workers);
}

void ExperimentConfig::validate() const {
    if (out.empty()) throw ConfigError("config: output directory is empty");
    if (p < 1 || q < 1 || d < 1) throw ConfigError("config: p, q and d must be positive");
    if (split.train <= 0 || split.val <= 0 || split.test <= 0 || std::abs(split.train + split.val + split.test - 1.0) > 1e-9)
        throw ConfigError("config: split ratios must be positive and sum to 1");
    if (horizons.empty()) throw ConfigError("config: no horizons");
    for (int h : horizons)
        if (h < 1 || h > q) throw ConfigError(fmt::format("config: horizon {} outside [1, q={}]", h, q));
    if (data.source != "synth" && data.source != "files") throw ConfigError("config: data.source must be synth or files");
    if (data.source == "files" && (data.grid_path.empty() || data.traffic_path.empty()))
        throw ConfigError("config: data.source=files needs grid_path and traffic_path");
    if (data.source == "files" && data.edges_path.empty() && data.coords_path.empty())
        throw ConfigError("config: data.source=files needs edges_path or coords_path");
    if (data.source == "synth") {
        try {
            data.synth.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
    if (data.proximity_k < 1) throw ConfigError("config: proximity_k must be >= 1");
    if (seeds.empty()) throw ConfigError("config: no seeds");
    if (models.empty()) throw ConfigError("config: no models");
    for (const auto& m : models) {
        const ModelKind kind = parse_model(m);
        const auto it = variants.find(m);
        if (it == variants.end() || it->second.empty()) throw ConfigError("config: no variants listed for model " + m);
        for (const auto& v : it->second)
            if (!variant_allowed(kind, parse_variant(v))) throw ConfigError("config: variant " + v + " is not defined for " + m);
    }
    if (!(interpret.threshold > 0 && interpret.threshold <= 1)) throw ConfigError("config: interpret.threshold must be in (0,1]");
    parse_grouping(interpret.grouping);
    if (interpret.decode_components < 0) throw ConfigError("config: interpret.decode_components must be >= 0");
    if (vae.beta < 0) throw ConfigError("config: vae.beta must be >= 0");
    forecaster.validate();
    PredictorConfig probe = predictor;
    probe.p = p;
    probe.q = q;
    probe.d = d;
    probe.variant = Variant::NONE;
    probe.validate();
    if (eval_workers < 0) throw ConfigError("config: eval_workers must be >= 0");
}

ExperimentConfig load_config(const std::optional<fs::path>& path) {
    ExperimentConfig c;
    if (path) {
        json j;
        try {
            j = json::parse(read_text(*path));
        } catch (const json::exception& e) {
            throw ConfigError("config " + path->string() + ": " + e.what());
        } catch (const std::exception& e) {
            throw ConfigError("config " + path->string() + ": " + e.what());
        }
        try {
            from_json(j, c);
        } catch (const json::exception& e) {
            throw ConfigError("config " + path->string() + ": " + e.what());
        }
    }
    if (const char* env = std::getenv("VF_OUT"); env && *env) c.out = env;
    c.validate();
    return c;
}

std::uint64_t stage_seed(const ExperimentConfig& cfg, const std::string& stage) { return derive_seed(cfg.seed, stage); }

// ---------------------------------------------------------------- manifests

namespace {

constexpr const char* kVersion = "vf-1";

fs::path stage_dir(const ExperimentConfig& cfg, const std::string& stage) { return fs::path(cfg.out) / stage; }

void write_json(const fs::path& path, const json& j) { atomic_write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) { return json::parse(read_text(path)); }

json range_json(std::size_t begin, std::size_t end) { return json::array({begin, end}); }

json indices_summary(const std::vector<std::size_t>& v) {
    if (v.empty()) return {{"count", 0}};
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return {{"count", v.size()}, {"min", *lo}, {"max", *hi}};
}

// Manifest of an upstream stage; MissingDependencyError when absent.
json require(const ExperimentConfig& cfg, const std::string& stage) {
    const fs::path m = stage_dir(cfg, stage) / "manifest.json";
    if (!fs::exists(m)) throw MissingDependencyError(stage, "its manifest (" + m.string() + "); run `vf " + stage + "` first");
    return read_json(m);
}

struct StageKey {
    json config;
    std::vector<std::string> deps;
};

std::string key_of(const ExperimentConfig& cfg, const std::string& stage, const StageKey& k, json* inputs) {
    Fnv1a h;
    h.update(stage).update(std::string(kVersion)).update(k.config.dump());
    for (const auto& d : k.deps) {
        require(cfg, d);
        const auto digest = hex64(hash_file(stage_dir(cfg, d) / "manifest.json"));
        (*inputs)[d] = digest;
        h.update(d).update(digest);
    }
    return hex64(h.digest());
}

bool up_to_date(const fs::path& dir, const std::string& key) {
    const fs::path m = dir / "manifest.json";
    if (!fs::exists(m)) return false;
    const json j = read_json(m);
    if (j.value("key", "") != key) return false;
    const json outputs = j.value("outputs", json::object());
    for (const auto& [rel, digest] : outputs.items())
        if (!fs::exists(dir / rel) || hex64(hash_file(dir / rel)) != digest.get<std::string>()) return false;
    return true;
}

json hash_outputs(const fs::path& dir, const std::vector<std::string>& rels) {
    json o = json::object();
    for (const auto& r : rels) o[r] = hex64(hash_file(dir / r));
    return o;
}

void write_manifest(const fs::path& dir, const std::string& stage, const std::string& key, const json& config,
                    const json& inputs, std::uint64_t seed, const json& outputs, const json& ranges) {
    write_json(dir / "manifest.json", {{"stage", stage},
                                       {"version", kVersion},
                                       {"key", key},
                                       {"config", config},
                                       {"inputs", inputs},
                                       {"seed", seed},
                                       {"outputs", outputs},
                                       {"ranges", ranges}});
}

// ---------------------------------------------------------------- artifact io

void write_mask(const fs::path& base, const ActivityMask& m) {
    NdArray a({m.height, m.width});
    for (std::size_t i = 0; i < m.mask.size(); ++i) a.data[i] = m.mask[i];
    write_f32(base, a);
}

ActivityMask read_mask(const fs::path& base) {
    const NdArray a = read_f32(base);
    if (a.rank() != 2) throw ShapeError("mask must be [H,W]");
    ActivityMask m{a.dim(0), a.dim(1), std::vector<std::uint8_t>(a.size())};
    for (std::size_t i = 0; i < a.size(); ++i) m.mask[i] = a.data[i] != 0.0 ? 1 : 0;
    return m;
}

GridSeries read_grid(const fs::path& base, bool normalized) {
    ArrayMeta meta;
    GridSeries g;
    g.values = read_f32(base, &meta);
    if (!meta.start_time) throw ConfigError("grid " + base.string() + " has no start_time in its sidecar");
    g.timestamps = hourly_timeline(*meta.start_time, g.values.dim(0));
    g.normalized = normalized;
    g.validate();
    return g;
}

TrafficSeries read_traffic(const fs::path& base) {
    ArrayMeta meta;
    TrafficSeries t;
    t.values = read_f32(base, &meta);
    if (!meta.start_time) throw ConfigError("traffic " + base.string() + " has no start_time in its sidecar");
    t.timestamps = hourly_timeline(*meta.start_time, t.values.dim(0));
    t.validate();
    return t;
}

void write_series(const fs::path& base, const NdArray& v, HourStamp start) {
    ArrayMeta m;
    m.start_time = start;
    write_f32(base, v, m);
}

json scaler_json(const TrafficScaler& s) { return {{"mean", s.mean}, {"std", s.std}}; }
TrafficScaler scaler_from(const json& j) { return {j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()}; }

struct Prepared {
    GridSeries grid;  // normalized
    ActivityMask mask;
    TrafficSeries traffic;  // raw, imputed
    TrafficScaler scaler;
    SensorGraph graph;
    std::vector<std::size_t> train, val;
    std::size_t test_start = 0, steps = 0;
};

Prepared load_prepared(const ExperimentConfig& cfg) {
    const fs::path d = stage_dir(cfg, "preprocess");
    Prepared p;
    p.grid = read_grid(d / "grid_norm", true);
    p.mask = read_mask(d / "mask");
    p.traffic = read_traffic(d / "traffic");
    const json split = read_json(d / "split.json");
    p.train = split.at("train").get<std::vector<std::size_t>>();
    p.val = split.at("val").get<std::vector<std::size_t>>();
    p.test_start = split.at("test_start").get<std::size_t>();
    p.steps = split.at("steps").get<std::size_t>();
    p.scaler = scaler_from(read_json(d / "scaler.json"));
    p.graph = read_edge_csv(d / "edges.csv", p.traffic.sensors());
    return p;
}

std::vector<std::size_t> test_anchors(const ExperimentConfig& cfg, const Prepared& p) {
    std::vector<std::size_t> cand;
    for (std::size_t t = p.test_start; t < p.steps; ++t) cand.push_back(t);
    return valid_anchors(cand, static_cast<std::size_t>(cfg.p), static_cast<std::size_t>(cfg.q), p.steps);
}

std::string run_name(const std::string& model, const std::string& variant, std::uint64_t seed) {
    return fmt::format("{}-{}-s{}", model, variant, seed);
}

// ---------------------------------------------------------------- stages

StageResult stage_synth(const ExperimentConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "synth");
    StageKey k{{{"data", data_json(cfg.data)}}, {}};
    if (cfg.data.source == "files") {
        auto hash_input = [&](const std::string& p, const fs::path& file) {
            if (!fs::exists(file)) throw ConfigError("input file not found: " + file.string());
            k.config["input_hash"][p] = hex64(hash_file(file));
        };
        hash_input(cfg.data.grid_path, f32_path(cfg.data.grid_path));
        hash_input(cfg.data.traffic_path, f32_path(cfg.data.traffic_path));
        if (!cfg.data.edges_path.empty()) hash_input(cfg.data.edges_path, cfg.data.edges_path);
        if (!cfg.data.coords_path.empty()) hash_input(cfg.data.coords_path, cfg.data.coords_path);
    }
    json inputs = json::object();
    const std::string key = key_of(cfg, "synth", k, &inputs);
    if (up_to_date(dir, key)) return {"synth", true, dir};
    fs::create_directories(dir);

    std::vector<std::string> outs{"grid.f32", "grid.meta.json", "traffic.f32", "traffic.meta.json"};
    if (cfg.data.source == "synth") {
        const SynthCity city = synth_city(cfg.data.synth, cfg.data.synth_seed);
        write_series(dir / "grid", city.grid.values, city.grid.timestamps.front());
        write_series(dir / "traffic", city.traffic.values, city.traffic.timestamps.front());
        write_coords_csv(dir / "coords.csv", city.meta.sensor_coords);
        outs.push_back("coords.csv");
        json zones = json::array();
        for (Zone z : city.meta.zones) zones.push_back(static_cast<int>(z));
        write_json(dir / "metadata.json",
                   {{"zones", zones}, {"lag", city.meta.lag}, {"true_latent_rank", city.meta.true_latent_rank},
                    {"sensor_gain", city.meta.sensor_gain}});
        outs.push_back("metadata.json");
    } else {
        const GridSeries g = read_grid(cfg.data.grid_path, false);
        const TrafficSeries t = read_traffic(cfg.data.traffic_path);
        if (g.steps() != t.steps() || g.timestamps.front() != t.timestamps.front())
            throw ConfigError("grid and traffic timelines differ");
        write_series(dir / "grid", g.values, g.timestamps.front());
        write_series(dir / "traffic", t.values, t.timestamps.front());
        if (!cfg.data.edges_path.empty()) {
            fs::copy_file(cfg.data.edges_path, dir / "edges.csv", fs::copy_options::overwrite_existing);
            outs.push_back("edges.csv");
        }
        if (!cfg.data.coords_path.empty()) {
            fs::copy_file(cfg.data.coords_path, dir / "coords.csv", fs::copy_options::overwrite_existing);
            outs.push_back("coords.csv");
        }
    }
    write_manifest(dir, "synth", key, k.config, inputs, cfg.data.synth_seed, hash_outputs(dir, outs), json::object());
    return {"synth", false, dir};
}

StageResult stage_preprocess(const ExperimentConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "preprocess");
    const StageKey k{{{"split", {cfg.split.train, cfg.split.val, cfg.split.test}},
                      {"full_range_stats", cfg.data.full_range_stats},
                      {"proximity_k", cfg.data.proximity_k},
                      {"seed", stage_seed(cfg, "split")}},
                     {"synth"}};
    json inputs;
    const std::string key = key_of(cfg, "preprocess", k, &inputs);
    if (up_to_date(dir, key)) return {"preprocess", true, dir};
    fs::create_directories(dir);
    const fs::path src = stage_dir(cfg, "synth");

    GridSeries raw = read_grid(src / "grid", false);
    TrafficSeries traffic = read_traffic(src / "traffic");
    const std::size_t T = raw.steps();
    const SplitIndex split = split_dataset(T, cfg.split, stage_seed(cfg, "split"));
    const std::size_t test_start = split.test.front();
    const IndexRange fit = cfg.data.full_range_stats ? IndexRange{0, T} : IndexRange{0, test_start};

    const CellStats nan_stats = compute_cell_stats_ignoring_nan(raw, fit);
    const auto missing = nan_positions(raw.values);
    if (std::any_of(missing.begin(), missing.end(), [](std::uint8_t m) { return m != 0; })) raw = impute_missing(raw, missing, &nan_stats);
    const auto tmiss = nan_positions(traffic.values);
    if (std::any_of(tmiss.begin(), tmiss.end(), [](std::uint8_t m) { return m != 0; })) {
        NdArray fallback({traffic.sensors(), traffic.features()});
        std::vector<double> n(fallback.size(), 0.0);
        for (std::size_t t = fit.begin; t < fit.end; ++t)
            for (std::size_t i = 0; i < fallback.size(); ++i)
                if (const double v = traffic.values.step(t)[i]; std::isfinite(v)) {
                    fallback.data[i] += v;
                    n[i] += 1;
                }
        for (std::size_t i = 0; i < fallback.size(); ++i) fallback.data[i] = n[i] > 0 ? fallback.data[i] / n[i] : 0.0;
        traffic.values = impute_array(traffic.values, tmiss, &fallback);
    }

    const CellStats stats = compute_cell_stats(raw, fit);
    const ActivityMask mask = derive_mask(raw, fit);
    const GridSeries norm = normalize_grid(raw, stats);
    const TrafficScaler scaler = TrafficScaler::fit(traffic, fit);

    SensorGraph graph;
    if (fs::exists(src / "edges.csv")) {
        graph = read_edge_csv(src / "edges.csv", traffic.sensors());
    } else if (fs::exists(src / "coords.csv")) {
        graph = build_proximity_graph(read_coords_csv(src / "coords.csv"), cfg.data.proximity_k);
    } else {
        throw MissingDependencyError("synth", "a sensor graph (edges.csv or coords.csv)");
    }
    graph.validate();

    write_series(dir / "grid_norm", norm.values, norm.timestamps.front());
    write_series(dir / "traffic", traffic.values, traffic.timestamps.front());
    write_mask(dir / "mask", mask);
    write_f32(dir / "stats_mean", stats.mean);
    write_f32(dir / "stats_std", stats.std);
    write_json(dir / "scaler.json", scaler_json(scaler));
    write_json(dir / "split.json", {{"train", split.train}, {"val", split.val}, {"test_start", test_start}, {"steps", T}});
    write_edge_csv(dir / "edges.csv", graph);
    const std::vector<std::string> outs{"grid_norm.f32", "traffic.f32", "mask.f32", "stats_mean.f32", "stats_std.f32",
                                        "scaler.json",   "split.json",  "edges.csv"};
    write_manifest(dir, "preprocess", key, k.config, inputs, stage_seed(cfg, "split"), hash_outputs(dir, outs),
                   {{"test_start", test_start},
                    {"steps", T},
                    {"reads", range_json(fit.begin, fit.end)},
                    {"train", indices_summary(split.train)},
                    {"val", indices_summary(split.val)}});
    return {"preprocess", false, dir};
}

VaeConfig vae_config(const ExperimentConfig& cfg, const GridSeries& g) {
    VaeConfig v = cfg.vae;
    v.height = static_cast<int>(g.height());
    v.width = static_cast<int>(g.width());
    v.channels = static_cast<int>(g.channels());
    v.latent_dim = cfg.d;
    v.seed = stage_seed(cfg, "train-vae");
    return v;
}

StageResult stage_train_vae(const ExperimentConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "train-vae");
    const StageKey k{{{"vae", cfg.vae}, {"d", cfg.d}, {"seed", stage_seed(cfg, "train-vae")}}, {"preprocess"}};
    json inputs;
    const std::string key = key_of(cfg, "train-vae", k, &inputs);
    if (up_to_date(dir, key)) return {"train-vae", true, dir};
    const Prepared p = load_prepared(cfg);
    const VaeConfig vc = vae_config(cfg, p.grid);
    vc.validate();
    const TrainedVae t = train_vae(p.grid, p.mask, p.train, p.val, vc);
    fs::create_directories(dir);
    const json history = {{"train_total", t.history.train_total},
                          {"val_total", t.history.val_total},
                          {"val_recon", t.history.val_recon},
                          {"best_epoch", t.history.best_epoch},
                          {"best_val_recon", t.history.best_val_recon}};
    t.model.save(dir / "model", history);
    write_json(dir / "history.json", history);
    std::vector<std::size_t> all = p.train;
    all.insert(all.end(), p.val.begin(), p.val.end());
    const std::size_t reads_end = all.empty() ? 0 : *std::max_element(all.begin(), all.end()) + 1;
    write_manifest(dir, "train-vae", key, k.config, inputs, vc.seed, hash_outputs(dir, {"model/model.json", "history.json"}),
                   {{"test_start", p.test_start},
                    {"reads", range_json(0, reads_end)},
                    {"train", indices_summary(p.train)},
                    {"val", indices_summary(p.val)}});
    return {"train-vae", false, dir};
}

StageResult stage_embed(const ExperimentConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "embed");
    const StageKey k{json::object(), {"preprocess", "train-vae"}};
    json inputs;
    const std::string key = key_of(cfg, "embed", k, &inputs);
    if (up_to_date(dir, key)) return {"embed", true, dir};
    const fs::path pre = stage_dir(cfg, "preprocess");
    const GridSeries g = read_grid(pre / "grid_norm", true);
    const ActivityMask mask = read_mask(pre / "mask");
    const VaeModel vae = VaeModel::load(stage_dir(cfg, "train-vae") / "model");
    const EmbeddingSeries e = embed_series(g, mask, vae);
    fs::create_directories(dir);
    write_embeddings(dir / "embeddings", e);
    write_manifest(dir, "embed", key, k.config, inputs, 0, hash_outputs(dir, {"embeddings.f32"}),
                   {{"inference", range_json(0, g.steps())}});
    return {"embed", false, dir};
}

StageResult stage_train_forecaster(const ExperimentConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "train-forecaster");
    const StageKey k{{{"forecaster", cfg.forecaster}, {"p", cfg.p}, {"q", cfg.q}, {"seed", stage_seed(cfg, "train-forecaster")}},
                     {"preprocess", "train-vae", "embed"}};
    json inputs;
    const std::string key = key_of(cfg, "train-forecaster", k, &inputs);
    if (up_to_date(dir, key)) return {"train-forecaster", true, dir};
    const Prepared p = load_prepared(cfg);
    const VaeModel vae = VaeModel::load(stage_dir(cfg, "train-vae") / "model");
    const EmbeddingSeries emb = read_embeddings(stage_dir(cfg, "embed") / "embeddings");
    ForecasterConfig fc = cfg.forecaster;
    fc.p = cfg.p;
    fc.q = cfg.q;
    fc.seed = stage_seed(cfg, "train-forecaster");
    const auto P = static_cast<std::size_t>(cfg.p), Q = static_cast<std::size_t>(cfg.q);
    const auto tr = valid_anchors(p.train, P, Q, p.test_start), va = valid_anchors(p.val, P, Q, p.test_start);
    if (tr.empty() || va.empty()) throw ConfigError("train-forecaster: no valid training/validation windows");
    const TrainedForecaster t = train_forecaster(emb, p.grid, p.mask, vae, tr, va, fc);
    fs::create_directories(dir);
    const auto pers = persistence_mse(p.grid, p.mask, va, Q);
    const json history = {{"train_loss", t.history.train_loss},
                          {"teacher_ratio", t.history.teacher_ratio},
                          {"val_pixel_mse", t.history.val_pixel_mse},
                          {"best_epoch", t.history.best_epoch},
                          {"best_pixel_mse", t.history.best.pixel_mse},
                          {"persistence_pixel_mse", pers}};
    t.model.save(dir / "model", history);
    write_json(dir / "history.json", history);
    // The cache is built from the checkpoint on disk so later stages see identical numbers.
    const Forecaster saved = Forecaster::load(dir / "model");
    write_forecasts(dir / "forecasts", forecast_all(saved, emb), emb);
    std::vector<std::size_t> all = tr;
    all.insert(all.end(), va.begin(), va.end());
    write_manifest(dir, "train-forecaster", key, k.config, inputs, fc.seed,
                   hash_outputs(dir, {"model/model.json", "history.json", "forecasts.f32"}),
                   {{"test_start", p.test_start},
                    {"reads", range_json(*std::min_element(all.begin(), all.end()) + 1 - P, *std::max_element(all.begin(), all.end()) + Q + 1)},
                    {"train_anchors", indices_summary(tr)},
                    {"val_anchors", indices_summary(va)}});
    return {"train-forecaster", false, dir};
}

PredictorData predictor_data(const ExperimentConfig& cfg, const Prepared& p) {
    const EmbeddingSeries emb = read_embeddings(stage_dir(cfg, "embed") / "embeddings");
    const NdArray fc = read_forecasts(stage_dir(cfg, "train-forecaster") / "forecasts");
    return make_predictor_data(p.traffic, p.scaler, emb.z, fc);
}

struct RunSpec {
    std::string model, variant;
    std::uint64_t seed;
};

std::vector<RunSpec> run_matrix(const ExperimentConfig& cfg) {
    std::vector<RunSpec> out;
    for (const auto& m : cfg.models)
        for (const auto& v : cfg.variants.at(m))
            for (std::uint64_t s : cfg.seeds) out.push_back({m, v, s});
    return out;
}

PredictorConfig run_config(const ExperimentConfig& cfg, const RunSpec& r) {
    PredictorConfig pc = cfg.predictor;
    pc.model = parse_model(r.model);
    pc.variant = parse_variant(r.variant);
    pc.p = cfg.p;
    pc.q = cfg.q;
    pc.d = cfg.d;
    pc.seed = derive_seed(cfg.seed, "train-predictor/" + std::to_string(r.seed));
    return pc;
}

StageResult stage_train_predictor(const ExperimentConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "train-predictor");
    const StageKey k{{{"predictor", cfg.predictor}, {"models", cfg.models}, {"variants", cfg.variants}, {"seeds", cfg.seeds},
                      {"p", cfg.p}, {"q", cfg.q}, {"d", cfg.d}, {"master_seed", cfg.seed}},
                     {"preprocess", "embed", "train-forecaster"}};
    json inputs;
    const std::string key = key_of(cfg, "train-predictor", k, &inputs);
    if (up_to_date(dir, key)) return {"train-predictor", true, dir};
    const Prepared p = load_prepared(cfg);
    const PredictorData data = predictor_data(cfg, p);
    const auto P = static_cast<std::size_t>(cfg.p), Q = static_cast<std::size_t>(cfg.q);
    const auto tr = valid_anchors(p.train, P, Q, p.test_start), va = valid_anchors(p.val, P, Q, p.test_start);
    if (tr.empty() || va.empty()) throw ConfigError("train-predictor: no valid training/validation windows");
    fs::create_directories(dir / "runs");
    json runs = json::array();
    std::vector<std::string> outs;
    for (const RunSpec& r : run_matrix(cfg)) {
        const PredictorConfig pc = run_config(cfg, r);
        const std::string name = run_name(r.model, r.variant, r.seed);
        const fs::path rd = dir / "runs" / name;
        // per-run key: an interrupted or narrowed matrix reuses finished runs
        const std::string run_key = hex64(Fnv1a{}.update(std::string(kVersion)).update(inputs.dump()).update(json(pc).dump()).digest());
        if (!up_to_date(rd, run_key)) {
            const TrainedPredictor t = train_predictor(data, p.graph, tr, va, pc);
            fs::create_directories(rd);
            const json history = {{"train_loss", t.history.train_loss},
                                  {"val_mae", t.history.val_mae},
                                  {"best_epoch", t.history.best_epoch},
                                  {"best_val_mae", t.history.best_val_mae}};
            t.model->save(rd / "model", history);
            write_json(rd / "history.json", history);
            write_manifest(rd, "train-predictor", run_key, pc, inputs, pc.seed,
                           hash_outputs(rd, {"model/model.json", "history.json"}), json::object());
        }
        runs.push_back({{"name", name}, {"model", r.model}, {"variant", r.variant}, {"seed", r.seed}});
        outs.push_back("runs/" + name + "/manifest.json");
    }
    std::vector<std::size_t> all = tr;
    all.insert(all.end(), va.begin(), va.end());
    write_json(dir / "runs.json", runs);
    outs.push_back("runs.json");
    write_manifest(dir, "train-predictor", key, k.config, inputs, cfg.seed, hash_outputs(dir, outs),
                   {{"test_start", p.test_start},
                    {"reads", range_json(*std::min_element(all.begin(), all.end()) + 1 - P, *std::max_element(all.begin(), all.end()) + Q + 1)},
                    {"train_anchors", indices_summary(tr)},
                    {"val_anchors", indices_summary(va)}});
    return {"train-predictor", false, dir};
}

// Fixed 64-window chunks so results do not depend on the worker count.
std::vector<Prediction> predict_pool(const TrafficModel& model, const PredictorData& data, const std::vector<std::size_t>& anchors,
                                     int workers) {
    constexpr std::size_t chunk = 64;
    const std::size_t n_chunks = (anchors.size() + chunk - 1) / chunk;
    std::vector<std::vector<Prediction>> parts(n_chunks);
    std::vector<std::exception_ptr> errors(n_chunks);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t c; (c = next++) < n_chunks;) {
            try {
                const auto b = anchors.begin() + static_cast<std::ptrdiff_t>(c * chunk);
                const std::vector<std::size_t> sub(b, b + static_cast<std::ptrdiff_t>(std::min(chunk, anchors.size() - c * chunk)));
                parts[c] = predict(model, data, sub);
            } catch (...) {
                errors[c] = std::current_exception();
            }
        }
    };
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t n = std::min<std::size_t>(workers > 0 ? static_cast<std::size_t>(workers) : hw, std::max<std::size_t>(n_chunks, 1));
    std::vector<std::jthread> pool;
    for (std::size_t i = 1; i < n; ++i) pool.emplace_back(work);
    work();
    pool.clear();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    std::vector<Prediction> out;
    for (auto& p : parts) std::move(p.begin(), p.end(), std::back_inserter(out));
    return out;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

StageResult stage_evaluate(const ExperimentConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "evaluate");
    const StageKey k{{{"horizons", cfg.horizons}}, {"preprocess", "embed", "train-forecaster", "train-predictor"}};
    json inputs;
    const std::string key = key_of(cfg, "evaluate", k, &inputs);
    if (up_to_date(dir, key)) return {"evaluate", true, dir};
    const Prepared p = load_prepared(cfg);
    const PredictorData data = predictor_data(cfg, p);
    const auto anchors = test_anchors(cfg, p);
    if (anchors.empty()) throw ConfigError("evaluate: no test windows");
    const auto truth = truth_windows(p.traffic, anchors, cfg.q);
    const json runs = read_json(stage_dir(cfg, "train-predictor") / "runs.json");

    std::string by_seed = "model,variant,seed,horizon,mae\n";
    std::map<std::pair<std::string, std::string>, std::map<int, std::vector<double>>> pooled;
    std::vector<std::pair<std::string, std::string>> order;
    for (const json& r : runs) {
        const auto model = load_predictor(stage_dir(cfg, "train-predictor") / "runs" / r.at("name").get<std::string>() / "model", p.graph);
        const MaeTable mae = evaluate_mae(predict_pool(*model, data, anchors, cfg.eval_workers), truth, cfg.horizons);
        const std::pair<std::string, std::string> mv{r.at("model"), r.at("variant")};
        if (!pooled.contains(mv)) order.push_back(mv);
        for (const auto& [h, v] : mae) {
            if (!std::isfinite(v)) throw NumericalError("evaluate: non-finite MAE for " + r.at("name").get<std::string>());
            by_seed += fmt::format("{},{},{},{},{:.6f}\n", mv.first, mv.second, r.at("seed").get<std::uint64_t>(), h, v);
            pooled[mv][h].push_back(v);
        }
    }
    std::string results = "model,variant,horizon,mae\n";
    for (const auto& mv : order)
        for (const auto& [h, vs] : pooled[mv]) results += fmt::format("{},{},{},{:.6f}\n", mv.first, mv.second, h, median(vs));
    fs::create_directories(dir);
    atomic_write_text(dir / "results_by_seed.csv", by_seed);
    atomic_write_text(dir / "results.csv", results);
    write_manifest(dir, "evaluate", key, k.config, inputs, 0, hash_outputs(dir, {"results.csv", "results_by_seed.csv"}),
                   {{"test_start", p.test_start}, {"test_anchors", indices_summary(anchors)}});
    return {"evaluate", false, dir};
}

StageResult stage_interpret(const ExperimentConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "interpret");
    const StageKey k{{{"interpret", interpret_json(cfg.interpret)}}, {"preprocess", "train-vae", "embed"}};
    json inputs;
    const std::string key = key_of(cfg, "interpret", k, &inputs);
    if (up_to_date(dir, key)) return {"interpret", true, dir};
    const fs::path pre = stage_dir(cfg, "preprocess");
    const json split = read_json(pre / "split.json");
    const auto test_start = split.at("test_start").get<std::size_t>();
    const ActivityMask mask = read_mask(pre / "mask");
    const VaeModel vae = VaeModel::load(stage_dir(cfg, "train-vae") / "model");
    const EmbeddingSeries emb = read_embeddings(stage_dir(cfg, "embed") / "embeddings");
    const Mat fit_rows = emb.z.topRows(static_cast<ag::Index>(test_start));
    const std::vector<HourStamp> fit_ts(emb.timestamps.begin(), emb.timestamps.begin() + static_cast<std::ptrdiff_t>(test_start));
    const PCAModel pca = fit_pca(fit_rows);
    const int k_sel = select_components(pca, fit_rows, cfg.interpret.threshold);

    fs::create_directories(dir);
    std::vector<std::string> outs{"pca.json"};
    const auto groups = export_trajectories(fit_rows, fit_ts, pca, parse_grouping(cfg.interpret.grouping), dir / "trajectories");
    for (const auto& g : groups) outs.push_back("trajectories/" + g.name + ".csv");
    fs::create_directories(dir / "decodes");
    for (int c = 0; c < std::min(cfg.interpret.decode_components, pca.k_max()); ++c)
        for (double a : cfg.interpret.alphas) {
            const NdArray img = decode_component(pca, c, a * std::sqrt(pca.explained_variance(c)), mask, vae);
            write_grid_png(dir / "decodes" / fmt::format("pc{}_decode_alpha{:+g}.png", c + 1, a), img, mask);
        }
    std::vector<double> retained;
    for (int kk = 1; kk <= pca.k_max(); ++kk) retained.push_back(retained_variance(pca, fit_rows, kk));
    write_json(dir / "pca.json", {{"threshold", cfg.interpret.threshold},
                                  {"selected_components", k_sel},
                                  {"explained_variance", std::vector<double>(pca.explained_variance.data(), pca.explained_variance.data() + pca.k_max())},
                                  {"retained_variance", retained},
                                  {"fit_rows", range_json(0, test_start)}});
    write_manifest(dir, "interpret", key, k.config, inputs, 0, hash_outputs(dir, outs), {{"reads", range_json(0, test_start)}});
    return {"interpret", false, dir};
}

}  // namespace

StageResult run_stage(const std::string& stage, const ExperimentConfig& cfg) {
    cfg.validate();
    if (stage == "synth") return stage_synth(cfg);
    if (stage == "preprocess") return stage_preprocess(cfg);
    if (stage == "train-vae") return stage_train_vae(cfg);
    if (stage == "embed") return stage_embed(cfg);
    if (stage == "train-forecaster") return stage_train_forecaster(cfg);
    if (stage == "train-predictor") return stage_train_predictor(cfg);
    if (stage == "evaluate") return stage_evaluate(cfg);
    if (stage == "interpret") return stage_interpret(cfg);
    throw ConfigError("unknown stage '" + stage + "'");
}

std::vector<StageResult> run_pipeline(const ExperimentConfig& cfg) {
    std::vector<StageResult> out;
    for (const auto& s : kStages) out.push_back(run_stage(s, cfg));
    return out;
}

LeakageAudit audit_leakage(const fs::path& out) {
    LeakageAudit a;
    const fs::path pre = out / "preprocess" / "manifest.json";
    if (!fs::exists(pre)) throw MissingDependencyError("preprocess", "its manifest");
    a.test_start = read_json(pre).at("ranges").at("test_start").get<std::size_t>();
    for (const std::string stage : {"preprocess", "train-vae", "train-forecaster", "train-predictor"}) {
        const fs::path m = out / stage / "manifest.json";
        if (!fs::exists(m)) {
            a.clean = false;
            a.findings.push_back(stage + ": no manifest");
            continue;
        }
        const json r = read_json(m).at("ranges");
        const auto reads = r.at("reads").get<std::vector<std::size_t>>();
        const bool ok = reads.size() == 2 && reads[1] <= a.test_start && r.at("test_start").get<std::size_t>() == a.test_start;
        a.clean = a.clean && ok;
        a.findings.push_back(fmt::format("{}: reads [{}, {}) test_start {} {}", stage, reads.at(0), reads.at(1), a.test_start, ok ? "ok" : "LEAK"));
    }
    return a;
}

// ---------------------------------------------------------------- report

std::vector<ResultRow> read_results(const fs::path& csv) {
    std::istringstream in(read_text(csv));
    std::string line;
    if (!std::getline(in, line) || line != "model,variant,horizon,mae")
        throw std::invalid_argument(csv.string() + ": expected header model,variant,horizon,mae");
    std::vector<ResultRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ResultRow r;
        std::string h, m;
        if (!std::getline(ls, r.model, ',') || !std::getline(ls, r.variant, ',') || !std::getline(ls, h, ',') || !std::getline(ls, m))
            throw std::invalid_argument(csv.string() + ": malformed row '" + line + "'");
        r.horizon = std::stoi(h);
        r.mae = std::stod(m);
        rows.push_back(r);
    }
    return rows;
}

std::vector<ReportRow> pivot_report(const std::vector<ResultRow>& rows) {
    std::vector<ReportRow> table;
    std::map<std::pair<std::string, std::string>, std::size_t> index;
    for (const auto& r : rows) {
        const auto key = std::make_pair(r.model, r.variant);
        auto it = index.find(key);
        if (it == index.end()) {
            it = index.emplace(key, table.size()).first;
            table.push_back({r.model, r.variant, {}, {}});
        }
        if (table[it->second].mae.contains(r.horizon))
            throw std::invalid_argument(fmt::format("duplicate result for {}/{} horizon {}", r.model, r.variant, r.horizon));
        table[it->second].mae[r.horizon] = r.mae;
    }
    if (table.empty()) throw std::invalid_argument("report: no results");
    std::set<int> hs;
    for (const auto& [h, _] : table.front().mae) hs.insert(h);
    for (const auto& row : table) {
        std::set<int> mine;
        for (const auto& [h, _] : row.mae) mine.insert(h);
        if (mine != hs) throw std::invalid_argument("report: inconsistent horizons for " + row.model + "/" + row.variant);
    }
    std::stable_sort(table.begin(), table.end(), [](const ReportRow& a, const ReportRow& b) { return a.model < b.model; });
    for (std::size_t i = 0; i < table.size();) {
        std::size_t j = i;
        while (j < table.size() && table[j].model == table[i].model) ++j;
        for (int h : hs) {
            std::size_t best = i;
            for (std::size_t r = i; r < j; ++r) {
                table[r].best[h] = false;
                const double v = table[r].mae.at(h), b = table[best].mae.at(h);
                if (v < b || (v == b && table[r].variant < table[best].variant)) best = r;
            }
            table[best].best[h] = true;
        }
        i = j;
    }
    return table;
}

std::string render_report(const std::vector<ReportRow>& table) {
    std::string s = fmt::format("{:<8} {:<8}", "model", "variant");
    for (const auto& [h, _] : table.front().mae) s += fmt::format(" {:>11}", "h" + std::to_string(h));
    s += "\n";
    for (const auto& r : table) {
        s += fmt::format("{:<8} {:<8}", r.model, r.variant);
        for (const auto& [h, v] : r.mae) s += fmt::format(" {:>10.4f}{}", v, r.best.at(h) ? "*" : " ");
        s += "\n";
    }
    s += "* best within model per horizon\n";
    return s;
}

namespace {

void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb c) {
    const int n = std::max({std::abs(x1 - x0), std::abs(y1 - y0), 1});
    for (int i = 0; i <= n; ++i) img.dot(x0 + (x1 - x0) * i / n, y0 + (y1 - y0) * i / n, 1, c);
}

// MAE against horizon, one polyline per variant of `model`; returns the color legend.
std::string plot_model(const std::vector<ReportRow>& table, const std::string& model, const fs::path& path) {
    constexpr int W = 480, H = 320, pad = 30;
    Image img(W, H);
    std::vector<const ReportRow*> rows;
    double lo = 1e300, hi = -1e300;
    for (const auto& r : table)
        if (r.model == model) {
            rows.push_back(&r);
            for (const auto& [h, v] : r.mae) lo = std::min(lo, v), hi = std::max(hi, v);
        }
    const auto& hs = rows.front()->mae;
    const int h_lo = hs.begin()->first, h_hi = hs.rbegin()->first;
    auto px = [&](int h) { return pad + (W - 2 * pad) * (h_hi == h_lo ? 0 : h - h_lo) / std::max(h_hi - h_lo, 1); };
    auto py = [&](double v) { return H - pad - static_cast<int>((H - 2 * pad) * (hi > lo ? (v - lo) / (hi - lo) : 0.5)); };
    draw_line(img, pad, H - pad, W - pad, H - pad, {0, 0, 0});
    draw_line(img, pad, pad, pad, H - pad, {0, 0, 0});
    std::string legend = model + ":";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Rgb c = ramp_color(rows.size() > 1 ? static_cast<double>(i) / static_cast<double>(rows.size() - 1) : 0.0);
        legend += fmt::format(" {}=#{:02x}{:02x}{:02x}", rows[i]->variant, c[0], c[1], c[2]);
        auto prev = rows[i]->mae.begin();
        img.dot(px(prev->first), py(prev->second), 3, c);
        for (auto it = std::next(prev); it != rows[i]->mae.end(); prev = it++) {
            draw_line(img, px(prev->first), py(prev->second), px(it->first), py(it->second), c);
            img.dot(px(it->first), py(it->second), 3, c);
        }
    }
    write_png(path, img);
    return legend + fmt::format(" (x: horizon {}..{}, y: MAE {:.4f}..{:.4f})\n", h_lo, h_hi, lo, hi);
}

}  // namespace

std::vector<ReportRow> report(const std::vector<fs::path>& csvs, const fs::path& out) {
    std::vector<ResultRow> rows;
    for (const auto& c : csvs) {
        if (!fs::exists(c)) throw MissingDependencyError("evaluate", c.string());
        auto r = read_results(c);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    const auto table = pivot_report(rows);
    std::string csv = "model,variant";
    for (const auto& [h, _] : table.front().mae) csv += fmt::format(",mae_h{0},best_h{0}", h);
    csv += "\n";
    for (const auto& r : table) {
        csv += r.model + "," + r.variant;
        for (const auto& [h, v] : r.mae) csv += fmt::format(",{:.6f},{}", v, r.best.at(h) ? 1 : 0);
        csv += "\n";
    }
    fs::create_directories(out / "report");
    atomic_write_text(out / "report" / "table.csv", csv);
    std::string text = render_report(table);
    std::set<std::string> models;
    for (const auto& r : table) models.insert(r.model);
    for (const auto& m : models) text += plot_model(table, m, out / "report" / (m + "_mae.png"));
    atomic_write_text(out / "report" / "table.txt", text);
    return table;
}

}  // namespace vf
