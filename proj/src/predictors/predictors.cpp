#include "vf/predictors.hpp"

#include <cmath>
#include <limits>

#include "vf/core/array_io.hpp"
#include "vf/core/errors.hpp"
#include "vf/core/hash.hpp"

namespace vf {

namespace {

Mat zeros(ag::Index r, ag::Index c) { return Mat::Zero(r, c); }

std::vector<ag::Index> tile_rows(std::size_t b, std::size_t n_s) {
    std::vector<ag::Index> idx;
    idx.reserve(b * n_s);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t s = 0; s < n_s; ++s) idx.push_back(static_cast<ag::Index>(s));
    return idx;
}

std::vector<ag::Index> step_rows(std::size_t b, std::size_t n_s, std::size_t steps, std::size_t tau) {
    std::vector<ag::Index> idx;
    idx.reserve(b * n_s);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t s = 0; s < n_s; ++s) idx.push_back(static_cast<ag::Index>(i * steps + tau));
    return idx;
}

}  // namespace

// ---------------------------------------------------------------- config

std::string to_string(ModelKind m) { return m == ModelKind::GRU ? "GRU" : "DCRNN"; }

ModelKind parse_model(const std::string& name) {
    if (name == "GRU") return ModelKind::GRU;
    if (name == "DCRNN") return ModelKind::DCRNN;
    throw ConfigError("unknown model '" + name + "' (expected GRU or DCRNN)");
}

bool variant_allowed(ModelKind m, Variant v) {
    if (v == Variant::NONE) return true;
    return m == ModelKind::GRU ? temporal_only(v) : uses_sensor(v);
}

void PredictorConfig::validate() const {
    if (!variant_allowed(model, variant))
        throw ConfigError("variant " + to_string(variant) + " is not defined for model " + to_string(model));
    if (p < 1 || q < 1 || d < 1 || hidden < 1) throw ConfigError("predictor: p, q, d, hidden must be positive");
    if (diffusion_steps < 0) throw ConfigError("predictor: diffusion_steps must be >= 0");
    if (batch_size < 1 || epochs < 1 || patience < 1) throw ConfigError("predictor: batch/epochs/patience must be positive");
    if (loss != "mae" && loss != "mse") throw ConfigError("predictor: loss must be mae or mse");
}

void to_json(nlohmann::json& j, const PredictorConfig& c) {
    j = {{"model", to_string(c.model)},
         {"variant", to_string(c.variant)},
         {"p", c.p},
         {"q", c.q},
         {"d", c.d},
         {"hidden", c.hidden},
         {"diffusion_steps", c.diffusion_steps},
         {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"patience", c.patience},
         {"clip_norm", c.clip_norm},
         {"loss", c.loss},
         {"decoder_feedback", c.decoder_feedback},
         {"true_future_embeddings", c.true_future_embeddings},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PredictorConfig& c) {
    if (j.contains("model")) c.model = parse_model(j.at("model").get<std::string>());
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.p = j.value("p", c.p);
    c.q = j.value("q", c.q);
    c.d = j.value("d", c.d);
    c.hidden = j.value("hidden", c.hidden);
    c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.loss = j.value("loss", c.loss);
    c.decoder_feedback = j.value("decoder_feedback", c.decoder_feedback);
    c.true_future_embeddings = j.value("true_future_embeddings", c.true_future_embeddings);
    c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------- diffusion convolution

Var diffusion_conv_graph(const Var& h, const Mat& forward, const Mat& backward, int k, const Var& w) {
    if (w.rows() != (2 * k + 2) * h.cols()) throw ShapeError("diffusion_conv: weight rows must be (2K+2)*c_in");
    std::vector<Var> parts{h};
    Var x = h;
    for (int i = 0; i < k; ++i) parts.push_back(x = ag::graph_mix(x, forward));
    parts.push_back(h);
    x = h;
    for (int i = 0; i < k; ++i) parts.push_back(x = ag::graph_mix(x, backward));
    return ag::matmul(ag::concat_cols(parts), w);
}

Mat diffusion_conv(const Mat& h, const SensorGraph& graph, int k, const DiffusionWeights& w) {
    if (k < 0) throw std::invalid_argument("diffusion_conv: K must be >= 0");
    if (h.rows() != static_cast<ag::Index>(graph.n_s)) throw ShapeError("diffusion_conv: H must have n_s rows");
    if (w.wf.size() != static_cast<std::size_t>(k) + 1 || w.wb.size() != w.wf.size())
        throw ShapeError("diffusion_conv: need K+1 forward and backward weights");
    const ag::Index c_out = w.wf.front().cols();
    Mat stacked((2 * k + 2) * h.cols(), c_out);
    ag::Index r = 0;
    for (const auto* set : {&w.wf, &w.wb})
        for (const Mat& m : *set) {
            if (m.rows() != h.cols() || m.cols() != c_out) throw ShapeError("diffusion_conv: weight shape mismatch");
            stacked.middleRows(r, h.cols()) = m;
            r += h.cols();
        }
    ag::NoGradGuard ng;
    return diffusion_conv_graph(Var::constant(h), forward_transition(graph), backward_transition(graph), k,
                                Var::constant(stacked))
        .value();
}

// ---------------------------------------------------------------- data

PredictorData make_predictor_data(const TrafficSeries& raw, const TrafficScaler& scaler, const Mat& embeddings,
                                  const NdArray& forecasts) {
    raw.validate();
    PredictorData d;
    d.traffic = scaler.transform(raw.values);
    d.scaler = scaler;
    d.timestamps = raw.timestamps;
    d.embeddings = embeddings;
    d.forecasts = forecasts;
    if (embeddings.size() && static_cast<std::size_t>(embeddings.rows()) != raw.steps())
        throw ShapeError("predictor data: embeddings and traffic timelines differ");
    if (forecasts.size() && (forecasts.rank() != 3 || forecasts.dim(0) != raw.steps()))
        throw ShapeError("predictor data: forecast cache must be [T,q,d] on the traffic timeline");
    return d;
}

WindowBatch PredictorData::batch(const std::vector<std::size_t>& anchors, std::size_t begin, std::size_t n, int p, int q,
                                 bool need_embeddings, bool true_future) const {
    const std::size_t ns = sensors(), nf = features(), T = steps();
    const auto P = static_cast<std::size_t>(p), Q = static_cast<std::size_t>(q);
    WindowBatch b;
    b.anchors.assign(anchors.begin() + static_cast<std::ptrdiff_t>(begin),
                     anchors.begin() + static_cast<std::ptrdiff_t>(begin + n));
    b.x_past.assign(P, Mat(static_cast<ag::Index>(n * ns), static_cast<ag::Index>(nf)));
    b.y.assign(Q, Mat(static_cast<ag::Index>(n * ns), static_cast<ag::Index>(nf)));
    b.zt.resize(static_cast<ag::Index>(n * (P + Q)), kTimeWidth);
    b.zv_source = true_future ? Provenance::GroundTruth : Provenance::Forecaster;
    ag::Index d = 0;
    if (need_embeddings) {
        if (embeddings.size() == 0 || forecasts.size() == 0) throw MissingDependencyError("embed", "embeddings or forecasts not attached");
        if (forecasts.dim(1) != Q) throw ShapeError("forecast cache horizon does not match q");
        d = embeddings.cols();
        b.zv.resize(static_cast<ag::Index>(n * (P + Q)), d);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t t = b.anchors[i];
        if (t + 1 < P || t + Q >= T) throw std::out_of_range("predictor window: anchor " + std::to_string(t) + " out of range");
        for (std::size_t k = 0; k < P; ++k)
            for (std::size_t s = 0; s < ns; ++s)
                for (std::size_t f = 0; f < nf; ++f)
                    b.x_past[k](static_cast<ag::Index>(i * ns + s), static_cast<ag::Index>(f)) = traffic.at({t + 1 + k - P, s, f});
        for (std::size_t h = 0; h < Q; ++h)
            for (std::size_t s = 0; s < ns; ++s)
                for (std::size_t f = 0; f < nf; ++f)
                    b.y[h](static_cast<ag::Index>(i * ns + s), static_cast<ag::Index>(f)) = traffic.at({t + 1 + h, s, f});
        b.zt.middleRows(static_cast<ag::Index>(i * (P + Q)), static_cast<ag::Index>(P + Q)) = encode_time(timestamps[t], p, q);
        if (!need_embeddings) continue;
        for (std::size_t k = 0; k < P; ++k)
            b.zv.row(static_cast<ag::Index>(i * (P + Q) + k)) = embeddings.row(static_cast<ag::Index>(t + 1 + k - P));
        for (std::size_t h = 0; h < Q; ++h) {
            auto row = b.zv.row(static_cast<ag::Index>(i * (P + Q) + P + h));
            if (true_future) {
                row = embeddings.row(static_cast<ag::Index>(t + 1 + h));
                continue;
            }
            for (ag::Index k = 0; k < d; ++k) {
                const double v = forecasts.at({t, h, static_cast<std::size_t>(k)});
                if (!std::isfinite(v)) throw NumericalError("forecast cache has no forecast for anchor " + std::to_string(t));
                row(k) = v;
            }
        }
    }
    return b;
}

// ---------------------------------------------------------------- models

TrafficModel::TrafficModel(PredictorConfig cfg, std::size_t n_s, std::size_t n_f) : cfg_(cfg), n_s_(n_s), n_f_(n_f) {
    cfg_.validate();
    if (n_s == 0 || n_f == 0) throw ShapeError("predictor: n_s and n_f must be positive");
}

void TrafficModel::save(const std::filesystem::path& dir, const nlohmann::json& training_meta) const {
    std::filesystem::create_directories(dir);
    store_.save(dir / "weights");
    nlohmann::json j;
    j["architecture"] = to_string(cfg_.model);
    j["config"] = cfg_;
    j["n_s"] = n_s_;
    j["n_f"] = n_f_;
    j["seed"] = cfg_.seed;
    j["checksum"] = hex64(store_.checksum());
    j["training"] = training_meta;
    atomic_write_text(dir / "model.json", j.dump(2));
}

GruPredictor::GruPredictor(PredictorConfig cfg, std::size_t n_s, std::size_t n_f) : TrafficModel(cfg, n_s, n_f) {
    if (cfg_.model != ModelKind::GRU) throw ConfigError("GruPredictor needs model GRU");
    nn::Rng rng(cfg_.seed);
    const int width = static_cast<int>(n_s * n_f);
    const int extra = cfg_.variant == Variant::NONE ? 0 : cfg_.d;
    if (cfg_.variant != Variant::NONE) fusion_.emplace(store_, "stve", cfg_.variant, static_cast<int>(n_s), cfg_.d, rng);
    enc_ = nn::GruCell(store_, "enc.gru", width + extra, cfg_.hidden, rng);
    dec_ = nn::GruCell(store_, "dec.gru", width + extra, cfg_.hidden, rng);
    head_ = nn::Linear(store_, "dec.head", cfg_.hidden, width, rng);
}

std::vector<Var> GruPredictor::run(const std::vector<Var>& x_past, const std::vector<Var>& z_tv) const {
    const bool with_z = cfg_.variant != Variant::NONE;
    if (x_past.size() != static_cast<std::size_t>(cfg_.p)) throw ShapeError("gru: need p input steps");
    if (with_z != !z_tv.empty()) throw std::invalid_argument("gru: variant/embedding mismatch for " + to_string(cfg_.variant));
    if (with_z && z_tv.size() != static_cast<std::size_t>(cfg_.p + cfg_.q)) throw ShapeError("gru: z_tv needs p+q rows");
    const ag::Index b = x_past.front().rows();
    auto with = [&](const Var& x, std::size_t tau) { return with_z ? ag::concat_cols({x, z_tv[tau]}) : x; };
    Var h = Var::constant(zeros(b, cfg_.hidden));
    for (std::size_t k = 0; k < x_past.size(); ++k) h = enc_(with(x_past[k], k), h);
    std::vector<Var> out;
    Var prev = x_past.back();
    for (int t = 0; t < cfg_.q; ++t) {
        h = dec_(with(prev, static_cast<std::size_t>(cfg_.p + t)), h);
        prev = head_(h);
        out.push_back(prev);
    }
    return out;
}

std::vector<Var> GruPredictor::forward(const WindowBatch& batch, bool training) const {
    const auto b = static_cast<ag::Index>(batch.anchors.size());
    const auto width = static_cast<ag::Index>(n_s_ * n_f_);
    std::vector<Var> x;
    for (const Mat& m : batch.x_past) x.push_back(ag::reshape(Var::constant(m), b, width));
    std::vector<Var> z;
    if (fusion_) {
        const std::size_t steps = static_cast<std::size_t>(cfg_.p + cfg_.q);
        Var fused = fusion_->f2(Var::constant(f2_input(cfg_.variant, batch.zt, batch.zv)), training);
        for (std::size_t t = 0; t < steps; ++t) z.push_back(ag::gather_rows(fused, step_rows(batch.anchors.size(), 1, steps, t)));
    }
    std::vector<Var> out;
    for (const Var& y : run(x, z)) out.push_back(ag::reshape(y, b * static_cast<ag::Index>(n_s_), static_cast<ag::Index>(n_f_)));
    return out;
}

Mat GruPredictor::fuse(const Mat& zt, const Mat& zv) const {
    if (!fusion_) throw std::logic_error("variant NONE has no fusion");
    ag::NoGradGuard ng;
    return fusion_->f2(Var::constant(f2_input(cfg_.variant, zt, zv)), false).value();
}

DcrnnPredictor::DcrnnPredictor(PredictorConfig cfg, const SensorGraph& graph, std::size_t n_f)
    : TrafficModel(cfg, graph.n_s, n_f), fwd_(forward_transition(graph)), bwd_(backward_transition(graph)) {
    if (cfg_.model != ModelKind::DCRNN) throw ConfigError("DcrnnPredictor needs model DCRNN");
    graph.validate();
    nn::Rng rng(cfg_.seed);
    if (cfg_.variant != Variant::NONE) fusion_.emplace(store_, "stve", cfg_.variant, static_cast<int>(n_s_), cfg_.d, rng);
    proj_in_ = nn::Linear(store_, "input.f", static_cast<int>(n_f), cfg_.d, rng);
    enc_ = make_cell("enc.dcgru", cfg_.d, rng);
    dec_ = make_cell("dec.dcgru", cfg_.d, rng);
    head_ = nn::Linear(store_, "dec.head", cfg_.hidden, static_cast<int>(n_f), rng);
}

DcrnnPredictor::DcGru DcrnnPredictor::make_cell(const std::string& name, int in, nn::Rng& rng) {
    const int u = cfg_.hidden, k = cfg_.diffusion_steps;
    const int rows = (2 * k + 2) * (in + u);
    DcGru c;
    c.w_gate = store_.add(name + ".gate.w", nn::glorot(rows, 2 * u, rng));
    c.b_gate = store_.add(name + ".gate.b", Mat::Ones(1, 2 * u));
    c.w_cand = store_.add(name + ".cand.w", nn::glorot(rows, u, rng));
    c.b_cand = store_.add(name + ".cand.b", Mat::Zero(1, u));
    return c;
}

Var DcrnnPredictor::cell_step(const DcGru& c, const Var& x, const Var& h) const {
    const int u = cfg_.hidden, k = cfg_.diffusion_steps;
    Var gates = ag::sigmoid(ag::add_row(diffusion_conv_graph(ag::concat_cols({x, h}), fwd_, bwd_, k, c.w_gate), c.b_gate));
    Var r = ag::slice_cols(gates, 0, u);
    Var z = ag::slice_cols(gates, u, u);
    Var cand = ag::tanh(
        ag::add_row(diffusion_conv_graph(ag::concat_cols({x, ag::mul(r, h)}), fwd_, bwd_, k, c.w_cand), c.b_cand));
    return ag::add(ag::mul(z, h), ag::mul(ag::one_minus(z), cand));
}

std::vector<Var> DcrnnPredictor::stve_steps(const Mat& zt, const Mat& zv, std::size_t b, bool training) const {
    const std::size_t steps = static_cast<std::size_t>(cfg_.p + cfg_.q);
    Var temporal = fusion_->f2(Var::constant(f2_input(cfg_.variant, zt, zv)), training);
    Var spatial = fusion_->f1(Var::constant(sensor_encoding(static_cast<int>(n_s_))), training);
    const auto tiled = tile_rows(b, n_s_);
    Var spatial_rows = ag::gather_rows(spatial, tiled);
    std::vector<Var> out;
    for (std::size_t t = 0; t < steps; ++t)
        out.push_back(ag::add(spatial_rows, ag::gather_rows(temporal, step_rows(b, n_s_, steps, t))));
    return out;
}

std::vector<Var> DcrnnPredictor::run(const std::vector<Var>& x_past, const std::vector<Var>& stve) const {
    const bool with_z = cfg_.variant != Variant::NONE;
    if (x_past.size() != static_cast<std::size_t>(cfg_.p)) throw ShapeError("dcrnn: need p input steps");
    if (with_z != !stve.empty()) throw std::invalid_argument("dcrnn: variant/STVE mismatch for " + to_string(cfg_.variant));
    if (with_z && stve.size() != static_cast<std::size_t>(cfg_.p + cfg_.q)) throw ShapeError("dcrnn: STVE needs p+q steps");
    const ag::Index rows = x_past.front().rows();
    if (rows % static_cast<ag::Index>(n_s_) != 0) throw ShapeError("dcrnn: rows must be a multiple of n_s");
    Var h = Var::constant(zeros(rows, cfg_.hidden));
    for (std::size_t k = 0; k < x_past.size(); ++k) {
        Var u = proj_in_(x_past[k]);
        if (with_z) u = ag::add(u, stve[k]);
        h = cell_step(enc_, u, h);
    }
    std::vector<Var> out;
    Var prev = x_past.back();
    const Var go = Var::constant(zeros(rows, cfg_.d));
    for (int t = 0; t < cfg_.q; ++t) {
        Var u = with_z ? stve[static_cast<std::size_t>(cfg_.p + t)] : go;
        if (cfg_.decoder_feedback) u = ag::add(u, proj_in_(prev));
        h = cell_step(dec_, u, h);
        prev = head_(h);
        out.push_back(prev);
    }
    return out;
}

std::vector<Var> DcrnnPredictor::forward(const WindowBatch& batch, bool training) const {
    std::vector<Var> x;
    for (const Mat& m : batch.x_past) x.push_back(Var::constant(m));
    std::vector<Var> z;
    if (fusion_) z = stve_steps(batch.zt, batch.zv, batch.anchors.size(), training);
    return run(x, z);
}

STVETensor DcrnnPredictor::stve(const Mat& zt, const Mat& zv) const {
    if (!fusion_) throw std::logic_error("variant NONE has no STVE");
    return build_stve(sensor_encoding(static_cast<int>(n_s_)), zt, zv, *fusion_);
}

std::pair<std::vector<Mat>, std::vector<Mat>> DcrnnPredictor::cell_inputs(const NdArray& x_past, const STVETensor* z) const {
    if (x_past.rank() != 3 || x_past.dim(0) != static_cast<std::size_t>(cfg_.p) || x_past.dim(1) != n_s_ || x_past.dim(2) != n_f_)
        throw ShapeError("dcrnn: x_past must be [p, n_s, n_f]");
    ag::NoGradGuard ng;
    std::vector<Mat> enc, dec;
    const auto ns = static_cast<ag::Index>(n_s_), d = static_cast<ag::Index>(cfg_.d);
    auto z_step = [&](std::size_t t) {
        Mat m(ns, d);
        for (ag::Index s = 0; s < ns; ++s)
            for (ag::Index k = 0; k < d; ++k)
                m(s, k) = z->values.at({static_cast<std::size_t>(s), t, static_cast<std::size_t>(k)});
        return m;
    };
    for (std::size_t k = 0; k < static_cast<std::size_t>(cfg_.p); ++k) {
        Mat xk = Eigen::Map<const Mat>(x_past.step(k), ns, static_cast<ag::Index>(n_f_));
        Var u = proj_in_(Var::constant(xk));
        if (z) u = ag::add(u, Var::constant(z_step(k)));
        enc.push_back(u.value());
    }
    for (std::size_t t = 0; t < static_cast<std::size_t>(cfg_.q); ++t)
        dec.push_back(z ? z_step(static_cast<std::size_t>(cfg_.p) + t) : zeros(ns, d));
    return {enc, dec};
}

std::unique_ptr<TrafficModel> make_predictor(const PredictorConfig& cfg, const SensorGraph& graph, std::size_t n_f) {
    if (cfg.model == ModelKind::GRU) return std::make_unique<GruPredictor>(cfg, graph.n_s, n_f);
    return std::make_unique<DcrnnPredictor>(cfg, graph, n_f);
}

std::unique_ptr<TrafficModel> load_predictor(const std::filesystem::path& dir, const SensorGraph& graph) {
    const auto j = nlohmann::json::parse(read_text(dir / "model.json"));
    const auto cfg = j.at("config").get<PredictorConfig>();
    if (j.at("n_s").get<std::size_t>() != graph.n_s) throw ShapeError("checkpoint sensor count differs from graph");
    auto m = make_predictor(cfg, graph, j.at("n_f").get<std::size_t>());
    m->params().load(dir / "weights");
    return m;
}

// ---------------------------------------------------------------- single-window API

Prediction gru_predict(const NdArray& x_past, const std::optional<Mat>& z_tv, const GruPredictor& model, HourStamp anchor) {
    const auto& c = model.config();
    if (x_past.rank() != 3 || x_past.dim(0) != static_cast<std::size_t>(c.p) || x_past.dim(1) != model.sensors() ||
        x_past.dim(2) != model.features())
        throw ShapeError("gru_predict: x_past must be [p, n_s, n_f]");
    if ((c.variant != Variant::NONE) != z_tv.has_value())
        throw std::invalid_argument("gru_predict: z_tv must be supplied exactly when the variant is not NONE");
    ag::NoGradGuard ng;
    const auto width = static_cast<ag::Index>(x_past.stride0());
    std::vector<Var> x, z;
    for (std::size_t k = 0; k < x_past.dim(0); ++k) x.push_back(Var::constant(Eigen::Map<const Mat>(x_past.step(k), 1, width)));
    if (z_tv) {
        if (z_tv->rows() != c.p + c.q || z_tv->cols() != c.d) throw ShapeError("gru_predict: z_tv must be [p+q, d]");
        for (ag::Index t = 0; t < z_tv->rows(); ++t) z.push_back(Var::constant(z_tv->row(t)));
    }
    const auto out = model.run(x, z);
    Prediction p{NdArray({static_cast<std::size_t>(c.q), model.sensors(), model.features()}), anchor};
    for (std::size_t t = 0; t < out.size(); ++t) std::copy(out[t].value().data(), out[t].value().data() + width, p.values.step(t));
    return p;
}

Prediction dcrnn_predict(const NdArray& x_past, const SensorGraph& graph, const STVETensor* z_stv,
                         const DcrnnPredictor& model, HourStamp anchor) {
    const auto& c = model.config();
    if (graph.n_s != model.sensors())
        throw ShapeError("dcrnn_predict: graph has " + std::to_string(graph.n_s) + " sensors, model " +
                         std::to_string(model.sensors()));
    if ((c.variant != Variant::NONE) != (z_stv != nullptr))
        throw std::invalid_argument("dcrnn_predict: STVE must be supplied exactly when the variant is not NONE");
    if (z_stv && z_stv->values.shape != std::vector<std::size_t>{model.sensors(), static_cast<std::size_t>(c.p + c.q),
                                                                  static_cast<std::size_t>(c.d)})
        throw ShapeError("dcrnn_predict: STVE must be [n_s, p+q, d]");
    if (x_past.rank() != 3 || x_past.dim(0) != static_cast<std::size_t>(c.p) || x_past.dim(1) != model.sensors() ||
        x_past.dim(2) != model.features())
        throw ShapeError("dcrnn_predict: x_past must be [p, n_s, n_f]");
    ag::NoGradGuard ng;
    const auto ns = static_cast<ag::Index>(model.sensors()), nf = static_cast<ag::Index>(model.features());
    std::vector<Var> x, z;
    for (std::size_t k = 0; k < x_past.dim(0); ++k) x.push_back(Var::constant(Eigen::Map<const Mat>(x_past.step(k), ns, nf)));
    if (z_stv)
        for (std::size_t t = 0; t < static_cast<std::size_t>(c.p + c.q); ++t) {
            Mat m(ns, c.d);
            for (ag::Index s = 0; s < ns; ++s)
                for (ag::Index k = 0; k < c.d; ++k)
                    m(s, k) = z_stv->values.at({static_cast<std::size_t>(s), t, static_cast<std::size_t>(k)});
            z.push_back(Var::constant(m));
        }
    const auto out = model.run(x, z);
    Prediction p{NdArray({static_cast<std::size_t>(c.q), model.sensors(), model.features()}), anchor};
    for (std::size_t t = 0; t < out.size(); ++t)
        std::copy(out[t].value().data(), out[t].value().data() + ns * nf, p.values.step(t));
    return p;
}

std::pair<std::vector<Mat>, std::vector<Mat>> adapter_inject(const std::vector<Mat>& encoder_inputs,
                                                             const std::vector<Mat>& decoder_inputs,
                                                             const STVETensor& z_stv) {
    const auto& sh = z_stv.values.shape;
    if (sh.size() != 3 || sh[1] != encoder_inputs.size() + decoder_inputs.size())
        throw ShapeError("adapter_inject: STVE must be [n_s, p+q, d] with p+q matching the inputs");
    const auto ns = static_cast<ag::Index>(sh[0]), d = static_cast<ag::Index>(sh[2]);
    auto step = [&](std::size_t t) {
        Mat m(ns, d);
        for (ag::Index s = 0; s < ns; ++s)
            for (ag::Index k = 0; k < d; ++k) m(s, k) = z_stv.values.at({static_cast<std::size_t>(s), t, static_cast<std::size_t>(k)});
        return m;
    };
    std::pair<std::vector<Mat>, std::vector<Mat>> out;
    for (std::size_t t = 0; t < encoder_inputs.size(); ++t) {
        if (encoder_inputs[t].rows() != ns || encoder_inputs[t].cols() != d)
            throw ShapeError("adapter_inject: encoder input width " + std::to_string(encoder_inputs[t].cols()) + " != " + std::to_string(d));
        out.first.push_back(encoder_inputs[t] + step(t));
    }
    for (std::size_t t = 0; t < decoder_inputs.size(); ++t) {
        if (decoder_inputs[t].rows() != ns || decoder_inputs[t].cols() != d)
            throw ShapeError("adapter_inject: decoder input width " + std::to_string(decoder_inputs[t].cols()) + " != " + std::to_string(d));
        out.second.push_back(step(encoder_inputs.size() + t));
    }
    return out;
}

// ---------------------------------------------------------------- training and evaluation

namespace {

Var batch_loss(const std::vector<Var>& out, const std::vector<Mat>& y, const std::string& kind) {
    std::vector<Var> terms;
    for (std::size_t h = 0; h < out.size(); ++h) {
        Var diff = ag::sub(out[h], Var::constant(y[h]));
        terms.push_back(kind == "mse" ? ag::mean(ag::square(diff)) : ag::mean(ag::abs(diff)));
    }
    Var total = terms.front();
    for (std::size_t h = 1; h < terms.size(); ++h) total = ag::add(total, terms[h]);
    return ag::scale(total, 1.0 / static_cast<double>(terms.size()));
}

std::vector<int> all_horizons(int q) {
    std::vector<int> h;
    for (int i = 1; i <= q; ++i) h.push_back(i);
    return h;
}

std::vector<NdArray> truth_from_data(const PredictorData& data, const std::vector<std::size_t>& anchors, int q) {
    std::vector<NdArray> out;
    for (std::size_t t : anchors) out.push_back(data.scaler.inverse(data.traffic.slice0(t + 1, static_cast<std::size_t>(q))));
    return out;
}

}  // namespace

std::vector<Prediction> predict(const TrafficModel& model, const PredictorData& data, const std::vector<std::size_t>& anchors) {
    const auto& c = model.config();
    const bool need = uses_vibrancy(c.variant);
    std::vector<Prediction> out;
    ag::NoGradGuard ng;
    const std::size_t bs = 256, ns = model.sensors(), nf = model.features();
    for (std::size_t i = 0; i < anchors.size(); i += bs) {
        const std::size_t n = std::min(bs, anchors.size() - i);
        const WindowBatch b = data.batch(anchors, i, n, c.p, c.q, need, false);
        if (b.zv_source != Provenance::Forecaster) throw std::logic_error("evaluation must use forecast embeddings");
        const auto y = model.forward(b, false);
        for (std::size_t k = 0; k < n; ++k) {
            Prediction p{NdArray({static_cast<std::size_t>(c.q), ns, nf}), data.timestamps[b.anchors[k]]};
            for (std::size_t h = 0; h < y.size(); ++h)
                std::copy(y[h].value().data() + k * ns * nf, y[h].value().data() + (k + 1) * ns * nf, p.values.step(h));
            p.values = data.scaler.inverse(p.values);
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::vector<NdArray> truth_windows(const TrafficSeries& raw, const std::vector<std::size_t>& anchors, int q) {
    std::vector<NdArray> out;
    for (std::size_t t : anchors) {
        if (t + static_cast<std::size_t>(q) >= raw.steps()) throw std::out_of_range("truth window past the end of the series");
        out.push_back(raw.values.slice0(t + 1, static_cast<std::size_t>(q)));
    }
    return out;
}

MaeTable evaluate_mae(const std::vector<Prediction>& preds, const std::vector<NdArray>& truth, const std::vector<int>& horizons) {
    if (preds.size() != truth.size()) throw ShapeError("evaluate_mae: prediction and truth counts differ");
    if (preds.empty()) throw std::invalid_argument("evaluate_mae: no windows");
    const std::size_t q = preds.front().values.dim(0);
    MaeTable out;
    for (int h : horizons) {
        if (h < 1 || static_cast<std::size_t>(h) > q)
            throw std::out_of_range("evaluate_mae: horizon " + std::to_string(h) + " outside [1," + std::to_string(q) + "]");
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t w = 0; w < preds.size(); ++w) {
            const NdArray& p = preds[w].values;
            if (p.shape != truth[w].shape) throw ShapeError("evaluate_mae: window shape mismatch");
            const double* a = p.step(static_cast<std::size_t>(h - 1));
            const double* b = truth[w].step(static_cast<std::size_t>(h - 1));
            for (std::size_t k = 0; k < p.stride0(); ++k) sum += std::abs(a[k] - b[k]);
            count += p.stride0();
        }
        out[h] = sum / static_cast<double>(count);
    }
    return out;
}

TrainedPredictor train_predictor(const PredictorData& data, const SensorGraph& graph,
                                 const std::vector<std::size_t>& train_anchors,
                                 const std::vector<std::size_t>& val_anchors, const PredictorConfig& cfg) {
    cfg.validate();
    if (train_anchors.empty() || val_anchors.empty()) throw std::invalid_argument("train_predictor: empty anchor set");
    if (graph.n_s != data.sensors()) throw ShapeError("train_predictor: graph/sensor-count mismatch");
    const bool need = uses_vibrancy(cfg.variant);
    if (need && data.embeddings.cols() != cfg.d) throw ShapeError("train_predictor: embedding width != d");

    TrainedPredictor out{make_predictor(cfg, graph, data.features()), {}};
    TrafficModel& model = *out.model;
    nn::Adam opt(model.params().trainable(), cfg.learning_rate, cfg.clip_norm);
    nn::Rng rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
    std::vector<std::size_t> order = train_anchors;
    const auto val_truth = truth_from_data(data, val_anchors, cfg.q);
    const auto horizons = all_horizons(cfg.q);
    std::vector<Mat> best;
    int since_best = 0;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double total = 0.0;
        for (std::size_t i = 0; i < order.size(); i += bs) {
            const std::size_t n = std::min(bs, order.size() - i);
            const WindowBatch b = data.batch(order, i, n, cfg.p, cfg.q, need, cfg.true_future_embeddings);
            Var loss = batch_loss(model.forward(b, true), b.y, cfg.loss);
            const double v = loss.scalar();
            if (!std::isfinite(v))
                throw NumericalError("train_predictor: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(i / bs) + " (" + to_string(cfg.model) + "/" + to_string(cfg.variant) + ")");
            opt.zero_grad();
            loss.backward();
            opt.step();
            total += v * static_cast<double>(n);
        }
        out.history.train_loss.push_back(total / static_cast<double>(order.size()));
        const MaeTable mae = evaluate_mae(predict(model, data, val_anchors), val_truth, horizons);
        double mean = 0.0;
        for (const auto& [h, v] : mae) mean += v / static_cast<double>(mae.size());
        if (!std::isfinite(mean)) throw NumericalError("train_predictor: non-finite validation MAE at epoch " + std::to_string(epoch));
        out.history.val_mae.push_back(mean);
        if (out.history.best_epoch < 0 || mean < out.history.best_val_mae) {
            out.history.best_epoch = epoch;
            out.history.best_val_mae = mean;
            best = model.params().snapshot();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.params().restore(best);
    model.params().zero_grad();
    return out;
}

}  // namespace vf
