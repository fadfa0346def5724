#include "vf/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vf/core/array_io.hpp"
#include "vf/core/errors.hpp"
#include "vf/core/hash.hpp"

namespace vf {

void ForecasterConfig::validate() const {
    if (p < 1 || q < 1) throw ConfigError("forecaster: p and q must be positive");
    if (hidden < 1 || batch_size < 1 || epochs < 1 || patience < 1) throw ConfigError("forecaster: sizes must be positive");
    if (learning_rate <= 0.0) throw ConfigError("forecaster: learning_rate must be positive");
    if (final_lr_fraction <= 0.0 || final_lr_fraction > 1.0) throw ConfigError("forecaster: final_lr_fraction must be in (0,1]");
}

void to_json(nlohmann::json& j, const ForecasterConfig& c) {
    j = {{"p", c.p},
         {"q", c.q},
         {"hidden", c.hidden},
         {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"patience", c.patience},
         {"clip_norm", c.clip_norm},
         {"final_lr_fraction", c.final_lr_fraction},
         {"scheduled_sampling", c.scheduled_sampling},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ForecasterConfig& c) {
    c.p = j.value("p", c.p);
    c.q = j.value("q", c.q);
    c.hidden = j.value("hidden", c.hidden);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
    c.scheduled_sampling = j.value("scheduled_sampling", c.scheduled_sampling);
    c.seed = j.value("seed", c.seed);
}

Forecaster::Forecaster(ForecasterConfig cfg, int latent_dim) : cfg_(cfg), d_(latent_dim) {
    cfg_.validate();
    if (d_ < 1) throw ConfigError("forecaster: latent_dim must be positive");
    nn::Rng rng(cfg_.seed);
    enc_ = nn::LstmCell(store_, "enc.lstm", d_, cfg_.hidden, rng);
    dec_ = nn::LstmCell(store_, "dec.lstm", d_, cfg_.hidden, rng);
    head_ = nn::Linear(store_, "dec.head", cfg_.hidden, d_, rng);
}

std::vector<Var> Forecaster::forward_graph(const std::vector<Var>& history, const std::vector<Mat>* teacher,
                                           double teacher_ratio, nn::Rng* rng) const {
    if (history.size() != static_cast<std::size_t>(cfg_.p))
        throw ShapeError("forecaster: history length " + std::to_string(history.size()) + " != p=" + std::to_string(cfg_.p));
    const ag::Index b = history.front().rows();
    for (const Var& x : history)
        if (x.cols() != d_ || x.rows() != b) throw ShapeError("forecaster: history step has wrong shape");
    const bool forcing = teacher && teacher_ratio > 0.0;
    if (forcing && (teacher->size() + 1 < static_cast<std::size_t>(cfg_.q) || !rng))
        throw std::invalid_argument("forecaster: teacher forcing needs q targets and an rng");

    Var h = Var::constant(Mat::Zero(b, cfg_.hidden));
    Var c = h;
    for (const Var& x : history) std::tie(h, c) = enc_(x, h, c);

    std::vector<Var> out;
    Var in = history.back();
    for (int t = 0; t < cfg_.q; ++t) {
        std::tie(h, c) = dec_(in, h, c);
        Var z = head_(h);
        out.push_back(z);
        if (t + 1 == cfg_.q) break;
        if (!forcing) {
            in = z;
            continue;
        }
        Mat pick(b, d_);
        for (ag::Index r = 0; r < b; ++r) pick.row(r).setConstant(rng->uniform() < teacher_ratio ? 1.0 : 0.0);
        const Mat& truth = (*teacher)[static_cast<std::size_t>(t)];
        in = ag::add(Var::constant(pick.cwiseProduct(truth)), ag::mul(Var::constant(Mat::Ones(b, d_) - pick), z));
    }
    return out;
}

Mat Forecaster::forecast_batch(const Mat& history) const {
    if (history.cols() != static_cast<ag::Index>(cfg_.p) * d_) throw ShapeError("forecaster: history width mismatch");
    ag::NoGradGuard ng;
    std::vector<Var> steps;
    for (int k = 0; k < cfg_.p; ++k) steps.push_back(Var::constant(history.middleCols(k * d_, d_)));
    const auto out = forward_graph(steps);
    Mat res(history.rows(), static_cast<ag::Index>(cfg_.q) * d_);
    for (int t = 0; t < cfg_.q; ++t) res.middleCols(t * d_, d_) = out[static_cast<std::size_t>(t)].value();
    return res;
}

void Forecaster::save(const std::filesystem::path& dir, const nlohmann::json& training_meta) const {
    std::filesystem::create_directories(dir);
    store_.save(dir / "weights");
    nlohmann::json j;
    j["architecture"] = "lstm-seq2seq";
    j["config"] = cfg_;
    j["d"] = d_;
    j["seed"] = cfg_.seed;
    j["checksum"] = hex64(store_.checksum());
    j["training"] = training_meta;
    atomic_write_text(dir / "model.json", j.dump(2));
}

Forecaster Forecaster::load(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(read_text(dir / "model.json"));
    Forecaster f(j.at("config").get<ForecasterConfig>(), j.at("d").get<int>());
    f.store_.load(dir / "weights");
    return f;
}

Mat forecast_embeddings(const Mat& history, const Forecaster& model) {
    const auto& c = model.config();
    if (history.rows() != c.p || history.cols() != model.latent_dim())
        throw ShapeError("forecast_embeddings: history must be [" + std::to_string(c.p) + "," +
                         std::to_string(model.latent_dim()) + "], got [" + std::to_string(history.rows()) + "," +
                         std::to_string(history.cols()) + "]");
    Mat flat = Eigen::Map<const Mat>(history.data(), 1, history.size());
    Mat out = model.forecast_batch(flat);
    return Eigen::Map<const Mat>(out.data(), c.q, model.latent_dim());
}

Var forecaster_loss_graph(const Var& predicted, const Mat& targets, const Mat& mask, const VaeModel& vae) {
    if (targets.rows() != predicted.rows()) throw ShapeError("forecaster_loss: prediction/target count mismatch");
    const double active = mask.sum();
    if (active <= 0.0) throw std::invalid_argument("forecaster_loss: no active cells");
    Var decoded = vae.decode_graph(predicted, mask);
    Var diff = ag::mul(ag::sub(Var::constant(targets), decoded), Var::constant(mask.replicate(targets.rows(), 1)));
    return ag::scale(ag::sum(ag::square(diff)), 1.0 / (active * static_cast<double>(targets.rows())));
}

double forecaster_loss(const Mat& predicted_z, const NdArray& target_c, const ActivityMask& mask, const VaeModel& vae) {
    const auto& c = vae.config();
    if (target_c.rank() != 4 || target_c.dim(0) != static_cast<std::size_t>(predicted_z.rows()))
        throw ShapeError("forecaster_loss: target must be [q,H,W,n_c] with q matching predictions");
    if (target_c.dim(1) != mask.height || target_c.dim(2) != mask.width) throw ShapeError("forecaster_loss: mask shape mismatch");
    ag::NoGradGuard ng;
    return forecaster_loss_graph(Var::constant(predicted_z), frames_to_rows(target_c), mask_row(mask, c.channels), vae)
        .scalar();
}

std::vector<std::size_t> valid_anchors(const std::vector<std::size_t>& candidates, std::size_t p, std::size_t q,
                                       std::size_t end) {
    std::vector<std::size_t> out;
    for (std::size_t t : candidates)
        if (t + 1 >= p && t + q < end) out.push_back(t);
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

Mat history_rows(const EmbeddingSeries& emb, const std::vector<std::size_t>& anchors, std::size_t begin, std::size_t n,
                 int p) {
    const ag::Index d = emb.z.cols();
    Mat h(static_cast<ag::Index>(n), p * d);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t t = anchors[begin + i];
        for (int k = 0; k < p; ++k)
            h.block(static_cast<ag::Index>(i), k * d, 1, d) = emb.z.row(static_cast<ag::Index>(t + 1 + static_cast<std::size_t>(k)) - p);
    }
    return h;
}

std::vector<std::size_t> shifted(const std::vector<std::size_t>& anchors, std::size_t begin, std::size_t n, std::size_t h) {
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = anchors[begin + i] + h;
    return out;
}

double active_mse_rows(const Mat& a, const Mat& b, const Mat& mask) {
    const Mat d = (a - b).array().rowwise() * mask.row(0).array();
    return d.squaredNorm() / (mask.sum() * static_cast<double>(a.rows()));
}

}  // namespace

ForecastEval evaluate_forecaster(const Forecaster& model, const EmbeddingSeries& emb, const GridSeries& normalized,
                                 const ActivityMask& mask, const VaeModel& vae, const std::vector<std::size_t>& anchors) {
    if (anchors.empty()) throw std::invalid_argument("evaluate_forecaster: no anchors");
    const auto& c = model.config();
    const int d = model.latent_dim();
    const Mat m = mask_row(mask, vae.config().channels);
    ForecastEval ev;
    ev.pixel_mse.assign(static_cast<std::size_t>(c.q), 0.0);
    ev.embed_mse.assign(static_cast<std::size_t>(c.q), 0.0);
    const std::size_t bs = 256;
    for (std::size_t i = 0; i < anchors.size(); i += bs) {
        const std::size_t n = std::min(bs, anchors.size() - i);
        const Mat pred = model.forecast_batch(history_rows(emb, anchors, i, n, c.p));
        for (int h = 0; h < c.q; ++h) {
            const auto idx = shifted(anchors, i, n, static_cast<std::size_t>(h) + 1);
            const Mat zh = pred.middleCols(h * d, d);
            const Mat decoded = vae.decode_rows(zh, mask);
            ev.pixel_mse[static_cast<std::size_t>(h)] += active_mse_rows(grid_rows(normalized, idx), decoded, m) * static_cast<double>(n);
            Mat zt(static_cast<ag::Index>(n), d);
            for (std::size_t k = 0; k < n; ++k) zt.row(static_cast<ag::Index>(k)) = emb.z.row(static_cast<ag::Index>(idx[k]));
            ev.embed_mse[static_cast<std::size_t>(h)] += (zh - zt).squaredNorm() / d;
        }
    }
    for (double& v : ev.pixel_mse) v /= static_cast<double>(anchors.size());
    for (double& v : ev.embed_mse) v /= static_cast<double>(anchors.size());
    return ev;
}

std::vector<double> persistence_mse(const GridSeries& normalized, const ActivityMask& mask,
                                    const std::vector<std::size_t>& anchors, std::size_t q) {
    if (anchors.empty()) throw std::invalid_argument("persistence_mse: no anchors");
    const Mat m = mask_row(mask, static_cast<int>(normalized.channels()));
    const Mat last = grid_rows(normalized, anchors);
    std::vector<double> out;
    for (std::size_t h = 1; h <= q; ++h)
        out.push_back(active_mse_rows(grid_rows(normalized, shifted(anchors, 0, anchors.size(), h)), last, m));
    return out;
}

TrainedForecaster train_forecaster(const EmbeddingSeries& emb, const GridSeries& normalized, const ActivityMask& mask,
                                   const VaeModel& vae, const std::vector<std::size_t>& train_anchors,
                                   const std::vector<std::size_t>& val_anchors, const ForecasterConfig& cfg) {
    if (train_anchors.empty() || val_anchors.empty()) throw std::invalid_argument("train_forecaster: empty anchor set");
    if (static_cast<std::size_t>(emb.z.rows()) != normalized.steps()) throw ShapeError("train_forecaster: embeddings and grid differ in length");
    const int d = static_cast<int>(emb.z.cols());
    if (d != vae.config().latent_dim) throw ShapeError("train_forecaster: embedding width != VAE latent dim");
    for (std::size_t t : train_anchors)
        if (t + 1 < static_cast<std::size_t>(cfg.p) || t + static_cast<std::size_t>(cfg.q) >= normalized.steps())
            throw std::out_of_range("train_forecaster: anchor " + std::to_string(t) + " lacks a full window");

    // Private frozen copy: the caller's weights are never touched, not even their gradients.
    VaeModel frozen = vae.clone();
    frozen.params().set_trainable(false);
    const Mat m = mask_row(mask, vae.config().channels);

    TrainedForecaster out{Forecaster(cfg, d), {}};
    Forecaster& model = out.model;
    nn::Adam opt(model.params().trainable(), cfg.learning_rate, cfg.clip_norm);
    nn::Rng rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
    std::vector<std::size_t> order = train_anchors;
    std::vector<Mat> best;
    double best_score = std::numeric_limits<double>::infinity();
    int since_best = 0;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double ratio =
            cfg.scheduled_sampling && cfg.epochs > 1 ? 1.0 - static_cast<double>(epoch) / (cfg.epochs - 1) : 0.0;
        const double progress = cfg.epochs > 1 ? static_cast<double>(epoch) / (cfg.epochs - 1) : 0.0;
        opt.set_lr(cfg.learning_rate * (1.0 - progress * (1.0 - cfg.final_lr_fraction)));
        rng.shuffle(order.begin(), order.end());
        double total = 0.0;
        for (std::size_t i = 0; i < order.size(); i += bs) {
            const std::size_t n = std::min(bs, order.size() - i);
            const Mat hist = history_rows(emb, order, i, n, cfg.p);
            std::vector<Var> steps;
            for (int k = 0; k < cfg.p; ++k) steps.push_back(Var::constant(hist.middleCols(k * d, d)));
            std::vector<Mat> teacher;
            std::vector<std::size_t> target_steps;
            for (int h = 1; h <= cfg.q; ++h) {
                const auto idx = shifted(order, i, n, static_cast<std::size_t>(h));
                Mat zt(static_cast<ag::Index>(n), d);
                for (std::size_t k = 0; k < n; ++k) zt.row(static_cast<ag::Index>(k)) = emb.z.row(static_cast<ag::Index>(idx[k]));
                teacher.push_back(std::move(zt));
                target_steps.insert(target_steps.end(), idx.begin(), idx.end());
            }
            const auto preds = model.forward_graph(steps, &teacher, ratio, &rng);
            Var loss = forecaster_loss_graph(ag::concat_rows(preds), grid_rows(normalized, target_steps), m, frozen);
            const double v = loss.scalar();
            if (!std::isfinite(v))
                throw NumericalError("train_forecaster: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(i / bs));
            opt.zero_grad();
            loss.backward();
            opt.step();
            total += v * static_cast<double>(n);
        }
        out.history.train_loss.push_back(total / static_cast<double>(order.size()));
        out.history.teacher_ratio.push_back(ratio);
        const ForecastEval ev = evaluate_forecaster(model, emb, normalized, mask, frozen, val_anchors);
        double pix = 0.0, emb_mse = 0.0;
        for (std::size_t h = 0; h < ev.pixel_mse.size(); ++h) {
            pix += ev.pixel_mse[h] / static_cast<double>(ev.pixel_mse.size());
            emb_mse += ev.embed_mse[h] / static_cast<double>(ev.embed_mse.size());
        }
        if (!std::isfinite(pix)) throw NumericalError("train_forecaster: non-finite validation loss at epoch " + std::to_string(epoch));
        out.history.val_pixel_mse.push_back(pix);
        out.history.val_embed_mse.push_back(emb_mse);
        if (pix < best_score) {
            best_score = pix;
            out.history.best_epoch = epoch;
            out.history.best = ev;
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

NdArray forecast_all(const Forecaster& model, const EmbeddingSeries& emb) {
    const auto& c = model.config();
    const int d = model.latent_dim();
    if (emb.z.cols() != d) throw ShapeError("forecast_all: embedding width mismatch");
    const auto T = static_cast<std::size_t>(emb.z.rows());
    NdArray out({T, static_cast<std::size_t>(c.q), static_cast<std::size_t>(d)}, std::numeric_limits<double>::quiet_NaN());
    std::vector<std::size_t> anchors;
    for (std::size_t t = static_cast<std::size_t>(c.p) - 1; t < T; ++t) anchors.push_back(t);
    const std::size_t bs = 512;
    const std::size_t row = static_cast<std::size_t>(c.q * d);
    for (std::size_t i = 0; i < anchors.size(); i += bs) {
        const std::size_t n = std::min(bs, anchors.size() - i);
        const Mat pred = model.forecast_batch(history_rows(emb, anchors, i, n, c.p));
        for (std::size_t k = 0; k < n; ++k)
            std::copy(pred.row(static_cast<ag::Index>(k)).data(), pred.row(static_cast<ag::Index>(k)).data() + row,
                      out.data.begin() + static_cast<std::ptrdiff_t>(anchors[i + k] * row));
    }
    return out;
}

void write_forecasts(const std::filesystem::path& base, const NdArray& cache, const EmbeddingSeries& emb) {
    ArrayMeta meta;
    if (!emb.timestamps.empty()) meta.start_time = emb.timestamps.front();
    write_f32(base, cache, meta);
}

NdArray read_forecasts(const std::filesystem::path& base) {
    NdArray a = read_f32(base);
    if (a.rank() != 3) throw ShapeError("forecast cache must be [T,q,d]");
    return a;
}

}  // namespace vf
