#include "vf/vae.hpp"

#include <cmath>
#include <numeric>

#include "vf/core/array_io.hpp"
#include "vf/core/errors.hpp"
#include "vf/core/hash.hpp"

namespace vf {

namespace {

constexpr int kKernel = 4;

Mat conv_init(int out_c, int fan_in, int fan_out, nn::Rng& rng) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    Mat w(out_c, fan_in);
    for (ag::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-a, a);
    return w;
}

Mat frame_row(const GridSeries& g, std::size_t t) {
    const std::size_t h = g.height(), w = g.width(), c = g.channels();
    Mat row(1, static_cast<ag::Index>(h * w * c));
    const double* f = g.values.step(t);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < h * w; ++k) row(0, static_cast<ag::Index>(ch * h * w + k)) = f[k * c + ch];
    return row;
}

Mat batch_rows(const GridSeries& g, const std::vector<std::size_t>& idx, std::size_t begin, std::size_t n) {
    Mat x(static_cast<ag::Index>(n), static_cast<ag::Index>(g.frame_size()));
    for (std::size_t i = 0; i < n; ++i) x.row(static_cast<ag::Index>(i)) = frame_row(g, idx[begin + i]);
    return x;
}

void check_mask(const ActivityMask& mask, const VaeConfig& cfg) {
    if (mask.height != static_cast<std::size_t>(cfg.height) || mask.width != static_cast<std::size_t>(cfg.width) ||
        mask.mask.size() != mask.height * mask.width)
        throw ShapeError("vae: mask shape " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " does not match model grid " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
}

}  // namespace

int VaeConfig::blocks() const {
    int n = 0;
    for (int s = std::min(height, width); s > 4; s /= 2) ++n;
    return n;
}

std::vector<int> VaeConfig::resolved_channels() const {
    if (!conv_channels.empty()) return conv_channels;
    std::vector<int> out;
    for (int i = 0; i < blocks(); ++i) out.push_back(std::min(16 << i, 64));
    return out;
}

void VaeConfig::validate() const {
    if (height < 8 || width < 8) throw ConfigError("vae: grid must be at least 8x8");
    int h = height, w = width;
    for (int i = 0; i < blocks(); ++i) {
        if (h % 2 || w % 2) throw ConfigError("vae: grid sides must halve evenly down to 4");
        h /= 2;
        w /= 2;
    }
    if (std::min(h, w) != 4) throw ConfigError("vae: grid does not reduce to a 4-wide map");
    if (!conv_channels.empty() && static_cast<int>(conv_channels.size()) != blocks())
        throw ConfigError("vae: conv_channels needs " + std::to_string(blocks()) + " entries");
    if (latent_dim < 1 || channels < 1 || decoder_features < 1) throw ConfigError("vae: sizes must be positive");
    if (beta < 0.0) throw ConfigError("vae: beta must be >= 0");
    if (batch_size < 1 || epochs < 1 || patience < 1) throw ConfigError("vae: batch/epochs/patience must be positive");
}

void to_json(nlohmann::json& j, const VaeConfig& c) {
    j = {{"height", c.height},          {"width", c.width},
         {"channels", c.channels},      {"latent_dim", c.latent_dim},
         {"conv_channels", c.resolved_channels()},
         {"decoder_features", c.decoder_features},
         {"beta", c.beta},              {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size},  {"epochs", c.epochs},
         {"patience", c.patience},      {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, VaeConfig& c) {
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.channels = j.value("channels", c.channels);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.conv_channels = j.value("conv_channels", c.conv_channels);
    c.decoder_features = j.value("decoder_features", c.decoder_features);
    c.beta = j.value("beta", c.beta);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
}

Mat mask_row(const ActivityMask& mask, int channels) {
    const auto hw = static_cast<ag::Index>(mask.mask.size());
    Mat m(1, hw * channels);
    for (int c = 0; c < channels; ++c)
        for (ag::Index k = 0; k < hw; ++k) m(0, c * hw + k) = mask.mask[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
    return m;
}

Mat frames_to_rows(const NdArray& frames) {
    if (frames.rank() != 4) throw ShapeError("frames_to_rows: expected [B,H,W,n_c], got " + frames.shape_string());
    const std::size_t b = frames.dim(0), hw = frames.dim(1) * frames.dim(2), c = frames.dim(3);
    Mat rows(static_cast<ag::Index>(b), static_cast<ag::Index>(hw * c));
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t k = 0; k < hw; ++k)
                rows(static_cast<ag::Index>(i), static_cast<ag::Index>(ch * hw + k)) = frames.data[(i * hw + k) * c + ch];
    return rows;
}

NdArray rows_to_frames(const Mat& rows, int h, int w, int c) {
    const auto hw = static_cast<std::size_t>(h * w);
    if (rows.cols() != static_cast<ag::Index>(hw) * c) throw ShapeError("rows_to_frames: width mismatch");
    NdArray out({static_cast<std::size_t>(rows.rows()), static_cast<std::size_t>(h), static_cast<std::size_t>(w),
                 static_cast<std::size_t>(c)});
    const auto cc = static_cast<std::size_t>(c);
    for (ag::Index i = 0; i < rows.rows(); ++i)
        for (std::size_t ch = 0; ch < cc; ++ch)
            for (std::size_t k = 0; k < hw; ++k)
                out.data[(static_cast<std::size_t>(i) * hw + k) * cc + ch] = rows(i, static_cast<ag::Index>(ch * hw + k));
    return out;
}

Mat grid_rows(const GridSeries& grid, const std::vector<std::size_t>& steps) {
    return batch_rows(grid, steps, 0, steps.size());
}

// ---------------------------------------------------------------- model

VaeModel::VaeModel(VaeConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    nn::Rng rng(cfg_.seed);
    const std::vector<int> widths = cfg_.resolved_channels();
    int c = cfg_.channels, h = cfg_.height, w = cfg_.width;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        ag::ConvShape s{c, h, w, widths[i], kKernel, 2, 1};
        const std::string name = "enc.conv" + std::to_string(i);
        Var wt = store_.add(name + ".w", conv_init(s.out_c, s.patch(), s.out_c * kKernel * kKernel, rng));
        Var b = store_.add(name + ".b", Mat::Zero(1, s.out_c));
        enc_convs_.push_back({wt, b, s});
        c = widths[i];
        h = s.out_h();
        w = s.out_w();
    }
    bottleneck_c_ = c;
    const int flat = c * h * w;
    enc_mu_ = nn::Linear(store_, "enc.mu", flat, cfg_.latent_dim, rng);
    enc_logvar_ = nn::Linear(store_, "enc.logvar", flat, cfg_.latent_dim, rng);
    enc_logvar_.w.mutable_value() *= 0.1;

    dec_in_ = nn::Linear(store_, "dec.fc", cfg_.latent_dim, flat, rng);
    // Mirror: the transposed conv for encoder block i maps widths[i] back to the block's input width,
    // except the outermost which produces decoder_features channels.
    for (int i = static_cast<int>(enc_convs_.size()) - 1; i >= 0; --i) {
        ag::ConvShape s = enc_convs_[static_cast<std::size_t>(i)].shape;
        if (i == 0) s.in_c = cfg_.decoder_features;
        const std::string name = "dec.deconv" + std::to_string(enc_convs_.size() - 1 - static_cast<std::size_t>(i));
        Var wt = store_.add(name + ".w", conv_init(s.out_c, s.patch(), s.out_c * kKernel * kKernel, rng));
        Var b = store_.add(name + ".b", Mat::Zero(1, s.in_c));
        dec_deconvs_.push_back({wt, b, s});
    }
    const int feat = cfg_.decoder_features;
    head_shape_ = ag::ConvShape{feat + 1, cfg_.height, cfg_.width, cfg_.channels, 1, 1, 0};
    head_w_ = store_.add("dec.head.w", conv_init(cfg_.channels, feat + 1, cfg_.channels, rng));
    head_b_ = store_.add("dec.head.b", Mat::Zero(1, cfg_.channels));
}

std::pair<Var, Var> VaeModel::encode_graph(const Var& x) const {
    if (x.cols() != frame_size())
        throw ShapeError("vae encode: input width " + std::to_string(x.cols()) + " != " + std::to_string(frame_size()));
    Var h = x;
    for (const Block& b : enc_convs_) h = ag::relu(ag::conv2d(h, b.w, b.b, b.shape));
    return {enc_mu_(h), enc_logvar_(h)};
}

Var VaeModel::decode_graph(const Var& z, const Mat& mask) const {
    if (z.cols() != cfg_.latent_dim) throw ShapeError("vae decode: latent width mismatch");
    if (mask.cols() != frame_size()) throw ShapeError("vae decode: mask width mismatch");
    Var h = ag::relu(dec_in_(z));
    for (std::size_t i = 0; i < dec_deconvs_.size(); ++i)
        h = ag::relu(ag::conv_transpose2d(h, dec_deconvs_[i].w, dec_deconvs_[i].b, dec_deconvs_[i].shape));
    const ag::Index hw = cfg_.height * cfg_.width;
    Mat mask_plane = mask.leftCols(hw).replicate(z.rows(), 1);
    Var fused = ag::concat_cols({h, Var::constant(mask_plane)});
    Var out = ag::sigmoid(ag::conv2d(fused, head_w_, head_b_, head_shape_));
    return ag::mul(out, Var::constant(mask.replicate(z.rows(), 1)));
}

LatentGaussian VaeModel::encode_rows(const Mat& x) const {
    ag::NoGradGuard ng;
    auto [mu, logvar] = encode_graph(Var::constant(x));
    return {mu.value(), logvar.value()};
}

Mat VaeModel::decode_rows(const Mat& z, const ActivityMask& mask) const {
    check_mask(mask, cfg_);
    ag::NoGradGuard ng;
    return decode_graph(Var::constant(z), mask_row(mask, cfg_.channels)).value();
}

VaeModel VaeModel::clone() const {
    VaeModel m(cfg_);
    m.store_.restore(store_.snapshot());
    return m;
}

void VaeModel::save(const std::filesystem::path& dir, const nlohmann::json& training_meta) const {
    std::filesystem::create_directories(dir);
    store_.save(dir / "weights");
    nlohmann::json j;
    j["architecture"] = "conv-vae";
    j["config"] = cfg_;
    j["d"] = cfg_.latent_dim;
    j["beta"] = cfg_.beta;
    j["seed"] = cfg_.seed;
    j["checksum"] = hex64(store_.checksum());
    j["training"] = training_meta;
    atomic_write_text(dir / "model.json", j.dump(2));
}

VaeModel VaeModel::load(const std::filesystem::path& dir) {
    const auto j = nlohmann::json::parse(read_text(dir / "model.json"));
    VaeModel m(j.at("config").get<VaeConfig>());
    m.store_.load(dir / "weights");
    return m;
}

// ---------------------------------------------------------------- single-frame API

LatentGaussian encode(const NdArray& frame, const VaeModel& model) {
    const VaeConfig& c = model.config();
    if (frame.shape != std::vector<std::size_t>{static_cast<std::size_t>(c.height), static_cast<std::size_t>(c.width),
                                                static_cast<std::size_t>(c.channels)})
        throw ShapeError("encode: frame shape " + frame.shape_string() + " does not match model");
    NdArray batch = frame;
    batch.shape.insert(batch.shape.begin(), 1);
    return model.encode_rows(frames_to_rows(batch));
}

VibrancyEmbedding sample_latent(const LatentGaussian& g, const Eigen::RowVectorXd& noise) {
    if (g.mu.rows() != 1 || noise.size() != g.mu.cols()) throw ShapeError("sample_latent: noise width mismatch");
    VibrancyEmbedding e;
    if (noise.isZero(0.0)) {
        e.z = g.mu.row(0);
        e.source = EmbeddingSource::Mean;
        return e;
    }
    e.z = g.mu.row(0).array() + (0.5 * g.logvar.row(0).array()).exp() * noise.array();
    e.source = EmbeddingSource::Sampled;
    return e;
}

NdArray decode(const VibrancyEmbedding& z, const ActivityMask& mask, const VaeModel& model) {
    const VaeConfig& c = model.config();
    if (z.z.size() != c.latent_dim) throw ShapeError("decode: embedding dimension mismatch");
    Mat row = z.z;
    NdArray out = rows_to_frames(model.decode_rows(row, mask), c.height, c.width, c.channels);
    out.shape.erase(out.shape.begin());
    return out;
}

VaeLossGraph vae_loss_graph(const Var& c, const Var& c_hat, const Var& mu, const Var& logvar, const Mat& mask,
                            double beta) {
    if (beta < 0.0) throw std::invalid_argument("vae_loss: beta must be >= 0");
    const double active = mask.sum();
    if (active <= 0.0) throw std::invalid_argument("vae_loss: no active cells");
    const auto b = static_cast<double>(c.rows());
    Var diff = ag::mul(ag::sub(c, c_hat), Var::constant(mask.replicate(c.rows(), 1)));
    Var recon = ag::scale(ag::sum(ag::square(diff)), 1.0 / (active * b));
    Var inner = ag::sub(ag::sub(ag::add_scalar(logvar, 1.0), ag::square(mu)), ag::exp(logvar));
    Var kl = ag::scale(ag::sum(inner), -0.5 / b);
    return {ag::add(recon, ag::scale(kl, beta)), recon, kl};
}

VaeLossTerms vae_loss(const NdArray& c, const NdArray& c_hat, const LatentGaussian& g, const ActivityMask& mask,
                      double beta) {
    if (c.shape != c_hat.shape) throw ShapeError("vae_loss: C and C_hat shapes differ");
    NdArray a = c, b = c_hat;
    if (a.rank() == 3) {
        a.shape.insert(a.shape.begin(), 1);
        b.shape.insert(b.shape.begin(), 1);
    }
    if (a.rank() != 4 || a.dim(1) != mask.height || a.dim(2) != mask.width) throw ShapeError("vae_loss: mask shape mismatch");
    ag::NoGradGuard ng;
    const auto r = vae_loss_graph(Var::constant(frames_to_rows(a)), Var::constant(frames_to_rows(b)),
                                  Var::constant(g.mu), Var::constant(g.logvar),
                                  mask_row(mask, static_cast<int>(a.dim(3))), beta);
    return {r.total.scalar(), r.recon.scalar(), r.kl.scalar()};
}

// ---------------------------------------------------------------- training

namespace {

struct EvalTerms {
    double total = 0.0, recon = 0.0;
};

EvalTerms evaluate(const VaeModel& model, const GridSeries& g, const Mat& mask, const std::vector<std::size_t>& idx) {
    ag::NoGradGuard ng;
    const std::size_t bs = 256;
    double total = 0.0, recon = 0.0;
    for (std::size_t i = 0; i < idx.size(); i += bs) {
        const std::size_t n = std::min(bs, idx.size() - i);
        Var x = Var::constant(batch_rows(g, idx, i, n));
        auto [mu, logvar] = model.encode_graph(x);
        Var xh = model.decode_graph(mu, mask);
        const auto l = vae_loss_graph(x, xh, mu, logvar, mask, model.config().beta);
        total += l.total.scalar() * static_cast<double>(n);
        recon += l.recon.scalar() * static_cast<double>(n);
    }
    return {total / static_cast<double>(idx.size()), recon / static_cast<double>(idx.size())};
}

}  // namespace

double recon_mse(const VaeModel& model, const GridSeries& normalized, const ActivityMask& mask,
                 const std::vector<std::size_t>& indices) {
    check_mask(mask, model.config());
    return evaluate(model, normalized, mask_row(mask, model.config().channels), indices).recon;
}

TrainedVae train_vae(const GridSeries& normalized, const ActivityMask& mask, const std::vector<std::size_t>& train,
                     const std::vector<std::size_t>& val, const VaeConfig& cfg) {
    if (!normalized.normalized) throw std::invalid_argument("train_vae: grid must be normalized");
    if (train.empty() || val.empty()) throw std::invalid_argument("train_vae: empty train or validation set");
    if (normalized.height() != static_cast<std::size_t>(cfg.height) || normalized.width() != static_cast<std::size_t>(cfg.width) ||
        normalized.channels() != static_cast<std::size_t>(cfg.channels))
        throw ShapeError("train_vae: grid shape does not match config");
    check_mask(mask, cfg);

    TrainedVae out{VaeModel(cfg), {}};
    VaeModel& model = out.model;
    const Mat m = mask_row(mask, cfg.channels);
    nn::Adam opt(model.params().trainable(), cfg.learning_rate);
    nn::Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order = train;
    std::vector<Mat> best;
    int since_best = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        double epoch_total = 0.0;
        for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t n = std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - i);
            Var x = Var::constant(batch_rows(normalized, order, i, n));
            auto [mu, logvar] = model.encode_graph(x);
            Var eps = Var::constant(rng.normal_matrix(static_cast<ag::Index>(n), cfg.latent_dim));
            Var z = ag::add(mu, ag::mul(ag::exp(ag::scale(logvar, 0.5)), eps));
            Var xh = model.decode_graph(z, m);
            const auto loss = vae_loss_graph(x, xh, mu, logvar, m, cfg.beta);
            const double v = loss.total.scalar();
            if (!std::isfinite(v))
                throw NumericalError("train_vae: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(i / static_cast<std::size_t>(cfg.batch_size)) +
                                     " (recon=" + std::to_string(loss.recon.scalar()) +
                                     ", kl=" + std::to_string(loss.kl.scalar()) + ")");
            opt.zero_grad();
            loss.total.backward();
            opt.step();
            epoch_total += v * static_cast<double>(n);
        }
        out.history.train_total.push_back(epoch_total / static_cast<double>(order.size()));
        const EvalTerms ev = evaluate(model, normalized, m, val);
        if (!std::isfinite(ev.total)) throw NumericalError("train_vae: non-finite validation loss at epoch " + std::to_string(epoch));
        out.history.val_total.push_back(ev.total);
        out.history.val_recon.push_back(ev.recon);
        if (out.history.best_epoch < 0 || ev.total < out.history.best_val_total) {
            out.history.best_epoch = epoch;
            out.history.best_val_total = ev.total;
            out.history.best_val_recon = ev.recon;
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

// ---------------------------------------------------------------- embeddings

EmbeddingSeries embed_series(const GridSeries& normalized, const ActivityMask& mask, const VaeModel& model) {
    check_mask(mask, model.config());
    if (normalized.height() != static_cast<std::size_t>(model.config().height) ||
        normalized.width() != static_cast<std::size_t>(model.config().width))
        throw ShapeError("embed_series: grid shape does not match model");
    EmbeddingSeries e;
    e.timestamps = normalized.timestamps;
    e.z = Mat(static_cast<ag::Index>(normalized.steps()), model.config().latent_dim);
    std::vector<std::size_t> idx(normalized.steps());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t bs = 256;
    for (std::size_t i = 0; i < idx.size(); i += bs) {
        const std::size_t n = std::min(bs, idx.size() - i);
        e.z.middleRows(static_cast<ag::Index>(i), static_cast<ag::Index>(n)) = model.encode_rows(batch_rows(normalized, idx, i, n)).mu;
    }
    return e;
}

void write_embeddings(const std::filesystem::path& base, const EmbeddingSeries& e) {
    NdArray a({static_cast<std::size_t>(e.z.rows()), static_cast<std::size_t>(e.z.cols())});
    std::copy(e.z.data(), e.z.data() + e.z.size(), a.data.begin());
    ArrayMeta meta;
    if (!e.timestamps.empty()) meta.start_time = e.timestamps.front();
    write_f32(base, a, meta);
}

EmbeddingSeries read_embeddings(const std::filesystem::path& base) {
    ArrayMeta meta;
    NdArray a = read_f32(base, &meta);
    if (a.rank() != 2) throw ShapeError("embedding cache must be [T,d]");
    EmbeddingSeries e;
    e.z = Mat(static_cast<ag::Index>(a.dim(0)), static_cast<ag::Index>(a.dim(1)));
    std::copy(a.data.begin(), a.data.end(), e.z.data());
    if (meta.start_time) e.timestamps = hourly_timeline(*meta.start_time, a.dim(0));
    return e;
}

}  // namespace vf
