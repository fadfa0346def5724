#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "vf/vae.hpp"

namespace vf {

struct ForecasterConfig {
    int p = 6;
    int q = 6;
    int hidden = 64;
    double learning_rate = 1e-3;
    int batch_size = 64;
    int epochs = 30;
    int patience = 10;
    double clip_norm = 5.0;
    double final_lr_fraction = 1.0;  // learning rate decays linearly to lr * this by the last epoch
    bool scheduled_sampling = true;  // teacher-forcing ratio decays linearly 1 -> 0 over the epochs
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const ForecasterConfig& c);
void from_json(const nlohmann::json& j, ForecasterConfig& c);

// LSTM encoder over p embeddings, LSTM decoder emitting q embeddings.
// The decoder's first input is the last observed embedding.
class Forecaster {
public:
    Forecaster(ForecasterConfig cfg, int latent_dim);

    const ForecasterConfig& config() const { return cfg_; }
    int latent_dim() const { return d_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    // history: p matrices B x d. With `teacher` (q matrices B x d) and a ratio > 0,
    // each sample's next decoder input is the true embedding with that probability.
    std::vector<Var> forward_graph(const std::vector<Var>& history, const std::vector<Mat>* teacher = nullptr,
                                   double teacher_ratio = 0.0, nn::Rng* rng = nullptr) const;

    // history: B x (p*d), step-major -> B x (q*d)
    Mat forecast_batch(const Mat& history) const;

    void save(const std::filesystem::path& dir, const nlohmann::json& training_meta = {}) const;
    static Forecaster load(const std::filesystem::path& dir);

private:
    ForecasterConfig cfg_;
    int d_;
    nn::ParamStore store_;
    nn::LstmCell enc_, dec_;
    nn::Linear head_;
};

// [p,d] -> [q,d]
Mat forecast_embeddings(const Mat& history, const Forecaster& model);

// Mean over the q steps of the active-cell MSE between decode(z_hat) and the target grids.
Var forecaster_loss_graph(const Var& predicted, const Mat& targets, const Mat& mask, const VaeModel& vae);
double forecaster_loss(const Mat& predicted_z, const NdArray& target_c, const ActivityMask& mask, const VaeModel& vae);

// Anchors t with t-p+1 >= 0 and t+q < end, sorted ascending.
std::vector<std::size_t> valid_anchors(const std::vector<std::size_t>& candidates, std::size_t p, std::size_t q,
                                       std::size_t end);

struct ForecastEval {
    std::vector<double> pixel_mse;  // per horizon 1..q
    std::vector<double> embed_mse;
};

ForecastEval evaluate_forecaster(const Forecaster& model, const EmbeddingSeries& emb, const GridSeries& normalized,
                                 const ActivityMask& mask, const VaeModel& vae, const std::vector<std::size_t>& anchors);

// Repeat the last observed grid: per-horizon active-cell MSE.
std::vector<double> persistence_mse(const GridSeries& normalized, const ActivityMask& mask,
                                    const std::vector<std::size_t>& anchors, std::size_t q);

struct ForecasterHistory {
    std::vector<double> train_loss, teacher_ratio, val_pixel_mse, val_embed_mse;
    int best_epoch = -1;
    ForecastEval best;
};

struct TrainedForecaster {
    Forecaster model;
    ForecasterHistory history;
};

TrainedForecaster train_forecaster(const EmbeddingSeries& emb, const GridSeries& normalized, const ActivityMask& mask,
                                   const VaeModel& vae, const std::vector<std::size_t>& train_anchors,
                                   const std::vector<std::size_t>& val_anchors, const ForecasterConfig& cfg);

// [T, q, d]; anchors t < p-1 have no full history and are NaN.
NdArray forecast_all(const Forecaster& model, const EmbeddingSeries& emb);
void write_forecasts(const std::filesystem::path& base, const NdArray& cache, const EmbeddingSeries& emb);
NdArray read_forecasts(const std::filesystem::path& base);

}  // namespace vf
