#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "vf/core/nn.hpp"
#include "vf/data.hpp"

namespace vf {

using ag::Mat;
using ag::Var;

struct VaeConfig {
    int height = 16;
    int width = 16;
    int channels = 1;
    int latent_dim = 8;
    // One entry per stride-2 block; empty means 16, 32, 64, 64, ... down to a 4x4 map.
    std::vector<int> conv_channels;
    int decoder_features = 8;
    double beta = 1.0;
    double learning_rate = 1e-3;
    int batch_size = 64;
    int epochs = 50;
    int patience = 10;
    std::uint64_t seed = 0;

    int blocks() const;
    std::vector<int> resolved_channels() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const VaeConfig& c);
void from_json(const nlohmann::json& j, VaeConfig& c);

// Rows are samples: mu and logvar are B x d.
struct LatentGaussian {
    Mat mu, logvar;
};

enum class EmbeddingSource { Sampled, Mean };

struct VibrancyEmbedding {
    Eigen::RowVectorXd z;
    EmbeddingSource source = EmbeddingSource::Mean;
};

struct VaeLossTerms {
    double total = 0.0, recon = 0.0, kl = 0.0;
};

struct VaeLossGraph {
    Var total, recon, kl;
};

// Mask as a 1 x (n_c*H*W) row in channel-major image layout.
Mat mask_row(const ActivityMask& mask, int channels);

// Frames in [H, W, n_c] element order <-> channel-major image rows.
Mat frames_to_rows(const NdArray& frames);               // [B, H, W, n_c] -> B x (n_c*H*W)
NdArray rows_to_frames(const Mat& rows, int h, int w, int c);
// Selected time steps of a grid as image rows.
Mat grid_rows(const GridSeries& grid, const std::vector<std::size_t>& steps);

class VaeModel {
public:
    explicit VaeModel(VaeConfig cfg);

    const VaeConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    int frame_size() const { return cfg_.height * cfg_.width * cfg_.channels; }

    std::pair<Var, Var> encode_graph(const Var& x) const;
    // Inactive cells come out exactly zero.
    Var decode_graph(const Var& z, const Mat& mask) const;

    LatentGaussian encode_rows(const Mat& x) const;
    Mat decode_rows(const Mat& z, const ActivityMask& mask) const;

    // Independent copy of the weights (the ParamStore itself shares nodes on copy).
    VaeModel clone() const;

    void save(const std::filesystem::path& dir, const nlohmann::json& training_meta = {}) const;
    static VaeModel load(const std::filesystem::path& dir);

private:
    struct Block {
        Var w, b;
        ag::ConvShape shape;
    };
    VaeConfig cfg_;
    nn::ParamStore store_;
    std::vector<Block> enc_convs_;
    nn::Linear enc_mu_, enc_logvar_;
    nn::Linear dec_in_;
    std::vector<Block> dec_deconvs_;
    Var head_w_, head_b_;
    ag::ConvShape head_shape_;
    int bottleneck_c_ = 0;
};

// Single-frame operations on [H, W, n_c] arrays.
LatentGaussian encode(const NdArray& frame, const VaeModel& model);
VibrancyEmbedding sample_latent(const LatentGaussian& g, const Eigen::RowVectorXd& noise);
NdArray decode(const VibrancyEmbedding& z, const ActivityMask& mask, const VaeModel& model);

// recon: mean of (C - C_hat)^2 over active cells; kl: -1/2 sum(1 + logvar - mu^2 - exp(logvar)),
// both averaged over the batch rows; total = recon + beta * kl.
VaeLossGraph vae_loss_graph(const Var& c, const Var& c_hat, const Var& mu, const Var& logvar, const Mat& mask,
                            double beta);
VaeLossTerms vae_loss(const NdArray& c, const NdArray& c_hat, const LatentGaussian& g, const ActivityMask& mask,
                      double beta);

struct VaeHistory {
    std::vector<double> train_total, val_total, val_recon;
    int best_epoch = -1;
    double best_val_total = 0.0;
    double best_val_recon = 0.0;
};

struct TrainedVae {
    VaeModel model;
    VaeHistory history;
};

TrainedVae train_vae(const GridSeries& normalized, const ActivityMask& mask, const std::vector<std::size_t>& train,
                     const std::vector<std::size_t>& val, const VaeConfig& cfg);

// Mean active-cell reconstruction MSE using the posterior mean.
double recon_mse(const VaeModel& model, const GridSeries& normalized, const ActivityMask& mask,
                 const std::vector<std::size_t>& indices);

struct EmbeddingSeries {
    Mat z;  // T x d
    std::vector<HourStamp> timestamps;
};

EmbeddingSeries embed_series(const GridSeries& normalized, const ActivityMask& mask, const VaeModel& model);
void write_embeddings(const std::filesystem::path& base, const EmbeddingSeries& e);
EmbeddingSeries read_embeddings(const std::filesystem::path& base);

}  // namespace vf
