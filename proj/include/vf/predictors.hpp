#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vf/data.hpp"
#include "vf/graphs.hpp"
#include "vf/stve.hpp"

namespace vf {

enum class ModelKind { GRU, DCRNN };
std::string to_string(ModelKind m);
ModelKind parse_model(const std::string& name);
bool variant_allowed(ModelKind m, Variant v);

struct PredictorConfig {
    ModelKind model = ModelKind::DCRNN;
    Variant variant = Variant::NONE;
    int p = 6;
    int q = 6;
    int d = 8;             // STVE width; equals the embedding dimension when Z_V is used
    int hidden = 32;       // GRU state width, or DCRNN units per node
    int diffusion_steps = 2;
    double learning_rate = 3e-3;
    int batch_size = 32;
    int epochs = 30;
    int patience = 8;
    double clip_norm = 5.0;
    std::string loss = "mae";         // or "mse"
    bool decoder_feedback = false;    // DCRNN: add f(previous prediction) to decoder inputs
    bool true_future_embeddings = false;  // train-time Z_V forecast rows from ground truth
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const PredictorConfig& c);
void from_json(const nlohmann::json& j, PredictorConfig& c);

// Diffusion convolution weights: wf[k], wb[k] are c_in x c_out for k = 0..K.
struct DiffusionWeights {
    std::vector<Mat> wf, wb;
};

// sum_k (D_f^-1 A)^k H W_f,k + (D_b^-1 A^T)^k H W_b,k
Mat diffusion_conv(const Mat& h, const SensorGraph& graph, int k, const DiffusionWeights& w);

// Differentiable form over a batch of node blocks (rows b*n_s + s). `w` stacks
// [W_f,0; ..; W_f,K; W_b,0; ..; W_b,K] vertically.
Var diffusion_conv_graph(const Var& h, const Mat& forward, const Mat& backward, int k, const Var& w);

// Window inputs for B anchors. Node-major rows: row b*n_s + s.
struct WindowBatch {
    std::vector<std::size_t> anchors;
    std::vector<Mat> x_past;  // p x [B*n_s, n_f]
    std::vector<Mat> y;       // q x [B*n_s, n_f]
    Mat zt;                   // [B*(p+q), 31], row b*(p+q) + tau
    Mat zv;                   // [B*(p+q), d]; empty when no embeddings are attached
    Provenance zv_source = Provenance::Forecaster;
};

// Z-scored traffic plus everything needed to assemble windows.
struct PredictorData {
    NdArray traffic;  // [T, n_s, n_f], z-scored
    TrafficScaler scaler;
    std::vector<HourStamp> timestamps;
    Mat embeddings;     // [T, d] observed embeddings (optional)
    NdArray forecasts;  // [T, q, d] forecaster output (optional)

    std::size_t steps() const { return traffic.dim(0); }
    std::size_t sensors() const { return traffic.dim(1); }
    std::size_t features() const { return traffic.dim(2); }

    WindowBatch batch(const std::vector<std::size_t>& anchors, std::size_t begin, std::size_t n, int p, int q,
                      bool need_embeddings, bool true_future = false) const;
};

PredictorData make_predictor_data(const TrafficSeries& raw, const TrafficScaler& scaler, const Mat& embeddings,
                                  const NdArray& forecasts);

struct Prediction {
    NdArray values;  // [q, n_s, n_f]
    HourStamp anchor_time;
};

class TrafficModel {
public:
    TrafficModel(PredictorConfig cfg, std::size_t n_s, std::size_t n_f);
    virtual ~TrafficModel() = default;

    const PredictorConfig& config() const { return cfg_; }
    std::size_t sensors() const { return n_s_; }
    std::size_t features() const { return n_f_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    // q outputs of shape [B*n_s, n_f] in z-scored units.
    virtual std::vector<Var> forward(const WindowBatch& batch, bool training) const = 0;

    void save(const std::filesystem::path& dir, const nlohmann::json& training_meta = {}) const;

protected:
    PredictorConfig cfg_;
    std::size_t n_s_, n_f_;
    nn::ParamStore store_;
    std::optional<StveFusion> fusion_;
};

class GruPredictor : public TrafficModel {
public:
    GruPredictor(PredictorConfig cfg, std::size_t n_s, std::size_t n_f);

    std::vector<Var> forward(const WindowBatch& batch, bool training) const override;
    // x_past: p x [B, n_s*n_f]; z_tv: p+q x [B, d] or empty.
    std::vector<Var> run(const std::vector<Var>& x_past, const std::vector<Var>& z_tv) const;
    // Z_TV = f(Z_T || Z_V) in evaluation mode: [p+q, d]
    Mat fuse(const Mat& zt, const Mat& zv) const;

private:
    nn::GruCell enc_, dec_;
    nn::Linear head_;
};

class DcrnnPredictor : public TrafficModel {
public:
    DcrnnPredictor(PredictorConfig cfg, const SensorGraph& graph, std::size_t n_f);

    std::vector<Var> forward(const WindowBatch& batch, bool training) const override;
    // x_past: p x [B*n_s, n_f]; stve: p+q x [B*n_s, d] or empty.
    std::vector<Var> run(const std::vector<Var>& x_past, const std::vector<Var>& stve) const;
    // Evaluation-mode STVE for one window.
    STVETensor stve(const Mat& zt, const Mat& zv) const;

    // Per-step recurrent-cell inputs for one window: encoder f(X_tau) (+ STVE), decoder STVE rows or GO.
    std::pair<std::vector<Mat>, std::vector<Mat>> cell_inputs(const NdArray& x_past, const STVETensor* z) const;

private:
    struct DcGru {
        Var w_gate, b_gate, w_cand, b_cand;
    };
    DcGru make_cell(const std::string& name, int in, nn::Rng& rng);
    Var cell_step(const DcGru& c, const Var& x, const Var& h) const;
    std::vector<Var> stve_steps(const Mat& zt, const Mat& zv, std::size_t b, bool training) const;

    Mat fwd_, bwd_;
    nn::Linear proj_in_, head_;
    DcGru enc_, dec_;
};

std::unique_ptr<TrafficModel> make_predictor(const PredictorConfig& cfg, const SensorGraph& graph, std::size_t n_f);
std::unique_ptr<TrafficModel> load_predictor(const std::filesystem::path& dir, const SensorGraph& graph);

// Single-window entry points; z arguments must be present exactly when the variant is not NONE.
Prediction gru_predict(const NdArray& x_past, const std::optional<Mat>& z_tv, const GruPredictor& model,
                       HourStamp anchor = {});
Prediction dcrnn_predict(const NdArray& x_past, const SensorGraph& graph, const STVETensor* z_stv,
                         const DcrnnPredictor& model, HourStamp anchor = {});

// Additive rule on encoder inputs, replacement rule on decoder inputs. Each input is [n_s, d].
std::pair<std::vector<Mat>, std::vector<Mat>> adapter_inject(const std::vector<Mat>& encoder_inputs,
                                                             const std::vector<Mat>& decoder_inputs,
                                                             const STVETensor& z_stv);

struct PredictorHistory {
    std::vector<double> train_loss, val_mae;
    int best_epoch = -1;
    double best_val_mae = 0.0;
};

struct TrainedPredictor {
    std::unique_ptr<TrafficModel> model;
    PredictorHistory history;
};

TrainedPredictor train_predictor(const PredictorData& data, const SensorGraph& graph,
                                 const std::vector<std::size_t>& train_anchors,
                                 const std::vector<std::size_t>& val_anchors, const PredictorConfig& cfg);

// Predictions in original units, one per anchor; Z_V forecast rows always come from the forecaster.
std::vector<Prediction> predict(const TrafficModel& model, const PredictorData& data,
                                const std::vector<std::size_t>& anchors);
std::vector<NdArray> truth_windows(const TrafficSeries& raw, const std::vector<std::size_t>& anchors, int q);

using MaeTable = std::map<int, double>;
MaeTable evaluate_mae(const std::vector<Prediction>& preds, const std::vector<NdArray>& truth,
                      const std::vector<int>& horizons);

}  // namespace vf
