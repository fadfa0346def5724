#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vf/core/autodiff.hpp"

namespace vf::nn {

using ag::Mat;
using ag::Var;

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    double normal() { return normal_(engine_); }
    double uniform(double lo = 0.0, double hi = 1.0) { return lo + (hi - lo) * unit_(engine_); }
    std::uint64_t next() { return engine_(); }
    Mat normal_matrix(ag::Index rows, ag::Index cols);
    template <class It>
    void shuffle(It first, It last) {
        // Fisher-Yates with our own draws; std::shuffle's sequence is library-specific.
        for (auto n = last - first; n > 1; --n) {
            auto j = static_cast<decltype(n)>(engine_() % static_cast<std::uint64_t>(n));
            std::swap(first[n - 1], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> unit_{0.0, 1.0};
};

// Named, ordered collection of trainable parameters and persistent buffers.
class ParamStore {
public:
    Var add(const std::string& name, Mat init);
    Var add_buffer(const std::string& name, Mat init);

    std::vector<Var> trainable() const;
    void set_trainable(bool on);
    void zero_grad();

    std::vector<Mat> snapshot() const;
    void restore(const std::vector<Mat>& values);

    // FNV-1a over the raw bytes of every parameter and buffer, in order.
    std::uint64_t checksum() const;

    // One `<name>.f32` (+ sidecar) per entry.
    void save(const std::filesystem::path& dir) const;
    void load(const std::filesystem::path& dir);
    // Rounds every value through f32, matching what save/load would produce.
    void round_to_f32();

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, Var>> entries_;
    std::vector<bool> is_buffer_;
};

struct Linear {
    Var w, b;
    bool rowwise = false;  // use matmul_rowwise
    Linear() = default;
    Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng);
    Var operator()(const Var& x) const;
    int in_features() const { return static_cast<int>(w.rows()); }
    int out_features() const { return static_cast<int>(w.cols()); }
};

struct BatchNorm {
    Var gamma, beta, running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;
    BatchNorm() = default;
    BatchNorm(ParamStore& store, const std::string& name, int width);
    // Training mode normalizes with batch statistics and updates the running ones.
    Var operator()(const Var& x, bool training) const;
};

// Dense -> BN -> ReLU -> Dense -> BN
struct DenseBnStack {
    Linear l1, l2;
    BatchNorm bn1, bn2;
    DenseBnStack() = default;
    DenseBnStack(ParamStore& store, const std::string& name, int in, int out, Rng& rng);
    Var operator()(const Var& x, bool training) const;
    int in_features() const { return l1.in_features(); }
};

struct LstmCell {
    Var wx, wh, b;
    int hidden = 0;
    LstmCell() = default;
    LstmCell(ParamStore& store, const std::string& name, int in, int hidden, Rng& rng);
    // Returns (h', c').
    std::pair<Var, Var> operator()(const Var& x, const Var& h, const Var& c) const;
};

struct GruCell {
    Var wx, wh, b;
    int hidden = 0;
    GruCell() = default;
    GruCell(ParamStore& store, const std::string& name, int in, int hidden, Rng& rng);
    Var operator()(const Var& x, const Var& h) const;
};

class Adam {
public:
    Adam(std::vector<Var> params, double lr, double clip_norm = 0.0, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    // Returns the pre-clip global gradient norm.
    double step();
    void zero_grad();
    void set_lr(double lr) { lr_ = lr; }

private:
    std::vector<Var> params_;
    std::vector<Mat> m_, v_;
    double lr_, clip_, b1_, b2_, eps_;
    long t_ = 0;
};

Mat glorot(int in, int out, Rng& rng);

}  // namespace vf::nn
