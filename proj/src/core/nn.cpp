#include "vf/core/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "vf/core/array_io.hpp"
#include "vf/core/hash.hpp"

namespace vf::nn {

Mat Rng::normal_matrix(ag::Index rows, ag::Index cols) {
    Mat m(rows, cols);
    for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
}

Mat glorot(int in, int out, Rng& rng) {
    const double a = std::sqrt(6.0 / (in + out));
    Mat m(in, out);
    for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
    return m;
}

// ---------------------------------------------------------------- ParamStore

Var ParamStore::add(const std::string& name, Mat init) {
    for (const auto& [n, _] : entries_)
        if (n == name) throw std::logic_error("duplicate parameter name " + name);
    Var v(std::move(init), true);
    entries_.emplace_back(name, v);
    is_buffer_.push_back(false);
    return v;
}

Var ParamStore::add_buffer(const std::string& name, Mat init) {
    Var v(std::move(init), false);
    entries_.emplace_back(name, v);
    is_buffer_.push_back(true);
    return v;
}

std::vector<Var> ParamStore::trainable() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < entries_.size(); ++i)
        if (!is_buffer_[i]) out.push_back(entries_[i].second);
    return out;
}

void ParamStore::set_trainable(bool on) {
    for (std::size_t i = 0; i < entries_.size(); ++i)
        if (!is_buffer_[i]) entries_[i].second.set_requires_grad(on);
}

void ParamStore::zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
}

std::vector<Mat> ParamStore::snapshot() const {
    std::vector<Mat> out;
    out.reserve(entries_.size());
    for (const auto& [_, v] : entries_) out.push_back(v.value());
    return out;
}

void ParamStore::restore(const std::vector<Mat>& values) {
    if (values.size() != entries_.size()) throw std::invalid_argument("restore: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) entries_[i].second.mutable_value() = values[i];
}

std::uint64_t ParamStore::checksum() const {
    Fnv1a h;
    for (const auto& [name, v] : entries_) {
        h.update(name);
        h.update(v.value().data(), static_cast<std::size_t>(v.value().size()) * sizeof(double));
    }
    return h.digest();
}

void ParamStore::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& [name, v] : entries_) {
        NdArray a({static_cast<std::size_t>(v.rows()), static_cast<std::size_t>(v.cols())});
        std::copy(v.value().data(), v.value().data() + v.value().size(), a.data.begin());
        write_f32(dir / name, a);
    }
}

void ParamStore::load(const std::filesystem::path& dir) {
    for (auto& [name, v] : entries_) {
        NdArray a = read_f32(dir / name);
        if (a.rank() != 2 || static_cast<ag::Index>(a.dim(0)) != v.rows() || static_cast<ag::Index>(a.dim(1)) != v.cols())
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        std::copy(a.data.begin(), a.data.end(), v.mutable_value().data());
    }
}

void ParamStore::round_to_f32() {
    for (auto& [_, v] : entries_) {
        Mat& m = v.mutable_value();
        for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
    }
}

// ---------------------------------------------------------------- layers

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng)
    : w(store.add(name + ".w", glorot(in, out, rng))), b(store.add(name + ".b", Mat::Zero(1, out))) {}

Var Linear::operator()(const Var& x) const {
    return ag::add_row(rowwise ? ag::matmul_rowwise(x, w) : ag::matmul(x, w), b);
}

BatchNorm::BatchNorm(ParamStore& store, const std::string& name, int width)
    : gamma(store.add(name + ".gamma", Mat::Ones(1, width))),
      beta(store.add(name + ".beta", Mat::Zero(1, width))),
      running_mean(store.add_buffer(name + ".running_mean", Mat::Zero(1, width))),
      running_var(store.add_buffer(name + ".running_var", Mat::Ones(1, width))) {}

Var BatchNorm::operator()(const Var& x, bool training) const {
    if (!training) return ag::batch_norm_eval(x, gamma, beta, running_mean.value(), running_var.value(), eps);
    Mat mu, var;
    Var y = ag::batch_norm_train(x, gamma, beta, eps, &mu, &var);
    Var rm = running_mean;
    Var rv = running_var;
    rm.mutable_value() = (1.0 - momentum) * rm.value() + momentum * mu;
    rv.mutable_value() = (1.0 - momentum) * rv.value() + momentum * var;
    return y;
}

DenseBnStack::DenseBnStack(ParamStore& store, const std::string& name, int in, int out, Rng& rng)
    : l1(store, name + ".fc1", in, out, rng),
      l2(store, name + ".fc2", out, out, rng),
      bn1(store, name + ".bn1", out),
      bn2(store, name + ".bn2", out) {}

Var DenseBnStack::operator()(const Var& x, bool training) const {
    Var h = ag::relu(bn1(l1(x), training));
    return bn2(l2(h), training);
}

LstmCell::LstmCell(ParamStore& store, const std::string& name, int in, int hidden_size, Rng& rng)
    : hidden(hidden_size) {
    wx = store.add(name + ".wx", glorot(in, 4 * hidden, rng));
    wh = store.add(name + ".wh", glorot(hidden, 4 * hidden, rng));
    Mat bias = Mat::Zero(1, 4 * hidden);
    bias.middleCols(hidden, hidden).setOnes();  // forget gate
    b = store.add(name + ".b", bias);
}

std::pair<Var, Var> LstmCell::operator()(const Var& x, const Var& h, const Var& c) const {
    Var z = ag::add_row(ag::add(ag::matmul(x, wx), ag::matmul(h, wh)), b);
    Var i = ag::sigmoid(ag::slice_cols(z, 0, hidden));
    Var f = ag::sigmoid(ag::slice_cols(z, hidden, hidden));
    Var g = ag::tanh(ag::slice_cols(z, 2 * hidden, hidden));
    Var o = ag::sigmoid(ag::slice_cols(z, 3 * hidden, hidden));
    Var c2 = ag::add(ag::mul(f, c), ag::mul(i, g));
    Var h2 = ag::mul(o, ag::tanh(c2));
    return {h2, c2};
}

GruCell::GruCell(ParamStore& store, const std::string& name, int in, int hidden_size, Rng& rng)
    : hidden(hidden_size) {
    wx = store.add(name + ".wx", glorot(in, 3 * hidden, rng));
    wh = store.add(name + ".wh", glorot(hidden, 3 * hidden, rng));
    b = store.add(name + ".b", Mat::Zero(1, 3 * hidden));
}

Var GruCell::operator()(const Var& x, const Var& h) const {
    Var xz = ag::add_row(ag::matmul(x, wx), b);
    Var gates = ag::sigmoid(ag::add(ag::slice_cols(xz, 0, 2 * hidden),
                                    ag::matmul(h, ag::slice_cols(wh, 0, 2 * hidden))));
    Var r = ag::slice_cols(gates, 0, hidden);
    Var u = ag::slice_cols(gates, hidden, hidden);
    Var cand = ag::tanh(ag::add(ag::slice_cols(xz, 2 * hidden, hidden),
                                ag::matmul(ag::mul(r, h), ag::slice_cols(wh, 2 * hidden, hidden))));
    return ag::add(ag::mul(u, h), ag::mul(ag::one_minus(u), cand));
}

// ---------------------------------------------------------------- Adam

Adam::Adam(std::vector<Var> params, double lr, double clip_norm, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), clip_(clip_norm), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.push_back(Mat::Zero(p.rows(), p.cols()));
        v_.push_back(Mat::Zero(p.rows(), p.cols()));
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

double Adam::step() {
    double sq = 0.0;
    for (const auto& p : params_)
        if (p.grad().size()) sq += p.grad().squaredNorm();
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) return norm;
    const double factor = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Var p = params_[i];
        if (p.grad().size() == 0) continue;
        Mat g = p.grad() * factor;
        m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
        v_[i] = b2_ * v_[i] + (1.0 - b2_) * g.cwiseProduct(g);
        p.mutable_value().array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
    return norm;
}

}  // namespace vf::nn
