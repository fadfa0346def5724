#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices. Every value is 2-D; batches live on the row axis and
// images are flattened channel-major into a row (C*H*W).

#include <functional>
#include <memory>
#include <vector>

#include <Eigen/Dense>

namespace vf::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
    Mat value;
    Mat grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Mat& g) {
        if (grad.size() == 0)
            grad = g;
        else
            grad += g;
    }
    Mat& grad_buffer() {
        if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(Mat value, bool requires_grad = false);
    static Var constant(Mat value) { return Var(std::move(value), false); }

    const Mat& value() const { return node_->value; }
    Mat& mutable_value() { return node_->value; }
    const Mat& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    void zero_grad() { node_->grad.resize(0, 0); }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    bool defined() const { return static_cast<bool>(node_); }
    double scalar() const { return node_->value(0, 0); }

    // Seeds d(this)/d(this) = 1 and propagates; `this` must be 1x1.
    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    friend Var make_op(Mat, std::vector<Var>, std::function<void(Node&)>);
    std::shared_ptr<Node> node_;
};

// While alive on a thread, ops record no backward graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    static bool active();

private:
    bool previous_;
};

Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> backward);

// Arithmetic
Var matmul(const Var& a, const Var& b);
// Fixed summation order, so each output row is bitwise independent of the other rows.
Var matmul_rowwise(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);          // elementwise
Var add_row(const Var& a, const Var& row);    // a + broadcast(row), row is 1 x cols
Var mul_row(const Var& a, const Var& row);    // a * broadcast(row)
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var one_minus(const Var& a);

// Pointwise nonlinearities
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);

// Reductions (1x1 results)
Var sum(const Var& a);
Var mean(const Var& a);

// Layout
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Index start, Index count);
Var slice_rows(const Var& a, Index start, Index count);
Var gather_rows(const Var& a, const std::vector<Index>& rows);
Var reshape(const Var& a, Index rows, Index cols);  // row-major reinterpretation

// Geometry of a 2-D convolution mapping (in_c, in_h, in_w) -> (out_c, out_h, out_w).
struct ConvShape {
    int in_c = 1, in_h = 1, in_w = 1;
    int out_c = 1;
    int kernel = 1, stride = 1, pad = 0;
    int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
    int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
    int in_size() const { return in_c * in_h * in_w; }
    int out_size() const { return out_c * out_h() * out_w(); }
    int patch() const { return in_c * kernel * kernel; }
};

Mat im2col(const double* image, const ConvShape& s);
void col2im_add(const Mat& cols, const ConvShape& s, double* image);

// x: B x in_size, w: out_c x patch, b: 1 x out_c -> B x out_size
Var conv2d(const Var& x, const Var& w, const Var& b, const ConvShape& s);
// Adjoint of conv2d with shape `s`: x: B x out_size (of s), w: out_c x patch,
// b: 1 x in_c -> B x in_size (of s).
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, const ConvShape& s);

// For each consecutive block of `p.rows()` rows: out_block = p * x_block.
Var graph_mix(const Var& x, const Mat& p);

// Batch normalization across rows. Training variant reports the batch
// statistics (population variance) it used.
Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, Mat* batch_mean,
                     Mat* batch_var);
Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const Mat& running_mean,
                    const Mat& running_var, double eps);

}  // namespace vf::ag
