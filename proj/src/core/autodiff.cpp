#include "vf/core/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>

#include "vf/core/errors.hpp"

namespace vf::ag {

namespace {

thread_local bool g_no_grad = false;

using RowMap = Eigen::Map<Mat>;
using ConstRowMap = Eigen::Map<const Mat>;

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
}

}  // namespace

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

Var make_op(Mat value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    Var out;
    out.node_ = std::make_shared<Node>();
    out.node_->value = std::move(value);
    if (g_no_grad) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node());
    out.node_->backward_fn = std::move(backward);
    return out;
}

void Var::backward() const {
    if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, bool>> stack{{node_.get(), false}};
    while (!stack.empty()) {
        auto [n, expanded] = stack.back();
        stack.pop_back();
        if (expanded) {
            order.push_back(n);
            continue;
        }
        if (!seen.insert(n).second) continue;
        stack.emplace_back(n, true);
        for (auto& p : n->parents)
            if (p->requires_grad && !seen.count(p.get())) stack.emplace_back(p.get(), false);
    }
    node_->accumulate(Mat::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- arithmetic

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
    Mat v = a.value() * b.value();
    return make_op(std::move(v), {a, b}, [](Node& n) {
        Node& a = parent(n, 0);
        Node& b = parent(n, 1);
        if (a.requires_grad) a.grad_buffer().noalias() += n.grad * b.value.transpose();
        if (b.requires_grad) b.grad_buffer().noalias() += a.value.transpose() * n.grad;
    });
}

Var matmul_rowwise(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
    const Mat& x = a.value();
    const Mat& w = b.value();
    Mat v = Mat::Zero(x.rows(), w.cols());
    for (Index i = 0; i < x.rows(); ++i)
        for (Index k = 0; k < x.cols(); ++k) {
            const double s = x(i, k);
            for (Index j = 0; j < w.cols(); ++j) v(i, j) += s * w(k, j);
        }
    return make_op(std::move(v), {a, b}, [](Node& n) {
        Node& a = parent(n, 0);
        Node& b = parent(n, 1);
        if (a.requires_grad) a.grad_buffer().noalias() += n.grad * b.value.transpose();
        if (b.requires_grad) b.grad_buffer().noalias() += a.value.transpose() * n.grad;
    });
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
        for (auto& p : n.parents)
            if (p->requires_grad) p->accumulate(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
        if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
        if (parent(n, 1).requires_grad) parent(n, 1).accumulate(-n.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Mat v = a.value().cwiseProduct(b.value());
    return make_op(std::move(v), {a, b}, [](Node& n) {
        Node& a = parent(n, 0);
        Node& b = parent(n, 1);
        if (a.requires_grad) a.accumulate(n.grad.cwiseProduct(b.value));
        if (b.requires_grad) b.accumulate(n.grad.cwiseProduct(a.value));
    });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row width mismatch");
    Mat v = a.value().rowwise() + row.value().row(0);
    return make_op(std::move(v), {a, row}, [](Node& n) {
        if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
        if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad.colwise().sum());
    });
}

Var mul_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: row width mismatch");
    Mat v = a.value().array().rowwise() * row.value().row(0).array();
    return make_op(std::move(v), {a, row}, [](Node& n) {
        Node& a = parent(n, 0);
        Node& r = parent(n, 1);
        if (a.requires_grad) a.accumulate(n.grad.array().rowwise() * r.value.row(0).array());
        if (r.requires_grad) r.accumulate(n.grad.cwiseProduct(a.value).colwise().sum());
    });
}

Var scale(const Var& a, double s) {
    return make_op(a.value() * s, {a}, [s](Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
    Mat v = a.value().array() + s;
    return make_op(std::move(v), {a}, [](Node& n) { parent(n, 0).accumulate(n.grad); });
}

Var one_minus(const Var& a) {
    Mat v = 1.0 - a.value().array();
    return make_op(std::move(v), {a}, [](Node& n) { parent(n, 0).accumulate(-n.grad); });
}

// ---------------------------------------------------------------- pointwise

Var sigmoid(const Var& a) {
    Mat v = (1.0 + (-a.value().array()).exp()).inverse();
    return make_op(std::move(v), {a}, [](Node& n) {
        parent(n, 0).accumulate(n.grad.array() * n.value.array() * (1.0 - n.value.array()));
    });
}

Var tanh(const Var& a) {
    Mat v = a.value().array().tanh();
    return make_op(std::move(v), {a}, [](Node& n) {
        parent(n, 0).accumulate(n.grad.array() * (1.0 - n.value.array().square()));
    });
}

Var relu(const Var& a) {
    Mat v = a.value().cwiseMax(0.0);
    return make_op(std::move(v), {a}, [](Node& n) {
        Node& a = parent(n, 0);
        a.accumulate(Mat((a.value.array() > 0.0).select(n.grad.array(), 0.0)));
    });
}

Var exp(const Var& a) {
    Mat v = a.value().array().exp();
    return make_op(std::move(v), {a}, [](Node& n) { parent(n, 0).accumulate(n.grad.cwiseProduct(n.value)); });
}

Var square(const Var& a) {
    Mat v = a.value().array().square();
    return make_op(std::move(v), {a}, [](Node& n) {
        Node& a = parent(n, 0);
        a.accumulate(2.0 * n.grad.cwiseProduct(a.value));
    });
}

Var abs(const Var& a) {
    Mat v = a.value().cwiseAbs();
    return make_op(std::move(v), {a}, [](Node& n) {
        Node& a = parent(n, 0);
        a.accumulate(n.grad.cwiseProduct(Mat(a.value.array().sign())));
    });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& a) {
    Mat v(1, 1);
    v(0, 0) = a.value().sum();
    return make_op(std::move(v), {a}, [](Node& n) {
        Node& a = parent(n, 0);
        a.grad_buffer().array() += n.grad(0, 0);
    });
}

Var mean(const Var& a) {
    const double count = static_cast<double>(a.value().size());
    Mat v(1, 1);
    v(0, 0) = a.value().sum() / count;
    return make_op(std::move(v), {a}, [count](Node& n) {
        Node& a = parent(n, 0);
        a.grad_buffer().array() += n.grad(0, 0) / count;
    });
}

// ---------------------------------------------------------------- layout

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const Index rows = parts[0].rows();
    Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
        cols += p.cols();
    }
    Mat v(rows, cols);
    Index c = 0;
    for (const auto& p : parts) {
        v.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return make_op(std::move(v), parts, [](Node& n) {
        Index c = 0;
        for (auto& p : n.parents) {
            const Index w = p->value.cols();
            if (p->requires_grad) p->accumulate(n.grad.middleCols(c, w));
            c += w;
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const Index cols = parts[0].cols();
    Index rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
        rows += p.rows();
    }
    Mat v(rows, cols);
    Index r = 0;
    for (const auto& p : parts) {
        v.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return make_op(std::move(v), parts, [](Node& n) {
        Index r = 0;
        for (auto& p : n.parents) {
            const Index h = p->value.rows();
            if (p->requires_grad) p->accumulate(n.grad.middleRows(r, h));
            r += h;
        }
    });
}

Var slice_cols(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
    Mat v = a.value().middleCols(start, count);
    return make_op(std::move(v), {a}, [start, count](Node& n) {
        parent(n, 0).grad_buffer().middleCols(start, count) += n.grad;
    });
}

Var slice_rows(const Var& a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
    Mat v = a.value().middleRows(start, count);
    return make_op(std::move(v), {a}, [start, count](Node& n) {
        parent(n, 0).grad_buffer().middleRows(start, count) += n.grad;
    });
}

Var gather_rows(const Var& a, const std::vector<Index>& rows) {
    Mat v(static_cast<Index>(rows.size()), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
        v.row(static_cast<Index>(i)) = a.value().row(rows[i]);
    }
    return make_op(std::move(v), {a}, [rows](Node& n) {
        Mat& g = parent(n, 0).grad_buffer();
        for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += n.grad.row(static_cast<Index>(i));
    });
}

Var reshape(const Var& a, Index rows, Index cols) {
    if (rows * cols != a.value().size()) throw ShapeError("reshape: element count mismatch");
    Mat v = ConstRowMap(a.value().data(), rows, cols);
    const Index r0 = a.rows(), c0 = a.cols();
    return make_op(std::move(v), {a}, [r0, c0](Node& n) {
        parent(n, 0).accumulate(ConstRowMap(n.grad.data(), r0, c0));
    });
}

// ---------------------------------------------------------------- convolution

Mat im2col(const double* image, const ConvShape& s) {
    const int oh = s.out_h(), ow = s.out_w(), k = s.kernel;
    Mat cols = Mat::Zero(s.patch(), oh * ow);
    for (int c = 0; c < s.in_c; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const Index r = (c * k + ki) * k + kj;
                for (int oi = 0; oi < oh; ++oi) {
                    const int ii = oi * s.stride - s.pad + ki;
                    if (ii < 0 || ii >= s.in_h) continue;
                    for (int oj = 0; oj < ow; ++oj) {
                        const int jj = oj * s.stride - s.pad + kj;
                        if (jj < 0 || jj >= s.in_w) continue;
                        cols(r, oi * ow + oj) = image[(c * s.in_h + ii) * s.in_w + jj];
                    }
                }
            }
    return cols;
}

void col2im_add(const Mat& cols, const ConvShape& s, double* image) {
    const int oh = s.out_h(), ow = s.out_w(), k = s.kernel;
    for (int c = 0; c < s.in_c; ++c)
        for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
                const Index r = (c * k + ki) * k + kj;
                for (int oi = 0; oi < oh; ++oi) {
                    const int ii = oi * s.stride - s.pad + ki;
                    if (ii < 0 || ii >= s.in_h) continue;
                    for (int oj = 0; oj < ow; ++oj) {
                        const int jj = oj * s.stride - s.pad + kj;
                        if (jj < 0 || jj >= s.in_w) continue;
                        image[(c * s.in_h + ii) * s.in_w + jj] += cols(r, oi * ow + oj);
                    }
                }
            }
}

Var conv2d(const Var& x, const Var& w, const Var& b, const ConvShape& s) {
    if (x.cols() != s.in_size()) throw ShapeError("conv2d: input width mismatch");
    if (w.rows() != s.out_c || w.cols() != s.patch()) throw ShapeError("conv2d: kernel shape mismatch");
    if (b.rows() != 1 || b.cols() != s.out_c) throw ShapeError("conv2d: bias shape mismatch");
    const Index batch = x.rows();
    const int hw = s.out_h() * s.out_w();
    Mat v(batch, s.out_size());
    for (Index i = 0; i < batch; ++i) {
        RowMap out(v.row(i).data(), s.out_c, hw);
        out.noalias() = w.value() * im2col(x.value().row(i).data(), s);
        out.colwise() += b.value().row(0).transpose();
    }
    return make_op(std::move(v), {x, w, b}, [s, hw](Node& n) {
        Node& x = parent(n, 0);
        Node& w = parent(n, 1);
        Node& b = parent(n, 2);
        const Index batch = x.value.rows();
        if (x.requires_grad) x.grad_buffer();
        if (w.requires_grad) w.grad_buffer();
        if (b.requires_grad) b.grad_buffer();
        for (Index i = 0; i < batch; ++i) {
            ConstRowMap g(n.grad.row(i).data(), s.out_c, hw);
            if (w.requires_grad) w.grad.noalias() += g * im2col(x.value.row(i).data(), s).transpose();
            if (b.requires_grad) b.grad.row(0) += g.rowwise().sum().transpose();
            if (x.requires_grad) {
                Mat dcols = w.value.transpose() * g;
                col2im_add(dcols, s, x.grad.row(i).data());
            }
        }
    });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, const ConvShape& s) {
    if (x.cols() != s.out_size()) throw ShapeError("conv_transpose2d: input width mismatch");
    if (w.rows() != s.out_c || w.cols() != s.patch()) throw ShapeError("conv_transpose2d: kernel shape mismatch");
    if (b.rows() != 1 || b.cols() != s.in_c) throw ShapeError("conv_transpose2d: bias shape mismatch");
    const Index batch = x.rows();
    const int hw_small = s.out_h() * s.out_w();
    const int hw_big = s.in_h * s.in_w;
    Mat v = Mat::Zero(batch, s.in_size());
    for (Index i = 0; i < batch; ++i) {
        ConstRowMap xi(x.value().row(i).data(), s.out_c, hw_small);
        Mat cols = w.value().transpose() * xi;
        col2im_add(cols, s, v.row(i).data());
        RowMap out(v.row(i).data(), s.in_c, hw_big);
        out.colwise() += b.value().row(0).transpose();
    }
    return make_op(std::move(v), {x, w, b}, [s, hw_small, hw_big](Node& n) {
        Node& x = parent(n, 0);
        Node& w = parent(n, 1);
        Node& b = parent(n, 2);
        const Index batch = x.value.rows();
        if (x.requires_grad) x.grad_buffer();
        if (w.requires_grad) w.grad_buffer();
        if (b.requires_grad) b.grad_buffer();
        for (Index i = 0; i < batch; ++i) {
            Mat gcols = im2col(n.grad.row(i).data(), s);
            if (b.requires_grad) {
                ConstRowMap g(n.grad.row(i).data(), s.in_c, hw_big);
                b.grad.row(0) += g.rowwise().sum().transpose();
            }
            if (x.requires_grad) {
                RowMap dx(x.grad.row(i).data(), s.out_c, hw_small);
                dx.noalias() += w.value * gcols;
            }
            if (w.requires_grad) {
                ConstRowMap xi(x.value.row(i).data(), s.out_c, hw_small);
                w.grad.noalias() += xi * gcols.transpose();
            }
        }
    });
}

// ---------------------------------------------------------------- graph

Var graph_mix(const Var& x, const Mat& p) {
    const Index n = p.rows();
    if (p.cols() != n || n == 0 || x.rows() % n != 0) throw ShapeError("graph_mix: rows must be a multiple of node count");
    const Index blocks = x.rows() / n;
    Mat v(x.rows(), x.cols());
    for (Index b = 0; b < blocks; ++b) v.middleRows(b * n, n).noalias() = p * x.value().middleRows(b * n, n);
    return make_op(std::move(v), {x}, [p, n, blocks](Node& nd) {
        Mat& g = parent(nd, 0).grad_buffer();
        for (Index b = 0; b < blocks; ++b) g.middleRows(b * n, n).noalias() += p.transpose() * nd.grad.middleRows(b * n, n);
    });
}

// ---------------------------------------------------------------- batch norm

Var batch_norm_train(const Var& x, const Var& gamma, const Var& beta, double eps, Mat* batch_mean,
                     Mat* batch_var) {
    if (gamma.cols() != x.cols() || beta.cols() != x.cols()) throw ShapeError("batch_norm: width mismatch");
    const double m = static_cast<double>(x.rows());
    Mat mu = x.value().colwise().mean();
    Mat centered = x.value().rowwise() - mu.row(0);
    Mat var = centered.array().square().colwise().sum() / m;
    Mat inv_std = (var.array() + eps).rsqrt();
    Mat xhat = centered.array().rowwise() * inv_std.row(0).array();
    Mat v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    if (batch_mean) *batch_mean = mu;
    if (batch_var) *batch_var = var;
    return make_op(std::move(v), {x, gamma, beta}, [xhat, inv_std, m](Node& n) {
        Node& x = parent(n, 0);
        Node& gamma = parent(n, 1);
        Node& beta = parent(n, 2);
        if (beta.requires_grad) beta.accumulate(n.grad.colwise().sum());
        if (gamma.requires_grad) gamma.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
        if (x.requires_grad) {
            Mat dxhat = n.grad.array().rowwise() * gamma.value.row(0).array();
            Mat mean_d = dxhat.colwise().mean();
            Mat mean_dx = dxhat.cwiseProduct(xhat).colwise().mean();
            Mat dx = (dxhat.rowwise() - mean_d.row(0)) - Mat(xhat.array().rowwise() * mean_dx.row(0).array());
            x.accumulate(dx.array().rowwise() * inv_std.row(0).array());
        }
        (void)m;
    });
}

Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const Mat& running_mean,
                    const Mat& running_var, double eps) {
    if (gamma.cols() != x.cols() || beta.cols() != x.cols()) throw ShapeError("batch_norm: width mismatch");
    Mat inv_std = (running_var.array() + eps).rsqrt();
    Mat xhat = (x.value().rowwise() - running_mean.row(0)).array().rowwise() * inv_std.row(0).array();
    Mat v = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return make_op(std::move(v), {x, gamma, beta}, [xhat, inv_std](Node& n) {
        Node& x = parent(n, 0);
        Node& gamma = parent(n, 1);
        Node& beta = parent(n, 2);
        if (beta.requires_grad) beta.accumulate(n.grad.colwise().sum());
        if (gamma.requires_grad) gamma.accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
        if (x.requires_grad)
            x.accumulate((n.grad.array().rowwise() * (gamma.value.row(0).array() * inv_std.row(0).array())).matrix());
    });
}

}  // namespace vf::ag
