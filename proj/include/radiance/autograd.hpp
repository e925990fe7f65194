#pragma once

// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// Every value is a 2-D Eigen matrix. Operations build a tape implicitly through
// shared parent pointers; calling backward() on a 1x1 result walks the tape in
// reverse topological order and accumulates gradients into every node that
// requires them. Nodes that do not depend on any trainable leaf carry no tape.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace radiance::ag {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(const Matrix& g) {
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    double item() const {
        if (node_->value.size() != 1) {
            throw std::logic_error("item() on non-scalar of shape " + shape_string());
        }
        return node_->value(0, 0);
    }
    void zero_grad() { node_->grad.resize(0, 0); }
    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<Node>& node() const { return node_; }
    std::string shape_string() const {
        return "(" + std::to_string(rows()) + "x" + std::to_string(cols()) + ")";
    }

private:
    std::shared_ptr<Node> node_;
};

inline Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

inline Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

/// Trainable leaf.
inline Var parameter(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

namespace detail {

inline Var make(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& in : inputs) {
        if (in.requires_grad()) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) {
        n->parents.reserve(inputs.size());
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(fn);
    }
    return Var(std::move(n));
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_string() +
                                    " vs " + b.shape_string());
    }
}

inline void push(Node& self, std::size_t i, const Matrix& g) {
    auto& p = self.parents[i];
    if (p->requires_grad) p->accumulate(g);
}

}  // namespace detail

/// Runs reverse accumulation from a scalar root.
inline void backward(const Var& root) {
    if (root.rows() != 1 || root.cols() != 1) {
        throw std::logic_error("backward() requires a 1x1 root, got " + root.shape_string());
    }
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
    // Interior grads are only needed during the sweep.
    for (Node* n : order) {
        if (n->backward_fn) n->grad.resize(0, 0);
    }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "add");
    return detail::make(a.value() + b.value(), {a, b}, [](Node& s) {
        detail::push(s, 0, s.grad);
        detail::push(s, 1, s.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "sub");
    return detail::make(a.value() - b.value(), {a, b}, [](Node& s) {
        detail::push(s, 0, s.grad);
        detail::push(s, 1, -s.grad);
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same_shape(a, b, "mul");
    return detail::make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& s) {
        detail::push(s, 0, s.grad.cwiseProduct(s.parents[1]->value));
        detail::push(s, 1, s.grad.cwiseProduct(s.parents[0]->value));
    });
}

inline Var scale(const Var& a, double k) {
    return detail::make(a.value() * k, {a}, [k](Node& s) { detail::push(s, 0, s.grad * k); });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var add_scalar(const Var& a, double k) {
    return detail::make((a.value().array() + k).matrix(), {a},
                        [](Node& s) { detail::push(s, 0, s.grad); });
}

/// a (n x m) + row (1 x m) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("add_row: expected 1x" + std::to_string(a.cols()) + ", got " +
                                    row.shape_string());
    }
    Matrix v = a.value().rowwise() + row.value().row(0);
    return detail::make(std::move(v), {a, row}, [](Node& s) {
        detail::push(s, 0, s.grad);
        detail::push(s, 1, s.grad.colwise().sum());
    });
}

/// a (n x m) * col (n x 1) broadcast over columns.
inline Var mul_col(const Var& a, const Var& col) {
    if (col.cols() != 1 || col.rows() != a.rows()) {
        throw std::invalid_argument("mul_col: expected " + std::to_string(a.rows()) + "x1, got " +
                                    col.shape_string());
    }
    Matrix v = a.value().array().colwise() * col.value().col(0).array();
    return detail::make(std::move(v), {a, col}, [](Node& s) {
        const Matrix& av = s.parents[0]->value;
        const Matrix& cv = s.parents[1]->value;
        detail::push(s, 0, (s.grad.array().colwise() * cv.col(0).array()).matrix());
        detail::push(s, 1, s.grad.cwiseProduct(av).rowwise().sum());
    });
}

/// a (n x m) * row (1 x m) broadcast over rows.
inline Var mul_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("mul_row: expected 1x" + std::to_string(a.cols()) + ", got " +
                                    row.shape_string());
    }
    Matrix v = a.value().array().rowwise() * row.value().row(0).array();
    return detail::make(std::move(v), {a, row}, [](Node& s) {
        const Matrix& av = s.parents[0]->value;
        const Matrix& rv = s.parents[1]->value;
        detail::push(s, 0, (s.grad.array().rowwise() * rv.row(0).array()).matrix());
        detail::push(s, 1, s.grad.cwiseProduct(av).colwise().sum());
    });
}

/// Broadcast a 1x1 value to (rows x cols).
inline Var broadcast_scalar(const Var& a, Index rows, Index cols) {
    if (a.rows() != 1 || a.cols() != 1) throw std::invalid_argument("broadcast_scalar: not 1x1");
    return detail::make(Matrix::Constant(rows, cols, a.value()(0, 0)), {a}, [](Node& s) {
        detail::push(s, 0, Matrix::Constant(1, 1, s.grad.sum()));
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: " + a.shape_string() + " x " + b.shape_string());
    }
    return detail::make(a.value() * b.value(), {a, b}, [](Node& s) {
        if (s.parents[0]->requires_grad) s.parents[0]->accumulate(s.grad * s.parents[1]->value.transpose());
        if (s.parents[1]->requires_grad) s.parents[1]->accumulate(s.parents[0]->value.transpose() * s.grad);
    });
}

inline Var transpose(const Var& a) {
    return detail::make(a.value().transpose(), {a},
                        [](Node& s) { detail::push(s, 0, s.grad.transpose()); });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

inline Var exp(const Var& a) {
    Matrix v = a.value().array().exp().matrix();
    return detail::make(v, {a}, [](Node& s) { detail::push(s, 0, s.grad.cwiseProduct(s.value)); });
}

inline Var log(const Var& a) {
    return detail::make(a.value().array().log().matrix(), {a}, [](Node& s) {
        detail::push(s, 0, s.grad.cwiseQuotient(s.parents[0]->value));
    });
}

inline Var square(const Var& a) {
    return detail::make(a.value().cwiseAbs2(), {a}, [](Node& s) {
        detail::push(s, 0, 2.0 * s.grad.cwiseProduct(s.parents[0]->value));
    });
}

inline Var sqrt(const Var& a) {
    Matrix v = a.value().cwiseSqrt();
    return detail::make(v, {a}, [](Node& s) {
        detail::push(s, 0, (0.5 * s.grad.array() / s.value.array()).matrix());
    });
}

inline Var tanh(const Var& a) {
    Matrix v = a.value().array().tanh().matrix();
    return detail::make(v, {a}, [](Node& s) {
        detail::push(s, 0, (s.grad.array() * (1.0 - s.value.array().square())).matrix());
    });
}

inline Var sigmoid(const Var& a) {
    Matrix v = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
    return detail::make(v, {a}, [](Node& s) {
        detail::push(s, 0, (s.grad.array() * s.value.array() * (1.0 - s.value.array())).matrix());
    });
}

inline double softplus_value(double x) {
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline Var softplus(const Var& a) {
    Matrix v = a.value().unaryExpr([](double x) { return softplus_value(x); });
    return detail::make(std::move(v), {a}, [](Node& s) {
        Matrix sig = s.parents[0]->value.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
        detail::push(s, 0, s.grad.cwiseProduct(sig));
    });
}

/// x * sigmoid(x)
inline Var silu(const Var& a) {
    Matrix sig = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    Matrix v = a.value().cwiseProduct(sig);
    return detail::make(std::move(v), {a}, [sig](Node& s) {
        const Matrix& x = s.parents[0]->value;
        Matrix d = (sig.array() * (1.0 + x.array() * (1.0 - sig.array()))).matrix();
        detail::push(s, 0, s.grad.cwiseProduct(d));
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
    return detail::make(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& s) {
        const auto& p = s.parents[0]->value;
        detail::push(s, 0, Matrix::Constant(p.rows(), p.cols(), s.grad(0, 0)));
    });
}

inline Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

/// (n x m) -> (n x 1)
inline Var row_sum(const Var& a) {
    return detail::make(a.value().rowwise().sum(), {a}, [](Node& s) {
        const auto& p = s.parents[0]->value;
        detail::push(s, 0, s.grad.replicate(1, p.cols()));
    });
}

/// (n x m) -> (1 x m)
inline Var col_sum(const Var& a) {
    return detail::make(a.value().colwise().sum(), {a}, [](Node& s) {
        const auto& p = s.parents[0]->value;
        detail::push(s, 0, s.grad.replicate(p.rows(), 1));
    });
}

inline Var col_mean(const Var& a) {
    if (a.rows() == 0) throw std::invalid_argument("col_mean of empty matrix");
    return scale(col_sum(a), 1.0 / static_cast<double>(a.rows()));
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

inline Var gather_rows(const Var& a, const std::vector<Index>& idx) {
    Matrix v(static_cast<Index>(idx.size()), a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) v.row(static_cast<Index>(r)) = a.value().row(idx[r]);
    return detail::make(std::move(v), {a}, [idx](Node& s) {
        const auto& p = s.parents[0]->value;
        Matrix g = Matrix::Zero(p.rows(), p.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += s.grad.row(static_cast<Index>(r));
        detail::push(s, 0, g);
    });
}

/// Sums rows of a into n_out buckets: out[idx[r]] += a[r].
inline Var scatter_add_rows(const Var& a, const std::vector<Index>& idx, Index n_out) {
    if (static_cast<Index>(idx.size()) != a.rows()) {
        throw std::invalid_argument("scatter_add_rows: index length mismatch");
    }
    Matrix v = Matrix::Zero(n_out, a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) v.row(idx[r]) += a.value().row(static_cast<Index>(r));
    return detail::make(std::move(v), {a}, [idx](Node& s) {
        Matrix g(static_cast<Index>(idx.size()), s.grad.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) g.row(static_cast<Index>(r)) = s.grad.row(idx[r]);
        detail::push(s, 0, g);
    });
}

/// Picks one column per row: out[r] = a[r, idx[r]].
inline Var pick(const Var& a, const std::vector<Index>& idx) {
    if (static_cast<Index>(idx.size()) != a.rows()) throw std::invalid_argument("pick: length mismatch");
    Matrix v(a.rows(), 1);
    for (Index r = 0; r < a.rows(); ++r) v(r, 0) = a.value()(r, idx[static_cast<std::size_t>(r)]);
    return detail::make(std::move(v), {a}, [idx](Node& s) {
        const auto& p = s.parents[0]->value;
        Matrix g = Matrix::Zero(p.rows(), p.cols());
        for (Index r = 0; r < p.rows(); ++r) g(r, idx[static_cast<std::size_t>(r)]) = s.grad(r, 0);
        detail::push(s, 0, g);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Index rows = parts.front().rows();
    Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.cols();
    }
    Matrix v(rows, cols);
    std::vector<Index> offsets;
    Index off = 0;
    for (const auto& p : parts) {
        v.middleCols(off, p.cols()) = p.value();
        offsets.push_back(off);
        off += p.cols();
    }
    return detail::make(std::move(v), parts, [offsets](Node& s) {
        for (std::size_t i = 0; i < s.parents.size(); ++i) {
            if (!s.parents[i]->requires_grad) continue;
            s.parents[i]->accumulate(s.grad.middleCols(offsets[i], s.parents[i]->value.cols()));
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Index cols = parts.front().cols();
    Index rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
        rows += p.rows();
    }
    Matrix v(rows, cols);
    std::vector<Index> offsets;
    Index off = 0;
    for (const auto& p : parts) {
        v.middleRows(off, p.rows()) = p.value();
        offsets.push_back(off);
        off += p.rows();
    }
    return detail::make(std::move(v), parts, [offsets](Node& s) {
        for (std::size_t i = 0; i < s.parents.size(); ++i) {
            if (!s.parents[i]->requires_grad) continue;
            s.parents[i]->accumulate(s.grad.middleRows(offsets[i], s.parents[i]->value.rows()));
        }
    });
}

inline Var slice_cols(const Var& a, Index start, Index len) {
    if (start < 0 || start + len > a.cols()) throw std::out_of_range("slice_cols");
    return detail::make(a.value().middleCols(start, len), {a}, [start, len](Node& s) {
        const auto& p = s.parents[0]->value;
        Matrix g = Matrix::Zero(p.rows(), p.cols());
        g.middleCols(start, len) = s.grad;
        detail::push(s, 0, g);
    });
}

inline Var slice_rows(const Var& a, Index start, Index len) {
    if (start < 0 || start + len > a.rows()) throw std::out_of_range("slice_rows");
    return detail::make(a.value().middleRows(start, len), {a}, [start, len](Node& s) {
        const auto& p = s.parents[0]->value;
        Matrix g = Matrix::Zero(p.rows(), p.cols());
        g.middleRows(start, len) = s.grad;
        detail::push(s, 0, g);
    });
}

/// Repeats each column `times` consecutively: (n x h) -> (n x h*times).
inline Var repeat_cols(const Var& a, Index times) {
    Matrix v(a.rows(), a.cols() * times);
    for (Index c = 0; c < a.cols(); ++c) {
        for (Index k = 0; k < times; ++k) v.col(c * times + k) = a.value().col(c);
    }
    return detail::make(std::move(v), {a}, [times](Node& s) {
        const auto& p = s.parents[0]->value;
        Matrix g(p.rows(), p.cols());
        for (Index c = 0; c < p.cols(); ++c) g.col(c) = s.grad.middleCols(c * times, times).rowwise().sum();
        detail::push(s, 0, g);
    });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

/// Row-wise softmax.
inline Var softmax_rows(const Var& a) {
    Matrix v(a.rows(), a.cols());
    for (Index r = 0; r < a.rows(); ++r) {
        const double m = a.value().row(r).maxCoeff();
        RowVector e = (a.value().row(r).array() - m).exp().matrix();
        v.row(r) = e / e.sum();
    }
    return detail::make(std::move(v), {a}, [](Node& s) {
        Matrix g(s.value.rows(), s.value.cols());
        for (Index r = 0; r < s.value.rows(); ++r) {
            const double dot = s.grad.row(r).dot(s.value.row(r));
            g.row(r) = s.value.row(r).cwiseProduct((s.grad.row(r).array() - dot).matrix());
        }
        detail::push(s, 0, g);
    });
}

inline Var log_softmax_rows(const Var& a) {
    Matrix v(a.rows(), a.cols());
    for (Index r = 0; r < a.rows(); ++r) {
        const double m = a.value().row(r).maxCoeff();
        const double lse = m + std::log((a.value().row(r).array() - m).exp().sum());
        v.row(r) = (a.value().row(r).array() - lse).matrix();
    }
    return detail::make(std::move(v), {a}, [](Node& s) {
        Matrix g(s.value.rows(), s.value.cols());
        for (Index r = 0; r < s.value.rows(); ++r) {
            const double gs = s.grad.row(r).sum();
            g.row(r) = s.grad.row(r) - (s.value.row(r).array().exp() * gs).matrix();
        }
        detail::push(s, 0, g);
    });
}

/// Softmax over groups of rows sharing a segment id, independently per column.
/// Used for attention over graph neighbourhoods (rows = edges, cols = heads).
inline Var segment_softmax(const Var& scores, const std::vector<Index>& segment, Index n_segments) {
    if (static_cast<Index>(segment.size()) != scores.rows()) {
        throw std::invalid_argument("segment_softmax: segment length mismatch");
    }
    const Index cols = scores.cols();
    Matrix maxes = Matrix::Constant(n_segments, cols, -std::numeric_limits<double>::infinity());
    for (Index r = 0; r < scores.rows(); ++r) {
        const Index sg = segment[static_cast<std::size_t>(r)];
        maxes.row(sg) = maxes.row(sg).cwiseMax(scores.value().row(r));
    }
    Matrix e(scores.rows(), cols);
    Matrix denom = Matrix::Zero(n_segments, cols);
    for (Index r = 0; r < scores.rows(); ++r) {
        const Index sg = segment[static_cast<std::size_t>(r)];
        e.row(r) = (scores.value().row(r) - maxes.row(sg)).array().exp().matrix();
        denom.row(sg) += e.row(r);
    }
    for (Index r = 0; r < scores.rows(); ++r) {
        e.row(r) = e.row(r).cwiseQuotient(denom.row(segment[static_cast<std::size_t>(r)]));
    }
    return detail::make(std::move(e), {scores}, [segment, n_segments](Node& s) {
        Matrix dots = Matrix::Zero(n_segments, s.value.cols());
        for (Index r = 0; r < s.value.rows(); ++r) {
            dots.row(segment[static_cast<std::size_t>(r)]) += s.grad.row(r).cwiseProduct(s.value.row(r));
        }
        Matrix g(s.value.rows(), s.value.cols());
        for (Index r = 0; r < s.value.rows(); ++r) {
            g.row(r) = s.value.row(r).cwiseProduct(s.grad.row(r) - dots.row(segment[static_cast<std::size_t>(r)]));
        }
        detail::push(s, 0, g);
    });
}

/// Row-wise layer normalization without affine parameters.
inline Var layer_norm_rows(const Var& a, double eps = 1e-9) {
    const Index n = a.cols();
    Matrix v(a.rows(), n);
    Eigen::VectorXd inv_std(a.rows());
    for (Index r = 0; r < a.rows(); ++r) {
        const double m = a.value().row(r).mean();
        RowVector c = (a.value().row(r).array() - m).matrix();
        const double var = c.squaredNorm() / static_cast<double>(n);
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        v.row(r) = c * inv_std(r);
    }
    return detail::make(std::move(v), {a}, [inv_std, n](Node& s) {
        Matrix g(s.value.rows(), n);
        for (Index r = 0; r < s.value.rows(); ++r) {
            const RowVector& gy = s.grad.row(r);
            const RowVector& y = s.value.row(r);
            const double mg = gy.mean();
            const double mgy = gy.dot(y) / static_cast<double>(n);
            g.row(r) = inv_std(r) * (gy.array() - mg - y.array() * mgy).matrix();
        }
        detail::push(s, 0, g);
    });
}

// ---------------------------------------------------------------------------
// Composite helpers

/// Per-row squared Euclidean norm: (n x m) -> (n x 1).
inline Var row_sq_norm(const Var& a) { return row_sum(square(a)); }

/// Per-row norm with a smoothing floor so the gradient stays finite at zero.
inline Var row_norm(const Var& a, double eps = 1e-12) { return sqrt(add_scalar(row_sq_norm(a), eps)); }

/// Mean cross-entropy of logits (n x C) against integer targets.
inline Var cross_entropy(const Var& logits, const std::vector<Index>& targets) {
    return neg(mean(pick(log_softmax_rows(logits), targets)));
}

inline Var mse(const Var& pred, const Var& target) { return mean(square(sub(pred, target))); }

}  // namespace radiance::ag
