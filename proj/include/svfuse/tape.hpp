#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace svfuse::nn {

/// Row-major dense matrix; rows are samples (pixels, voxels, queries).
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using SpMat = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;
using IndexTable = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << "[" << r << "x" << c << "]";
  return os.str();
}

/// A named, trainable parameter that outlives individual tapes.
template <typename Scalar>
struct Tensor {
  std::string name;
  Mat<Scalar> value;
  mutable Mat<Scalar> grad;
  bool requires_grad = true;

  Tensor() = default;
  Tensor(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Mat<Scalar>::Zero(rows, cols)), grad(Mat<Scalar>::Zero(rows, cols)) {}

  std::vector<Eigen::Index> shape() const { return {value.rows(), value.cols()}; }
  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Tape;

/// Handle to a node on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Mat<Scalar>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr; }
};

/// Reverse-mode record. Nodes are appended in evaluation order, so walking
/// them backwards is a valid reverse topological order.
template <typename Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;
  using Backward = std::function<void(Tape&, int self, const M& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<Scalar> constant(M value) { return push(std::move(value), false, nullptr); }

  Var<Scalar> leaf(M value, bool requires_grad) { return push(std::move(value), requires_grad && grad_enabled_, nullptr); }

  /// Binds a parameter; gradients flow into `t.grad` on backward().
  Var<Scalar> param(const Tensor<Scalar>& t) {
    if (auto it = param_nodes_.find(&t); it != param_nodes_.end()) return Var<Scalar>{this, it->second};
    Var<Scalar> v = push(t.value, t.requires_grad && grad_enabled_, nullptr);
    nodes_[v.id].param = &t;
    param_nodes_[&t] = v.id;
    return v;
  }

  /// Appends a node. `backward` is dropped unless some input needs a gradient.
  Var<Scalar> push(M value, bool needs_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && grad_enabled_;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const M& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  bool needs_grad(const Var<Scalar>& v) const { return nodes_[v.id].needs_grad; }

  /// Gradient of a node after backward(); zero matrix if none reached it.
  M grad(const Var<Scalar>& v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(int id, const M& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Mutable gradient buffer for sparse accumulation (allocated zeroed).
  M* grad_buffer(int id) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.size() == 0) n.grad = M::Zero(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 (or `seed` for non-scalar roots) and sweeps.
  void backward(const Var<Scalar>& root, const M* seed = nullptr) {
    if (seed == nullptr && nodes_[root.id].value.size() != 1) {
      throw ShapeError("backward: root must be scalar, got " +
                       shape_str(nodes_[root.id].value.rows(), nodes_[root.id].value.cols()));
    }
    accumulate(root.id, seed ? *seed : M::Ones(1, 1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      // callbacks only touch nodes with smaller ids, so n.grad stays put
      if (n.backward) n.backward(*this, i, n.grad);
      if (n.param) {
        if (n.param->grad.size() == 0) n.param->grad = M::Zero(n.value.rows(), n.value.cols());
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M value;
    M grad;
    Backward backward;
    const Tensor<Scalar>* param = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<Scalar>*, int> param_nodes_;
  bool grad_enabled_;
};

template <typename Scalar>
const Mat<Scalar>& Var<Scalar>::value() const {
  return tape->value(id);
}

namespace detail {
template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}
template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
}
template <typename Scalar>
bool any_grad(std::initializer_list<Var<Scalar>> vs) {
  for (const auto& v : vs)
    if (v.tape->needs_grad(v)) return true;
  return false;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " + shape_str(b.rows(), b.cols()));
  }
  Tape<Scalar>& t = *a.tape;
  Mat<Scalar> out = a.value() * b.value();
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), detail::any_grad({a, b}), [ia, ib](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), detail::any_grad({a, b}), [ia, ib](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), detail::any_grad({a, b}), [ia, ib](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, -g);
  });
}

/// Elementwise product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}),
                      [ia, ib](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                        if (tp.needs_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                        if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                      });
}

/// a + 1·row, broadcasting a 1xC row over all rows of a.
template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  detail::require_same_tape(a, row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(row.rows(), row.cols()));
  }
  Mat<Scalar> out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id, ib = row.id;
  return a.tape->push(std::move(out), detail::any_grad({a, row}), [ia, ib](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    tp.accumulate(ia, g);
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.colwise().sum());
  });
}

/// a ⊙ (1·row), broadcasting a 1xC row.
template <typename Scalar>
Var<Scalar> mul_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  detail::require_same_tape(a, row, "mul_row");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("mul_row: shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(row.rows(), row.cols()));
  }
  Mat<Scalar> out = a.value().array().rowwise() * row.value().row(0).array();
  const int ia = a.id, ib = row.id;
  return a.tape->push(std::move(out), detail::any_grad({a, row}), [ia, ib](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.array().rowwise() * tp.value(ib).row(0).array());
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)).colwise().sum());
  });
}

/// a ⊙ (col·1), broadcasting an Nx1 column over all columns of a.
template <typename Scalar>
Var<Scalar> mul_col(const Var<Scalar>& a, const Var<Scalar>& col) {
  detail::require_same_tape(a, col, "mul_col");
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw ShapeError("mul_col: shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(col.rows(), col.cols()));
  }
  Mat<Scalar> out = a.value().array().colwise() * col.value().col(0).array();
  const int ia = a.id, ib = col.id;
  return a.tape->push(std::move(out), detail::any_grad({a, col}), [ia, ib](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.array().colwise() * tp.value(ib).col(0).array());
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)).rowwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  const int ia = a.id;
  return a.tape->push(a.value() * s, detail::any_grad({a}),
                      [ia, s](Tape<Scalar>& tp, int, const Mat<Scalar>& g) { tp.accumulate(ia, g * s); });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  const int ia = a.id;
  return a.tape->push((a.value().array() + s).matrix(), detail::any_grad({a}),
                      [ia](Tape<Scalar>& tp, int, const Mat<Scalar>& g) { tp.accumulate(ia, g); });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Mat<Scalar> out = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape<Scalar>& tp, int self, const Mat<Scalar>& g) {
    const auto& y = tp.value(self).array();
    tp.accumulate(ia, (g.array() * y * (Scalar(1) - y)).matrix());
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  Mat<Scalar> out = a.value().array().tanh().matrix();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape<Scalar>& tp, int self, const Mat<Scalar>& g) {
    const auto& y = tp.value(self).array();
    tp.accumulate(ia, (g.array() * (Scalar(1) - y.square())).matrix());
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  Mat<Scalar> out = a.value().cwiseMax(Scalar(0));
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    tp.accumulate(ia, (tp.value(ia).array() > Scalar(0)).select(g, Scalar(0)).matrix());
  });
}

template <typename Scalar>
Var<Scalar> sin(const Var<Scalar>& a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().sin().matrix(), detail::any_grad({a}),
                      [ia](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                        tp.accumulate(ia, (g.array() * tp.value(ia).array().cos()).matrix());
                      });
}

template <typename Scalar>
Var<Scalar> cos(const Var<Scalar>& a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().cos().matrix(), detail::any_grad({a}),
                      [ia](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                        tp.accumulate(ia, (-g.array() * tp.value(ia).array().sin()).matrix());
                      });
}

/// Clamps to [lo, hi]; gradient passes only where the input is inside.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& a, Scalar lo, Scalar hi) {
  const int ia = a.id;
  return a.tape->push(a.value().cwiseMax(lo).cwiseMin(hi), detail::any_grad({a}),
                      [ia, lo, hi](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                        const auto& x = tp.value(ia).array();
                        tp.accumulate(ia, ((x >= lo) && (x <= hi)).select(g, Scalar(0)).matrix());
                      });
}

/// Row-wise softmax (softmax over the last dimension).
template <typename Scalar>
Var<Scalar> softmax_lastdim(const Var<Scalar>& a) {
  Mat<Scalar> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const Scalar m = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape<Scalar>& tp, int self, const Mat<Scalar>& g) {
    const Mat<Scalar>& y = tp.value(self);
    Mat<Scalar> dx = y.cwiseProduct(g);
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = dx.rowwise().sum();
    dx -= (y.array().colwise() * dots.array()).matrix();
    tp.accumulate(ia, dx);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool grad = false;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p, "concat");
    if (p.rows() != rows) {
      throw ShapeError("concat: shape mismatch " + shape_str(rows, parts.front().cols()) + " vs " +
                       shape_str(p.rows(), p.cols()));
    }
    cols += p.cols();
    grad = grad || p.tape->needs_grad(p);
  }
  Mat<Scalar> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    layout.emplace_back(p.id, c);
    c += p.cols();
  }
  return parts.front().tape->push(std::move(out), grad,
                                  [layout](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                                    for (const auto& [id, start] : layout) {
                                      if (tp.needs_grad(id)) tp.accumulate(id, g.middleCols(start, tp.value(id).cols()));
                                    }
                                  });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts) {
  return concat_cols(parts);
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(a.rows(), a.cols()));
  }
  const int ia = a.id;
  return a.tape->push(a.value().middleCols(start, count), detail::any_grad({a}),
                      [ia, start, count](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                        Mat<Scalar>* buf = tp.grad_buffer(ia);
                        if (buf) buf->middleCols(start, count) += g;
                      });
}

template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  return slice_cols(a, start, count);
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: range outside " + shape_str(a.rows(), a.cols()));
  }
  const int ia = a.id;
  return a.tape->push(a.value().middleRows(start, count), detail::any_grad({a}),
                      [ia, start, count](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                        Mat<Scalar>* buf = tp.grad_buffer(ia);
                        if (buf) buf->middleRows(start, count) += g;
                      });
}

/// Row gather: out.row(r) = a.row(index[r]), zeros where index[r] < 0.
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& a, std::shared_ptr<const std::vector<int>> index) {
  Mat<Scalar> out = Mat<Scalar>::Zero(static_cast<Eigen::Index>(index->size()), a.cols());
  const auto& av = a.value();
  for (std::size_t r = 0; r < index->size(); ++r) {
    const int s = (*index)[r];
    if (s >= 0) out.row(static_cast<Eigen::Index>(r)) = av.row(s);
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, index](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    Mat<Scalar>* buf = tp.grad_buffer(ia);
    if (!buf) return;
    for (std::size_t r = 0; r < index->size(); ++r) {
      const int s = (*index)[r];
      if (s >= 0) buf->row(s) += g.row(static_cast<Eigen::Index>(r));
    }
  });
}

/// Neighbourhood gather (im2col): out.row(r) = [a.row(t(r,0)), ..., a.row(t(r,K-1))],
/// zero blocks where t(r,k) < 0.
template <typename Scalar>
Var<Scalar> gather_neighbors(const Var<Scalar>& a, std::shared_ptr<const IndexTable> table) {
  const Eigen::Index C = a.cols();
  const Eigen::Index K = table->cols();
  Mat<Scalar> out = Mat<Scalar>::Zero(table->rows(), K * C);
  const auto& av = a.value();
  for (Eigen::Index r = 0; r < table->rows(); ++r) {
    for (Eigen::Index k = 0; k < K; ++k) {
      const int s = (*table)(r, k);
      if (s >= 0) out.block(r, k * C, 1, C) = av.row(s);
    }
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, table, C, K](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    Mat<Scalar>* buf = tp.grad_buffer(ia);
    if (!buf) return;
    for (Eigen::Index r = 0; r < table->rows(); ++r) {
      for (Eigen::Index k = 0; k < K; ++k) {
        const int s = (*table)(r, k);
        if (s >= 0) buf->row(s) += g.block(r, k * C, 1, C);
      }
    }
  });
}

/// Constant sparse operator applied on the left: out = S a.
template <typename Scalar>
Var<Scalar> spmm(std::shared_ptr<const SpMat<Scalar>> S, const Var<Scalar>& a) {
  if (S->cols() != a.rows()) {
    throw ShapeError("spmm: shape mismatch " + shape_str(S->rows(), S->cols()) + " vs " + shape_str(a.rows(), a.cols()));
  }
  Mat<Scalar> out = (*S) * a.value();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, S](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, Mat<Scalar>(S->transpose() * g));
  });
}

/// Max over rows grouped by segment id; empty segments yield zero rows.
template <typename Scalar>
Var<Scalar> segment_max(const Var<Scalar>& a, const std::vector<int>& segment, Eigen::Index num_segments) {
  if (static_cast<Eigen::Index>(segment.size()) != a.rows()) {
    throw ShapeError("segment_max: " + std::to_string(segment.size()) + " ids for " + shape_str(a.rows(), a.cols()));
  }
  const Eigen::Index C = a.cols();
  Mat<Scalar> out = Mat<Scalar>::Constant(num_segments, C, -std::numeric_limits<Scalar>::infinity());
  auto argmax = std::make_shared<IndexTable>(IndexTable::Constant(num_segments, C, -1));
  const auto& av = a.value();
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const int s = segment[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < C; ++c) {
      if (av(r, c) > out(s, c)) {
        out(s, c) = av(r, c);
        (*argmax)(s, c) = static_cast<int>(r);
      }
    }
  }
  for (Eigen::Index s = 0; s < num_segments; ++s)
    for (Eigen::Index c = 0; c < C; ++c)
      if ((*argmax)(s, c) < 0) out(s, c) = Scalar(0);
  const int ia = a.id;
  std::shared_ptr<const IndexTable> am = argmax;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, am, C](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    Mat<Scalar>* buf = tp.grad_buffer(ia);
    if (!buf) return;
    for (Eigen::Index s = 0; s < am->rows(); ++s)
      for (Eigen::Index c = 0; c < C; ++c)
        if ((*am)(s, c) >= 0) (*buf)((*am)(s, c), c) += g(s, c);
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Mat<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    const auto& x = tp.value(ia);
    tp.accumulate(ia, Mat<Scalar>::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  if (a.value().size() == 0) throw ShapeError("mean: empty operand");
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Column means over rows: 1xC.
template <typename Scalar>
Var<Scalar> mean_rows(const Var<Scalar>& a) {
  if (a.rows() == 0) throw ShapeError("mean_rows: no rows");
  Mat<Scalar> out = a.value().colwise().mean();
  const int ia = a.id;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(a.rows());
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, inv](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    const auto& x = tp.value(ia);
    Mat<Scalar> d(x.rows(), x.cols());
    d.rowwise() = g.row(0) * inv;
    tp.accumulate(ia, d);
  });
}

/// Mean squared error over all elements.
template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a, b, "mse");
  const Var<Scalar> d = sub(a, b);
  return mean(mul(d, d));
}

/// Mean absolute error over all elements.
template <typename Scalar>
Var<Scalar> l1(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_tape(a, b, "l1");
  detail::require_same_shape(a, b, "l1");
  if (a.value().size() == 0) throw ShapeError("l1: empty operand");
  const Mat<Scalar> diff = a.value() - b.value();
  Mat<Scalar> out(1, 1);
  out(0, 0) = diff.cwiseAbs().mean();
  const int ia = a.id, ib = b.id;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(diff.size());
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib, inv](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
    const Mat<Scalar> s = (tp.value(ia) - tp.value(ib)).array().sign().matrix() * (g(0, 0) * inv);
    tp.accumulate(ia, s);
    tp.accumulate(ib, -s);
  });
}

/// Weighted binary cross-entropy on logits: sum_i w_i bce(x_i, y_i) / sum_i w_i.
/// `weights` may be empty for uniform weighting.
template <typename Scalar>
Var<Scalar> bce_with_logits(const Var<Scalar>& logits, const Mat<Scalar>& targets, const Mat<Scalar>& weights = Mat<Scalar>()) {
  const auto& x = logits.value();
  if (targets.rows() != x.rows() || targets.cols() != x.cols()) {
    throw ShapeError("bce_with_logits: shape mismatch " + shape_str(x.rows(), x.cols()) + " vs " +
                     shape_str(targets.rows(), targets.cols()));
  }
  Mat<Scalar> w = weights.size() ? weights : Mat<Scalar>::Ones(x.rows(), x.cols());
  if (w.rows() != x.rows() || w.cols() != x.cols()) {
    throw ShapeError("bce_with_logits: weight shape " + shape_str(w.rows(), w.cols()));
  }
  const Scalar wsum = w.sum();
  if (!(wsum > Scalar(0))) throw ShapeError("bce_with_logits: weights sum to zero");
  // max(x,0) - x y + log(1 + exp(-|x|))
  const Mat<Scalar> per = (x.array().max(Scalar(0)) - x.array() * targets.array() +
                           (Scalar(1) + (-x.array().abs()).exp()).log())
                              .matrix();
  Mat<Scalar> out(1, 1);
  out(0, 0) = per.cwiseProduct(w).sum() / wsum;
  const int ia = logits.id;
  return logits.tape->push(std::move(out), detail::any_grad({logits}),
                           [ia, targets, w, wsum](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                             const auto& xv = tp.value(ia).array();
                             const auto p = Scalar(1) / (Scalar(1) + (-xv).exp());
                             tp.accumulate(ia, ((p - targets.array()) * w.array() * (g(0, 0) / wsum)).matrix());
                           });
}

/// Per-column standardisation over rows: (a - mean) / sqrt(var + eps).
template <typename Scalar>
Var<Scalar> normalize_cols(const Var<Scalar>& a, Scalar eps) {
  const Eigen::Index n = a.rows();
  if (n == 0) throw ShapeError("normalize_cols: no rows");
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mu = a.value().colwise().mean();
  Mat<Scalar> xc = a.value().rowwise() - mu;
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> var = xc.array().square().colwise().mean();
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> inv_std = (var.array() + eps).rsqrt();
  Mat<Scalar> out = xc.array().rowwise() * inv_std.array();
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad({a}), [ia, inv_std](Tape<Scalar>& tp, int self, const Mat<Scalar>& g) {
    const Mat<Scalar>& y = tp.value(self);
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> gm = g.colwise().mean();
    const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> gym = g.cwiseProduct(y).colwise().mean();
    Mat<Scalar> dx = g.rowwise() - gm;
    dx -= (y.array().rowwise() * gym.array()).matrix();
    dx = dx.array().rowwise() * inv_std.array();
    tp.accumulate(ia, dx);
  });
}

}  // namespace svfuse::nn
