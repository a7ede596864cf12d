#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "svfuse/tape.hpp"

namespace svfuse::nn {

/// Per-query key lists in CSR form: keys of query q are
/// `keys[offsets[q] .. offsets[q+1])`.
struct KeyLists {
  std::vector<int> offsets{0};
  std::vector<int> keys;

  Eigen::Index num_queries() const { return Eigen::Index(offsets.size()) - 1; }
  int count(Eigen::Index q) const { return offsets[std::size_t(q) + 1] - offsets[std::size_t(q)]; }
};

/// Multi-head scaled dot-product attention restricted to per-query key
/// lists. Head h uses columns [h*dq/H, (h+1)*dq/H) of q/k and the matching
/// block of v. Queries without keys produce zero rows. If `weights_out` is
/// given it receives the softmax weights laid out as [head][csr position].
template <typename Scalar>
Var<Scalar> window_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                             std::shared_ptr<const KeyLists> lists, int heads = 1,
                             std::vector<Scalar>* weights_out = nullptr) {
  detail::require_same_tape(q, k, "window_attention");
  detail::require_same_tape(q, v, "window_attention");
  if (q.cols() != k.cols() || k.rows() != v.rows() || lists->num_queries() != q.rows()) {
    throw ShapeError("window_attention: shape mismatch q " + shape_str(q.rows(), q.cols()) + " k " +
                     shape_str(k.rows(), k.cols()) + " v " + shape_str(v.rows(), v.cols()));
  }
  if (heads < 1 || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw ShapeError("window_attention: " + std::to_string(heads) + " heads do not divide " +
                     shape_str(q.cols(), v.cols()));
  }
  const Eigen::Index dh = q.cols() / heads, vh = v.cols() / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(Scalar(dh));
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  const std::size_t nnz = lists->keys.size();
  auto attn = std::make_shared<std::vector<Scalar>>(nnz * std::size_t(heads));
  Mat<Scalar> out = Mat<Scalar>::Zero(q.rows(), v.cols());
  for (Eigen::Index r = 0; r < q.rows(); ++r) {
    const int b = lists->offsets[std::size_t(r)], e = lists->offsets[std::size_t(r) + 1];
    if (b == e) continue;
    for (int h = 0; h < heads; ++h) {
      Scalar* a = attn->data() + std::size_t(h) * nnz;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (int p = b; p < e; ++p) {
        a[p] = Q.row(r).segment(h * dh, dh).dot(K.row(lists->keys[std::size_t(p)]).segment(h * dh, dh)) * inv_sqrt;
        mx = std::max(mx, a[p]);
      }
      Scalar z = 0;
      for (int p = b; p < e; ++p) z += (a[p] = std::exp(a[p] - mx));
      for (int p = b; p < e; ++p) {
        a[p] /= z;
        out.block(r, h * vh, 1, vh) += a[p] * V.block(lists->keys[std::size_t(p)], h * vh, 1, vh);
      }
    }
  }
  if (weights_out) *weights_out = *attn;
  const int iq = q.id, ik = k.id, iv = v.id;
  std::shared_ptr<const std::vector<Scalar>> A = attn;
  return q.tape->push(std::move(out), detail::any_grad({q, k, v}),
                      [iq, ik, iv, lists, A, heads, dh, vh, inv_sqrt, nnz](Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                        const auto& Q = tp.value(iq);
                        const auto& K = tp.value(ik);
                        const auto& V = tp.value(iv);
                        Mat<Scalar>* gq = tp.grad_buffer(iq);
                        Mat<Scalar>* gk = tp.grad_buffer(ik);
                        Mat<Scalar>* gv = tp.grad_buffer(iv);
                        std::vector<Scalar> ds;
                        for (Eigen::Index r = 0; r < Q.rows(); ++r) {
                          const int b = lists->offsets[std::size_t(r)], e = lists->offsets[std::size_t(r) + 1];
                          if (b == e) continue;
                          ds.resize(std::size_t(e - b));
                          for (int h = 0; h < heads; ++h) {
                            const Scalar* a = A->data() + std::size_t(h) * nnz;
                            const auto go = g.row(r).segment(h * vh, vh);
                            Scalar dot = 0;
                            for (int p = b; p < e; ++p) {
                              const int key = lists->keys[std::size_t(p)];
                              const Scalar da = go.dot(V.row(key).segment(h * vh, vh));
                              ds[std::size_t(p - b)] = da;
                              dot += a[p] * da;
                              if (gv) gv->block(key, h * vh, 1, vh) += a[p] * go;
                            }
                            for (int p = b; p < e; ++p) {
                              const int key = lists->keys[std::size_t(p)];
                              const Scalar s = a[p] * (ds[std::size_t(p - b)] - dot) * inv_sqrt;
                              if (gq) gq->block(r, h * dh, 1, dh) += s * K.block(key, h * dh, 1, dh);
                              if (gk) gk->block(key, h * dh, 1, dh) += s * Q.block(r, h * dh, 1, dh);
                            }
                          }
                        }
                      });
}

}  // namespace svfuse::nn
