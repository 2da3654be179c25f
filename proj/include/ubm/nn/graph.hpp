// Copyright 2026 The UBM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef UBM_NN_GRAPH_HPP
#define UBM_NN_GRAPH_HPP

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ubm/common.hpp"
#include "ubm/nn/tensor.hpp"
#include "ubm/rng.hpp"

namespace ubm::nn {

/// Handle to a node in a Graph.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape. Each operation appends a node holding its forward
/// value and a closure that propagates the output gradient to its inputs.
/// Parameter leaves borrow the parameter's storage and accumulate directly
/// into Parameter::grad.
///
/// A Graph is built for one forward pass and discarded; it holds pointers to
/// the parameters it was built from, which must outlive it.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> t) { return push(std::move(t), false, nullptr); }

  Var param(Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? n.param->value : n.value;
  }

  /// Gradient of a non-parameter node after backward(); empty when no
  /// gradient reached it.
  const Tensor<T>& grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param ? n.param->grad : n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Propagates d(loss)/d(node) back through the tape. `loss` must be 1x1.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw DimensionError("backward: loss must be a scalar, got " + value(loss).shape_str());
    grad_ref(loss)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  // --- linear algebra ---------------------------------------------------

  /// a[n x k] * b[k x m]
  Var matmul(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.cols() != B.rows()) throw DimensionError("matmul: " + A.shape_str() + " vs " + B.shape_str());
    const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
    Tensor<T> out(n, m);
    kernels::gemm_nn(A.data(), B.data(), out.data(), n, k, m);
    return push(std::move(out), needs(a) || needs(b), [this, a, b, n, k, m, o = next_id()] {
      const auto& G = nodes_[o].grad;
      if (needs(a)) kernels::gemm_nt(G.data(), value(b).data(), grad_ref(a).data(), n, m, k);
      if (needs(b)) kernels::gemm_tn(value(a).data(), G.data(), grad_ref(b).data(), n, k, m);
    });
  }

  /// a[n x k] * b[m x k]^T
  Var matmul_nt(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (A.cols() != B.cols()) throw DimensionError("matmul_nt: " + A.shape_str() + " vs " + B.shape_str());
    const std::size_t n = A.rows(), k = A.cols(), m = B.rows();
    Tensor<T> out(n, m);
    kernels::gemm_nt(A.data(), B.data(), out.data(), n, k, m);
    return push(std::move(out), needs(a) || needs(b), [this, a, b, n, k, m, o = next_id()] {
      const auto& G = nodes_[o].grad;
      if (needs(a)) kernels::gemm_nn(G.data(), value(b).data(), grad_ref(a).data(), n, m, k);
      if (needs(b)) kernels::gemm_tn(G.data(), value(a).data(), grad_ref(b).data(), n, m, k);
    });
  }

  // --- elementwise --------------------------------------------------------

  Var add(Var a, Var b) { return binary(a, b, "add", T{1}); }
  Var sub(Var a, Var b) { return binary(a, b, "sub", T{-1}); }

  Var mul(Var a, Var b) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (!A.same_shape(B)) throw DimensionError("mul: " + A.shape_str() + " vs " + B.shape_str());
    Tensor<T> out(A.rows(), A.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
    return push(std::move(out), needs(a) || needs(b), [this, a, b, o = next_id()] {
      const auto& G = nodes_[o].grad;
      if (needs(a)) {
        auto& ga = grad_ref(a);
        const auto& B = value(b);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * B[i];
      }
      if (needs(b)) {
        auto& gb = grad_ref(b);
        const auto& A = value(a);
        for (std::size_t i = 0; i < G.size(); ++i) gb[i] += G[i] * A[i];
      }
    });
  }

  /// x[n x m] + bias[1 x m], broadcast over rows.
  Var add_bias(Var x, Var bias) {
    const auto& X = value(x);
    const auto& B = value(bias);
    if (B.size() != X.cols()) throw DimensionError("add_bias: " + X.shape_str() + " vs " + B.shape_str());
    Tensor<T> out = X;
    const std::size_t m = X.cols();
    for (std::size_t r = 0; r < X.rows(); ++r)
      for (std::size_t j = 0; j < m; ++j) out(r, j) += B[j];
    return push(std::move(out), needs(x) || needs(bias), [this, x, bias, m, o = next_id()] {
      const auto& G = nodes_[o].grad;
      if (needs(x)) accumulate(grad_ref(x), G);
      if (needs(bias)) {
        auto& gb = grad_ref(bias);
        for (std::size_t r = 0; r < G.rows(); ++r)
          for (std::size_t j = 0; j < m; ++j) gb[j] += G(r, j);
      }
    });
  }

  Var scale(Var x, T c) {
    Tensor<T> out = value(x);
    for (auto& v : out.values()) v *= c;
    return push(std::move(out), needs(x), [this, x, c, o = next_id()] {
      const auto& G = nodes_[o].grad;
      auto& gx = grad_ref(x);
      for (std::size_t i = 0; i < G.size(); ++i) gx[i] += c * G[i];
    });
  }

  /// Exact GELU: x * Phi(x).
  Var gelu(Var x) {
    const auto& X = value(x);
    Tensor<T> out(X.rows(), X.cols());
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = T(0.5) * X[i] * (T{1} + std::erf(X[i] * inv_sqrt2));
    return push(std::move(out), needs(x), [this, x, o = next_id()] {
      constexpr T inv_sqrt2 = T(0.70710678118654752440);
      constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
      const auto& G = nodes_[o].grad;
      const auto& X = value(x);
      auto& gx = grad_ref(x);
      for (std::size_t i = 0; i < G.size(); ++i) {
        const T v = X[i];
        const T d = T(0.5) * (T{1} + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += G[i] * d;
      }
    });
  }

  Var sigmoid(Var x) {
    const auto& X = value(x);
    Tensor<T> out(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.size(); ++i) {
      const T v = X[i];
      out[i] = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
    }
    return push(std::move(out), needs(x), [this, x, o = next_id()] {
      const auto& G = nodes_[o].grad;
      const auto& Y = nodes_[o].value;
      auto& gx = grad_ref(x);
      for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * Y[i] * (T{1} - Y[i]);
    });
  }

  /// Inverted dropout: kept entries are scaled by 1/(1-rate).
  Var dropout(Var x, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw DimensionError("dropout: rate must lie in [0, 1)");
    if (rate == 0.0) return x;
    const auto& X = value(x);
    const T keep_scale = T(1.0 / (1.0 - rate));
    std::vector<T> mask(X.size());
    Tensor<T> out(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.size(); ++i) {
      mask[i] = rng.uniform() < rate ? T{0} : keep_scale;
      out[i] = X[i] * mask[i];
    }
    return push(std::move(out), needs(x), [this, x, mask = std::move(mask), o = next_id()] {
      const auto& G = nodes_[o].grad;
      auto& gx = grad_ref(x);
      for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * mask[i];
    });
  }

  // --- row-wise -----------------------------------------------------------

  Var softmax_rows(Var x) {
    const auto& X = value(x);
    Tensor<T> out(X.rows(), X.cols());
    for (std::size_t r = 0; r < X.rows(); ++r) softmax_into(X.row(r), out.row(r));
    return push(std::move(out), needs(x), [this, x, o = next_id()] {
      const auto& G = nodes_[o].grad;
      const auto& Y = nodes_[o].value;
      auto& gx = grad_ref(x);
      for (std::size_t r = 0; r < G.rows(); ++r) {
        T s{0};
        for (std::size_t j = 0; j < G.cols(); ++j) s += G(r, j) * Y(r, j);
        for (std::size_t j = 0; j < G.cols(); ++j) gx(r, j) += Y(r, j) * (G(r, j) - s);
      }
    });
  }

  /// Per-row normalization to zero mean and unit variance, then gamma * x + beta.
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const auto& X = value(x);
    const std::size_t n = X.rows(), d = X.cols();
    if (value(gamma).size() != d || value(beta).size() != d)
      throw DimensionError("layer_norm: " + X.shape_str() + " vs affine " + value(gamma).shape_str());
    Tensor<T> xhat(n, d);
    std::vector<T> rstd(n);
    Tensor<T> out(n, d);
    const auto& Gm = value(gamma);
    const auto& Bt = value(beta);
    for (std::size_t r = 0; r < n; ++r) {
      T mean{0};
      for (std::size_t j = 0; j < d; ++j) mean += X(r, j);
      mean /= T(d);
      T var{0};
      for (std::size_t j = 0; j < d; ++j) var += (X(r, j) - mean) * (X(r, j) - mean);
      var /= T(d);
      rstd[r] = T{1} / std::sqrt(var + eps);
      for (std::size_t j = 0; j < d; ++j) {
        xhat(r, j) = (X(r, j) - mean) * rstd[r];
        out(r, j) = Gm[j] * xhat(r, j) + Bt[j];
      }
    }
    return push(std::move(out), needs(x) || needs(gamma) || needs(beta),
                [this, x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), n, d, o = next_id()] {
                  const auto& G = nodes_[o].grad;
                  const auto& Gm = value(gamma);
                  if (needs(gamma) || needs(beta)) {
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t j = 0; j < d; ++j) {
                        if (needs(gamma)) grad_ref(gamma)[j] += G(r, j) * xhat(r, j);
                        if (needs(beta)) grad_ref(beta)[j] += G(r, j);
                      }
                  }
                  if (!needs(x)) return;
                  auto& gx = grad_ref(x);
                  for (std::size_t r = 0; r < n; ++r) {
                    T sum_g{0}, sum_gx{0};
                    for (std::size_t j = 0; j < d; ++j) {
                      const T gy = G(r, j) * Gm[j];
                      sum_g += gy;
                      sum_gx += gy * xhat(r, j);
                    }
                    const T inv_d = T{1} / T(d);
                    for (std::size_t j = 0; j < d; ++j) {
                      const T gy = G(r, j) * Gm[j];
                      gx(r, j) += rstd[r] * (gy - inv_d * sum_g - xhat(r, j) * inv_d * sum_gx);
                    }
                  }
                });
  }

  /// Divides every row by its Euclidean norm. A zero-norm row is an error.
  Var l2_normalize_rows(Var x) {
    const auto& X = value(x);
    Tensor<T> out(X.rows(), X.cols());
    std::vector<T> norms(X.rows());
    for (std::size_t r = 0; r < X.rows(); ++r) {
      const T nrm = std::sqrt(kernels::dot(X.row(r).data(), X.row(r).data(), X.cols()));
      if (!(nrm > T{0})) throw DimensionError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
      norms[r] = nrm;
      for (std::size_t j = 0; j < X.cols(); ++j) out(r, j) = X(r, j) / nrm;
    }
    return push(std::move(out), needs(x), [this, x, norms = std::move(norms), o = next_id()] {
      const auto& G = nodes_[o].grad;
      const auto& Y = nodes_[o].value;
      auto& gx = grad_ref(x);
      for (std::size_t r = 0; r < G.rows(); ++r) {
        const T gy = kernels::dot(G.row(r).data(), Y.row(r).data(), G.cols());
        for (std::size_t j = 0; j < G.cols(); ++j) gx(r, j) += (G(r, j) - Y(r, j) * gy) / norms[r];
      }
    });
  }

  /// log sum_j exp(x[i][j]) per row; with `exclude_diagonal`, entry (i, i)
  /// is left out of row i. Returns [rows x 1].
  Var row_logsumexp(Var x, bool exclude_diagonal = false) {
    const auto& X = value(x);
    const std::size_t n = X.rows(), m = X.cols();
    if (exclude_diagonal && m < 2) throw DimensionError("row_logsumexp: excluding the diagonal leaves an empty row");
    Tensor<T> out(n, 1);
    Tensor<T> prob(n, m);
    for (std::size_t r = 0; r < n; ++r) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < m; ++j)
        if (!(exclude_diagonal && j == r)) mx = std::max(mx, X(r, j));
      T s{0};
      for (std::size_t j = 0; j < m; ++j)
        if (!(exclude_diagonal && j == r)) s += (prob(r, j) = std::exp(X(r, j) - mx));
      for (std::size_t j = 0; j < m; ++j) prob(r, j) /= s;
      out(r, 0) = mx + std::log(s);
    }
    return push(std::move(out), needs(x), [this, x, prob = std::move(prob), o = next_id()] {
      const auto& G = nodes_[o].grad;
      auto& gx = grad_ref(x);
      for (std::size_t r = 0; r < prob.rows(); ++r)
        for (std::size_t j = 0; j < prob.cols(); ++j) gx(r, j) += G(r, 0) * prob(r, j);
    });
  }

  /// Main diagonal of a matrix with rows <= cols, as [rows x 1].
  Var diag(Var x) {
    const auto& X = value(x);
    if (X.rows() > X.cols()) throw DimensionError("diag: " + X.shape_str());
    Tensor<T> out(X.rows(), 1);
    for (std::size_t r = 0; r < X.rows(); ++r) out(r, 0) = X(r, r);
    return push(std::move(out), needs(x), [this, x, o = next_id()] {
      const auto& G = nodes_[o].grad;
      auto& gx = grad_ref(x);
      for (std::size_t r = 0; r < G.rows(); ++r) gx(r, r) += G(r, 0);
    });
  }

  // --- reductions -----------------------------------------------------------

  Var sum(Var x) {
    const auto& X = value(x);
    T s{0};
    for (T v : X.values()) s += v;
    return push(Tensor<T>::scalar(s), needs(x), [this, x, o = next_id()] {
      const T g = nodes_[o].grad[0];
      auto& gx = grad_ref(x);
      for (auto& v : gx.values()) v += g;
    });
  }

  Var mean(Var x) { return scale(sum(x), T{1} / T(value(x).size())); }

  /// Mean of the rows whose mask entry is true, as [1 x d].
  Var mean_over_mask(Var x, const std::vector<bool>& mask) {
    const auto& X = value(x);
    if (mask.size() != X.rows())
      throw DimensionError("mean_over_mask: mask of length " + std::to_string(mask.size()) + " vs " + X.shape_str());
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < mask.size(); ++r)
      if (mask[r]) rows.push_back(r);
    if (rows.empty()) throw DimensionError("mean_over_mask: mask selects no rows");
    return segment_mean(take_rows(x, rows), {0, rows.size()});
  }

  /// Mean of each contiguous row segment [offsets[s], offsets[s+1]).
  Var segment_mean(Var x, std::vector<std::size_t> offsets) {
    const auto& X = value(x);
    check_offsets(offsets, X.rows(), "segment_mean");
    const std::size_t ns = offsets.size() - 1, d = X.cols();
    Tensor<T> out(ns, d);
    for (std::size_t s = 0; s < ns; ++s) {
      const std::size_t len = offsets[s + 1] - offsets[s];
      if (len == 0) throw DimensionError("segment_mean: segment " + std::to_string(s) + " is empty");
      for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
        for (std::size_t j = 0; j < d; ++j) out(s, j) += X(r, j);
      for (std::size_t j = 0; j < d; ++j) out(s, j) /= T(len);
    }
    return push(std::move(out), needs(x), [this, x, offsets = std::move(offsets), d, o = next_id()] {
      const auto& G = nodes_[o].grad;
      auto& gx = grad_ref(x);
      for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const T inv = T{1} / T(offsets[s + 1] - offsets[s]);
        for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
          for (std::size_t j = 0; j < d; ++j) gx(r, j) += G(s, j) * inv;
      }
    });
  }

  // --- indexing -------------------------------------------------------------

  /// Rows of `x` at `indices` (repeats allowed).
  Var take_rows(Var x, std::vector<std::size_t> indices) {
    const auto& X = value(x);
    const std::size_t d = X.cols();
    Tensor<T> out(indices.size(), d);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= X.rows())
        throw DimensionError("take_rows: index " + std::to_string(indices[i]) + " out of range for " + X.shape_str());
      std::copy_n(X.row(indices[i]).data(), d, out.row(i).data());
    }
    return push(std::move(out), needs(x), [this, x, indices = std::move(indices), d, o = next_id()] {
      const auto& G = nodes_[o].grad;
      auto& gx = grad_ref(x);
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gx(indices[i], j) += G(i, j);
    });
  }

  /// Embedding lookup: rows of `table` at integer ids.
  template <typename Id>
  Var gather_rows(Var table, std::span<const Id> ids) {
    std::vector<std::size_t> idx(ids.size());
    const std::size_t n = value(table).rows();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n)
        throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " out of range for table of " +
                             std::to_string(n) + " rows");
      idx[i] = static_cast<std::size_t>(ids[i]);
    }
    return take_rows(table, std::move(idx));
  }

  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t d = value(parts[0]).cols();
    std::size_t total = 0;
    bool ng = false;
    for (Var p : parts) {
      if (value(p).cols() != d)
        throw DimensionError("concat_rows: " + value(parts[0]).shape_str() + " vs " + value(p).shape_str());
      total += value(p).rows();
      ng = ng || needs(p);
    }
    Tensor<T> out(total, d);
    std::size_t at = 0;
    for (Var p : parts) {
      std::copy(value(p).values().begin(), value(p).values().end(), out.data() + at * d);
      at += value(p).rows();
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return push(std::move(out), ng, [this, ins = std::move(ins), d, o = next_id()] {
      const auto& G = nodes_[o].grad;
      std::size_t at = 0;
      for (Var p : ins) {
        const std::size_t r = value(p).rows();
        if (needs(p)) {
          auto& gp = grad_ref(p);
          for (std::size_t i = 0; i < r * d; ++i) gp[i] += G[at * d + i];
        }
        at += r;
      }
    });
  }

  // --- attention --------------------------------------------------------------

  /// Multi-head scaled dot-product attention restricted to contiguous row
  /// segments: a row attends only to rows of its own segment. q, k, v are
  /// [rows x d] with d divisible by `heads`.
  Var segment_attention(Var q, Var k, Var v, std::vector<std::size_t> offsets, std::size_t heads) {
    const auto& Q = value(q);
    const auto& K = value(k);
    const auto& V = value(v);
    if (!Q.same_shape(K) || !Q.same_shape(V))
      throw DimensionError("segment_attention: " + Q.shape_str() + " vs " + K.shape_str() + " vs " + V.shape_str());
    const std::size_t d = Q.cols();
    if (heads == 0 || d % heads != 0) throw DimensionError("segment_attention: width not divisible by heads");
    check_offsets(offsets, Q.rows(), "segment_attention");
    const std::size_t dh = d / heads;
    const T inv_sqrt = T{1} / std::sqrt(T(dh));

    // probs laid out per segment: heads blocks of len x len.
    std::vector<std::size_t> prob_at(offsets.size(), 0);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const std::size_t len = offsets[s + 1] - offsets[s];
      prob_at[s + 1] = prob_at[s] + heads * len * len;
    }
    std::vector<T> probs(prob_at.back());
    Tensor<T> out(Q.rows(), d);
    std::vector<T> scores;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const std::size_t b = offsets[s], len = offsets[s + 1] - b;
      for (std::size_t h = 0; h < heads; ++h) {
        T* P = probs.data() + prob_at[s] + h * len * len;
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < len; ++i) {
          T* pi = P + i * len;
          const T* qi = Q.row(b + i).data() + c0;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < len; ++j) {
            pi[j] = kernels::dot(qi, K.row(b + j).data() + c0, dh) * inv_sqrt;
            mx = std::max(mx, pi[j]);
          }
          T z{0};
          for (std::size_t j = 0; j < len; ++j) z += (pi[j] = std::exp(pi[j] - mx));
          for (std::size_t j = 0; j < len; ++j) pi[j] /= z;
          T* oi = out.row(b + i).data() + c0;
          for (std::size_t j = 0; j < len; ++j) {
            const T p = pi[j];
            const T* vj = V.row(b + j).data() + c0;
            for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
          }
        }
      }
    }
    return push(std::move(out), needs(q) || needs(k) || needs(v),
                [this, q, k, v, offsets = std::move(offsets), prob_at = std::move(prob_at), probs = std::move(probs),
                 heads, dh, inv_sqrt, o = next_id()] {
                  const auto& G = nodes_[o].grad;
                  const auto& Q = value(q);
                  const auto& K = value(k);
                  const auto& V = value(v);
                  const std::size_t d = heads * dh;
                  Tensor<T> gq(Q.rows(), d), gk(Q.rows(), d), gv(Q.rows(), d);
                  std::vector<T> dp;
                  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
                    const std::size_t b = offsets[s], len = offsets[s + 1] - b;
                    dp.assign(len, T{0});
                    for (std::size_t h = 0; h < heads; ++h) {
                      const T* P = probs.data() + prob_at[s] + h * len * len;
                      const std::size_t c0 = h * dh;
                      for (std::size_t i = 0; i < len; ++i) {
                        const T* pi = P + i * len;
                        const T* gi = G.row(b + i).data() + c0;
                        T dot_pd{0};
                        for (std::size_t j = 0; j < len; ++j) {
                          dp[j] = kernels::dot(gi, V.row(b + j).data() + c0, dh);
                          dot_pd += pi[j] * dp[j];
                          T* gvj = gv.row(b + j).data() + c0;
                          for (std::size_t c = 0; c < dh; ++c) gvj[c] += pi[j] * gi[c];
                        }
                        T* gqi = gq.row(b + i).data() + c0;
                        const T* qi = Q.row(b + i).data() + c0;
                        for (std::size_t j = 0; j < len; ++j) {
                          const T ds = pi[j] * (dp[j] - dot_pd) * inv_sqrt;
                          if (ds == T{0}) continue;
                          const T* kj = K.row(b + j).data() + c0;
                          T* gkj = gk.row(b + j).data() + c0;
                          for (std::size_t c = 0; c < dh; ++c) {
                            gqi[c] += ds * kj[c];
                            gkj[c] += ds * qi[c];
                          }
                        }
                      }
                    }
                  }
                  if (needs(q)) accumulate(grad_ref(q), gq);
                  if (needs(k)) accumulate(grad_ref(k), gk);
                  if (needs(v)) accumulate(grad_ref(v), gv);
                });
  }

  // --- losses -----------------------------------------------------------------

  /// Mean binary cross-entropy of probabilities [n x 1] against 0/1 labels,
  /// with log arguments clamped at 1e-12.
  Var binary_cross_entropy(Var probs, std::span<const T> labels) {
    const auto& P = value(probs);
    if (P.size() != labels.size()) throw DimensionError("binary_cross_entropy: " + P.shape_str() + " vs labels");
    const T floor = T(1e-12);
    T loss{0};
    for (std::size_t i = 0; i < P.size(); ++i) {
      const T y = labels[i];
      loss -= y * std::log(std::max(P[i], floor)) + (T{1} - y) * std::log(std::max(T{1} - P[i], floor));
    }
    const T n = T(P.size());
    std::vector<T> ys(labels.begin(), labels.end());
    return push(Tensor<T>::scalar(loss / n), needs(probs), [this, probs, ys = std::move(ys), n, floor, o = next_id()] {
      const T g = nodes_[o].grad[0];
      const auto& P = value(probs);
      auto& gp = grad_ref(probs);
      for (std::size_t i = 0; i < P.size(); ++i) {
        const T p = std::max(P[i], floor), q = std::max(T{1} - P[i], floor);
        gp[i] += g * (-ys[i] / p + (T{1} - ys[i]) / q) / n;
      }
    });
  }

  /// Mean softmax cross-entropy of logits [n x m] against class indices.
  Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets) {
    const auto& Z = value(logits);
    if (Z.rows() != targets.size()) throw DimensionError("softmax_cross_entropy: " + Z.shape_str() + " vs targets");
    Tensor<T> prob(Z.rows(), Z.cols());
    T loss{0};
    for (std::size_t r = 0; r < Z.rows(); ++r) {
      if (targets[r] >= Z.cols()) throw DimensionError("softmax_cross_entropy: target out of range");
      softmax_into(Z.row(r), prob.row(r));
      loss -= std::log(std::max(prob(r, targets[r]), std::numeric_limits<T>::min()));
    }
    const T n = T(Z.rows());
    std::vector<std::size_t> t(targets.begin(), targets.end());
    return push(Tensor<T>::scalar(loss / n), needs(logits),
                [this, logits, prob = std::move(prob), t = std::move(t), n, o = next_id()] {
                  const T g = nodes_[o].grad[0];
                  auto& gz = grad_ref(logits);
                  for (std::size_t r = 0; r < prob.rows(); ++r)
                    for (std::size_t j = 0; j < prob.cols(); ++j)
                      gz(r, j) += g * (prob(r, j) - (j == t[r] ? T{1} : T{0})) / n;
                });
  }

  /// Mean squared error of predictions [n x 1] against targets.
  Var mse(Var pred, std::span<const T> targets) {
    const auto& P = value(pred);
    if (P.size() != targets.size()) throw DimensionError("mse: " + P.shape_str() + " vs targets");
    T loss{0};
    for (std::size_t i = 0; i < P.size(); ++i) loss += (P[i] - targets[i]) * (P[i] - targets[i]);
    const T n = T(P.size());
    std::vector<T> y(targets.begin(), targets.end());
    return push(Tensor<T>::scalar(loss / n), needs(pred), [this, pred, y = std::move(y), n, o = next_id()] {
      const T g = nodes_[o].grad[0];
      const auto& P = value(pred);
      auto& gp = grad_ref(pred);
      for (std::size_t i = 0; i < P.size(); ++i) gp[i] += g * T{2} * (P[i] - y[i]) / n;
    });
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  std::size_t next_id() const noexcept { return nodes_.size(); }

  bool needs(Var v) const noexcept { return nodes_[v.id].needs_grad; }

  Tensor<T>& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.param) return n.param->grad;
    if (n.grad.empty()) n.grad = Tensor<T>::zeros_like(n.value);
    return n.grad;
  }

  Var push(Tensor<T> value, bool needs_grad, std::function<void()> bw) {
#ifndef NDEBUG
    assert(value.all_finite() && "non-finite value produced by a graph op");
#endif
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }

  Var binary(Var a, Var b, const char* name, T sign) {
    const auto& A = value(a);
    const auto& B = value(b);
    if (!A.same_shape(B)) throw DimensionError(std::string(name) + ": " + A.shape_str() + " vs " + B.shape_str());
    Tensor<T> out(A.rows(), A.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + sign * B[i];
    return push(std::move(out), needs(a) || needs(b), [this, a, b, sign, o = next_id()] {
      const auto& G = nodes_[o].grad;
      if (needs(a)) accumulate(grad_ref(a), G);
      if (needs(b)) {
        auto& gb = grad_ref(b);
        for (std::size_t i = 0; i < G.size(); ++i) gb[i] += sign * G[i];
      }
    });
  }

  static void accumulate(Tensor<T>& dst, const Tensor<T>& src) noexcept {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  }

  static void softmax_into(std::span<const T> x, std::span<T> y) noexcept {
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : x) mx = std::max(mx, v);
    T z{0};
    for (std::size_t j = 0; j < x.size(); ++j) z += (y[j] = std::exp(x[j] - mx));
    for (auto& v : y) v /= z;
  }

  static void check_offsets(const std::vector<std::size_t>& offsets, std::size_t rows, const char* op) {
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows)
      throw DimensionError(std::string(op) + ": segment offsets do not cover " + std::to_string(rows) + " rows");
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
      if (offsets[s] > offsets[s + 1]) throw DimensionError(std::string(op) + ": offsets must be non-decreasing");
  }

  std::vector<Node> nodes_;
};

}  // namespace ubm::nn

#endif  // UBM_NN_GRAPH_HPP
