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

// Shared helpers for the test suites: random tensors and a central
// finite-difference gradient oracle.

#ifndef UBM_TESTS_TEST_SUPPORT_HPP
#define UBM_TESTS_TEST_SUPPORT_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ubm/nn/graph.hpp"
#include "ubm/rng.hpp"

namespace ubm::testing {

inline nn::Tensor<double> random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  nn::Tensor<double> t(rows, cols);
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Relative error with a floor so entries whose true gradient is ~0 are
/// compared absolutely: |a - n| / max(|a|, |n|, floor).
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares analytic gradients of `loss_fn` with respect to every entry of
/// every parameter against central differences with step h. `loss_fn` builds
/// a fresh graph and returns the scalar loss value node; it must be
/// deterministic (e.g. reseed any rng it uses from a fixed key).
inline GradCheckResult gradcheck(std::vector<nn::Parameter<double>*> params,
                                 const std::function<nn::Var(nn::Graph<double>&)>& loss_fn, double h = 1e-3,
                                 std::size_t max_entries_per_param = 0) {
  for (auto* p : params) p->zero_grad();
  {
    nn::Graph<double> g;
    g.backward(loss_fn(g));
  }
  auto eval = [&] {
    nn::Graph<double> g;
    return g.value(loss_fn(g))[0];
  };
  GradCheckResult res;
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    const std::size_t stride = (max_entries_per_param && n > max_entries_per_param) ? n / max_entries_per_param : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = eval();
      p->value[i] = orig - h;
      const double down = eval();
      p->value[i] = orig;
      const double numeric = (up - down) / (2 * h);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(p->grad[i], numeric));
      ++res.checked;
    }
  }
  return res;
}

// Reduces an op's output to a scalar through fixed random weights so every
// output entry contributes a distinct gradient.
inline nn::Var weighted(nn::Graph<double>& g, nn::Var y, std::uint64_t seed) {
  Rng rng(seed, Purpose::test, 999);
  const auto& Y = g.value(y);
  return g.sum(g.mul(y, g.constant(random_tensor(Y.rows(), Y.cols(), rng))));
}

struct OpCase {
  const char* name;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  std::function<nn::Var(nn::Graph<double>&, std::vector<nn::Var>&, std::uint64_t)> build;
  double input_scale = 1.0;
};

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> c;
  c.push_back({"matmul", {{3, 4}, {4, 5}}, [](auto& g, auto& v, auto) { return g.matmul(v[0], v[1]); }});
  c.push_back({"matmul_nt", {{3, 4}, {5, 4}}, [](auto& g, auto& v, auto) { return g.matmul_nt(v[0], v[1]); }});
  c.push_back({"add", {{3, 4}, {3, 4}}, [](auto& g, auto& v, auto) { return g.add(v[0], v[1]); }});
  c.push_back({"sub", {{3, 4}, {3, 4}}, [](auto& g, auto& v, auto) { return g.sub(v[0], v[1]); }});
  c.push_back({"mul", {{3, 4}, {3, 4}}, [](auto& g, auto& v, auto) { return g.mul(v[0], v[1]); }});
  c.push_back({"add_bias", {{3, 4}, {1, 4}}, [](auto& g, auto& v, auto) { return g.add_bias(v[0], v[1]); }});
  c.push_back({"scale", {{3, 4}}, [](auto& g, auto& v, auto) { return g.scale(v[0], 0.37); }});
  c.push_back({"gelu", {{3, 4}}, [](auto& g, auto& v, auto) { return g.gelu(v[0]); }});
  c.push_back({"sigmoid", {{3, 4}}, [](auto& g, auto& v, auto) { return g.sigmoid(v[0]); }});
  c.push_back({"softmax_rows", {{3, 5}}, [](auto& g, auto& v, auto) { return g.softmax_rows(v[0]); }});
  c.push_back({"layer_norm",
               {{4, 6}, {1, 6}, {1, 6}},
               [](auto& g, auto& v, auto) { return g.layer_norm(v[0], v[1], v[2]); }});
  c.push_back({"l2_normalize_rows", {{4, 3}}, [](auto& g, auto& v, auto) { return g.l2_normalize_rows(v[0]); }});
  c.push_back({"row_logsumexp", {{4, 4}}, [](auto& g, auto& v, auto) { return g.row_logsumexp(v[0], false); }});
  c.push_back({"row_logsumexp_excl", {{4, 4}}, [](auto& g, auto& v, auto) { return g.row_logsumexp(v[0], true); }});
  c.push_back({"diag", {{3, 4}}, [](auto& g, auto& v, auto) { return g.diag(v[0]); }});
  c.push_back({"sum", {{3, 4}}, [](auto& g, auto& v, auto) { return g.sum(v[0]); }});
  c.push_back({"mean", {{3, 4}}, [](auto& g, auto& v, auto) { return g.mean(v[0]); }});
  c.push_back({"mean_over_mask",
               {{5, 3}},
               [](auto& g, auto& v, auto) { return g.mean_over_mask(v[0], {true, false, true, true, false}); }});
  c.push_back({"segment_mean", {{6, 3}}, [](auto& g, auto& v, auto) { return g.segment_mean(v[0], {0, 2, 3, 6}); }});
  c.push_back({"take_rows", {{4, 3}}, [](auto& g, auto& v, auto) { return g.take_rows(v[0], {3, 0, 3}); }});
  c.push_back({"gather_rows", {{5, 3}}, [](auto& g, auto& v, auto) {
                 const std::vector<int> ids = {4, 1, 1, 0};
                 return g.gather_rows(v[0], std::span<const int>(ids));
               }});
  c.push_back({"concat_rows", {{2, 3}, {3, 3}}, [](auto& g, auto& v, auto) {
                 return g.concat_rows(std::span<const nn::Var>(v.data(), 2));
               }});
  c.push_back({"segment_attention", {{6, 4}, {6, 4}, {6, 4}}, [](auto& g, auto& v, auto) {
                 return g.segment_attention(v[0], v[1], v[2], {0, 1, 4, 6}, 2);
               }});
  c.push_back({"dropout", {{4, 5}}, [](auto& g, auto& v, std::uint64_t seed) {
                 Rng rng(seed, Purpose::dropout);
                 return g.dropout(v[0], 0.3, rng);
               }});
  c.push_back({"binary_cross_entropy", {{5, 1}}, [](auto& g, auto& v, auto) {
                 static const std::vector<double> y = {1, 0, 0, 1, 1};
                 return g.binary_cross_entropy(g.sigmoid(v[0]), std::span<const double>(y));
               }});
  c.push_back({"softmax_cross_entropy", {{3, 5}}, [](auto& g, auto& v, auto) {
                 static const std::vector<std::size_t> t = {4, 0, 2};
                 return g.softmax_cross_entropy(v[0], std::span<const std::size_t>(t));
               }});
  c.push_back({"mse", {{4, 1}}, [](auto& g, auto& v, auto) {
                 static const std::vector<double> y = {0.5, -1, 2, 0};
                 return g.mse(v[0], std::span<const double>(y));
               }});
  return c;
}

}  // namespace ubm::testing

#endif  // UBM_TESTS_TEST_SUPPORT_HPP
