#pragma once

// Shared test oracles. The finite-difference harness here is the reference
// for every backward rule: it knows nothing about the tape internals and
// recomputes losses from scratch for each probe.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mgec/rng.hpp"
#include "mgec/tensor.hpp"

namespace mgec_test {

using mgec::Rng;
using mgec::Tape;
using mgec::Tensor;

// Builds a scalar node from leaf ids. Rebuilt from scratch on every probe.
using ScalarBuilder = std::function<int(Tape&, const std::vector<int>&)>;

struct FdResult {
  double max_rel = 0.0;
  long coords = 0;
};

inline double eval_scalar(const ScalarBuilder& build, const std::vector<Tensor>& inputs) {
  Tape t;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor& x : inputs) ids.push_back(t.leaf(x));
  int out = build(t, ids);
  return t.value(out).data[0];
}

/// Central finite differences on every coordinate of the chosen inputs.
inline FdResult fd_check(const ScalarBuilder& build, std::vector<Tensor> inputs,
                         const std::vector<int>& diff_inputs, double h = 1e-5) {
  Tape t;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor& x : inputs) ids.push_back(t.leaf(x));
  int out = build(t, ids);
  t.backward(out);
  std::vector<Tensor> ad;
  ad.reserve(ids.size());
  for (int id : ids) ad.push_back(t.grad(id));

  FdResult res;
  for (int ii : diff_inputs) {
    Tensor& x = inputs[static_cast<size_t>(ii)];
    for (size_t c = 0; c < x.data.size(); ++c) {
      double orig = x.data[c];
      x.data[c] = orig + h;
      double lp = eval_scalar(build, inputs);
      x.data[c] = orig - h;
      double lm = eval_scalar(build, inputs);
      x.data[c] = orig;
      double fd = (lp - lm) / (2.0 * h);
      double a = ad[static_cast<size_t>(ii)].data[c];
      double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      res.max_rel = std::max(res.max_rel, rel);
      res.coords += 1;
    }
  }
  return res;
}

inline Tensor random_tensor(Rng& rng, std::vector<int> shape, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& x : t.data) x = rng.uniform(lo, hi);
  return t;
}

/// Wraps a tensor-valued node into a scalar via a fixed random projection so
/// that every output coordinate influences the loss.
inline ScalarBuilder project(const std::function<int(Tape&, const std::vector<int>&)>& op, Tensor proj) {
  return [op, proj = std::move(proj)](Tape& t, const std::vector<int>& ids) {
    int out = op(t, ids);
    int w = t.leaf(proj);
    return t.sum(t.mul(out, w));
  };
}

struct OpCheck {
  std::string name;
  // one random trial; checks all coordinates of the op's inputs
  std::function<FdResult(Rng&)> trial;
};

/// One finite-difference check per differentiable tape operation.
inline std::vector<OpCheck> autodiff_op_checks() {
  std::vector<OpCheck> checks;
  auto dims = [](Rng& rng) { return 1 + rng.uniform_int(4); };

  checks.push_back({"add", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n}), b = random_tensor(rng, {m, n});
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) { return t.add(v[0], v[1]); };
                      return fd_check(project(op, p), {a, b}, {0, 1});
                    }});
  checks.push_back({"add_rowvec", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n}), v = random_tensor(rng, {n});
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) { return t.add_rowvec(v[0], v[1]); };
                      return fd_check(project(op, p), {a, v}, {0, 1});
                    }});
  checks.push_back({"add_const", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n});
                      Tensor c = random_tensor(rng, {m, n});
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [c](Tape& t, const std::vector<int>& v) { return t.add_const(v[0], c); };
                      return fd_check(project(op, p), {a}, {0});
                    }});
  checks.push_back({"scale", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n});
                      double c = rng.uniform(-3, 3);
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [c](Tape& t, const std::vector<int>& v) { return t.scale(v[0], c); };
                      return fd_check(project(op, p), {a}, {0});
                    }});
  checks.push_back({"mul", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n}), b = random_tensor(rng, {m, n});
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) { return t.mul(v[0], v[1]); };
                      return fd_check(project(op, p), {a, b}, {0, 1});
                    }});
  checks.push_back({"matmul", [dims](Rng& rng) {
                      int m = dims(rng), k = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n});
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) { return t.matmul(v[0], v[1]); };
                      return fd_check(project(op, p), {a, b}, {0, 1});
                    }});
  checks.push_back({"transpose", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n});
                      Tensor p = random_tensor(rng, {n, m}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) { return t.transpose(v[0]); };
                      return fd_check(project(op, p), {a}, {0});
                    }});
  checks.push_back({"reshape", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n});
                      Tensor p = random_tensor(rng, {m * n}, -1, 1);
                      auto op = [m, n](Tape& t, const std::vector<int>& v) { return t.reshape(v[0], {m * n}); };
                      return fd_check(project(op, p), {a}, {0});
                    }});
  checks.push_back({"concat_rows", [dims](Rng& rng) {
                      int n = dims(rng), r1 = dims(rng), r2 = dims(rng);
                      Tensor a = random_tensor(rng, {r1, n}), b = random_tensor(rng, {r2, n});
                      Tensor p = random_tensor(rng, {r1 + r2, n}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) {
                        return t.concat_rows({v[0], v[1]});
                      };
                      return fd_check(project(op, p), {a, b}, {0, 1});
                    }});
  checks.push_back({"concat_cols", [dims](Rng& rng) {
                      int n = dims(rng), c1 = dims(rng), c2 = dims(rng);
                      Tensor a = random_tensor(rng, {n, c1}), b = random_tensor(rng, {n, c2});
                      Tensor p = random_tensor(rng, {n, c1 + c2}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) {
                        return t.concat_cols({v[0], v[1]});
                      };
                      return fd_check(project(op, p), {a, b}, {0, 1});
                    }});
  checks.push_back({"slice_cols", [dims](Rng& rng) {
                      int m = dims(rng), n = 2 + rng.uniform_int(4);
                      int c0 = rng.uniform_int(n - 1);
                      int c1 = c0 + 1 + rng.uniform_int(n - c0 - 1 + 1);
                      Tensor a = random_tensor(rng, {m, n});
                      Tensor p = random_tensor(rng, {m, c1 - c0}, -1, 1);
                      auto op = [c0, c1](Tape& t, const std::vector<int>& v) {
                        return t.slice_cols(v[0], c0, c1);
                      };
                      return fd_check(project(op, p), {a}, {0});
                    }});
  checks.push_back({"gather_rows", [dims](Rng& rng) {
                      int v = 2 + rng.uniform_int(5), d = dims(rng);
                      int n = 1 + rng.uniform_int(6);  // repeats likely: exercises scatter-add
                      std::vector<int> ids;
                      for (int i = 0; i < n; ++i) ids.push_back(rng.uniform_int(v));
                      Tensor table = random_tensor(rng, {v, d});
                      Tensor p = random_tensor(rng, {n, d}, -1, 1);
                      auto op = [ids](Tape& t, const std::vector<int>& vv) {
                        return t.gather_rows(vv[0], ids);
                      };
                      return fd_check(project(op, p), {table}, {0});
                    }});
  checks.push_back({"softmax_rows", [dims](Rng& rng) {
                      int m = dims(rng), n = 2 + rng.uniform_int(4);
                      Tensor a = random_tensor(rng, {m, n});
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) { return t.softmax_rows(v[0]); };
                      return fd_check(project(op, p), {a}, {0});
                    }});
  checks.push_back({"layer_norm", [dims](Rng& rng) {
                      int m = dims(rng), n = 2 + rng.uniform_int(4);
                      Tensor a = random_tensor(rng, {m, n});
                      Tensor gain = random_tensor(rng, {n}, 0.5, 1.5);
                      Tensor bias = random_tensor(rng, {n}, -0.5, 0.5);
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) {
                        return t.layer_norm(v[0], v[1], v[2]);
                      };
                      return fd_check(project(op, p), {a, gain, bias}, {0, 1, 2});
                    }});
  checks.push_back({"gelu", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n});
                      Tensor p = random_tensor(rng, {m, n}, -1, 1);
                      auto op = [](Tape& t, const std::vector<int>& v) { return t.gelu(v[0]); };
                      return fd_check(project(op, p), {a}, {0});
                    }});
  checks.push_back({"sum", [dims](Rng& rng) {
                      int m = dims(rng), n = dims(rng);
                      Tensor a = random_tensor(rng, {m, n});
                      auto op = [](Tape& t, const std::vector<int>& v) { return t.sum(v[0]); };
                      return fd_check(op, {a}, {0});
                    }});
  checks.push_back({"cross_entropy", [dims](Rng& rng) {
                      int n = 1 + rng.uniform_int(5), v = 2 + rng.uniform_int(6);
                      Tensor logits = random_tensor(rng, {n, v});
                      std::vector<int> targets;
                      std::vector<char> mask;
                      for (int i = 0; i < n; ++i) {
                        targets.push_back(rng.uniform_int(v));
                        mask.push_back(rng.uniform() < 0.75 ? 1 : 0);
                      }
                      mask[static_cast<size_t>(rng.uniform_int(n))] = 1;
                      auto op = [targets, mask](Tape& t, const std::vector<int>& vv) {
                        return t.cross_entropy(vv[0], targets, mask);
                      };
                      return fd_check(op, {logits}, {0});
                    }});
  return checks;
}

}  // namespace mgec_test
