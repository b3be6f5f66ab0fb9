#include "mgec/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>

namespace mgec {

namespace {

int shape_numel(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative extent");
    n *= d;
  }
  return n;
}

std::string shape_to_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(op + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

void require_rank2(const std::string& op, const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument(op + ": expected rank-2 tensor, got " + a.shape_str());
}

}  // namespace

// ==================== Tensor ====================

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  int n = shape_numel(shape);
  t.shape = std::move(shape);
  t.data.assign(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t = zeros(std::move(shape));
  for (double& x : t.data) x = v;
  return t;
}

Tensor Tensor::vec(std::vector<double> v) {
  Tensor t;
  t.shape = {static_cast<int>(v.size())};
  t.data = std::move(v);
  return t;
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> v) {
  if (static_cast<size_t>(rows) * static_cast<size_t>(cols) != v.size())
    throw std::invalid_argument("Tensor::matrix: data size does not match extents");
  Tensor t;
  t.shape = {rows, cols};
  t.data = std::move(v);
  return t;
}

int Tensor::numel() const { return static_cast<int>(data.size()); }

int Tensor::rows() const {
  require_rank2("rows", *this);
  return shape[0];
}

int Tensor::cols() const {
  require_rank2("cols", *this);
  return shape[1];
}

double& Tensor::at(int i, int j) {
  require_rank2("at", *this);
  return data[static_cast<size_t>(i) * shape[1] + j];
}

double Tensor::at(int i, int j) const {
  require_rank2("at", *this);
  return data[static_cast<size_t>(i) * shape[1] + j];
}

bool Tensor::all_finite() const {
  for (double x : data)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string Tensor::shape_str() const { return shape_to_str(shape); }

// ==================== plain kernels ====================

namespace tensor_ops {

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_error("add", a, b);
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_error("sub", a, b);
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_error("mul", a, b);
  Tensor out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (double& x : out.data) x *= c;
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_rank2("add_rowvec", a);
  if (v.rank() != 1 || v.shape[0] != a.shape[1]) shape_error("add_rowvec", a, v);
  Tensor out = a;
  int n = a.shape[0], d = a.shape[1];
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.data[static_cast<size_t>(i) * d + j] += v.data[static_cast<size_t>(j)];
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  // i,k,j order keeps the b rows hot in cache; accumulation order is fixed.
  for (int i = 0; i < m; ++i) {
    const double* arow = &a.data[static_cast<size_t>(i) * k];
    double* orow = &out.data[static_cast<size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = &b.data[static_cast<size_t>(p) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  int m = a.shape[0], n = a.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(j) * m + i] = a.data[static_cast<size_t>(i) * n + j];
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  require_rank2("softmax_rows", a);
  int n = a.shape[0], d = a.shape[1];
  if (d == 0) throw std::invalid_argument("softmax_rows: empty rows");
  Tensor out = a;
  for (int i = 0; i < n; ++i) {
    double* row = &out.data[static_cast<size_t>(i) * d];
    double mx = row[0];
    for (int j = 1; j < d; ++j)
      if (row[j] > mx) mx = row[j];
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int j = 0; j < d; ++j) row[j] /= sum;
  }
  return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  require_rank2("layer_norm", a);
  int n = a.shape[0], d = a.shape[1];
  if (gain.rank() != 1 || gain.shape[0] != d) shape_error("layer_norm gain", a, gain);
  if (bias.rank() != 1 || bias.shape[0] != d) shape_error("layer_norm bias", a, bias);
  Tensor out = Tensor::zeros({n, d});
  for (int i = 0; i < n; ++i) {
    const double* row = &a.data[static_cast<size_t>(i) * d];
    double* orow = &out.data[static_cast<size_t>(i) * d];
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < d; ++j)
      orow[j] = (row[j] - mean) * inv * gain.data[static_cast<size_t>(j)] + bias.data[static_cast<size_t>(j)];
  }
  return out;
}

Tensor gelu(const Tensor& a) {
  Tensor out = a;
  for (double& x : out.data) x = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_rank2("gather_rows", table);
  int v = table.shape[0], d = table.shape[1];
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= v)
      throw std::out_of_range("gather_rows: id " + std::to_string(id) + " outside table " + table.shape_str());
    const double* src = &table.data[static_cast<size_t>(id) * d];
    double* dst = &out.data[i * static_cast<size_t>(d)];
    for (int j = 0; j < d; ++j) dst[j] = src[j];
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  require_rank2("slice_cols", a);
  if (c0 < 0 || c1 > a.shape[1] || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") for " + a.shape_str());
  int n = a.shape[0], d = a.shape[1], w = c1 - c0;
  Tensor out = Tensor::zeros({n, w});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j)
      out.data[static_cast<size_t>(i) * w + j] = a.data[static_cast<size_t>(i) * d + c0 + j];
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  int n = parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != n) shape_error("concat_cols", parts[0], p);
    total += p.cols();
  }
  Tensor out = Tensor::zeros({n, total});
  int off = 0;
  for (const Tensor& p : parts) {
    int w = p.cols();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j)
        out.data[static_cast<size_t>(i) * total + off + j] = p.data[static_cast<size_t>(i) * w + j];
    off += w;
  }
  return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) shape_error("add_inplace", a, b);
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

void add_scaled_inplace(Tensor& a, const Tensor& b, double c) {
  if (!a.same_shape(b)) shape_error("add_scaled_inplace", a, b);
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += c * b.data[i];
}

}  // namespace tensor_ops

// ==================== Tape ====================

int Tape::push(Tensor value, std::vector<int> inputs, std::function<void(Tape&, int)> back) {
  Node node;
  node.grad = Tensor::zeros(value.shape);
  node.value = std::move(value);
  node.inputs = std::move(inputs);
  node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check_id(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw std::out_of_range("tape: node id " + std::to_string(id) + " out of range");
}

int Tape::leaf(Tensor value) { return push(std::move(value), {}, nullptr); }

const Tensor& Tape::value(int id) const {
  check_id(id);
  return nodes_[static_cast<size_t>(id)].value;
}

const Tensor& Tape::grad(int id) const {
  check_id(id);
  return nodes_[static_cast<size_t>(id)].grad;
}

Tensor& Tape::grad_mut(int id) {
  check_id(id);
  return nodes_[static_cast<size_t>(id)].grad;
}

int Tape::add(int a, int b) {
  Tensor out = tensor_ops::add(value(a), value(b));
  return push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
    tensor_ops::add_inplace(t.grad_mut(a), t.grad(self));
    tensor_ops::add_inplace(t.grad_mut(b), t.grad(self));
  });
}

int Tape::add_rowvec(int a, int v) {
  Tensor out = tensor_ops::add_rowvec(value(a), value(v));
  return push(std::move(out), {a, v}, [a, v](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    tensor_ops::add_inplace(t.grad_mut(a), g);
    Tensor& gv = t.grad_mut(v);
    int n = g.shape[0], d = g.shape[1];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) gv.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(i) * d + j];
  });
}

int Tape::add_const(int a, const Tensor& c) {
  Tensor out = tensor_ops::add(value(a), c);
  return push(std::move(out), {a},
              [a](Tape& t, int self) { tensor_ops::add_inplace(t.grad_mut(a), t.grad(self)); });
}

int Tape::scale(int a, double c) {
  Tensor out = tensor_ops::scale(value(a), c);
  return push(std::move(out), {a}, [a, c](Tape& t, int self) {
    tensor_ops::add_scaled_inplace(t.grad_mut(a), t.grad(self), c);
  });
}

int Tape::mul(int a, int b) {
  Tensor out = tensor_ops::mul(value(a), value(b));
  return push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& va = t.value(a);
    const Tensor& vb = t.value(b);
    Tensor& ga = t.grad_mut(a);
    Tensor& gb = t.grad_mut(b);
    for (size_t i = 0; i < g.data.size(); ++i) {
      ga.data[i] += g.data[i] * vb.data[i];
      gb.data[i] += g.data[i] * va.data[i];
    }
  });
}

int Tape::matmul(int a, int b) {
  Tensor out = tensor_ops::matmul(value(a), value(b));
  return push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(self);   // [m,n]
    const Tensor& va = t.value(a);    // [m,k]
    const Tensor& vb = t.value(b);    // [k,n]
    Tensor& ga = t.grad_mut(a);
    Tensor& gb = t.grad_mut(b);
    int m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    // dA += dC * B^T
    for (int i = 0; i < m; ++i) {
      const double* grow = &g.data[static_cast<size_t>(i) * n];
      double* garow = &ga.data[static_cast<size_t>(i) * k];
      for (int p = 0; p < k; ++p) {
        const double* brow = &vb.data[static_cast<size_t>(p) * n];
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
        garow[p] += acc;
      }
    }
    // dB += A^T * dC
    for (int p = 0; p < k; ++p) {
      double* gbrow = &gb.data[static_cast<size_t>(p) * n];
      for (int i = 0; i < m; ++i) {
        double av = va.data[static_cast<size_t>(i) * k + p];
        const double* grow = &g.data[static_cast<size_t>(i) * n];
        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
      }
    }
  });
}

int Tape::transpose(int a) {
  Tensor out = tensor_ops::transpose(value(a));
  return push(std::move(out), {a}, [a](Tape& t, int self) {
    Tensor gt = tensor_ops::transpose(t.grad(self));
    tensor_ops::add_inplace(t.grad_mut(a), gt);
  });
}

int Tape::reshape(int a, std::vector<int> shape) {
  const Tensor& va = value(a);
  if (shape_numel(shape) != va.numel())
    throw std::invalid_argument("reshape: element count mismatch " + va.shape_str() + " vs " +
                                shape_to_str(shape));
  Tensor out;
  out.shape = std::move(shape);
  out.data = va.data;
  return push(std::move(out), {a}, [a](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_mut(a);
    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
  });
}

int Tape::concat_rows(const std::vector<int>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  int cols = value(parts[0]).cols();
  int total = 0;
  for (int p : parts) {
    if (value(p).cols() != cols) shape_error("concat_rows", value(parts[0]), value(p));
    total += value(p).rows();
  }
  Tensor out = Tensor::zeros({total, cols});
  int off = 0;
  for (int p : parts) {
    const Tensor& vp = value(p);
    for (int i = 0; i < vp.rows(); ++i)
      for (int j = 0; j < cols; ++j) out.at(off + i, j) = vp.at(i, j);
    off += vp.rows();
  }
  std::vector<int> inputs = parts;
  return push(std::move(out), inputs, [inputs](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    int cols = g.shape[1];
    int off = 0;
    for (int p : inputs) {
      Tensor& gp = t.grad_mut(p);
      int r = gp.shape[0];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < cols; ++j)
          gp.data[static_cast<size_t>(i) * cols + j] += g.data[static_cast<size_t>(off + i) * cols + j];
      off += r;
    }
  });
}

int Tape::concat_cols(const std::vector<int>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  std::vector<Tensor> vals;
  vals.reserve(parts.size());
  for (int p : parts) vals.push_back(value(p));
  Tensor out = tensor_ops::concat_cols(vals);
  std::vector<int> inputs = parts;
  return push(std::move(out), inputs, [inputs](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    int n = g.shape[0], total = g.shape[1];
    int off = 0;
    for (int p : inputs) {
      Tensor& gp = t.grad_mut(p);
      int w = gp.shape[1];
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
          gp.data[static_cast<size_t>(i) * w + j] += g.data[static_cast<size_t>(i) * total + off + j];
      off += w;
    }
  });
}

int Tape::slice_cols(int a, int c0, int c1) {
  Tensor out = tensor_ops::slice_cols(value(a), c0, c1);
  return push(std::move(out), {a}, [a, c0, c1](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad_mut(a);
    int n = g.shape[0], w = c1 - c0, d = ga.shape[1];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < w; ++j)
        ga.data[static_cast<size_t>(i) * d + c0 + j] += g.data[static_cast<size_t>(i) * w + j];
  });
}

int Tape::gather_rows(int table, std::vector<int> ids) {
  Tensor out = tensor_ops::gather_rows(value(table), ids);
  return push(std::move(out), {table}, [table, ids = std::move(ids)](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    Tensor& gt = t.grad_mut(table);
    int d = g.shape[1];
    for (size_t i = 0; i < ids.size(); ++i) {
      double* dst = &gt.data[static_cast<size_t>(ids[i]) * d];
      const double* src = &g.data[i * static_cast<size_t>(d)];
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

int Tape::softmax_rows(int a) {
  Tensor out = tensor_ops::softmax_rows(value(a));
  return push(std::move(out), {a}, [a](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& p = t.value(self);
    Tensor& ga = t.grad_mut(a);
    int n = p.shape[0], d = p.shape[1];
    for (int i = 0; i < n; ++i) {
      const double* gr = &g.data[static_cast<size_t>(i) * d];
      const double* pr = &p.data[static_cast<size_t>(i) * d];
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += gr[j] * pr[j];
      double* gar = &ga.data[static_cast<size_t>(i) * d];
      for (int j = 0; j < d; ++j) gar[j] += pr[j] * (gr[j] - dot);
    }
  });
}

int Tape::layer_norm(int a, int gain, int bias) {
  const Tensor& va = value(a);
  const Tensor& vg = value(gain);
  Tensor out = tensor_ops::layer_norm(va, vg, value(bias));
  // cache normalized rows and inverse stddev for the backward pass
  int n = va.shape[0], d = va.shape[1];
  Tensor xhat = Tensor::zeros({n, d});
  std::vector<double> inv(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* row = &va.data[static_cast<size_t>(i) * d];
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    inv[static_cast<size_t>(i)] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int j = 0; j < d; ++j)
      xhat.data[static_cast<size_t>(i) * d + j] = (row[j] - mean) * inv[static_cast<size_t>(i)];
  }
  return push(std::move(out), {a, gain, bias},
              [a, gain, bias, xhat = std::move(xhat), inv = std::move(inv)](Tape& t, int self) {
                const Tensor& g = t.grad(self);
                const Tensor& vg = t.value(gain);
                Tensor& ga = t.grad_mut(a);
                Tensor& gg = t.grad_mut(gain);
                Tensor& gb = t.grad_mut(bias);
                int n = g.shape[0], d = g.shape[1];
                for (int i = 0; i < n; ++i) {
                  const double* gr = &g.data[static_cast<size_t>(i) * d];
                  const double* xr = &xhat.data[static_cast<size_t>(i) * d];
                  double mean_a = 0.0, mean_ax = 0.0;
                  for (int j = 0; j < d; ++j) {
                    double aj = gr[j] * vg.data[static_cast<size_t>(j)];
                    mean_a += aj;
                    mean_ax += aj * xr[j];
                  }
                  mean_a /= d;
                  mean_ax /= d;
                  double* gar = &ga.data[static_cast<size_t>(i) * d];
                  for (int j = 0; j < d; ++j) {
                    double aj = gr[j] * vg.data[static_cast<size_t>(j)];
                    gar[j] += inv[static_cast<size_t>(i)] * (aj - mean_a - xr[j] * mean_ax);
                    gg.data[static_cast<size_t>(j)] += gr[j] * xr[j];
                    gb.data[static_cast<size_t>(j)] += gr[j];
                  }
                }
              });
}

int Tape::gelu(int a) {
  Tensor out = tensor_ops::gelu(value(a));
  return push(std::move(out), {a}, [a](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad_mut(a);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (size_t i = 0; i < g.data.size(); ++i) {
      double xi = x.data[i];
      double phi = 0.5 * (1.0 + std::erf(xi * M_SQRT1_2));
      double dens = inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
      ga.data[i] += g.data[i] * (phi + xi * dens);
    }
  });
}

int Tape::sum(int a) {
  double total = 0.0;
  for (double x : value(a).data) total += x;
  return push(Tensor::vec({total}), {a}, [a](Tape& t, int self) {
    double g = t.grad(self).data[0];
    Tensor& ga = t.grad_mut(a);
    for (double& x : ga.data) x += g;
  });
}

int Tape::cross_entropy(int logits, std::vector<int> targets, std::vector<char> mask) {
  const Tensor& l = value(logits);
  require_rank2("cross_entropy", l);
  int n = l.shape[0], v = l.shape[1];
  if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n)
    throw std::invalid_argument("cross_entropy: targets/mask length " + std::to_string(targets.size()) + "/" +
                                std::to_string(mask.size()) + " does not match logits " + l.shape_str());
  int live = 0;
  for (int i = 0; i < n; ++i) {
    if (mask[static_cast<size_t>(i)]) {
      ++live;
      int t = targets[static_cast<size_t>(i)];
      if (t < 0 || t >= v)
        throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " outside vocab of " +
                                std::to_string(v));
    }
  }
  if (live == 0) throw std::invalid_argument("cross_entropy: all positions masked out");

  Tensor probs = tensor_ops::softmax_rows(l);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const double* row = &l.data[static_cast<size_t>(i) * v];
    double mx = row[0];
    for (int j = 1; j < v; ++j)
      if (row[j] > mx) mx = row[j];
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    double lse = mx + std::log(sum);
    total += lse - row[targets[static_cast<size_t>(i)]];
  }
  double loss = total / live;

  return push(Tensor::vec({loss}), {logits},
              [logits, targets = std::move(targets), mask = std::move(mask), probs = std::move(probs),
               live](Tape& t, int self) {
                double g = t.grad(self).data[0] / live;
                Tensor& gl = t.grad_mut(logits);
                int n = probs.shape[0], v = probs.shape[1];
                for (int i = 0; i < n; ++i) {
                  if (!mask[static_cast<size_t>(i)]) continue;
                  const double* pr = &probs.data[static_cast<size_t>(i) * v];
                  double* gr = &gl.data[static_cast<size_t>(i) * v];
                  int tgt = targets[static_cast<size_t>(i)];
                  for (int j = 0; j < v; ++j) gr[j] += g * (pr[j] - (j == tgt ? 1.0 : 0.0));
                }
              });
}

void Tape::backward(int loss_id) {
  check_id(loss_id);
  if (backward_done_) throw std::logic_error("tape: backward already ran on this tape");
  if (nodes_[static_cast<size_t>(loss_id)].value.numel() != 1)
    throw std::invalid_argument("tape: backward requires a scalar node, got " +
                                nodes_[static_cast<size_t>(loss_id)].value.shape_str());
  backward_done_ = true;

  // mark the subgraph feeding the loss; everything else keeps zero gradient
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<int> stack = {loss_id};
  reach[static_cast<size_t>(loss_id)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int in : nodes_[static_cast<size_t>(id)].inputs) {
      if (!reach[static_cast<size_t>(in)]) {
        reach[static_cast<size_t>(in)] = 1;
        stack.push_back(in);
      }
    }
  }

  nodes_[static_cast<size_t>(loss_id)].grad.data[0] = 1.0;
  for (int id = loss_id; id >= 0; --id) {
    if (!reach[static_cast<size_t>(id)]) continue;
    Node& node = nodes_[static_cast<size_t>(id)];
    if (node.back) node.back(*this, id);
  }
}

// ==================== parameter collections ====================

int ParamVars::id(const std::string& name) const {
  auto it = ids.find(name);
  if (it == ids.end()) throw std::invalid_argument("params: unknown parameter '" + name + "'");
  return it->second;
}

ParamVars register_params(Tape& tape, const ModelParams& params) {
  ParamVars vars;
  for (const auto& [name, tensor] : params) vars.ids[name] = tape.leaf(tensor);
  return vars;
}

GradMap collect_grads(const Tape& tape, const ParamVars& vars) {
  GradMap grads;
  for (const auto& [name, id] : vars.ids) grads[name] = tape.grad(id);
  return grads;
}

ModelParams params_add_scaled(const ModelParams& a, const GradMap& b, double c) {
  ModelParams out = a;
  for (auto& [name, tensor] : out) {
    auto it = b.find(name);
    if (it == b.end()) throw std::invalid_argument("params_add_scaled: missing entry for '" + name + "'");
    tensor_ops::add_scaled_inplace(tensor, it->second, c);
  }
  return out;
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, tensor] : a) {
    auto it = b.find(name);
    if (it == b.end()) return false;
    if (!tensor.same_shape(it->second) || tensor.data != it->second.data) return false;
  }
  return true;
}

bool params_all_finite(const ModelParams& a) {
  for (const auto& [name, tensor] : a) {
    (void)name;
    if (!tensor.all_finite()) return false;
  }
  return true;
}

// ==================== Adam ====================

void adam_step(ModelParams& params, const GradMap& grads, AdamState& state, double lr) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("adam_step: gradient missing for '" + name + "'");
    if (!p.same_shape(it->second))
      throw std::invalid_argument("adam_step: gradient shape " + it->second.shape_str() +
                                  " does not match parameter '" + name + "' " + p.shape_str());
  }
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m[name] = Tensor::zeros(p.shape);
      state.v[name] = Tensor::zeros(p.shape);
    }
  }
  state.step += 1;
  double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    if (!m.same_shape(p))
      throw std::invalid_argument("adam_step: state shape " + m.shape_str() + " does not match parameter '" +
                                  name + "' " + p.shape_str());
    for (size_t i = 0; i < p.data.size(); ++i) {
      double gi = g.data[i];
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * gi;
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * gi * gi;
      double mhat = m.data[i] / c1;
      double vhat = v.data[i] / c2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace mgec
