#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace mgec {

// Shared epsilon for layer normalization (inside the square root).
inline constexpr double kLayerNormEps = 1e-5;

/// Dense 64-bit float tensor, row-major. Rank 1 and 2 cover everything the
/// model needs; reshape allows higher ranks to pass through untouched.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double v);
  static Tensor vec(std::vector<double> v);
  static Tensor matrix(int rows, int cols, std::vector<double> v);

  int numel() const;
  int rank() const { return static_cast<int>(shape.size()); }
  // rank-2 accessors; throw on other ranks
  int rows() const;
  int cols() const;
  double& at(int i, int j);
  double at(int i, int j) const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;  // e.g. "[3x4]" for diagnostics
};

/// Plain (non-recording) tensor math. The tape ops and the inference decoder
/// both run on these kernels, so the two paths share one arithmetic
/// definition. All loops run in a fixed order; given identical inputs the
/// results are bit-identical.
namespace tensor_ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // [N,D] + [D]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& a);
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
void add_inplace(Tensor& a, const Tensor& b);
void add_scaled_inplace(Tensor& a, const Tensor& b, double c);  // a += c*b

}  // namespace tensor_ops

/// Reverse-mode autodiff tape. Nodes are appended in creation order, which is
/// a topological order of the DAG; backward() walks that order once in
/// reverse. Gradient accumulation order is therefore fixed by construction:
/// a reproducible run performs bit-identical arithmetic.
///
/// Usage: build leaves and ops, call backward(loss) exactly once, read grads.
class Tape {
 public:
  /// Create a leaf node (input or parameter). Returns its id.
  int leaf(Tensor value);

  // ---- recorded operations; each returns the id of the result node ----
  int add(int a, int b);
  int add_rowvec(int a, int v);
  int add_const(int a, const Tensor& c);  // constant offset, no grad to c
  int scale(int a, double c);
  int mul(int a, int b);
  int matmul(int a, int b);
  int transpose(int a);
  int reshape(int a, std::vector<int> shape);
  int concat_rows(const std::vector<int>& parts);
  int concat_cols(const std::vector<int>& parts);
  int slice_cols(int a, int c0, int c1);
  int gather_rows(int table, std::vector<int> ids);
  int softmax_rows(int a);
  int layer_norm(int a, int gain, int bias);
  int gelu(int a);
  int sum(int a);
  /// Mean cross-entropy over the positions where mask is nonzero.
  /// logits [N,V], targets/mask length N. At least one position must be live.
  int cross_entropy(int logits, std::vector<int> targets, std::vector<char> mask);

  /// Backpropagate from a scalar node. May be called once per tape.
  void backward(int loss_id);

  const Tensor& value(int id) const;
  const Tensor& grad(int id) const;
  Tensor& grad_mut(int id);  // used by backward rules
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    std::function<void(Tape&, int)> back;  // null for leaves
  };

  int push(Tensor value, std::vector<int> inputs, std::function<void(Tape&, int)> back);
  void check_id(int id) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Named parameter collection. std::map keeps iteration name-sorted, which
/// fixes the order of every whole-model accumulation loop.
using ModelParams = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, Tensor>;

/// Parameters registered on a tape: name -> node id.
struct ParamVars {
  std::map<std::string, int> ids;
  int id(const std::string& name) const;
};

ParamVars register_params(Tape& tape, const ModelParams& params);
GradMap collect_grads(const Tape& tape, const ParamVars& vars);

// Elementwise helpers over whole parameter sets.
ModelParams params_add_scaled(const ModelParams& a, const GradMap& b, double c);
bool params_equal(const ModelParams& a, const ModelParams& b);
bool params_all_finite(const ModelParams& a);

/// Adam state. Moments are allocated lazily on the first step and always
/// mirror the parameter shapes.
struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// One bias-corrected Adam update, in place. grads must cover every
/// parameter and match shapes exactly.
void adam_step(ModelParams& params, const GradMap& grads, AdamState& state, double lr);

}  // namespace mgec
