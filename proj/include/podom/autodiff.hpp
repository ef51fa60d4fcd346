#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

#include "podom/errors.hpp"

namespace podom::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

/// Dense row-major array of doubles. Operations work on rank-2 views; a
/// rank-1 tensor of length n is viewed as 1 x n.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::vector<double> values);
  static Tensor from_matrix(const RowMat& m);
  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  int rows() const;
  int cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  double item() const;

  MatMap mat() { return MatMap(data_.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data_.data(), rows(), cols()); }

  Tensor reshaped(std::vector<int> shape) const;
  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  std::vector<int> shape_;
  // aligned storage keeps vectorized reductions independent of heap layout
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

std::string shape_string(const std::vector<int>& shape);

/// Named tensor with its gradient. Non-trainable parameters hold buffers
/// such as batch-norm running statistics.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad.fill(0.0); }
};

/// Owns parameters with stable addresses, in insertion order.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor init, bool trainable = true);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter*> trainable();
  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t trainable_scalar_count() const;
  std::size_t size() const { return params_.size(); }
  void zero_grad();

  /// Deep copy of every value (gradients are reset).
  ParameterStore clone() const;
  /// Copies values from `other`; names and shapes must match exactly.
  void assign_values(const ParameterStore& other);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class Mode { kTrain, kInfer };

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Tensor& grad() const;
  int rows() const { return value().rows(); }
  int cols() const { return value().cols(); }
  bool valid() const { return graph != nullptr && id >= 0; }
};

/// Reverse-mode tape. Node creation order is a topological order; backward
/// visits nodes in exactly the reverse order and sums gradients of shared
/// subexpressions. Single-threaded per instance.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf without gradient tracking.
  Var constant(Tensor t);
  /// Leaf whose gradient is kept and readable after backward().
  Var input(Tensor t);
  /// Leaf aliasing a parameter; backward() adds into p.grad.
  Var param(Parameter& p);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and runs the tape backwards.
  void backward(Var out);

  const Tensor& value(int id) const;
  const Tensor& grad(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad_buffer(int id);

  /// Adds an op node. `inputs` decide whether it requires grad; the backward
  /// function is dropped when none of them do.
  Var record(Tensor value, std::vector<int> inputs, BackwardFn backward, const char* op);

 private:
  struct Node {
    Tensor owned;
    const Tensor* value = nullptr;
    Tensor grad;
    Parameter* param = nullptr;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
    const char* op = "";
  };
  std::deque<Node> nodes_;
};

// ---- ops ------------------------------------------------------------------

Var matmul(Var a, Var b);
/// x + b with b (1 x m) broadcast over rows.
Var add_bias(Var x, Var b);
/// xW + b.
Var linear(Var x, Var w, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);

Var relu(Var x);
/// x / (1 + |x|), derivative 1 / (1 + |x|)^2.
Var softsign(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var exp(Var x);
/// |x| with subgradient 0 at 0.
Var abs(Var x);

/// Sum of every element as a 1x1 tensor.
Var sum(Var x);
Var mean(Var x);
/// Euclidean norm of each row (n x 1); zero rows get zero gradient.
Var row_norm(Var x);
/// Cosine similarity of matching rows of a and b (n x 1).
Var row_cosine(Var a, Var b, double eps = 1e-8);

Var gather_rows(Var x, std::vector<int> index);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var x, int begin, int end);
Var slice_cols(Var x, int begin, int end);
Var reshape(Var x, std::vector<int> shape);

/// Channelwise max over contiguous row groups: group g spans rows
/// [offsets[g], offsets[g+1]). Gradient goes to the lowest-index maximal row.
Var max_pool_groups(Var x, std::vector<int> offsets);

/// Mean of the k largest entries of an n x 1 (or 1 x n) tensor; gradient
/// flows only to the selected entries. Ties pick lower indices first.
Var topk_mean(Var x, int k);

struct BatchNormParams {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  Parameter* running_mean = nullptr;
  Parameter* running_var = nullptr;
  double momentum = 0.9;
  double eps = 1e-5;
};

/// Per-column normalization over rows. Training mode uses batch statistics
/// and updates the running estimates (running = m * running + (1 - m) *
/// batch); inference mode uses the running estimates.
Var batch_norm(Var x, const BatchNormParams& bn, Mode mode);

/// Inverted dropout: in training mode keeps each element with keep_prob and
/// scales survivors by 1 / keep_prob; identity in inference mode.
Var dropout(Var x, double keep_prob, Mode mode, std::mt19937_64& rng);

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamStepReport {
  bool applied = true;
  std::vector<std::string> nonfinite;  // parameters with non-finite gradients
};

/// Adam with bias correction. A step with any non-finite gradient is skipped
/// entirely and reported.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  AdamStepReport step(std::span<Parameter* const> params);
  int steps() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  struct Slot {
    Tensor m;
    Tensor v;
  };
  AdamConfig cfg_;
  int t_ = 0;
  std::unordered_map<const Parameter*, Slot> slots_;
};

// ---- initialization helpers ------------------------------------------------

/// He-normal initialized weight (fan_in x fan_out).
Tensor he_normal(int fan_in, int fan_out, std::mt19937_64& rng);
Tensor glorot_uniform(int fan_in, int fan_out, std::mt19937_64& rng);

}  // namespace podom::ad
