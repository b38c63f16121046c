#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mdgd/tensor.hpp"

namespace mdgd {

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = false;
  friend bool operator==(const Parameter&, const Parameter&) = default;
};

// Named parameters, iterated in lexicographic name order.
using ParamSet = std::map<std::string, Parameter>;

std::vector<std::string> trainable_names(const ParamSet& params);

// Gradient per trainable parameter name. std::map keeps the flattening order
// lexicographic.
class GradientVector {
 public:
  GradientVector() = default;
  explicit GradientVector(std::map<std::string, Tensor> entries) : entries_(std::move(entries)) {}

  // All-zero vector over the trainable subset of params.
  static GradientVector zeros_like(const ParamSet& params);
  static GradientVector zeros_like(const GradientVector& other);

  const std::map<std::string, Tensor>& entries() const { return entries_; }
  std::map<std::string, Tensor>& entries() { return entries_; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::size_t numel() const;
  std::vector<std::string> names() const;

  std::vector<double> flatten() const;
  // Inverse of flatten against a template providing names and shapes.
  static GradientVector unflatten(std::span<const double> flat, const GradientVector& layout);

  friend bool operator==(const GradientVector&, const GradientVector&) = default;

 private:
  std::map<std::string, Tensor> entries_;
};

// Throws ContractError naming the symmetric difference when key sets differ.
void require_same_keys(const GradientVector& a, const GradientVector& b, const char* what);

double gv_dot(const GradientVector& a, const GradientVector& b);
double gv_norm(const GradientVector& a);
// a + c * b
GradientVector gv_axpy(const GradientVector& a, double c, const GradientVector& b);
GradientVector gv_scale(const GradientVector& a, double c);
double gv_cosine(const GradientVector& a, const GradientVector& b);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run recording of one forward pass. Each tape supports exactly one
// backward pass.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    // Reads grad of this node, accumulates into inputs' grads.
    std::function<void(Tape&, std::size_t)> backward;
    std::string param_name;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to a parameter; differentiable iff the parameter is trainable.
  // Binding the same name twice returns the same node.
  Var parameter(const Parameter& p);
  // Binds every parameter of the set so that backward reports the full
  // trainable key set, including parameters the loss never touched.
  void bind_all(const ParamSet& params);
  Var param(const std::string& name) const;

  Var record(Tensor value, std::vector<std::size_t> inputs,
             std::function<void(Tape&, std::size_t)> backward);

  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(std::size_t id) { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Accumulate g into the gradient of node id (no-op if it needs none).
  void accumulate(std::size_t id, const Tensor& g);
  // Mutable gradient buffer for node id, zero-initialized on first use.
  Tensor& grad_buffer(std::size_t id);
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  GradientVector backward(Var loss);
  bool used() const { return used_; }

 private:
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
  bool used_ = false;
};

namespace ag {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
// x[n x d] + bias[d] broadcast over rows.
Var add_bias(Var x, Var bias);
// Tanh-approximated GELU; smooth everywhere.
Var gelu(Var x);
// Row-wise layer normalization with gain and bias of length d.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// out[i] = x[rows[i]]; rows may repeat.
Var gather_rows(Var x, std::vector<std::size_t> rows);
Var concat_rows(const std::vector<Var>& parts);
Var sum(Var x);
Var mean(Var x);
Var sum_squares(Var x);

struct AttentionLayout {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t heads = 1;
  // batch*seq flags; keys with flag 0 are never attended to.
  std::vector<std::uint8_t> key_valid;
};

// Causal multi-head attention over q, k, v of shape [batch*seq x d_model]
// (rows grouped by sample). Returns the concatenated head outputs.
Var causal_attention(Var q, Var k, Var v, const AttentionLayout& layout);

// Weighted negative log-likelihood of targets under softmax(logits) rows.
Var cross_entropy(Var logits, const std::vector<std::size_t>& targets,
                  const std::vector<double>& weights);

enum class L1Norm { kSum, kMean };
// ||x - c||_1 with subgradient sign(x - c), sign(0) = 0.
Var l1_distance(Var x, const Tensor& c, L1Norm norm);

}  // namespace ag

// Builds a scalar loss for the given parameters on a fresh tape.
using LossBuilder = std::function<Var(Tape&, const ParamSet&)>;

// Reverse-mode gradient of build_loss at params.
GradientVector gradient_of(const LossBuilder& build_loss, const ParamSet& params);
double loss_value(const LossBuilder& build_loss, const ParamSet& params);

// Max over trainable coordinates of |ad - fd| / max(|ad|, |fd|, 1e-8) with
// central differences of step h.
double finite_difference_check(const LossBuilder& build_loss, const ParamSet& params, double h);

// Same check with the offending coordinate spelled out.
struct FdReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_name;
  std::size_t worst_index = 0;
  double worst_ad = 0.0;
  double worst_fd = 0.0;
};
FdReport finite_difference_report(const LossBuilder& build_loss, const ParamSet& params, double h);

}  // namespace mdgd
