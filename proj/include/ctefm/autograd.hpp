#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctefm/tensor_io.hpp"

namespace ctefm {

// A named trainable tensor plus its gradient and AdamW moments. Parameters
// live in a ParamStore; tapes bind to them by reference when building graphs.
struct Parameter {
  std::string name;
  int index = -1;  // position in its ParamStore
  Matrix value;
  Matrix grad;
  Matrix m;  // first moment
  Matrix v;  // second moment

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class ParamStore {
 public:
  Parameter& create(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  std::size_t size() const { return items_.size(); }
  Parameter& at(std::size_t i) { return *items_[i]; }
  const Parameter& at(std::size_t i) const { return *items_[i]; }
  std::size_t total_values() const;
  void zero_grads();

 private:
  std::vector<std::unique_ptr<Parameter>> items_;
};

namespace nn {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  double scalar() const;  // value of a 1x1 node
  Tape* tape() const { return tape_; }
  int index() const { return idx_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int i) : tape_(t), idx_(i) {}
  Tape* tape_ = nullptr;
  int idx_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a single
// reverse sweep is a valid topological traversal. One backward() per tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool track);
  Var constant(Matrix value) { return leaf(std::move(value), false); }
  Var param(Parameter& p);

  // Appends a computed node. `backward` receives the tape and the node's own
  // index; it must route grad_of(index) into the parents' grads.
  Var op(Matrix value, std::initializer_list<Var> parents,
         std::function<void(Tape&, int)> backward);

  const Matrix& value_of(int i) const { return nodes_[static_cast<std::size_t>(i)].value; }
  bool tracked(int i) const { return nodes_[static_cast<std::size_t>(i)].track; }
  bool has_grad(int i) const { return nodes_[static_cast<std::size_t>(i)].grad_init; }
  // Gradient buffer of node i, allocated (zeroed) on first access.
  Matrix& grad_of(int i);

  // Backpropagates from a scalar (1x1) root.
  void backward(Var root);

  // Adds each bound parameter's node gradient, times `scale`, into `acc`
  // (indexed by Parameter::index). All bound parameters must come from one
  // ParamStore. Call after backward().
  void collect_param_grads(std::vector<Matrix>& acc, double scale = 1.0) const;

  // Summed gradient of one bound parameter (zero matrix if untouched).
  Matrix param_grad(const Parameter& p) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool track = false;
    bool grad_init = false;
    std::function<void(Tape&, int)> backward;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<int, Parameter*>> bound_;
};

// ---- elementwise / scalar ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);        // hadamard
Var div(Var a, Var b);        // elementwise
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var gelu(Var a);              // exact erf form
Var tanh_(Var a);
Var sqrt_eps(Var a, double eps);   // sqrt(a + eps)
Var rsqrt_eps(Var a, double eps);  // 1/sqrt(a + eps)

// ---- linear algebra ----
Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T
Var add_rowvec(Var a, Var b);  // a [m x n] + broadcast b [1 x n]
Var mul_rowvec(Var a, Var b);  // a [m x n] .* broadcast b [1 x n]
Var scale_by(Var a, Var s);    // a * s(0,0), s is 1x1

// ---- shape ----
Var concat_cols(Var a, Var b);
Var concat_rows(Var a, Var b);
Var slice_cols(Var a, Eigen::Index c0, Eigen::Index n);
Var slice_rows(Var a, Eigen::Index r0, Eigen::Index n);
Var upsample_rows2(Var a);  // each row repeated twice

// ---- reductions ----
Var sum_all(Var a);    // 1x1
Var mean_all(Var a);   // 1x1
Var mean_over_rows(Var a);  // [m x n] -> [1 x n]
Var sub_rowvec(Var a, Var b);  // a [m x n] - broadcast b [1 x n]

// ---- nonlinear structured ----
Var softmax_rows(Var a);
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-6);

// 1-D convolution over rows (time). x is [T x Cin]; w is [(k*Cin) x Cout]
// with row index tap*Cin + cin; b is [1 x Cout]. Zero padding `pad` on both
// ends, output length floor((T + 2*pad - k)/stride) + 1.
Var conv1d(Var x, Var w, Var b, int kernel, int stride, int pad);

}  // namespace nn
}  // namespace ctefm
