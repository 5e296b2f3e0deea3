#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// Values are computed eagerly. A node keeps its parents and a backward
// closure only when at least one input requires a gradient, so pure
// inference builds no graph and frees intermediates as it goes.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <vector>

namespace emblora::ad {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Accumulates into grad, allocating on first use.
  void accumulate(const Matrix& g);
};

class Var {
 public:
  Var() = default;

  static Var constant(Matrix value);
  static Var parameter(Matrix value);

  const Matrix& value() const { return node_->value; }
  // Zero matrix of the right shape when no gradient has flowed here.
  Matrix grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool valid() const { return static_cast<bool>(node_); }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  // Value of a 1x1 variable.
  double scalar() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend Var make_result(Matrix value, std::vector<Var> inputs,
                         std::function<void(Node&)> backward);
};

// Builds a result node; backward is dropped when no input needs a gradient.
Var make_result(Matrix value, std::vector<Var> inputs,
                std::function<void(Node&)> backward);

Var matmul(const Var& a, const Var& b);      // a * b
Var matmul_nt(const Var& a, const Var& b);   // a * b^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);         // elementwise
Var div(const Var& a, const Var& b);         // elementwise
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Eigen::RowVectorXd& row);  // broadcast constant row
Var silu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var softmax_rows(const Var& a);
Var sum(const Var& a);                       // 1x1
Var mean(const Var& a);                      // 1x1

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

// Runs reverse accumulation from a 1x1 root. Gradients of earlier backward
// calls on the same graph are not cleared.
void backward(const Var& root);

}  // namespace emblora::ad
