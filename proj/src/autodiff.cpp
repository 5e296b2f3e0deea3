#include "emblora/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>

namespace emblora::ad {

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var Var::constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) {
    return Matrix::Zero(node_->value.rows(), node_->value.cols());
  }
  return node_->grad;
}

double Var::scalar() const {
  if (node_->value.size() != 1) {
    throw std::logic_error("ad::Var::scalar on non-scalar value");
  }
  return node_->value(0, 0);
}

Var make_result(Matrix value, std::vector<Var> inputs,
                std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string("ad::") + op + ": shape mismatch");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("ad::matmul: inner dimension mismatch");
  return make_result(a.value() * b.value(), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("ad::matmul_nt: inner dimension mismatch");
  return make_result(a.value() * b.value().transpose(), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad * pb.value);
    if (pb.requires_grad) pb.accumulate(self.grad.transpose() * pa.value);
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(self.grad.cwiseProduct(pa.value));
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  return make_result(a.value().cwiseQuotient(b.value()), {a, b}, [](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) pa.accumulate(self.grad.cwiseQuotient(pb.value));
    if (pb.requires_grad) {
      pb.accumulate(-self.grad.cwiseProduct(pa.value).cwiseQuotient(pb.value.cwiseProduct(pb.value)));
    }
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) {
    self.parents[0]->accumulate(self.grad * s);
  });
}

Var add_row(const Var& a, const Eigen::RowVectorXd& row) {
  if (a.cols() != row.size()) throw std::invalid_argument("ad::add_row: width mismatch");
  Matrix out = a.value();
  out.rowwise() += row;
  return make_result(std::move(out), {a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad);
  });
}

Var silu(const Var& a) {
  const Matrix sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  Matrix out = a.value().cwiseProduct(sig);
  return make_result(std::move(out), {a}, [sig](Node& self) {
    const auto& x = self.parents[0]->value.array();
    const auto s = sig.array();
    self.parents[0]->accumulate((self.grad.array() * (s * (1.0 + x * (1.0 - s)))).matrix());
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  return make_result(out, {a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(self.value));
  });
}

Var log(const Var& a) {
  return make_result(a.value().array().log().matrix(), {a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.cwiseQuotient(self.parents[0]->value));
  });
}

Var sqrt(const Var& a) {
  return make_result(a.value().array().sqrt().matrix(), {a}, [](Node& self) {
    self.parents[0]->accumulate((0.5 * self.grad.array() / self.value.array()).matrix());
  });
}

Var softmax_rows(const Var& a) {
  // Work on the transpose so each softmax row is a contiguous column.
  Matrix t = a.value().transpose();
  for (Eigen::Index c = 0; c < t.cols(); ++c) {
    auto col = t.col(c);
    col = (col.array() - col.maxCoeff()).exp().matrix();
    col /= col.sum();
  }
  Matrix out = t.transpose();
  return make_result(std::move(out), {a}, [](Node& self) {
    // dX = S * (dS - rowsum(dS * S))
    const Matrix& s = self.value;
    Eigen::VectorXd dots = (self.grad.cwiseProduct(s)).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dots;
    self.parents[0]->accumulate(g.cwiseProduct(s));
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [](Node& self) {
    const auto& p = self.parents[0]->value;
    self.parents[0]->accumulate(Matrix::Constant(p.rows(), p.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

void backward(const Var& root) {
  if (root.value().size() != 1) throw std::invalid_argument("ad::backward: root must be scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

}  // namespace emblora::ad
