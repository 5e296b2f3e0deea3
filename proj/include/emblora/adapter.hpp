#pragma once

// Low-rank adapter value types shared by the backbone and the lora module.

#include "emblora/autodiff.hpp"

#include <map>
#include <string>
#include <vector>

namespace emblora {

/// One low-rank factor pair. For a projection y = x W with W of shape
/// d_in x d_out, the adapter adds scale * (B A)^T, so A is rank x d_in and
/// B is d_out x rank.
struct LoraEntry {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;

  bool operator==(const LoraEntry& o) const {
    return A.rows() == o.A.rows() && A.cols() == o.A.cols() && B.rows() == o.B.rows() && B.cols() == o.B.cols() &&
           A == o.A && B == o.B;
  }
};

struct LoraAdapter {
  int rank = 0;
  double alpha = 0.0;
  std::map<std::string, LoraEntry> entries;  // keyed by projection id

  double scale() const { return alpha / static_cast<double>(rank); }
  bool operator==(const LoraAdapter&) const = default;
};

/// Gradient of a scalar loss with respect to every adapter entry.
using AdapterGrad = std::map<std::string, LoraEntry>;

struct LoraFactor {
  ad::Var A;
  ad::Var B;
  double scale = 1.0;
};

/// Adapter factors as autodiff leaves, consumed by a denoiser forward pass.
using LoraBinding = std::map<std::string, LoraFactor>;

LoraBinding bind_constants(const LoraAdapter& adapter);
LoraBinding bind_parameters(const LoraAdapter& adapter);
/// Reads gradients off a binding after ad::backward.
AdapterGrad collect_grad(const LoraBinding& binding);

}  // namespace emblora
