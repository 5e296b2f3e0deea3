#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace emblora {

/// Raised when an operation's precondition is violated by its inputs.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for failures of I/O, external backends or malformed archives.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a, used for content hashes that must be stable across runs.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::byte> bytes);
  Fnv1a& update(std::string_view text);
  Fnv1a& update(const Eigen::MatrixXd& m);
  Fnv1a& update(std::uint64_t v);
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

/// Seeded generator for every stochastic component. Same seed, same draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal();
  double uniform();
  int uniform_int(int lo, int hi_exclusive);
  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Mixes a base seed with a string tag so sub-components get independent streams.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

}  // namespace emblora
