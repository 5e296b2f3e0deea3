#include "emblora/common.hpp"

#include <cstdio>
#include <cstring>

namespace emblora {

Fnv1a& Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 0x100000001b3ULL;
  }
  return *this;
}

Fnv1a& Fnv1a::update(std::string_view text) {
  update(std::as_bytes(std::span(text.data(), text.size())));
  return update(static_cast<std::uint64_t>(text.size()));
}

Fnv1a& Fnv1a::update(const Eigen::MatrixXd& m) {
  update(static_cast<std::uint64_t>(m.rows()));
  update(static_cast<std::uint64_t>(m.cols()));
  return update(std::as_bytes(std::span(m.data(), static_cast<std::size_t>(m.size()))));
}

Fnv1a& Fnv1a::update(std::uint64_t v) {
  std::byte buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::byte>((v >> (8 * i)) & 0xff);
  return update(std::span<const std::byte>(buf, 8));
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double Rng::normal() { return normal_(engine_); }

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

int Rng::uniform_int(int lo, int hi_exclusive) {
  return std::uniform_int_distribution<int>(lo, hi_exclusive - 1)(engine_);
}

Eigen::MatrixXd Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  // Fill row-major so the draw order does not depend on Eigen's storage.
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal();
  return m;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return Fnv1a().update(seed).update(tag).digest();
}

}  // namespace emblora
