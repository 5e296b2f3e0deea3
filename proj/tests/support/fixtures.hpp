#pragma once

#include "emblora/backbone.hpp"
#include "emblora/lora.hpp"
#include "emblora/training.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <string>

#include <unistd.h>

namespace fixture {

inline std::filesystem::path source_dir() { return EMBLORA_SOURCE_DIR; }

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("emblora-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline emblora::DiffusionModel toy(std::uint64_t seed = 0) {
  return emblora::make_model("toy", {50, seed, 1.0});
}

// Denoiser with the toy block layout whose prediction is a plain function of
// the latent and timestep. Adapter bindings are ignored.
class StubDenoiser final : public emblora::BlockedDenoiser {
 public:
  using Fn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& z, int t)>;

  explicit StubDenoiser(Fn fn) : fn_(std::move(fn)), blocks_(emblora::ToyBackbone().blocks()) {}

  std::string name() const override { return "stub"; }
  const std::vector<emblora::BlockSpec>& blocks() const override { return blocks_; }
  const std::vector<emblora::LoraTarget>& lora_targets() const override { return targets_; }
  emblora::ad::Var forward(const emblora::ad::Var& latent, const emblora::Latent&, int t, const emblora::CondMap& cond,
                           const emblora::ForwardContext& ctx) const override {
    check_cond(cond);
    // Hooks see the input latent as every block's feature.
    if (ctx.hook) {
      const Eigen::MatrixXd att = Eigen::MatrixXd::Constant(1, 1, 1.0);
      for (const auto& b : blocks_) (*ctx.hook)(b.name, latent.value(), att);
    }
    return emblora::ad::Var::constant(fn_(latent.value(), t));
  }
  std::uint64_t weights_hash() const override { return 0; }

 private:
  Fn fn_;
  std::vector<emblora::BlockSpec> blocks_;
  std::vector<emblora::LoraTarget> targets_;
};

inline emblora::DiffusionModel with_denoiser(std::shared_ptr<const emblora::BlockedDenoiser> d) {
  auto m = toy();
  m.denoiser = std::move(d);
  return m;
}

// Adapter with both factors random so every entry carries a gradient.
inline emblora::LoraAdapter random_adapter(const emblora::BlockedDenoiser& model, int rank, std::uint64_t seed,
                                           double b_scale = 0.05) {
  auto a = emblora::init_adapter(model, rank, rank, seed);
  emblora::Rng rng(seed ^ 0x5bd1e995ULL);
  for (auto& [id, e] : a.entries) e.B = b_scale * rng.normal_matrix(e.B.rows(), e.B.cols());
  return a;
}

// Encoded pair built directly from random latents of the given grid size.
inline emblora::EncodedPair random_pair(const emblora::DiffusionModel& model, int grid, std::uint64_t seed,
                                        const std::string& caption = "red flower") {
  emblora::Rng rng(seed);
  emblora::EncodedPair p;
  p.style = {grid, grid, 0.5 * rng.normal_matrix(grid * grid, 48)};
  p.content = {grid, grid, 0.5 * rng.normal_matrix(grid * grid, 48)};
  p.c_emb = model.text->encode(emblora::style_prompt(caption));
  p.c_des = model.text->encode(emblora::content_prompt(caption));
  return p;
}

}  // namespace fixture
