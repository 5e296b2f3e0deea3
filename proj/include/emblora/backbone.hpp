#pragma once

#include "emblora/adapter.hpp"
#include "emblora/autodiff.hpp"
#include "emblora/common.hpp"
#include "emblora/image.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace emblora {

enum class Stage { down, mid, up };

struct BlockSpec {
  std::string name;
  std::vector<std::string> attention_layers;
  Stage stage = Stage::down;
};

/// Self-attention projections in the y = F W convention (W is d_in x d_out).
struct AttentionLayer {
  std::string name;
  Eigen::MatrixXd W_q, W_k, W_v, W_o;

  Eigen::Index d_k() const { return W_q.cols(); }
  Eigen::Index d_in() const { return W_q.rows(); }
  /// Throws ContractError naming the layer when projections disagree.
  void validate() const;
};

/// F^o = f_o(softmax(Q K^T / sqrt(d_k)) V), Q = F W_q, K = F W_k, V = F W_v.
Eigen::MatrixXd attention_forward(const AttentionLayer& layer, const Eigen::MatrixXd& features);

/// Latent array stored as (height * width) tokens x channels, tokens row-major.
struct Latent {
  int height = 0;
  int width = 0;
  Eigen::MatrixXd data;

  int channels() const { return static_cast<int>(data.cols()); }
  bool same_shape(const Latent& o) const {
    return height == o.height && width == o.width && data.cols() == o.data.cols();
  }
  bool operator==(const Latent& o) const { return same_shape(o) && data == o.data; }
};

/// Text condition routed per block.
using CondMap = std::map<std::string, Eigen::VectorXd>;

/// Additive spatial biases (tokens x block width) keyed by block name.
using ControlResiduals = std::map<std::string, Eigen::MatrixXd>;

struct ControlImages {
  std::optional<Image> tile;  // low-passed RGB
  std::optional<Image> edge;  // single channel in [0, 1]
};

/// Called once per block per forward pass with the self-attention output
/// F^o (tokens x width) and the softmax matrix.
using FeatureHook = std::function<void(const std::string& block, const Eigen::MatrixXd& output,
                                       const Eigen::MatrixXd& attention)>;

struct ForwardContext {
  const LoraBinding* lora = nullptr;
  const ControlResiduals* control = nullptr;
  const FeatureHook* hook = nullptr;
};

struct LoraTarget {
  std::string id;     // e.g. "down.1.1.attn.to_q"
  std::string block;  // owning block
  Eigen::Index d_in = 0;
  Eigen::Index d_out = 0;
};

/// A latent noise predictor exposing named attention-bearing blocks.
/// Implementations are immutable after construction.
class BlockedDenoiser {
 public:
  virtual ~BlockedDenoiser() = default;

  virtual std::string name() const = 0;
  virtual const std::vector<BlockSpec>& blocks() const = 0;
  virtual const std::vector<LoraTarget>& lora_targets() const = 0;
  virtual ad::Var forward(const ad::Var& latent, const Latent& shape, int t, const CondMap& cond,
                          const ForwardContext& ctx) const = 0;
  virtual std::uint64_t weights_hash() const = 0;
  /// Spatial biases for the control branches; none by default.
  virtual ControlResiduals control_residuals(const ControlImages&, const Latent&) const { return {}; }

  std::vector<std::string> block_names() const;
  /// Throws ContractError unless every block has an embedding.
  void check_cond(const CondMap& cond) const;
  /// Throws ContractError listing binding keys that name no target, or bad shapes.
  void check_binding(const LoraBinding& binding) const;
};

CondMap uniform_cond(const BlockedDenoiser& model, const Eigen::VectorXd& embedding);

struct DenoiserInput {
  Latent z_t;
  int t = 0;
  CondMap cond;
};

/// Noise prediction, same shape as input.z_t. Pure function of its arguments.
Latent denoise(const BlockedDenoiser& model, const DenoiserInput& input, const LoraAdapter* adapter = nullptr,
               const ControlResiduals* control = nullptr);

// ---------------------------------------------------------------------------
// Toy backbone

struct ToyBackboneOptions {
  int latent_channels = 48;
  int widths[3] = {8, 16, 32};
  int text_dim = 16;
  int time_dim = 16;
  std::uint64_t seed = 0;
  double control_strength = 1.0;
  int steps = 50;
  /// Variance of the Gaussian prior behind the analytic skip term.
  double data_variance = 0.25;
  /// Gain on the network residual added to the skip term.
  double residual_gain = 0.2;
};

/// Small UNet-shaped denoiser: three resolutions with widths 8/16/32 and one
/// self-attention layer in each of the eleven blocks
///   down.1.0 down.1.1 | down.2.0 down.2.1 | mid | up.0.0 up.0.1 up.0.2 | up.1.0 up.1.1 up.1.2
/// Tokens are the flattened latent grid; down.1/up.1 run at full latent
/// resolution, down.2/up.0 at half, mid at quarter.
///
/// The prediction is k_t * z + gain * net(z), where k_t z is the optimal noise
/// estimate for a zero-mean Gaussian prior of the configured variance. The
/// skip term keeps DDIM trajectories well conditioned, as a trained
/// denoiser would.
class ToyBackbone final : public BlockedDenoiser {
 public:
  explicit ToyBackbone(ToyBackboneOptions options = {});

  std::string name() const override { return "toy"; }
  const std::vector<BlockSpec>& blocks() const override { return specs_; }
  const std::vector<LoraTarget>& lora_targets() const override { return targets_; }
  ad::Var forward(const ad::Var& latent, const Latent& shape, int t, const CondMap& cond,
                  const ForwardContext& ctx) const override;
  std::uint64_t weights_hash() const override;
  ControlResiduals control_residuals(const ControlImages& images, const Latent& shape) const override;

  const ToyBackboneOptions& options() const { return options_; }
  const AttentionLayer& attention(const std::string& block) const;
  /// Copy with scale * (B A)^T folded into the projection weights.
  ToyBackbone merged(const LoraAdapter& adapter) const;

 private:
  struct Block {
    AttentionLayer attn;
    Eigen::MatrixXd w_cond, w_time, mlp_in, mlp_out;
    Eigen::MatrixXd ctrl_tile, ctrl_edge;
    int level = 0;  // 0 full, 1 half, 2 quarter resolution
  };

  ad::Var run_block(const Block& block, const std::string& name, const ad::Var& x, int t,
                    const CondMap& cond, const ForwardContext& ctx) const;

  ToyBackboneOptions options_;
  std::vector<BlockSpec> specs_;
  std::vector<LoraTarget> targets_;
  std::map<std::string, Block> blocks_;
  Eigen::MatrixXd in_proj_, proj_12_, proj_2m_, proj_m2_, proj_21_, out_proj_;
  std::vector<double> skip_;  // k_t per timestep
};

// ---------------------------------------------------------------------------
// Text encoder, scheduler, codec

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Eigen::VectorXd encode(const std::string& prompt) const = 0;
  virtual int dim() const = 0;
};

/// Seeded hash of the prompt into a unit-norm Gaussian embedding.
class ToyTextEncoder final : public TextEncoder {
 public:
  explicit ToyTextEncoder(int dim = 16, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {}
  Eigen::VectorXd encode(const std::string& prompt) const override;
  int dim() const override { return dim_; }

 private:
  int dim_;
  std::uint64_t seed_;
};

/// Cosine-style cumulative schedule over T discrete steps. alpha_bar is
/// strictly decreasing in t; t = 0 is the least noisy step.
class NoiseScheduler {
 public:
  explicit NoiseScheduler(int steps = 50);

  int steps() const { return steps_; }
  double alpha_bar(int t) const;
  const std::vector<double>& alphas_cumprod() const { return alphas_cumprod_; }
  /// Per-step alphas: alpha_t = alpha_bar_t / alpha_bar_{t-1}.
  std::vector<double> alphas() const;

  Eigen::MatrixXd add_noise(const Eigen::MatrixXd& clean, const Eigen::MatrixXd& noise, int t) const;
  Eigen::MatrixXd predict_clean(const Eigen::MatrixXd& noisy, const Eigen::MatrixXd& eps, int t) const;
  /// Deterministic DDIM update from step t to t-1; at t = 0 returns the clean estimate.
  Eigen::MatrixXd ddim_step(const Eigen::MatrixXd& noisy, const Eigen::MatrixXd& eps, int t) const;
  /// Inverse of ddim_step for a given eps: from step t-1 (clean when t = 0) to step t.
  Eigen::MatrixXd ddim_invert_step(const Eigen::MatrixXd& prev, const Eigen::MatrixXd& eps, int t) const;

 private:
  int steps_;
  std::vector<double> alphas_cumprod_;
};

class LatentCodec {
 public:
  virtual ~LatentCodec() = default;
  virtual int factor() const = 0;
  virtual Latent encode(const Image& image) const = 0;
  virtual Image decode(const Latent& latent) const = 0;
};

/// Exact invertible codec: each factor x factor x 3 patch becomes one token
/// via a fixed signed permutation (orthogonal, bias-free).
class ToyCodec final : public LatentCodec {
 public:
  explicit ToyCodec(int factor = 4, std::uint64_t seed = 0);
  int factor() const override { return factor_; }
  Latent encode(const Image& image) const override;
  Image decode(const Latent& latent) const override;

 private:
  int factor_;
  std::vector<int> perm_;
  std::vector<double> sign_;
};

// ---------------------------------------------------------------------------
// Model bundle and registry

struct DiffusionModel {
  std::shared_ptr<const BlockedDenoiser> denoiser;
  std::shared_ptr<const LatentCodec> codec;
  std::shared_ptr<const TextEncoder> text;
  NoiseScheduler scheduler;
};

struct ModelOptions {
  int steps = 50;
  std::uint64_t seed = 0;
  double control_strength = 1.0;
};

using ModelFactory = std::function<DiffusionModel(const ModelOptions&)>;

/// Registers or replaces a backbone factory under a name.
void register_backbone(const std::string& name, ModelFactory factory);
std::vector<std::string> registered_backbones();
/// Builds a registered backbone; "toy" and "sdxl-adapter" are built in.
DiffusionModel make_model(const std::string& name, const ModelOptions& options = {});

}  // namespace emblora
