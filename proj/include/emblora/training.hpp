#pragma once

#include "emblora/analysis.hpp"
#include "emblora/backbone.hpp"
#include "emblora/lora.hpp"
#include "emblora/pairgen.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace emblora {

struct TrainConfig {
  double eta1 = 1e-4;
  double eta2 = 1e-5;
  double momentum = 0.0;
  int stage1_iters = 400;
  int stage2_iters = 200;
  int N = 10;
  double tau = 1.0;
  std::uint64_t seed = 0;
  /// Attempts per step when the loss is not finite; t is re-sampled each time.
  int max_retries = 3;

  /// Throws ContractError unless eta1, eta2 >= 0, tau > 0, N >= 1 and the
  /// iteration counts are non-negative.
  void validate() const;
};

/// Latents and prompt embeddings of a training pair.
struct EncodedPair {
  Latent style;    // z_0 of the style (embroidery) image
  Latent content;  // z_0 of the content (design) image
  Eigen::VectorXd c_emb;
  Eigen::VectorXd c_des;
};

EncodedPair encode_pair(const DiffusionModel& model, const TrainingPair& pair);

/// Style blocks get emb, every other block des.
CondMap route_conditioning(const BlockPartition& partition, const Eigen::VectorXd& emb, const Eigen::VectorXd& des);

// ---------------------------------------------------------------------------
// Gradient seam

/// A scalar loss as a function of the bound adapter factors.
using AdapterLoss = std::function<ad::Var(const LoraBinding&)>;

struct GradResult {
  double loss = 0.0;
  AdapterGrad grad;
};

/// Reverse-mode gradient of the loss with respect to every adapter entry.
GradResult grad(const AdapterLoss& loss, const LoraAdapter& params);
/// Loss value with the adapter bound as constants.
double evaluate(const AdapterLoss& loss, const LoraAdapter& params);

// ---------------------------------------------------------------------------
// Losses

/// Mean squared error between the drawn noise and the prediction on the
/// noised content latent, all blocks conditioned on the content prompt.
AdapterLoss des_loss(const DiffusionModel& model, const EncodedPair& pair, int t, const Eigen::MatrixXd& noise);
/// As des_loss on the noised style latent with routed conditioning.
AdapterLoss emb_loss(const DiffusionModel& model, const EncodedPair& pair, int t, const Eigen::MatrixXd& noise,
                     const BlockPartition& partition);

double loss_des(const DiffusionModel& model, const LoraAdapter& adapter, const EncodedPair& pair, int t,
                const Eigen::MatrixXd& noise);
double loss_emb(const DiffusionModel& model, const LoraAdapter& adapter, const EncodedPair& pair, int t,
                const Eigen::MatrixXd& noise, const BlockPartition& partition);

struct NoiseDecomposition {
  Eigen::MatrixXd eps_des;
  Eigen::MatrixXd eps_emb;
  Eigen::MatrixXd eps_emb_star;  // eps_emb - eps_des
};

/// Adapter-induced prediction deltas on the noised content latent under the
/// content and style conditions.
NoiseDecomposition noise_decomposition(const DiffusionModel& model, const LoraAdapter& adapter,
                                       const Latent& z_t_des, int t, const CondMap& c_des, const CondMap& c_emb);

struct NoiseDecompositionExpr {
  ad::Var eps_des;
  ad::Var eps_emb;
  ad::Var eps_emb_star;
};

NoiseDecompositionExpr noise_decomposition_expr(const DiffusionModel& model, const LoraBinding& binding,
                                                const Latent& z_t_des, int t, const CondMap& c_des,
                                                const CondMap& c_emb);

/// -log(exp(s_pos) / (exp(s_neg1) + exp(s_neg2))) with every similarity divided by tau.
double contrastive_from_similarities(double s_pos, double s_neg1, double s_neg2, double tau = 1.0);

/// s_pos = cos(ref.emb*, gen.emb*), s_neg1 = cos(ref.emb*, gen.des),
/// s_neg2 = cos(ref.des, gen.emb*). Throws ContractError on a zero-norm term.
double contrastive_loss(const NoiseDecomposition& ref, const NoiseDecomposition& gen, double tau = 1.0);
ad::Var contrastive_loss_expr(const NoiseDecompositionExpr& ref, const NoiseDecompositionExpr& gen, double tau = 1.0);

/// Contrastive loss of the current adapter on a reference and a generated
/// pair at one timestep, with the given noise applied to each content latent.
AdapterLoss con_loss(const DiffusionModel& model, const EncodedPair& ref, const EncodedPair& gen,
                     const BlockPartition& partition, int t, const Eigen::MatrixXd& ref_noise,
                     const Eigen::MatrixXd& gen_noise, double tau);

// ---------------------------------------------------------------------------
// Two-stage training

struct StepRecord {
  std::string name;  // "des", "emb" or "con"
  double loss = 0.0;
  int t = 0;
  int retries = 0;
  std::vector<std::string> changed;  // adapter entries modified by the step
};

struct IterationRecord {
  int stage = 1;
  int iteration = 0;
  std::vector<StepRecord> steps;
  std::vector<std::string> warnings;
  int generated_index = -1;  // stage 2: sampled generated pair

  std::optional<double> loss(const std::string& step) const;
};

/// Owns the adapter and the per-step optimiser state. Base weights are only read.
class TwoStageTrainer {
 public:
  TwoStageTrainer(const DiffusionModel& model, BlockPartition partition, TrainConfig config, LoraAdapter adapter);

  /// Full-adapter step on the content loss, then a style-only step on the style loss.
  IterationRecord stage1_iteration(const EncodedPair& pair);
  /// Samples one generated pair; full-adapter step on the content loss over
  /// both pairs, style-only step on the style loss over both, style-only
  /// contrastive step with rate eta2.
  IterationRecord stage2_iteration(const EncodedPair& ref, const std::vector<EncodedPair>& generated);

  const LoraAdapter& adapter() const { return adapter_; }
  const BlockPartition& partition() const { return partition_; }
  const TrainConfig& config() const { return config_; }
  int iterations_run(int stage) const { return stage == 1 ? stage1_count_ : stage2_count_; }

  /// Called after every applied update with the step record and the adapter as it now stands.
  using StepObserver = std::function<void(const StepRecord&, const LoraAdapter&)>;
  void set_step_observer(StepObserver observer) { observer_ = std::move(observer); }

 private:
  using LossFactory = std::function<AdapterLoss(int t)>;
  StepRecord run_step(const std::string& name, const LossFactory& make_loss, MomentumSgd& opt, UpdateSubset subset,
                      double lr, std::vector<std::string>& warnings);
  int sample_t();

  const DiffusionModel& model_;
  BlockPartition partition_;
  TrainConfig config_;
  LoraAdapter adapter_;
  MomentumSgd opt_des_, opt_emb_, opt_con_;
  Rng rng_;
  StepObserver observer_;
  int stage1_count_ = 0;
  int stage2_count_ = 0;
};

/// Fixed-timestep, fixed-noise evaluation used to track loss trends
/// independently of the sampled timesteps.
struct LossProbe {
  std::vector<int> timesteps;
  std::vector<Eigen::MatrixXd> ref_noise;
  std::vector<Eigen::MatrixXd> gen_noise;

  static LossProbe make(const DiffusionModel& model, const EncodedPair& like, std::vector<int> timesteps,
                        std::uint64_t seed);
  double des(const DiffusionModel& model, const LoraAdapter& adapter, const EncodedPair& pair) const;
  double con(const DiffusionModel& model, const LoraAdapter& adapter, const EncodedPair& ref,
             const EncodedPair& gen, const BlockPartition& partition, double tau) const;
};

/// Trailing moving average; entry i averages values[i-window+1 .. i].
std::vector<double> moving_average(const std::vector<double>& values, int window);

// ---------------------------------------------------------------------------
// Complementary data

int style_keep_count(int n);  // ceil(n / 2)
int final_keep_count(int n);  // ceil(n / 4)

/// Indices sorted by descending score; ties keep index order.
std::vector<int> rank_descending(const std::vector<double>& scores);
/// Indices sorted by ascending score; ties keep index order.
std::vector<int> rank_ascending(const std::vector<double>& scores);

/// Injection points for complementary generation. Scores are similarities
/// to the reference: higher means more alike.
struct ComplementaryHooks {
  std::function<Image(const std::string& caption, int index)> generate;
  std::function<double(const Image& style_image, int index)> style_score;
  std::function<Image(const Image& style_image, const std::string& caption, int index)> emulate;  // may throw
  std::function<double(const Image& design, int index)> design_score;
};

struct ComplementaryResult {
  std::vector<std::string> captions;
  std::vector<double> style_scores;
  std::vector<int> style_ranking;  // all candidates, most similar first
  std::vector<int> style_kept;     // emulated keepers, rank order
  std::vector<double> design_scores;  // NaN where not evaluated
  std::vector<int> final_selected;    // least similar design first
  std::vector<TrainingPair> pairs;    // parallel to final_selected
  std::vector<std::string> notes;
};

/// Generates one style image per caption, keeps the ceil(N/2) most
/// style-similar (backfilling past emulator failures in rank order), then
/// keeps the ceil(N/4) keepers whose designs are least similar to the
/// reference design.
ComplementaryResult generate_complementary(const std::vector<std::string>& captions, int n,
                                           const ComplementaryHooks& hooks, const std::string& emb_token = "[emb]");

struct ToyComplementaryOptions {
  int sections = 10;
  int section_begin = 5;
  int section_end = 10;
  InversionOptions inversion;
  PairOptions pair;
  std::uint64_t seed = 0;
};

/// Hooks backed by the model: sampling with the full adapter under routed
/// conditioning, inversion traces on the base model for scoring, and the
/// configured design backend for emulation.
ComplementaryHooks make_complementary_hooks(const DiffusionModel& model, const LoraAdapter& adapter,
                                            const BlockPartition& partition, const TrainingPair& reference,
                                            const DesignBackend& backend, const ToyComplementaryOptions& options);

}  // namespace emblora
