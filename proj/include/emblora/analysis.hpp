#pragma once

#include "emblora/backbone.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace emblora {

/// Per-block, per-step self-attention outputs captured along one denoising
/// trajectory. features[b][s] is the flattened F^o of block b at step s,
/// steps ordered from most to least noisy.
struct FeatureTrace {
  std::string image_id;
  int steps = 0;
  std::vector<std::string> block_order;
  std::vector<std::vector<Eigen::VectorXd>> features;
  std::vector<std::string> warnings;

  /// Checks B x T shape, per-block constant dimension and finiteness.
  void validate() const;
};

struct InversionOptions {
  int renoise_iters = 5;
  /// Fixed-point residual (max abs latent change) above which a warning is recorded.
  double tolerance = 1e-2;
  std::string prompt;
  const LoraAdapter* adapter = nullptr;
};

struct InversionResult {
  Image reconstruction;
  Latent inverted;  // latent at the noisiest step
  FeatureTrace trace;
  double max_residual = 0.0;
};

/// DDIM inversion refined by fixed-point re-noising, followed by a DDIM
/// reconstruction pass whose attention outputs form the trace.
InversionResult invert_reconstruct(const DiffusionModel& model, const Image& image, int steps,
                                   const InversionOptions& options = {}, const std::string& image_id = "");

/// Cosine similarity of flattened vectors, clamped to [-1, 1]. Two zero
/// vectors compare as 1, one zero vector as 0.
double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

struct SimilarityMatrix {
  std::vector<std::string> block_order;
  Eigen::MatrixXd values;  // blocks x sections
  int section_size = 0;

  int sections() const { return static_cast<int>(values.cols()); }
};

SimilarityMatrix pair_similarity(const FeatureTrace& a, const FeatureTrace& b, int sections);

/// Element-wise mean; throws ContractError on empty input or shape mismatch.
SimilarityMatrix aggregate_reference_set(const std::vector<SimilarityMatrix>& matrices);

/// Mean of every block's row over sections [begin, end).
Eigen::VectorXd section_means(const SimilarityMatrix& m, int begin, int end);

struct BlockSelection {
  std::vector<std::string> style_blocks;  // canonical order
  std::vector<std::string> all_blocks;
  Eigen::VectorXd scores;                 // per-block mean over the range
};

/// The k blocks with the lowest mean similarity over sections [begin, end);
/// ties go to the earlier block in canonical order.
BlockSelection select_style_blocks(const SimilarityMatrix& m, int k, int section_begin, int section_end);

/// Mean over blocks and over sections [begin, end) of the similarity
/// between two traces; the style score used for complementary ranking.
double trace_similarity(const FeatureTrace& a, const FeatureTrace& b, int sections, int section_begin,
                        int section_end);

/// Rows are blocks, columns sections, six decimals.
void write_similarity_csv(const SimilarityMatrix& m, const std::filesystem::path& path);
std::string similarity_csv(const SimilarityMatrix& m);
/// Heatmap with one cell per (block, section); low similarity dark, high bright.
Image render_heatmap(const SimilarityMatrix& m, int cell = 16);

}  // namespace emblora
