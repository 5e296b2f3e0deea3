#pragma once

#include "emblora/backbone.hpp"
#include "emblora/lora.hpp"

#include <optional>
#include <string>

namespace emblora {

/// Appends " in <token> style" unless the prompt already ends with it.
std::string effective_prompt(const std::string& prompt, const std::string& emb_token = "[emb]");
bool has_style_suffix(const std::string& prompt, const std::string& emb_token = "[emb]");

/// Copy of the adapter keeping only entries owned by style blocks.
LoraAdapter style_entries_only(const LoraAdapter& adapter, const BlockPartition& partition);

/// Denoiser whose forward is the base forward with the style-block adapter
/// entries bound and nothing else. Immutable and shareable.
class StyledDenoiser final : public BlockedDenoiser {
 public:
  StyledDenoiser(std::shared_ptr<const BlockedDenoiser> base, LoraAdapter style_adapter);

  std::string name() const override { return base_->name() + "+style"; }
  const std::vector<BlockSpec>& blocks() const override { return base_->blocks(); }
  const std::vector<LoraTarget>& lora_targets() const override { return base_->lora_targets(); }
  /// ctx.lora must be null; the view supplies its own binding.
  ad::Var forward(const ad::Var& latent, const Latent& shape, int t, const CondMap& cond,
                  const ForwardContext& ctx) const override;
  std::uint64_t weights_hash() const override;
  ControlResiduals control_residuals(const ControlImages& images, const Latent& shape) const override {
    return base_->control_residuals(images, shape);
  }

  const BlockedDenoiser& base() const { return *base_; }
  const LoraAdapter& adapter() const { return adapter_; }

 private:
  std::shared_ptr<const BlockedDenoiser> base_;
  LoraAdapter adapter_;
  LoraBinding binding_;
};

/// Model whose denoiser carries only the style-block deltas of the adapter;
/// non-style entries are dropped. Throws ContractError when the partition
/// does not describe the model or the adapter holds entries foreign to it.
DiffusionModel apply_style_blocks(const DiffusionModel& model, const LoraAdapter& adapter,
                                  const BlockPartition& partition);

struct ControlSet {
  bool tile = false;
  bool canny = false;
  bool color_correction = false;

  bool operator==(const ControlSet&) const = default;
};

enum class GenerationMode { text, image };

GenerationMode parse_generation_mode(const std::string& text);

/// Strict boundary alignment enables tile, canny and colour correction;
/// otherwise tile only. Text mode never attaches control branches.
ControlSet control_policy(GenerationMode mode, bool strict_boundary);

/// CIELAB under D65, channels quantised to 8 bits as (L * 2.55, a + 128, b + 128).
struct LabImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // interleaved L, A, B
};

LabImage rgb_to_lab8(const Image& rgb);
Image lab8_to_rgb(const LabImage& lab);

/// L from the generated image, A and B from the design, back to RGB with clipping.
Image color_correct(const Image& generated, const Image& design);

struct InferenceRequest {
  GenerationMode mode = GenerationMode::text;
  std::string prompt;
  std::optional<Image> input_image;
  bool strict_boundary = true;
  double strength = 0.7;
  std::uint64_t seed = 0;
  double guidance_scale = 1.0;
  std::string negative_prompt;
  std::string emb_token = "[emb]";
  /// Control sources; derived from the input image when absent.
  std::optional<ControlImages> controls;
};

struct GenerationResult {
  Image image;
  std::string prompt;  // effective prompt
  ControlSet controls;
  int start_step = 0;  // number of denoising steps run
};

/// DDIM sampling from seeded Gaussian noise with the effective prompt.
GenerationResult text_generate(const DiffusionModel& model, const InferenceRequest& request);

/// Noises the encoded input to step floor(strength * T) and denoises it.
/// Zero steps returns decode(encode(input)); T steps starts from pure noise.
GenerationResult sdedit_generate(const DiffusionModel& model, const InferenceRequest& request);

/// Dispatches on request.mode.
GenerationResult generate(const DiffusionModel& model, const InferenceRequest& request);

/// Low-level sampler shared by the generation paths and by complementary
/// data generation. Runs steps start-1 .. 0 from z; guidance 1 disables CFG.
Eigen::MatrixXd sample_latent(const DiffusionModel& model, Eigen::MatrixXd z, const Latent& shape, int start,
                              const CondMap& cond, const CondMap* uncond, double guidance,
                              const ForwardContext& ctx);

}  // namespace emblora
