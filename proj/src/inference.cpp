#include "emblora/inference.hpp"

#include "emblora/pairgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace emblora {

std::string effective_prompt(const std::string& prompt, const std::string& emb_token) {
  if (has_style_suffix(prompt, emb_token)) return prompt;
  return prompt + " in " + emb_token + " style";
}

bool has_style_suffix(const std::string& prompt, const std::string& emb_token) {
  return prompt.ends_with(" in " + emb_token + " style");
}

LoraAdapter style_entries_only(const LoraAdapter& adapter, const BlockPartition& partition) {
  LoraAdapter out;
  out.rank = adapter.rank;
  out.alpha = adapter.alpha;
  for (const auto& [id, e] : adapter.entries) {
    if (partition.is_style_entry(id)) out.entries.emplace(id, e);
  }
  return out;
}

StyledDenoiser::StyledDenoiser(std::shared_ptr<const BlockedDenoiser> base, LoraAdapter style_adapter)
    : base_(std::move(base)), adapter_(std::move(style_adapter)), binding_(bind_constants(adapter_)) {
  base_->check_binding(binding_);
}

ad::Var StyledDenoiser::forward(const ad::Var& latent, const Latent& shape, int t, const CondMap& cond,
                                const ForwardContext& ctx) const {
  if (ctx.lora) throw ContractError("styled denoiser: an adapter is already bound to this view");
  ForwardContext inner = ctx;
  inner.lora = &binding_;
  return base_->forward(latent, shape, t, cond, inner);
}

std::uint64_t StyledDenoiser::weights_hash() const {
  Fnv1a h;
  h.update(base_->weights_hash());
  for (const auto& [id, e] : adapter_.entries) h.update(id).update(e.A).update(e.B);
  return h.digest();
}

DiffusionModel apply_style_blocks(const DiffusionModel& model, const LoraAdapter& adapter,
                                  const BlockPartition& partition) {
  if (partition.all_blocks() != model.denoiser->block_names()) {
    throw ContractError("apply_style_blocks: partition does not describe backbone '" + model.denoiser->name() + "'");
  }
  model.denoiser->check_binding(bind_constants(adapter));
  LoraAdapter style = style_entries_only(adapter, partition);
  // Re-applying the same style deltas to a view is a no-op; stacking different ones is refused.
  if (const auto* view = dynamic_cast<const StyledDenoiser*>(model.denoiser.get())) {
    if (view->adapter() == style) return model;
    throw ContractError("apply_style_blocks: model already carries different style deltas");
  }
  DiffusionModel out = model;
  out.denoiser = std::make_shared<StyledDenoiser>(model.denoiser, std::move(style));
  return out;
}

GenerationMode parse_generation_mode(const std::string& text) {
  if (text == "text") return GenerationMode::text;
  if (text == "image") return GenerationMode::image;
  throw ContractError("unknown generation mode '" + text + "' (text, image)");
}

ControlSet control_policy(GenerationMode mode, bool strict_boundary) {
  if (mode == GenerationMode::text) return {};
  if (strict_boundary) return {true, true, true};
  return {true, false, false};
}

// ---------------------------------------------------------------------------
// CIELAB

namespace {

constexpr double kWhite[3] = {0.95047, 1.0, 1.08883};  // D65

double srgb_to_linear(double c) { return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4); }
double linear_to_srgb(double c) { return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055; }

double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}
double lab_finv(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d ? t * t * t : 3 * d * d * (t - 4.0 / 29.0);
}

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

using Triple = std::array<double, 3>;

Triple pixel_to_lab(const double* rgb) {
  const double r = srgb_to_linear(std::clamp(rgb[0], 0.0, 1.0));
  const double g = srgb_to_linear(std::clamp(rgb[1], 0.0, 1.0));
  const double b = srgb_to_linear(std::clamp(rgb[2], 0.0, 1.0));
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  const double fx = lab_f(x / kWhite[0]), fy = lab_f(y / kWhite[1]), fz = lab_f(z / kWhite[2]);
  return {116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)};
}

void lab_to_pixel(const Triple& lab, double* rgb) {
  const double fy = (lab[0] + 16) / 116;
  const double x = kWhite[0] * lab_finv(fy + lab[1] / 500);
  const double y = kWhite[1] * lab_finv(fy);
  const double z = kWhite[2] * lab_finv(fy - lab[2] / 200);
  const double lin[3] = {3.2404542 * x - 1.5371385 * y - 0.4985314 * z,
                         -0.9692660 * x + 1.8760108 * y + 0.0415560 * z,
                         0.0556434 * x - 0.2040259 * y + 1.0572252 * z};
  for (int c = 0; c < 3; ++c) rgb[c] = std::clamp(linear_to_srgb(std::max(0.0, lin[c])), 0.0, 1.0);
}

}  // namespace

LabImage rgb_to_lab8(const Image& rgb) {
  if (rgb.channels != 3) throw ContractError("rgb_to_lab8 expects an RGB image");
  LabImage lab{rgb.width, rgb.height, std::vector<std::uint8_t>(rgb.data.size())};
  for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
    const Triple v = pixel_to_lab(&rgb.data[3 * i]);
    lab.data[3 * i] = to_byte(v[0] * 2.55);
    lab.data[3 * i + 1] = to_byte(v[1] + 128);
    lab.data[3 * i + 2] = to_byte(v[2] + 128);
  }
  return lab;
}

Image lab8_to_rgb(const LabImage& lab) {
  Image rgb(lab.width, lab.height, 3);
  for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
    const Triple v = {lab.data[3 * i] / 2.55, lab.data[3 * i + 1] - 128.0, lab.data[3 * i + 2] - 128.0};
    lab_to_pixel(v, &rgb.data[3 * i]);
  }
  return rgb;
}

// The channel swap runs on unquantised LAB. Going through the 8-bit encoding costs
// up to 18/255 on dark saturated colours even when both inputs are the same image.
Image color_correct(const Image& generated, const Image& design) {
  if (!generated.same_shape(design) || generated.channels != 3) {
    throw ContractError("color_correct: images must be RGB with equal dimensions");
  }
  Image out(generated.width, generated.height, 3);
  for (std::size_t i = 0; i < generated.pixel_count(); ++i) {
    const Triple g = pixel_to_lab(&generated.data[3 * i]), d = pixel_to_lab(&design.data[3 * i]);
    lab_to_pixel({g[0], d[1], d[2]}, &out.data[3 * i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

Eigen::MatrixXd sample_latent(const DiffusionModel& model, Eigen::MatrixXd z, const Latent& shape, int start,
                              const CondMap& cond, const CondMap* uncond, double guidance,
                              const ForwardContext& ctx) {
  const BlockedDenoiser& net = *model.denoiser;
  const bool cfg = uncond && guidance != 1.0;
  for (int t = start - 1; t >= 0; --t) {
    Eigen::MatrixXd eps = net.forward(ad::Var::constant(z), shape, t, cond, ctx).value();
    if (cfg) {
      const Eigen::MatrixXd base = net.forward(ad::Var::constant(z), shape, t, *uncond, ctx).value();
      eps = base + guidance * (eps - base);
    }
    z = model.scheduler.ddim_step(z, eps, t);
  }
  return z;
}

namespace {

Image decode_clamped(const DiffusionModel& model, const Latent& z) {
  Image img = model.codec->decode(z);
  for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

Latent latent_shape(const DiffusionModel& model, const Image& like) {
  return model.codec->encode(like);
}

}  // namespace

GenerationResult text_generate(const DiffusionModel& model, const InferenceRequest& request) {
  if (request.prompt.empty()) throw ContractError("text generation needs a prompt");
  GenerationResult res;
  res.prompt = effective_prompt(request.prompt, request.emb_token);
  res.controls = control_policy(GenerationMode::text, request.strict_boundary);
  res.start_step = model.scheduler.steps();

  // 64x64 canvas unless an input image fixes the size.
  const Image canvas = request.input_image ? *request.input_image : Image(64, 64, 3, 0.5);
  Latent shape = latent_shape(model, canvas);
  Rng rng(derive_seed(request.seed, "text-generate"));
  shape.data = rng.normal_matrix(shape.data.rows(), shape.data.cols());

  const CondMap cond = uniform_cond(*model.denoiser, model.text->encode(res.prompt));
  const CondMap uncond = uniform_cond(*model.denoiser, model.text->encode(request.negative_prompt));
  shape.data = sample_latent(model, shape.data, shape, res.start_step, cond, &uncond, request.guidance_scale, {});
  res.image = decode_clamped(model, shape);
  return res;
}

GenerationResult sdedit_generate(const DiffusionModel& model, const InferenceRequest& request) {
  if (!request.input_image) throw ContractError("image mode needs an input image");
  if (!(request.strength > 0.0 && request.strength <= 1.0)) {
    throw ContractError("sdedit strength must be in (0, 1]");
  }
  if (request.prompt.empty()) throw ContractError("image generation needs a prompt");
  const Image& input = *request.input_image;
  const int T = model.scheduler.steps();

  GenerationResult res;
  res.prompt = effective_prompt(request.prompt, request.emb_token);
  res.controls = control_policy(GenerationMode::image, request.strict_boundary);
  res.start_step = static_cast<int>(std::floor(request.strength * T));

  const Latent clean = model.codec->encode(input);
  if (res.start_step == 0) {
    res.image = decode_clamped(model, clean);
    return res;
  }

  ControlImages sources;
  if (request.controls) {
    sources = *request.controls;
  } else {
    const ControlSignals sig = build_control_signals(input);
    sources.tile = sig.blur_map;
    sources.edge = sig.edge_map;
  }
  ControlImages active;
  if (res.controls.tile) active.tile = sources.tile;
  if (res.controls.canny) active.edge = sources.edge;
  const ControlResiduals residuals = model.denoiser->control_residuals(active, clean);

  Rng rng(derive_seed(request.seed, "sdedit"));
  const Eigen::MatrixXd noise = rng.normal_matrix(clean.data.rows(), clean.data.cols());
  Eigen::MatrixXd z = res.start_step >= T ? noise : model.scheduler.add_noise(clean.data, noise, res.start_step - 1);

  const CondMap cond = uniform_cond(*model.denoiser, model.text->encode(res.prompt));
  const CondMap uncond = uniform_cond(*model.denoiser, model.text->encode(request.negative_prompt));
  ForwardContext ctx;
  if (!residuals.empty()) ctx.control = &residuals;
  z = sample_latent(model, std::move(z), clean, res.start_step, cond, &uncond, request.guidance_scale, ctx);
  res.image = decode_clamped(model, Latent{clean.height, clean.width, z});
  if (res.controls.color_correction) res.image = color_correct(res.image, input);
  return res;
}

GenerationResult generate(const DiffusionModel& model, const InferenceRequest& request) {
  return request.mode == GenerationMode::text ? text_generate(model, request) : sdedit_generate(model, request);
}

}  // namespace emblora
