#include "emblora/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>

namespace emblora {

namespace {

constexpr const char* kProjections[4] = {"to_q", "to_k", "to_v", "to_out"};

ad::Var linear(const ad::Var& x, const Eigen::MatrixXd& weight, const std::string& id,
               const LoraBinding* binding) {
  ad::Var y = ad::matmul(x, ad::Var::constant(weight));
  if (binding) {
    if (auto it = binding->find(id); it != binding->end()) {
      const LoraFactor& f = it->second;
      y = y + ad::scale(ad::matmul_nt(ad::matmul_nt(x, f.A), f.B), f.scale);
    }
  }
  return y;
}

ad::Var attention_ad(const AttentionLayer& layer, const ad::Var& features, const LoraBinding* binding,
                     const FeatureHook* hook, const std::string& block) {
  const std::string base = layer.name + ".";
  ad::Var q = linear(features, layer.W_q, base + kProjections[0], binding);
  ad::Var k = linear(features, layer.W_k, base + kProjections[1], binding);
  ad::Var v = linear(features, layer.W_v, base + kProjections[2], binding);
  ad::Var logits = ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(layer.d_k())));
  ad::Var probs = ad::softmax_rows(logits);
  ad::Var out = linear(ad::matmul(probs, v), layer.W_o, base + kProjections[3], binding);
  if (hook && *hook) (*hook)(block, out.value(), probs.value());
  return out;
}

// Average-pools a row-major (h x w) token grid by 2 in each direction.
Eigen::MatrixXd pool_matrix(int h, int w) {
  const int oh = h / 2, ow = w / 2;
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(oh * ow, h * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) p((y / 2) * ow + x / 2, y * w + x) = 0.25;
  return p;
}

Eigen::MatrixXd init_weight(Rng& rng, int d_in, int d_out, double gain) {
  return rng.normal_matrix(d_in, d_out) * (gain / std::sqrt(static_cast<double>(d_in)));
}

Eigen::RowVectorXd timestep_embedding(int t, int dim) {
  Eigen::RowVectorXd e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(1000.0) * i / half);
    e(i) = std::sin(t * freq);
    e(half + i) = std::cos(t * freq);
  }
  return e;
}

// Flattens each factor x factor patch of an image into one token row.
Eigen::MatrixXd patch_tokens(const Image& img, int factor, double offset) {
  const int th = img.height / factor, tw = img.width / factor;
  Eigen::MatrixXd out(th * tw, factor * factor * img.channels);
  for (int ty = 0; ty < th; ++ty)
    for (int tx = 0; tx < tw; ++tx)
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          for (int c = 0; c < img.channels; ++c)
            out(ty * tw + tx, (dy * factor + dx) * img.channels + c) =
                img.at(ty * factor + dy, tx * factor + dx, c) - offset;
  return out;
}

}  // namespace

void AttentionLayer::validate() const {
  const auto fail = [&](const std::string& what) {
    throw ContractError("attention layer '" + name + "': " + what);
  };
  if (W_q.rows() != W_k.rows() || W_q.rows() != W_v.rows()) fail("W_q, W_k, W_v input dimensions differ");
  if (W_q.cols() != W_k.cols()) fail("W_q and W_k must share d_k");
  if (W_o.rows() != W_v.cols()) fail("W_o input dimension must match W_v output dimension");
  if (W_q.cols() < 1) fail("d_k must be positive");
}

Eigen::MatrixXd attention_forward(const AttentionLayer& layer, const Eigen::MatrixXd& features) {
  layer.validate();
  if (features.rows() < 1) throw ContractError("attention layer '" + layer.name + "': no tokens");
  if (features.cols() != layer.d_in()) {
    throw ContractError("attention layer '" + layer.name + "': feature dimension " +
                        std::to_string(features.cols()) + " does not match W_q input " +
                        std::to_string(layer.d_in()));
  }
  return attention_ad(layer, ad::Var::constant(features), nullptr, nullptr, layer.name).value();
}

std::vector<std::string> BlockedDenoiser::block_names() const {
  std::vector<std::string> names;
  for (const auto& b : blocks()) names.push_back(b.name);
  return names;
}

void BlockedDenoiser::check_cond(const CondMap& cond) const {
  for (const auto& b : blocks()) {
    if (!cond.contains(b.name)) throw ContractError("condition map has no embedding for block '" + b.name + "'");
  }
}

void BlockedDenoiser::check_binding(const LoraBinding& binding) const {
  std::map<std::string, const LoraTarget*> known;
  for (const auto& t : lora_targets()) known[t.id] = &t;
  std::vector<std::string> unknown;
  for (const auto& [id, f] : binding) {
    auto it = known.find(id);
    if (it == known.end()) {
      unknown.push_back(id);
      continue;
    }
    const LoraTarget& t = *it->second;
    if (f.A.cols() != t.d_in || f.B.rows() != t.d_out || f.A.rows() != f.B.cols()) {
      throw ContractError("adapter entry '" + id + "' has shapes inconsistent with its target layer");
    }
  }
  if (!unknown.empty()) {
    std::ostringstream msg;
    msg << "adapter references unknown layers:";
    for (const auto& id : unknown) msg << ' ' << id;
    throw ContractError(msg.str());
  }
}

CondMap uniform_cond(const BlockedDenoiser& model, const Eigen::VectorXd& embedding) {
  CondMap cond;
  for (const auto& b : model.blocks()) cond[b.name] = embedding;
  return cond;
}

Latent denoise(const BlockedDenoiser& model, const DenoiserInput& input, const LoraAdapter* adapter,
               const ControlResiduals* control) {
  model.check_cond(input.cond);
  LoraBinding binding;
  ForwardContext ctx;
  if (adapter) {
    binding = bind_constants(*adapter);
    model.check_binding(binding);
    ctx.lora = &binding;
  }
  ctx.control = control;
  ad::Var out = model.forward(ad::Var::constant(input.z_t.data), input.z_t, input.t, input.cond, ctx);
  return Latent{input.z_t.height, input.z_t.width, out.value()};
}

// ---------------------------------------------------------------------------

ToyBackbone::ToyBackbone(ToyBackboneOptions options) : options_(options) {
  struct Layout {
    const char* name;
    Stage stage;
    int level;
  };
  const Layout layout[] = {
      {"down.1.0", Stage::down, 0}, {"down.1.1", Stage::down, 0}, {"down.2.0", Stage::down, 1},
      {"down.2.1", Stage::down, 1}, {"mid", Stage::mid, 2},       {"up.0.0", Stage::up, 1},
      {"up.0.1", Stage::up, 1},     {"up.0.2", Stage::up, 1},     {"up.1.0", Stage::up, 0},
      {"up.1.1", Stage::up, 0},     {"up.1.2", Stage::up, 0},
  };

  Rng rng(derive_seed(options_.seed, "toy-backbone"));
  const int* w = options_.widths;
  in_proj_ = init_weight(rng, options_.latent_channels, w[0], 1.0);

  for (const auto& l : layout) {
    const int width = w[l.level];
    const std::string layer_name = std::string(l.name) + ".attn";
    Block b;
    b.level = l.level;
    b.attn.name = layer_name;
    b.attn.W_q = init_weight(rng, width, width, 1.0);
    b.attn.W_k = init_weight(rng, width, width, 1.0);
    b.attn.W_v = init_weight(rng, width, width, 1.0);
    b.attn.W_o = init_weight(rng, width, width, 0.8);
    b.w_cond = init_weight(rng, options_.text_dim, width, 2.0);
    b.w_time = init_weight(rng, options_.time_dim, width, 0.5);
    b.mlp_in = init_weight(rng, width, 2 * width, 1.0);
    b.mlp_out = init_weight(rng, 2 * width, width, 0.5);
    b.ctrl_tile = init_weight(rng, options_.latent_channels, width, 1.0);
    b.ctrl_edge = init_weight(rng, 16, width, 1.0);
    b.attn.validate();

    BlockSpec spec{l.name, {layer_name}, l.stage};
    specs_.push_back(spec);
    for (const char* p : kProjections) {
      targets_.push_back(LoraTarget{layer_name + "." + p, l.name, width, width});
    }
    blocks_.emplace(l.name, std::move(b));
  }

  proj_12_ = init_weight(rng, w[0], w[1], 1.0);
  proj_2m_ = init_weight(rng, w[1], w[2], 1.0);
  proj_m2_ = init_weight(rng, w[2], w[1], 1.0);
  proj_21_ = init_weight(rng, w[1], w[0], 1.0);
  out_proj_ = init_weight(rng, w[0], options_.latent_channels, 0.2);

  const NoiseScheduler sched(options_.steps);
  for (int t = 0; t < options_.steps; ++t) {
    const double ab = sched.alpha_bar(t);
    skip_.push_back(std::sqrt(1.0 - ab) / (ab * options_.data_variance + 1.0 - ab));
  }
}

const AttentionLayer& ToyBackbone::attention(const std::string& block) const {
  auto it = blocks_.find(block);
  if (it == blocks_.end()) throw ContractError("toy backbone has no block '" + block + "'");
  return it->second.attn;
}

ad::Var ToyBackbone::run_block(const Block& block, const std::string& name, const ad::Var& x, int t,
                               const CondMap& cond, const ForwardContext& ctx) const {
  const Eigen::VectorXd& c = cond.at(name);
  if (c.size() != options_.text_dim) {
    throw ContractError("embedding for block '" + name + "' has dimension " + std::to_string(c.size()) +
                        ", expected " + std::to_string(options_.text_dim));
  }
  Eigen::RowVectorXd bias = c.transpose() * block.w_cond + timestep_embedding(t, options_.time_dim) * block.w_time;
  ad::Var h = ad::add_row(x, bias);
  if (ctx.control) {
    if (auto it = ctx.control->find(name); it != ctx.control->end()) {
      h = h + ad::Var::constant(it->second);
    }
  }
  ad::Var attn = attention_ad(block.attn, h, ctx.lora, ctx.hook, name);
  ad::Var y = x + attn;
  ad::Var m = ad::matmul(ad::silu(ad::matmul(y, ad::Var::constant(block.mlp_in))), ad::Var::constant(block.mlp_out));
  return y + m;
}

ad::Var ToyBackbone::forward(const ad::Var& latent, const Latent& shape, int t, const CondMap& cond,
                             const ForwardContext& ctx) const {
  if (shape.height % 4 != 0 || shape.width % 4 != 0) {
    throw ContractError("toy backbone needs latent height and width divisible by 4");
  }
  if (latent.cols() != options_.latent_channels || latent.rows() != static_cast<Eigen::Index>(shape.height) * shape.width) {
    throw ContractError("toy backbone: latent shape mismatch");
  }
  check_cond(cond);
  if (ctx.lora) check_binding(*ctx.lora);
  if (t < 0 || t >= static_cast<int>(skip_.size())) {
    throw ContractError("toy backbone: timestep " + std::to_string(t) + " outside [0, " +
                        std::to_string(skip_.size()) + ")");
  }

  const int h = shape.height, w = shape.width;
  const ad::Var pool1 = ad::Var::constant(pool_matrix(h, w));
  const ad::Var pool2 = ad::Var::constant(pool_matrix(h / 2, w / 2));
  const ad::Var up1 = ad::Var::constant(pool1.value().transpose() * 4.0);
  const ad::Var up2 = ad::Var::constant(pool2.value().transpose() * 4.0);
  const auto c = [](const Eigen::MatrixXd& m) { return ad::Var::constant(m); };
  const auto run = [&](const char* name, const ad::Var& x) {
    return run_block(blocks_.at(name), name, x, t, cond, ctx);
  };

  ad::Var x = ad::matmul(latent, c(in_proj_));
  x = run("down.1.0", x);
  x = run("down.1.1", x);
  const ad::Var skip1 = x;
  x = ad::matmul(ad::matmul(pool1, x), c(proj_12_));
  x = run("down.2.0", x);
  x = run("down.2.1", x);
  const ad::Var skip2 = x;
  x = ad::matmul(ad::matmul(pool2, x), c(proj_2m_));
  x = run("mid", x);
  x = ad::matmul(ad::matmul(up2, x), c(proj_m2_)) + skip2;
  x = run("up.0.0", x);
  x = run("up.0.1", x);
  x = run("up.0.2", x);
  x = ad::matmul(ad::matmul(up1, x), c(proj_21_)) + skip1;
  x = run("up.1.0", x);
  x = run("up.1.1", x);
  x = run("up.1.2", x);
  return ad::scale(latent, skip_[t]) + ad::scale(ad::matmul(x, c(out_proj_)), options_.residual_gain);
}

std::uint64_t ToyBackbone::weights_hash() const {
  Fnv1a h;
  h.update(in_proj_).update(proj_12_).update(proj_2m_).update(proj_m2_).update(proj_21_).update(out_proj_);
  for (const auto& spec : specs_) {
    const Block& b = blocks_.at(spec.name);
    h.update(spec.name);
    h.update(b.attn.W_q).update(b.attn.W_k).update(b.attn.W_v).update(b.attn.W_o);
    h.update(b.w_cond).update(b.w_time).update(b.mlp_in).update(b.mlp_out).update(b.ctrl_tile).update(b.ctrl_edge);
  }
  return h.digest();
}

ControlResiduals ToyBackbone::control_residuals(const ControlImages& images, const Latent& shape) const {
  ControlResiduals out;
  if (!images.tile && !images.edge) return out;
  const Image& ref = images.tile ? *images.tile : *images.edge;
  if (shape.width == 0 || ref.width % shape.width != 0 || ref.width / shape.width != 4 ||
      ref.height != shape.height * 4) {
    throw ContractError("control images must be 4x the latent resolution");
  }
  std::optional<Eigen::MatrixXd> tile, edge;
  if (images.tile) {
    if (images.tile->channels != 3) throw ContractError("tile control must be RGB");
    tile = patch_tokens(*images.tile, 4, 0.5);
  }
  if (images.edge) {
    if (images.edge->channels != 1) throw ContractError("edge control must be single-channel");
    edge = patch_tokens(*images.edge, 4, 0.0);
  }
  const Eigen::MatrixXd p1 = pool_matrix(shape.height, shape.width);
  const Eigen::MatrixXd p2 = pool_matrix(shape.height / 2, shape.width / 2) * p1;
  for (const auto& spec : specs_) {
    if (spec.stage == Stage::up) continue;
    const Block& b = blocks_.at(spec.name);
    const auto pooled = [&](const Eigen::MatrixXd& m) -> Eigen::MatrixXd {
      if (b.level == 0) return m;
      if (b.level == 1) return p1 * m;
      return p2 * m;
    };
    const int width = options_.widths[b.level];
    const Eigen::Index tokens = b.level == 0 ? p1.cols() : (b.level == 1 ? p1.rows() : p2.rows());
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(tokens, width);
    if (tile) r += pooled(*tile) * b.ctrl_tile;
    if (edge) r += pooled(*edge) * b.ctrl_edge;
    out[spec.name] = options_.control_strength * r;
  }
  return out;
}

ToyBackbone ToyBackbone::merged(const LoraAdapter& adapter) const {
  check_binding(bind_constants(adapter));
  ToyBackbone copy = *this;
  for (const auto& [id, e] : adapter.entries) {
    const LoraTarget* target = nullptr;
    for (const auto& t : targets_) {
      if (t.id == id) target = &t;
    }
    Block& b = copy.blocks_.at(target->block);
    const Eigen::MatrixXd delta = adapter.scale() * (e.B * e.A).transpose();
    const std::string suffix = id.substr(b.attn.name.size() + 1);
    if (suffix == "to_q") b.attn.W_q += delta;
    else if (suffix == "to_k") b.attn.W_k += delta;
    else if (suffix == "to_v") b.attn.W_v += delta;
    else b.attn.W_o += delta;
  }
  return copy;
}

// ---------------------------------------------------------------------------

Eigen::VectorXd ToyTextEncoder::encode(const std::string& prompt) const {
  Rng rng(Fnv1a().update(seed_).update("text").update(prompt).digest());
  Eigen::VectorXd v(dim_);
  for (int i = 0; i < dim_; ++i) v(i) = rng.normal();
  return v / v.norm();
}

NoiseScheduler::NoiseScheduler(int steps) : steps_(steps) {
  if (steps < 1) throw ContractError("scheduler needs at least one step");
  alphas_cumprod_.resize(steps);
  for (int i = 0; i < steps; ++i) {
    const double u = 0.955 * (i + 1) / static_cast<double>(steps);
    const double c = std::cos(0.5 * std::numbers::pi * u);
    alphas_cumprod_[i] = c * c;
  }
}

double NoiseScheduler::alpha_bar(int t) const {
  if (t < 0 || t >= steps_) throw ContractError("timestep " + std::to_string(t) + " outside [0, T)");
  return alphas_cumprod_[t];
}

std::vector<double> NoiseScheduler::alphas() const {
  std::vector<double> a(steps_);
  for (int t = 0; t < steps_; ++t) a[t] = alphas_cumprod_[t] / (t == 0 ? 1.0 : alphas_cumprod_[t - 1]);
  return a;
}

Eigen::MatrixXd NoiseScheduler::add_noise(const Eigen::MatrixXd& clean, const Eigen::MatrixXd& noise, int t) const {
  const double ab = alpha_bar(t);
  return std::sqrt(ab) * clean + std::sqrt(1.0 - ab) * noise;
}

Eigen::MatrixXd NoiseScheduler::predict_clean(const Eigen::MatrixXd& noisy, const Eigen::MatrixXd& eps, int t) const {
  const double ab = alpha_bar(t);
  return (noisy - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
}

Eigen::MatrixXd NoiseScheduler::ddim_step(const Eigen::MatrixXd& noisy, const Eigen::MatrixXd& eps, int t) const {
  Eigen::MatrixXd clean = predict_clean(noisy, eps, t);
  if (t == 0) return clean;
  const double ab = alpha_bar(t - 1);
  return std::sqrt(ab) * clean + std::sqrt(1.0 - ab) * eps;
}

Eigen::MatrixXd NoiseScheduler::ddim_invert_step(const Eigen::MatrixXd& prev, const Eigen::MatrixXd& eps, int t) const {
  Eigen::MatrixXd clean = t == 0 ? prev : predict_clean(prev, eps, t - 1);
  const double ab = alpha_bar(t);
  return std::sqrt(ab) * clean + std::sqrt(1.0 - ab) * eps;
}

ToyCodec::ToyCodec(int factor, std::uint64_t seed) : factor_(factor) {
  const int n = factor * factor * 3;
  perm_.resize(n);
  sign_.resize(n);
  for (int i = 0; i < n; ++i) perm_[i] = i;
  Rng rng(derive_seed(seed, "toy-codec"));
  std::shuffle(perm_.begin(), perm_.end(), rng.engine());
  for (int i = 0; i < n; ++i) sign_[i] = rng.uniform() < 0.5 ? -1.0 : 1.0;
}

Latent ToyCodec::encode(const Image& image) const {
  if (image.channels != 3) throw ContractError("codec expects an RGB image");
  if (image.width % factor_ != 0 || image.height % factor_ != 0) {
    throw ContractError("image dimensions must be divisible by the codec factor " + std::to_string(factor_));
  }
  const Eigen::MatrixXd patches = patch_tokens(image, factor_, 0.0);
  Latent z{image.height / factor_, image.width / factor_, Eigen::MatrixXd(patches.rows(), patches.cols())};
  for (Eigen::Index p = 0; p < patches.cols(); ++p) z.data.col(perm_[p]) = sign_[p] * patches.col(p);
  return z;
}

Image ToyCodec::decode(const Latent& latent) const {
  const int n = factor_ * factor_ * 3;
  if (latent.channels() != n) throw ContractError("codec expects " + std::to_string(n) + " latent channels");
  Image img(latent.width * factor_, latent.height * factor_, 3);
  for (int ty = 0; ty < latent.height; ++ty)
    for (int tx = 0; tx < latent.width; ++tx)
      for (int dy = 0; dy < factor_; ++dy)
        for (int dx = 0; dx < factor_; ++dx)
          for (int c = 0; c < 3; ++c) {
            const int p = (dy * factor_ + dx) * 3 + c;
            img.at(ty * factor_ + dy, tx * factor_ + dx, c) =
                sign_[p] * latent.data(ty * latent.width + tx, perm_[p]);
          }
  return img;
}

// ---------------------------------------------------------------------------

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, ModelFactory>& registry() {
  static std::map<std::string, ModelFactory> r = [] {
    std::map<std::string, ModelFactory> init;
    init["toy"] = [](const ModelOptions& o) {
      ToyBackboneOptions bo;
      bo.seed = o.seed;
      bo.control_strength = o.control_strength;
      bo.steps = o.steps;
      return DiffusionModel{std::make_shared<ToyBackbone>(bo), std::make_shared<ToyCodec>(4, o.seed),
                            std::make_shared<ToyTextEncoder>(bo.text_dim, o.seed), NoiseScheduler(o.steps)};
    };
    init["sdxl-adapter"] = [](const ModelOptions&) -> DiffusionModel {
      throw RuntimeError(
          "backbone 'sdxl-adapter' is an interface only: implement BlockedDenoiser, LatentCodec and "
          "TextEncoder over real weights and register it with register_backbone()");
    };
    return init;
  }();
  return r;
}

}  // namespace

void register_backbone(const std::string& name, ModelFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

std::vector<std::string> registered_backbones() {
  std::lock_guard lock(registry_mutex());
  std::vector<std::string> names;
  for (const auto& [name, f] : registry()) names.push_back(name);
  return names;
}

DiffusionModel make_model(const std::string& name, const ModelOptions& options) {
  ModelFactory factory;
  {
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(name);
    if (it == registry().end()) throw ContractError("unknown backbone '" + name + "'");
    factory = it->second;
  }
  return factory(options);
}

}  // namespace emblora
