#include "emblora/training.hpp"

#include "emblora/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace emblora {

void TrainConfig::validate() const {
  if (!(eta1 >= 0.0) || !(eta2 >= 0.0)) throw ContractError("training: learning rates must be >= 0");
  if (!(tau > 0.0)) throw ContractError("training: tau must be > 0");
  if (N < 1) throw ContractError("training: N must be >= 1");
  if (stage1_iters < 0 || stage2_iters < 0) throw ContractError("training: iteration counts must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("training: momentum must be in [0, 1)");
  if (max_retries < 1) throw ContractError("training: max_retries must be >= 1");
}

EncodedPair encode_pair(const DiffusionModel& model, const TrainingPair& pair) {
  return EncodedPair{model.codec->encode(pair.style_image()), model.codec->encode(pair.content_image()),
                     model.text->encode(pair.prompt_style()), model.text->encode(pair.prompt_content())};
}

CondMap route_conditioning(const BlockPartition& partition, const Eigen::VectorXd& emb, const Eigen::VectorXd& des) {
  CondMap out;
  for (const auto& b : partition.all_blocks()) out[b] = partition.is_style_block(b) ? emb : des;
  return out;
}

GradResult grad(const AdapterLoss& loss, const LoraAdapter& params) {
  const LoraBinding binding = bind_parameters(params);
  const ad::Var value = loss(binding);
  ad::backward(value);
  return GradResult{value.scalar(), collect_grad(binding)};
}

double evaluate(const AdapterLoss& loss, const LoraAdapter& params) { return loss(bind_constants(params)).scalar(); }

namespace {

ad::Var mse(const ad::Var& pred, const Eigen::MatrixXd& target) {
  const ad::Var diff = sub(pred, ad::Var::constant(target));
  return mean(mul(diff, diff));
}

void check_noise(const Latent& z, const Eigen::MatrixXd& noise) {
  if (noise.rows() != z.data.rows() || noise.cols() != z.data.cols()) {
    throw ContractError("noise shape does not match the latent");
  }
}

ad::Var predict(const DiffusionModel& model, const LoraBinding* binding, const Eigen::MatrixXd& z,
                const Latent& shape, int t, const CondMap& cond) {
  ForwardContext ctx;
  ctx.lora = binding;
  return model.denoiser->forward(ad::Var::constant(z), shape, t, cond, ctx);
}

ad::Var cosine_expr(const ad::Var& a, const ad::Var& b) {
  const double na = a.value().norm(), nb = b.value().norm();
  if (na == 0.0 || nb == 0.0) throw ContractError("contrastive loss: zero-norm noise component (degenerate decomposition)");
  return div(sum(mul(a, b)), mul(sqrt(sum(mul(a, a))), sqrt(sum(mul(b, b)))));
}

}  // namespace

AdapterLoss des_loss(const DiffusionModel& model, const EncodedPair& pair, int t, const Eigen::MatrixXd& noise) {
  check_noise(pair.content, noise);
  const Eigen::MatrixXd z = model.scheduler.add_noise(pair.content.data, noise, t);
  const CondMap cond = uniform_cond(*model.denoiser, pair.c_des);
  return [&model, &pair, z, cond, t, noise](const LoraBinding& b) {
    return mse(predict(model, &b, z, pair.content, t, cond), noise);
  };
}

AdapterLoss emb_loss(const DiffusionModel& model, const EncodedPair& pair, int t, const Eigen::MatrixXd& noise,
                     const BlockPartition& partition) {
  check_noise(pair.style, noise);
  const Eigen::MatrixXd z = model.scheduler.add_noise(pair.style.data, noise, t);
  const CondMap cond = route_conditioning(partition, pair.c_emb, pair.c_des);
  return [&model, &pair, z, cond, t, noise](const LoraBinding& b) {
    return mse(predict(model, &b, z, pair.style, t, cond), noise);
  };
}

double loss_des(const DiffusionModel& model, const LoraAdapter& adapter, const EncodedPair& pair, int t,
                const Eigen::MatrixXd& noise) {
  return evaluate(des_loss(model, pair, t, noise), adapter);
}

double loss_emb(const DiffusionModel& model, const LoraAdapter& adapter, const EncodedPair& pair, int t,
                const Eigen::MatrixXd& noise, const BlockPartition& partition) {
  return evaluate(emb_loss(model, pair, t, noise, partition), adapter);
}

NoiseDecompositionExpr noise_decomposition_expr(const DiffusionModel& model, const LoraBinding& binding,
                                                const Latent& z_t_des, int t, const CondMap& c_des,
                                                const CondMap& c_emb) {
  const ad::Var base_des = predict(model, nullptr, z_t_des.data, z_t_des, t, c_des);
  const ad::Var base_emb = predict(model, nullptr, z_t_des.data, z_t_des, t, c_emb);
  NoiseDecompositionExpr out;
  out.eps_des = sub(predict(model, &binding, z_t_des.data, z_t_des, t, c_des), base_des);
  out.eps_emb = sub(predict(model, &binding, z_t_des.data, z_t_des, t, c_emb), base_emb);
  out.eps_emb_star = sub(out.eps_emb, out.eps_des);
  return out;
}

NoiseDecomposition noise_decomposition(const DiffusionModel& model, const LoraAdapter& adapter,
                                       const Latent& z_t_des, int t, const CondMap& c_des, const CondMap& c_emb) {
  const NoiseDecompositionExpr e = noise_decomposition_expr(model, bind_constants(adapter), z_t_des, t, c_des, c_emb);
  return NoiseDecomposition{e.eps_des.value(), e.eps_emb.value(), e.eps_emb_star.value()};
}

double contrastive_from_similarities(double s_pos, double s_neg1, double s_neg2, double tau) {
  if (!(tau > 0.0)) throw ContractError("contrastive loss: tau must be > 0");
  return -s_pos / tau + std::log(std::exp(s_neg1 / tau) + std::exp(s_neg2 / tau));
}

double contrastive_loss(const NoiseDecomposition& ref, const NoiseDecomposition& gen, double tau) {
  const auto cast = [](const NoiseDecomposition& d) {
    return NoiseDecompositionExpr{ad::Var::constant(d.eps_des), ad::Var::constant(d.eps_emb),
                                  ad::Var::constant(d.eps_emb_star)};
  };
  return contrastive_loss_expr(cast(ref), cast(gen), tau).scalar();
}

ad::Var contrastive_loss_expr(const NoiseDecompositionExpr& ref, const NoiseDecompositionExpr& gen, double tau) {
  if (!(tau > 0.0)) throw ContractError("contrastive loss: tau must be > 0");
  if (ref.eps_des.rows() != gen.eps_des.rows() || ref.eps_des.cols() != gen.eps_des.cols()) {
    throw ContractError("contrastive loss: decompositions differ in shape");
  }
  const ad::Var s_pos = scale(cosine_expr(ref.eps_emb_star, gen.eps_emb_star), 1.0 / tau);
  const ad::Var s_neg1 = scale(cosine_expr(ref.eps_emb_star, gen.eps_des), 1.0 / tau);
  const ad::Var s_neg2 = scale(cosine_expr(ref.eps_des, gen.eps_emb_star), 1.0 / tau);
  return sub(log(add(exp(s_neg1), exp(s_neg2))), s_pos);
}

AdapterLoss con_loss(const DiffusionModel& model, const EncodedPair& ref, const EncodedPair& gen,
                     const BlockPartition& partition, int t, const Eigen::MatrixXd& ref_noise,
                     const Eigen::MatrixXd& gen_noise, double tau) {
  check_noise(ref.content, ref_noise);
  check_noise(gen.content, gen_noise);
  const Latent z_ref{ref.content.height, ref.content.width, model.scheduler.add_noise(ref.content.data, ref_noise, t)};
  const Latent z_gen{gen.content.height, gen.content.width, model.scheduler.add_noise(gen.content.data, gen_noise, t)};
  const CondMap ref_des = uniform_cond(*model.denoiser, ref.c_des);
  const CondMap ref_emb = route_conditioning(partition, ref.c_emb, ref.c_des);
  const CondMap gen_des = uniform_cond(*model.denoiser, gen.c_des);
  const CondMap gen_emb = route_conditioning(partition, gen.c_emb, gen.c_des);
  return [&model, z_ref, z_gen, ref_des, ref_emb, gen_des, gen_emb, t, tau](const LoraBinding& b) {
    const auto r = noise_decomposition_expr(model, b, z_ref, t, ref_des, ref_emb);
    const auto g = noise_decomposition_expr(model, b, z_gen, t, gen_des, gen_emb);
    return contrastive_loss_expr(r, g, tau);
  };
}

// ---------------------------------------------------------------------------

std::optional<double> IterationRecord::loss(const std::string& step) const {
  for (const auto& s : steps)
    if (s.name == step) return s.loss;
  return std::nullopt;
}

TwoStageTrainer::TwoStageTrainer(const DiffusionModel& model, BlockPartition partition, TrainConfig config,
                                 LoraAdapter adapter)
    : model_(model),
      partition_(std::move(partition)),
      config_(config),
      adapter_(std::move(adapter)),
      opt_des_(config.momentum),
      opt_emb_(config.momentum),
      opt_con_(config.momentum),
      rng_(derive_seed(config.seed, "trainer")) {
  config_.validate();
  if (partition_.all_blocks() != model.denoiser->block_names()) {
    throw ContractError("trainer: partition does not describe the backbone");
  }
  model.denoiser->check_binding(bind_constants(adapter_));
}

int TwoStageTrainer::sample_t() { return rng_.uniform_int(0, model_.scheduler.steps()); }

StepRecord TwoStageTrainer::run_step(const std::string& name, const LossFactory& make_loss, MomentumSgd& opt,
                                     UpdateSubset subset, double lr, std::vector<std::string>& warnings) {
  StepRecord rec;
  rec.name = name;
  for (int attempt = 0;; ++attempt) {
    rec.t = sample_t();
    GradResult g = grad(make_loss(rec.t), adapter_);
    if (std::isfinite(g.loss)) {
      rec.loss = g.loss;
      rec.retries = attempt;
      const LoraAdapter before = adapter_;
      opt.step(adapter_, g.grad, partition_, subset, lr);
      rec.changed = changed_entries(before, adapter_);
      if (observer_) observer_(rec, adapter_);
      return rec;
    }
    warnings.push_back(name + " loss not finite at t=" + std::to_string(rec.t) + "; re-sampling t");
    if (attempt + 1 >= config_.max_retries) {
      throw RuntimeError(name + " loss not finite after " + std::to_string(config_.max_retries) + " attempts");
    }
  }
}

IterationRecord TwoStageTrainer::stage1_iteration(const EncodedPair& pair) {
  IterationRecord rec;
  rec.stage = 1;
  rec.iteration = stage1_count_++;
  const auto noise = [&] { return rng_.normal_matrix(pair.content.data.rows(), pair.content.data.cols()); };

  rec.steps.push_back(run_step(
      "des", [&](int t) { return des_loss(model_, pair, t, noise()); }, opt_des_, UpdateSubset::all, config_.eta1,
      rec.warnings));
  rec.steps.push_back(run_step(
      "emb", [&](int t) { return emb_loss(model_, pair, t, noise(), partition_); }, opt_emb_,
      UpdateSubset::style_only, config_.eta1, rec.warnings));
  return rec;
}

IterationRecord TwoStageTrainer::stage2_iteration(const EncodedPair& ref, const std::vector<EncodedPair>& generated) {
  if (generated.empty()) throw ContractError("stage 2 needs at least one generated pair");
  IterationRecord rec;
  rec.stage = 2;
  rec.iteration = stage2_count_++;
  rec.generated_index = rng_.uniform_int(0, static_cast<int>(generated.size()));
  const EncodedPair& gen = generated[rec.generated_index];
  const auto noise = [&](const Latent& z) { return rng_.normal_matrix(z.data.rows(), z.data.cols()); };

  // The two per-pair losses are averaged; t is shared, noise is drawn per pair.
  const auto pair_mean = [](AdapterLoss a, AdapterLoss b) -> AdapterLoss {
    return [a, b](const LoraBinding& bind) { return scale(add(a(bind), b(bind)), 0.5); };
  };
  rec.steps.push_back(run_step(
      "des",
      [&](int t) {
        return pair_mean(des_loss(model_, ref, t, noise(ref.content)), des_loss(model_, gen, t, noise(gen.content)));
      },
      opt_des_, UpdateSubset::all, config_.eta1, rec.warnings));
  rec.steps.push_back(run_step(
      "emb",
      [&](int t) {
        return pair_mean(emb_loss(model_, ref, t, noise(ref.style), partition_),
                         emb_loss(model_, gen, t, noise(gen.style), partition_));
      },
      opt_emb_, UpdateSubset::style_only, config_.eta1, rec.warnings));
  try {
    rec.steps.push_back(run_step(
        "con",
        [&](int t) {
          return con_loss(model_, ref, gen, partition_, t, noise(ref.content), noise(gen.content), config_.tau);
        },
        opt_con_, UpdateSubset::style_only, config_.eta2, rec.warnings));
  } catch (const ContractError& e) {
    // A zero adapter delta leaves nothing to contrast; the step is skipped.
    rec.warnings.push_back(std::string("contrastive step skipped: ") + e.what());
  }
  return rec;
}

LossProbe LossProbe::make(const DiffusionModel& model, const EncodedPair& like, std::vector<int> timesteps,
                          std::uint64_t seed) {
  LossProbe p;
  p.timesteps = std::move(timesteps);
  Rng rng(derive_seed(seed, "loss-probe"));
  for (int t : p.timesteps) {
    if (t < 0 || t >= model.scheduler.steps()) throw ContractError("loss probe: timestep out of range");
    p.ref_noise.push_back(rng.normal_matrix(like.content.data.rows(), like.content.data.cols()));
    p.gen_noise.push_back(rng.normal_matrix(like.content.data.rows(), like.content.data.cols()));
  }
  return p;
}

double LossProbe::des(const DiffusionModel& model, const LoraAdapter& adapter, const EncodedPair& pair) const {
  double acc = 0.0;
  for (std::size_t i = 0; i < timesteps.size(); ++i) acc += loss_des(model, adapter, pair, timesteps[i], ref_noise[i]);
  return acc / static_cast<double>(timesteps.size());
}

double LossProbe::con(const DiffusionModel& model, const LoraAdapter& adapter, const EncodedPair& ref,
                      const EncodedPair& gen, const BlockPartition& partition, double tau) const {
  double acc = 0.0;
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    acc += evaluate(con_loss(model, ref, gen, partition, timesteps[i], ref_noise[i], gen_noise[i], tau), adapter);
  }
  return acc / static_cast<double>(timesteps.size());
}

std::vector<double> moving_average(const std::vector<double>& values, int window) {
  if (window < 1) throw ContractError("moving_average: window must be >= 1");
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= static_cast<std::size_t>(window)) acc -= values[i - window];
    if (i + 1 >= static_cast<std::size_t>(window)) out.push_back(acc / window);
  }
  return out;
}

// ---------------------------------------------------------------------------

int style_keep_count(int n) { return (n + 1) / 2; }
int final_keep_count(int n) { return (n + 3) / 4; }

std::vector<int> rank_descending(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  return idx;
}

std::vector<int> rank_ascending(const std::vector<double>& scores) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] < scores[b]; });
  return idx;
}

ComplementaryResult generate_complementary(const std::vector<std::string>& captions, int n,
                                           const ComplementaryHooks& hooks, const std::string& emb_token) {
  if (n < 1) throw ContractError("complementary generation: N must be >= 1");
  if (static_cast<int>(captions.size()) < n) {
    throw ContractError("complementary generation: prompt bank has " + std::to_string(captions.size()) +
                        " entries, N is " + std::to_string(n));
  }
  if (!hooks.generate || !hooks.style_score || !hooks.emulate || !hooks.design_score) {
    throw ContractError("complementary generation: every hook must be set");
  }
  ComplementaryResult res;
  res.captions.assign(captions.begin(), captions.begin() + n);

  std::vector<Image> styles;
  for (int i = 0; i < n; ++i) {
    styles.push_back(hooks.generate(res.captions[i], i));
    res.style_scores.push_back(hooks.style_score(styles.back(), i));
  }
  res.style_ranking = rank_descending(res.style_scores);

  const int keep = style_keep_count(n);
  std::vector<std::optional<Image>> designs(n);
  for (int idx : res.style_ranking) {
    if (static_cast<int>(res.style_kept.size()) == keep) break;
    try {
      designs[idx] = hooks.emulate(styles[idx], res.captions[idx], idx);
      res.style_kept.push_back(idx);
    } catch (const std::exception& e) {
      res.notes.push_back("emulation failed for candidate " + std::to_string(idx) + " ('" + res.captions[idx] +
                          "'): " + e.what() + "; backfilling from rank order");
    }
  }
  if (static_cast<int>(res.style_kept.size()) < keep) {
    throw RuntimeError("complementary generation: only " + std::to_string(res.style_kept.size()) + " of " +
                       std::to_string(keep) + " keepers could be emulated");
  }

  res.design_scores.assign(n, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> kept_scores;
  for (int idx : res.style_kept) {
    res.design_scores[idx] = hooks.design_score(*designs[idx], idx);
    kept_scores.push_back(res.design_scores[idx]);
  }
  const std::vector<int> order = rank_ascending(kept_scores);
  for (int k = 0; k < final_keep_count(n); ++k) {
    const int idx = res.style_kept[order[k]];
    res.final_selected.push_back(idx);
    res.pairs.emplace_back(styles[idx], *designs[idx], res.captions[idx], PairOrigin::generated, emb_token);
  }
  return res;
}

ComplementaryHooks make_complementary_hooks(const DiffusionModel& model, const LoraAdapter& adapter,
                                            const BlockPartition& partition, const TrainingPair& reference,
                                            const DesignBackend& backend, const ToyComplementaryOptions& options) {
  struct Shared {
    LoraBinding binding;
    FeatureTrace ref_style;
    FeatureTrace ref_design;
  };
  auto shared = std::make_shared<Shared>();
  shared->binding = bind_constants(adapter);
  const int T = model.scheduler.steps();
  shared->ref_style = invert_reconstruct(model, reference.style_image(), T, options.inversion, "reference").trace;
  shared->ref_design =
      invert_reconstruct(model, reference.content_image(), T, options.inversion, "reference-design").trace;

  const Image canvas = reference.style_image();
  const std::string token = reference.emb_token();
  ComplementaryHooks h;
  h.generate = [&model, partition, shared, canvas, token, options](const std::string& caption, int index) {
    Latent shape = model.codec->encode(canvas);
    Rng rng(derive_seed(options.seed, "complementary-" + std::to_string(index)));
    shape.data = rng.normal_matrix(shape.data.rows(), shape.data.cols());
    const CondMap cond = route_conditioning(partition, model.text->encode(style_prompt(caption, token)),
                                            model.text->encode(content_prompt(caption)));
    ForwardContext ctx;
    ctx.lora = &shared->binding;
    shape.data = sample_latent(model, shape.data, shape, model.scheduler.steps(), cond, nullptr, 1.0, ctx);
    Image img = model.codec->decode(shape);
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
    return quantize8(img);
  };
  h.style_score = [&model, shared, options, T](const Image& img, int index) {
    const FeatureTrace tr =
        invert_reconstruct(model, img, T, options.inversion, "candidate-" + std::to_string(index)).trace;
    return trace_similarity(tr, shared->ref_style, options.sections, options.section_begin, options.section_end);
  };
  h.emulate = [&backend, options](const Image& style, const std::string& caption, int index) {
    const ControlSignals sig = build_control_signals(style, options.pair.control);
    EmulationOptions emu = options.pair.emulation;
    emu.seed = derive_seed(emu.seed, "complementary-design-" + std::to_string(index));
    return backend.emulate(style, sig, compose_design_prompt(caption), emu);
  };
  h.design_score = [&model, shared, options, T](const Image& img, int index) {
    const FeatureTrace tr =
        invert_reconstruct(model, img, T, options.inversion, "design-" + std::to_string(index)).trace;
    return trace_similarity(tr, shared->ref_design, options.sections, options.section_begin, options.section_end);
  };
  return h;
}

}  // namespace emblora
