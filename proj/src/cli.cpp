#include "emblora/cli.hpp"

#include "emblora/metrics.hpp"

#include <CLI11.hpp>

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

namespace emblora {

namespace fs = std::filesystem;

namespace {

std::string timestamp(const char* format) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, format, &tm);
  return buf;
}

std::string fmt(double v, const char* spec = "%.10g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

bool inside(const fs::path& root, const fs::path& p) {
  const fs::path rel = p.lexically_normal().lexically_relative(root.lexically_normal());
  return !rel.empty() && *rel.begin() != "..";
}

}  // namespace

// ---------------------------------------------------------------------------
// RunRecord

RunRecord::RunRecord(const fs::path& root, const std::string& run_id, const Config& config) : run_id_(run_id) {
  if (run_id.empty() || run_id.find('/') != std::string::npos || run_id == "." || run_id == "..") {
    throw UsageError("invalid run id '" + run_id + "'");
  }
  dir_ = fs::absolute(root / run_id);
  if (fs::exists(dir_)) throw UsageError("run directory " + dir_.string() + " already exists");
  fs::create_directories(dir_);
  config.values().save(dir_ / "config.cfg");
  log("run " + run_id + " opened");
}

fs::path RunRecord::path(const std::string& relative) const {
  const fs::path p = dir_ / relative;
  if (!inside(dir_, p)) throw UsageError("path '" + relative + "' escapes the run directory");
  fs::create_directories(p.parent_path());
  return p;
}

void RunRecord::log(const std::string& event) {
  std::ofstream out(dir_ / "run.log", std::ios::app | std::ios::binary);
  if (!out) throw RuntimeError("cannot append to run log in " + dir_.string());
  out << timestamp("%Y-%m-%dT%H:%M:%S") << ' ' << event << '\n';
}

void RunRecord::artifact(const std::string& relative) {
  if (std::find(artifacts_.begin(), artifacts_.end(), relative) == artifacts_.end()) artifacts_.push_back(relative);
}

void RunRecord::close() {
  std::vector<std::string> missing;
  for (const auto& a : artifacts_) {
    if (!fs::exists(dir_ / a)) missing.push_back(a);
  }
  if (!missing.empty()) throw RuntimeError("artifacts missing at run close: " + join(missing, ", "));
  std::ofstream out(dir_ / "artifacts.manifest", std::ios::binary);
  out << "[artifacts]\n";
  for (std::size_t i = 0; i < artifacts_.size(); ++i) out << "a" << i << " = " << artifacts_[i] << '\n';
  log("run closed with " + std::to_string(artifacts_.size()) + " artifacts");
}

std::string default_run_id(const std::string& subcommand) {
  return subcommand + "-" + timestamp("%Y%m%d-%H%M%S") + "-" + std::to_string(::getpid());
}

fs::path run_root() {
  if (const char* env = std::getenv("EMBLORA_RUN_ROOT"); env && *env) return env;
  return "runs";
}

// ---------------------------------------------------------------------------
// Config mapping

ModelOptions model_options(const Config& c) {
  ModelOptions o;
  o.steps = c.get_int("backbone.steps");
  o.seed = c.get_u64("backbone.seed");
  o.control_strength = c.get_double("backbone.control_strength");
  return o;
}

PairOptions pair_options(const Config& c) {
  PairOptions o;
  o.control.edge_detector = c.get("pairgen.edge_detector");
  o.control.blur_sigma = c.get_double("pairgen.blur_sigma");
  o.emulation.palette_size = c.get_int("pairgen.palette_size");
  o.emulation.edge_threshold = c.get_double("pairgen.edge_threshold");
  o.emulation.seed = derive_seed(c.get_u64("run.seed"), "pairgen");
  o.mode = parse_pair_mode(c.get("pairgen.pair_mode"));
  o.emb_token = c.get("pairgen.emb_token");
  return o;
}

InversionOptions inversion_options(const Config& c) {
  InversionOptions o;
  o.renoise_iters = c.get_int("analysis.renoise_iters");
  o.tolerance = c.get_double("analysis.renoise_tolerance");
  o.prompt = c.get("analysis.prompt");
  return o;
}

TrainConfig train_config(const Config& c) {
  TrainConfig t;
  t.eta1 = c.get_double("training.eta1");
  t.eta2 = c.get_double("training.eta2");
  t.momentum = c.get_double("training.momentum");
  t.stage1_iters = c.get_int("training.stage1_iters");
  t.stage2_iters = c.get_int("training.stage2_iters");
  t.N = c.get_int("training.N");
  t.tau = c.get_double("training.tau");
  t.seed = derive_seed(c.get_u64("run.seed"), "training");
  if (c.get("training.timestep_sampler") != "uniform") {
    throw ContractError("training.timestep_sampler: only 'uniform' is supported");
  }
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace {

struct Common {
  Config config = Config::defaults();
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string run_id;
};

std::vector<fs::path> list_pngs(const fs::path& p) {
  if (fs::is_regular_file(p)) return {p};
  if (!fs::is_directory(p)) throw UsageError("input '" + p.string() + "' does not exist");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw UsageError("no .png images in '" + p.string() + "'");
  return out;
}

std::vector<NamedImage> load_named(const fs::path& p) {
  std::vector<NamedImage> out;
  for (const auto& f : list_pngs(p)) out.push_back({f.stem().string(), read_png(f)});
  return out;
}

std::vector<std::pair<std::string, TrainingPair>> load_pairs(const fs::path& dir) {
  std::vector<std::pair<std::string, TrainingPair>> out;
  if (fs::is_regular_file(dir / "pair.manifest")) {
    out.emplace_back(dir.filename().string(), load_pair(dir));
    return out;
  }
  if (!fs::is_directory(dir)) throw UsageError("pair directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::is_regular_file(e.path() / "pair.manifest")) subdirs.push_back(e.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& d : subdirs) out.emplace_back(d.filename().string(), load_pair(d));
  if (out.empty()) throw UsageError("no pair manifests under '" + dir.string() + "'");
  return out;
}

std::unique_ptr<Captioner> make_captioner(const Config& c) {
  const std::string name = c.get("pairgen.captioner");
  if (name == "mock") return std::make_unique<MockCaptioner>(derive_seed(c.get_u64("run.seed"), "caption"));
  throw RuntimeError("captioner '" + name + "' is not available in this build (only 'mock')");
}

/// Builds pairs for every reference image and saves them under <prefix>/<stem>.
std::vector<std::pair<std::string, TrainingPair>> build_pairs(const Config& c, const fs::path& input,
                                                              RunRecord& run, const std::string& prefix) {
  const auto backend = find_design_backend(c.get("pairgen.backend"));
  const auto captioner = make_captioner(c);
  const PairOptions opts = pair_options(c);
  std::vector<std::pair<std::string, TrainingPair>> out;
  for (const auto& file : list_pngs(input)) {
    const std::string id = file.stem().string();
    PairResult r = make_pair(read_png(file), *captioner, *backend, opts);
    for (const auto& w : r.signals.warnings) run.log("pairgen " + id + ": " + w);
    const std::string dir = prefix + "/" + id;
    save_pair(r.pair, run.path(dir),
              {{"provenance.source", file.filename().string()},
               {"provenance.backend", backend->name()},
               {"provenance.design_prompt", r.design_prompt},
               {"provenance.edge_detector", opts.control.edge_detector},
               {"provenance.warnings", join(r.signals.warnings, "; ")}});
    write_png(r.signals.edge_map, run.path(dir + "/edge.png"));
    write_png(r.signals.blur_map, run.path(dir + "/blur.png"));
    for (const char* f : {"style.png", "content.png", "pair.manifest", "edge.png", "blur.png"}) {
      run.artifact(dir + "/" + f);
    }
    run.log("pairgen " + id + ": caption '" + r.pair.caption() + "'");
    out.emplace_back(id, std::move(r.pair));
  }
  return out;
}

DiffusionModel model_from(const Config& c) { return make_model(c.get("backbone.name"), model_options(c)); }

int cmd_pairgen(const Common& cm, RunRecord& run, const std::string& input) {
  const fs::path src = input.empty() ? fs::path(cm.config.get("data.references")) : fs::path(input);
  const auto pairs = build_pairs(cm.config, src, run, "pairs");
  run.log("pairgen built " + std::to_string(pairs.size()) + " pairs");
  return 0;
}

int cmd_analyze(const Common& cm, RunRecord& run, const std::string& pairs_dir) {
  const Config& c = cm.config;
  const DiffusionModel model = model_from(c);
  const auto pairs = pairs_dir.empty() ? build_pairs(c, c.get("data.references"), run, "pairs") : load_pairs(pairs_dir);
  const InversionOptions inv = inversion_options(c);
  const int sections = c.get_int("analysis.sections");
  const int T = model.scheduler.steps();

  std::vector<SimilarityMatrix> matrices;
  KeyValueFile manifest;
  for (const auto& [id, pair] : pairs) {
    const InversionResult a = invert_reconstruct(model, pair.style_image(), T, inv, id + "/style");
    const InversionResult b = invert_reconstruct(model, pair.content_image(), T, inv, id + "/content");
    for (const auto* r : {&a, &b}) {
      for (const auto& w : r->trace.warnings) run.log("analyze " + r->trace.image_id + ": " + w);
    }
    manifest.put("inversion." + id + "_style_residual", fmt(a.max_residual, "%.6e"));
    manifest.put("inversion." + id + "_content_residual", fmt(b.max_residual, "%.6e"));
    matrices.push_back(pair_similarity(a.trace, b.trace, sections));
    write_similarity_csv(matrices.back(), run.path("similarity_" + id + ".csv"));
    run.artifact("similarity_" + id + ".csv");
  }
  const SimilarityMatrix agg = aggregate_reference_set(matrices);
  const int begin = c.get_int("analysis.select_section_begin"), end = c.get_int("analysis.select_section_end");
  const BlockSelection sel = select_style_blocks(agg, c.get_int("analysis.k"), begin, end);

  write_similarity_csv(agg, run.path("similarity.csv"));
  write_png(render_heatmap(agg), run.path("heatmap.png"));
  manifest.put("selection.style_blocks", join(sel.style_blocks));
  manifest.put("selection.all_blocks", join(sel.all_blocks));
  manifest.put("selection.k", c.get("analysis.k"));
  manifest.put("selection.section_begin", std::to_string(begin));
  manifest.put("selection.section_end", std::to_string(end));
  manifest.put("selection.pairs", std::to_string(pairs.size()));
  for (std::size_t b = 0; b < sel.all_blocks.size(); ++b) {
    manifest.put("scores." + sel.all_blocks[b], fmt(sel.scores(static_cast<Eigen::Index>(b)), "%.6f"));
  }
  manifest.save(run.path("blocks.manifest"));
  for (const char* f : {"similarity.csv", "heatmap.png", "blocks.manifest"}) run.artifact(f);
  run.log("analyze selected style blocks " + join(sel.style_blocks));
  return 0;
}

std::vector<std::string> style_blocks_from(const Config& c, const std::string& blocks_manifest) {
  if (blocks_manifest.empty()) return c.get_list("lora.style_blocks");
  if (!fs::is_regular_file(blocks_manifest)) throw UsageError("blocks manifest '" + blocks_manifest + "' not found");
  return KeyValueFile::load(blocks_manifest).get_list("selection.style_blocks");
}

std::string join_ints(const std::vector<int>& v) {
  std::vector<std::string> s;
  for (int x : v) s.push_back(std::to_string(x));
  return join(s);
}

std::string slug(const std::string& s) {
  std::string out;
  for (char ch : s) out += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
  return out;
}

int cmd_train(const Common& cm, RunRecord& run, const std::string& pairs_dir, const std::string& blocks_manifest) {
  const Config& c = cm.config;
  const DiffusionModel model = model_from(c);
  const std::uint64_t base_hash = model.denoiser->weights_hash();
  const auto pairs = pairs_dir.empty() ? build_pairs(c, c.get("data.references"), run, "pairs") : load_pairs(pairs_dir);
  const auto& [ref_id, ref_pair] = pairs.front();
  if (pairs.size() > 1) run.log("train: using reference pair '" + ref_id + "' (first of " + std::to_string(pairs.size()) + ")");

  const BlockPartition partition(*model.denoiser, style_blocks_from(c, blocks_manifest));
  const TrainConfig tc = train_config(c);
  const std::uint64_t seed = c.get_u64("run.seed");
  LoraAdapter init =
      init_adapter(*model.denoiser, c.get_int("lora.rank"), c.get_double("lora.alpha"), derive_seed(seed, "lora-init"));
  TwoStageTrainer trainer(model, partition, tc, std::move(init));
  const AdapterMetadata meta{model.denoiser->name(), partition.style_blocks(), partition.all_blocks()};
  const EncodedPair ref = encode_pair(model, ref_pair);

  std::vector<int> probe_t;
  for (const auto& s : c.get_list("training.probe_timesteps")) probe_t.push_back(std::stoi(s));
  const bool probing = !probe_t.empty();
  const LossProbe probe = probing ? LossProbe::make(model, ref, probe_t, derive_seed(seed, "probe")) : LossProbe{};
  const int every = c.get_int("training.checkpoint_every");

  const auto checkpoint = [&](const std::string& rel) {
    save_adapter(trainer.adapter(), meta, run.path(rel));
    run.artifact(rel);
    run.artifact(rel + ".manifest");
  };
  const auto warn = [&](const IterationRecord& r) {
    for (const auto& w : r.warnings) run.log("stage" + std::to_string(r.stage) + " iter " + std::to_string(r.iteration) + ": " + w);
  };

  std::ostringstream s1;
  s1 << "iteration,t_des,loss_des,t_emb,loss_emb" << (probing ? ",probe_des" : "") << '\n';
  for (int i = 0; i < tc.stage1_iters; ++i) {
    const IterationRecord r = trainer.stage1_iteration(ref);
    warn(r);
    s1 << i << ',' << r.steps[0].t << ',' << fmt(r.steps[0].loss) << ',' << r.steps[1].t << ',' << fmt(r.steps[1].loss);
    if (probing) s1 << ',' << fmt(probe.des(model, trainer.adapter(), ref));
    s1 << '\n';
    if (every > 0 && (i + 1) % every == 0) checkpoint("checkpoints/stage1_" + std::to_string(i + 1) + ".safetensors");
  }
  std::ofstream(run.path("loss_stage1.csv"), std::ios::binary) << s1.str();
  run.artifact("loss_stage1.csv");
  checkpoint("adapter_stage1.safetensors");
  run.log("stage 1 done after " + std::to_string(tc.stage1_iters) + " iterations");

  if (tc.stage2_iters > 0) {
    ToyComplementaryOptions co;
    co.sections = c.get_int("analysis.sections");
    co.section_begin = c.get_int("analysis.style_section_begin");
    co.section_end = c.get_int("analysis.style_section_end");
    co.inversion = inversion_options(c);
    co.pair = pair_options(c);
    co.seed = derive_seed(seed, "complementary");
    const auto backend = find_design_backend(c.get("pairgen.backend"));
    const ComplementaryHooks hooks =
        make_complementary_hooks(model, trainer.adapter(), partition, ref_pair, *backend, co);
    const ComplementaryResult comp = generate_complementary(c.get_list("training.prompt_bank"), tc.N, hooks, ref_pair.emb_token());
    for (const auto& n : comp.notes) run.log("complementary: " + n);

    KeyValueFile cm_out;
    cm_out.put("selection.n", std::to_string(tc.N));
    cm_out.put("selection.captions", join(comp.captions));
    cm_out.put("selection.style_ranking", join_ints(comp.style_ranking));
    cm_out.put("selection.style_kept", join_ints(comp.style_kept));
    cm_out.put("selection.style_kept_count", std::to_string(comp.style_kept.size()));
    cm_out.put("selection.final", join_ints(comp.final_selected));
    cm_out.put("selection.final_count", std::to_string(comp.final_selected.size()));
    cm_out.put("selection.style_sections", std::to_string(co.section_begin) + "-" + std::to_string(co.section_end));
    for (int i = 0; i < tc.N; ++i) {
      cm_out.put("style_scores.c" + std::to_string(i), fmt(comp.style_scores[i], "%.6f"));
      if (!std::isnan(comp.design_scores[i])) cm_out.put("design_scores.c" + std::to_string(i), fmt(comp.design_scores[i], "%.6f"));
    }
    std::vector<EncodedPair> generated;
    for (std::size_t k = 0; k < comp.pairs.size(); ++k) {
      const std::string dir = "complementary/" + std::to_string(comp.final_selected[k]) + "_" + slug(comp.pairs[k].caption());
      save_pair(comp.pairs[k], run.path(dir));
      for (const char* f : {"style.png", "content.png", "pair.manifest"}) run.artifact(dir + "/" + f);
      generated.push_back(encode_pair(model, comp.pairs[k]));
    }
    cm_out.save(run.path("complementary.manifest"));
    run.artifact("complementary.manifest");
    run.log("complementary: kept " + std::to_string(comp.style_kept.size()) + " then " +
            std::to_string(comp.final_selected.size()) + " of " + std::to_string(tc.N));

    std::ostringstream s2;
    s2 << "iteration,generated,t_des,loss_des,t_emb,loss_emb,t_con,loss_con" << (probing ? ",probe_con" : "") << '\n';
    for (int i = 0; i < tc.stage2_iters; ++i) {
      const IterationRecord r = trainer.stage2_iteration(ref, generated);
      warn(r);
      s2 << i << ',' << comp.final_selected[r.generated_index];
      for (const char* step : {"des", "emb", "con"}) {
        auto it = std::find_if(r.steps.begin(), r.steps.end(), [&](const StepRecord& s) { return s.name == step; });
        if (it == r.steps.end()) {
          s2 << ",,";
        } else {
          s2 << ',' << it->t << ',' << fmt(it->loss);
        }
      }
      if (probing) {
        double v = std::nan("");
        try {
          v = probe.con(model, trainer.adapter(), ref, generated.front(), partition, tc.tau);
        } catch (const ContractError&) {
        }
        s2 << ',' << fmt(v);
      }
      s2 << '\n';
      if (every > 0 && (i + 1) % every == 0) checkpoint("checkpoints/stage2_" + std::to_string(i + 1) + ".safetensors");
    }
    std::ofstream(run.path("loss_stage2.csv"), std::ios::binary) << s2.str();
    run.artifact("loss_stage2.csv");
    run.log("stage 2 done after " + std::to_string(tc.stage2_iters) + " iterations");
  }
  checkpoint("adapter.safetensors");
  if (model.denoiser->weights_hash() != base_hash) throw RuntimeError("base weights changed during training");
  run.log("base weights hash " + hex64(base_hash) + " unchanged; adapter hash " + hex64(adapter_hash(trainer.adapter())));
  return 0;
}

struct LoadedStyle {
  DiffusionModel base;
  DiffusionModel styled;
  std::string emb_token;
};

LoadedStyle load_styled(const Config& c, const std::string& adapter_path) {
  if (adapter_path.empty()) throw UsageError("--adapter is required");
  if (!fs::is_regular_file(adapter_path)) throw UsageError("adapter '" + adapter_path + "' not found");
  LoadedStyle out{model_from(c), model_from(c), c.get("pairgen.emb_token")};
  const LoadedAdapter la = load_adapter(adapter_path, out.base.denoiser.get());
  if (la.meta.all_blocks != out.base.denoiser->block_names()) {
    throw RuntimeError("adapter '" + adapter_path + "' was trained on a different block layout");
  }
  const BlockPartition partition(*out.base.denoiser, la.meta.style_blocks);
  out.styled = apply_style_blocks(out.base, la.adapter, partition);
  return out;
}

struct GenFlags {
  std::string adapter;
  std::string mode;
  std::string prompt;
  std::string input;
  std::optional<bool> strict;
  std::optional<double> strength;
  std::string out = "gen.png";
};

int cmd_gen(const Common& cm, RunRecord& run, const GenFlags& f) {
  const Config& c = cm.config;
  const LoadedStyle model = load_styled(c, f.adapter);
  InferenceRequest req;
  req.mode = parse_generation_mode(f.mode.empty() ? c.get("inference.mode") : f.mode);
  req.prompt = f.prompt.empty() ? c.get("inference.prompt") : f.prompt;
  req.strict_boundary = f.strict.value_or(c.get_bool("inference.strict_boundary"));
  req.strength = f.strength.value_or(c.get_double("inference.strength"));
  req.seed = derive_seed(c.get_u64("run.seed"), "gen");
  req.guidance_scale = c.get_double("backbone.guidance_scale");
  req.negative_prompt = c.get("backbone.negative_prompt");
  req.emb_token = model.emb_token;
  if (req.mode == GenerationMode::image) {
    if (f.input.empty()) throw UsageError("--input is required in image mode");
    if (!fs::is_regular_file(f.input)) throw UsageError("input image '" + f.input + "' not found");
    req.input_image = read_png(f.input);
  }
  if (fs::path(f.out).has_parent_path() || fs::path(f.out).extension() != ".png") {
    throw UsageError("--out must be a .png file name inside the run directory");
  }
  const GenerationResult res = generate(model.styled, req);
  write_png(res.image, run.path(f.out));

  KeyValueFile m;
  m.put("generation.mode", req.mode == GenerationMode::text ? "text" : "image");
  m.put("generation.prompt", req.prompt);
  m.put("generation.effective_prompt", res.prompt);
  m.put("generation.input", f.input);
  m.put("generation.adapter", fs::absolute(f.adapter).string());
  m.put("generation.strict_boundary", req.strict_boundary ? "true" : "false");
  m.put("generation.strength", format_double(req.strength));
  m.put("generation.denoise_steps", std::to_string(res.start_step));
  m.put("generation.seed", std::to_string(req.seed));
  m.put("generation.guidance_scale", format_double(req.guidance_scale));
  m.put("generation.negative_prompt", req.negative_prompt);
  m.put("generation.control_tile", res.controls.tile ? "on" : "off");
  m.put("generation.control_canny", res.controls.canny ? "on" : "off");
  m.put("generation.color_correction", res.controls.color_correction ? "on" : "off");
  m.put("generation.output", f.out);
  const std::string manifest = fs::path(f.out).stem().string() + ".manifest";
  m.save(run.path(manifest));
  run.artifact(f.out);
  run.artifact(manifest);
  run.log("gen wrote " + f.out + " for '" + res.prompt + "'");
  return 0;
}

int cmd_eval(const Common& cm, RunRecord& run, const std::string& adapter, const std::string& mode) {
  const Config& c = cm.config;
  const LoadedStyle model = load_styled(c, adapter);
  const std::vector<NamedImage> refs = load_named(c.get("data.references"));
  const std::vector<NamedImage> inputs = load_named(c.get("data.inputs"));
  const std::vector<std::string> prompts = c.get_list("metrics.prompts");
  BenchmarkOptions bo;
  bo.hfrd_cutoff = c.get_double("metrics.hfrd_cutoff");
  bo.histogram_bins = c.get_int("metrics.histogram_bins");
  const std::uint64_t seed = c.get_u64("run.seed");

  const BenchmarkPipeline pipeline = [&](const BenchmarkCase& bc) {
    InferenceRequest req;
    req.mode = bc.mode == BenchmarkMode::image ? GenerationMode::image : GenerationMode::text;
    req.prompt = bc.mode == BenchmarkMode::image ? "a " + bc.input->id : bc.prompt;
    if (bc.input) req.input_image = bc.input->image;
    req.strict_boundary = c.get_bool("inference.strict_boundary");
    req.strength = c.get_double("inference.strength");
    req.seed = derive_seed(seed, "eval-" + bc.reference->id + "-" + (bc.input ? bc.input->id : bc.prompt));
    req.guidance_scale = c.get_double("backbone.guidance_scale");
    req.negative_prompt = c.get("backbone.negative_prompt");
    req.emb_token = model.emb_token;
    return generate(model.styled, req).image;
  };

  if (mode != "image" && mode != "text" && mode != "both") throw UsageError("--mode must be image, text or both");
  for (const std::string m : {"image", "text"}) {
    if (mode != "both" && mode != m) continue;
    const MetricReport r = run_benchmark(m == "image" ? BenchmarkMode::image : BenchmarkMode::text, refs, inputs,
                                         prompts, pipeline, bo);
    std::ofstream(run.path("report_" + m + ".csv"), std::ios::binary) << r.to_csv();
    std::ofstream(run.path("report_" + m + ".md"), std::ios::binary) << r.to_markdown();
    run.artifact("report_" + m + ".csv");
    run.artifact("report_" + m + ".md");
    run.log("eval " + m + ": " + std::to_string(r.rows.size()) + " rows, " + std::to_string(r.failures()) + " failed");
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Embroidery style LoRA toolkit", "emblora"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Common cm;
  app.add_option("--config", cm.config_path, "config file (sectioned key = value)");
  app.add_option("--set", cm.sets, "override, key=value (repeatable)");
  app.add_option("--seed", cm.seed, "seed for every stochastic component");
  app.add_option("--run-id", cm.run_id, "run directory name under the run root");

  std::string input, pairs_dir, blocks, adapter, eval_mode = "both";
  GenFlags gen;
  auto* pairgen = app.add_subcommand("pairgen", "build style/content training pairs");
  pairgen->add_option("--input", input, "reference image or directory (default data.references)");
  auto* analyze = app.add_subcommand("analyze", "block similarity analysis and style-block selection");
  analyze->add_option("--pairs", pairs_dir, "pair directory (default: build from data.references)");
  auto* train = app.add_subcommand("train", "two-stage adapter training");
  train->add_option("--pairs", pairs_dir, "pair directory (default: build from data.references)");
  train->add_option("--blocks", blocks, "blocks.manifest from analyze (default lora.style_blocks)");
  auto* gen_cmd = app.add_subcommand("gen", "generate with the style blocks of a trained adapter");
  gen_cmd->add_option("--adapter", gen.adapter, "adapter checkpoint")->required();
  gen_cmd->add_option("--mode", gen.mode, "text or image");
  gen_cmd->add_option("--prompt", gen.prompt, "prompt");
  gen_cmd->add_option("--input", gen.input, "input design image (image mode)");
  gen_cmd->add_option("--strict-boundary", gen.strict, "strict boundary alignment (true/false)");
  gen_cmd->add_option("--strength", gen.strength, "noising strength in (0, 1]");
  gen_cmd->add_option("--out", gen.out, "output PNG file name inside the run directory");
  auto* eval = app.add_subcommand("eval", "benchmark metrics for a trained adapter");
  eval->add_option("--adapter", adapter, "adapter checkpoint")->required();
  eval->add_option("--mode", eval_mode, "image, text or both");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "emblora: " << e.what() << '\n';
    return 2;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    if (!cm.config_path.empty()) {
      if (!fs::is_regular_file(cm.config_path)) throw UsageError("config file '" + cm.config_path + "' not found");
      cm.config.merge_file(cm.config_path);
    }
    for (const auto& s : cm.sets) cm.config.set(s);
    if (cm.seed) cm.config.set("run.seed", std::to_string(*cm.seed));
    // Surface bad values before any work is done.
    train_config(cm.config);
    pair_options(cm.config);
  } catch (const std::invalid_argument& e) {
    err << "emblora: " << e.what() << '\n';
    return 2;
  }

  try {
    RunRecord run(run_root(), cm.run_id.empty() ? default_run_id(sub) : cm.run_id, cm.config);
    out << cm.config.serialize();
    out << "run directory: " << run.dir().string() << '\n';
    run.log("subcommand " + sub + " seed " + cm.config.get("run.seed"));
    int rc = 0;
    try {
      if (sub == "pairgen") rc = cmd_pairgen(cm, run, input);
      if (sub == "analyze") rc = cmd_analyze(cm, run, pairs_dir);
      if (sub == "train") rc = cmd_train(cm, run, pairs_dir, blocks);
      if (sub == "gen") rc = cmd_gen(cm, run, gen);
      if (sub == "eval") rc = cmd_eval(cm, run, adapter, eval_mode);
      run.close();
    } catch (const std::exception& e) {
      run.log(std::string("failed: ") + e.what());
      throw;
    }
    return rc;
  } catch (const UsageError& e) {
    err << "emblora " << sub << ": " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    err << "emblora " << sub << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "emblora " << sub << ": " << e.what() << '\n';
    return 1;
  }
}

}  // namespace emblora
