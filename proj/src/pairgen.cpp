#include "emblora/pairgen.hpp"

#include "emblora/common.hpp"
#include "emblora/config.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

namespace emblora {

std::string to_string(PairOrigin origin) { return origin == PairOrigin::reference ? "reference" : "generated"; }

PairOrigin parse_origin(const std::string& text) {
  if (text == "reference") return PairOrigin::reference;
  if (text == "generated") return PairOrigin::generated;
  throw ContractError("unknown pair origin '" + text + "'");
}

std::string content_prompt(const std::string& caption) { return "a " + caption; }

std::string style_prompt(const std::string& caption, const std::string& emb_token) {
  return content_prompt(caption) + " in " + emb_token + " style";
}

TrainingPair::TrainingPair(Image style_image, Image content_image, std::string caption, PairOrigin origin,
                           std::string emb_token)
    : style_(std::move(style_image)),
      content_(std::move(content_image)),
      caption_(std::move(caption)),
      origin_(origin),
      token_(std::move(emb_token)) {
  if (caption_.empty()) throw ContractError("training pair: caption must be non-empty");
  if (token_.empty()) throw ContractError("training pair: style token must be non-empty");
  if (!style_.same_shape(content_)) throw ContractError("training pair: style and content images differ in shape");
}

// ---------------------------------------------------------------------------

Image GradientEdgeDetector::detect(const Image& rgb) const {
  const Image gray = to_gray(rgb);
  const int w = gray.width, h = gray.height;
  const auto px = [&](int y, int x) {
    return gray.at(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1), 0);
  };
  Image mag(w, h, 1);
  double peak = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      const double m = std::hypot(gx, gy);
      mag.at(y, x, 0) = m;
      peak = std::max(peak, m);
    }
  // Gradients below this are rounding noise on flat regions.
  if (peak > 1e-12) {
    for (double& v : mag.data) v /= peak;
  } else {
    std::fill(mag.data.begin(), mag.data.end(), 0.0);
  }
  return mag;
}

namespace {

class UnavailableEdgeDetector final : public EdgeDetector {
 public:
  explicit UnavailableEdgeDetector(std::string name) : name_(std::move(name)) {}
  std::string name() const override { return name_; }
  bool available() const override { return false; }
  Image detect(const Image&) const override {
    throw RuntimeError("edge detector '" + name_ + "' has no model weights in this build");
  }

 private:
  std::string name_;
};

class RealDesignBackend final : public DesignBackend {
 public:
  std::string name() const override { return "real"; }
  Image emulate(const Image&, const ControlSignals&, const std::string&, const EmulationOptions&) const override {
    throw RuntimeError(
        "design backend 'real' failed: [log] no text-to-image model with canny+tile control branches is "
        "registered; register one with register_design_backend()");
  }
};

std::mutex& plugin_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, std::shared_ptr<const EdgeDetector>>& detectors() {
  static std::map<std::string, std::shared_ptr<const EdgeDetector>> d = {
      {"sobel", std::make_shared<GradientEdgeDetector>()},
      {"hed", std::make_shared<UnavailableEdgeDetector>("hed")},
  };
  return d;
}

std::map<std::string, std::shared_ptr<const DesignBackend>>& backends() {
  static std::map<std::string, std::shared_ptr<const DesignBackend>> b = {
      {"mock", std::make_shared<MockDesignBackend>()},
      {"real", std::make_shared<RealDesignBackend>()},
  };
  return b;
}

}  // namespace

void register_edge_detector(const std::string& name, std::shared_ptr<const EdgeDetector> detector) {
  std::lock_guard lock(plugin_mutex());
  detectors()[name] = std::move(detector);
}

std::shared_ptr<const EdgeDetector> find_edge_detector(const std::string& name) {
  std::lock_guard lock(plugin_mutex());
  auto it = detectors().find(name);
  if (it == detectors().end()) throw ContractError("unknown edge detector '" + name + "'");
  return it->second;
}

void register_design_backend(const std::string& name, std::shared_ptr<const DesignBackend> backend) {
  std::lock_guard lock(plugin_mutex());
  backends()[name] = std::move(backend);
}

std::shared_ptr<const DesignBackend> find_design_backend(const std::string& name) {
  std::lock_guard lock(plugin_mutex());
  auto it = backends().find(name);
  if (it == backends().end()) throw ContractError("unknown design backend '" + name + "'");
  return it->second;
}

ControlSignals build_control_signals(const Image& style_image, const ControlOptions& options) {
  if (style_image.channels != 3 || style_image.empty()) throw ContractError("control signals need an RGB image");
  ControlSignals out;
  auto detector = find_edge_detector(options.edge_detector);
  if (!detector->available()) {
    out.warnings.push_back("edge detector '" + options.edge_detector +
                           "' unavailable; fell back to gradient-magnitude detector");
    detector = std::make_shared<GradientEdgeDetector>();
  }
  out.edge_map = detector->detect(style_image);
  for (double& v : out.edge_map.data) v = std::clamp(v, 0.0, 1.0);
  out.blur_map = gaussian_blur(style_image, options.blur_sigma);
  return out;
}

std::string compose_design_prompt(const std::string& caption) {
  if (caption.empty()) throw ContractError("compose_design_prompt: caption must be non-empty");
  return caption +
         ", flat design, vector graphic design, digital design, cartoon design, clean lines, uniform color "
         "blocks, smooth surface, high quality";
}

Image MockDesignBackend::emulate(const Image& style_image, const ControlSignals& signals, const std::string&,
                                 const EmulationOptions& options) const {
  const Image& blur = signals.blur_map;
  if (!blur.same_shape(style_image)) throw ContractError("mock design backend: blur map shape mismatch");
  if (signals.edge_map.width != blur.width || signals.edge_map.height != blur.height) {
    throw ContractError("mock design backend: edge map shape mismatch");
  }
  const std::size_t n = blur.pixel_count();
  const int k = std::max(1, std::min<int>(options.palette_size, static_cast<int>(n)));

  using Color = Eigen::Vector3d;
  const auto pixel = [&](std::size_t i) { return Color(blur.data[3 * i], blur.data[3 * i + 1], blur.data[3 * i + 2]); };

  // k-means++ seeding followed by Lloyd iterations.
  Rng rng(derive_seed(options.seed, "mock-design"));
  std::vector<Color> palette{pixel(static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n))))};
  std::vector<double> dist(n);
  while (static_cast<int>(palette.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (const auto& c : palette) best = std::min(best, (pixel(i) - c).squaredNorm());
      dist[i] = best;
      total += best;
    }
    if (total <= 0.0) break;  // fewer distinct colours than k
    double r = rng.uniform() * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      r -= dist[i];
      if (r <= 0.0) {
        pick = i;
        break;
      }
    }
    palette.push_back(pixel(pick));
  }

  std::vector<int> label(n, 0);
  for (int iter = 0; iter < 12; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (std::size_t c = 0; c < palette.size(); ++c) {
        const double d = (pixel(i) - palette[c]).squaredNorm();
        if (d < best) {
          best = d;
          label[i] = static_cast<int>(c);
        }
      }
    }
    std::vector<Color> sum(palette.size(), Color::Zero());
    std::vector<int> count(palette.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum[label[i]] += pixel(i);
      ++count[label[i]];
    }
    for (std::size_t c = 0; c < palette.size(); ++c) {
      if (count[c] > 0) palette[c] = sum[c] / count[c];
    }
  }

  std::size_t darkest = 0;
  for (std::size_t c = 1; c < palette.size(); ++c) {
    if (palette[c].sum() < palette[darkest].sum()) darkest = c;
  }
  Image out(blur.width, blur.height, 3);
  for (std::size_t i = 0; i < n; ++i) {
    const bool edge = signals.edge_map.data[i] > options.edge_threshold;
    const Color& c = palette[edge ? darkest : static_cast<std::size_t>(label[i])];
    for (int ch = 0; ch < 3; ++ch) out.data[3 * i + ch] = c[ch];
  }
  return quantize8(out);
}

std::string MockCaptioner::caption(const Image&) const {
  static const char* phrases[] = {"butterfly patch", "flower badge",  "bird emblem",   "heart motif",
                                  "star patch",      "leaf ornament", "fish applique", "sun badge"};
  return phrases[derive_seed(seed_, "caption") % std::size(phrases)];
}

PairMode parse_pair_mode(const std::string& text) {
  if (text == "edge") return PairMode::edge_design;
  if (text == "color_edge") return PairMode::color_edge;
  if (text == "appearance_edge") return PairMode::appearance_edge;
  if (text == "photo_artwork") return PairMode::photo_artwork;
  throw ContractError("unknown pair_mode '" + text + "' (edge, color_edge, appearance_edge, photo_artwork)");
}

PairResult make_pair(const Image& style_image, const Captioner& captioner, const DesignBackend& backend,
                     const PairOptions& options) {
  ControlSignals signals = build_control_signals(style_image, options.control);
  const std::string caption = captioner.caption(style_image);
  const std::string prompt = compose_design_prompt(caption);
  Image content;
  switch (options.mode) {
    case PairMode::edge_design:
      content = backend.emulate(style_image, signals, prompt, options.emulation);
      break;
    case PairMode::color_edge:
    case PairMode::appearance_edge: {
      // Line art: dark strokes where the edge map fires, white elsewhere.
      content = Image(style_image.width, style_image.height, 3);
      for (std::size_t i = 0; i < content.pixel_count(); ++i) {
        const double v = 1.0 - signals.edge_map.data[i];
        for (int c = 0; c < 3; ++c) content.data[3 * i + c] = v;
      }
      content = quantize8(content);
      break;
    }
    case PairMode::photo_artwork:
      throw RuntimeError("pair_mode 'photo_artwork' needs an external image-to-image model; none is registered");
  }
  TrainingPair pair(style_image, std::move(content), caption, PairOrigin::reference, options.emb_token);
  return PairResult{std::move(pair), std::move(signals), prompt};
}

void save_pair(const TrainingPair& pair, const std::filesystem::path& dir,
               const std::vector<std::pair<std::string, std::string>>& extra) {
  std::filesystem::create_directories(dir);
  write_png(pair.style_image(), dir / "style.png");
  write_png(pair.content_image(), dir / "content.png");
  KeyValueFile m;
  m.put("pair.caption", pair.caption());
  m.put("pair.prompt_style", pair.prompt_style());
  m.put("pair.prompt_content", pair.prompt_content());
  m.put("pair.emb_token", pair.emb_token());
  m.put("pair.origin", to_string(pair.origin()));
  m.put("pair.style_image", "style.png");
  m.put("pair.content_image", "content.png");
  for (const auto& [k, v] : extra) m.put(k, v);
  m.save(dir / "pair.manifest");
}

TrainingPair load_pair(const std::filesystem::path& dir) {
  const KeyValueFile m = KeyValueFile::load(dir / "pair.manifest");
  TrainingPair pair(read_png(dir / m.get("pair.style_image")), read_png(dir / m.get("pair.content_image")),
                    m.get("pair.caption"), parse_origin(m.get("pair.origin")), m.get("pair.emb_token"));
  if (pair.prompt_style() != m.get("pair.prompt_style") || pair.prompt_content() != m.get("pair.prompt_content")) {
    throw RuntimeError("pair manifest in " + dir.string() + " has prompts inconsistent with its caption");
  }
  return pair;
}

}  // namespace emblora
