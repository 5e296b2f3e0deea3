#pragma once

#include "emblora/image.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace emblora {

enum class PairOrigin { reference, generated };

std::string to_string(PairOrigin origin);
PairOrigin parse_origin(const std::string& text);

/// "a <caption>"
std::string content_prompt(const std::string& caption);
/// "a <caption> in <token> style"
std::string style_prompt(const std::string& caption, const std::string& emb_token = "[emb]");

/// A style image and its content counterpart with their two prompts. The
/// prompt rule and equal dimensions are enforced at construction.
class TrainingPair {
 public:
  TrainingPair(Image style_image, Image content_image, std::string caption, PairOrigin origin,
               std::string emb_token = "[emb]");

  const Image& style_image() const { return style_; }
  const Image& content_image() const { return content_; }
  const std::string& caption() const { return caption_; }
  const std::string& emb_token() const { return token_; }
  PairOrigin origin() const { return origin_; }
  std::string prompt_content() const { return content_prompt(caption_); }
  std::string prompt_style() const { return style_prompt(caption_, token_); }

 private:
  Image style_;
  Image content_;
  std::string caption_;
  PairOrigin origin_;
  std::string token_;
};

struct ControlSignals {
  Image edge_map;  // single channel, [0, 1]
  Image blur_map;  // RGB low-pass
  std::vector<std::string> warnings;
};

class EdgeDetector {
 public:
  virtual ~EdgeDetector() = default;
  virtual std::string name() const = 0;
  virtual bool available() const { return true; }
  virtual Image detect(const Image& rgb) const = 0;
};

/// Sobel gradient magnitude on luma, normalised so the strongest edge is 1.
class GradientEdgeDetector final : public EdgeDetector {
 public:
  std::string name() const override { return "sobel"; }
  Image detect(const Image& rgb) const override;
};

void register_edge_detector(const std::string& name, std::shared_ptr<const EdgeDetector> detector);
/// "sobel" is built in; "hed" is registered as an unavailable external detector.
std::shared_ptr<const EdgeDetector> find_edge_detector(const std::string& name);

struct ControlOptions {
  std::string edge_detector = "sobel";
  double blur_sigma = 4.0;
};

/// Edge map from the configured detector (gradient fallback with a warning
/// when it is unavailable) and a Gaussian blur map.
ControlSignals build_control_signals(const Image& style_image, const ControlOptions& options = {});

/// caption + ", flat design, vector graphic design, ..., high quality".
std::string compose_design_prompt(const std::string& caption);

struct EmulationOptions {
  int palette_size = 8;
  double edge_threshold = 0.5;
  std::uint64_t seed = 0;
};

/// Turns a style image into its flat-design counterpart.
class DesignBackend {
 public:
  virtual ~DesignBackend() = default;
  virtual std::string name() const = 0;
  virtual Image emulate(const Image& style_image, const ControlSignals& signals, const std::string& prompt,
                        const EmulationOptions& options) const = 0;
};

/// Seeded k-means palette quantisation of the blur map, with pixels above
/// the edge threshold painted in the darkest palette colour. Output is
/// snapped to 8-bit levels.
class MockDesignBackend final : public DesignBackend {
 public:
  std::string name() const override { return "mock"; }
  Image emulate(const Image& style_image, const ControlSignals& signals, const std::string& prompt,
                const EmulationOptions& options) const override;
};

void register_design_backend(const std::string& name, std::shared_ptr<const DesignBackend> backend);
/// "mock" is built in; "real" is an interface that reports it has no model.
std::shared_ptr<const DesignBackend> find_design_backend(const std::string& name);

class Captioner {
 public:
  virtual ~Captioner() = default;
  virtual std::string caption(const Image& image) const = 0;
};

/// Returns one phrase of a fixed list chosen by the seed alone.
class MockCaptioner final : public Captioner {
 public:
  explicit MockCaptioner(std::uint64_t seed = 0) : seed_(seed) {}
  std::string caption(const Image& image) const override;

 private:
  std::uint64_t seed_;
};

/// How the content image of a pair is derived from the style image.
enum class PairMode { edge_design, color_edge, appearance_edge, photo_artwork };
PairMode parse_pair_mode(const std::string& text);

struct PairOptions {
  ControlOptions control;
  EmulationOptions emulation;
  PairMode mode = PairMode::edge_design;
  std::string emb_token = "[emb]";
};

struct PairResult {
  TrainingPair pair;
  ControlSignals signals;
  std::string design_prompt;
};

PairResult make_pair(const Image& style_image, const Captioner& captioner, const DesignBackend& backend,
                     const PairOptions& options = {});

/// Writes style.png, content.png and pair.manifest into dir.
void save_pair(const TrainingPair& pair, const std::filesystem::path& dir,
               const std::vector<std::pair<std::string, std::string>>& extra = {});
TrainingPair load_pair(const std::filesystem::path& dir);

}  // namespace emblora
