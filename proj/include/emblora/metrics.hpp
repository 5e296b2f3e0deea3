#pragma once

#include "emblora/image.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace emblora {

/// Fraction of non-DC spectral energy of the luma image whose radial
/// frequency exceeds cutoff * Nyquist. Radial frequency of bin (u, v) is
/// hypot(min(u, W-u)/W, min(v, H-v)/H) / 0.5. Zero when there is no AC energy.
double hf_ratio(const Image& image, double cutoff = 0.25);

/// 100 * |hf_ratio(a) - hf_ratio(b)|.
double hfrd(const Image& generated, const Image& reference, double cutoff = 0.25);

/// 100 * mean over RGB channels of the Hellinger distance between
/// normalised per-channel histograms.
double histogram_loss(const Image& a, const Image& b, int bins = 64);

// ---------------------------------------------------------------------------
// External metrics

struct MetricInputs {
  const Image* generated = nullptr;
  const Image* reference = nullptr;  // comparison image, if the metric takes one
  std::string prompt;
};

using MetricBackend = std::function<double(const MetricInputs&)>;

/// Names understood by external_metric.
enum class ExternalMetric { lpips, clip_score };
std::string to_string(ExternalMetric metric);

void register_metric_backend(ExternalMetric metric, MetricBackend backend);
void clear_metric_backend(ExternalMetric metric);
bool metric_available(ExternalMetric metric);
/// nullopt when no backend is registered; never a silent zero.
std::optional<double> external_metric(ExternalMetric metric, const MetricInputs& inputs);

// ---------------------------------------------------------------------------
// Benchmark harness

enum class BenchmarkMode { image, text };

struct NamedImage {
  std::string id;
  Image image;
};

struct BenchmarkCase {
  BenchmarkMode mode = BenchmarkMode::image;
  const NamedImage* reference = nullptr;
  const NamedImage* input = nullptr;  // image mode
  std::string prompt;                 // text mode
};

/// Produces the generated image for one case; may throw to mark the row failed.
using BenchmarkPipeline = std::function<Image(const BenchmarkCase&)>;

struct MetricRow {
  std::string reference;
  std::string input;  // input image id or prompt
  bool ok = true;
  std::string error;
  std::map<std::string, std::optional<double>> values;
};

struct MetricAggregate {
  double mean = 0.0;
  double std = 0.0;  // population
  int count = 0;
};

struct MetricReport {
  BenchmarkMode mode = BenchmarkMode::image;
  std::vector<std::string> columns;
  std::vector<MetricRow> rows;
  std::vector<std::pair<std::string, std::string>> metadata;

  int failures() const;
  /// Over successful rows with a value; nullopt when no row has one.
  std::optional<MetricAggregate> aggregate(const std::string& column) const;
  std::string to_csv() const;
  std::string to_markdown() const;
};

struct BenchmarkOptions {
  double hfrd_cutoff = 0.25;
  int histogram_bins = 64;
};

/// Image mode: one row per (reference, input) with hfrd vs reference,
/// histogram loss vs input and lpips vs input. Text mode: one row per
/// (reference, prompt) with clip_score vs prompt and histogram loss vs
/// reference.
MetricReport run_benchmark(BenchmarkMode mode, const std::vector<NamedImage>& references,
                           const std::vector<NamedImage>& inputs, const std::vector<std::string>& prompts,
                           const BenchmarkPipeline& pipeline, const BenchmarkOptions& options = {});

}  // namespace emblora
