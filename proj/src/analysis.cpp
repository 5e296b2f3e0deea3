#include "emblora/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace emblora {

void FeatureTrace::validate() const {
  if (features.size() != block_order.size()) throw ContractError("trace: feature rows do not match block order");
  for (std::size_t b = 0; b < features.size(); ++b) {
    if (static_cast<int>(features[b].size()) != steps) {
      throw ContractError("trace: block '" + block_order[b] + "' has " + std::to_string(features[b].size()) +
                          " steps, expected " + std::to_string(steps));
    }
    for (const auto& f : features[b]) {
      if (f.size() != features[b].front().size()) {
        throw ContractError("trace: block '" + block_order[b] + "' changes feature dimension across steps");
      }
      if (!f.allFinite()) throw ContractError("trace: block '" + block_order[b] + "' has non-finite features");
    }
  }
}

InversionResult invert_reconstruct(const DiffusionModel& model, const Image& image, int steps,
                                   const InversionOptions& options, const std::string& image_id) {
  const NoiseScheduler& sched = model.scheduler;
  if (steps != sched.steps()) {
    throw ContractError("invert_reconstruct: steps " + std::to_string(steps) + " differ from scheduler T " +
                        std::to_string(sched.steps()));
  }
  if (options.renoise_iters < 1) throw ContractError("invert_reconstruct: renoise_iters must be >= 1");

  const BlockedDenoiser& net = *model.denoiser;
  const CondMap cond = uniform_cond(net, model.text->encode(options.prompt));
  LoraBinding binding;
  ForwardContext plain;
  if (options.adapter) {
    binding = bind_constants(*options.adapter);
    plain.lora = &binding;
  }
  const Latent clean = model.codec->encode(image);
  const auto predict = [&](const Eigen::MatrixXd& z, int t, const ForwardContext& ctx) {
    return net.forward(ad::Var::constant(z), clean, t, cond, ctx).value();
  };

  InversionResult result;
  Eigen::MatrixXd prev = clean.data;
  for (int t = 0; t < steps; ++t) {
    Eigen::MatrixXd eps = predict(prev, t, plain);
    Eigen::MatrixXd z = sched.ddim_invert_step(prev, eps, t);
    double residual = 0.0;
    for (int k = 1; k < options.renoise_iters; ++k) {
      eps = predict(z, t, plain);
      Eigen::MatrixXd next = sched.ddim_invert_step(prev, eps, t);
      residual = (next - z).cwiseAbs().maxCoeff();
      z = std::move(next);
    }
    result.max_residual = std::max(result.max_residual, residual);
    if (options.renoise_iters > 1 && !(residual <= options.tolerance)) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "re-noise fixed point not converged at t=%d (residual %.3e)", t, residual);
      result.trace.warnings.emplace_back(buf);
    }
    prev = std::move(z);
  }
  result.inverted = Latent{clean.height, clean.width, prev};

  FeatureTrace& trace = result.trace;
  trace.image_id = image_id;
  trace.steps = steps;
  trace.block_order = net.block_names();
  trace.features.assign(trace.block_order.size(), {});
  std::map<std::string, std::size_t> index;
  for (std::size_t b = 0; b < trace.block_order.size(); ++b) index[trace.block_order[b]] = b;

  const FeatureHook hook = [&](const std::string& block, const Eigen::MatrixXd& out, const Eigen::MatrixXd&) {
    trace.features[index.at(block)].emplace_back(Eigen::Map<const Eigen::VectorXd>(out.data(), out.size()));
  };
  ForwardContext capture = plain;
  capture.hook = &hook;

  Eigen::MatrixXd z = prev;
  for (int t = steps - 1; t >= 0; --t) {
    const Eigen::MatrixXd eps = predict(z, t, capture);
    z = sched.ddim_step(z, eps, t);
  }
  result.reconstruction = model.codec->decode(Latent{clean.height, clean.width, z});
  trace.validate();
  return result;
}

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw ContractError("cosine_similarity: size mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

SimilarityMatrix pair_similarity(const FeatureTrace& a, const FeatureTrace& b, int sections) {
  a.validate();
  b.validate();
  if (a.block_order != b.block_order) throw ContractError("pair_similarity: traces have different block sets");
  if (a.steps != b.steps) throw ContractError("pair_similarity: traces have different step counts");
  if (sections < 1 || a.steps % sections != 0) {
    throw ContractError("pair_similarity: sections " + std::to_string(sections) + " must divide T " +
                        std::to_string(a.steps));
  }
  SimilarityMatrix m;
  m.block_order = a.block_order;
  m.section_size = a.steps / sections;
  m.values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(a.block_order.size()), sections);
  for (std::size_t blk = 0; blk < a.block_order.size(); ++blk) {
    if (a.features[blk].front().size() != b.features[blk].front().size()) {
      throw ContractError("pair_similarity: feature dimension differs for block '" + a.block_order[blk] + "'");
    }
    for (int s = 0; s < sections; ++s) {
      double acc = 0.0;
      for (int step = s * m.section_size; step < (s + 1) * m.section_size; ++step) {
        acc += cosine_similarity(a.features[blk][step], b.features[blk][step]);
      }
      m.values(static_cast<Eigen::Index>(blk), s) = acc / m.section_size;
    }
  }
  return m;
}

SimilarityMatrix aggregate_reference_set(const std::vector<SimilarityMatrix>& matrices) {
  if (matrices.empty()) throw ContractError("aggregate_reference_set: empty list");
  SimilarityMatrix out = matrices.front();
  for (std::size_t i = 1; i < matrices.size(); ++i) {
    const auto& m = matrices[i];
    if (m.block_order != out.block_order || m.values.rows() != out.values.rows() ||
        m.values.cols() != out.values.cols()) {
      throw ContractError("aggregate_reference_set: matrix " + std::to_string(i) + " has a different shape");
    }
    out.values += m.values;
  }
  out.values /= static_cast<double>(matrices.size());
  return out;
}

Eigen::VectorXd section_means(const SimilarityMatrix& m, int begin, int end) {
  if (begin < 0 || end > m.sections() || begin >= end) {
    throw ContractError("section range [" + std::to_string(begin) + ", " + std::to_string(end) +
                        ") outside [0, " + std::to_string(m.sections()) + ")");
  }
  // Plain per-row sums: vectorised row reductions round the tail rows
  // differently, which would break ties between equal rows.
  Eigen::VectorXd out(m.values.rows());
  for (Eigen::Index r = 0; r < m.values.rows(); ++r) {
    double acc = 0.0;
    for (int c = begin; c < end; ++c) acc += m.values(r, c);
    out(r) = acc / (end - begin);
  }
  return out;
}

BlockSelection select_style_blocks(const SimilarityMatrix& m, int k, int section_begin, int section_end) {
  const int n = static_cast<int>(m.block_order.size());
  if (k < 1 || k > n) throw ContractError("select_style_blocks: k must be in [1, " + std::to_string(n) + "]");
  BlockSelection sel;
  sel.all_blocks = m.block_order;
  sel.scores = section_means(m, section_begin, section_end);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sel.scores(a) < sel.scores(b); });
  std::vector<int> chosen(order.begin(), order.begin() + k);
  std::sort(chosen.begin(), chosen.end());
  for (int i : chosen) sel.style_blocks.push_back(m.block_order[i]);
  return sel;
}

double trace_similarity(const FeatureTrace& a, const FeatureTrace& b, int sections, int section_begin,
                        int section_end) {
  return section_means(pair_similarity(a, b, sections), section_begin, section_end).mean();
}

std::string similarity_csv(const SimilarityMatrix& m) {
  std::ostringstream out;
  out << "block";
  for (int s = 0; s < m.sections(); ++s) out << ",s" << s;
  out << '\n';
  char buf[32];
  for (std::size_t b = 0; b < m.block_order.size(); ++b) {
    out << m.block_order[b];
    for (int s = 0; s < m.sections(); ++s) {
      std::snprintf(buf, sizeof buf, ",%.6f", m.values(static_cast<Eigen::Index>(b), s));
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

void write_similarity_csv(const SimilarityMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << similarity_csv(m);
}

Image render_heatmap(const SimilarityMatrix& m, int cell) {
  const int rows = static_cast<int>(m.values.rows()), cols = m.sections();
  Image img(cols * cell, rows * cell, 3);
  const double lo = m.values.minCoeff(), hi = m.values.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double v = (m.values(r, c) - lo) / span;
      // Dark blue through teal to yellow.
      const double rgb[3] = {std::clamp(1.6 * v - 0.5, 0.0, 1.0), std::clamp(0.15 + 0.8 * v, 0.0, 1.0),
                             std::clamp(0.55 - 0.45 * v, 0.0, 1.0)};
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x)
          for (int ch = 0; ch < 3; ++ch) img.at(r * cell + y, c * cell + x, ch) = rgb[ch];
    }
  return img;
}

}  // namespace emblora
