#include "emblora/lora.hpp"

#include "emblora/config.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace emblora {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

LoraBinding bind_constants(const LoraAdapter& adapter) {
  LoraBinding b;
  for (const auto& [id, e] : adapter.entries) {
    b[id] = LoraFactor{ad::Var::constant(e.A), ad::Var::constant(e.B), adapter.scale()};
  }
  return b;
}

LoraBinding bind_parameters(const LoraAdapter& adapter) {
  LoraBinding b;
  for (const auto& [id, e] : adapter.entries) {
    b[id] = LoraFactor{ad::Var::parameter(e.A), ad::Var::parameter(e.B), adapter.scale()};
  }
  return b;
}

AdapterGrad collect_grad(const LoraBinding& binding) {
  AdapterGrad g;
  for (const auto& [id, f] : binding) g[id] = LoraEntry{f.A.grad(), f.B.grad()};
  return g;
}

// ---------------------------------------------------------------------------

BlockPartition::BlockPartition(const BlockedDenoiser& model, const std::vector<std::string>& style_blocks) {
  all_blocks_ = model.block_names();
  for (const auto& s : style_blocks) {
    if (std::find(all_blocks_.begin(), all_blocks_.end(), s) == all_blocks_.end()) {
      throw ContractError("style block '" + s + "' is not a block of backbone '" + model.name() + "'");
    }
  }
  for (const auto& b : all_blocks_) {
    if (std::find(style_blocks.begin(), style_blocks.end(), b) != style_blocks.end()) style_blocks_.push_back(b);
  }
  for (const auto& t : model.lora_targets()) {
    if (is_style_block(t.block)) style_entries_.insert(t.id);
  }
}

bool BlockPartition::is_style_block(const std::string& block) const {
  return std::find(style_blocks_.begin(), style_blocks_.end(), block) != style_blocks_.end();
}

std::vector<std::string> default_style_blocks() { return {"down.1.1", "down.2.0", "up.0.1", "up.0.2"}; }

LoraAdapter init_adapter(const BlockedDenoiser& model, int rank, double alpha, std::uint64_t seed) {
  if (rank < 1) throw ContractError("adapter rank must be >= 1, got " + std::to_string(rank));
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.alpha = alpha;
  for (const auto& t : model.lora_targets()) {
    if (rank > t.d_in || rank > t.d_out) {
      throw ContractError("adapter rank " + std::to_string(rank) + " exceeds dimension of layer '" + t.id + "' (" +
                          std::to_string(t.d_in) + "x" + std::to_string(t.d_out) + ")");
    }
    Rng rng(derive_seed(seed, t.id));
    LoraEntry e;
    e.A = rng.normal_matrix(rank, t.d_in) / std::sqrt(static_cast<double>(t.d_in));
    e.B = Eigen::MatrixXd::Zero(t.d_out, rank);
    adapter.entries.emplace(t.id, std::move(e));
  }
  return adapter;
}

namespace {

void check_grad_keys(const LoraAdapter& adapter, const AdapterGrad& gradient) {
  std::vector<std::string> missing, extra;
  for (const auto& [id, e] : adapter.entries) {
    auto it = gradient.find(id);
    if (it == gradient.end()) {
      missing.push_back(id);
    } else if (it->second.A.rows() != e.A.rows() || it->second.A.cols() != e.A.cols() ||
               it->second.B.rows() != e.B.rows() || it->second.B.cols() != e.B.cols()) {
      throw ContractError("gradient for '" + id + "' has mismatched shape");
    }
  }
  for (const auto& [id, g] : gradient) {
    if (!adapter.entries.contains(id)) extra.push_back(id);
  }
  if (!missing.empty() || !extra.empty()) {
    throw ContractError("gradient keys differ from adapter; missing: [" + join(missing) + "] unexpected: [" +
                        join(extra) + "]");
  }
}

bool in_subset(const std::string& id, const BlockPartition& partition, UpdateSubset subset) {
  return subset == UpdateSubset::all || partition.is_style_entry(id);
}

}  // namespace

LoraAdapter masked_update(const LoraAdapter& adapter, const AdapterGrad& gradient, const BlockPartition& partition,
                          UpdateSubset subset, double lr) {
  check_grad_keys(adapter, gradient);
  LoraAdapter out = adapter;
  if (lr == 0.0) return out;
  for (auto& [id, e] : out.entries) {
    if (!in_subset(id, partition, subset)) continue;
    const LoraEntry& g = gradient.at(id);
    e.A -= lr * g.A;
    e.B -= lr * g.B;
  }
  return out;
}

void MomentumSgd::step(LoraAdapter& adapter, const AdapterGrad& gradient, const BlockPartition& partition,
                       UpdateSubset subset, double lr) {
  check_grad_keys(adapter, gradient);
  if (lr == 0.0) return;
  if (velocity_.empty()) velocity_ = zero_grad_like(adapter);
  for (auto& [id, e] : adapter.entries) {
    if (!in_subset(id, partition, subset)) continue;
    LoraEntry& v = velocity_.at(id);
    const LoraEntry& g = gradient.at(id);
    v.A = momentum_ * v.A + g.A;
    v.B = momentum_ * v.B + g.B;
    e.A -= lr * v.A;
    e.B -= lr * v.B;
  }
}

AdapterGrad zero_grad_like(const LoraAdapter& adapter) {
  AdapterGrad g;
  for (const auto& [id, e] : adapter.entries) {
    g[id] = LoraEntry{Eigen::MatrixXd::Zero(e.A.rows(), e.A.cols()), Eigen::MatrixXd::Zero(e.B.rows(), e.B.cols())};
  }
  return g;
}

std::uint64_t adapter_hash(const LoraAdapter& adapter) {
  Fnv1a h;
  h.update(static_cast<std::uint64_t>(adapter.rank));
  h.update(std::bit_cast<std::uint64_t>(adapter.alpha));
  for (const auto& [id, e] : adapter.entries) h.update(id).update(e.A).update(e.B);
  return h.digest();
}

std::vector<std::string> changed_entries(const LoraAdapter& before, const LoraAdapter& after) {
  std::vector<std::string> out;
  for (const auto& [id, e] : after.entries) {
    auto it = before.entries.find(id);
    if (it == before.entries.end() || Fnv1a().update(it->second.A).update(it->second.B).digest() !=
                                          Fnv1a().update(e.A).update(e.B).digest()) {
      out.push_back(id);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kFormat = "emblora-lora-v1";

void append_row_major(std::string& blob, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      blob.append(reinterpret_cast<const char*>(&v), sizeof v);
    }
}

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& archive) {
  return archive.string() + ".manifest";
}

void save_adapter(const LoraAdapter& adapter, const AdapterMetadata& meta, const std::filesystem::path& path) {
  nlohmann::json header = nlohmann::json::object();
  std::string blob;
  for (const auto& [id, e] : adapter.entries) {
    for (const auto& [suffix, m] : {std::pair<const char*, const Eigen::MatrixXd*>{"lora_A", &e.A}, {"lora_B", &e.B}}) {
      const std::size_t begin = blob.size();
      append_row_major(blob, *m);
      header[id + "." + suffix] = {{"dtype", "F64"},
                                   {"shape", {m->rows(), m->cols()}},
                                   {"data_offsets", {begin, blob.size()}}};
    }
  }
  header["__metadata__"] = {{"format", kFormat}};
  std::string text = header.dump();
  // Header is padded to an 8-byte boundary with spaces.
  while (text.size() % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write adapter archive " + path.string());
  const std::uint64_t n = text.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw RuntimeError("failed writing adapter archive " + path.string());

  std::vector<std::string> ids;
  for (const auto& [id, e] : adapter.entries) ids.push_back(id);
  KeyValueFile m;
  m.put("adapter.format", kFormat);
  m.put("adapter.rank", std::to_string(adapter.rank));
  m.put("adapter.alpha", format_double(adapter.alpha));
  m.put("adapter.scale", format_double(adapter.scale()));
  m.put("adapter.backbone", meta.backbone);
  m.put("adapter.entries", join(ids));
  m.put("partition.style_blocks", join(meta.style_blocks));
  m.put("partition.all_blocks", join(meta.all_blocks));
  m.save(manifest_path(path));
}

LoadedAdapter load_adapter(const std::filesystem::path& path, const BlockedDenoiser* expected) {
  const KeyValueFile manifest = KeyValueFile::load(manifest_path(path));
  if (manifest.get("adapter.format") != kFormat) {
    throw RuntimeError("adapter manifest has unsupported format '" + manifest.get("adapter.format") + "'");
  }
  LoadedAdapter result;
  LoraAdapter& adapter = result.adapter;
  adapter.rank = manifest.get_int("adapter.rank");
  adapter.alpha = manifest.get_double("adapter.alpha");
  result.meta.backbone = manifest.get("adapter.backbone");
  result.meta.style_blocks = manifest.get_list("partition.style_blocks");
  result.meta.all_blocks = manifest.get_list("partition.all_blocks");
  const std::vector<std::string> ids = manifest.get_list("adapter.entries");
  if (adapter.rank < 1) throw RuntimeError("adapter manifest: rank must be >= 1");

  if (expected) {
    std::set<std::string> known;
    for (const auto& t : expected->lora_targets()) known.insert(t.id);
    std::vector<std::string> foreign;
    for (const auto& id : ids) {
      if (!known.contains(id)) foreign.push_back(id);
    }
    if (!foreign.empty()) {
      throw RuntimeError("adapter entries do not match backbone '" + expected->name() + "': " + join(foreign, ", "));
    }
  }

  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open adapter archive " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw RuntimeError("adapter archive truncated: no header length");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) throw RuntimeError("adapter archive truncated: header length out of range");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeError(std::string("adapter archive header is not valid JSON: ") + e.what());
  }
  const std::size_t data_begin = 8 + header_len;
  const std::size_t data_size = bytes.size() - data_begin;

  const auto read_tensor = [&](const std::string& key, Eigen::Index rows, Eigen::Index cols) {
    if (!header.contains(key)) throw RuntimeError("adapter archive is missing tensor '" + key + "'");
    const auto& info = header.at(key);
    const auto malformed = [&](const std::string& why) {
      return RuntimeError("adapter archive entry '" + key + "' is malformed: " + why);
    };
    try {
      if (info.at("dtype") != "F64") throw malformed("dtype must be F64");
      const auto shape = info.at("shape").get<std::vector<std::int64_t>>();
      const auto offsets = info.at("data_offsets").get<std::vector<std::uint64_t>>();
      if (shape.size() != 2 || offsets.size() != 2) throw malformed("expected 2-d shape and two offsets");
      if (shape[0] != rows || shape[1] != cols) {
        throw malformed("shape " + std::to_string(shape[0]) + "x" + std::to_string(shape[1]) + ", expected " +
                        std::to_string(rows) + "x" + std::to_string(cols));
      }
      const std::uint64_t need = static_cast<std::uint64_t>(rows * cols) * sizeof(double);
      if (offsets[1] < offsets[0] || offsets[1] - offsets[0] != need || offsets[1] > data_size) {
        throw malformed("data offsets out of range");
      }
      Eigen::MatrixXd m(rows, cols);
      const char* p = bytes.data() + data_begin + offsets[0];
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c, p += sizeof(double)) std::memcpy(&m(r, c), p, sizeof(double));
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw malformed(e.what());
    }
  };

  std::map<std::string, Eigen::Index> d_in, d_out;
  if (expected) {
    for (const auto& t : expected->lora_targets()) {
      d_in[t.id] = t.d_in;
      d_out[t.id] = t.d_out;
    }
  }
  for (const auto& id : ids) {
    const std::string key_a = id + ".lora_A", key_b = id + ".lora_B";
    for (const auto& key : {key_a, key_b}) {
      if (!header.contains(key)) throw RuntimeError("adapter archive is missing tensor '" + key + "'");
    }
    // Shapes come from the archive unless a model pins them.
    const auto shape_of = [&](const std::string& key) {
      const auto s = header.at(key).value("shape", std::vector<std::int64_t>{});
      if (s.size() != 2) throw RuntimeError("adapter archive entry '" + key + "' is malformed: bad shape");
      return s;
    };
    const Eigen::Index in_dim = expected ? d_in[id] : shape_of(key_a)[1];
    const Eigen::Index out_dim = expected ? d_out[id] : shape_of(key_b)[0];
    LoraEntry e{read_tensor(key_a, adapter.rank, in_dim), read_tensor(key_b, out_dim, adapter.rank)};
    adapter.entries.emplace(id, std::move(e));
  }
  for (const auto& [key, value] : header.items()) {
    if (key == "__metadata__") continue;
    const auto dot = key.rfind('.');
    if (dot == std::string::npos || !adapter.entries.contains(key.substr(0, dot))) {
      throw RuntimeError("adapter archive has tensor '" + key + "' not listed in the manifest");
    }
  }
  return result;
}

}  // namespace emblora
