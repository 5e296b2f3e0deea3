#pragma once

#include "emblora/adapter.hpp"
#include "emblora/backbone.hpp"

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace emblora {

/// The style-block subset and the full block set of a backbone, plus the
/// adapter entry ids owned by each block.
class BlockPartition {
 public:
  BlockPartition() = default;
  /// Throws ContractError if a style block is not a block of the model.
  BlockPartition(const BlockedDenoiser& model, const std::vector<std::string>& style_blocks);

  const std::vector<std::string>& style_blocks() const { return style_blocks_; }
  const std::vector<std::string>& all_blocks() const { return all_blocks_; }
  bool is_style_block(const std::string& block) const;
  bool is_style_entry(const std::string& entry_id) const { return style_entries_.contains(entry_id); }
  const std::set<std::string>& style_entries() const { return style_entries_; }

  bool operator==(const BlockPartition&) const = default;

 private:
  std::vector<std::string> style_blocks_;  // canonical order
  std::vector<std::string> all_blocks_;
  std::set<std::string> style_entries_;
};

/// down.1.1, down.2.0, up.0.1, up.0.2.
std::vector<std::string> default_style_blocks();

/// A seeded Gaussian (scaled 1/sqrt(d_in)), B zero. Throws if rank < 1 or
/// rank exceeds a target dimension.
LoraAdapter init_adapter(const BlockedDenoiser& model, int rank, double alpha, std::uint64_t seed);

enum class UpdateSubset { all, style_only };

/// Plain SGD step: entry -= lr * grad for entries in the subset.
/// Throws ContractError if gradient keys or shapes differ from the adapter's.
LoraAdapter masked_update(const LoraAdapter& adapter, const AdapterGrad& gradient, const BlockPartition& partition,
                          UpdateSubset subset, double lr);

/// SGD with heavy-ball momentum applied under the same masking rule.
/// Velocity of entries outside the subset is left untouched.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum = 0.9) : momentum_(momentum) {}
  void step(LoraAdapter& adapter, const AdapterGrad& gradient, const BlockPartition& partition,
            UpdateSubset subset, double lr);

 private:
  double momentum_;
  AdapterGrad velocity_;
};

AdapterGrad zero_grad_like(const LoraAdapter& adapter);

std::uint64_t adapter_hash(const LoraAdapter& adapter);
/// Entry ids whose A or B differ bitwise between the two adapters.
std::vector<std::string> changed_entries(const LoraAdapter& before, const LoraAdapter& after);

// ---------------------------------------------------------------------------
// Checkpoints: "<path>" holds the tensors (safetensors layout, F64, keys
// "<entry>.lora_A" / "<entry>.lora_B"); "<path>.manifest" holds
//
//   [adapter]   format, rank, alpha, scale, backbone, entries (comma list)
//   [partition] style_blocks, all_blocks (comma lists)

struct AdapterMetadata {
  std::string backbone;
  std::vector<std::string> style_blocks;
  std::vector<std::string> all_blocks;
};

std::filesystem::path manifest_path(const std::filesystem::path& archive);

void save_adapter(const LoraAdapter& adapter, const AdapterMetadata& meta, const std::filesystem::path& path);

struct LoadedAdapter {
  LoraAdapter adapter;
  AdapterMetadata meta;
};

/// Loads an archive and its manifest. With `expected`, every entry must be
/// a LoRA target of that model. Fails as a whole; nothing is partially loaded.
LoadedAdapter load_adapter(const std::filesystem::path& path, const BlockedDenoiser* expected = nullptr);

}  // namespace emblora
