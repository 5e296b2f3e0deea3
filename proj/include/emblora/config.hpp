#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace emblora {

/// Sectioned key-value text ("[section]" headers, "key = value" lines),
/// addressed by dotted "section.key" names. Serialization is sorted and
/// therefore byte-stable.
class KeyValueFile {
 public:
  static KeyValueFile parse(std::istream& in, const std::string& origin = "<stream>");
  static KeyValueFile load(const std::filesystem::path& path);

  bool contains(const std::string& key) const { return values_.contains(key); }
  const std::string& get(const std::string& key) const;
  void put(const std::string& key, std::string value) { values_[key] = std::move(value); }

  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  /// Comma-separated list with surrounding whitespace trimmed; empty string gives an empty list.
  std::vector<std::string> get_list(const std::string& key) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
};

std::string join(const std::vector<std::string>& items, const std::string& sep = ",");
std::string format_double(double v);

/// Run configuration: a KeyValueFile restricted to a fixed key set with
/// documented defaults. Unknown keys are rejected.
class Config {
 public:
  /// Every recognised key with its default value.
  static Config defaults();

  /// Overlays a file; throws ContractError on unknown keys.
  void merge_file(const std::filesystem::path& path);
  /// Applies "section.key=value"; throws ContractError listing valid keys on unknown key.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const KeyValueFile& values() const { return kv_; }
  std::vector<std::string> keys() const;

  int get_int(const std::string& key) const { return kv_.get_int(key); }
  std::uint64_t get_u64(const std::string& key) const { return kv_.get_u64(key); }
  double get_double(const std::string& key) const { return kv_.get_double(key); }
  bool get_bool(const std::string& key) const { return kv_.get_bool(key); }
  const std::string& get(const std::string& key) const { return kv_.get(key); }
  std::vector<std::string> get_list(const std::string& key) const { return kv_.get_list(key); }

  std::string serialize() const { return kv_.serialize(); }

 private:
  KeyValueFile kv_;
};

}  // namespace emblora
