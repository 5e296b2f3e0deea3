#include "emblora/config.hpp"

#include "emblora/common.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace emblora {

namespace pt = boost::property_tree;

KeyValueFile KeyValueFile::parse(std::istream& in, const std::string& origin) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ContractError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  KeyValueFile kv;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      throw ContractError(origin + ": key '" + section + "' outside any [section]");
    }
    for (const auto& [key, value] : body) {
      kv.values_[section + "." + key] = boost::trim_copy(value.data());
    }
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeError("cannot open " + path.string());
  return parse(in, path.string());
}

const std::string& KeyValueFile::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ContractError("missing key '" + key + "'");
  return it->second;
}

int KeyValueFile::get_int(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    int out = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ContractError("key '" + key + "': expected integer, got '" + v + "'");
  }
}

std::uint64_t KeyValueFile::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    std::uint64_t out = std::stoull(v, &pos);
    if (pos != v.size() || v.starts_with('-')) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ContractError("key '" + key + "': expected unsigned integer, got '" + v + "'");
  }
}

double KeyValueFile::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ContractError("key '" + key + "': expected number, got '" + v + "'");
  }
}

bool KeyValueFile::get_bool(const std::string& key) const {
  const std::string v = boost::to_lower_copy(get(key));
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ContractError("key '" + key + "': expected boolean, got '" + v + "'");
}

std::vector<std::string> KeyValueFile::get_list(const std::string& key) const {
  const std::string& v = get(key);
  std::vector<std::string> out;
  if (boost::trim_copy(v).empty()) return out;
  boost::split(out, v, boost::is_any_of(","));
  for (auto& s : out) boost::trim(s);
  return out;
}

std::string KeyValueFile::serialize() const {
  std::ostringstream out;
  std::string current;
  for (const auto& [key, value] : values_) {
    const auto dot = key.find('.');
    const std::string section = key.substr(0, dot);
    if (section != current) {
      if (!current.empty()) out << '\n';
      out << '[' << section << "]\n";
      current = section;
    }
    out << key.substr(dot + 1) << " = " << value << '\n';
  }
  return out.str();
}

void KeyValueFile::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << serialize();
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  return boost::algorithm::join(items, sep);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------

Config Config::defaults() {
  Config c;
  auto& kv = c.kv_;
  kv.put("run.seed", "1234");

  kv.put("data.references", "fixtures/references");
  kv.put("data.inputs", "fixtures/inputs");

  kv.put("backbone.name", "toy");
  kv.put("backbone.seed", "0");
  kv.put("backbone.steps", "50");
  kv.put("backbone.guidance_scale", "1.0");
  kv.put("backbone.negative_prompt", "");
  kv.put("backbone.control_strength", "1.0");

  kv.put("lora.rank", "64");
  kv.put("lora.alpha", "64");
  kv.put("lora.style_blocks", "down.1.1,down.2.0,up.0.1,up.0.2");

  kv.put("analysis.sections", "10");
  kv.put("analysis.renoise_iters", "5");
  kv.put("analysis.renoise_tolerance", "1e-2");
  kv.put("analysis.k", "4");
  kv.put("analysis.select_section_begin", "0");
  kv.put("analysis.select_section_end", "10");
  kv.put("analysis.style_section_begin", "5");
  kv.put("analysis.style_section_end", "10");
  kv.put("analysis.prompt", "");

  kv.put("pairgen.backend", "mock");
  kv.put("pairgen.captioner", "mock");
  kv.put("pairgen.edge_detector", "sobel");
  kv.put("pairgen.blur_sigma", "4");
  kv.put("pairgen.palette_size", "8");
  kv.put("pairgen.edge_threshold", "0.5");
  kv.put("pairgen.emb_token", "[emb]");
  kv.put("pairgen.pair_mode", "edge");

  kv.put("training.eta1", "1e-4");
  kv.put("training.eta2", "1e-5");
  kv.put("training.momentum", "0");
  kv.put("training.stage1_iters", "400");
  kv.put("training.stage2_iters", "200");
  kv.put("training.N", "10");
  kv.put("training.tau", "1");
  kv.put("training.checkpoint_every", "100");
  kv.put("training.timestep_sampler", "uniform");
  kv.put("training.probe_timesteps", "10,25,40");
  kv.put("training.prompt_bank",
         "yellow dog,red flower,blue bird,green tree,purple butterfly,"
         "orange cat,pink heart,white rabbit,black horse,brown bear");

  kv.put("inference.mode", "image");
  kv.put("inference.prompt", "a flower");
  kv.put("inference.strength", "0.7");
  kv.put("inference.strict_boundary", "true");

  kv.put("metrics.hfrd_cutoff", "0.25");
  kv.put("metrics.histogram_bins", "64");
  kv.put("metrics.prompts", "a red flower,a blue bird");
  return c;
}

std::vector<std::string> Config::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : kv_.values()) out.push_back(k);
  return out;
}

void Config::set(const std::string& key, const std::string& value) {
  if (!kv_.contains(key)) {
    throw ContractError("unknown config key '" + key + "'; valid keys: " + join(keys(), ", "));
  }
  kv_.put(key, boost::trim_copy(value));
}

void Config::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + assignment + "'");
  set(boost::trim_copy(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void Config::merge_file(const std::filesystem::path& path) {
  const KeyValueFile file = KeyValueFile::load(path);
  for (const auto& [k, v] : file.values()) set(k, v);
}

}  // namespace emblora
