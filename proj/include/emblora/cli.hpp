#pragma once

#include "emblora/analysis.hpp"
#include "emblora/config.hpp"
#include "emblora/inference.hpp"
#include "emblora/pairgen.hpp"
#include "emblora/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace emblora {

/// Bad invocation: unknown flag or key, missing input. Exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One run directory: resolved config snapshot, append-only event log and
/// the artifacts written by the subcommand. All writes go through path().
class RunRecord {
 public:
  /// Creates <root>/<run_id>; fails if it already exists.
  RunRecord(const std::filesystem::path& root, const std::string& run_id, const Config& config);

  const std::filesystem::path& dir() const { return dir_; }
  const std::string& run_id() const { return run_id_; }
  /// Absolute path of a run-relative file; parent directories are created.
  std::filesystem::path path(const std::string& relative) const;
  void log(const std::string& event);
  /// Records a run-relative artifact for the close-time existence check.
  void artifact(const std::string& relative);
  /// Writes artifacts.manifest; throws RuntimeError if an artifact is missing.
  void close();

 private:
  std::filesystem::path dir_;
  std::string run_id_;
  std::vector<std::string> artifacts_;
};

/// "<subcommand>-YYYYMMDD-HHMMSS-<pid>".
std::string default_run_id(const std::string& subcommand);
/// EMBLORA_RUN_ROOT if set, else "runs".
std::filesystem::path run_root();

// Config to module options.
ModelOptions model_options(const Config& c);
PairOptions pair_options(const Config& c);
InversionOptions inversion_options(const Config& c);
TrainConfig train_config(const Config& c);

/// Parses argv and runs one subcommand. Returns 0 on success, 1 on runtime
/// failure, 2 on usage error; failures print one diagnostic line to err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace emblora
