#include "doctest.h"

#include "emblora/cli.hpp"
#include "emblora/lora.hpp"
#include "fixtures.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace emblora;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

// Every case runs with the run root pointed at its own temp directory.
struct CliEnv {
  fixture::TempDir root{"cli"};
  CliEnv() { ::setenv("EMBLORA_RUN_ROOT", root.path().c_str(), 1); }
  ~CliEnv() { ::unsetenv("EMBLORA_RUN_ROOT"); }

  Result run(std::vector<std::string> args, bool with_config = true) const {
    if (with_config) {
      const fs::path src = fixture::source_dir();
      args.insert(args.begin(), {"--config", (src / "configs/toy.cfg").string(), "--set",
                                 "data.references=" + (src / "fixtures/references").string(), "--set",
                                 "data.inputs=" + (src / "fixtures/inputs").string()});
    }
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
  }
  fs::path dir(const std::string& run_id) const { return root.path() / run_id; }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("exit codes for usage and runtime failures") {
  CliEnv env;
  CHECK(env.run({"--help"}, false).code == 0);
  CHECK(env.run({}, false).code == 2);
  CHECK(env.run({"frobnicate"}, false).code == 2);
  CHECK(env.run({"gen"}, false).code == 2);  // --adapter is required

  const Result bad_key = env.run({"--set", "training.learning_rate=1", "analyze"});
  CHECK(bad_key.code == 2);
  CHECK(bad_key.err.find("training.learning_rate") != std::string::npos);
  CHECK(bad_key.err.find("training.eta1") != std::string::npos);  // valid keys are listed

  CHECK(env.run({"--set", "training.eta1=-1", "train"}).code == 2);
  CHECK(env.run({"--config", "/nonexistent.cfg", "analyze"}, false).code == 2);
  CHECK(env.run({"--run-id", "p1", "pairgen", "--input", "/nonexistent/dir"}).code == 2);
  // An interface-only backbone is a runtime failure, not a usage error.
  CHECK(env.run({"--set", "backbone.name=sdxl-adapter", "--run-id", "r1", "analyze"}).code == 1);
}

TEST_CASE("printed config equals the run snapshot") {
  CliEnv env;
  const Result r = env.run({"--seed", "77", "--run-id", "snap", "pairgen"});
  REQUIRE(r.code == 0);
  const std::string snapshot = slurp(env.dir("snap") / "config.cfg");
  CHECK(r.out.rfind(snapshot, 0) == 0);
  CHECK(snapshot.find("seed = 77") != std::string::npos);
  CHECK(fs::exists(env.dir("snap") / "pairs/butterfly/pair.manifest"));
  CHECK(slurp(env.dir("snap") / "artifacts.manifest").find("pairs/butterfly/style.png") != std::string::npos);

  // The same run id cannot be reused.
  CHECK(env.run({"--run-id", "snap", "pairgen"}).code == 2);
}

TEST_CASE("analyze output is byte-identical across runs") {
  CliEnv env;
  REQUIRE(env.run({"--run-id", "a", "analyze"}).code == 0);
  REQUIRE(env.run({"--run-id", "b", "analyze"}).code == 0);
  for (const char* f : {"similarity.csv", "similarity_butterfly.csv", "blocks.manifest"}) {
    CAPTURE(f);
    CHECK(slurp(env.dir("a") / f) == slurp(env.dir("b") / f));
  }
  const std::string blocks = slurp(env.dir("a") / "blocks.manifest");
  CHECK(blocks.find("style_blocks") != std::string::npos);
}

TEST_CASE("train, gen and eval on the toy preset") {
  CliEnv env;
  const std::vector<std::string> quick = {"--set", "training.stage1_iters=2", "--set", "training.stage2_iters=2",
                                          "--set", "analysis.renoise_iters=1"};
  std::vector<std::string> args = quick;
  args.insert(args.end(), {"--run-id", "train", "train"});
  const Result tr = env.run(args);
  REQUIRE_MESSAGE(tr.code == 0, tr.err);

  const std::string manifest = slurp(env.dir("train") / "complementary.manifest");
  CHECK(manifest.find("n = 10") != std::string::npos);
  CHECK(manifest.find("style_kept_count = 5") != std::string::npos);
  CHECK(manifest.find("final_count = 3") != std::string::npos);

  const fs::path ckpt = env.dir("train") / "adapter.safetensors";
  const LoadedAdapter loaded = load_adapter(ckpt);
  CHECK(loaded.adapter.entries.size() == 44);
  CHECK(loaded.meta.style_blocks.size() == 4);

  // Header plus one line per iteration.
  const std::string loss1 = slurp(env.dir("train") / "loss_stage1.csv");
  CHECK(std::count(loss1.begin(), loss1.end(), '\n') == 3);

  const fs::path flower = fixture::source_dir() / "fixtures/inputs/flower.png";
  const Result img = env.run({"--run-id", "gi", "gen", "--adapter", ckpt.string(), "--mode", "image", "--input",
                              flower.string(), "--out", "flower.png"});
  REQUIRE_MESSAGE(img.code == 0, img.err);
  CHECK(fs::exists(env.dir("gi") / "flower.png"));

  const Result txt = env.run({"--run-id", "gt", "gen", "--adapter", ckpt.string(), "--mode", "text", "--prompt",
                              "a red flower", "--out", "bird.png"});
  REQUIRE_MESSAGE(txt.code == 0, txt.err);
  CHECK(env.run({"--run-id", "gx", "gen", "--adapter", ckpt.string(), "--mode", "image"}).code == 2);
  CHECK(env.run({"--run-id", "gy", "gen", "--adapter", "/nonexistent.safetensors"}).code != 0);

  const Result ev = env.run({"--run-id", "ev", "eval", "--adapter", ckpt.string(), "--mode", "image"});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  const std::string report = slurp(env.dir("ev") / "report_image.csv");
  CHECK(report.rfind("reference,input,status,hfrd,histogram_loss,lpips\n", 0) == 0);
  CHECK(report.find(",n/a\n") != std::string::npos);  // no lpips backend in this build
}

TEST_CASE("run record guards its directory") {
  fixture::TempDir root("record");
  const Config cfg = Config::defaults();
  RunRecord run(root.path(), "r", cfg);
  CHECK(fs::exists(root.path() / "r/config.cfg"));
  CHECK_THROWS_AS(RunRecord(root.path(), "r", cfg), UsageError);
  CHECK_THROWS_AS(RunRecord(root.path(), "a/b", cfg), UsageError);
  CHECK_THROWS_AS(RunRecord(root.path(), "..", cfg), UsageError);
  CHECK_THROWS_AS(run.path("../escape.txt"), UsageError);
  CHECK_THROWS_AS(run.path("sub/../../escape.txt"), UsageError);
  CHECK(run.path("sub/file.txt").parent_path() == run.dir() / "sub");

  std::ofstream(run.path("present.txt")) << "x";
  run.artifact("present.txt");
  run.artifact("missing.txt");
  CHECK_THROWS_AS(run.close(), RuntimeError);
}
