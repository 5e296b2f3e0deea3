#include "doctest.h"

#include "emblora/backbone.hpp"
#include "emblora/lora.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace emblora;

namespace {

AttentionLayer identity_layer(int d) {
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  return {"test.attn", I, I, I, I};
}

Latent random_latent(int grid, std::uint64_t seed) {
  Rng rng(seed);
  return {grid, grid, rng.normal_matrix(grid * grid, 48)};
}

}  // namespace

TEST_CASE("single token attention returns the value row") {
  Eigen::MatrixXd F(1, 3);
  F << 0.3, -1.2, 2.0;
  CHECK(attention_forward(identity_layer(3), F).isApprox(F, 1e-15));
}

TEST_CASE("uniform scores average the value rows") {
  // q . k is zero for every pair, so the softmax is uniform.
  AttentionLayer l = identity_layer(2);
  l.W_q = Eigen::MatrixXd::Zero(2, 2);
  Eigen::MatrixXd F(2, 2);
  F << 1.0, 2.0, 3.0, -4.0;
  const Eigen::MatrixXd out = attention_forward(l, F);
  for (int r = 0; r < 2; ++r) {
    CHECK(out(r, 0) == doctest::Approx(2.0));
    CHECK(out(r, 1) == doctest::Approx(-1.0));
  }
}

TEST_CASE("attention matches the dense oracle") {
  Rng rng(7);
  AttentionLayer l{"rand.attn", rng.normal_matrix(8, 8), rng.normal_matrix(8, 8), rng.normal_matrix(8, 8),
                   rng.normal_matrix(8, 8)};
  const Eigen::MatrixXd F = rng.normal_matrix(4, 8);
  const Eigen::MatrixXd expect = oracle::dense_attention(F, l.W_q, l.W_k, l.W_v, l.W_o);
  CHECK((attention_forward(l, F) - expect).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("attention dimension mismatch names the layer") {
  AttentionLayer l = identity_layer(4);
  l.name = "mid.attn";
  CHECK_THROWS_WITH_AS(attention_forward(l, Eigen::MatrixXd::Ones(2, 3)), doctest::Contains("mid.attn"),
                       ContractError);
  l.W_k = Eigen::MatrixXd::Identity(4, 3);
  CHECK_THROWS_WITH_AS(l.validate(), doctest::Contains("mid.attn"), ContractError);
}

TEST_CASE("toy backbone exposes the eleven blocks in canonical order") {
  ToyBackbone net;
  const std::vector<std::string> expect = {"down.1.0", "down.1.1", "down.2.0", "down.2.1", "mid",   "up.0.0",
                                           "up.0.1",   "up.0.2",   "up.1.0",   "up.1.1",   "up.1.2"};
  CHECK(net.block_names() == expect);
  for (const auto& b : net.blocks()) CHECK(b.attention_layers.size() == 1);
  CHECK(net.lora_targets().size() == 44);  // q, k, v, out per block
}

TEST_CASE("denoise is pure and shape preserving") {
  auto m = fixture::toy();
  const DenoiserInput in{random_latent(8, 1), 17, uniform_cond(*m.denoiser, m.text->encode("a cat"))};
  const Latent a = denoise(*m.denoiser, in);
  const Latent b = denoise(*m.denoiser, in);
  CHECK(a.same_shape(in.z_t));
  CHECK(a == b);
}

TEST_CASE("fresh adapter leaves the prediction unchanged") {
  auto m = fixture::toy();
  const DenoiserInput in{random_latent(8, 2), 30, uniform_cond(*m.denoiser, m.text->encode("a cat"))};
  const LoraAdapter fresh = init_adapter(*m.denoiser, 4, 4, 11);
  CHECK(denoise(*m.denoiser, in, &fresh) == denoise(*m.denoiser, in));
}

TEST_CASE("uniform map and shared embedding agree") {
  auto m = fixture::toy();
  const Eigen::VectorXd e = m.text->encode("a dog");
  CondMap shared;
  for (const auto& name : m.denoiser->block_names()) shared[name] = e;
  const Latent z = random_latent(8, 3);
  CHECK(denoise(*m.denoiser, {z, 5, shared}) == denoise(*m.denoiser, {z, 5, uniform_cond(*m.denoiser, e)}));
}

TEST_CASE("every block's embedding reaches the output") {
  auto m = fixture::toy();
  const Eigen::VectorXd e = m.text->encode("a dog"), other = m.text->encode("a fish");
  const Latent z = random_latent(8, 4);
  const CondMap base = uniform_cond(*m.denoiser, e);
  const Latent ref = denoise(*m.denoiser, {z, 20, base});
  for (const auto& name : m.denoiser->block_names()) {
    CondMap c = base;
    c[name] = other;
    CAPTURE(name);
    CHECK_FALSE(denoise(*m.denoiser, {z, 20, c}) == ref);
  }
}

TEST_CASE("missing block condition is rejected") {
  auto m = fixture::toy();
  CondMap c = uniform_cond(*m.denoiser, m.text->encode("x"));
  c.erase("up.0.1");
  CHECK_THROWS_WITH_AS(denoise(*m.denoiser, {random_latent(8, 5), 0, c}), doctest::Contains("up.0.1"), ContractError);
}

TEST_CASE("adapter with an unknown layer lists the key") {
  auto m = fixture::toy();
  LoraAdapter a = init_adapter(*m.denoiser, 2, 2, 0);
  a.entries["side.9.attn.to_q"] = a.entries.begin()->second;
  const DenoiserInput in{random_latent(8, 6), 0, uniform_cond(*m.denoiser, m.text->encode("x"))};
  CHECK_THROWS_WITH_AS(denoise(*m.denoiser, in, &a), doctest::Contains("side.9.attn.to_q"), ContractError);
}

TEST_CASE("merged weights and low-rank application agree") {
  const ToyBackbone net;
  const LoraAdapter a = fixture::random_adapter(net, 4, 21, 0.2);
  const ToyBackbone merged = net.merged(a);
  const ToyTextEncoder text;
  const DenoiserInput in{random_latent(8, 7), 12, uniform_cond(net, text.encode("a tree"))};
  const Latent hooked = denoise(net, in, &a);
  const Latent folded = denoise(merged, in);
  CHECK((hooked.data - folded.data).cwiseAbs().maxCoeff() < 1e-6);
  CHECK_FALSE(hooked == denoise(net, in));
}

TEST_CASE("attention rows seen by the hook are distributions") {
  auto m = fixture::toy();
  int calls = 0;
  double worst = 0.0;
  const FeatureHook hook = [&](const std::string&, const Eigen::MatrixXd&, const Eigen::MatrixXd& att) {
    ++calls;
    worst = std::max(worst, (att.rowwise().sum().array() - 1.0).abs().maxCoeff());
    CHECK(att.minCoeff() >= 0.0);
  };
  const Latent z = random_latent(8, 8);
  ForwardContext ctx;
  ctx.hook = &hook;
  m.denoiser->forward(ad::Var::constant(z.data), z, 3, uniform_cond(*m.denoiser, m.text->encode("x")), ctx);
  CHECK(calls == 11);
  CHECK(worst < 1e-12);
}

TEST_CASE("weights hash is seed dependent and stable") {
  CHECK(ToyBackbone().weights_hash() == ToyBackbone().weights_hash());
  ToyBackboneOptions o;
  o.seed = 1;
  CHECK(ToyBackbone(o).weights_hash() != ToyBackbone().weights_hash());
}

TEST_CASE("scheduler schedule is monotone and inversion undoes a step") {
  NoiseScheduler s(50);
  CHECK(s.alphas_cumprod().size() == 50);
  for (int t = 1; t < 50; ++t) CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
  CHECK(s.alpha_bar(49) > 0.0);
  CHECK(s.alpha_bar(0) < 1.0);
  CHECK_THROWS_AS(s.alpha_bar(50), ContractError);

  Rng rng(3);
  const Eigen::MatrixXd x = rng.normal_matrix(16, 4), eps = rng.normal_matrix(16, 4);
  for (int t : {0, 1, 25, 49}) {
    const Eigen::MatrixXd up = s.ddim_invert_step(x, eps, t);
    CHECK((s.ddim_step(up, eps, t) - x).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("same seed gives bit-identical noise") {
  CHECK(Rng(42).normal_matrix(5, 5) == Rng(42).normal_matrix(5, 5));
  CHECK(Rng(42).normal_matrix(5, 5) != Rng(43).normal_matrix(5, 5));
}

TEST_CASE("toy codec round trip is exact") {
  ToyCodec codec;
  const Image img = oracle::random_image(64, 64, 9);
  const Latent z = codec.encode(img);
  CHECK(z.height == 16);
  CHECK(z.width == 16);
  CHECK(z.channels() == 48);
  CHECK(codec.decode(z) == img);
  CHECK(codec.encode(Image(64, 64, 3, 0.0)).data.isZero(0.0));
  CHECK_THROWS_WITH_AS(codec.encode(Image(62, 64, 3)), doctest::Contains("4"), ContractError);
}

TEST_CASE("toy text encoder is deterministic and separates prompts") {
  ToyTextEncoder enc;
  const Eigen::VectorXd a = enc.encode("a red flower"), b = enc.encode("a red flower in [emb] style");
  CHECK(a == enc.encode("a red flower"));
  CHECK(a.norm() == doctest::Approx(1.0));
  CHECK(a != b);
}

TEST_CASE("registry builds the toy and refuses stubs") {
  CHECK(make_model("toy").denoiser->name() == "toy");
  CHECK_THROWS_AS(make_model("sdxl-adapter"), RuntimeError);
  CHECK_THROWS_WITH_AS(make_model("nope"), doctest::Contains("nope"), ContractError);
}
