#include "doctest.h"

#include "emblora/training.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

#include <cmath>
#include <set>

using namespace emblora;

namespace {

constexpr int kGrid = 8;

struct Setup {
  DiffusionModel model = fixture::toy();
  BlockPartition partition{*model.denoiser, default_style_blocks()};
  EncodedPair pair = fixture::random_pair(model, kGrid, 1);
  EncodedPair other = fixture::random_pair(model, kGrid, 2, "blue bird");
};

Eigen::MatrixXd noise_like(const Latent& z, std::uint64_t seed) {
  return Rng(seed).normal_matrix(z.data.rows(), z.data.cols());
}

double mse_oracle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  long double s = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  return static_cast<double>(s / a.size());
}

Latent noised(const DiffusionModel& m, const Latent& z0, const Eigen::MatrixXd& eps, int t) {
  const double ab = m.scheduler.alpha_bar(t);
  return {z0.height, z0.width, (std::sqrt(ab) * z0.data.array() + std::sqrt(1.0 - ab) * eps.array()).matrix()};
}

const std::vector<std::string> kProbeIds = {"down.1.0.attn.to_q", "down.1.1.attn.to_v", "mid.attn.to_k",
                                            "up.0.2.attn.to_out", "up.1.2.attn.to_q"};

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.tau = 0.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.N = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = {};
  c.eta2 = -1e-3;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("routing: empty, full and mixed style sets") {
  Setup s;
  const auto& net = *s.model.denoiser;
  const CondMap des = uniform_cond(net, s.pair.c_des), emb = uniform_cond(net, s.pair.c_emb);
  const CondMap none = route_conditioning(BlockPartition(net, {}), s.pair.c_emb, s.pair.c_des);
  const CondMap all = route_conditioning(BlockPartition(net, net.block_names()), s.pair.c_emb, s.pair.c_des);
  const CondMap mixed = route_conditioning(s.partition, s.pair.c_emb, s.pair.c_des);
  CHECK(none == des);
  CHECK(all == emb);
  for (const auto& b : net.block_names()) CHECK(mixed.at(b) == (s.partition.is_style_block(b) ? s.pair.c_emb : s.pair.c_des));

  const Latent z = s.pair.style;
  const Latent out_mixed = denoise(net, {z, 10, mixed});
  CHECK_FALSE(out_mixed == denoise(net, {z, 10, des}));
  CHECK_FALSE(out_mixed == denoise(net, {z, 10, emb}));
}

TEST_CASE("loss on a stub denoiser that predicts the noise exactly, or off by one") {
  Setup s;
  const Eigen::MatrixXd eps = noise_like(s.pair.content, 9);
  const LoraAdapter empty{1, 1.0, {}};
  const auto exact = fixture::with_denoiser(
      std::make_shared<fixture::StubDenoiser>([eps](const Eigen::MatrixXd&, int) { return eps; }));
  const auto off = fixture::with_denoiser(std::make_shared<fixture::StubDenoiser>(
      [eps](const Eigen::MatrixXd&, int) { return (eps.array() + 1.0).matrix(); }));
  CHECK(loss_des(exact, empty, s.pair, 20, eps) == 0.0);
  CHECK(loss_emb(exact, empty, s.pair, 20, eps, s.partition) == 0.0);
  CHECK(loss_des(off, empty, s.pair, 20, eps) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(loss_emb(off, empty, s.pair, 20, eps, s.partition) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("toy losses equal a hand-computed MSE") {
  Setup s;
  const LoraAdapter a = fixture::random_adapter(*s.model.denoiser, 2, 3);
  const Eigen::MatrixXd eps = noise_like(s.pair.content, 4);
  const int t = 33;
  const auto& net = *s.model.denoiser;

  const Latent pred_des = denoise(net, {noised(s.model, s.pair.content, eps, t), t, uniform_cond(net, s.pair.c_des)}, &a);
  CHECK(loss_des(s.model, a, s.pair, t, eps) == doctest::Approx(mse_oracle(pred_des.data, eps)).epsilon(1e-12));

  const CondMap routed = route_conditioning(s.partition, s.pair.c_emb, s.pair.c_des);
  const Latent pred_emb = denoise(net, {noised(s.model, s.pair.style, eps, t), t, routed}, &a);
  CHECK(loss_emb(s.model, a, s.pair, t, eps, s.partition) ==
        doctest::Approx(mse_oracle(pred_emb.data, eps)).epsilon(1e-12));
}

TEST_CASE("noise decomposition identities") {
  Setup s;
  const auto& net = *s.model.denoiser;
  const Latent z = noised(s.model, s.pair.content, noise_like(s.pair.content, 5), 25);
  const CondMap c_des = uniform_cond(net, s.pair.c_des);
  const CondMap c_emb = route_conditioning(s.partition, s.pair.c_emb, s.pair.c_des);

  SUBCASE("zero delta gives zeros") {
    const NoiseDecomposition d = noise_decomposition(s.model, init_adapter(net, 4, 4, 1), z, 25, c_des, c_emb);
    CHECK(d.eps_des.isZero(0.0));
    CHECK(d.eps_emb.isZero(0.0));
    CHECK(d.eps_emb_star.isZero(0.0));
  }
  SUBCASE("same condition gives a zero style term") {
    const NoiseDecomposition d =
        noise_decomposition(s.model, fixture::random_adapter(net, 2, 6), z, 25, c_des, c_des);
    CHECK(d.eps_emb_star.isZero(0.0));
  }
  SUBCASE("four explicit predictions") {
    const LoraAdapter a = fixture::random_adapter(net, 2, 7);
    const NoiseDecomposition d = noise_decomposition(s.model, a, z, 25, c_des, c_emb);
    const Eigen::MatrixXd des = denoise(net, {z, 25, c_des}, &a).data - denoise(net, {z, 25, c_des}).data;
    const Eigen::MatrixXd emb = denoise(net, {z, 25, c_emb}, &a).data - denoise(net, {z, 25, c_emb}).data;
    CHECK(d.eps_des == des);
    CHECK(d.eps_emb == emb);
    CHECK(d.eps_emb_star == Eigen::MatrixXd(emb - des));
    CHECK_FALSE(d.eps_emb_star.isZero(0.0));
  }
}

TEST_CASE("contrastive loss closed forms and bounds") {
  CHECK(contrastive_from_similarities(0.3, 0.3, 0.3) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(contrastive_from_similarities(1.0, -1.0, -1.0) == doctest::Approx(std::log(2.0) - 2.0).epsilon(1e-12));
  CHECK(contrastive_from_similarities(-1.0, 1.0, 1.0) == doctest::Approx(std::log(2.0) + 2.0).epsilon(1e-12));
  // tau divides every similarity.
  CHECK(contrastive_from_similarities(1.0, -1.0, -1.0, 2.0) == doctest::Approx(std::log(2.0) - 1.0).epsilon(1e-12));
  CHECK_THROWS_AS(contrastive_from_similarities(0, 0, 0, 0.0), ContractError);
}

TEST_CASE("contrastive loss on decompositions") {
  Rng rng(11);
  const auto random_dec = [&] {
    NoiseDecomposition d{rng.normal_matrix(6, 4), rng.normal_matrix(6, 4), {}};
    d.eps_emb_star = d.eps_emb - d.eps_des;
    return d;
  };
  const NoiseDecomposition ref = random_dec(), gen = random_dec();
  const auto cos = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return oracle::cosine(Eigen::Map<const Eigen::VectorXd>(a.data(), a.size()),
                          Eigen::Map<const Eigen::VectorXd>(b.data(), b.size()));
  };
  const double expect = -cos(ref.eps_emb_star, gen.eps_emb_star) +
                        std::log(std::exp(cos(ref.eps_emb_star, gen.eps_des)) +
                                 std::exp(cos(ref.eps_des, gen.eps_emb_star)));
  CHECK(contrastive_loss(ref, gen) == doctest::Approx(expect).epsilon(1e-12));

  // Generated pair equal to the reference: the positive similarity is 1.
  const double c = cos(ref.eps_emb_star, ref.eps_des);
  CHECK(contrastive_loss(ref, ref) == doctest::Approx(-1.0 + std::log(2.0 * std::exp(c))).epsilon(1e-12));

  NoiseDecomposition zero = ref;
  zero.eps_emb_star.setZero();
  CHECK_THROWS_WITH_AS(contrastive_loss(zero, gen), doctest::Contains("degenerate"), ContractError);
}

TEST_CASE("contrastive gradient matches central differences") {
  Rng rng(12);
  const auto random_dec = [&] {
    NoiseDecomposition d{rng.normal_matrix(5, 3), rng.normal_matrix(5, 3), {}};
    d.eps_emb_star = d.eps_emb - d.eps_des;
    return d;
  };
  const NoiseDecomposition ref = random_dec(), gen = random_dec();
  const auto as_expr = [](const NoiseDecomposition& d, bool param) {
    const auto leaf = [param](const Eigen::MatrixXd& m) { return param ? ad::Var::parameter(m) : ad::Var::constant(m); };
    return NoiseDecompositionExpr{ad::Var::constant(d.eps_des), ad::Var::constant(d.eps_emb), leaf(d.eps_emb_star)};
  };
  const NoiseDecompositionExpr g = as_expr(gen, true);
  const ad::Var loss = contrastive_loss_expr(as_expr(ref, false), g);
  ad::backward(loss);
  const Eigen::MatrixXd analytic = g.eps_emb_star.grad();

  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    NoiseDecomposition p = gen, m = gen;
    p.eps_emb_star.data()[i] += h;
    m.eps_emb_star.data()[i] -= h;
    const double fd = (contrastive_loss(ref, p) - contrastive_loss(ref, m)) / (2 * h);
    worst = std::max(worst, oracle::relative_error(analytic.data()[i], fd));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("adapter gradients match central differences") {
  Setup s;
  const LoraAdapter a = fixture::random_adapter(*s.model.denoiser, 2, 13);
  const Eigen::MatrixXd e1 = noise_like(s.pair.content, 14), e2 = noise_like(s.pair.content, 15);
  const std::vector<std::pair<std::string, gradcheck::FdResult>> results = {
      {"des", gradcheck::fd_check(des_loss(s.model, s.pair, 30, e1), a, kProbeIds)},
      {"emb", gradcheck::fd_check(emb_loss(s.model, s.pair, 30, e1, s.partition), a, kProbeIds)},
      {"con", gradcheck::fd_check(con_loss(s.model, s.pair, s.other, s.partition, 30, e1, e2, 1.0), a,
                       {"down.1.1.attn.to_q", "down.2.0.attn.to_v", "up.0.1.attn.to_k", "up.0.2.attn.to_out"})},
  };
  for (const auto& [name, r] : results) {
    CAPTURE(name);
    CHECK(r.checked >= 6);
    CHECK(r.worst < 1e-4);
  }
}

TEST_CASE("stage 1 masking and zero learning rate") {
  Setup s;
  const std::uint64_t base = s.model.denoiser->weights_hash();
  const LoraAdapter init = init_adapter(*s.model.denoiser, 2, 2, 3);

  TrainConfig zero;
  zero.eta1 = zero.eta2 = 0.0;
  TwoStageTrainer frozen(s.model, s.partition, zero, init);
  frozen.stage1_iteration(s.pair);
  CHECK(frozen.adapter() == init);

  TrainConfig c;
  c.eta1 = 1e-2;
  TwoStageTrainer tr(s.model, s.partition, c, init);
  for (int i = 0; i < 3; ++i) {
    const IterationRecord r = tr.stage1_iteration(s.pair);
    REQUIRE(r.steps.size() == 2);
    CHECK(r.steps[0].name == "des");
    CHECK(r.steps[1].name == "emb");
    for (const auto& id : r.steps[1].changed) CHECK(s.partition.is_style_entry(id));
    // With B = 0 at the start only B moves, in every block.
    if (i == 0) CHECK(r.steps[0].changed.size() == 44);
  }
  CHECK(tr.iterations_run(1) == 3);
  CHECK(s.model.denoiser->weights_hash() == base);
}

TEST_CASE("stage 2 masking, zero learning rates and the sampled generated pair") {
  Setup s;
  const std::uint64_t base = s.model.denoiser->weights_hash();
  const LoraAdapter init = fixture::random_adapter(*s.model.denoiser, 2, 16);
  const std::vector<EncodedPair> gens = {s.other, fixture::random_pair(s.model, kGrid, 3, "green tree")};

  TrainConfig zero;
  zero.eta1 = zero.eta2 = 0.0;
  TwoStageTrainer frozen(s.model, s.partition, zero, init);
  frozen.stage2_iteration(s.pair, gens);
  CHECK(frozen.adapter() == init);

  TrainConfig c;
  c.eta1 = 1e-2;
  c.eta2 = 1e-2;
  TwoStageTrainer tr(s.model, s.partition, c, init);
  std::set<int> picked;
  for (int i = 0; i < 6; ++i) {
    const IterationRecord r = tr.stage2_iteration(s.pair, gens);
    REQUIRE(r.steps.size() == 3);
    CHECK(r.steps[2].name == "con");
    picked.insert(r.generated_index);
    CHECK(r.steps[0].changed.size() == 44);
    for (int k : {1, 2})
      for (const auto& id : r.steps[k].changed) CHECK(s.partition.is_style_entry(id));
  }
  CHECK(picked == std::set<int>{0, 1});
  CHECK(s.model.denoiser->weights_hash() == base);
  CHECK_THROWS_AS(tr.stage2_iteration(s.pair, {}), ContractError);
}

TEST_CASE("contrastive step is skipped while the adapter delta is zero") {
  Setup s;
  TwoStageTrainer tr(s.model, s.partition, {}, init_adapter(*s.model.denoiser, 2, 2, 3));
  TrainConfig zero;
  zero.eta1 = zero.eta2 = 0.0;
  TwoStageTrainer frozen(s.model, s.partition, zero, init_adapter(*s.model.denoiser, 2, 2, 3));
  const IterationRecord r = frozen.stage2_iteration(s.pair, {s.other});
  CHECK(r.steps.size() == 2);
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("contrastive step skipped") == 0);
}

TEST_CASE("non-finite loss re-samples t, then gives up") {
  Setup s;
  const LoraAdapter empty{1, 1.0, {}};
  const auto odd_nan = fixture::with_denoiser(std::make_shared<fixture::StubDenoiser>([](const Eigen::MatrixXd& z, int t) {
    return Eigen::MatrixXd::Constant(z.rows(), z.cols(), t % 2 ? std::nan("") : 0.0);
  }));
  TrainConfig c;
  c.max_retries = 50;
  TwoStageTrainer tr(odd_nan, BlockPartition(*odd_nan.denoiser, default_style_blocks()), c, empty);
  int retries = 0;
  for (int i = 0; i < 10; ++i) {
    const IterationRecord r = tr.stage1_iteration(s.pair);
    for (const auto& st : r.steps) {
      CHECK(st.t % 2 == 0);
      retries += st.retries;
    }
    CHECK(r.warnings.size() == static_cast<std::size_t>(r.steps[0].retries + r.steps[1].retries));
  }
  CHECK(retries > 0);

  const auto all_nan = fixture::with_denoiser(std::make_shared<fixture::StubDenoiser>(
      [](const Eigen::MatrixXd& z, int) { return Eigen::MatrixXd::Constant(z.rows(), z.cols(), std::nan("")); }));
  TwoStageTrainer doomed(all_nan, BlockPartition(*all_nan.denoiser, default_style_blocks()), {}, empty);
  CHECK_THROWS_AS(doomed.stage1_iteration(s.pair), RuntimeError);
}

TEST_CASE("seeded runs are repeatable") {
  Setup s;
  const auto run = [&] {
    TrainConfig c;
    c.seed = 77;
    TwoStageTrainer tr(s.model, s.partition, c, init_adapter(*s.model.denoiser, 2, 2, 5));
    for (int i = 0; i < 3; ++i) tr.stage1_iteration(s.pair);
    for (int i = 0; i < 2; ++i) tr.stage2_iteration(s.pair, {s.other});
    return adapter_hash(tr.adapter());
  };
  CHECK(run() == run());
}

TEST_CASE("moving average matches a direct window mean") {
  Rng rng(17);
  std::vector<double> xs(23);
  for (double& x : xs) x = rng.normal();
  const auto ma = moving_average(xs, 5);
  REQUIRE(ma.size() == 19);
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const std::vector<double> w(xs.begin() + static_cast<long>(i), xs.begin() + static_cast<long>(i) + 5);
    CHECK(ma[i] == doctest::Approx(oracle::mean_std(w).first).epsilon(1e-12));
  }
  CHECK_THROWS_AS(moving_average(xs, 0), ContractError);
}

TEST_CASE("selection sizes") {
  CHECK(style_keep_count(10) == 5);
  CHECK(final_keep_count(10) == 3);
  for (int n = 1; n <= 16; ++n) {
    CHECK(style_keep_count(n) == static_cast<int>(std::ceil(n / 2.0)));
    CHECK(final_keep_count(n) == static_cast<int>(std::ceil(n / 4.0)));
  }
  CHECK(rank_descending({0.5, 0.9, 0.5, 0.1}) == std::vector<int>{1, 0, 2, 3});
  CHECK(rank_ascending({0.5, 0.9, 0.5, 0.1}) == std::vector<int>{3, 0, 2, 1});
}

namespace {

ComplementaryHooks injected(const std::vector<double>& style, const std::vector<double>& design,
                            std::set<int> failing = {}) {
  ComplementaryHooks h;
  h.generate = [](const std::string&, int i) { return Image(8, 8, 3, i / 100.0); };
  h.style_score = [style](const Image&, int i) { return style[i]; };
  h.emulate = [failing](const Image& img, const std::string&, int i) {
    if (failing.contains(i)) throw RuntimeError("emulator crashed");
    return img;
  };
  h.design_score = [design](const Image&, int i) { return design[i]; };
  return h;
}

std::vector<std::string> captions(int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back("thing " + std::to_string(i));
  return out;
}

}  // namespace

TEST_CASE("complementary selection agrees with a sort oracle") {
  Rng rng(18);
  for (int n = 1; n <= 16; ++n) {
    std::vector<double> style(n), design(n);
    for (int i = 0; i < n; ++i) {
      style[i] = std::round(rng.uniform() * 8) / 8;  // coarse values exercise ties
      design[i] = rng.uniform();
    }
    const ComplementaryResult r = generate_complementary(captions(n), n, injected(style, design));
    const oracle::Selection o = oracle::select(style, design);
    CAPTURE(n);
    CHECK(r.style_kept == o.kept);
    CHECK(r.final_selected == o.final);
    CHECK(r.pairs.size() == o.final.size());
    for (std::size_t i = 0; i < r.pairs.size(); ++i) {
      CHECK(r.pairs[i].origin() == PairOrigin::generated);
      CHECK(r.pairs[i].caption() == "thing " + std::to_string(r.final_selected[i]));
    }
  }
}

TEST_CASE("emulator failure backfills in rank order") {
  const std::vector<double> style = {0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2};
  const std::vector<double> design = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  const ComplementaryResult r = generate_complementary(captions(8), 8, injected(style, design, {1}));
  CHECK(r.style_kept == std::vector<int>{0, 2, 3, 4});
  CHECK(r.final_selected == std::vector<int>{0, 2});
  CHECK(std::isnan(r.design_scores[1]));
  CHECK(std::isnan(r.design_scores[7]));
  REQUIRE_FALSE(r.notes.empty());
  CHECK(r.notes[0].find("1") != std::string::npos);

  CHECK_THROWS_AS(generate_complementary(captions(3), 4, injected(style, design)), ContractError);
  CHECK_THROWS_AS(generate_complementary(captions(2), 2, injected(style, design, {0, 1})), RuntimeError);
}
