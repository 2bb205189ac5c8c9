#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "ddcnet/checkpoint.hpp"
#include "ddcnet/training.hpp"
#include "oracles.hpp"

using namespace ddc;

namespace {

double param_norm(const ParamStore<float>& p) {
  double s = 0;
  for (const auto& k : p.kernels) {
    for (float w : k.weights) s += double(w) * w;
    for (float b : k.bias) s += double(b) * b;
  }
  return std::sqrt(s);
}

std::vector<Sample> make_batch(Rng& rng, int n, int size, int disp) {
  SynthOptions o;
  o.size = size;
  o.max_disp = disp;
  std::vector<Sample> v;
  for (int i = 0; i < n; ++i) v.push_back(synth_pair(rng, o));
  return v;
}

double batch_loss(const NetworkSpec& net, const ParamStore<float>& p, const std::vector<Sample>& batch) {
  auto [f1, f2] = stack_frames(batch);
  std::vector<FlowField> gts;
  for (const auto& s : batch) gts.push_back(s.gt);
  return aee_loss(forward(net, p, f1, f2).flow, gts).loss;
}

}  // namespace

TEST_CASE("he init") {
  Rng rng(1);
  const auto net = build_linear_schedule(2, 1, 64);
  const auto p = he_init(net, rng);
  const auto& k = p.layer(2);  // 3x3x64 -> 64
  REQUIRE(k.weights.size() >= 10000u);
  double s = 0, s2 = 0;
  for (float w : k.weights) {
    s += w;
    s2 += double(w) * w;
  }
  const double n = static_cast<double>(k.weights.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(std::fabs(sd - std::sqrt(2.0 / 576)) / std::sqrt(2.0 / 576) < 0.05);
  for (const auto& kk : p.kernels)
    for (float b : kk.bias) CHECK(b == 0.f);

  Rng again(1);
  const auto q = he_init(net, again);
  for (std::size_t l = 0; l < p.kernels.size(); ++l) CHECK(p.kernels[l].weights == q.kernels[l].weights);
}

TEST_CASE("adam scalar hand trace") {
  ParamStore<float> p;
  p.kernels.emplace_back(1, 1, 1, 1);
  p.kernels[0].weights[0] = 1.f;
  auto g = p;
  g.kernels[0].weights[0] = 1.f;
  g.kernels[0].bias[0] = 0.f;
  TrainConfig c;
  auto st = AdamState::zeros_like(p);
  adam_step(p, g, st, c, 0.1);
  // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 -> step = lr / (1 + eps).
  CHECK(p.kernels[0].weights[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-7));
  CHECK(st.step == 1);
  CHECK(st.m_w[0][0] == doctest::Approx(0.1));
  CHECK(st.v_w[0][0] == doctest::Approx(0.001));

  // Second step with g = 1 again: m = 0.19, v = 0.001999.
  adam_step(p, g, st, c, 0.1);
  const double mh = 0.19 / (1 - 0.81), vh = 0.001999 / (1 - 0.998001);
  CHECK(p.kernels[0].weights[0] == doctest::Approx(0.9 - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-6));
}

TEST_CASE("adam zero gradient, frozen layers and non-finite gradients") {
  Rng rng(2);
  const auto net = build_linear_schedule(3, 1, 4);
  auto p = he_init(net, rng);
  const auto before = p;
  auto st = AdamState::zeros_like(p);
  TrainConfig c;
  adam_step(p, zero_params<float>(net), st, c, 1e-3);
  CHECK(st.step == 1);
  for (std::size_t l = 0; l < p.kernels.size(); ++l) CHECK(p.kernels[l].weights == before.kernels[l].weights);

  auto g = zero_params<float>(net);
  for (auto& k : g.kernels) std::fill(k.weights.begin(), k.weights.end(), 0.5f);
  c.frozen_layers = {2};
  adam_step(p, g, st, c, 1e-2);
  CHECK(p.layer(2).weights == before.layer(2).weights);
  CHECK(p.layer(1).weights != before.layer(1).weights);

  g.layer(3).weights[0] = std::nanf("");
  c.frozen_layers.clear();
  try {
    adam_step(p, g, st, c, 1e-2);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("layer 3") != std::string::npos);
  }
}

TEST_CASE("l2 alone shrinks the parameter norm") {
  Rng rng(3);
  const auto net = build_linear_schedule(2, 1, 4);
  auto p = he_init(net, rng);
  auto st = AdamState::zeros_like(p);
  TrainConfig c;
  c.l2 = 1e-2;
  double prev = param_norm(p);
  for (int i = 0; i < 5; ++i) {
    adam_step(p, zero_params<float>(net), st, c, 1e-4);
    const double now = param_norm(p);
    CHECK(now < prev);
    prev = now;
  }
}

TEST_CASE("aee loss examples") {
  Tensor4<double> est(1, 1, 1, 2);
  est(0, 0, 0, 0) = 3;
  est(0, 0, 0, 1) = 4;
  const auto r = aee_loss(est, {FlowField(1, 1)});
  CHECK(r.loss == 5.0);
  CHECK(r.grad(0, 0, 0, 0) == doctest::Approx(0.6));
  CHECK(r.grad(0, 0, 0, 1) == doctest::Approx(0.8));

  const auto z = aee_loss(Tensor4<double>(1, 2, 2, 2), {FlowField(2, 2)});
  CHECK(z.loss == 0.0);
  for (double v : z.grad.vec()) CHECK(v == 0.0);

  FlowField none(1, 1);
  none.valid[0] = 0;
  CHECK_THROWS_AS(aee_loss(est, {none}), FlowError);
}

TEST_CASE("aee loss gradient matches finite differences") {
  std::mt19937_64 rng(4);
  auto est = oracle::random_tensor<double>(rng, 2, 8, 8, 2, -3, 3);
  std::vector<FlowField> gts;
  std::uniform_real_distribution<float> u(-3.f, 3.f);
  std::bernoulli_distribution inv(0.15);
  for (int b = 0; b < 2; ++b) {
    FlowField g(8, 8);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g.u[i] = u(rng);
      g.v[i] = u(rng);
      g.valid[i] = !inv(rng);
    }
    gts.push_back(g);
  }
  // A few pixels with small EE.
  for (int k = 0; k < 4; ++k) {
    est(0, k, k, 0) = gts[0].u[gts[0].index(k, k)] + 1e-3 * (k + 1);
    est(0, k, k, 1) = gts[0].v[gts[0].index(k, k)] - 2e-3;
  }
  const auto an = aee_loss(est, gts);
  auto loss = [&] { return aee_loss(est, gts).loss; };
  double worst = 0;
  // Five-point stencil: the small-EE pixels need a step large enough to
  // keep summation roundoff below the tolerance.
  auto five_point = [&](std::size_t i) {
    auto& v = est.vec();
    const double keep = v[i], h = 1e-5;
    double f[4];
    const double off[4] = {-2, -1, 1, 2};
    for (int k = 0; k < 4; ++k) {
      v[i] = keep + off[k] * h;
      f[k] = loss();
    }
    v[i] = keep;
    return (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h);
  };
  for (std::size_t i = 0; i < est.size(); ++i)
    worst = std::max(worst, oracle::rel_err(an.grad.vec()[i], five_point(i)));
  CHECK(worst < 1e-5);
}

TEST_CASE("synthetic pairs") {
  Rng rng(5);
  SynthOptions o;
  o.size = 32;
  o.max_disp = 0;
  const auto s0 = synth_pair(rng, o);
  CHECK(s0.frame1.vec() == s0.frame2.vec());
  for (std::size_t i = 0; i < s0.gt.size(); ++i) CHECK((s0.gt.u[i] == 0.f && s0.gt.v[i] == 0.f));

  o.max_disp = 3;
  for (int t = 0; t < 20; ++t) {
    const auto s = synth_pair(rng, o);
    const int u = static_cast<int>(s.gt.u[0]), v = static_cast<int>(s.gt.v[0]);
    CHECK(std::abs(u) <= 3);
    CHECK(std::abs(v) <= 3);
    for (float x : s.frame1.vec()) CHECK((x >= 0.f && x <= 1.f));
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j) {
        const int si = i - v, sj = j - u;
        if (si < 0 || si >= 32 || sj < 0 || sj >= 32) continue;
        CHECK(s.frame2(0, i, j, 1) == s.frame1(0, si, sj, 1));
      }
    // gt valid exactly where the destination stays in frame.
    for (int i = 0; i < 32; ++i)
      for (int j = 0; j < 32; ++j) {
        const bool in = i + v >= 0 && i + v < 32 && j + u >= 0 && j + u < 32;
        CHECK(bool(s.gt.valid[s.gt.index(i, j)]) == in);
      }
  }
  CHECK_THROWS_AS(synth_pair(rng, SynthOptions{16, 4, 0.0, 1.0}), DomainError);
}

TEST_CASE("two-region samples hold at most two distinct vectors") {
  Rng rng(6);
  SynthOptions o;
  o.size = 48;
  o.max_disp = 3;
  o.two_region_prob = 1.0;
  for (int t = 0; t < 10; ++t) {
    const auto s = synth_pair(rng, o);
    std::set<std::pair<float, float>> vecs;
    for (std::size_t i = 0; i < s.gt.size(); ++i) vecs.insert({s.gt.u[i], s.gt.v[i]});
    CHECK(vecs.size() <= 2);
  }
}

TEST_CASE("augmentation") {
  Rng rng(7);
  SynthOptions o;
  o.size = 32;
  o.max_disp = 2;
  const auto s = synth_pair(rng, o);

  const auto same = augment(s, AugmentConfig::identity(), rng);
  CHECK(same.frame1.vec() == s.frame1.vec());
  CHECK(same.frame2.vec() == s.frame2.vec());
  CHECK(same.gt.u == s.gt.u);
  CHECK(same.gt.valid == s.gt.valid);

  Sample tr;
  tr.frame1 = tr.frame2 = Tensor4<float>(1, 16, 16, 3, 0.5f);
  tr.gt = FlowField(16, 16, 1.f, 0.f);
  const auto sc = apply_affine(tr, 0.0, 2.0, 0.0, 0.0);
  const auto c = sc.gt.index(8, 8);
  CHECK(sc.gt.valid[c]);
  CHECK(sc.gt.u[c] == doctest::Approx(2.0));
  CHECK(sc.gt.v[c] == doctest::Approx(0.0).epsilon(1e-6));

  // +x rotates toward +y (down): (1, 0) -> (0, 1).
  const auto rot = apply_affine(tr, 90.0, 1.0, 0.0, 0.0);
  CHECK(rot.gt.u[c] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(rot.gt.v[c] == doctest::Approx(1.0));

  Rng a(9), b(9);
  const auto x = augment(s, AugmentConfig{}, a), y = augment(s, AugmentConfig{}, b);
  CHECK(x.frame1.vec() == y.frame1.vec());
  CHECK(x.gt.u == y.gt.u);

  AugmentConfig bad;
  bad.scale_min = -1;
  CHECK_THROWS_AS(bad.check(), TrainingError);
}

TEST_CASE("one small Adam step lowers the loss on a fixed batch") {
  const auto net = build_linear_schedule(3, 1, 4);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    auto p = he_init(net, rng);
    const auto batch = make_batch(rng, 2, 16, 2);
    auto [f1, f2] = stack_frames(batch);
    std::vector<FlowField> gts;
    for (const auto& s : batch) gts.push_back(s.gt);
    const auto fwd = forward(net, p, f1, f2, CacheMode::full);
    const auto l = aee_loss(fwd.flow, gts);
    const auto g = backward(net, p, fwd.cache, l.grad);
    auto st = AdamState::zeros_like(p);
    adam_step(p, g.params, st, TrainConfig{}, 1e-5);
    CAPTURE(seed);
    CHECK(batch_loss(net, p, batch) < l.loss);
  }
}

TEST_CASE("training loop: lr 0, determinism, checkpoints") {
  const auto net = build_linear_schedule(2, 1, 4);
  SynthOptions o;
  o.size = 16;
  o.max_disp = 2;
  SyntheticSource src(o);
  TrainConfig c;
  c.max_steps = 6;
  c.batch_size = 2;
  c.eval_every = 3;

  Rng rng(1);
  const auto init = he_init(net, rng);
  c.lr = 0.0;
  const auto frozen = train(net, c, std::nullopt, src, {}, init);
  for (std::size_t l = 0; l < init.kernels.size(); ++l)
    CHECK(frozen.params.kernels[l].weights == init.kernels[l].weights);

  c.lr = 1e-3;
  Rng er(5);
  const auto ev = make_batch(er, 2, 16, 2);
  const auto a = train(net, c, AugmentConfig{}, src, ev);
  const auto b = train(net, c, AugmentConfig{}, src, ev);
  REQUIRE(a.history.size() == 6);
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].loss == b.history[i].loss);
  CHECK(a.history[2].eval_aee.has_value());
  CHECK(a.final_eval_aee == b.final_eval_aee);
  CHECK(history_csv(a.history).rfind("step,loss,lr,eval_aee\n", 0) == 0);

  const auto dir = std::filesystem::temp_directory_path() / "ddcnet_train_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  c.checkpoint_every = 3;
  c.checkpoint_dir = dir.string();
  train(net, c, std::nullopt, src, {});
  CHECK(std::filesystem::exists(dir / "ckpt_step3.ddcp"));
  CHECK(std::filesystem::exists(dir / "ckpt_step6.ddcp"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("plateau policy halves the learning rate") {
  const auto net = build_linear_schedule(1, 1, 2);
  Rng rng(3);
  std::vector<Sample> fixed = make_batch(rng, 1, 12, 0);
  DatasetSource src(fixed);
  TrainConfig c;
  c.lr = 1e-12;  // effectively flat loss: every window after the first is a plateau
  c.max_steps = 9;
  c.batch_size = 1;
  c.lr_window = 3;
  c.eval_every = 0;
  Rng r2(1);
  const auto init = he_init(net, r2);
  const auto res = train(net, c, std::nullopt, src, {}, init);
  CHECK(res.history[5].lr == doctest::Approx(1e-12));
  CHECK(res.history[6].lr == doctest::Approx(5e-13));
  CHECK(res.history[8].lr == doctest::Approx(5e-13));
}

TEST_CASE("train config parsing") {
  TrainConfig c;
  c.apply({{"batch_size", "2"}, {"lr", "0.01"}, {"frozen_layers", "1,3"}, {"seed", "42"}});
  CHECK(c.batch_size == 2);
  CHECK(c.lr == 0.01);
  CHECK(c.frozen_layers == std::set<int>{1, 3});
  CHECK(c.seed == 42u);
  CHECK_THROWS_AS(c.apply({{"bogus", "1"}}), TrainingError);
  CHECK_THROWS_AS(c.apply({{"lr", "abc"}}), TrainingError);
  c.batch_size = 0;
  CHECK_THROWS_AS(c.check(), TrainingError);
}
