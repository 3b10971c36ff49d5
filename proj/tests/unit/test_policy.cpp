#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>

#include "../support/scenes.hpp"
#include "../support/stl_fuzz.hpp"
#include "stldp/errors.hpp"
#include "stldp/policy.hpp"

using namespace stldp;
using namespace fixtures;
namespace P = stldp::policy;

namespace {

P::PolicyConfig small_config() {
  P::PolicyConfig cfg;
  cfg.d = 8;
  cfg.hidden = 32;
  cfg.diffusion_steps = 20;
  return cfg;
}

SceneContext busy_road() {
  SceneContext c = three_lane_road(6.0);
  c.ego = {0.3, -0.2, 0.05, 6.0};
  c.neighbors[0] = car(20.0, 0.1, 0.0, 7.0);
  c.neighbors[2] = car(-14.0, 3.5, 0.02, 4.0);
  c.neighbors[5] = car(31.0, -3.7, -0.01, 8.5);
  c.neighbors[6] = car(9.0, 3.7, 0.0, 5.0);
  return c;
}

StlParams keep_gamma() { return {Mode::LaneKeep, 4.0, 9.0, 1.0, 0.0, 1.2, 0.3}; }

AugmentedRecord single_solution_record(const ControlMatrix& u) {
  AugmentedRecord r;
  r.scene_id = "toy";
  r.scene = three_lane_road(5.0);
  r.gamma = keep_gamma();
  Solution s;
  s.u.u = u;
  s.rho = 0.1;
  s.converged = true;
  r.solutions.push_back(s);
  return r;
}

// Expected cardinality through the eigenvalues: sum lambda / (1 + lambda).
double eig_cardinality(const Eigen::MatrixXd& k) {
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(k).eigenvalues();
  return (ev.array() / (1.0 + ev.array())).sum();
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

bool same_params(const P::PolicyModel& a, const P::PolicyModel& b) {
  const auto pa = a.all_params(), pb = b.all_params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->value != pb[i]->value) return false;
  return true;
}

}  // namespace

TEST_CASE("cosine schedule") {
  const P::Schedule sc = P::Schedule::cosine(100);
  auto f = [](double t) {
    const double c = std::cos((t / 100.0 + 0.008) / 1.008 * std::numbers::pi / 2.0);
    return c * c;
  };
  CHECK(sc.alpha_bar[100] < 0.01);
  CHECK(sc.sigma[1] == 0.0);
  CHECK(sc.noise_std(1) == 0.0);
  for (int t = 1; t <= 100; ++t) {
    CHECK(sc.alpha_bar[t] < sc.alpha_bar[t - 1]);
    CHECK(sc.alpha[t] >= 0.001);
    CHECK(sc.alpha[t] <= 0.999);
    if (t >= 2) CHECK(sc.sigma[t] == 1.0);
  }
  // The first step clips at 0.999; the next ones are plain ratios of f.
  CHECK(sc.alpha[1] == 0.999);
  for (int t = 2; t <= 90; ++t) CHECK(std::abs(sc.alpha[t] - f(t) / f(t - 1)) < 1e-12);
  double prod = 1.0;
  for (int t = 1; t <= 100; ++t) prod *= std::clamp(f(t) / f(t - 1), 0.001, 0.999);
  CHECK(std::abs(sc.alpha_bar[100] - prod) < 1e-15);

  const P::Schedule unit = P::Schedule::cosine(100, 0.008, 0.001, 0.999, P::NoiseMode::Unit);
  CHECK(unit.noise_std(2) == 1.0);
  CHECK(sc.noise_std(2) < 0.1);
  CHECK(P::parse_noise_mode(P::noise_mode_name(P::NoiseMode::Unit)) == P::NoiseMode::Unit);
  CHECK_THROWS(P::Schedule::cosine(0));
}

TEST_CASE("latent layout interleaves normalized controls") {
  ControlMatrix u(3, 2);
  u << 0.25, -5.0, -0.5, 2.5, 0.0, 5.0;
  const Eigen::VectorXd z = P::to_latent(u, ControlBox{});
  Eigen::VectorXd expect(6);
  expect << 0.5, -1.0, -1.0, 0.5, 0.0, 1.0;
  CHECK((z - expect).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((P::from_latent(z, ControlBox{}, 0.5).u - u).cwiseAbs().maxCoeff() < 1e-15);
  Eigen::VectorXd wide(2);
  wide << 1.7, -3.0;
  CHECK(P::clamp_latent(wide) == Eigen::Vector2d(1.0, -1.0));
}

TEST_CASE("encoder ignores neighbor slot order") {
  const P::PolicyModel m(small_config(), 3);
  const SceneContext c = busy_road();
  const Eigen::VectorXd z = P::encode(m, c);
  CHECK(z.size() == 7 * 8);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    SceneContext shuffled = c;
    std::shuffle(shuffled.neighbors.begin(), shuffled.neighbors.end(), rng);
    CHECK(P::encode(m, shuffled) == z);
  }
}

TEST_CASE("encoder is invariant to rigid motions of the whole scene") {
  const P::PolicyModel m(small_config(), 3);
  const SceneContext c = busy_road();
  const Eigen::VectorXd z = P::encode(m, c);
  Rng rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Rigid r{100.0 * u(rng), 100.0 * u(rng), std::numbers::pi * u(rng)};
    CHECK((P::encode(m, transform(c, r)) - z).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("scenes without neighbors still encode") {
  const P::PolicyModel m(small_config(), 3);
  SceneContext c = three_lane_road();
  const Eigen::VectorXd z = P::encode(m, c);
  CHECK(z.allFinite());
  c.neighbors[3] = car(15.0, 0.0);
  CHECK(P::encode(m, c) != z);
}

TEST_CASE("encoder gradients match central differences through pooling") {
  P::PolicyModel m(small_config(), 8);
  const SceneContext a = busy_road();
  SceneContext b = three_lane_road(4.0);
  b.neighbors[1] = car(12.0, 0.4, 0.1, 3.0);
  const P::SceneFeatures fa = P::scene_features(a), fb = P::scene_features(b);
  const std::vector<const P::SceneFeatures*> batch{&fa, &fb};
  Rng rng(9);
  const Eigen::MatrixXd c = random_matrix(rng, 7 * 8, 2);
  auto loss = [&] { return (P::encode(m, batch).array() * c.array()).sum(); };

  P::EncoderTape tape;
  P::encode(m, batch, &tape);
  nn::zero_grad(m.encoder_params());
  P::encode_backward(m, tape, c);

  const double h = 1e-6;
  double worst = 0.0;
  for (nn::ParamTensor* p : m.encoder_params()) {
    for (Eigen::Index i = 0; i < p->value.size(); i += std::max<Eigen::Index>(1, p->value.size() / 40)) {
      const double v = p->value.data()[i];
      p->value.data()[i] = v + h;
      const double lp = loss();
      p->value.data()[i] = v - h;
      const double lm = loss();
      p->value.data()[i] = v;
      worst = std::max(worst, fuzz::rel_err(p->grad.data()[i], (lp - lm) / (2 * h)));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("DPP fixtures against the eigenvalue oracle") {
  Eigen::MatrixXd same(2, 3);
  same << 1.0, 2.0, 3.0, 1.0, 2.0, 3.0;
  const Eigen::MatrixXd k_same = P::dpp_kernel(same, Eigen::Vector2d(1.0, 1.0), 1.0);
  CHECK(std::abs(P::expected_cardinality(k_same) - 2.0 / 3.0) <= 1e-9);
  CHECK(std::abs(eig_cardinality(k_same) - 2.0 / 3.0) <= 1e-9);

  Eigen::MatrixXd far(2, 3);
  far << 0.0, 0.0, 0.0, 1e3, 0.0, 0.0;
  const Eigen::MatrixXd k_far = P::dpp_kernel(far, Eigen::Vector2d(1.0, 1.0), 1.0);
  CHECK(std::abs(P::expected_cardinality(k_far) - 1.0) <= 1e-9);
  CHECK(std::abs(eig_cardinality(k_far) - 1.0) <= 1e-9);

  const Eigen::MatrixXd k_none = P::dpp_kernel(far, Eigen::Vector2d(0.0, 0.0), 1.0);
  CHECK(P::expected_cardinality(k_none) == 0.0);
  CHECK(P::dpp_loss(same, Eigen::Vector2d(1.0, 1.0), 1.0).loss == doctest::Approx(-2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("kernel is symmetric PSD and cardinality stays in [0, N/2]") {
  Rng rng(12);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 15);
    const Eigen::MatrixXd tau = random_matrix(rng, n, 12, 2.0);
    Eigen::VectorXd q(n);
    for (int i = 0; i < n; ++i) q[i] = u01(rng);
    const double ell = P::median_pairwise_distance(tau) * (0.2 + u01(rng));
    const Eigen::MatrixXd k = P::dpp_kernel(tau, q, ell);
    CHECK(k == k.transpose());
    CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(k).eigenvalues().minCoeff() >= -1e-9);
    const double e = P::expected_cardinality(k);
    CHECK(e >= 0.0);
    CHECK(e <= n / 2.0 + 1e-12);
    CHECK(std::abs(e - eig_cardinality(k)) < 1e-9);
  }
}

TEST_CASE("median pairwise distance") {
  Eigen::MatrixXd pts(3, 1);
  pts << 0.0, 1.0, 3.0;  // distances 1, 2, 3
  CHECK(P::median_pairwise_distance(pts) == 2.0);
  CHECK(P::median_pairwise_distance(Eigen::MatrixXd::Zero(4, 2)) == 1.0);
}

TEST_CASE("DPP loss gradients match central differences") {
  Rng rng(13);
  std::uniform_real_distribution<double> u01(0.05, 0.95);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 6);
    Eigen::MatrixXd tau = random_matrix(rng, n, 5);
    Eigen::VectorXd q(n);
    for (int i = 0; i < n; ++i) q[i] = u01(rng);
    const double ell = P::median_pairwise_distance(tau);
    const P::DppLoss g = P::dpp_loss(tau, q, ell);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < tau.size(); ++i) {
      const double v = tau.data()[i];
      tau.data()[i] = v + h;
      const double lp = P::dpp_loss(tau, q, ell).loss;
      tau.data()[i] = v - h;
      const double lm = P::dpp_loss(tau, q, ell).loss;
      tau.data()[i] = v;
      worst = std::max(worst, fuzz::rel_err(g.dtau.data()[i], (lp - lm) / (2 * h)));
    }
    for (int i = 0; i < n; ++i) {
      const double v = q[i];
      q[i] = v + h;
      const double lp = P::dpp_loss(tau, q, ell).loss;
      q[i] = v - h;
      const double lm = P::dpp_loss(tau, q, ell).loss;
      q[i] = v;
      worst = std::max(worst, fuzz::rel_err(g.dq[i], (lp - lm) / (2 * h)));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("gate passes satisfying candidates through bit-exactly") {
  P::PolicyModel m(small_config(), 2);
  Rng rng(14);
  // A refinement net that would move everything.
  for (nn::ParamTensor* p : m.refine_params()) p->value = random_matrix(rng, p->value.rows(), p->value.cols());
  const Eigen::VectorXd z = P::encode(m, busy_road()), g = P::gamma_vector(keep_gamma());
  const Eigen::MatrixXd latent = random_matrix(rng, 40, 6, 0.5).cwiseMax(-1.0).cwiseMin(1.0);
  const std::vector<double> rho{0.2, -0.1, 0.0, -3.0, 1e-12, -1e-12};
  const Eigen::MatrixXd out = P::refine_latents(m, z, g, latent, rho);
  for (int j = 0; j < 6; ++j) {
    if (rho[static_cast<std::size_t>(j)] >= 0.0) {
      CHECK(out.col(j) == latent.col(j));
    } else {
      CHECK(out.col(j) != latent.col(j));
      CHECK(out.col(j).cwiseAbs().maxCoeff() <= 1.0);
    }
  }
}

TEST_CASE("a fresh refinement net leaves candidates unchanged") {
  const P::PolicyModel m(small_config(), 2);
  Rng rng(15);
  const Eigen::MatrixXd latent = random_matrix(rng, 40, 4, 0.5).cwiseMax(-1.0).cwiseMin(1.0);
  const Eigen::MatrixXd out = P::refine_latents(m, P::encode(m, busy_road()), P::gamma_vector(keep_gamma()), latent,
                                                {-1.0, -1.0, -1.0, -1.0});
  CHECK(out == latent);
}

TEST_CASE("plans obey the gate") {
  P::PolicyModel m(small_config(), 2);
  Rng init(16);
  for (nn::ParamTensor* p : m.refine_params()) p->value = random_matrix(init, p->value.rows(), p->value.cols(), 0.1);
  P::PlanOptions opt;
  opt.samples = 32;
  Rng rng(17);
  const auto samples = P::plan(m, busy_road(), keep_gamma(), rng, opt);
  REQUIRE(samples.size() == 32);
  for (const P::PlanSample& s : samples) {
    if (s.rho_d >= 0.0) {
      CHECK(s.u.u == s.u_d.u);
      CHECK_FALSE(s.refined);
      CHECK(s.rho == s.rho_d);
    } else {
      CHECK(s.refined);
    }
  }
}

TEST_CASE("bank selection takes the best candidate, latest on ties") {
  CHECK(P::select_from_bank({-1.0, 0.5, 0.2, 0.5, -0.3}) == 3);
  CHECK(P::select_from_bank({0.0, 0.0, 0.0, 0.0, 0.0}) == 4);
  CHECK(P::select_from_bank({2.0, 1.0, 0.0, -1.0, -2.0}) == 0);
}

TEST_CASE("guided refinement never lowers smooth robustness") {
  const P::PolicyConfig cfg;
  Rng rng(18);
  const SceneContext c = busy_road();
  const RuleProblem p = make_problem(c, keep_gamma(), 20);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd latent = random_matrix(rng, 40, 1, 0.4);
    const ControlSeq start = clamp(P::from_latent(latent, cfg.box, 0.5), cfg.box);
    P::GuidanceOptions g;
    g.mode = P::Guidance::LastK;
    const std::vector<double> acc = P::guide_latent(latent, p, cfg, g);
    CHECK(acc.front() == rule_smooth_gradient(p, start, 50.0).smooth);
    for (std::size_t i = 1; i < acc.size(); ++i) CHECK(acc[i] > acc[i - 1]);
    CHECK(acc.size() <= 11);
    const ControlSeq u = clamp(P::from_latent(latent, cfg.box, 0.5), cfg.box);
    CHECK(rule_smooth_gradient(p, u, 50.0).smooth == doctest::Approx(acc.back()).epsilon(1e-12));
  }
}

TEST_CASE("sampling is reproducible and counts guided evaluations") {
  const P::PolicyModel m(small_config(), 4);
  const SceneContext c = busy_road();
  const RuleProblem p = make_problem(c, keep_gamma(), 20);
  const Eigen::VectorXd z = P::encode(m, c), g = P::gamma_vector(keep_gamma());
  Rng r1(7), r2(7), r3(8);
  const P::DenoiseOutput a = P::denoise(m, z, g, 5, r1), b = P::denoise(m, z, g, 5, r2), d = P::denoise(m, z, g, 5, r3);
  CHECK(a.latent == b.latent);
  CHECK(a.latent != d.latent);
  REQUIRE(a.bank.size() == 5);
  CHECK(a.bank.back() == a.latent);
  CHECK(a.guided_evaluations == 0);

  P::GuidanceOptions last;
  last.mode = P::Guidance::LastK;
  Rng r4(7);
  CHECK(P::denoise(m, z, g, 5, r4, last, &p).guided_evaluations == 5 * 5 * 11);
  P::GuidanceOptions every = last;
  every.mode = P::Guidance::EveryStep;
  Rng r5(7);
  CHECK(P::denoise(m, z, g, 5, r5, every, &p).guided_evaluations == 5 * 20 * 11);
  Rng r6(7);
  CHECK_THROWS_AS(P::denoise(m, z, g, 5, r6, last, nullptr), std::invalid_argument);

  for (P::Guidance mode : {P::Guidance::Off, P::Guidance::LastK, P::Guidance::EveryStep})
    CHECK(P::parse_guidance(P::guidance_name(mode)) == mode);
  CHECK_THROWS(P::parse_guidance("sometimes"));
}

TEST_CASE("DDPM fit to a single solution concentrates samples as the loss falls") {
  ControlMatrix u(20, 2);
  for (int t = 0; t < 20; ++t) u.row(t) << 0.2 * std::sin(0.3 * t), 2.0 * std::cos(0.2 * t);
  const std::vector<AugmentedRecord> data{single_solution_record(u)};
  const Eigen::VectorXd target = P::to_latent(u, ControlBox{});

  P::PolicyConfig cfg = small_config();
  cfg.hidden = 128;  // the noise map is multiplicative in t; narrow nets plateau
  P::PolicyModel m(cfg, 21);
  const Eigen::VectorXd g = P::gamma_vector(data[0].gamma);
  std::vector<double> losses, spreads;
  for (int round = 0; round < 8; ++round) {
    P::DdpmTrainOptions opt;
    opt.epochs = 500;  // one step per epoch on a single item
    opt.batch = 64;
    opt.lr = 1e-3;
    opt.seed = static_cast<std::uint64_t>(round);
    const auto log = P::train_ddpm(m, data, opt);
    double tail = 0.0;
    for (std::size_t i = log.size() - 50; i < log.size(); ++i) tail += log[i].loss / 50.0;
    losses.push_back(tail);
    Rng rng(99);
    const Eigen::MatrixXd x = P::denoise(m, P::encode(m, data[0].scene), g, 32, rng).latent;
    spreads.push_back(std::sqrt((x.colwise() - target).squaredNorm() / x.size()));
  }
  MESSAGE("loss " << losses.front() << " -> " << losses.back() << ", rms " << spreads.front() << " -> "
                  << spreads.back());
  auto half_mean = [](const std::vector<double>& v, bool second) {
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) s += v[second ? i + 4 : i];
    return s / 4.0;
  };
  CHECK(losses.back() < losses.front());
  CHECK(half_mean(spreads, true) < half_mean(spreads, false));
  CHECK(spreads.back() < 0.2);
}

TEST_CASE("training is deterministic per seed") {
  ControlMatrix u = ControlMatrix::Zero(20, 2);
  u.col(1).setConstant(1.0);
  std::vector<AugmentedRecord> data{single_solution_record(u)};
  ControlMatrix u2 = u;
  u2.col(0).setConstant(-0.1);
  data[0].solutions.push_back(data[0].solutions[0]);
  data[0].solutions[1].u.u = u2;

  auto run = [&](std::uint64_t seed) {
    P::PolicyModel m(small_config(), 1);
    P::DdpmTrainOptions opt;
    opt.epochs = 3;
    opt.seed = seed;
    P::train_ddpm(m, data, opt);
    return m;
  };
  const P::PolicyModel a = run(5), b = run(5), c = run(6);
  CHECK(same_params(a, b));
  CHECK_FALSE(same_params(a, c));

  auto refine = [&](std::uint64_t seed) {
    P::PolicyModel m = a;
    P::RefineTrainOptions opt;
    opt.epochs = 2;
    opt.pool = 8;
    opt.samples_per_scene = 4;
    opt.seed = seed;
    const auto log = P::train_refine(m, data, opt);
    CHECK(log.size() == 2);
    for (const auto& e : log) CHECK(std::isfinite(e.loss));
    return m;
  };
  const P::PolicyModel r1 = refine(2), r2 = refine(2);
  CHECK(same_params(r1, r2));
  // Only the refinement net moves.
  const auto pa = a.all_params(), pr = r1.all_params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i]->name.rfind("g_r.", 0) != 0) CHECK(pa[i]->value == pr[i]->value);
  }
}

TEST_CASE("training without valid solutions is a data error") {
  AugmentedRecord r = single_solution_record(ControlMatrix::Zero(20, 2));
  r.solutions[0].rho = -0.5;
  r.solutions[0].converged = false;
  P::PolicyModel m(small_config(), 1);
  CHECK_THROWS_AS(P::train_ddpm(m, {r}, {}), DataError);
}

TEST_CASE("model checkpoints reproduce samples") {
  P::PolicyModel m(small_config(), 30);
  Rng init(31);
  for (nn::ParamTensor* p : m.refine_params()) p->value = random_matrix(init, p->value.rows(), p->value.cols(), 0.1);
  const std::string path = (std::filesystem::temp_directory_path() / "stldp_policy.ckpt").string();
  m.save(path, {{"stage", "refine"}});
  nlohmann::json meta;
  const P::PolicyModel back = P::PolicyModel::load(path, &meta);
  std::filesystem::remove(path);
  CHECK(meta.at("stage") == "refine");
  CHECK(back.cfg.to_json() == m.cfg.to_json());
  CHECK(same_params(m, back));

  P::PlanOptions opt;
  opt.samples = 6;
  Rng r1(3), r2(3);
  const auto a = P::plan(m, busy_road(), keep_gamma(), r1, opt);
  const auto b = P::plan(back, busy_road(), keep_gamma(), r2, opt);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].u.u == b[i].u.u);
}
