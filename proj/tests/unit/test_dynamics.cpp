#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "../support/stl_fuzz.hpp"
#include "stldp/dynamics.hpp"

using namespace stldp;

namespace {

void check_state(const EgoState& s, double x, double y, double th, double v) {
  CHECK(s.x == doctest::Approx(x));
  CHECK(s.y == doctest::Approx(y));
  CHECK(s.theta == doctest::Approx(th));
  CHECK(s.v == doctest::Approx(v));
}

ControlSeq random_controls(std::mt19937_64& rng, int T) {
  std::uniform_real_distribution<double> w(-0.5, 0.5), a(-5.0, 5.0);
  ControlSeq u;
  u.u.resize(T, 2);
  for (int t = 0; t < T; ++t) u.u(t, 0) = w(rng), u.u(t, 1) = a(rng);
  return u;
}

}  // namespace

TEST_CASE("single Euler steps") {
  check_state(step({0, 0, 0, 1}, {0, 1}, 0.5), 0.5, 0, 0, 1.5);
  check_state(step({0, 0, std::numbers::pi / 2, 2}, {0, 0}, 0.5), 0, 1, std::numbers::pi / 2, 2);
  check_state(step({1, 1, 0, 0}, {0.5, 0}, 0.5), 1, 1, 0.25, 0);
}

TEST_CASE("rollouts") {
  ControlSeq u;
  u.u = ControlMatrix::Zero(2, 2);
  Trajectory tr = rollout({0, 0, 0, 1}, u);
  REQUIRE(tr.states.rows() == 3);
  CHECK(tr.states(1, 0) == doctest::Approx(0.5));
  CHECK(tr.states(2, 0) == doctest::Approx(1.0));

  ControlSeq one;
  one.u.resize(1, 2);
  one.u << 0, 5;
  check_state(rollout({0, 0, 0, 0}, one).state(1), 0, 0, 0, 2.5);

  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    ControlSeq r = random_controls(rng, 20);
    const EgoState s0{1.0, -2.0, 0.3, 4.0};
    Trajectory t = rollout(s0, r);
    check_state(t.state(0), s0.x, s0.y, s0.theta, s0.v);
    EgoState s = s0;
    for (int k = 0; k < 20; ++k) s = step(s, r.at(k), r.dt);
    CHECK(t.state(20).x == s.x);
    CHECK(t.state(20).y == s.y);
    CHECK(t.state(20).theta == s.theta);
    CHECK(t.state(20).v == s.v);
  }
}

TEST_CASE("clamping projects and is idempotent") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> wide(-20.0, 20.0);
  ControlBox box;
  ControlSeq u;
  u.u.resize(30, 2);
  for (Eigen::Index i = 0; i < u.u.size(); ++i) u.u.data()[i] = wide(rng);
  ControlSeq c = clamp(u, box);
  CHECK(c.u.col(0).maxCoeff() <= 0.5);
  CHECK(c.u.col(0).minCoeff() >= -0.5);
  CHECK(c.u.col(1).maxCoeff() <= 5.0);
  CHECK(c.u.col(1).minCoeff() >= -5.0);
  CHECK(clamp(c, box).u == c.u);
  ControlMatrix g = clamp_backward(u, box, ControlMatrix::Ones(30, 2));
  for (int t = 0; t < 30; ++t) {
    CHECK(g(t, 0) == (std::abs(u.u(t, 0)) > 0.5 ? 0.0 : 1.0));
    CHECK(g(t, 1) == (std::abs(u.u(t, 1)) > 5.0 ? 0.0 : 1.0));
  }
}

TEST_CASE("normalization round-trips") {
  ControlBox box;
  ControlMatrix u(2, 2);
  u << 0.5, -5.0, -0.25, 2.5;
  ControlMatrix z = normalize(u, box);
  CHECK(z(0, 0) == 1.0);
  CHECK(z(0, 1) == -1.0);
  CHECK(z(1, 0) == -0.5);
  CHECK(z(1, 1) == 0.5);
  CHECK((denormalize(z, box) - u).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("rollout gradient: closed forms") {
  const int T = 8;
  ControlSeq u;
  u.u = ControlMatrix::Zero(T, 2);
  StateMatrix cot = StateMatrix::Zero(T + 1, 4);
  cot(T, 0) = 1.0;
  ControlMatrix g = rollout_grad({0, 0, 0, 2}, u, cot);
  for (int t = 0; t < T; ++t) CHECK(g(t, 1) == doctest::Approx(u.dt * u.dt * (T - 1 - t)));

  StateMatrix th = StateMatrix::Zero(T + 1, 4);
  th(T, 2) = 1.0;
  g = rollout_grad({0, 0, 0, 2}, u, th);
  for (int t = 0; t < T; ++t) CHECK(g(t, 0) == doctest::Approx(u.dt));

  CHECK(rollout_grad({0, 0, 0, 2}, u, StateMatrix::Zero(T + 1, 4)).isZero());
}

TEST_CASE("rollout gradient matches central differences") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  const double h = 1e-5;
  for (int i = 0; i < 100; ++i) {
    const int T = 20;
    ControlSeq u = random_controls(rng, T);
    const EgoState s0{n(rng), n(rng), n(rng), 5.0 + n(rng)};
    StateMatrix cot(T + 1, 4);
    for (Eigen::Index k = 0; k < cot.size(); ++k) cot.data()[k] = n(rng);
    auto loss = [&](const ControlSeq& c) { return (rollout(s0, c).states.array() * cot.array()).sum(); };
    ControlMatrix g = rollout_grad(s0, u, cot);
    double worst = 0.0;
    for (int t = 0; t < T; ++t) {
      for (int j = 0; j < 2; ++j) {
        ControlSeq p = u, m = u;
        p.u(t, j) += h;
        m.u(t, j) -= h;
        worst = std::max(worst, fuzz::rel_err((loss(p) - loss(m)) / (2 * h), g(t, j)));
      }
    }
    CHECK(worst < 1e-4);
  }
}
