#include <doctest.h>

#include <cmath>

#include "stldp/calibrate.hpp"
#include "stldp/errors.hpp"
#include "stldp/metrics.hpp"
#include "stldp/simharness.hpp"

using namespace stldp;

namespace {

Scenario straight_scenario(double v0) {
  Scenario sc;
  sc.id = "fixture";
  sc.ego = {0.0, 0.0, 0.0, v0};
  sc.demo.u = ControlMatrix::Zero(20, 2);
  return sc;
}

Planner constant_planner(Control c) {
  return [c](const SceneContext&, const StlParams&, Rng&) {
    ControlSeq u;
    u.u = ControlMatrix::Zero(20, 2);
    u.u.col(0).setConstant(c.w);
    u.u.col(1).setConstant(c.a);
    return std::vector<ControlSeq>{u};
  };
}

// Hardest braking that does not reverse.
Planner brake_planner() {
  return [](const SceneContext& c, const StlParams&, Rng&) {
    ControlSeq u;
    u.u = ControlMatrix::Zero(20, 2);
    u.u(0, 1) = -std::min(5.0, c.ego.v / c.dt);
    return std::vector<ControlSeq>{u};
  };
}

StlParams loose_gamma() { return {Mode::LaneKeep, 0.0, 20.0, 0.0, 0.0, 1.8, 1.0}; }

}  // namespace

TEST_CASE("family names round-trip") {
  for (Family f : {Family::Straight, Family::Curve, Family::Roundabout, Family::Hri})
    CHECK(parse_family(family_name(f)) == f);
  CHECK_THROWS_AS(parse_family("highway"), DataError);
}

TEST_CASE("generation is deterministic per seed") {
  for (Family f : {Family::Straight, Family::Curve, Family::Roundabout, Family::Hri}) {
    const auto a = generate_scenarios(f, 6, 99), b = generate_scenarios(f, 6, 99);
    const auto c = generate_scenarios(f, 6, 100);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(to_json(a[i]).dump() == to_json(b[i]).dump());
    CHECK(to_json(a[0]).dump() != to_json(c[0]).dump());
    // Scenario i does not depend on how many were requested.
    CHECK(to_json(generate_scenario(f, 99, 4)).dump() == to_json(a[4]).dump());
  }
}

TEST_CASE("lane windows have 15 waypoints with the ego near the fifth") {
  for (Family f : {Family::Straight, Family::Curve, Family::Roundabout}) {
    for (const Scenario& sc : generate_scenarios(f, 10, 3)) {
      const SceneContext c = sc.initial_context();
      REQUIRE(c.lane(kLaneCurrent).valid);
      CHECK(c.lane(kLaneCurrent).pts.size() == 15);
      double best = 1e9;
      int best_i = -1;
      for (int i = 0; i < kLanePoints; ++i) {
        const auto& p = c.lane(kLaneCurrent).pts[static_cast<std::size_t>(i)];
        const double d = std::hypot(p.x - c.ego.x, p.y - c.ego.y);
        if (d < best) best = d, best_i = i;
      }
      CHECK(best_i == kEgoWaypoint);
    }
  }
}

TEST_CASE("lane distances agree across replanning steps on tight arcs") {
  // Two poses in different windows of the same roundabout; the lane distance
  // of a fixed point must not depend on which window it is measured in.
  const Scenario sc = generate_scenario(Family::Roundabout, 5, 0);
  for (double step : {3.0, 7.0, 12.0}) {
    double s0 = 0.0, off = 0.0;
    sc.road.project(sc.ego.x, sc.ego.y, s0, off);
    const Waypoint a = sc.road.point(s0, 0.6), b = sc.road.point(s0 + step, 0.6);
    const SceneContext ca = sc.context_at({a.x, a.y, a.theta, 3.0}, 0.0);
    const SceneContext cb = sc.context_at({b.x, b.y, b.theta, 3.0}, 0.0);
    const EgoState probe{b.x, b.y, b.theta, 3.0};
    const double da = extract_channels(to_row(probe), ca).values(0, kDistLaneC);
    const double db = extract_channels(to_row(probe), cb).values(0, kDistLaneC);
    CHECK(std::abs(da - db) < 1e-9);
  }
}

TEST_CASE("demos are feasible for their labeled mode") {
  for (Family f : {Family::Straight, Family::Curve, Family::Roundabout}) {
    for (const Scenario& sc : generate_scenarios(f, 15, 8)) {
      const SceneContext c = sc.initial_context();
      const Mode m = static_cast<Mode>(sc.mode_label);
      CHECK(c.mode_feasible(m));
      const StateMatrix states = rollout(sc.ego, sc.demo).states;
      CHECK(stl::robustness(instantiate_template(calibrate_params(states, c, m), c, 20), extract_channels(states, c),
                            0) == doctest::Approx(0.0));
    }
  }
}

TEST_CASE("human-robot demos reach the goal without contact") {
  for (const Scenario& sc : generate_scenarios(Family::Hri, 20, 4)) {
    const stl::Signal s = extract_hri_channels(rollout(sc.hri.human, sc.demo).states, sc.hri);
    CHECK(s.values.col(kDistGoal).minCoeff() <= sc.hri.r_goal);
    CHECK(s.values.col(kDistRobot).minCoeff() > 0.0);
  }
}

TEST_CASE("replanning contexts show neighbors at their scripted poses") {
  const Scenario sc = generate_scenario(Family::Straight, 12, 0);
  REQUIRE_FALSE(sc.tracks.empty());
  for (int k = 0; k < 10; ++k) {
    const double time = k * sc.dt;
    const SceneContext c = sc.context_at(sc.ego, time);
    for (const Track& t : sc.tracks) {
      const Neighbor truth = t.at(sc.road, time);
      if (std::hypot(truth.x - sc.ego.x, truth.y - sc.ego.y) > kPerceptionRadius) continue;
      bool found = false;
      for (const Neighbor& n : c.neighbors) found = found || (n.valid && n.x == truth.x && n.y == truth.y);
      CHECK(found);
    }
  }
}

TEST_CASE("scenario records round-trip and reject other versions") {
  for (Family f : {Family::Curve, Family::Hri}) {
    const Scenario sc = generate_scenario(f, 5, 1);
    const auto j = to_json(sc);
    CHECK(to_json(scenario_from_json(j)).dump() == j.dump());
    auto bad = j;
    bad["version"] = kScenarioVersion + 1;
    CHECK_THROWS_AS(scenario_from_json(bad), DataError);
  }
  CHECK_THROWS_AS(scenario_from_json(nlohmann::json::object()), DataError);
}

TEST_CASE("argmax picks the lowest index on ties and ignores positive scaling") {
  CHECK(argmax_first({0.1, 0.3, 0.3, -1.0}) == 1);
  CHECK(argmax_first({-2.0}) == 0);
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> xs(64);
    for (double& x : xs) x = std::round(4.0 * n(rng)) / 4.0;  // coarse values force ties
    const int k = argmax_first(xs);
    for (double s : {0.01, 3.0, 1e6}) {
      std::vector<double> ys = xs;
      for (double& y : ys) y *= s;
      CHECK(argmax_first(ys) == k);
    }
  }
}

TEST_CASE("steady driving on an empty straight road covers v * time") {
  const Scenario sc = straight_scenario(5.0);
  ClosedLoopOptions opt;
  opt.max_steps = 16;
  const EpisodeLog log = run_closed_loop(sc, constant_planner({0.0, 0.0}), loose_gamma(), 1, opt);
  CHECK(log.termination == Termination::MaxSteps);
  CHECK(log.steps.size() == 16);
  CHECK(std::abs(closed_loop_metrics(log).progress - 40.0) < 0.1);
}

TEST_CASE("braking progress follows the discrete kinematics") {
  for (double v0 : {2.0, 6.0, 9.5}) {
    const EpisodeLog log = run_closed_loop(straight_scenario(v0), brake_planner(), loose_gamma(), 1);
    double v = v0, expect = 0.0;
    for (int k = 0; k < 40; ++k) {
      expect += v * 0.5;
      v -= std::min(5.0, v / 0.5) * 0.5;
    }
    const ClosedLoopMetrics m = closed_loop_metrics(log);
    CHECK(m.progress == doctest::Approx(expect).epsilon(1e-12));
    // Within one step's travel of the continuous stopping distance.
    CHECK(std::abs(m.progress - v0 * v0 / 10.0) <= 0.5 * v0 + 1e-12);
    CHECK(log.path.back().v == 0.0);
  }
}

TEST_CASE("head-on encounter ends in a collision") {
  Scenario sc = straight_scenario(5.0);
  sc.tracks.push_back({1, 30.0, -5.0, {}});
  const EpisodeLog log = run_closed_loop(sc, constant_planner({0.0, 0.0}), loose_gamma(), 1);
  CHECK(log.termination == Termination::Collision);
  CHECK(closed_loop_metrics(log).collision);
  // Circles touch when the 30 m gap has closed to 2 sqrt(5) at 10 m/s.
  CHECK(log.steps.size() == static_cast<std::size_t>(std::ceil((30.0 - 2 * std::sqrt(5.0)) / 5.0)));
}

TEST_CASE("steering off the road ends out of lane") {
  const EpisodeLog log = run_closed_loop(straight_scenario(8.0), constant_planner({0.5, 0.0}), loose_gamma(), 1);
  CHECK(log.termination == Termination::OutOfLane);
  CHECK(closed_loop_metrics(log).out_of_lane);
  CHECK(log.steps.size() < 40);
}

TEST_CASE("episodes are deterministic under a fixed seed") {
  const Scenario sc = generate_scenario(Family::Curve, 2, 3);
  const StlParams g =
      calibrate_params(rollout(sc.ego, sc.demo).states, sc.initial_context(), static_cast<Mode>(sc.mode_label));
  Planner random_plans = [](const SceneContext&, const StlParams&, Rng& rng) {
    std::vector<ControlSeq> out;
    std::uniform_real_distribution<double> w(-0.1, 0.1), a(-1.0, 1.0);
    for (int k = 0; k < 8; ++k) {
      ControlSeq u;
      u.u.resize(20, 2);
      for (int t = 0; t < 20; ++t) u.u(t, 0) = w(rng), u.u(t, 1) = a(rng);
      out.push_back(u);
    }
    return out;
  };
  auto dump = [&](std::uint64_t seed) {
    std::string s;
    for (const auto& st : run_closed_loop(sc, random_plans, g, seed).steps) s += to_json(st).dump() + "\n";
    return s;
  };
  CHECK(dump(4) == dump(4));
  CHECK(dump(4) != dump(5));
}
