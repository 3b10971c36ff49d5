#include <doctest.h>

#include <algorithm>

#include "../support/scenes.hpp"
#include "stldp/augment.hpp"
#include "stldp/errors.hpp"
#include "stldp/metrics.hpp"

using namespace stldp;
using namespace fixtures;

namespace {

StlParams loose_keep() { return {Mode::LaneKeep, 0.0, 10.0, 2.0, 0.0, 1.5, 1.0}; }

AugmentOptions small(int k, std::uint64_t seed) {
  AugmentOptions o;
  o.k = k;
  o.seed = seed;
  return o;
}

bool inside_box(const ControlMatrix& u, const ControlBox& box) {
  return (u.col(0).array() >= box.lo.w).all() && (u.col(0).array() <= box.hi.w).all() &&
         (u.col(1).array() >= box.lo.a).all() && (u.col(1).array() <= box.hi.a).all();
}

}  // namespace

TEST_CASE("an initial guess that already satisfies the rules is returned untouched") {
  SceneContext c = three_lane_road(5.0);
  c.ego.y = 0.4;
  ControlSeq u;
  u.u = ControlMatrix::Zero(20, 2);
  REQUIRE(rule_robustness(make_problem(c, loose_keep(), 20), u) == doctest::Approx(0.4));
  const TrajoptResult r = trajopt(c, loose_keep(), u, {});
  CHECK(r.iterations == 0);
  CHECK(r.u.u == u.u);
  CHECK(r.rho == doctest::Approx(0.4));
  CHECK(r.converged);
}

TEST_CASE("random restarts on an empty straight road almost always succeed") {
  const SceneContext c = three_lane_road(5.0);
  int ok = 0;
  for (int j = 0; j < 64; ++j) {
    Rng rng = stream_rng(17, static_cast<std::uint64_t>(j));
    const TrajoptResult r = trajopt(c, loose_keep(), uniform_controls(rng, 20, ControlBox{}), {});
    ok += r.rho >= 0.0;
    CHECK(r.iterations <= 500);
    CHECK(inside_box(r.u.u, ControlBox{}));
  }
  CHECK(ok >= 61);  // 95 % of 64
}

TEST_CASE("infeasible clearance is reported, not thrown") {
  SceneContext c = three_lane_road(5.0);
  c.neighbors[0] = car(12.0, 0.0);
  StlParams g = loose_keep();
  g.d_safe = 100.0;
  Rng rng(2);
  TrajoptOptions opt;
  opt.iters = 100;
  const TrajoptResult r = trajopt(c, g, uniform_controls(rng, 20, ControlBox{}), opt);
  CHECK(r.rho < 0.0);
  CHECK_FALSE(r.converged);
}

TEST_CASE("modes without a lane are skipped and listed") {
  SceneContext c = three_lane_road(5.0);
  c.lanes[kLaneLeft].valid = false;
  const auto recs = augment_scene(c, loose_keep(), small(4, 1));
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].gamma.mode == Mode::LaneKeep);
  CHECK(recs[1].gamma.mode == Mode::RightChange);
  CHECK(recs[0].skipped_modes == std::vector<std::string>{"left"});
  for (const auto& r : recs) CHECK(r.solutions.size() == 4);
}

TEST_CASE("records keep the scene and override only the mode") {
  SceneContext c = three_lane_road(6.0);
  StlParams g = loose_keep();
  g.v_max = 9.0;
  const auto recs = augment_scene(c, g, small(2, 4));
  REQUIRE(recs.size() == 3);
  for (int m = 0; m < 3; ++m) {
    StlParams expect = g;
    expect.mode = static_cast<Mode>(m);
    CHECK(recs[static_cast<std::size_t>(m)].gamma.as_array() == expect.as_array());
    CHECK(to_json(recs[static_cast<std::size_t>(m)].scene).dump() == to_json(c).dump());
  }
}

TEST_CASE("converged solutions re-evaluate to non-negative robustness inside the box") {
  SceneContext c = three_lane_road(5.0);
  c.neighbors[0] = car(25.0, 3.6, 0.0, 6.0);
  for (const auto& r : augment_scene(c, loose_keep(), small(8, 9))) {
    const RuleProblem p = r.problem(20);
    for (const Solution& s : r.solutions) {
      CHECK(inside_box(s.u.u, ControlBox{}));
      CHECK(rule_robustness(p, s.u) == s.rho);
      if (s.converged) CHECK(s.rho >= 0.0);
    }
    for (int i : r.valid_indices()) CHECK(r.solutions[static_cast<std::size_t>(i)].rho >= 0.0);
  }
}

TEST_CASE("augmentation is deterministic and independent of worker scheduling") {
  const SceneContext c = three_lane_road(5.0);
  auto dump = [&] {
    std::string s;
    for (const auto& r : augment_scene(c, loose_keep(), small(6, 12))) s += to_json(r).dump();
    return s;
  };
  const std::string a = dump();
  CHECK(a == dump());
  set_strict_order(true);
  CHECK(a == dump());
  set_strict_order(false);
}

TEST_CASE("restart order does not change the solution multiset") {
  const SceneContext c = three_lane_road(5.0);
  const auto recs = augment_scene(c, loose_keep(), small(6, 21));
  std::vector<double> forward;
  for (const Solution& s : recs[0].solutions) forward.push_back(s.rho);

  std::vector<double> reversed;
  const RuleProblem p = make_problem(c, loose_keep(), 20);
  for (int j = 5; j >= 0; --j) {
    Rng rng = stream_rng(21, c.id + "/keep/" + std::to_string(j));
    reversed.push_back(trajopt(p, uniform_controls(rng, 20, ControlBox{}), {}).rho);
  }
  std::sort(forward.begin(), forward.end());
  std::sort(reversed.begin(), reversed.end());
  CHECK(forward == reversed);
}

TEST_CASE("records round-trip through JSON and reject other versions") {
  const auto recs = augment_scene(three_lane_road(5.0), loose_keep(), small(3, 2));
  const auto j = to_json(recs[1]);
  const AugmentedRecord back = record_from_json(j);
  CHECK(to_json(back).dump() == j.dump());
  CHECK(back.valid_indices() == recs[1].valid_indices());

  auto bad = j;
  bad["version"] = kRecordVersion + 1;
  CHECK_THROWS_AS(record_from_json(bad), DataError);
  bad = j;
  bad.erase("solutions");
  CHECK_THROWS_AS(record_from_json(bad), DataError);
}

TEST_CASE("human-robot augmentation finds goal-reaching solutions") {
  HriScene h;
  h.id = "hri-fixture";
  h.human = {0.0, 0.0, 0.0, 1.0};
  h.goal_x = 9.0;
  h.robot.valid = true;
  h.robot.x = 5.0;
  h.robot.y = -6.0;
  h.robot.theta = 1.5707963267948966;
  h.robot.v = 1.0;
  const AugmentedRecord r = augment_hri(h, {0.5, 0.5}, small(8, 3));
  CHECK(r.kind == "hri");
  CHECK(r.solutions.size() == 8);
  CHECK_FALSE(r.valid_indices().empty());
  CHECK(to_json(record_from_json(to_json(r))).dump() == to_json(r).dump());
}
