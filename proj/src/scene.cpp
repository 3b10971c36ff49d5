#include "stldp/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "stldp/errors.hpp"

namespace stldp {

using nlohmann::json;

double VehicleDims::half_diagonal() const { return 0.5 * std::sqrt(length * length + width * width); }

Neighbor Neighbor::advanced(double seconds) const {
  Neighbor n = *this;
  n.x += v * std::cos(theta) * seconds;
  n.y += v * std::sin(theta) * seconds;
  return n;
}

bool SceneContext::mode_feasible(Mode m) const {
  switch (m) {
    case Mode::LaneKeep: return true;
    case Mode::LeftChange: return lane(kLaneLeft).valid;
    case Mode::RightChange: return lane(kLaneRight).valid;
  }
  return false;
}

std::array<double, 7> StlParams::as_array() const {
  return {static_cast<double>(static_cast<int>(mode)), v_min, v_max, d_safe, d_min, d_max, theta_max};
}

StlParams StlParams::from_array(const std::array<double, 7>& g) {
  const int m = static_cast<int>(std::lround(g[0]));
  if (m < 0 || m > 2) throw DataError("driving mode must be 0, 1 or 2");
  StlParams p;
  p.mode = static_cast<Mode>(m);
  p.v_min = g[1];
  p.v_max = g[2];
  p.d_safe = g[3];
  p.d_min = g[4];
  p.d_max = g[5];
  p.theta_max = g[6];
  return p;
}

void StlParams::validate() const {
  if (v_min > v_max) throw DataError("v_min exceeds v_max");
  if (d_min > d_max) throw DataError("d_min exceeds d_max");
  if (d_safe < 0 || d_min < 0 || d_max < 0) throw DataError("distance parameters must be non-negative");
  if (theta_max < 0) throw DataError("theta_max must be non-negative");
}

// ---------------------------------------------------------------------------
// Frames

double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::fmod(a + pi, 2.0 * pi);
  if (a <= 0.0) a += 2.0 * pi;
  return a - pi;
}

namespace {

void apply(const Rigid& r, double& x, double& y) {
  const double c = std::cos(r.rotation), s = std::sin(r.rotation);
  const double nx = c * x - s * y + r.tx;
  const double ny = s * x + c * y + r.ty;
  x = nx;
  y = ny;
}

}  // namespace

SceneContext transform(const SceneContext& c, const Rigid& r) {
  SceneContext out = c;
  apply(r, out.ego.x, out.ego.y);
  out.ego.theta += r.rotation;
  for (auto& lane : out.lanes) {
    if (!lane.valid) continue;
    for (auto& p : lane.pts) {
      apply(r, p.x, p.y);
      p.theta = wrap_angle(p.theta + r.rotation);
    }
  }
  for (auto& n : out.neighbors) {
    if (!n.valid) continue;
    apply(r, n.x, n.y);
    n.theta = wrap_angle(n.theta + r.rotation);
  }
  return out;
}

StateMatrix transform(const StateMatrix& states, const Rigid& r) {
  StateMatrix out = states;
  for (Eigen::Index t = 0; t < out.rows(); ++t) {
    apply(r, out(t, 0), out(t, 1));
    out(t, 2) += r.rotation;
  }
  return out;
}

Rigid ego_frame(const EgoState& ego) {
  const double c = std::cos(-ego.theta), s = std::sin(-ego.theta);
  return {-(c * ego.x - s * ego.y), -(s * ego.x + c * ego.y), -ego.theta};
}

SceneContext to_ego_frame(const SceneContext& c) {
  SceneContext out = transform(c, ego_frame(c.ego));
  out.ego.x = 0.0;
  out.ego.y = 0.0;
  out.ego.theta = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Geometry

namespace {

struct SegmentHit {
  double dist = std::numeric_limits<double>::infinity();
  double qx = 0.0, qy = 0.0;  // closest point
  int segment = 0;
};

SegmentHit nearest_on_lane(const Lane& lane, double x, double y) {
  SegmentHit best;
  for (int i = 0; i + 1 < kLanePoints; ++i) {
    const Waypoint& a = lane.pts[i];
    const Waypoint& b = lane.pts[i + 1];
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double u = len2 > 0.0 ? ((x - a.x) * dx + (y - a.y) * dy) / len2 : 0.0;
    const double lo = i == 0 ? -std::numeric_limits<double>::infinity() : 0.0;
    const double hi = i + 2 == kLanePoints ? std::numeric_limits<double>::infinity() : 1.0;
    u = std::clamp(u, lo, hi);
    const double qx = a.x + u * dx, qy = a.y + u * dy;
    const double d = std::hypot(x - qx, y - qy);
    if (d < best.dist) {
      best.dist = d;
      best.qx = qx;
      best.qy = qy;
      best.segment = i;
    }
  }
  return best;
}

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

double lane_distance(const Lane& lane, double x, double y, int* segment) {
  const SegmentHit h = nearest_on_lane(lane, x, y);
  if (segment) *segment = h.segment;
  return h.dist;
}

double lane_heading(const Lane& lane, int segment) {
  const Waypoint& a = lane.pts[segment];
  const Waypoint& b = lane.pts[segment + 1];
  return std::atan2(b.y - a.y, b.x - a.x);
}

const stl::SchemaPtr& driving_schema() {
  static const stl::SchemaPtr schema = std::make_shared<const stl::Schema>(std::vector<stl::ChannelDecl>{
      {"speed", "m/s"},
      {"dist_nei", "m"},
      {"dist_lane_c", "m"},
      {"dist_lane_l", "m"},
      {"dist_lane_r", "m"},
      {"angle_lane_c", "rad"},
      {"angle_lane_l", "rad"},
      {"angle_lane_r", "rad"},
  });
  return schema;
}

stl::Signal extract_channels(const StateMatrix& states, const SceneContext& c) {
  const Eigen::Index n = states.rows();
  stl::Signal s;
  s.schema = driving_schema();
  s.dt = c.dt;
  s.values = Eigen::MatrixXd::Zero(n, kDrivingChannels);
  const double ego_r = c.ego_dims.half_diagonal();
  for (Eigen::Index t = 0; t < n; ++t) {
    const double x = states(t, 0), y = states(t, 1), th = states(t, 2);
    s.values(t, kSpeed) = states(t, 3);
    double dn = kNoNeighborDistance;
    for (const Neighbor& nb : c.neighbors) {
      if (!nb.valid) continue;
      const Neighbor p = nb.advanced(static_cast<double>(t) * c.dt);
      dn = std::min(dn, std::hypot(x - p.x, y - p.y) - ego_r - nb.dims.half_diagonal());
    }
    s.values(t, kDistNei) = dn;
    for (int l = 0; l < 3; ++l) {
      const Lane& lane = c.lanes[l];
      if (!lane.valid) continue;
      const SegmentHit h = nearest_on_lane(lane, x, y);
      s.values(t, kDistLaneC + l) = h.dist;
      s.values(t, kAngleLaneC + l) = std::abs(wrap_angle(th - lane_heading(lane, h.segment)));
    }
  }
  return s;
}

StateMatrix extract_channels_backward(const StateMatrix& states, const SceneContext& c,
                                      const Eigen::MatrixXd& cot) {
  const Eigen::Index n = states.rows();
  StateMatrix g = StateMatrix::Zero(n, 4);
  const double ego_r = c.ego_dims.half_diagonal();
  for (Eigen::Index t = 0; t < n; ++t) {
    const double x = states(t, 0), y = states(t, 1), th = states(t, 2);
    g(t, 3) += cot(t, kSpeed);
    if (cot(t, kDistNei) != 0.0) {
      double dn = kNoNeighborDistance;
      double gx = 0.0, gy = 0.0;
      for (const Neighbor& nb : c.neighbors) {
        if (!nb.valid) continue;
        const Neighbor p = nb.advanced(static_cast<double>(t) * c.dt);
        const double r = std::hypot(x - p.x, y - p.y);
        const double d = r - ego_r - nb.dims.half_diagonal();
        if (d < dn) {
          dn = d;
          gx = r > 0.0 ? (x - p.x) / r : 0.0;
          gy = r > 0.0 ? (y - p.y) / r : 0.0;
        }
      }
      g(t, 0) += cot(t, kDistNei) * gx;
      g(t, 1) += cot(t, kDistNei) * gy;
    }
    for (int l = 0; l < 3; ++l) {
      const Lane& lane = c.lanes[l];
      const double cd = cot(t, kDistLaneC + l), ca = cot(t, kAngleLaneC + l);
      if (!lane.valid || (cd == 0.0 && ca == 0.0)) continue;
      const SegmentHit h = nearest_on_lane(lane, x, y);
      if (h.dist > 0.0) {
        g(t, 0) += cd * (x - h.qx) / h.dist;
        g(t, 1) += cd * (y - h.qy) / h.dist;
      }
      g(t, 2) += ca * sign_of(wrap_angle(th - lane_heading(lane, h.segment)));
    }
  }
  return g;
}

stl::Formula instantiate_template(const StlParams& g, const SceneContext& c, int horizon) {
  using namespace stl;
  const Schema& sc = *driving_schema();
  const Interval all{0, horizon};
  auto name = [&](int ch) { return sc[static_cast<std::size_t>(ch)].name; };
  auto box = [&](int ch, double lo, double hi) { return within(static_cast<std::size_t>(ch), name(ch), lo, hi); };
  auto below = [&](int ch, double hi) { return atom(static_cast<std::size_t>(ch), name(ch), Cmp::Le, hi); };

  std::vector<Formula> parts;
  parts.push_back(always(all, box(kSpeed, g.v_min, g.v_max)));
  parts.push_back(always(all, atom(kDistNei, name(kDistNei), Cmp::Ge, g.d_safe)));
  switch (g.mode) {
    case Mode::LaneKeep:
      if (c.lane(kLaneCurrent).valid) {
        parts.push_back(always(all, box(kDistLaneC, g.d_min, g.d_max)));
        parts.push_back(always(all, below(kAngleLaneC, g.theta_max)));
      }
      break;
    case Mode::LeftChange:
    case Mode::RightChange: {
      const bool left = g.mode == Mode::LeftChange;
      if (!c.mode_feasible(g.mode)) {
        throw DataError(std::string("scene '") + c.id + "': mode " + (left ? "1" : "2") + " requires a valid " +
                        (left ? "left" : "right") + " lane");
      }
      const int dist_ch = left ? kDistLaneL : kDistLaneR;
      const int angle_ch = left ? kAngleLaneL : kAngleLaneR;
      parts.push_back(eventually(all, always(all, box(dist_ch, g.d_min, g.d_max))));
      parts.push_back(eventually(all, always(all, below(angle_ch, g.theta_max))));
      break;
    }
  }
  return conj(std::move(parts));
}

// ---------------------------------------------------------------------------
// Human-robot encounter

const stl::SchemaPtr& hri_schema() {
  static const stl::SchemaPtr schema = std::make_shared<const stl::Schema>(
      std::vector<stl::ChannelDecl>{{"dist_robot", "m"}, {"dist_goal", "m"}});
  return schema;
}

stl::Signal extract_hri_channels(const StateMatrix& states, const HriScene& c) {
  const Eigen::Index n = states.rows();
  stl::Signal s;
  s.schema = hri_schema();
  s.dt = c.dt;
  s.values.resize(n, kHriChannels);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Neighbor r = c.robot.advanced(static_cast<double>(t) * c.dt);
    s.values(t, kDistRobot) =
        std::hypot(states(t, 0) - r.x, states(t, 1) - r.y) - c.human_radius - c.robot_radius;
    s.values(t, kDistGoal) = std::hypot(states(t, 0) - c.goal_x, states(t, 1) - c.goal_y);
  }
  return s;
}

StateMatrix extract_hri_channels_backward(const StateMatrix& states, const HriScene& c,
                                          const Eigen::MatrixXd& cot) {
  const Eigen::Index n = states.rows();
  StateMatrix g = StateMatrix::Zero(n, 4);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Neighbor r = c.robot.advanced(static_cast<double>(t) * c.dt);
    const double rx = states(t, 0) - r.x, ry = states(t, 1) - r.y;
    const double rd = std::hypot(rx, ry);
    if (rd > 0.0) {
      g(t, 0) += cot(t, kDistRobot) * rx / rd;
      g(t, 1) += cot(t, kDistRobot) * ry / rd;
    }
    const double gx = states(t, 0) - c.goal_x, gy = states(t, 1) - c.goal_y;
    const double gd = std::hypot(gx, gy);
    if (gd > 0.0) {
      g(t, 0) += cot(t, kDistGoal) * gx / gd;
      g(t, 1) += cot(t, kDistGoal) * gy / gd;
    }
  }
  return g;
}

stl::Formula instantiate_hri_template(const HriParams& g, int horizon) {
  using namespace stl;
  const Interval all{0, horizon};
  return conj(always(all, atom(kDistRobot, "dist_robot", Cmp::Ge, g.d_coll)),
              eventually(all, atom(kDistGoal, "dist_goal", Cmp::Le, g.r_goal)));
}

// ---------------------------------------------------------------------------
// Rule problems

RuleProblem make_problem(const SceneContext& c, const StlParams& g, int horizon) {
  auto scene = std::make_shared<const SceneContext>(c);
  RuleProblem p;
  p.start = c.ego;
  p.formula = instantiate_template(g, c, horizon);
  p.extract = [scene](const StateMatrix& s) { return extract_channels(s, *scene); };
  p.extract_backward = [scene](const StateMatrix& s, const Eigen::MatrixXd& cot) {
    return extract_channels_backward(s, *scene, cot);
  };
  return p;
}

RuleProblem make_problem(const HriScene& c, const HriParams& g, int horizon) {
  auto scene = std::make_shared<const HriScene>(c);
  RuleProblem p;
  p.start = c.human;
  p.formula = instantiate_hri_template(g, horizon);
  p.extract = [scene](const StateMatrix& s) { return extract_hri_channels(s, *scene); };
  p.extract_backward = [scene](const StateMatrix& s, const Eigen::MatrixXd& cot) {
    return extract_hri_channels_backward(s, *scene, cot);
  };
  return p;
}

double rule_robustness_states(const RuleProblem& p, const StateMatrix& states) {
  return stl::robustness(p.formula, p.extract(states), 0);
}

double rule_robustness(const RuleProblem& p, const ControlSeq& u) {
  return rule_robustness_states(p, rollout(p.start, u).states);
}

StateGradient rule_smooth_state_gradient(const RuleProblem& p, const StateMatrix& states, double beta) {
  const stl::Signal sig = p.extract(states);
  stl::SmoothResult r = stl::robustness_smooth(p.formula, sig, beta, 0);
  return {r.value, p.extract_backward(states, r.grad)};
}

RuleGradient rule_smooth_gradient(const RuleProblem& p, const ControlSeq& u, double beta) {
  const Trajectory tr = rollout(p.start, u);
  StateGradient sg = rule_smooth_state_gradient(p, tr.states, beta);
  return {sg.smooth, rollout_grad(p.start, u, sg.grad)};
}

// ---------------------------------------------------------------------------
// JSON

namespace {

template <typename F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed ") + what + " record: " + e.what());
  }
}

json lane_json(const Lane& l) {
  json pts = json::array();
  for (const auto& p : l.pts) pts.push_back({p.x, p.y, p.theta});
  return {{"valid", l.valid ? 1 : 0}, {"pts", pts}};
}

Lane lane_from(const json& j) {
  Lane l;
  l.valid = j.at("valid").get<int>() != 0;
  const json& pts = j.at("pts");
  if (pts.size() != static_cast<std::size_t>(kLanePoints)) {
    throw DataError("lane must have exactly " + std::to_string(kLanePoints) + " waypoints");
  }
  for (int i = 0; i < kLanePoints; ++i) {
    l.pts[i] = {pts[i].at(0).get<double>(), pts[i].at(1).get<double>(), pts[i].at(2).get<double>()};
  }
  return l;
}

json neighbor_json(const Neighbor& n) {
  return {{"valid", n.valid ? 1 : 0}, {"x", n.x}, {"y", n.y}, {"th", n.theta},
          {"v", n.v},                 {"L", n.dims.length}, {"W", n.dims.width}};
}

Neighbor neighbor_from(const json& j) {
  Neighbor n;
  n.valid = j.at("valid").get<int>() != 0;
  n.x = j.at("x").get<double>();
  n.y = j.at("y").get<double>();
  n.theta = j.at("th").get<double>();
  n.v = j.at("v").get<double>();
  n.dims.length = j.at("L").get<double>();
  n.dims.width = j.at("W").get<double>();
  return n;
}

}  // namespace

json to_json(const SceneContext& c) {
  json nbs = json::array();
  for (const auto& n : c.neighbors) nbs.push_back(neighbor_json(n));
  return {{"id", c.id},
          {"ego",
           {{"x", c.ego.x}, {"y", c.ego.y}, {"th", c.ego.theta}, {"v", c.ego.v}, {"L", c.ego_dims.length},
            {"W", c.ego_dims.width}}},
          {"lanes", {{"c", lane_json(c.lanes[0])}, {"l", lane_json(c.lanes[1])}, {"r", lane_json(c.lanes[2])}}},
          {"neighbors", nbs},
          {"mode_label", c.mode_label},
          {"dt", c.dt}};
}

SceneContext scene_from_json(const json& j) {
  return guarded("scene", [&] {
    SceneContext c;
    c.id = j.value("id", std::string{});
    const json& e = j.at("ego");
    c.ego = {e.at("x").get<double>(), e.at("y").get<double>(), e.at("th").get<double>(), e.at("v").get<double>()};
    c.ego_dims = {e.at("L").get<double>(), e.at("W").get<double>()};
    const json& lanes = j.at("lanes");
    c.lanes[0] = lane_from(lanes.at("c"));
    c.lanes[1] = lane_from(lanes.at("l"));
    c.lanes[2] = lane_from(lanes.at("r"));
    const json& nbs = j.at("neighbors");
    if (nbs.size() != static_cast<std::size_t>(kNeighborSlots)) {
      throw DataError("scene must have exactly " + std::to_string(kNeighborSlots) + " neighbor slots");
    }
    for (int i = 0; i < kNeighborSlots; ++i) c.neighbors[i] = neighbor_from(nbs[i]);
    c.mode_label = j.at("mode_label").get<int>();
    if (c.mode_label < 0 || c.mode_label > 2) throw DataError("mode_label must be 0, 1 or 2");
    c.dt = j.value("dt", 0.5);
    return c;
  });
}

json to_json(const HriScene& c) {
  return {{"id", c.id},
          {"human", {{"x", c.human.x}, {"y", c.human.y}, {"th", c.human.theta}, {"v", c.human.v}}},
          {"goal", {c.goal_x, c.goal_y}},
          {"robot", neighbor_json(c.robot)},
          {"human_radius", c.human_radius},
          {"robot_radius", c.robot_radius},
          {"r_goal", c.r_goal},
          {"dt", c.dt}};
}

HriScene hri_from_json(const json& j) {
  return guarded("human-robot scene", [&] {
    HriScene c;
    c.id = j.value("id", std::string{});
    const json& h = j.at("human");
    c.human = {h.at("x").get<double>(), h.at("y").get<double>(), h.at("th").get<double>(), h.at("v").get<double>()};
    c.goal_x = j.at("goal").at(0).get<double>();
    c.goal_y = j.at("goal").at(1).get<double>();
    c.robot = neighbor_from(j.at("robot"));
    c.human_radius = j.at("human_radius").get<double>();
    c.robot_radius = j.at("robot_radius").get<double>();
    c.r_goal = j.at("r_goal").get<double>();
    c.dt = j.value("dt", 0.5);
    return c;
  });
}

json to_json(const StlParams& g) {
  const auto a = g.as_array();
  return json(std::vector<double>(a.begin(), a.end()));
}

StlParams params_from_json(const json& j) {
  return guarded("gamma", [&] {
    if (!j.is_array() || j.size() != 7) throw DataError("gamma must be a 7-element array");
    std::array<double, 7> a{};
    for (std::size_t i = 0; i < 7; ++i) a[i] = j[i].get<double>();
    return StlParams::from_array(a);
  });
}

}  // namespace stldp
