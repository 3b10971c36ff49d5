#include "stldp/simharness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "stldp/calibrate.hpp"
#include "stldp/errors.hpp"

namespace stldp {

using nlohmann::json;

const char* family_name(Family f) {
  switch (f) {
    case Family::Straight: return "straight";
    case Family::Curve: return "curve";
    case Family::Roundabout: return "roundabout-lite";
    case Family::Hri: return "hri";
  }
  return "?";
}

Family parse_family(const std::string& s) {
  for (Family f : {Family::Straight, Family::Curve, Family::Roundabout, Family::Hri})
    if (s == family_name(f)) return f;
  throw DataError("unknown scenario family '" + s + "' (straight, curve, roundabout-lite, hri)");
}

const char* termination_name(Termination t) {
  switch (t) {
    case Termination::MaxSteps: return "max_steps";
    case Termination::Collision: return "collision";
    case Termination::OutOfLane: return "out_of_lane";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Road geometry

Waypoint Road::point(double s, double offset) const {
  const double c = std::cos(heading), sn = std::sin(heading);
  if (radius == 0.0) return {x0 + s * c - offset * sn, y0 + s * sn + offset * c, heading};
  const double cx = x0 - radius * sn, cy = y0 + radius * c;
  const double phi = s / radius;
  const double r = radius - offset;
  return {cx + r * std::sin(heading + phi), cy - r * std::cos(heading + phi), wrap_angle(heading + phi)};
}

void Road::project(double x, double y, double& s, double& offset) const {
  const double c = std::cos(heading), sn = std::sin(heading);
  if (radius == 0.0) {
    s = (x - x0) * c + (y - y0) * sn;
    offset = -(x - x0) * sn + (y - y0) * c;
    return;
  }
  const double cx = x0 - radius * sn, cy = y0 + radius * c;
  const double psi = std::atan2(y - cy, x - cx);
  const double psi0 = std::atan2(y0 - cy, x0 - cx);
  s = wrap_angle(psi - psi0) * radius;
  const double r = std::hypot(x - cx, y - cy);
  offset = radius > 0.0 ? radius - r : radius + r;
}

int Road::nearest_lane(double offset) const {
  int best = 1;
  double best_d = std::numeric_limits<double>::infinity();
  for (int l = 0; l < 3; ++l) {
    if (!lanes[l]) continue;
    const double d = std::abs(offset - offset_of(l));
    if (d < best_d) best_d = d, best = l;
  }
  return best;
}

Lane Road::window(int lane, double s_center) const {
  Lane out;
  out.valid = true;
  for (int k = 0; k < kLanePoints; ++k) out.pts[k] = point(s_center + (k - kEgoWaypoint) * kLaneSpacing, offset_of(lane));
  return out;
}

Neighbor Track::at(const Road& road, double time) const {
  const Waypoint p = road.point(s0 + v * time, road.offset_of(lane));
  Neighbor n;
  n.valid = true;
  n.x = p.x;
  n.y = p.y;
  n.theta = p.theta;
  n.v = v;
  n.dims = dims;
  return n;
}

SceneContext Scenario::context_at(const EgoState& e, double time) const {
  SceneContext c;
  c.id = id;
  c.ego = e;
  c.ego_dims = ego_dims;
  c.mode_label = mode_label;
  c.dt = dt;
  double s = 0.0, off = 0.0;
  road.project(e.x, e.y, s, off);
  const int cur = road.nearest_lane(off);
  // Waypoints sit on a fixed arc-length grid, so successive windows share
  // their chords and lane distances do not jump between replanning steps.
  const double s_grid = std::round(s / kLaneSpacing) * kLaneSpacing;
  c.lanes[kLaneCurrent] = road.window(cur, s_grid);
  if (cur + 1 <= 2 && road.lanes[cur + 1]) c.lanes[kLaneLeft] = road.window(cur + 1, s_grid);
  if (cur - 1 >= 0 && road.lanes[cur - 1]) c.lanes[kLaneRight] = road.window(cur - 1, s_grid);

  std::vector<std::pair<double, Neighbor>> near;
  for (const Track& t : tracks) {
    Neighbor n = t.at(road, time);
    const double d = std::hypot(n.x - e.x, n.y - e.y);
    if (d <= kPerceptionRadius) near.emplace_back(d, n);
  }
  std::stable_sort(near.begin(), near.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 0; i < near.size() && i < static_cast<std::size_t>(kNeighborSlots); ++i)
    c.neighbors[i] = near[i].second;
  return c;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

struct Profile {
  std::function<double(double)> offset;  // reference lateral offset at time t
  std::function<double(double)> speed;
};

// Lane tracking with a heading loop around a lateral-offset loop.
ControlSeq track_profile(const Road& road, const EgoState& s0, const Profile& p, int horizon, double dt,
                         const ControlBox& box) {
  ControlSeq u;
  u.dt = dt;
  u.u.resize(horizon, 2);
  EgoState s = s0;
  for (int t = 0; t < horizon; ++t) {
    double arc = 0.0, off = 0.0;
    road.project(s.x, s.y, arc, off);
    const double tangent = road.point(arc, off).theta;
    const double psi = wrap_angle(s.theta - tangent);
    const double v = std::max(std::abs(s.v), 1.0);
    const double psi_ref = std::clamp(0.8 * (p.offset(t * dt) - off) / v, -0.35, 0.35);
    const double curvature = road.radius == 0.0 ? 0.0 : 1.0 / (road.radius - off);
    const double w = s.v * curvature + 1.5 * (psi_ref - psi);
    const double a = 2.0 * (p.speed((t + 1) * dt) - s.v);
    const Control c{std::clamp(w, box.lo.w, box.hi.w), std::clamp(a, box.lo.a, box.hi.a)};
    u.u(t, 0) = c.w;
    u.u(t, 1) = c.a;
    s = step(s, c, dt);
  }
  return u;
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// The demo should not attain any always-type extreme at t = 0: the start
// state is shared by every plan, so an extreme there caps the achievable
// robustness at zero.
const char* demo_rejection(const Scenario& sc, int horizon) {
  const SceneContext c = sc.initial_context();
  const StateMatrix states = rollout(sc.ego, sc.demo).states;
  const stl::Signal sig = extract_channels(states, c);
  const Mode mode = static_cast<Mode>(sc.mode_label);
  if (!c.mode_feasible(mode)) return "labeled mode infeasible";
  if (sig.values.col(kDistNei).minCoeff() < 0.5) return "demo too close to a neighbor";
  if (sig.values.col(kSpeed).minCoeff() < 0.0) return "demo reverses";
  const StlParams g = calibrate_params(states, c, mode);
  const double v0 = sig.values(0, kSpeed);
  if (std::min(v0 - g.v_min, g.v_max - v0) < 0.1) return "speed extreme at start";
  if (sig.values(0, kDistNei) - g.d_safe < 0.2) return "closest approach at start";
  if (mode == Mode::LaneKeep) {
    const double d0 = sig.values(0, kDistLaneC), a0 = sig.values(0, kAngleLaneC);
    if (std::min(d0 - g.d_min, g.d_max - d0) < 0.05) return "lane offset extreme at start";
    if (g.theta_max - a0 < 0.01) return "heading extreme at start";
  } else {
    if (lane_change_onset(sig, mode) >= horizon - 2) return "lane change incomplete";
  }
  // The rollout must stay on the road for the whole horizon.
  for (int t = 0; t <= horizon; ++t) {
    double s = 0.0, off = 0.0;
    sc.road.project(states(t, 0), states(t, 1), s, off);
    if (std::abs(off - sc.road.offset_of(sc.road.nearest_lane(off))) > kLaneHalfWidth) return "demo leaves the road";
  }
  return nullptr;
}

Scenario draw_driving(Family family, Rng& rng, const GeneratorOptions& opt) {
  Scenario sc;
  sc.family = family;
  sc.episode_steps = opt.episode_steps;
  Road& road = sc.road;
  road.x0 = uniform(rng, -100, 100);
  road.y0 = uniform(rng, -100, 100);
  road.heading = uniform(rng, -std::numbers::pi, std::numbers::pi);
  const bool roundabout = family == Family::Roundabout;
  if (family == Family::Curve) road.radius = (rng() % 2 ? 1.0 : -1.0) * uniform(rng, 60, 150);
  if (roundabout) {
    road.radius = uniform(rng, 25, 35);
    road.lanes = {true, true, false};
  } else {
    road.lanes = {uniform(rng, 0, 1) < 0.7, true, uniform(rng, 0, 1) < 0.7};
  }

  const double e0 = (rng() % 2 ? 1.0 : -1.0) * uniform(rng, 0.1, 0.5);
  const Waypoint start = road.point(0.0, e0);
  const double v0 = roundabout ? 0.5 : uniform(rng, 3.5, 8.0);
  sc.ego = {start.x, start.y, start.theta + uniform(rng, -0.02, 0.02), v0};

  std::vector<Mode> modes{Mode::LaneKeep};
  if (!roundabout) {
    if (road.lanes[2]) modes.push_back(Mode::LeftChange);
    if (road.lanes[0]) modes.push_back(Mode::RightChange);
  }
  const Mode mode = uniform(rng, 0, 1) < 0.5 ? Mode::LaneKeep : modes[rng() % modes.size()];
  sc.mode_label = static_cast<int>(mode);

  // Neighbors move away from the ego: faster when ahead, slower when behind.
  if (roundabout) {
    double s = uniform(rng, 18, 22);
    const double v = uniform(rng, 2, 3);
    for (int i = 0; i < 4; ++i) {
      sc.tracks.push_back({1, s, v, {}});
      s += uniform(rng, 9, 11);
    }
    if (uniform(rng, 0, 1) < 0.5) sc.tracks.push_back({0, uniform(rng, -25, -10), uniform(rng, 0, 0.3), {}});
  } else {
    const int n = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < n; ++i) {
      std::vector<int> lanes;
      for (int l = 0; l < 3; ++l)
        if (road.lanes[l]) lanes.push_back(l);
      const int lane = lanes[rng() % lanes.size()];
      const bool ahead = lane == 1 || uniform(rng, 0, 1) < 0.6;
      Track t;
      t.lane = lane;
      t.s0 = ahead ? uniform(rng, 12, 45) : -uniform(rng, 12, 30);
      t.v = ahead ? v0 + uniform(rng, 0.5, 3) : std::max(0.0, v0 - uniform(rng, 1.5, 4));
      sc.tracks.push_back(t);
    }
  }

  const int target_lane = mode == Mode::LeftChange ? 2 : mode == Mode::RightChange ? 0 : 1;
  const double target = road.offset_of(target_lane);
  Profile p;
  if (mode == Mode::LaneKeep) {
    const double amp = std::abs(e0) + uniform(rng, 0.25, 0.6);
    const double period = uniform(rng, 5, 9);
    const double phase = std::asin(e0 / amp);
    p.offset = [=](double t) { return amp * std::sin(2 * std::numbers::pi * t / period + phase); };
  } else {
    const double t0 = uniform(rng, 0, 2), dur = uniform(rng, 3.5, 5.5);
    p.offset = [=](double t) { return e0 + (target - e0) * smoothstep((t - t0) / dur); };
  }
  if (roundabout) {
    const double top = uniform(rng, 1.5, 5.5), period = uniform(rng, 12, 18);
    p.speed = [=](double t) {
      return t < 1.0 ? v0 - 0.3 : v0 - 0.3 + (top - v0 + 0.3) * 0.5 * (1 - std::cos(2 * std::numbers::pi * (t - 1.0) / period));
    };
  } else {
    const double amp = uniform(rng, 1.0, std::min(3.0, v0 - 0.5));
    const double period = uniform(rng, 7, 12);
    const double phase = uniform(rng, 0.3, 2.8) * (rng() % 2 ? 1.0 : -1.0);
    p.speed = [=](double t) {
      return v0 + amp * (std::sin(2 * std::numbers::pi * t / period + phase) - std::sin(phase));
    };
  }
  sc.demo = track_profile(road, sc.ego, p, opt.horizon, sc.dt, ControlBox{});
  return sc;
}

Scenario draw_hri(Rng& rng, const GeneratorOptions& opt) {
  Scenario sc;
  sc.family = Family::Hri;
  sc.episode_steps = opt.episode_steps;
  HriScene& h = sc.hri;
  const double heading = uniform(rng, -std::numbers::pi, std::numbers::pi);
  const double x0 = uniform(rng, -20, 20), y0 = uniform(rng, -20, 20);
  const double dist = uniform(rng, 8, 11);
  const double horizon_s = opt.horizon * sc.dt;
  const double v = dist / horizon_s * uniform(rng, 1.1, 1.3);
  h.human = {x0, y0, heading, v};
  h.goal_x = x0 + dist * std::cos(heading);
  h.goal_y = y0 + dist * std::sin(heading);
  h.dt = sc.dt;

  // The robot crosses the human's path ahead of or behind the human.
  const double frac = uniform(rng, 0.3, 0.7);
  const double cross_x = x0 + frac * dist * std::cos(heading), cross_y = y0 + frac * dist * std::sin(heading);
  const double human_at = frac * dist / v;
  const double robot_at = human_at + (rng() % 2 ? 1.0 : -1.0) * uniform(rng, 2.5, 4.0);
  const double rv = uniform(rng, 0.8, 1.5);
  const double rh = heading + (rng() % 2 ? 1.0 : -1.0) * std::numbers::pi / 2 + uniform(rng, -0.4, 0.4);
  Neighbor r;
  r.valid = true;
  r.theta = rh;
  r.v = rv;
  r.x = cross_x - rv * robot_at * std::cos(rh);
  r.y = cross_y - rv * robot_at * std::sin(rh);
  r.dims = {1.0, 1.0};
  h.robot = r;
  sc.ego = h.human;
  sc.demo.dt = sc.dt;
  sc.demo.u = ControlMatrix::Zero(opt.horizon, 2);
  return sc;
}

const char* hri_rejection(const Scenario& sc) {
  const StateMatrix states = rollout(sc.hri.human, sc.demo).states;
  const stl::Signal s = extract_hri_channels(states, sc.hri);
  Eigen::Index arg = 0;
  const double closest = s.values.col(kDistRobot).minCoeff(&arg);
  if (closest < 0.3) return "demo too close to the robot";
  if (s.values(0, kDistRobot) - closest < 0.1) return "closest approach at start";
  if (s.values.col(kDistGoal).minCoeff() > sc.hri.r_goal) return "demo misses the goal";
  return nullptr;
}

}  // namespace

Scenario generate_scenario(Family family, std::uint64_t seed, int index, const GeneratorOptions& opt) {
  Rng rng = stream_rng(seed, std::string(family_name(family)) + "/" + std::to_string(index));
  const std::string id = std::string(family_name(family)) + "-" + std::to_string(seed) + "-" + std::to_string(index);
  const char* why = "";
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Scenario sc = family == Family::Hri ? draw_hri(rng, opt) : draw_driving(family, rng, opt);
    sc.id = id;
    sc.hri.id = id;
    why = family == Family::Hri ? hri_rejection(sc) : demo_rejection(sc, opt.horizon);
    if (!why) return sc;
  }
  throw std::runtime_error("scenario generator could not produce an acceptable demo for " + id + " (" + why + ")");
}

std::vector<Scenario> generate_scenarios(Family family, int count, std::uint64_t seed, const GeneratorOptions& opt) {
  std::vector<Scenario> out(static_cast<std::size_t>(std::max(0, count)));
  parallel_for(out.size(), [&](std::size_t i) { out[i] = generate_scenario(family, seed, static_cast<int>(i), opt); });
  return out;
}

// ---------------------------------------------------------------------------
// Records

json to_json(const Scenario& s) {
  json j;
  if (s.family == Family::Hri) {
    j = to_json(s.hri);
  } else {
    j = to_json(s.initial_context());
    json tracks = json::array();
    for (const auto& t : s.tracks)
      tracks.push_back({{"lane", t.lane}, {"s0", t.s0}, {"v", t.v}, {"L", t.dims.length}, {"W", t.dims.width}});
    j["script"] = {{"road",
                    {{"x0", s.road.x0},
                     {"y0", s.road.y0},
                     {"heading", s.road.heading},
                     {"radius", s.road.radius},
                     {"lane_width", s.road.lane_width},
                     {"lanes", {s.road.lanes[0] ? 1 : 0, s.road.lanes[1] ? 1 : 0, s.road.lanes[2] ? 1 : 0}}}},
                   {"tracks", tracks},
                   {"episode_steps", s.episode_steps}};
  }
  j["version"] = kScenarioVersion;
  j["family"] = family_name(s.family);
  j["demo"] = json::array();
  for (Eigen::Index t = 0; t < s.demo.u.rows(); ++t) j["demo"].push_back({s.demo.u(t, 0), s.demo.u(t, 1)});
  return j;
}

Scenario scenario_from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != kScenarioVersion) {
      throw DataError("scenario version " + j.at("version").dump() + " is not supported (expected " +
                      std::to_string(kScenarioVersion) + ")");
    }
    Scenario s;
    s.family = parse_family(j.at("family").get<std::string>());
    s.dt = j.value("dt", 0.5);
    const json& demo = j.at("demo");
    s.demo.dt = s.dt;
    s.demo.u.resize(static_cast<Eigen::Index>(demo.size()), 2);
    for (std::size_t t = 0; t < demo.size(); ++t) {
      s.demo.u(static_cast<Eigen::Index>(t), 0) = demo[t].at(0).get<double>();
      s.demo.u(static_cast<Eigen::Index>(t), 1) = demo[t].at(1).get<double>();
    }
    if (s.family == Family::Hri) {
      s.hri = hri_from_json(j);
      s.id = s.hri.id;
      s.ego = s.hri.human;
      return s;
    }
    const SceneContext c = scene_from_json(j);
    s.id = c.id;
    s.ego = c.ego;
    s.ego_dims = c.ego_dims;
    s.mode_label = c.mode_label;
    const json& script = j.at("script");
    const json& road = script.at("road");
    s.road.x0 = road.at("x0").get<double>();
    s.road.y0 = road.at("y0").get<double>();
    s.road.heading = road.at("heading").get<double>();
    s.road.radius = road.at("radius").get<double>();
    s.road.lane_width = road.at("lane_width").get<double>();
    for (int l = 0; l < 3; ++l) s.road.lanes[l] = road.at("lanes").at(l).get<int>() != 0;
    for (const auto& t : script.at("tracks")) {
      s.tracks.push_back({t.at("lane").get<int>(), t.at("s0").get<double>(), t.at("v").get<double>(),
                          {t.at("L").get<double>(), t.at("W").get<double>()}});
    }
    s.episode_steps = script.at("episode_steps").get<int>();
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed scenario record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Closed loop

int argmax_first(const std::vector<double>& xs) {
  int best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

EpisodeLog run_closed_loop(const Scenario& sc, const Planner& planner, const StlParams& gamma, std::uint64_t seed,
                           const ClosedLoopOptions& opt) {
  EpisodeLog log;
  log.scenario_id = sc.id;
  EgoState ego = sc.ego;
  log.path.push_back(ego);
  Rng rng = stream_rng(seed, "closed-loop/" + sc.id);
  for (int k = 0;; ++k) {
    const SceneContext c = sc.context_at(ego, k * sc.dt);
    const stl::Signal now = extract_channels(to_row(ego), c);
    if (now.values(0, kDistNei) < 0.0) {
      log.termination = Termination::Collision;
      break;
    }
    if (now.values(0, kDistLaneC) > opt.lane_half_width) {
      log.termination = Termination::OutOfLane;
      break;
    }
    if (k >= opt.max_steps) break;

    StlParams g = gamma;
    if (!c.mode_feasible(g.mode)) g.mode = Mode::LaneKeep;
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<ControlSeq> plans = planner(c, g, rng);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    EpisodeStep st;
    st.step = k;
    st.ego = ego;
    st.samples = static_cast<int>(plans.size());
    st.plan_seconds = secs;
    Control u{0.0, 0.0};
    if (!plans.empty()) {
      const RuleProblem p = make_problem(c, g, opt.horizon);
      std::vector<double> rho(plans.size());
      for (std::size_t i = 0; i < plans.size(); ++i) {
        rho[i] = rule_robustness(p, plans[i]);
        if (rho[i] >= 0.0) ++st.valid_samples;
      }
      st.chosen_index = argmax_first(rho);
      st.chosen_rho = rho[static_cast<std::size_t>(st.chosen_index)];
      u = plans[static_cast<std::size_t>(st.chosen_index)].at(0);
    }
    const ControlBox box;
    u = {std::clamp(u.w, box.lo.w, box.hi.w), std::clamp(u.a, box.lo.a, box.hi.a)};
    st.control = u;
    log.steps.push_back(st);
    ego = step(ego, u, sc.dt);
    log.path.push_back(ego);
  }
  return log;
}

json to_json(const EpisodeStep& s) {
  return {{"step", s.step},
          {"ego", {s.ego.x, s.ego.y, s.ego.theta, s.ego.v}},
          {"rho", s.chosen_rho},
          {"chosen", s.chosen_index},
          {"valid", s.valid_samples},
          {"samples", s.samples},
          {"control", {s.control.w, s.control.a}}};
}

}  // namespace stldp
