#include "stldp/calibrate.hpp"

#include "stldp/errors.hpp"

namespace stldp {

int lane_change_onset(const stl::Signal& s, Mode mode) {
  const int T = s.horizon();
  const int target = mode == Mode::LeftChange ? kDistLaneL : kDistLaneR;
  int onset = T;
  for (int t = T; t >= 0; --t) {
    if (!(s.values(t, target) < s.values(t, kDistLaneC))) break;
    onset = t;
  }
  return onset;
}

StlParams calibrate_params(const StateMatrix& states, const SceneContext& c, Mode mode) {
  if (states.rows() < 1) throw DataError("cannot calibrate on an empty trajectory");
  if (!c.mode_feasible(mode)) throw DataError("scene '" + c.id + "': labeled mode has no valid target lane");
  const stl::Signal s = extract_channels(states, c);
  const int T = s.horizon();

  StlParams g;
  g.mode = mode;
  g.v_min = s.values.col(kSpeed).minCoeff();
  g.v_max = s.values.col(kSpeed).maxCoeff();
  g.d_safe = s.values.col(kDistNei).minCoeff();
  if (g.d_safe < 0.0) throw DataError("scene '" + c.id + "': demonstration overlaps a neighbor");

  int dist_ch = kDistLaneC, angle_ch = kAngleLaneC, from = 0;
  if (mode != Mode::LaneKeep) {
    const bool left = mode == Mode::LeftChange;
    dist_ch = left ? kDistLaneL : kDistLaneR;
    angle_ch = left ? kAngleLaneL : kAngleLaneR;
    from = lane_change_onset(s, mode);
  }
  const auto d = s.values.col(dist_ch).segment(from, T - from + 1);
  const auto a = s.values.col(angle_ch).segment(from, T - from + 1);
  g.d_min = d.minCoeff();
  g.d_max = d.maxCoeff();
  g.theta_max = a.maxCoeff();
  return g;
}

HriParams calibrate_hri(const StateMatrix& states, const HriScene& c) {
  if (states.rows() < 1) throw DataError("cannot calibrate on an empty trajectory");
  const stl::Signal s = extract_hri_channels(states, c);
  return {s.values.col(kDistRobot).minCoeff(), c.r_goal};
}

StlParams envelope(const std::vector<StlParams>& corpus, Mode mode) {
  // Bounds of other modes refer to other lanes; use them only if the corpus
  // has no entry of this mode.
  std::vector<StlParams> same;
  for (const StlParams& p : corpus)
    if (p.mode == mode) same.push_back(p);
  const std::vector<StlParams>& use = same.empty() ? corpus : same;
  if (use.empty()) throw DataError("cannot take the envelope of an empty corpus");
  StlParams g = use.front();
  for (const StlParams& p : use) {
    g.v_min = std::min(g.v_min, p.v_min);
    g.v_max = std::max(g.v_max, p.v_max);
    g.d_safe = std::min(g.d_safe, p.d_safe);
    g.d_min = std::min(g.d_min, p.d_min);
    g.d_max = std::max(g.d_max, p.d_max);
    g.theta_max = std::max(g.theta_max, p.theta_max);
  }
  g.mode = mode;
  return g;
}

}  // namespace stldp
