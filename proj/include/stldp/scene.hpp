#pragma once

// Scene context (lanes and neighbors), rigid frame transforms, geometric
// signal extraction and the driving / human-robot rule templates.

#include <json.hpp>

#include <array>
#include <functional>
#include <string>

#include "stldp/dynamics.hpp"
#include "stldp/stl.hpp"

namespace stldp {

inline constexpr int kLanePoints = 15;
inline constexpr int kNeighborSlots = 8;
inline constexpr double kPerceptionRadius = 50.0;
/// dist_nei value when no neighbor slot is valid.
inline constexpr double kNoNeighborDistance = 1e6;

struct Waypoint {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
};

struct Lane {
  bool valid = false;
  std::array<Waypoint, kLanePoints> pts{};
};

struct VehicleDims {
  double length = 4.0;
  double width = 2.0;

  double half_diagonal() const;
};

/// A neighbor moving at constant velocity along its heading.
struct Neighbor {
  bool valid = false;
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
  double v = 0.0;
  VehicleDims dims;

  /// Pose after `seconds` under the constant-velocity model.
  Neighbor advanced(double seconds) const;
};

enum LaneSlot : int { kLaneCurrent = 0, kLaneLeft = 1, kLaneRight = 2 };

enum class Mode : int { LaneKeep = 0, LeftChange = 1, RightChange = 2 };

struct SceneContext {
  std::string id;
  EgoState ego;
  VehicleDims ego_dims;
  std::array<Lane, 3> lanes{};  // indexed by LaneSlot
  std::array<Neighbor, kNeighborSlots> neighbors{};
  int mode_label = 0;
  double dt = 0.5;

  const Lane& lane(LaneSlot s) const { return lanes[static_cast<std::size_t>(s)]; }
  bool mode_feasible(Mode m) const;
};

/// gamma = (M, v_min, v_max, d_safe, d_min, d_max, theta_max).
struct StlParams {
  Mode mode = Mode::LaneKeep;
  double v_min = 0.0;
  double v_max = 0.0;
  double d_safe = 0.0;
  double d_min = 0.0;
  double d_max = 0.0;
  double theta_max = 0.0;

  std::array<double, 7> as_array() const;
  static StlParams from_array(const std::array<double, 7>& g);
  /// Throws DataError when bounds are inverted or negative.
  void validate() const;
};

struct Rigid {
  double tx = 0.0;
  double ty = 0.0;
  double rotation = 0.0;  // applied before the translation
};

double wrap_angle(double a);  // to (-pi, pi]

SceneContext transform(const SceneContext& c, const Rigid& r);
StateMatrix transform(const StateMatrix& states, const Rigid& r);
/// Frame with the ego at the origin heading along +x.
Rigid ego_frame(const EgoState& ego);
SceneContext to_ego_frame(const SceneContext& c);

// ---------------------------------------------------------------------------
// Driving channels.

enum DrivingChannel : int {
  kSpeed = 0,
  kDistNei,
  kDistLaneC,
  kDistLaneL,
  kDistLaneR,
  kAngleLaneC,
  kAngleLaneL,
  kAngleLaneR,
  kDrivingChannels
};

const stl::SchemaPtr& driving_schema();

/// Unsigned distance from (x, y) to the lane centerline. The first and last
/// segments extend as rays. `segment` receives the nearest segment index.
double lane_distance(const Lane& lane, double x, double y, int* segment = nullptr);
double lane_heading(const Lane& lane, int segment);

/// speed, dist_nei (circumscribed-circle clearance to the nearest valid
/// neighbor, neighbors propagated at constant velocity), dist/angle to the
/// three lanes. Channels of invalid lanes are zero.
stl::Signal extract_channels(const StateMatrix& states, const SceneContext& c);

/// Pulls a cotangent on the signal back to the ego states (subgradient at the
/// nearest neighbor / nearest segment).
StateMatrix extract_channels_backward(const StateMatrix& states, const SceneContext& c,
                                      const Eigen::MatrixXd& signal_cot);

/// Mode-selected conjunction of the speed, clearance and lane rules over the
/// window [0, horizon]. Throws DataError if the mode's lane is invalid.
stl::Formula instantiate_template(const StlParams& g, const SceneContext& c, int horizon);

// ---------------------------------------------------------------------------
// Human-robot encounter.

struct HriScene {
  std::string id;
  EgoState human;
  double goal_x = 0.0;
  double goal_y = 0.0;
  Neighbor robot;
  double human_radius = 0.3;
  double robot_radius = 0.5;
  double r_goal = 0.5;
  double dt = 0.5;
};

struct HriParams {
  double d_coll = 0.5;
  double r_goal = 0.5;
};

enum HriChannel : int { kDistRobot = 0, kDistGoal, kHriChannels };

const stl::SchemaPtr& hri_schema();
stl::Signal extract_hri_channels(const StateMatrix& states, const HriScene& c);
StateMatrix extract_hri_channels_backward(const StateMatrix& states, const HriScene& c,
                                          const Eigen::MatrixXd& signal_cot);
/// G[0,T](dist_robot >= d_coll) and F[0,T](dist_goal <= r_goal).
stl::Formula instantiate_hri_template(const HriParams& g, int horizon);

// ---------------------------------------------------------------------------
// A rule-satisfaction problem over control sequences: start state, formula
// and the state -> signal map (with its pullback).

struct RuleProblem {
  EgoState start;
  stl::Formula formula;
  std::function<stl::Signal(const StateMatrix&)> extract;
  std::function<StateMatrix(const StateMatrix&, const Eigen::MatrixXd&)> extract_backward;
};

RuleProblem make_problem(const SceneContext& c, const StlParams& g, int horizon);
RuleProblem make_problem(const HriScene& c, const HriParams& g, int horizon);

/// Exact robustness at t = 0 of the rolled-out (unclamped) controls.
double rule_robustness(const RuleProblem& p, const ControlSeq& u);

struct RuleGradient {
  double smooth = 0.0;
  ControlMatrix grad;  // d smooth / d u
};
RuleGradient rule_smooth_gradient(const RuleProblem& p, const ControlSeq& u, double beta);

struct StateGradient {
  double smooth = 0.0;
  StateMatrix grad;  // d smooth / d states
};
StateGradient rule_smooth_state_gradient(const RuleProblem& p, const StateMatrix& states, double beta);
double rule_robustness_states(const RuleProblem& p, const StateMatrix& states);

// ---------------------------------------------------------------------------
// JSON records.

nlohmann::json to_json(const SceneContext& c);
SceneContext scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const HriScene& c);
HriScene hri_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StlParams& g);
StlParams params_from_json(const nlohmann::json& j);

}  // namespace stldp
