#pragma once

// Synthetic scenario families with scripted expert demonstrations, and the
// receding-horizon closed-loop protocol.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stldp/parallel.hpp"
#include "stldp/scene.hpp"

namespace stldp {

enum class Family { Straight, Curve, Roundabout, Hri };
const char* family_name(Family f);
Family parse_family(const std::string& s);  // throws DataError

inline constexpr double kLaneSpacing = 10.0;     // waypoint spacing along a lane
inline constexpr int kEgoWaypoint = 4;           // the ego sits nearest this waypoint
inline constexpr double kLaneHalfWidth = 1.8;    // out-of-lane threshold

/// A reference line (straight or circular arc) with up to three parallel
/// lanes at lateral offsets -w, 0, +w (left positive).
struct Road {
  double x0 = 0.0;
  double y0 = 0.0;
  double heading = 0.0;
  double radius = 0.0;  // 0: straight; > 0 turns left, < 0 turns right
  double lane_width = 3.6;
  std::array<bool, 3> lanes{true, true, true};  // right, center, left

  Waypoint point(double s, double offset) const;
  /// Arc length and signed lateral offset of (x, y).
  void project(double x, double y, double& s, double& offset) const;
  double offset_of(int lane) const { return (lane - 1) * lane_width; }
  /// Existing lane whose center is nearest to the given lateral offset.
  int nearest_lane(double offset) const;
  Lane window(int lane, double s_center) const;
};

/// Neighbor driving along a lane center at constant speed.
struct Track {
  int lane = 1;
  double s0 = 0.0;
  double v = 0.0;
  VehicleDims dims;

  Neighbor at(const Road& road, double time) const;
};

struct Scenario {
  std::string id;
  Family family = Family::Straight;
  Road road;
  EgoState ego;
  VehicleDims ego_dims;
  std::vector<Track> tracks;
  int mode_label = 0;
  int episode_steps = 40;
  double dt = 0.5;
  ControlSeq demo;  // expert controls over the planning horizon
  HriScene hri;     // human-robot family only

  /// Scene seen by the ego at `time`: lanes re-windowed around the ego,
  /// neighbors at their scripted poses, nearest first within the radius.
  SceneContext context_at(const EgoState& ego_now, double time) const;
  SceneContext initial_context() const { return context_at(ego, 0.0); }
};

struct GeneratorOptions {
  int horizon = 20;
  int episode_steps = 40;
};

/// Deterministic per (family, seed, index); scenario i uses its own stream.
std::vector<Scenario> generate_scenarios(Family family, int count, std::uint64_t seed,
                                         const GeneratorOptions& opt = {});
Scenario generate_scenario(Family family, std::uint64_t seed, int index, const GeneratorOptions& opt = {});

inline constexpr int kScenarioVersion = 1;
nlohmann::json to_json(const Scenario& s);
Scenario scenario_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Closed loop.

/// Returns candidate control sequences for the scene (world frame).
using Planner = std::function<std::vector<ControlSeq>(const SceneContext&, const StlParams&, Rng&)>;

struct ClosedLoopOptions {
  int max_steps = 40;
  int horizon = 20;
  double lane_half_width = kLaneHalfWidth;
};

struct EpisodeStep {
  int step = 0;
  EgoState ego;
  double chosen_rho = 0.0;
  int chosen_index = 0;
  int valid_samples = 0;
  int samples = 0;
  Control control;
  double plan_seconds = 0.0;
};

enum class Termination { MaxSteps, Collision, OutOfLane };
const char* termination_name(Termination t);

struct EpisodeLog {
  std::string scenario_id;
  std::vector<EpisodeStep> steps;
  std::vector<EgoState> path;  // executed states, including the start
  Termination termination = Termination::MaxSteps;
};

/// Replans every step: samples candidates, keeps the one with the highest
/// exact robustness (lowest index on ties) and executes its first control.
EpisodeLog run_closed_loop(const Scenario& sc, const Planner& planner, const StlParams& gamma, std::uint64_t seed,
                           const ClosedLoopOptions& opt = {});

/// Index of the largest value, lowest index on ties.
int argmax_first(const std::vector<double>& xs);

nlohmann::json to_json(const EpisodeStep& s);

}  // namespace stldp
