#pragma once

// Data augmentation: projected gradient ascent on smooth robustness from
// uniformly sampled control sequences, for every feasible driving mode.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stldp/parallel.hpp"
#include "stldp/scene.hpp"

namespace stldp {

struct TrajoptOptions {
  int iters = 500;
  double lr = 0.05;
  double margin = 0.01;  // early stop once exact robustness reaches this
  double beta = 50.0;
  double lr_floor = 1.0;  // final learning rate as a fraction of lr (linear decay)
  int horizon = 20;
  ControlBox box;
};

struct TrajoptResult {
  ControlSeq u;  // best iterate by exact robustness, inside the box
  double rho = 0.0;
  int iterations = 0;
  bool converged = false;  // rho >= 0
};

/// Adam on the normalized controls, projected onto [-1, 1] after every step.
/// Descends -smooth_rho while the exact robustness is below the margin.
TrajoptResult trajopt(const RuleProblem& p, const ControlSeq& u_init, const TrajoptOptions& opt);
TrajoptResult trajopt(const SceneContext& c, const StlParams& g, const ControlSeq& u_init,
                      const TrajoptOptions& opt);

ControlSeq uniform_controls(Rng& rng, int horizon, const ControlBox& box, double dt = 0.5);

struct Solution {
  ControlSeq u;
  double rho = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct AugmentedRecord {
  std::string scene_id;
  std::string kind = "driving";  // or "hri"
  SceneContext scene;
  StlParams gamma;
  HriScene hri;
  HriParams hri_gamma;
  std::uint64_t seed = 0;
  std::vector<Solution> solutions;
  std::vector<std::string> skipped_modes;  // modes of this scene without a lane

  std::vector<int> valid_indices() const;
  RuleProblem problem(int horizon) const;
};

struct AugmentOptions {
  int k = 64;
  std::uint64_t seed = 0;
  TrajoptOptions trajopt;
};

/// One record per feasible mode (lane-keep, left, right), gamma's mode
/// replaced. Restart j of mode m draws from the stream keyed by
/// (scene id, m, j), so results do not depend on evaluation order.
std::vector<AugmentedRecord> augment_scene(const SceneContext& c, const StlParams& g, const AugmentOptions& opt);
AugmentedRecord augment_hri(const HriScene& c, const HriParams& g, const AugmentOptions& opt);

inline constexpr int kRecordVersion = 1;
nlohmann::json to_json(const AugmentedRecord& r);
AugmentedRecord record_from_json(const nlohmann::json& j);

nlohmann::json controls_json(const ControlMatrix& u);
ControlMatrix controls_from_json(const nlohmann::json& j);

const char* mode_name(Mode m);

}  // namespace stldp
