#pragma once

// Open-loop sample metrics and closed-loop episode outcomes.

#include <vector>

#include "stldp/dynamics.hpp"
#include "stldp/simharness.hpp"

namespace stldp {

inline constexpr double kAreaCell = 0.5;  // m
inline constexpr int kEntropyBins = 8;

/// Generated plans for one scene with their exact robustness.
struct SceneSamples {
  std::vector<Trajectory> trajectories;
  std::vector<double> rho;

  std::vector<const Trajectory*> valid() const;
};

/// Fraction of all samples with rho >= 0. Throws std::invalid_argument when
/// there are no samples.
double compliance(const std::vector<SceneSamples>& scenes);
/// Fraction of scenes with at least one rho >= 0 sample.
double success(const std::vector<SceneSamples>& scenes);

/// Distinct (floor(x/cell), floor(y/cell)) cells touched by any state,
/// times the cell area.
double valid_area(const std::vector<const Trajectory*>& valid, double cell = kAreaCell);
double valid_area(const std::vector<StateMatrix>& valid, double cell = kAreaCell);

/// Per step and channel, the Shannon entropy (nats) of the normalized
/// controls binned uniformly on [-1, 1]; channels then steps averaged.
double control_entropy(const std::vector<ControlMatrix>& valid, const ControlBox& box = {}, int bins = kEntropyBins);

/// Greedy count of trajectories whose endpoint is farther than `radius`
/// from every endpoint already counted.
int distinct_endpoints(const std::vector<StateMatrix>& trajectories, double radius = 0.5);

struct OpenLoopSummary {
  double compliance = 0.0;
  double success = 0.0;
  double valid_area = 0.0;  // mean over scenes, zero for scenes with no valid sample
  double entropy = 0.0;     // same averaging
  int samples = 0;
  int scenes = 0;
};
OpenLoopSummary summarize(const std::vector<SceneSamples>& scenes);

struct ClosedLoopMetrics {
  double progress = 0.0;  // executed arc length, m
  bool collision = false;
  bool out_of_lane = false;
};
ClosedLoopMetrics closed_loop_metrics(const EpisodeLog& log);

}  // namespace stldp
