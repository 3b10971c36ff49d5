#include "stldp/metrics.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace stldp {

std::vector<const Trajectory*> SceneSamples::valid() const {
  std::vector<const Trajectory*> v;
  for (std::size_t i = 0; i < trajectories.size(); ++i)
    if (rho[i] >= 0.0) v.push_back(&trajectories[i]);
  return v;
}

double compliance(const std::vector<SceneSamples>& scenes) {
  std::size_t total = 0, ok = 0;
  for (const auto& s : scenes) {
    total += s.rho.size();
    for (double r : s.rho) ok += r >= 0.0;
  }
  if (total == 0) throw std::invalid_argument("compliance of an empty sample set");
  return static_cast<double>(ok) / static_cast<double>(total);
}

double success(const std::vector<SceneSamples>& scenes) {
  if (scenes.empty()) throw std::invalid_argument("success rate of an empty scene set");
  std::size_t ok = 0;
  for (const auto& s : scenes) {
    for (double r : s.rho) {
      if (r >= 0.0) {
        ++ok;
        break;
      }
    }
  }
  return static_cast<double>(ok) / static_cast<double>(scenes.size());
}

namespace {

double area_of(const std::vector<const StateMatrix*>& valid, double cell) {
  std::set<std::pair<long long, long long>> cells;
  for (const StateMatrix* s : valid) {
    for (Eigen::Index t = 0; t < s->rows(); ++t) {
      cells.emplace(static_cast<long long>(std::floor((*s)(t, 0) / cell)),
                    static_cast<long long>(std::floor((*s)(t, 1) / cell)));
    }
  }
  return static_cast<double>(cells.size()) * cell * cell;
}

}  // namespace

double valid_area(const std::vector<const Trajectory*>& valid, double cell) {
  std::vector<const StateMatrix*> ptrs;
  for (const Trajectory* t : valid) ptrs.push_back(&t->states);
  return area_of(ptrs, cell);
}

double valid_area(const std::vector<StateMatrix>& valid, double cell) {
  std::vector<const StateMatrix*> ptrs;
  for (const auto& s : valid) ptrs.push_back(&s);
  return area_of(ptrs, cell);
}

double control_entropy(const std::vector<ControlMatrix>& valid, const ControlBox& box, int bins) {
  if (valid.size() < 2) return 0.0;
  const Eigen::Index T = valid.front().rows();
  const Control half = box.half_width(), center = box.center();
  const double n = static_cast<double>(valid.size());
  double acc = 0.0;
  std::vector<int> hist(static_cast<std::size_t>(bins));
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int j = 0; j < 2; ++j) {
      std::fill(hist.begin(), hist.end(), 0);
      for (const auto& u : valid) {
        const double z = j == 0 ? (u(t, 0) - center.w) / half.w : (u(t, 1) - center.a) / half.a;
        const int b = static_cast<int>(std::floor((z + 1.0) / 2.0 * bins));
        ++hist[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))];
      }
      double h = 0.0;
      for (int c : hist) {
        if (c == 0) continue;
        const double p = c / n;
        h -= p * std::log(p);
      }
      acc += 0.5 * h;
    }
  }
  return acc / static_cast<double>(T);
}

int distinct_endpoints(const std::vector<StateMatrix>& trajectories, double radius) {
  std::vector<std::pair<double, double>> kept;
  for (const auto& s : trajectories) {
    const double x = s(s.rows() - 1, 0), y = s(s.rows() - 1, 1);
    bool fresh = true;
    for (const auto& [kx, ky] : kept) {
      if (std::hypot(x - kx, y - ky) <= radius) {
        fresh = false;
        break;
      }
    }
    if (fresh) kept.emplace_back(x, y);
  }
  return static_cast<int>(kept.size());
}

OpenLoopSummary summarize(const std::vector<SceneSamples>& scenes) {
  OpenLoopSummary out;
  out.compliance = compliance(scenes);
  out.success = success(scenes);
  out.scenes = static_cast<int>(scenes.size());
  for (const auto& s : scenes) {
    out.samples += static_cast<int>(s.rho.size());
    const auto v = s.valid();
    out.valid_area += valid_area(v);
    std::vector<ControlMatrix> controls;
    for (const Trajectory* t : v) controls.push_back(t->controls.u);
    out.entropy += control_entropy(controls);
  }
  out.valid_area /= static_cast<double>(scenes.size());
  out.entropy /= static_cast<double>(scenes.size());
  return out;
}

ClosedLoopMetrics closed_loop_metrics(const EpisodeLog& log) {
  ClosedLoopMetrics m;
  for (std::size_t i = 1; i < log.path.size(); ++i)
    m.progress += std::hypot(log.path[i].x - log.path[i - 1].x, log.path[i].y - log.path[i - 1].y);
  m.collision = log.termination == Termination::Collision;
  m.out_of_lane = log.termination == Termination::OutOfLane;
  return m;
}

}  // namespace stldp
