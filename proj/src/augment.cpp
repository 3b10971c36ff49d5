#include "stldp/augment.hpp"

#include <cmath>

#include "stldp/errors.hpp"

namespace stldp {

using nlohmann::json;

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::LaneKeep: return "keep";
    case Mode::LeftChange: return "left";
    case Mode::RightChange: return "right";
  }
  return "?";
}

ControlSeq uniform_controls(Rng& rng, int horizon, const ControlBox& box, double dt) {
  std::uniform_real_distribution<double> w(box.lo.w, box.hi.w), a(box.lo.a, box.hi.a);
  ControlSeq u;
  u.dt = dt;
  u.u.resize(horizon, 2);
  for (int t = 0; t < horizon; ++t) {
    u.u(t, 0) = w(rng);
    u.u(t, 1) = a(rng);
  }
  return u;
}

TrajoptResult trajopt(const RuleProblem& p, const ControlSeq& u_init, const TrajoptOptions& opt) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const Control half = opt.box.half_width();
  ControlMatrix z = normalize(u_init.u, opt.box);
  ControlMatrix m = ControlMatrix::Zero(z.rows(), 2), v = m;
  ControlSeq u = u_init;

  TrajoptResult best;
  best.rho = -std::numeric_limits<double>::infinity();
  for (int it = 0;; ++it) {
    const Trajectory tr = rollout(p.start, u);
    const stl::Signal sig = p.extract(tr.states);
    const double rho = stl::robustness(p.formula, sig, 0);
    if (rho > best.rho) {
      best.rho = rho;
      best.u = u;
      best.iterations = it;
    }
    if (rho >= opt.margin || it == opt.iters) break;

    const stl::SmoothResult sr = stl::robustness_smooth(p.formula, sig, opt.beta, 0);
    const ControlMatrix gu = rollout_grad(p.start, u, p.extract_backward(tr.states, sr.grad));
    const double c1 = 1.0 - std::pow(b1, it + 1), c2 = 1.0 - std::pow(b2, it + 1);
    const double lr = opt.lr * (1.0 - (1.0 - opt.lr_floor) * it / std::max(1, opt.iters));
    for (Eigen::Index t = 0; t < z.rows(); ++t) {
      for (int j = 0; j < 2; ++j) {
        const double g = -gu(t, j) * (j == 0 ? half.w : half.a);
        m(t, j) = b1 * m(t, j) + (1 - b1) * g;
        v(t, j) = b2 * v(t, j) + (1 - b2) * g * g;
        z(t, j) -= lr * (m(t, j) / c1) / (std::sqrt(v(t, j) / c2) + eps);
        z(t, j) = std::clamp(z(t, j), -1.0, 1.0);
      }
    }
    u.u = denormalize(z, opt.box);
    // Rounding in the affine map can leave the box by an ulp.
    u = clamp(u, opt.box);
  }
  best.converged = best.rho >= 0.0;
  return best;
}

TrajoptResult trajopt(const SceneContext& c, const StlParams& g, const ControlSeq& u_init,
                      const TrajoptOptions& opt) {
  return trajopt(make_problem(c, g, opt.horizon), u_init, opt);
}

namespace {

std::vector<Solution> restarts(const RuleProblem& p, const std::string& stream, double dt, const AugmentOptions& opt) {
  std::vector<Solution> out(static_cast<std::size_t>(opt.k));
  for (int j = 0; j < opt.k; ++j) {
    Rng rng = stream_rng(opt.seed, stream + "/" + std::to_string(j));
    const TrajoptResult r = trajopt(p, uniform_controls(rng, opt.trajopt.horizon, opt.trajopt.box, dt), opt.trajopt);
    out[static_cast<std::size_t>(j)] = {r.u, r.rho, r.iterations, r.converged};
  }
  return out;
}

}  // namespace

std::vector<AugmentedRecord> augment_scene(const SceneContext& c, const StlParams& g, const AugmentOptions& opt) {
  std::vector<AugmentedRecord> out;
  std::vector<std::string> skipped;
  for (Mode m : {Mode::LaneKeep, Mode::LeftChange, Mode::RightChange}) {
    if (!c.mode_feasible(m)) skipped.emplace_back(mode_name(m));
  }
  for (Mode m : {Mode::LaneKeep, Mode::LeftChange, Mode::RightChange}) {
    if (!c.mode_feasible(m)) continue;
    AugmentedRecord r;
    r.scene_id = c.id;
    r.scene = c;
    r.gamma = g;
    r.gamma.mode = m;
    r.seed = opt.seed;
    r.skipped_modes = skipped;
    r.solutions = restarts(r.problem(opt.trajopt.horizon), c.id + "/" + mode_name(m), c.dt, opt);
    out.push_back(std::move(r));
  }
  return out;
}

AugmentedRecord augment_hri(const HriScene& c, const HriParams& g, const AugmentOptions& opt) {
  AugmentedRecord r;
  r.kind = "hri";
  r.scene_id = c.id;
  r.hri = c;
  r.hri_gamma = g;
  r.seed = opt.seed;
  r.solutions = restarts(r.problem(opt.trajopt.horizon), c.id + "/hri", c.dt, opt);
  return r;
}

std::vector<int> AugmentedRecord::valid_indices() const {
  std::vector<int> v;
  for (std::size_t i = 0; i < solutions.size(); ++i)
    if (solutions[i].rho >= 0.0) v.push_back(static_cast<int>(i));
  return v;
}

RuleProblem AugmentedRecord::problem(int horizon) const {
  return kind == "hri" ? make_problem(hri, hri_gamma, horizon) : make_problem(scene, gamma, horizon);
}

json controls_json(const ControlMatrix& u) {
  json a = json::array();
  for (Eigen::Index t = 0; t < u.rows(); ++t) a.push_back({u(t, 0), u(t, 1)});
  return a;
}

ControlMatrix controls_from_json(const json& j) {
  if (!j.is_array()) throw DataError("controls must be an array of [w, a] pairs");
  ControlMatrix u(static_cast<Eigen::Index>(j.size()), 2);
  for (std::size_t t = 0; t < j.size(); ++t) {
    if (!j[t].is_array() || j[t].size() != 2) throw DataError("controls must be an array of [w, a] pairs");
    u(static_cast<Eigen::Index>(t), 0) = j[t][0].get<double>();
    u(static_cast<Eigen::Index>(t), 1) = j[t][1].get<double>();
  }
  return u;
}

json to_json(const AugmentedRecord& r) {
  json sols = json::array();
  for (const auto& s : r.solutions) {
    sols.push_back({{"u", controls_json(s.u.u)},
                    {"rho", s.rho},
                    {"iterations", s.iterations},
                    {"converged", s.converged}});
  }
  json j = {{"version", kRecordVersion}, {"kind", r.kind},       {"scene_id", r.scene_id},
            {"seed", r.seed},            {"solutions", sols},    {"valid", r.valid_indices()},
            {"skipped_modes", r.skipped_modes}};
  if (r.kind == "hri") {
    j["hri"] = to_json(r.hri);
    j["hri_gamma"] = {r.hri_gamma.d_coll, r.hri_gamma.r_goal};
  } else {
    j["scene"] = to_json(r.scene);
    j["gamma"] = to_json(r.gamma);
  }
  return j;
}

AugmentedRecord record_from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != kRecordVersion) {
      throw DataError("augmented record version " + j.at("version").dump() + " is not supported (expected " +
                      std::to_string(kRecordVersion) + ")");
    }
    AugmentedRecord r;
    r.kind = j.at("kind").get<std::string>();
    r.scene_id = j.at("scene_id").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    if (r.kind == "hri") {
      r.hri = hri_from_json(j.at("hri"));
      r.hri_gamma = {j.at("hri_gamma").at(0).get<double>(), j.at("hri_gamma").at(1).get<double>()};
    } else if (r.kind == "driving") {
      r.scene = scene_from_json(j.at("scene"));
      r.gamma = params_from_json(j.at("gamma"));
    } else {
      throw DataError("unknown record kind '" + r.kind + "'");
    }
    const double dt = r.kind == "hri" ? r.hri.dt : r.scene.dt;
    for (const auto& s : j.at("solutions")) {
      Solution sol;
      sol.u.u = controls_from_json(s.at("u"));
      sol.u.dt = dt;
      sol.rho = s.at("rho").get<double>();
      sol.iterations = s.at("iterations").get<int>();
      sol.converged = s.at("converged").get<bool>();
      r.solutions.push_back(std::move(sol));
    }
    r.skipped_modes = j.value("skipped_modes", std::vector<std::string>{});
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed augmented record: ") + e.what());
  }
}

}  // namespace stldp
