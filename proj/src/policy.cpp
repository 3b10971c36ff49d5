#include "stldp/policy.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>

#include "stldp/errors.hpp"

namespace stldp::policy {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schedule

const char* noise_mode_name(NoiseMode m) { return m == NoiseMode::Posterior ? "posterior" : "unit"; }

NoiseMode parse_noise_mode(const std::string& s) {
  if (s == "posterior") return NoiseMode::Posterior;
  if (s == "unit") return NoiseMode::Unit;
  throw DataError("unknown noise mode '" + s + "' (expected posterior or unit)");
}

Schedule Schedule::cosine(int steps, double s, double clip_lo, double clip_hi, NoiseMode noise) {
  if (steps < 1) throw std::invalid_argument("diffusion schedule needs at least one step");
  auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  Schedule sc;
  sc.steps = steps;
  sc.noise = noise;
  sc.alpha.assign(static_cast<std::size_t>(steps + 1), 1.0);
  sc.alpha_bar.assign(static_cast<std::size_t>(steps + 1), 1.0);
  sc.sigma.assign(static_cast<std::size_t>(steps + 1), 0.0);
  const double f0 = f(0);
  double prev = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double raw = (f(t) / f0) / prev;
    sc.alpha[t] = std::clamp(raw, clip_lo, clip_hi);
    sc.alpha_bar[t] = sc.alpha_bar[t - 1] * sc.alpha[t];
    prev = f(t) / f0;
    sc.sigma[t] = t >= 2 ? 1.0 : 0.0;
  }
  return sc;
}

double Schedule::noise_std(int t) const {
  if (noise == NoiseMode::Unit) return sigma[t];
  const double beta = 1.0 - alpha[t];
  const double tilde = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta;
  return sigma[t] * std::sqrt(tilde);
}

// ---------------------------------------------------------------------------
// Features

SceneFeatures scene_features(const SceneContext& world) {
  const SceneContext c = to_ego_frame(world);
  SceneFeatures f;
  f.ego << c.ego.x / kPositionScale, c.ego.y / kPositionScale, c.ego.theta, c.ego.v / kSpeedScale;
  f.lanes.setZero();
  for (int k = 0; k < 3; ++k) {
    const Lane& lane = c.lanes[static_cast<std::size_t>(k)];
    if (!lane.valid) continue;
    f.lanes(0, k) = 1.0;
    for (int i = 0; i < kLanePoints; ++i) {
      const Waypoint& p = lane.pts[static_cast<std::size_t>(i)];
      f.lanes(1 + 4 * i, k) = p.x / kPositionScale;
      f.lanes(2 + 4 * i, k) = p.y / kPositionScale;
      f.lanes(3 + 4 * i, k) = std::cos(p.theta);
      f.lanes(4 + 4 * i, k) = std::sin(p.theta);
    }
  }
  std::vector<std::array<double, kNeighborFeatures>> rows;
  for (const Neighbor& n : c.neighbors) {
    std::array<double, kNeighborFeatures> r{};
    if (n.valid) {
      r = {1.0,
           n.x / kPositionScale,
           n.y / kPositionScale,
           std::cos(n.theta),
           std::sin(n.theta),
           n.v / kSpeedScale,
           n.dims.length / 5.0,
           n.dims.width / 5.0};
    }
    rows.push_back(r);
  }
  std::sort(rows.begin(), rows.end());
  for (int j = 0; j < kNeighborSlots; ++j) {
    for (int i = 0; i < kNeighborFeatures; ++i) f.neighbors(i, j) = rows[static_cast<std::size_t>(j)][i];
  }
  return f;
}

// ---------------------------------------------------------------------------
// Model

json PolicyConfig::to_json() const {
  return {{"d", d},
          {"hidden", hidden},
          {"horizon", horizon},
          {"diffusion_steps", diffusion_steps},
          {"dt", dt},
          {"box", {box.lo.w, box.lo.a, box.hi.w, box.hi.a}},
          {"noise", noise_mode_name(noise)},
          {"clip_denoised", clip_denoised}};
}

PolicyConfig PolicyConfig::from_json(const json& j) {
  try {
    PolicyConfig c;
    c.d = j.at("d").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.horizon = j.at("horizon").get<int>();
    c.diffusion_steps = j.at("diffusion_steps").get<int>();
    c.dt = j.at("dt").get<double>();
    const auto& b = j.at("box");
    c.box.lo = {b.at(0).get<double>(), b.at(1).get<double>()};
    c.box.hi = {b.at(2).get<double>(), b.at(3).get<double>()};
    c.noise = parse_noise_mode(j.at("noise").get<std::string>());
    c.clip_denoised = j.value("clip_denoised", true);
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed policy config: ") + e.what());
  }
}

PolicyModel::PolicyModel(const PolicyConfig& c, std::uint64_t seed) : cfg(c) {
  Rng rng = stream_rng(seed, "policy-init");
  const int h = cfg.hidden, d = cfg.d, L = cfg.latent();
  g_ego = nn::Mlp("g_ego", {kEgoFeatures, h, h, d}, rng);
  g_lane = nn::Mlp("g_lane", {kLaneFeatures, h, h, d}, rng);
  g_nei = nn::Mlp("g_nei", {kNeighborFeatures, h, h, d}, rng);
  g_d = nn::Mlp("g_d", {cfg.z_size() + 7 + L + 1, h, h, L}, rng);
  g_r = nn::Mlp("g_r", {cfg.z_size() + 7 + L, h, h, L}, rng);
  g_r.zero_output_layer();
  schedule = Schedule::cosine(cfg.diffusion_steps, 0.008, 0.001, 0.999, cfg.noise);
}

namespace {

template <typename P>
void append(std::vector<P>& out, std::vector<P> more) {
  out.insert(out.end(), more.begin(), more.end());
}

}  // namespace

std::vector<nn::ParamTensor*> PolicyModel::encoder_params() {
  std::vector<nn::ParamTensor*> out;
  append(out, g_ego.params());
  append(out, g_lane.params());
  append(out, g_nei.params());
  return out;
}

std::vector<nn::ParamTensor*> PolicyModel::ddpm_params() {
  auto out = encoder_params();
  append(out, g_d.params());
  return out;
}

std::vector<nn::ParamTensor*> PolicyModel::refine_params() { return g_r.params(); }

std::vector<const nn::ParamTensor*> PolicyModel::all_params() const {
  std::vector<const nn::ParamTensor*> out;
  for (const nn::Mlp* net : {&g_ego, &g_lane, &g_nei, &g_d, &g_r}) append(out, net->params());
  return out;
}

void PolicyModel::save(const std::string& path, const json& meta) const {
  json m = meta;
  m["config"] = cfg.to_json();
  nn::save_checkpoint(path, all_params(), m);
}

PolicyModel PolicyModel::load(const std::string& path, json* meta) {
  const json m = nn::read_checkpoint_meta(path);
  if (!m.contains("config")) throw DataError("checkpoint '" + path + "' has no policy config");
  PolicyModel model(PolicyConfig::from_json(m.at("config")), 0);
  std::vector<nn::ParamTensor*> ps = model.ddpm_params();
  append(ps, model.refine_params());
  nn::load_checkpoint(path, ps);
  if (meta) *meta = m;
  return model;
}

// ---------------------------------------------------------------------------
// Encoder

Eigen::MatrixXd encode(const PolicyModel& m, const std::vector<const SceneFeatures*>& scenes, EncoderTape* tape) {
  const int R = static_cast<int>(scenes.size()), d = m.cfg.d;
  Eigen::MatrixXd ego(kEgoFeatures, R), lanes(kLaneFeatures, 3 * R), nei(kNeighborFeatures, kNeighborSlots * R);
  for (int r = 0; r < R; ++r) {
    ego.col(r) = scenes[r]->ego;
    lanes.middleCols(3 * r, 3) = scenes[r]->lanes;
    nei.middleCols(kNeighborSlots * r, kNeighborSlots) = scenes[r]->neighbors;
  }
  const Eigen::MatrixXd e_ego = m.g_ego.forward(ego, tape ? &tape->ego : nullptr);
  const Eigen::MatrixXd e_lane = m.g_lane.forward(lanes, tape ? &tape->lane : nullptr);
  const Eigen::MatrixXd e_nei = m.g_nei.forward(nei, tape ? &tape->nei : nullptr);

  Eigen::MatrixXd z(7 * d, R);
  if (tape) {
    tape->scenes = R;
    tape->arg_max.resize(d, R);
    tape->arg_min.resize(d, R);
  }
  for (int r = 0; r < R; ++r) {
    z.block(0, r, d, 1) = e_ego.col(r);
    for (int k = 0; k < 3; ++k) z.block((1 + k) * d, r, d, 1) = e_lane.col(3 * r + k);
    for (int i = 0; i < d; ++i) {
      int imax = 0, imin = 0;
      double vmax = e_nei(i, kNeighborSlots * r), vmin = vmax, sum = 0.0;
      for (int j = 0; j < kNeighborSlots; ++j) {
        const double v = e_nei(i, kNeighborSlots * r + j);
        if (v > vmax) vmax = v, imax = j;
        if (v < vmin) vmin = v, imin = j;
        sum += v;
      }
      z(4 * d + i, r) = vmax;
      z(5 * d + i, r) = vmin;
      z(6 * d + i, r) = sum;
      if (tape) {
        tape->arg_max(i, r) = imax;
        tape->arg_min(i, r) = imin;
      }
    }
  }
  return z;
}

Eigen::VectorXd encode(const PolicyModel& m, const SceneContext& c) {
  const SceneFeatures f = scene_features(c);
  return encode(m, {&f}).col(0);
}

void encode_backward(PolicyModel& m, const EncoderTape& tape, const Eigen::MatrixXd& dz) {
  const int R = tape.scenes, d = m.cfg.d;
  Eigen::MatrixXd d_ego = dz.topRows(d);
  Eigen::MatrixXd d_lane(d, 3 * R), d_nei = Eigen::MatrixXd::Zero(d, kNeighborSlots * R);
  for (int r = 0; r < R; ++r) {
    for (int k = 0; k < 3; ++k) d_lane.col(3 * r + k) = dz.block((1 + k) * d, r, d, 1);
    for (int i = 0; i < d; ++i) {
      d_nei(i, kNeighborSlots * r + tape.arg_max(i, r)) += dz(4 * d + i, r);
      d_nei(i, kNeighborSlots * r + tape.arg_min(i, r)) += dz(5 * d + i, r);
      for (int j = 0; j < kNeighborSlots; ++j) d_nei(i, kNeighborSlots * r + j) += dz(6 * d + i, r);
    }
  }
  m.g_ego.backward(tape.ego, d_ego);
  m.g_lane.backward(tape.lane, d_lane);
  m.g_nei.backward(tape.nei, d_nei);
}

Eigen::VectorXd gamma_vector(const StlParams& g) {
  Eigen::VectorXd out(7);
  // Clearance saturates at the perception radius; the no-neighbor sentinel
  // would otherwise dominate every other input.
  out << static_cast<double>(g.mode), g.v_min / kSpeedScale, g.v_max / kSpeedScale,
      std::min(g.d_safe, kPerceptionRadius) / kPositionScale, g.d_min, g.d_max, g.theta_max;
  return out;
}

Eigen::VectorXd to_latent(const ControlMatrix& u, const ControlBox& box) {
  const ControlMatrix z = normalize(u, box);
  Eigen::VectorXd out(2 * z.rows());
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    out[2 * t] = z(t, 0);
    out[2 * t + 1] = z(t, 1);
  }
  return out;
}

ControlSeq from_latent(const Eigen::VectorXd& latent, const ControlBox& box, double dt) {
  ControlMatrix z(latent.size() / 2, 2);
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    z(t, 0) = latent[2 * t];
    z(t, 1) = latent[2 * t + 1];
  }
  return {denormalize(z, box), dt};
}

Eigen::VectorXd clamp_latent(const Eigen::VectorXd& latent) { return latent.cwiseMax(-1.0).cwiseMin(1.0); }

namespace {

Eigen::VectorXd latent_gradient(const ControlMatrix& gu, const ControlBox& box) {
  const Control h = box.half_width();
  Eigen::VectorXd out(2 * gu.rows());
  for (Eigen::Index t = 0; t < gu.rows(); ++t) {
    out[2 * t] = gu(t, 0) * h.w;
    out[2 * t + 1] = gu(t, 1) * h.a;
  }
  return out;
}

/// Smooth robustness of the clamped rollout of a latent, with its gradient.
double guided_objective(const RuleProblem& p, const Eigen::VectorXd& latent, const PolicyConfig& cfg, double beta,
                        Eigen::VectorXd* grad) {
  const ControlSeq raw = from_latent(latent, cfg.box, cfg.dt);
  const ControlSeq u = clamp(raw, cfg.box);
  const RuleGradient rg = rule_smooth_gradient(p, u, beta);
  if (grad) *grad = latent_gradient(clamp_backward(raw, cfg.box, rg.grad), cfg.box);
  return rg.smooth;
}

Eigen::MatrixXd standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) out(i, j) = n(rng);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Training: DDPM

namespace {

struct DdpmItem {
  int record = 0;
  Eigen::VectorXd latent;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::vector<EpochLog> train_ddpm(PolicyModel& m, const std::vector<AugmentedRecord>& records,
                                 const DdpmTrainOptions& opt) {
  const PolicyConfig& cfg = m.cfg;
  const int L = cfg.latent(), Z = cfg.z_size();
  std::vector<SceneFeatures> features;
  std::vector<Eigen::VectorXd> gammas;
  std::vector<DdpmItem> items;
  for (const AugmentedRecord& r : records) {
    if (r.kind != "driving") continue;
    const int idx = static_cast<int>(features.size());
    features.push_back(scene_features(r.scene));
    gammas.push_back(gamma_vector(r.gamma));
    for (int i : r.valid_indices()) {
      const ControlMatrix& u = r.solutions[static_cast<std::size_t>(i)].u.u;
      if (u.rows() != cfg.horizon) throw DataError("record " + r.scene_id + " has a solution of the wrong horizon");
      items.push_back({idx, to_latent(u, cfg.box)});
    }
  }
  if (items.empty()) throw DataError("no valid driving solutions to train on");

  Rng rng = stream_rng(opt.seed, "train-ddpm");
  std::uniform_int_distribution<int> pick_t(1, cfg.diffusion_steps);
  const nn::Adam adam{opt.lr};
  auto params = m.ddpm_params();
  nn::zero_grad(params);

  const int B = opt.batch;
  const int steps_per_epoch = static_cast<int>((items.size() + B - 1) / B);
  std::vector<int> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> log;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t cursor = order.size();

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      // Batch assembly: distinct records are encoded once.
      std::vector<int> batch(static_cast<std::size_t>(B));
      for (int b = 0; b < B; ++b) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        batch[static_cast<std::size_t>(b)] = order[cursor++];
      }
      std::vector<int> slot(features.size(), -1);
      std::vector<const SceneFeatures*> scenes;
      for (int i : batch) {
        const int rec = items[static_cast<std::size_t>(i)].record;
        if (slot[static_cast<std::size_t>(rec)] < 0) {
          slot[static_cast<std::size_t>(rec)] = static_cast<int>(scenes.size());
          scenes.push_back(&features[static_cast<std::size_t>(rec)]);
        }
      }
      EncoderTape etape;
      const Eigen::MatrixXd z = encode(m, scenes, &etape);

      Eigen::MatrixXd x(Z + 7 + L + 1, B), eps = standard_normal(rng, L, B);
      for (int b = 0; b < B; ++b) {
        const DdpmItem& it = items[static_cast<std::size_t>(batch[static_cast<std::size_t>(b)])];
        const int t = pick_t(rng);
        const double ab = m.schedule.alpha_bar[t];
        x.block(0, b, Z, 1) = z.col(slot[static_cast<std::size_t>(it.record)]);
        x.block(Z, b, 7, 1) = gammas[static_cast<std::size_t>(it.record)];
        x.block(Z + 7, b, L, 1) = std::sqrt(ab) * it.latent + std::sqrt(1.0 - ab) * eps.col(b);
        x(Z + 7 + L, b) = static_cast<double>(t) / cfg.diffusion_steps;
      }
      nn::Tape tape;
      const Eigen::MatrixXd pred = m.g_d.forward(x, &tape);
      const Eigen::MatrixXd diff = pred - eps;
      const double scale = 1.0 / (static_cast<double>(B) * L);
      epoch_loss += diff.squaredNorm() * scale;
      const Eigen::MatrixXd dx = m.g_d.backward(tape, 2.0 * scale * diff);

      Eigen::MatrixXd dz = Eigen::MatrixXd::Zero(Z, static_cast<Eigen::Index>(scenes.size()));
      for (int b = 0; b < B; ++b) {
        const int rec = items[static_cast<std::size_t>(batch[static_cast<std::size_t>(b)])].record;
        dz.col(slot[static_cast<std::size_t>(rec)]) += dx.block(0, b, Z, 1);
      }
      encode_backward(m, etape, dz);
      adam.step(params);
    }
    log.push_back({epoch, epoch_loss / steps_per_epoch, seconds_since(t0)});
    if (opt.on_epoch) opt.on_epoch(log.back());
  }
  return log;
}

// ---------------------------------------------------------------------------
// Sampling

const char* guidance_name(Guidance g) {
  switch (g) {
    case Guidance::Off: return "off";
    case Guidance::LastK: return "last5";
    case Guidance::EveryStep: return "every";
  }
  return "?";
}

Guidance parse_guidance(const std::string& s) {
  if (s == "off") return Guidance::Off;
  if (s == "last5") return Guidance::LastK;
  if (s == "every") return Guidance::EveryStep;
  throw DataError("unknown guidance mode '" + s + "' (expected off, last5 or every)");
}

std::vector<double> guide_latent(Eigen::Ref<Eigen::VectorXd> latent, const RuleProblem& p, const PolicyConfig& cfg,
                                 const GuidanceOptions& g) {
  Eigen::VectorXd grad, cand_grad;
  double f = guided_objective(p, latent, cfg, g.beta, &grad);
  std::vector<double> accepted{f};
  double step = g.lr;
  for (int it = 0; it < g.steps; ++it) {
    const Eigen::VectorXd cand = latent + step * grad;
    const double fc = guided_objective(p, cand, cfg, g.beta, &cand_grad);
    if (fc > f) {
      latent = cand;
      f = fc;
      grad = cand_grad;
      accepted.push_back(f);
    } else {
      step *= 0.5;
    }
  }
  return accepted;
}

DenoiseOutput denoise(const PolicyModel& m, const Eigen::VectorXd& z, const Eigen::VectorXd& gamma, int n, Rng& rng,
                      const GuidanceOptions& guidance, const RuleProblem* problem) {
  const PolicyConfig& cfg = m.cfg;
  const Schedule& sc = m.schedule;
  const int L = cfg.latent(), Z = cfg.z_size(), Td = cfg.diffusion_steps;
  if (guidance.mode != Guidance::Off && !problem) throw std::invalid_argument("guided sampling needs a rule problem");

  DenoiseOutput out;
  Eigen::MatrixXd x = standard_normal(rng, L, n);
  Eigen::MatrixXd in(Z + 7 + L + 1, n);
  in.topRows(Z) = z.replicate(1, n);
  in.middleRows(Z, 7) = gamma.replicate(1, n);
  for (int t = Td; t >= 1; --t) {
    in.middleRows(Z + 7, L) = x;
    in.row(Z + 7 + L).setConstant(static_cast<double>(t) / Td);
    const Eigen::MatrixXd eps = m.g_d.forward(in);
    const double a = sc.alpha[t], ab = sc.alpha_bar[t];
    Eigen::MatrixXd mean;
    if (cfg.clip_denoised) {
      const double ab_prev = sc.alpha_bar[t - 1];
      const Eigen::MatrixXd x0 =
          ((x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).cwiseMax(-1.0).cwiseMin(1.0);
      mean = (std::sqrt(ab_prev) * (1.0 - a) / (1.0 - ab)) * x0 + (std::sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)) * x;
    } else {
      mean = (x - ((1.0 - a) / std::sqrt(1.0 - ab)) * eps) / std::sqrt(a);
    }

    const bool guided = guidance.mode == Guidance::EveryStep || (guidance.mode == Guidance::LastK && t <= guidance.last_k);
    if (guided) {
      for (int j = 0; j < n; ++j) {
        out.guided_evaluations += 1 + guidance.steps;
        Eigen::VectorXd col = mean.col(j);
        guide_latent(col, *problem, cfg, guidance);
        mean.col(j) = col;
      }
    }
    const double s = sc.noise_std(t);
    x = s > 0.0 ? Eigen::MatrixXd(mean + s * standard_normal(rng, L, n)) : mean;
    if (t <= kBankSize) out.bank.push_back(x);
  }
  out.latent = x;
  return out;
}

int select_from_bank(const std::vector<double>& rho) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(rho.size()); ++i) {
    if (rho[static_cast<std::size_t>(i)] >= rho[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

Planner make_planner(const PolicyModel& m, const PlanOptions& opt) {
  return [&m, opt](const SceneContext& c, const StlParams& g, Rng& rng) {
    std::vector<ControlSeq> out;
    for (PlanSample& s : plan(m, c, g, rng, opt)) out.push_back(std::move(s.u));
    return out;
  };
}

Eigen::MatrixXd refine_latents(const PolicyModel& m, const Eigen::VectorXd& z, const Eigen::VectorXd& gamma,
                               const Eigen::MatrixXd& latent_d, const std::vector<double>& rho_d) {
  const int Z = m.cfg.z_size(), L = m.cfg.latent();
  Eigen::MatrixXd out = latent_d;
  std::vector<int> open;
  for (int j = 0; j < static_cast<int>(rho_d.size()); ++j) {
    if (rho_d[static_cast<std::size_t>(j)] < 0.0) open.push_back(j);
  }
  if (open.empty()) return out;
  Eigen::MatrixXd in(Z + 7 + L, static_cast<Eigen::Index>(open.size()));
  for (std::size_t k = 0; k < open.size(); ++k) {
    in.block(0, k, Z, 1) = z;
    in.block(Z, k, 7, 1) = gamma;
    in.block(Z + 7, k, L, 1) = latent_d.col(open[k]);
  }
  const Eigen::MatrixXd res = m.g_r.forward(in);
  for (std::size_t k = 0; k < open.size(); ++k) {
    out.col(open[k]) = clamp_latent(latent_d.col(open[k]) + res.col(static_cast<Eigen::Index>(k)));
  }
  return out;
}

std::vector<PlanSample> plan(const PolicyModel& m, const SceneContext& c, const StlParams& g, Rng& rng,
                             const PlanOptions& opt) {
  const PolicyConfig& cfg = m.cfg;
  const RuleProblem p = make_problem(c, g, cfg.horizon);
  const Eigen::VectorXd z = encode(m, c), gamma = gamma_vector(g);
  const DenoiseOutput dn = denoise(m, z, gamma, opt.samples, rng, opt.guidance, &p);

  const int n = opt.samples;
  Eigen::MatrixXd latent_d(cfg.latent(), n);
  std::vector<double> rho_d(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    if (!opt.use_bank) {
      latent_d.col(j) = clamp_latent(dn.latent.col(j));
      rho_d[j] = rule_robustness(p, from_latent(latent_d.col(j), cfg.box, cfg.dt));
      continue;
    }
    std::vector<double> rho;
    std::vector<Eigen::VectorXd> cands;
    for (const Eigen::MatrixXd& b : dn.bank) {
      cands.push_back(clamp_latent(b.col(j)));
      rho.push_back(rule_robustness(p, from_latent(cands.back(), cfg.box, cfg.dt)));
    }
    const int k = select_from_bank(rho);
    latent_d.col(j) = cands[static_cast<std::size_t>(k)];
    rho_d[j] = rho[static_cast<std::size_t>(k)];
  }

  const Eigen::MatrixXd latent_f = opt.refine ? refine_latents(m, z, gamma, latent_d, rho_d) : latent_d;
  std::vector<PlanSample> out(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    PlanSample& s = out[static_cast<std::size_t>(j)];
    s.u_d = from_latent(latent_d.col(j), cfg.box, cfg.dt);
    s.rho_d = rho_d[j];
    s.refined = opt.refine && rho_d[j] < 0.0;
    s.u = s.refined ? from_latent(latent_f.col(j), cfg.box, cfg.dt) : s.u_d;
    s.traj = rollout(c.ego, s.u);
    s.rho = s.refined ? rule_robustness_states(p, s.traj.states) : s.rho_d;
  }
  return out;
}

// ---------------------------------------------------------------------------
// DPP

double median_pairwise_distance(const Eigen::MatrixXd& tau) {
  std::vector<double> d;
  for (Eigen::Index i = 0; i < tau.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < tau.rows(); ++j) d.push_back((tau.row(i) - tau.row(j)).norm());
  }
  if (d.empty()) return 1.0;
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  return med > 0.0 ? med : 1.0;
}

namespace {

Eigen::MatrixXd similarity(const Eigen::MatrixXd& tau, double ell) {
  const Eigen::Index n = tau.rows();
  Eigen::MatrixXd e(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    e(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      e(i, j) = e(j, i) = std::exp(-(tau.row(i) - tau.row(j)).squaredNorm() / (ell * ell));
    }
  }
  return e;
}

}  // namespace

Eigen::MatrixXd dpp_kernel(const Eigen::MatrixXd& tau, const Eigen::VectorXd& q, double ell) {
  Eigen::MatrixXd k = similarity(tau, ell);
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    for (Eigen::Index j = i; j < k.cols(); ++j) k(j, i) = k(i, j) = (q[i] * q[j]) * k(i, j);
  }
  return k;
}

double expected_cardinality(const Eigen::MatrixXd& k) {
  const Eigen::Index n = k.rows();
  const Eigen::MatrixXd a = k + Eigen::MatrixXd::Identity(n, n);
  return static_cast<double>(n) - a.llt().solve(Eigen::MatrixXd::Identity(n, n)).trace();
}

DppLoss dpp_loss(const Eigen::MatrixXd& tau, const Eigen::VectorXd& q, double ell) {
  const Eigen::Index n = tau.rows();
  const Eigen::MatrixXd e = similarity(tau, ell);
  const Eigen::MatrixXd k = dpp_kernel(tau, q, ell);
  const Eigen::MatrixXd a_inv =
      (k + Eigen::MatrixXd::Identity(n, n)).llt().solve(Eigen::MatrixXd::Identity(n, n));
  // loss = -(n - tr(A^-1)); dloss/dK = -A^-2.
  const Eigen::MatrixXd gk = -(a_inv * a_inv);
  DppLoss out;
  out.loss = -(static_cast<double>(n) - a_inv.trace());
  out.dq = 2.0 * (gk.cwiseProduct(e) * q);
  out.dtau = Eigen::MatrixXd::Zero(tau.rows(), tau.cols());
  const double c = -4.0 / (ell * ell);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      out.dtau.row(i) += c * gk(i, j) * k(i, j) * (tau.row(i) - tau.row(j));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training: RefineNet

namespace {

struct PoolRecord {
  Eigen::VectorXd z, gamma;
  RuleProblem problem;
  Eigen::MatrixXd latent_d;  // latent x pool
  std::vector<double> rho_d;
};

Eigen::RowVectorXd flatten(const StateMatrix& s) {
  Eigen::RowVectorXd out(s.size());
  for (Eigen::Index t = 0; t < s.rows(); ++t) out.segment(4 * t, 4) = s.row(t);
  return out;
}

StateMatrix unflatten(const Eigen::RowVectorXd& v) {
  StateMatrix s(v.size() / 4, 4);
  for (Eigen::Index t = 0; t < s.rows(); ++t) s.row(t) = v.segment(4 * t, 4);
  return s;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::vector<EpochLog> train_refine(PolicyModel& m, const std::vector<AugmentedRecord>& records,
                                   const RefineTrainOptions& opt) {
  const PolicyConfig& cfg = m.cfg;
  const int L = cfg.latent(), Z = cfg.z_size();
  std::vector<const AugmentedRecord*> driving;
  for (const AugmentedRecord& r : records) {
    if (r.kind == "driving") driving.push_back(&r);
  }
  if (driving.empty()) throw DataError("no driving records to train the refinement network on");
  if (opt.samples_per_scene > opt.pool) throw std::invalid_argument("samples_per_scene exceeds the pool size");

  // Frozen encoder and DDPM: draw each record's candidate pool once.
  std::vector<PoolRecord> pool(driving.size());
  parallel_for(driving.size(), [&](std::size_t i) {
    const AugmentedRecord& r = *driving[i];
    PoolRecord& pr = pool[i];
    pr.z = encode(m, r.scene);
    pr.gamma = gamma_vector(r.gamma);
    pr.problem = r.problem(cfg.horizon);
    Rng rng = stream_rng(opt.seed, "refine-pool/" + r.scene_id + "/" + mode_name(r.gamma.mode));
    const DenoiseOutput dn = denoise(m, pr.z, pr.gamma, opt.pool, rng);
    pr.latent_d.resize(L, opt.pool);
    pr.rho_d.resize(static_cast<std::size_t>(opt.pool));
    for (int j = 0; j < opt.pool; ++j) {
      std::vector<double> rho;
      std::vector<Eigen::VectorXd> cands;
      for (const Eigen::MatrixXd& b : dn.bank) {
        cands.push_back(clamp_latent(b.col(j)));
        rho.push_back(rule_robustness(pr.problem, from_latent(cands.back(), cfg.box, cfg.dt)));
      }
      const int k = select_from_bank(rho);
      pr.latent_d.col(j) = cands[static_cast<std::size_t>(k)];
      pr.rho_d[static_cast<std::size_t>(j)] = rho[static_cast<std::size_t>(k)];
    }
  });

  Rng rng = stream_rng(opt.seed, "train-refine");
  const nn::Adam adam{opt.lr};
  auto params = m.refine_params();
  nn::zero_grad(params);
  const int S = opt.scenes_per_batch, N = opt.samples_per_scene;
  const int steps_per_epoch = static_cast<int>((pool.size() + S - 1) / S);
  std::vector<int> order(pool.size()), samples(static_cast<std::size_t>(opt.pool));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  std::vector<EpochLog> log;
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      struct Pick {
        int rec, sample;
      };
      std::vector<Pick> picks;
      for (int s = 0; s < S; ++s) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        const int rec = order[cursor++];
        std::iota(samples.begin(), samples.end(), 0);
        std::shuffle(samples.begin(), samples.end(), rng);
        for (int j = 0; j < N; ++j) picks.push_back({rec, samples[static_cast<std::size_t>(j)]});
      }

      // Residuals for the open-gate picks, batched.
      std::vector<int> open_col(picks.size(), -1);
      int n_open = 0;
      for (std::size_t i = 0; i < picks.size(); ++i) {
        if (pool[picks[i].rec].rho_d[picks[i].sample] < 0.0) open_col[i] = n_open++;
      }
      Eigen::MatrixXd in(Z + 7 + L, n_open);
      for (std::size_t i = 0; i < picks.size(); ++i) {
        if (open_col[i] < 0) continue;
        const PoolRecord& pr = pool[picks[i].rec];
        in.block(0, open_col[i], Z, 1) = pr.z;
        in.block(Z, open_col[i], 7, 1) = pr.gamma;
        in.block(Z + 7, open_col[i], L, 1) = pr.latent_d.col(picks[i].sample);
      }
      nn::Tape tape;
      const Eigen::MatrixXd res = n_open > 0 ? m.g_r.forward(in, &tape) : Eigen::MatrixXd(L, 0);
      Eigen::MatrixXd d_res = Eigen::MatrixXd::Zero(L, n_open);

      double step_loss = 0.0;
      for (int s = 0; s < S; ++s) {
        const int rec = picks[static_cast<std::size_t>(s * N)].rec;
        const PoolRecord& pr = pool[static_cast<std::size_t>(rec)];
        const EgoState s0 = pr.problem.start;
        Eigen::MatrixXd tau(N, 4 * (cfg.horizon + 1));
        Eigen::VectorXd q(N), dq_dstates_scale(N);
        std::vector<ControlSeq> raw(static_cast<std::size_t>(N));
        std::vector<StateMatrix> rho_grad(static_cast<std::size_t>(N));
        for (int j = 0; j < N; ++j) {
          const std::size_t i = static_cast<std::size_t>(s * N + j);
          Eigen::VectorXd lat = pr.latent_d.col(picks[i].sample);
          if (open_col[i] >= 0) lat += res.col(open_col[i]);
          raw[static_cast<std::size_t>(j)] = from_latent(lat, cfg.box, cfg.dt);
          const ControlSeq u = from_latent(clamp_latent(lat), cfg.box, cfg.dt);
          const StateMatrix states = rollout(s0, u).states;
          tau.row(j) = flatten(states);
          const StateGradient sg = rule_smooth_state_gradient(pr.problem, states, opt.beta);
          q[j] = sigmoid(opt.sigmoid_scale * sg.smooth);
          dq_dstates_scale[j] = opt.sigmoid_scale * q[j] * (1.0 - q[j]);
          rho_grad[static_cast<std::size_t>(j)] = sg.grad;
        }
        const double ell = median_pairwise_distance(tau);
        const DppLoss dl = dpp_loss(tau, q, ell);
        step_loss += dl.loss / S;
        for (int j = 0; j < N; ++j) {
          const std::size_t i = static_cast<std::size_t>(s * N + j);
          if (open_col[i] < 0) continue;
          const StateMatrix cot =
              (unflatten(dl.dtau.row(j)) + dl.dq[j] * dq_dstates_scale[j] * rho_grad[static_cast<std::size_t>(j)]) / S;
          const ControlSeq& rw = raw[static_cast<std::size_t>(j)];
          const ControlSeq u = clamp(rw, cfg.box);
          const ControlMatrix gu = clamp_backward(rw, cfg.box, rollout_grad(s0, u, cot));
          d_res.col(open_col[i]) = latent_gradient(gu, cfg.box);
        }
      }
      if (n_open > 0) m.g_r.backward(tape, d_res);
      adam.step(params);
      epoch_loss += step_loss;
    }
    log.push_back({epoch, epoch_loss / steps_per_epoch, seconds_since(t0)});
    if (opt.on_epoch) opt.on_epoch(log.back());
  }
  return log;
}

}  // namespace stldp::policy
