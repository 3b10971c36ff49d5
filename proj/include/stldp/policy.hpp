#pragma once

// Scene encoder, DDPM over normalized control sequences, the gated residual
// RefineNet, the DPP diversity objective and robustness-guided sampling.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stldp/augment.hpp"
#include "stldp/nn.hpp"
#include "stldp/scene.hpp"
#include "stldp/simharness.hpp"

namespace stldp::policy {

// ---------------------------------------------------------------------------
// Diffusion schedule.

/// How the per-step noise scale is formed from sigma_t (0 at t = 1, else 1).
///   Posterior: sigma_t * sqrt(beta_tilde_t), the usual DDPM posterior std.
///   Unit:      sigma_t itself.
enum class NoiseMode { Posterior, Unit };
const char* noise_mode_name(NoiseMode m);
NoiseMode parse_noise_mode(const std::string& s);

struct Schedule {
  int steps = 0;
  std::vector<double> alpha;      // index 1..steps (alpha[0] unused, 1)
  std::vector<double> alpha_bar;  // alpha_bar[0] = 1
  std::vector<double> sigma;      // 0 at t = 1, 1 afterwards
  NoiseMode noise = NoiseMode::Posterior;

  /// alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T)+s)/(1+s) * pi/2), alpha_t
  /// clipped to [clip_lo, clip_hi] and alpha_bar recomputed as the product.
  static Schedule cosine(int steps, double s = 0.008, double clip_lo = 0.001, double clip_hi = 0.999,
                         NoiseMode noise = NoiseMode::Posterior);
  double noise_std(int t) const;
};

// ---------------------------------------------------------------------------
// Encoder inputs (ego frame).

inline constexpr double kPositionScale = 10.0;  // m per input unit
inline constexpr double kSpeedScale = 10.0;
inline constexpr int kEgoFeatures = 4;
inline constexpr int kLaneFeatures = 1 + 4 * kLanePoints;  // valid, then (x, y, cos, sin) per waypoint
inline constexpr int kNeighborFeatures = 8;                // valid, x, y, cos, sin, v, length, width

struct SceneFeatures {
  Eigen::Matrix<double, kEgoFeatures, 1> ego;
  Eigen::Matrix<double, kLaneFeatures, 3> lanes;             // columns: current, left, right
  Eigen::Matrix<double, kNeighborFeatures, kNeighborSlots> neighbors;  // canonical column order
};

/// Transforms to the ego frame and scales. Neighbor columns are sorted
/// lexicographically, so slot order in the context does not matter.
SceneFeatures scene_features(const SceneContext& c);

// ---------------------------------------------------------------------------
// Model.

struct PolicyConfig {
  int d = 64;
  int hidden = 256;
  int horizon = 20;
  int diffusion_steps = 100;
  double dt = 0.5;
  ControlBox box;
  NoiseMode noise = NoiseMode::Posterior;
  // Clip the implied clean sample to the box before forming the mean. Off
  // gives the plain noise-estimate update, which amplifies errors by
  // 1/sqrt(alpha) near t = T_d.
  bool clip_denoised = true;

  int latent() const { return 2 * horizon; }
  int z_size() const { return 7 * d; }
  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
};

struct PolicyModel {
  PolicyConfig cfg;
  nn::Mlp g_ego;   // 4 -> d
  nn::Mlp g_lane;  // lane features -> d
  nn::Mlp g_nei;   // neighbor features -> d
  nn::Mlp g_d;     // [z, gamma, latent, t/T_d] -> latent (noise estimate)
  nn::Mlp g_r;     // [z, gamma, latent] -> latent residual; output layer starts at zero
  Schedule schedule;

  PolicyModel() = default;
  PolicyModel(const PolicyConfig& cfg, std::uint64_t seed);

  std::vector<nn::ParamTensor*> encoder_params();
  std::vector<nn::ParamTensor*> ddpm_params();  // encoder and g_d
  std::vector<nn::ParamTensor*> refine_params();
  std::vector<const nn::ParamTensor*> all_params() const;

  void save(const std::string& path, const nlohmann::json& meta = nlohmann::json::object()) const;
  /// Throws DataError for a malformed or mismatched checkpoint.
  static PolicyModel load(const std::string& path, nlohmann::json* meta = nullptr);
};

struct EncoderTape {
  nn::Tape ego, lane, nei;
  Eigen::MatrixXi arg_max, arg_min;  // d x scenes, slot index of the pooled value
  int scenes = 0;
};

/// z = [g_ego; g_lane(current); g_lane(left); g_lane(right); max_j, min_j,
/// sum_j g_nei(slot j)], one column per scene.
Eigen::MatrixXd encode(const PolicyModel& m, const std::vector<const SceneFeatures*>& scenes,
                       EncoderTape* tape = nullptr);
Eigen::VectorXd encode(const PolicyModel& m, const SceneContext& c);
/// Accumulates encoder parameter gradients for dL/dz. Pooling routes to the
/// arg max / arg min slot (lowest index on ties); the sum to every slot.
void encode_backward(PolicyModel& m, const EncoderTape& tape, const Eigen::MatrixXd& dz);

/// Network input for gamma: speeds and clearance scaled like the encoder
/// features, clearance capped at the perception radius.
Eigen::VectorXd gamma_vector(const StlParams& g);

/// Control sequence <-> flat normalized latent (w0, a0, w1, a1, ...).
Eigen::VectorXd to_latent(const ControlMatrix& u, const ControlBox& box);
ControlSeq from_latent(const Eigen::VectorXd& latent, const ControlBox& box, double dt);
Eigen::VectorXd clamp_latent(const Eigen::VectorXd& latent);

// ---------------------------------------------------------------------------
// Training.

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double seconds = 0.0;
};

struct DdpmTrainOptions {
  int epochs = 500;
  int batch = 128;
  double lr = 3e-4;
  std::uint64_t seed = 0;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Noise-prediction regression on the valid solutions of the driving
/// records. An epoch is ceil(items / batch) steps over a fresh permutation
/// (wrapping so every batch is full). Throws DataError when there are no
/// valid solutions.
std::vector<EpochLog> train_ddpm(PolicyModel& m, const std::vector<AugmentedRecord>& records,
                                 const DdpmTrainOptions& opt);

// ---------------------------------------------------------------------------
// Sampling.

enum class Guidance { Off, LastK, EveryStep };
const char* guidance_name(Guidance g);
Guidance parse_guidance(const std::string& s);  // "off", "last5", "every"

struct GuidanceOptions {
  Guidance mode = Guidance::Off;
  int last_k = 5;
  int steps = 10;
  double lr = 0.05;
  double beta = 50.0;
};

inline constexpr int kBankSize = 5;

struct DenoiseOutput {
  Eigen::MatrixXd latent;            // latent x n, the t = 1 output
  std::vector<Eigen::MatrixXd> bank;  // outputs of the last kBankSize steps, oldest first
  int guided_evaluations = 0;
};

/// Runs the reverse chain from N(0, I). With guidance, the mean at each
/// guided step is improved by `steps` accept-if-improved ascent iterations
/// on the smooth robustness of its clamped rollout before noise is added.
DenoiseOutput denoise(const PolicyModel& m, const Eigen::VectorXd& z, const Eigen::VectorXd& gamma, int n, Rng& rng,
                      const GuidanceOptions& guidance = {}, const RuleProblem* problem = nullptr);

/// One guided refinement of a latent column; returns the accepted smooth
/// robustness values, first entry the starting value.
std::vector<double> guide_latent(Eigen::Ref<Eigen::VectorXd> latent, const RuleProblem& p, const PolicyConfig& cfg,
                                 const GuidanceOptions& g);

/// Bank index with the highest exact robustness, latest on ties.
int select_from_bank(const std::vector<double>& rho);

struct PlanOptions {
  int samples = 64;
  GuidanceOptions guidance;
  bool use_bank = true;  // false: take the final denoising output as is
  bool refine = true;
};

struct PlanSample {
  ControlSeq u_d;     // selected candidate (inside the box)
  double rho_d = 0.0;
  ControlSeq u;       // after the gate
  Trajectory traj;
  double rho = 0.0;
  bool refined = false;
};

std::vector<PlanSample> plan(const PolicyModel& m, const SceneContext& c, const StlParams& g, Rng& rng,
                             const PlanOptions& opt);

/// Closed-loop adapter: the gated plans of `plan` as candidate controls.
/// The model must outlive the planner.
Planner make_planner(const PolicyModel& m, const PlanOptions& opt);

/// Gate: candidates with rho_d >= 0 are returned untouched, the rest become
/// clamp(latent_d + g_r(z, gamma, latent_d)).
Eigen::MatrixXd refine_latents(const PolicyModel& m, const Eigen::VectorXd& z, const Eigen::VectorXd& gamma,
                               const Eigen::MatrixXd& latent_d, const std::vector<double>& rho_d);

// ---------------------------------------------------------------------------
// DPP diversity objective.

/// Median Euclidean distance over pairs of rows; 1 when every pair coincides.
double median_pairwise_distance(const Eigen::MatrixXd& tau);
/// K_ij = q_i q_j exp(-|tau_i - tau_j|^2 / ell^2), rows of tau are samples.
Eigen::MatrixXd dpp_kernel(const Eigen::MatrixXd& tau, const Eigen::VectorXd& q, double ell);
/// tr(I - (K + I)^-1).
double expected_cardinality(const Eigen::MatrixXd& k);

struct DppLoss {
  double loss = 0.0;       // -expected cardinality
  Eigen::MatrixXd dtau;    // same shape as tau
  Eigen::VectorXd dq;
};
DppLoss dpp_loss(const Eigen::MatrixXd& tau, const Eigen::VectorXd& q, double ell);

struct RefineTrainOptions {
  int epochs = 500;
  int scenes_per_batch = 8;
  int samples_per_scene = 16;
  int pool = 64;  // frozen DDPM samples drawn once per record
  double lr = 3e-4;
  double beta = 50.0;
  double sigmoid_scale = 10.0;
  std::uint64_t seed = 0;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Trains g_r only. An epoch is ceil(records / scenes_per_batch) steps.
std::vector<EpochLog> train_refine(PolicyModel& m, const std::vector<AugmentedRecord>& records,
                                   const RefineTrainOptions& opt);

}  // namespace stldp::policy
