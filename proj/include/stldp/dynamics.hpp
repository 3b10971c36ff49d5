#pragma once

// Unicycle ego model integrated with explicit Euler:
//   x' = x + v cos(th) dt,  y' = y + v sin(th) dt,  th' = th + w dt,  v' = v + a dt
// Positions advance with the pre-update heading and speed.

#include <Eigen/Core>

namespace stldp {

struct EgoState {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
  double v = 0.0;
};

struct Control {
  double w = 0.0;  // rad/s
  double a = 0.0;  // m/s^2
};

/// Rows are timesteps; columns (x, y, theta, v).
using StateMatrix = Eigen::Matrix<double, Eigen::Dynamic, 4>;
/// Rows are timesteps; columns (w, a).
using ControlMatrix = Eigen::Matrix<double, Eigen::Dynamic, 2>;

struct ControlBox {
  Control lo{-0.5, -5.0};
  Control hi{0.5, 5.0};

  Control half_width() const { return {0.5 * (hi.w - lo.w), 0.5 * (hi.a - lo.a)}; }
  Control center() const { return {0.5 * (hi.w + lo.w), 0.5 * (hi.a + lo.a)}; }
};

struct ControlSeq {
  ControlMatrix u;
  double dt = 0.5;

  int horizon() const { return static_cast<int>(u.rows()); }
  Control at(int t) const { return {u(t, 0), u(t, 1)}; }
};

struct Trajectory {
  StateMatrix states;  // horizon + 1 rows
  ControlSeq controls;

  int horizon() const { return static_cast<int>(states.rows()) - 1; }
  EgoState state(int t) const { return {states(t, 0), states(t, 1), states(t, 2), states(t, 3)}; }
};

EgoState step(const EgoState& s, Control u, double dt);

/// Rolls `u` out from `s0`. When `clamp_to` is given the controls are
/// projected onto the box first (and the stored controls are the projected
/// ones).
Trajectory rollout(const EgoState& s0, const ControlSeq& u, const ControlBox* clamp_to = nullptr);

/// Elementwise projection onto the box.
ControlSeq clamp(const ControlSeq& u, const ControlBox& box);

/// Zeroes gradient entries whose raw control lies strictly outside the box
/// (the projection is locally constant there).
ControlMatrix clamp_backward(const ControlSeq& raw, const ControlBox& box, const ControlMatrix& grad);

/// Reverse-mode gradient of sum_t <cot_t, s_t> with respect to each control.
/// `cot` has horizon + 1 rows.
ControlMatrix rollout_grad(const EgoState& s0, const ControlSeq& u, const StateMatrix& cot);

/// Control sequence rescaled to [-1, 1] per channel and back. The diffusion
/// latent lives in normalized coordinates.
ControlMatrix normalize(const ControlMatrix& u, const ControlBox& box);
ControlMatrix denormalize(const ControlMatrix& z, const ControlBox& box);

StateMatrix to_row(const EgoState& s);

}  // namespace stldp
