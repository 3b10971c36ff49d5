#include "stldp/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stldp {

EgoState step(const EgoState& s, Control u, double dt) {
  return {s.x + s.v * std::cos(s.theta) * dt, s.y + s.v * std::sin(s.theta) * dt, s.theta + u.w * dt,
          s.v + u.a * dt};
}

ControlSeq clamp(const ControlSeq& u, const ControlBox& box) {
  ControlSeq out = u;
  for (int t = 0; t < u.horizon(); ++t) {
    out.u(t, 0) = std::clamp(u.u(t, 0), box.lo.w, box.hi.w);
    out.u(t, 1) = std::clamp(u.u(t, 1), box.lo.a, box.hi.a);
  }
  return out;
}

ControlMatrix clamp_backward(const ControlSeq& raw, const ControlBox& box, const ControlMatrix& grad) {
  ControlMatrix out = grad;
  for (int t = 0; t < raw.horizon(); ++t) {
    if (raw.u(t, 0) < box.lo.w || raw.u(t, 0) > box.hi.w) out(t, 0) = 0.0;
    if (raw.u(t, 1) < box.lo.a || raw.u(t, 1) > box.hi.a) out(t, 1) = 0.0;
  }
  return out;
}

Trajectory rollout(const EgoState& s0, const ControlSeq& u, const ControlBox* clamp_to) {
  if (!(u.dt > 0.0)) throw std::invalid_argument("rollout requires dt > 0");
  Trajectory tr;
  tr.controls = clamp_to ? clamp(u, *clamp_to) : u;
  const int T = u.horizon();
  tr.states.resize(T + 1, 4);
  EgoState s = s0;
  tr.states.row(0) << s.x, s.y, s.theta, s.v;
  for (int t = 0; t < T; ++t) {
    s = step(s, tr.controls.at(t), u.dt);
    tr.states.row(t + 1) << s.x, s.y, s.theta, s.v;
  }
  return tr;
}

ControlMatrix rollout_grad(const EgoState& s0, const ControlSeq& u, const StateMatrix& cot) {
  const int T = u.horizon();
  if (cot.rows() != T + 1) throw std::invalid_argument("rollout_grad: cotangent rows must equal horizon + 1");
  const double dt = u.dt;
  // Forward pass for the headings and speeds the Jacobians need.
  std::vector<EgoState> states(static_cast<std::size_t>(T + 1));
  states[0] = s0;
  for (int t = 0; t < T; ++t) states[t + 1] = step(states[t], u.at(t), dt);

  ControlMatrix g(T, 2);
  Eigen::Vector4d lam = cot.row(T).transpose();
  for (int t = T - 1; t >= 0; --t) {
    const EgoState& s = states[t];
    g(t, 0) = lam[2] * dt;
    g(t, 1) = lam[3] * dt;
    const double c = std::cos(s.theta), sn = std::sin(s.theta);
    Eigen::Vector4d prev;
    prev[0] = lam[0];
    prev[1] = lam[1];
    prev[2] = lam[2] + lam[0] * (-s.v * sn * dt) + lam[1] * (s.v * c * dt);
    prev[3] = lam[3] + lam[0] * (c * dt) + lam[1] * (sn * dt);
    lam = prev + cot.row(t).transpose();
  }
  return g;
}

ControlMatrix normalize(const ControlMatrix& u, const ControlBox& box) {
  const Control c = box.center(), h = box.half_width();
  ControlMatrix z(u.rows(), 2);
  z.col(0) = (u.col(0).array() - c.w) / h.w;
  z.col(1) = (u.col(1).array() - c.a) / h.a;
  return z;
}

ControlMatrix denormalize(const ControlMatrix& z, const ControlBox& box) {
  const Control c = box.center(), h = box.half_width();
  ControlMatrix u(z.rows(), 2);
  u.col(0) = z.col(0).array() * h.w + c.w;
  u.col(1) = z.col(1).array() * h.a + c.a;
  return u;
}

StateMatrix to_row(const EgoState& s) {
  StateMatrix m(1, 4);
  m << s.x, s.y, s.theta, s.v;
  return m;
}

}  // namespace stldp
