#pragma once

#include <span>

#include "ipnet/imu_model.hpp"

namespace ipnet {

/// Relative-motion terms for one keyframe interval, integrated in the first
/// keyframe's body frame: alpha (position), beta (velocity), gamma (rotation),
/// together with their first-order sensitivities to the linearization bias.
/// Default state is the empty integral: zeros, identity, zero Jacobians.
struct Preintegration {
  Vector3d alpha{0, 0, 0};  // m
  Vector3d beta{0, 0, 0};   // m/s
  UnitQuaternion gamma;
  Matrix3d J_alpha_ba = Matrix3d::Zero();
  Matrix3d J_alpha_bw = Matrix3d::Zero();
  Matrix3d J_beta_ba = Matrix3d::Zero();
  Matrix3d J_beta_bw = Matrix3d::Zero();
  Matrix3d J_gamma_bw = Matrix3d::Zero();
  double dt_total = 0.0;
  ImuBias linearization_bias;
};

/// Midpoint-rule preintegration: each step uses the bias-corrected average of
/// consecutive gyro samples for the gamma update and the average of the two
/// rotated, bias-corrected accels for alpha/beta. The Jacobian blocks follow
/// the matching discrete recursion (perturbation of the same midpoint scheme).
inline Preintegration integrate(std::span<const ImuSample> samples, const ImuBias& bias) {
  if (samples.size() < 2) {
    throw ConfigError("integrate: need at least 2 samples");
  }
  Preintegration p;
  p.linearization_bias = bias;

  for (size_t i = 0; i + 1 < samples.size(); ++i) {
    const double dt = samples[i + 1].t - samples[i].t;
    if (dt <= 0) {
      throw DataError("integrate: non-monotone timestamps at sample " + std::to_string(i + 1));
    }
    const double dt2 = dt * dt;

    const Vector3d w_mid = 0.5 * (samples[i].gyro + samples[i + 1].gyro) - bias.bw;
    const UnitQuaternion gamma_next = p.gamma * quat_from_rotvec(w_mid * dt);

    const Vector3d a0 = samples[i].accel - bias.ba;
    const Vector3d a1 = samples[i + 1].accel - bias.ba;
    const Matrix3d r0 = p.gamma.rotation_matrix();
    const Matrix3d r1 = gamma_next.rotation_matrix();
    const Vector3d a_mid = 0.5 * (r0 * a0 + r1 * a1);

    // Exact derivative of the discrete step under right-perturbation of gamma:
    //   gamma(bw+δ) = gamma(bw) ⊗ exp(J_gamma_bw·δ), so
    //   J_gamma' = R(φ)ᵀ·J_gamma − Jr(φ)·dt with φ the midpoint increment.
    const Vector3d phi = w_mid * dt;
    const Matrix3d step_rot_t = quat_from_rotvec(phi).rotation_matrix().transpose();
    const Matrix3d j_gamma_next = step_rot_t * p.J_gamma_bw - so3_right_jacobian(phi) * dt;
    const Matrix3d d_amid_dbw =
        -0.5 * (r0 * skew(a0) * p.J_gamma_bw + r1 * skew(a1) * j_gamma_next);
    const Matrix3d d_amid_dba = -0.5 * (r0 + r1);

    // Order matters: each line reads pre-update blocks.
    p.J_alpha_ba += p.J_beta_ba * dt + 0.5 * d_amid_dba * dt2;
    p.J_alpha_bw += p.J_beta_bw * dt + 0.5 * d_amid_dbw * dt2;
    p.J_beta_ba += d_amid_dba * dt;
    p.J_beta_bw += d_amid_dbw * dt;
    p.J_gamma_bw = j_gamma_next;

    p.alpha += p.beta * dt + 0.5 * a_mid * dt2;
    p.beta += a_mid * dt;
    p.gamma = gamma_next;
    p.dt_total += dt;
  }
  return p;
}

struct CorrectedPreintegration {
  Vector3d alpha;
  Vector3d beta;
  UnitQuaternion gamma;
};

/// First-order bias correction around the linearization point:
///   alpha' = alpha + J_alpha_ba·δba + J_alpha_bw·δbw  (beta analogous),
///   gamma' = gamma ⊗ exp(J_gamma_bw·δbw).
inline CorrectedPreintegration correct_first_order(const Preintegration& p,
                                                   const ImuBias& new_bias) {
  const Vector3d dba = new_bias.ba - p.linearization_bias.ba;
  const Vector3d dbw = new_bias.bw - p.linearization_bias.bw;
  CorrectedPreintegration c;
  c.alpha = p.alpha + p.J_alpha_ba * dba + p.J_alpha_bw * dbw;
  c.beta = p.beta + p.J_beta_ba * dba + p.J_beta_bw * dbw;
  c.gamma = p.gamma * quat_from_rotvec(p.J_gamma_bw * dbw);
  return c;
}

struct GtTargets {
  Vector3d alpha;
  Vector3d beta;
  UnitQuaternion gamma;
};

/// Ground-truth preintegration targets from two pose/velocity states:
/// the inversion of the state propagation over [t_k, t_k+dt].
inline GtTargets gt_targets(const GtState& state_k, const GtState& state_k1,
                            const GravityConfig& gravity, double dt) {
  if (dt <= 0) {
    throw ConfigError("gt_targets: dt must be positive");
  }
  const Vector3d g = gravity.g_world;
  const UnitQuaternion qk_inv = state_k.q.inverse();
  GtTargets t;
  t.alpha = quat_rotate(qk_inv, state_k1.p - state_k.p - state_k.v * dt + 0.5 * g * dt * dt);
  t.beta = quat_rotate(qk_inv, state_k1.v - state_k.v + g * dt);
  t.gamma = qk_inv * state_k1.q;
  return t;
}

}  // namespace ipnet
