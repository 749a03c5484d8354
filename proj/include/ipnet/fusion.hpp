#pragma once

#include <Eigen/Dense>
#include <span>

#include "ipnet/bias_labeler.hpp"
#include "ipnet/model.hpp"
#include "ipnet/preintegration.hpp"

namespace ipnet {

using Vector6 = Eigen::Matrix<double, 6, 1>;
using Matrix6 = Eigen::Matrix<double, 6, 6>;
using Vector15 = Eigen::Matrix<double, 15, 1>;
using Matrix15 = Eigen::Matrix<double, 15, 15>;

/// One optimized state of the sliding window.
struct KeyframeState {
  double t = 0.0;
  Vector3d p{0, 0, 0};
  Vector3d v{0, 0, 0};
  UnitQuaternion q;
  ImuBias bias;
};

/// Unary factor pulling the keyframe's bias toward an external target under
/// weight matrix W (block-diagonal, symmetric PSD).
struct BiasPriorFactor {
  ImuBias target;
  Matrix6 weight = Matrix6::Identity();
  int keyframe = -1;
};

/// Diagonal 1/σ prior weight: σ_ba = 0.1 m/s², σ_bw = 0.01 rad/s by default.
inline Matrix6 default_prior_weight(double sigma_ba = 0.1, double sigma_bw = 0.01) {
  Matrix6 w = Matrix6::Zero();
  for (int i = 0; i < 3; ++i) {
    w(i, i) = 1.0 / sigma_ba;
    w(3 + i, 3 + i) = 1.0 / sigma_bw;
  }
  return w;
}

/// r = W·[ba − b̂a; bw − b̂w], J = W (identity blocks scaled by the weight).
inline std::pair<Vector6, Matrix6> prior_residual_and_jacobian(const KeyframeState& state,
                                                               const BiasPriorFactor& f) {
  Vector6 d;
  d.head<3>() = state.bias.ba - f.target.ba;
  d.tail<3>() = state.bias.bw - f.target.bw;
  return {f.weight * d, f.weight};
}

/// Simulated pose observation (vision surrogate). Dropped observations mark
/// keyframe instants without contributing a factor.
struct PoseObservation {
  double t = 0.0;
  Vector3d p{0, 0, 0};
  UnitQuaternion q;
  bool dropped = false;
};

struct PoseObsResult {
  Vector6 r;
  Matrix6 jacobian;  // w.r.t. [δp, δθ] of the observed keyframe
};

/// r = info^{1/2}·[p − p_obs; log(q_obs⁻¹ ⊗ q)].
inline PoseObsResult pose_obs_residual(const KeyframeState& state, const Vector3d& p_obs,
                                       const UnitQuaternion& q_obs,
                                       const Matrix6& sqrt_info) {
  const Vector3d e = quat_log(q_obs.inverse() * state.q);
  Vector6 raw;
  raw.head<3>() = state.p - p_obs;
  raw.tail<3>() = e;
  Matrix6 j = Matrix6::Zero();
  j.topLeftCorner<3, 3>() = Matrix3d::Identity();
  j.bottomRightCorner<3, 3>() = so3_right_jacobian_inv(e);
  return {sqrt_info * raw, sqrt_info * j};
}

/// Diagonal sqrt-information entries for the IMU factor channels:
/// alpha/beta from the accel noise, gamma from the gyro noise, bias rows from
/// the random-walk densities; each scaled by the interval length.
struct InfoConfig {
  double sigma_accel = 0.02;
  double sigma_gyro = 0.002;
  double sigma_ba_walk = 5e-3;
  double sigma_bw_walk = 5e-4;

  Vector15 sqrt_info_diag(double dt) const {
    Vector15 d;
    const double sdt = std::sqrt(dt);
    d.segment<3>(0).setConstant(1.0 / (sigma_accel * sdt));
    d.segment<3>(3).setConstant(1.0 / (sigma_accel * sdt));
    d.segment<3>(6).setConstant(1.0 / (sigma_gyro * sdt));
    d.segment<3>(9).setConstant(1.0 / (sigma_ba_walk * sdt));
    d.segment<3>(12).setConstant(1.0 / (sigma_bw_walk * sdt));
    return d;
  }
};

struct ImuFactorResult {
  Vector15 r;          // [r_alpha, r_beta, r_gamma, r_ba, r_bw], unweighted
  Matrix15 j_k;        // w.r.t. [δp, δθ, δv, δba, δbw] of keyframe k
  Matrix15 j_k1;       // w.r.t. keyframe k+1
};

/// Preintegration factor between consecutive keyframes with first-order bias
/// correction; the residual is the inversion of the state propagation.
inline ImuFactorResult imu_factor_residual(const KeyframeState& sk,
                                           const KeyframeState& sk1,
                                           const Preintegration& preint,
                                           const GravityConfig& gravity) {
  const double dt = preint.dt_total;
  if (dt <= 0) {
    throw ConfigError("imu_factor_residual: non-positive preintegration span");
  }
  const Vector3d g = gravity.g_world;
  const ImuBias& lin = preint.linearization_bias;
  const Vector3d dbw = sk.bias.bw - lin.bw;
  const auto corr = correct_first_order(preint, sk.bias);

  const Matrix3d rk_t = sk.q.rotation_matrix().transpose();
  const Vector3d u_alpha = rk_t * (sk1.p - sk.p - sk.v * dt + 0.5 * g * dt * dt);
  const Vector3d u_beta = rk_t * (sk1.v - sk.v + g * dt);
  const UnitQuaternion rel = sk.q.inverse() * sk1.q;     // q_k⁻¹ ⊗ q_{k+1}
  const UnitQuaternion err = corr.gamma.inverse() * rel;  // γ_corr⁻¹ ⊗ rel

  ImuFactorResult out;
  out.r.segment<3>(0) = u_alpha - corr.alpha;
  out.r.segment<3>(3) = u_beta - corr.beta;
  out.r.segment<3>(6) = 2.0 * err.vec();
  out.r.segment<3>(9) = sk1.bias.ba - sk.bias.ba;
  out.r.segment<3>(12) = sk1.bias.bw - sk.bias.bw;

  out.j_k.setZero();
  out.j_k1.setZero();

  // alpha rows
  out.j_k.block<3, 3>(0, 0) = -rk_t;
  out.j_k.block<3, 3>(0, 3) = skew(u_alpha);
  out.j_k.block<3, 3>(0, 6) = -rk_t * dt;
  out.j_k.block<3, 3>(0, 9) = -preint.J_alpha_ba;
  out.j_k.block<3, 3>(0, 12) = -preint.J_alpha_bw;
  out.j_k1.block<3, 3>(0, 0) = rk_t;

  // beta rows
  out.j_k.block<3, 3>(3, 3) = skew(u_beta);
  out.j_k.block<3, 3>(3, 6) = -rk_t;
  out.j_k.block<3, 3>(3, 9) = -preint.J_beta_ba;
  out.j_k.block<3, 3>(3, 12) = -preint.J_beta_bw;
  out.j_k1.block<3, 3>(3, 6) = rk_t;

  // gamma rows: right-perturbation derivatives of 2·vec(γ_corr⁻¹ q_k⁻¹ q_{k+1}).
  out.j_k.block<3, 3>(6, 3) =
      -(quat_left(corr.gamma.inverse()) * quat_right(rel)).bottomRightCorner<3, 3>();
  out.j_k.block<3, 3>(6, 12) = -quat_right(err).bottomRightCorner<3, 3>() *
                               so3_right_jacobian(preint.J_gamma_bw * dbw) *
                               preint.J_gamma_bw;
  out.j_k1.block<3, 3>(6, 3) = quat_left(err).bottomRightCorner<3, 3>();

  // bias random-walk rows
  out.j_k.block<3, 3>(9, 9) = -Matrix3d::Identity();
  out.j_k.block<3, 3>(12, 12) = -Matrix3d::Identity();
  out.j_k1.block<3, 3>(9, 9) = Matrix3d::Identity();
  out.j_k1.block<3, 3>(12, 12) = Matrix3d::Identity();
  return out;
}

// --------------------------------------------------------------------------
// Window graph and Levenberg–Marquardt
// --------------------------------------------------------------------------

struct PoseObsFactor {
  int keyframe = -1;
  Vector3d p_obs{0, 0, 0};
  UnitQuaternion q_obs;
  Matrix6 sqrt_info = Matrix6::Identity();
};

struct ImuFactor {
  int keyframe = -1;  // connects keyframe and keyframe+1
  Preintegration preint;
};

/// Fixed-lag window: ordered keyframes, one IMU factor per adjacent pair,
/// pose-observation factors, bias prior factors. The gauge is fixed by
/// pinning the pose of keyframe `pinned`.
struct WindowGraph {
  std::vector<KeyframeState> keyframes;
  std::vector<ImuFactor> imu_factors;
  std::vector<PoseObsFactor> pose_factors;
  std::vector<BiasPriorFactor> prior_factors;
  GravityConfig gravity;
  InfoConfig info;
  int pinned = 0;

  void check() const {
    if (keyframes.empty()) throw ConfigError("WindowGraph: no keyframes");
    if (pinned < 0 || pinned >= static_cast<int>(keyframes.size())) {
      throw ConfigError("WindowGraph: pinned keyframe out of range");
    }
    if (keyframes.size() > 1 && imu_factors.size() != keyframes.size() - 1) {
      throw ConfigError("WindowGraph: need exactly one IMU factor per adjacent pair");
    }
  }
};

struct LmOptions {
  int max_iterations = 50;
  double rel_cost_tol = 1e-9;
  double step_tol = 1e-10;
  double abs_cost_floor = 1e-20;
  double lambda_init = 1e-12;
  double lambda_up = 10.0;
  double lambda_down = 0.3;
  double lambda_min = 1e-12;
  double lambda_max = 1e12;
};

struct LmReport {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> cost_trace;  // accepted-step costs, starting at initial
};

namespace detail {

inline void apply_step(std::vector<KeyframeState>& states,
                       const Eigen::VectorXd& delta) {
  for (std::size_t k = 0; k < states.size(); ++k) {
    const auto d = delta.segment<15>(static_cast<int>(15 * k));
    states[k].p += d.segment<3>(0);
    states[k].q = states[k].q * quat_from_rotvec(d.segment<3>(3));
    states[k].v += d.segment<3>(6);
    states[k].bias.ba += d.segment<3>(9);
    states[k].bias.bw += d.segment<3>(12);
  }
}

struct Linearization {
  double cost = 0.0;
  Eigen::MatrixXd jtj;
  Eigen::VectorXd jtr;
};

inline Linearization linearize(const WindowGraph& g,
                               const std::vector<KeyframeState>& states,
                               bool with_derivatives) {
  const int n = static_cast<int>(states.size());
  Linearization lin;
  if (with_derivatives) {
    lin.jtj = Eigen::MatrixXd::Zero(15 * n, 15 * n);
    lin.jtr = Eigen::VectorXd::Zero(15 * n);
  }

  auto accumulate = [&](const Eigen::VectorXd& r, const std::vector<int>& blocks,
                        const std::vector<Eigen::MatrixXd>& jacs) {
    lin.cost += r.squaredNorm();
    if (!with_derivatives) return;
    for (std::size_t a = 0; a < blocks.size(); ++a) {
      lin.jtr.segment<15>(15 * blocks[a]) += jacs[a].transpose() * r;
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        lin.jtj.block<15, 15>(15 * blocks[a], 15 * blocks[b]) +=
            jacs[a].transpose() * jacs[b];
      }
    }
  };

  for (const auto& f : g.imu_factors) {
    const auto res = imu_factor_residual(states[f.keyframe], states[f.keyframe + 1],
                                         f.preint, g.gravity);
    const Vector15 w = g.info.sqrt_info_diag(f.preint.dt_total);
    const Eigen::VectorXd r = w.asDiagonal() * res.r;
    if (!with_derivatives) {
      lin.cost += r.squaredNorm();
      continue;
    }
    std::vector<Eigen::MatrixXd> jacs{w.asDiagonal() * res.j_k,
                                      w.asDiagonal() * res.j_k1};
    accumulate(r, {f.keyframe, f.keyframe + 1}, jacs);
  }
  for (const auto& f : g.pose_factors) {
    const auto res = pose_obs_residual(states[f.keyframe], f.p_obs, f.q_obs, f.sqrt_info);
    if (!with_derivatives) {
      lin.cost += res.r.squaredNorm();
      continue;
    }
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(6, 15);
    j.block<6, 6>(0, 0) = res.jacobian;  // [δp, δθ] occupy the first 6 coords
    accumulate(res.r, {f.keyframe}, {j});
  }
  for (const auto& f : g.prior_factors) {
    const auto [r, jw] = prior_residual_and_jacobian(states[f.keyframe], f);
    if (!with_derivatives) {
      lin.cost += r.squaredNorm();
      continue;
    }
    Eigen::MatrixXd j = Eigen::MatrixXd::Zero(6, 15);
    j.block<6, 6>(0, 9) = jw;  // bias coords sit at offset 9
    accumulate(r, {f.keyframe}, {j});
  }
  return lin;
}

}  // namespace detail

/// Damped Gauss–Newton (Levenberg–Marquardt) on the stacked weighted
/// residuals. Accepted-step cost never increases; terminates on relative cost
/// decrease, step norm, or the iteration cap.
inline LmReport optimize_window(WindowGraph& graph, const LmOptions& options = {}) {
  graph.check();
  std::vector<KeyframeState>& states = graph.keyframes;
  const int n = static_cast<int>(states.size());

  // Active coordinates: everything except the pinned keyframe's pose.
  std::vector<int> active;
  active.reserve(15 * n - 6);
  for (int k = 0; k < n; ++k) {
    for (int c = 0; c < 15; ++c) {
      if (k == graph.pinned && c < 6) continue;
      active.push_back(15 * k + c);
    }
  }

  LmReport report;
  double lambda = options.lambda_init;
  double cost = detail::linearize(graph, states, false).cost;
  report.initial_cost = cost;
  report.cost_trace.push_back(cost);

  for (int it = 0; it < options.max_iterations; ++it) {
    report.iterations = it + 1;
    const auto lin = detail::linearize(graph, states, true);

    const int m = static_cast<int>(active.size());
    Eigen::MatrixXd h(m, m);
    Eigen::VectorXd grad(m);
    for (int a = 0; a < m; ++a) {
      grad(a) = lin.jtr(active[a]);
      for (int b = 0; b < m; ++b) h(a, b) = lin.jtj(active[a], active[b]);
    }

    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd damped = h;
      for (int a = 0; a < m; ++a) {
        damped(a, a) += lambda * std::max(h(a, a), 1e-8);
      }
      const Eigen::LDLT<Eigen::MatrixXd> ldlt(damped);
      if (ldlt.info() != Eigen::Success) {
        throw NumericError("optimize_window: normal matrix not PSD after damping (lambda " +
                           std::to_string(lambda) + ", dim " + std::to_string(m) + ")");
      }
      const Eigen::VectorXd step_active = ldlt.solve(-grad);
      Eigen::VectorXd step = Eigen::VectorXd::Zero(15 * n);
      for (int a = 0; a < m; ++a) step(active[a]) = step_active(a);

      std::vector<KeyframeState> candidate = states;
      detail::apply_step(candidate, step);
      const double new_cost = detail::linearize(graph, candidate, false).cost;

      if (new_cost <= cost) {
        accepted = true;
        states = std::move(candidate);
        const double decrease = cost - new_cost;
        cost = new_cost;
        report.cost_trace.push_back(cost);
        lambda = std::max(lambda * options.lambda_down, options.lambda_min);
        if (decrease < options.rel_cost_tol * std::max(cost, 1e-300) ||
            step_active.norm() < options.step_tol || cost < options.abs_cost_floor) {
          report.converged = true;
        }
      } else {
        lambda *= options.lambda_up;
        if (lambda > options.lambda_max) {
          throw NumericError("optimize_window: diverged, damping exceeded " +
                             std::to_string(options.lambda_max) + " at cost " +
                             std::to_string(cost));
        }
      }
    }
    if (report.converged) break;
  }
  report.final_cost = cost;
  return report;
}

// --------------------------------------------------------------------------
// Fixed-lag estimator
// --------------------------------------------------------------------------

struct FixedLagConfig {
  int lag = 10;                  // keyframes kept in the window
  double keyframe_period = 0.5;  // expected observation spacing, seconds
  bool prior_enabled = false;
  bool attach_warmup_priors = false;
  // When set, the latest prior target is applied to every keyframe of the
  // window (replacing earlier targets) instead of the newest keyframe only.
  bool retroactive_priors = false;
  Matrix6 prior_weight = default_prior_weight();
  Matrix6 obs_sqrt_info = Matrix6::Identity();
  InfoConfig info;
  GravityConfig gravity;
  LmOptions lm;
};

struct FixedLagResult {
  std::vector<KeyframeState> trajectory;  // time order, final estimates
  struct BiasRow {
    double t = 0.0;
    bool prior_attached = false;
    ImuBias prior_target;
    ImuBias optimized;
  };
  std::vector<BiasRow> bias_rows;
  double final_cost = 0.0;
  int total_lm_iterations = 0;
};

/// Slides the window over the observation stream: each observation timestamp
/// becomes a keyframe; IMU samples since the previous keyframe are
/// preintegrated at the previous bias estimate; the most recent prior (if
/// enabled) attaches to the newest keyframe; the graph is re-optimized and
/// the oldest state is dropped (no marginalization; the oldest remaining pose
/// is re-pinned).
inline FixedLagResult run_fixed_lag(std::span<const ImuSample> imu,
                                    std::span<const PoseObservation> observations,
                                    std::span<const PriorSample> priors,
                                    const FixedLagConfig& config) {
  if (observations.size() < 2) {
    throw ConfigError("run_fixed_lag: need at least 2 observations");
  }
  if (config.lag < 2) {
    throw ConfigError("run_fixed_lag: lag must be at least 2");
  }

  WindowGraph graph;
  graph.gravity = config.gravity;
  graph.info = config.info;

  FixedLagResult result;
  std::size_t imu_pos = 0;
  std::size_t prior_pos = 0;

  auto slice_imu = [&](double t_from, double t_to) {
    while (imu_pos + 1 < imu.size() && imu[imu_pos + 1].t <= t_from + 1e-9) ++imu_pos;
    std::size_t last = imu_pos;
    while (last + 1 < imu.size() && imu[last + 1].t <= t_to + 1e-9) ++last;
    if (last <= imu_pos) {
      throw DataError("run_fixed_lag: no IMU samples between keyframes at " +
                      std::to_string(t_from) + " and " + std::to_string(t_to));
    }
    for (std::size_t i = imu_pos; i < last; ++i) {
      if (imu[i + 1].t - imu[i].t > config.keyframe_period) {
        throw DataError("run_fixed_lag: IMU stream gap of " +
                        std::to_string(imu[i + 1].t - imu[i].t) + " s at " +
                        std::to_string(imu[i].t));
      }
    }
    return std::span<const ImuSample>(imu.data() + imu_pos, last - imu_pos + 1);
  };

  auto latest_prior = [&](double t) -> const PriorSample* {
    const PriorSample* found = nullptr;
    while (prior_pos < priors.size() && priors[prior_pos].t <= t + 1e-9) {
      if (!priors[prior_pos].warmup || config.attach_warmup_priors) {
        found = &priors[prior_pos];
      }
      ++prior_pos;
    }
    if (found) return found;
    // Walk back for the most recent usable prior (already consumed).
    for (std::size_t i = prior_pos; i-- > 0;) {
      if (priors[i].t <= t + 1e-9 && (!priors[i].warmup || config.attach_warmup_priors)) {
        return &priors[i];
      }
    }
    return nullptr;
  };

  auto emit_oldest = [&]() {
    const KeyframeState& s = graph.keyframes.front();
    result.trajectory.push_back(s);
    FixedLagResult::BiasRow row;
    row.t = s.t;
    row.optimized = s.bias;
    for (const auto& pf : graph.prior_factors) {
      if (pf.keyframe == 0) {
        row.prior_attached = true;
        row.prior_target = pf.target;
      }
    }
    result.bias_rows.push_back(row);

    graph.keyframes.erase(graph.keyframes.begin());
    if (!graph.imu_factors.empty()) {
      graph.imu_factors.erase(graph.imu_factors.begin());
    }
    std::erase_if(graph.pose_factors, [](const PoseObsFactor& f) { return f.keyframe == 0; });
    std::erase_if(graph.prior_factors, [](const BiasPriorFactor& f) { return f.keyframe == 0; });
    for (auto& f : graph.imu_factors) --f.keyframe;
    for (auto& f : graph.pose_factors) --f.keyframe;
    for (auto& f : graph.prior_factors) --f.keyframe;
  };

  for (const PoseObservation& obs : observations) {
    if (graph.keyframes.empty()) {
      KeyframeState s;
      s.t = obs.t;
      s.p = obs.p;
      s.q = obs.q;
      graph.keyframes.push_back(s);
      if (!obs.dropped) {
        graph.pose_factors.push_back({0, obs.p, obs.q, config.obs_sqrt_info});
      }
      continue;
    }

    const KeyframeState& prev = graph.keyframes.back();
    if (obs.t - prev.t > config.keyframe_period * 1.5 + 1e-9) {
      throw DataError("run_fixed_lag: observation gap of " + std::to_string(obs.t - prev.t) +
                      " s exceeds the keyframe period at " + std::to_string(prev.t));
    }

    const auto window = slice_imu(prev.t, obs.t);
    const Preintegration preint = integrate(window, prev.bias);

    // Propagate the previous state through the preintegration for the guess.
    const double dt = preint.dt_total;
    KeyframeState next;
    next.t = obs.t;
    next.q = prev.q * preint.gamma;
    next.p = prev.p + prev.v * dt - 0.5 * config.gravity.g_world * dt * dt +
             quat_rotate(prev.q, preint.alpha);
    next.v = prev.v - config.gravity.g_world * dt + quat_rotate(prev.q, preint.beta);
    next.bias = prev.bias;

    const int k = static_cast<int>(graph.keyframes.size());
    graph.keyframes.push_back(next);
    graph.imu_factors.push_back({k - 1, preint});
    if (!obs.dropped) {
      graph.pose_factors.push_back({k, obs.p, obs.q, config.obs_sqrt_info});
    }

    if (config.prior_enabled) {
      if (const PriorSample* prior = latest_prior(obs.t)) {
        if (config.retroactive_priors) {
          graph.prior_factors.clear();
          for (int kk = 0; kk <= k; ++kk) {
            graph.prior_factors.push_back({prior->bias, config.prior_weight, kk});
          }
        } else {
          graph.prior_factors.push_back({prior->bias, config.prior_weight, k});
        }
      }
    }

    const LmReport rep = optimize_window(graph, config.lm);
    result.total_lm_iterations += rep.iterations;
    result.final_cost = rep.final_cost;

    if (static_cast<int>(graph.keyframes.size()) > config.lag) {
      emit_oldest();
    }
  }

  while (!graph.keyframes.empty()) {
    emit_oldest();
  }
  return result;
}

}  // namespace ipnet
