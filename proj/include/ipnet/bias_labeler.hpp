#pragma once

#include <Eigen/Dense>
#include <span>

#include "ipnet/optim.hpp"
#include "ipnet/preintegration.hpp"

namespace ipnet {

/// First-order solver schedule for the label estimation. The defaults come
/// from the training recipe: gyro lr 0.001, accel lr 0.01, 15000 iterations,
/// learning rate ×0.1 every 5000.
struct OptSchedule {
  double lr = 0.001;
  int iterations = 15000;
  double decay_factor = 0.1;
  int decay_every = 5000;
  int relinearize_passes = 3;

  static OptSchedule gyro_defaults() { return OptSchedule{0.001, 15000, 0.1, 5000, 3}; }
  static OptSchedule accel_defaults() { return OptSchedule{0.01, 15000, 0.1, 5000, 3}; }

  void validate() const {
    if (lr <= 0 || iterations < 1 || decay_factor <= 0 || decay_every < 1 ||
        relinearize_passes < 1) {
      throw ConfigError("OptSchedule: non-positive field");
    }
  }
};

/// Per-interval preintegration/ground-truth residual data for one sequence.
/// Keeps the raw sample slices so the set can be re-linearized at a new bias.
struct IntervalResidualSet {
  struct Interval {
    std::vector<ImuSample> samples;  // boundary samples included
    GtState s0, s1;
    Preintegration preint;
    GtTargets gt;
    double dt = 0.0;
  };

  std::vector<Interval> intervals;
  GravityConfig gravity;
  ImuBias linearization;

  void relinearize(const ImuBias& bias) {
    for (auto& iv : intervals) {
      iv.preint = integrate(iv.samples, bias);
    }
    linearization = bias;
  }

  /// Rotation-channel residual 2·vec(γ̂⁻¹ ⊗ γ_gt) for interval k.
  Vector3d gamma_residual(std::size_t k) const {
    const auto& iv = intervals[k];
    return 2.0 * (iv.preint.gamma.inverse() * iv.gt.gamma).vec();
  }

  struct ChannelRms {
    double alpha = 0.0;
    double beta = 0.0;
    double gamma = 0.0;
  };

  ChannelRms residual_rms() const {
    ChannelRms r;
    for (std::size_t k = 0; k < intervals.size(); ++k) {
      const auto& iv = intervals[k];
      r.alpha += (iv.gt.alpha - iv.preint.alpha).squaredNorm();
      r.beta += (iv.gt.beta - iv.preint.beta).squaredNorm();
      r.gamma += gamma_residual(k).squaredNorm();
    }
    const double n = static_cast<double>(intervals.size());
    r.alpha = std::sqrt(r.alpha / n);
    r.beta = std::sqrt(r.beta / n);
    r.gamma = std::sqrt(r.gamma / n);
    return r;
  }
};

namespace detail {

inline GtState interpolate_gt(std::span<const GtState> gt, double t) {
  if (gt.empty() || t < gt.front().t - 1e-9 || t > gt.back().t + 1e-9) {
    throw DataError("interpolate_gt: time " + std::to_string(t) +
                    " outside ground-truth span");
  }
  auto it = std::lower_bound(gt.begin(), gt.end(), t,
                             [](const GtState& s, double tt) { return s.t < tt; });
  if (it == gt.begin()) return gt.front();
  if (it == gt.end()) return gt.back();
  const GtState& b = *it;
  const GtState& a = *(it - 1);
  const double span = b.t - a.t;
  if (span <= 0) return a;
  const double u = (t - a.t) / span;
  GtState out;
  out.t = t;
  out.p = (1.0 - u) * a.p + u * b.p;
  out.v = (1.0 - u) * a.v + u * b.v;
  out.q = slerp(a.q, b.q, u);
  return out;
}

}  // namespace detail

/// Partition the IMU stream into consecutive intervals of ~interval_s seconds,
/// preintegrate each at the given linearization bias (default zero) and attach
/// interpolated ground-truth targets. Interval boundaries snap to IMU sample
/// times so the integrated span and the ground-truth span agree exactly.
inline IntervalResidualSet build_intervals(std::span<const ImuSample> imu,
                                           std::span<const GtState> gt_states,
                                           double interval_s = 1.0,
                                           const GravityConfig& gravity = {},
                                           const ImuBias& linearization = {}) {
  if (interval_s <= 0) {
    throw ConfigError("build_intervals: interval_s must be positive");
  }
  if (imu.size() < 2) {
    throw DataError("build_intervals: need at least 2 IMU samples");
  }
  if (gt_states.size() < 2 || gt_states.front().t > imu.front().t + 1e-9 ||
      gt_states.back().t < imu.back().t - 1e-9) {
    throw DataError("build_intervals: ground truth does not cover the IMU span");
  }
  for (std::size_t i = 0; i + 1 < gt_states.size(); ++i) {
    const double gap = gt_states[i + 1].t - gt_states[i].t;
    if (gap > 0.5 && gt_states[i + 1].t > imu.front().t && gt_states[i].t < imu.back().t) {
      throw DataError("build_intervals: ground-truth gap of " + std::to_string(gap) +
                      " s inside the IMU span");
    }
  }

  IntervalResidualSet set;
  set.gravity = gravity;
  set.linearization = linearization;

  const double t0 = imu.front().t;
  std::size_t start = 0;
  int k = 1;
  while (true) {
    const double boundary = t0 + k * interval_s;
    // First sample at or past the boundary (within jitter tolerance).
    std::size_t end = start;
    while (end + 1 < imu.size() && imu[end].t < boundary - 1e-9) ++end;
    if (imu[end].t < boundary - 1e-9) break;  // ran out of samples
    if (end - start + 1 >= 2) {
      IntervalResidualSet::Interval iv;
      iv.samples.assign(imu.begin() + start, imu.begin() + end + 1);
      iv.s0 = detail::interpolate_gt(gt_states, imu[start].t);
      iv.s1 = detail::interpolate_gt(gt_states, imu[end].t);
      iv.dt = imu[end].t - imu[start].t;
      iv.preint = integrate(iv.samples, linearization);
      iv.gt = gt_targets(iv.s0, iv.s1, gravity, iv.dt);
      set.intervals.push_back(std::move(iv));
    }
    start = end;
    ++k;
    if (start + 1 >= imu.size()) break;
  }
  if (set.intervals.empty()) {
    throw DataError("build_intervals: no complete interval in the input span");
  }
  return set;
}

struct SolveDiag {
  int iterations = 0;
  bool converged = true;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

namespace detail {

/// Adam on the quadratic ½‖c − J δ‖² summed over intervals, restated through
/// the precomputed normal matrix so each iteration is O(1). Returns the
/// lowest-loss iterate of the schedule (the iteration path shows transient
/// ringing right after learning-rate decays).
inline Vector3d adam_linear_solve(const Matrix3d& h, const Vector3d& rhs, double c2,
                                  const OptSchedule& sched, SolveDiag* diag) {
  // loss(δ) = δᵀ(H/2)δ − rhsᵀδ + c2/2, gradient = H δ − rhs.
  auto loss_of = [&](const Vector3d& d) {
    return 0.5 * d.dot(h * d) - rhs.dot(d) + 0.5 * c2;
  };

  Vector3d d = Vector3d::Zero();
  MomentState state;
  Vector3d best = d;
  double best_loss = loss_of(d);
  const double initial_loss = best_loss;
  double prev_loss = best_loss;
  int rising = 0;
  for (int t = 0; t < sched.iterations; ++t) {
    const double lr = sched.lr * std::pow(sched.decay_factor, t / sched.decay_every);
    const Vector3d g = h * d - rhs;
    std::array<double, 3> param{d.x(), d.y(), d.z()};
    std::array<double, 3> grad{g.x(), g.y(), g.z()};
    adam_update(param, grad, state, lr);
    d = Vector3d(param[0], param[1], param[2]);

    const double loss = loss_of(d);
    if (!std::isfinite(loss)) {
      throw NumericError("bias label solver diverged: non-finite loss at iteration " +
                         std::to_string(t));
    }
    rising = loss > prev_loss ? rising + 1 : 0;
    if (rising >= 1000) {
      throw NumericError("bias label solver diverged: loss rose for " +
                         std::to_string(rising) + " consecutive iterations (" +
                         std::to_string(best_loss) + " -> " + std::to_string(loss) +
                         ") at lr " + std::to_string(lr));
    }
    prev_loss = loss;
    if (loss < best_loss) {
      best_loss = loss;
      best = d;
    }
  }
  if (diag) {
    diag->iterations += sched.iterations;
    diag->initial_loss = initial_loss;
    diag->final_loss = best_loss;
    diag->converged = diag->converged && best_loss <= initial_loss;
  }
  return best;
}

}  // namespace detail

/// Gyroscope bias shared across every interval of the sequence: minimizes
/// Σ_k ‖2·vec(γ̂_k⁻¹ ⊗ γ_gt,k) − J_gamma_bw,k·δbw‖² with an Adam loop, then
/// re-linearizes (re-integrates at the solved bias) for each outer pass.
inline Vector3d solve_gyro_bias(IntervalResidualSet& set, const OptSchedule& sched,
                                SolveDiag* diag = nullptr) {
  sched.validate();
  if (set.intervals.empty()) {
    throw ConfigError("solve_gyro_bias: empty interval set");
  }
  Vector3d bw = set.linearization.bw;
  for (int pass = 0; pass < sched.relinearize_passes; ++pass) {
    if (pass > 0) {
      set.relinearize(ImuBias{set.linearization.ba, bw});
    }
    Matrix3d h = Matrix3d::Zero();
    Vector3d rhs = Vector3d::Zero();
    double c2 = 0.0;
    for (std::size_t k = 0; k < set.intervals.size(); ++k) {
      const Matrix3d& j = set.intervals[k].preint.J_gamma_bw;
      const Vector3d c = set.gamma_residual(k);
      h += 2.0 * j.transpose() * j;
      rhs += 2.0 * j.transpose() * c;
      c2 += 2.0 * c.squaredNorm();
    }
    const Vector3d delta = detail::adam_linear_solve(h, rhs, c2, sched, diag);
    bw = set.linearization.bw + delta;
  }
  return bw;
}

/// Accelerometer bias with the gyroscope bias held fixed: minimizes
/// Σ_k ‖(α_gt−α̂)_k − J_alpha_ba δba − J_alpha_bw δbw‖² + (β analog).
inline Vector3d solve_accel_bias(IntervalResidualSet& set, const Vector3d& bw_fixed,
                                 const OptSchedule& sched, SolveDiag* diag = nullptr) {
  sched.validate();
  if (set.intervals.empty()) {
    throw ConfigError("solve_accel_bias: empty interval set");
  }
  Vector3d ba = set.linearization.ba;
  for (int pass = 0; pass < sched.relinearize_passes; ++pass) {
    if (pass > 0) {
      set.relinearize(ImuBias{ba, bw_fixed});
    }
    const Vector3d dbw = bw_fixed - set.linearization.bw;
    Matrix3d h = Matrix3d::Zero();
    Vector3d rhs = Vector3d::Zero();
    double c2 = 0.0;
    for (const auto& iv : set.intervals) {
      const Vector3d ca = (iv.gt.alpha - iv.preint.alpha) - iv.preint.J_alpha_bw * dbw;
      const Vector3d cb = (iv.gt.beta - iv.preint.beta) - iv.preint.J_beta_bw * dbw;
      const Matrix3d& ja = iv.preint.J_alpha_ba;
      const Matrix3d& jb = iv.preint.J_beta_ba;
      h += 2.0 * (ja.transpose() * ja + jb.transpose() * jb);
      rhs += 2.0 * (ja.transpose() * ca + jb.transpose() * cb);
      c2 += 2.0 * (ca.squaredNorm() + cb.squaredNorm());
    }
    const Vector3d delta = detail::adam_linear_solve(h, rhs, c2, sched, diag);
    ba = set.linearization.ba + delta;
  }
  return ba;
}

struct LabelConfig {
  double interval_s = 1.0;
  OptSchedule gyro = OptSchedule::gyro_defaults();
  OptSchedule accel = OptSchedule::accel_defaults();
  GravityConfig gravity;
  BiasLimits limits;
};

struct LabelResult {
  ImuBias mean_bias;  // the single shared per-sequence bias
  IntervalResidualSet::ChannelRms rms_before;
  IntervalResidualSet::ChannelRms rms_after;
  int gyro_iterations = 0;
  int accel_iterations = 0;
  int interval_count = 0;
  bool converged = false;
};

/// Full label pipeline: build intervals at zero bias, solve the gyro bias,
/// freeze it, solve the accel bias, report the shared bias as the sequence
/// mean label together with before/after residual statistics.
inline LabelResult make_labels(std::span<const ImuSample> imu,
                               std::span<const GtState> gt_states,
                               const LabelConfig& config = {}) {
  auto set = build_intervals(imu, gt_states, config.interval_s, config.gravity);
  LabelResult out;
  out.interval_count = static_cast<int>(set.intervals.size());
  out.rms_before = set.residual_rms();

  SolveDiag gyro_diag, accel_diag;
  const Vector3d bw = solve_gyro_bias(set, config.gyro, &gyro_diag);
  set.relinearize(ImuBias{set.linearization.ba, bw});
  const Vector3d ba = solve_accel_bias(set, bw, config.accel, &accel_diag);
  set.relinearize(ImuBias{ba, bw});

  out.mean_bias = ImuBias{ba, bw};
  out.mean_bias.validate(config.limits);
  out.rms_after = set.residual_rms();
  out.gyro_iterations = gyro_diag.iterations;
  out.accel_iterations = accel_diag.iterations;
  out.converged = gyro_diag.converged && accel_diag.converged;
  return out;
}

}  // namespace ipnet
