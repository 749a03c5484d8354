#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "ipnet/geometry.hpp"

namespace ipnet {

/// One timestamped body-frame measurement pair.
struct ImuSample {
  double t = 0.0;        // seconds, strictly increasing within a sequence
  Vector3d gyro{0, 0, 0};   // rad/s
  Vector3d accel{0, 0, 0};  // m/s²
};

struct BiasLimits {
  double max_ba = 2.0;  // m/s²
  double max_bw = 0.5;  // rad/s
};

/// Paired accelerometer/gyroscope bias.
struct ImuBias {
  Vector3d ba{0, 0, 0};  // m/s²
  Vector3d bw{0, 0, 0};  // rad/s

  void validate(const BiasLimits& limits = {}) const {
    if (!ba.allFinite() || !bw.allFinite()) {
      throw NumericError("ImuBias: non-finite component");
    }
    if (ba.norm() >= limits.max_ba || bw.norm() >= limits.max_bw) {
      throw ConfigError("ImuBias: magnitude outside sanity bounds");
    }
  }
};

/// Converts a continuous-time noise density (the datasheet convention,
/// e.g. m/s²/√Hz) into the per-sample standard deviation used here:
/// σ_sample = density · √rate.
inline double per_sample_std_from_density(double density, double rate_hz) {
  if (density < 0 || rate_hz <= 0) {
    throw ConfigError("per_sample_std_from_density: invalid density or rate");
  }
  return density * std::sqrt(rate_hz);
}

/// Per-sample white-noise standard deviations plus random-walk densities.
/// Identical seeds reproduce identical streams bit-for-bit.
struct NoiseSpec {
  double accel_noise_std = 0.0;  // m/s² per sample
  double gyro_noise_std = 0.0;   // rad/s per sample
  double accel_walk_std = 0.0;   // m/s² per √s
  double gyro_walk_std = 0.0;    // rad/s per √s
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (accel_noise_std < 0 || gyro_noise_std < 0 || accel_walk_std < 0 ||
        gyro_walk_std < 0) {
      throw ConfigError("NoiseSpec: negative standard deviation");
    }
  }
};

struct GravityConfig {
  Vector3d g_world{0, 0, 9.81};  // m/s²; stationary level accel reads +g
  bool unchecked = false;        // allow magnitudes outside [9.7, 9.9] (zero-g test mode)

  void validate() const {
    if (!g_world.allFinite()) {
      throw NumericError("GravityConfig: non-finite gravity");
    }
    const double g = g_world.norm();
    if (!unchecked && (g < 9.7 || g > 9.9)) {
      throw ConfigError("GravityConfig: magnitude outside [9.7, 9.9]; set unchecked to override");
    }
  }
};

/// Closed-form sinusoidal trajectory. Positions are per-axis sinusoids in
/// the world frame; attitude is yaw-pitch-roll with each angle a sinusoid.
/// Twice differentiable, so every derived quantity below is exact.
struct TrajectorySpec {
  Vector3d pos_amp{0, 0, 0};    // m
  Vector3d pos_freq{0, 0, 0};   // Hz
  Vector3d pos_phase{0, 0, 0};  // rad
  Vector3d att_amp{0, 0, 0};    // rad (roll, pitch, yaw)
  Vector3d att_freq{0, 0, 0};   // Hz
  double duration = 60.0;       // s
  double imu_rate = 200.0;      // Hz
  UnitQuaternion initial_orientation;  // composed on the left of the sinusoid attitude

  void validate() const {
    if (duration <= 0 || imu_rate <= 0) {
      throw ConfigError("TrajectorySpec: duration and imu_rate must be positive");
    }
    if (!pos_amp.allFinite() || !pos_freq.allFinite() || !pos_phase.allFinite() ||
        !att_amp.allFinite() || !att_freq.allFinite()) {
      throw NumericError("TrajectorySpec: non-finite field");
    }
  }
};

/// Exact kinematic state at one instant.
struct MotionSample {
  Vector3d position;      // world, m
  Vector3d velocity;      // world, m/s
  Vector3d acceleration;  // world, m/s²
  UnitQuaternion orientation;  // body → world
  Vector3d omega_body;    // rad/s
};

/// Ground-truth pose/velocity record (bias channels optional).
struct GtState {
  double t = 0.0;
  Vector3d p{0, 0, 0};
  UnitQuaternion q;
  Vector3d v{0, 0, 0};
  std::optional<ImuBias> bias;
};

/// Analytic evaluation of the sinusoid family. No numerical differentiation:
/// velocity/acceleration/body-rate are the closed-form derivatives.
inline MotionSample sample_ground_truth(const TrajectorySpec& spec, double t) {
  spec.validate();
  if (t < 0.0 || t > spec.duration) {
    throw ConfigError("sample_ground_truth: t outside [0, duration]");
  }
  MotionSample out;
  for (int i = 0; i < 3; ++i) {
    const double w = 2.0 * M_PI * spec.pos_freq(i);
    const double arg = w * t + spec.pos_phase(i);
    out.position(i) = spec.pos_amp(i) * std::sin(arg);
    out.velocity(i) = spec.pos_amp(i) * w * std::cos(arg);
    out.acceleration(i) = -spec.pos_amp(i) * w * w * std::sin(arg);
  }

  // Yaw-pitch-roll (z-y-x) sinusoids with exact Euler-rate-to-body-rate map.
  double ang[3], rate[3];
  for (int i = 0; i < 3; ++i) {
    const double w = 2.0 * M_PI * spec.att_freq(i);
    ang[i] = spec.att_amp(i) * std::sin(w * t);
    rate[i] = spec.att_amp(i) * w * std::cos(w * t);
  }
  const double roll = ang[0], pitch = ang[1], yaw = ang[2];
  const double droll = rate[0], dpitch = rate[1], dyaw = rate[2];

  const UnitQuaternion qx = quat_from_rotvec(Vector3d(roll, 0, 0));
  const UnitQuaternion qy = quat_from_rotvec(Vector3d(0, pitch, 0));
  const UnitQuaternion qz = quat_from_rotvec(Vector3d(0, 0, yaw));
  out.orientation = spec.initial_orientation * qz * qy * qx;

  const double cr = std::cos(roll), sr = std::sin(roll);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  out.omega_body = Vector3d(droll - dyaw * sp,
                            dpitch * cr + dyaw * cp * sr,
                            -dpitch * sr + dyaw * cp * cr);
  return out;
}

namespace detail {

/// Marsaglia polar Gaussian over mt19937_64; explicit state so streams are
/// reproducible independent of the standard library's distribution internals.
class GaussianSampler {
 public:
  explicit GaussianSampler(std::uint64_t seed) : rng_(seed) {}

  double operator()() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  Vector3d vec3() {
    const double a = (*this)();
    const double b = (*this)();
    const double c = (*this)();
    return {a, b, c};
  }

 private:
  double uniform() {
    // 53-bit mantissa uniform in [0, 1).
    return static_cast<double>(rng_() >> 11) * 0x1.0p-53;
  }

  std::mt19937_64 rng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace detail

/// Measurements plus the true (possibly random-walked) bias at each sample.
struct SynthesizedSequence {
  std::vector<ImuSample> samples;
  std::vector<ImuBias> true_bias;

  ImuBias mean_true_bias() const {
    ImuBias m;
    for (const auto& b : true_bias) {
      m.ba += b.ba;
      m.bw += b.bw;
    }
    const double n = static_cast<double>(true_bias.size());
    m.ba /= n;
    m.bw /= n;
    return m;
  }
};

/// Inverts the measurement model: accel = R(q)ᵀ(a_world + g_world) + ba + n,
/// gyro = ω_body + bw + n. Sample count is floor(duration·rate) + 1. When the
/// walk densities are positive the bias accumulates a random walk per step.
inline SynthesizedSequence synthesize_measurements(const TrajectorySpec& spec,
                                                   const ImuBias& bias,
                                                   const NoiseSpec& noise,
                                                   const GravityConfig& gravity) {
  spec.validate();
  noise.validate();
  gravity.validate();
  bias.validate();

  const int n = static_cast<int>(std::floor(spec.duration * spec.imu_rate)) + 1;
  const double dt = 1.0 / spec.imu_rate;

  detail::GaussianSampler gauss(noise.rng_seed);
  SynthesizedSequence out;
  out.samples.reserve(n);
  out.true_bias.reserve(n);

  ImuBias b = bias;
  for (int i = 0; i < n; ++i) {
    const double t = std::min(i * dt, spec.duration);
    const MotionSample m = sample_ground_truth(spec, t);

    ImuSample s;
    s.t = i * dt;
    s.accel = quat_rotate(m.orientation.inverse(), m.acceleration + gravity.g_world) + b.ba;
    s.gyro = m.omega_body + b.bw;
    if (noise.accel_noise_std > 0) s.accel += noise.accel_noise_std * gauss.vec3();
    if (noise.gyro_noise_std > 0) s.gyro += noise.gyro_noise_std * gauss.vec3();

    out.samples.push_back(s);
    out.true_bias.push_back(b);

    if (noise.accel_walk_std > 0) b.ba += noise.accel_walk_std * std::sqrt(dt) * gauss.vec3();
    if (noise.gyro_walk_std > 0) b.bw += noise.gyro_walk_std * std::sqrt(dt) * gauss.vec3();
  }
  return out;
}

/// Ground-truth states at the given rate (default: the IMU rate).
inline std::vector<GtState> sample_gt_states(const TrajectorySpec& spec, double rate = 0.0) {
  spec.validate();
  if (rate <= 0.0) rate = spec.imu_rate;
  const int n = static_cast<int>(std::floor(spec.duration * rate)) + 1;
  const double dt = 1.0 / rate;
  std::vector<GtState> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double t = std::min(i * dt, spec.duration);
    const MotionSample m = sample_ground_truth(spec, t);
    out.push_back(GtState{i * dt, m.position, m.orientation, m.velocity, std::nullopt});
  }
  return out;
}

}  // namespace ipnet
