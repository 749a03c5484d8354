#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <span>

#include "ipnet/dataset.hpp"

namespace ipnet {

/// Injective nearest-neighbor association by timestamp, max gap 20 ms.
/// Inputs are sorted internally, so row order does not affect the result.
struct Association {
  std::vector<std::pair<int, int>> pairs;  // (est index, gt index), time-ordered
};

inline Association associate(std::span<const TimedPose> est, std::span<const TimedPose> gt,
                             double max_gap = 0.02) {
  std::vector<int> ei(est.size()), gi(gt.size());
  for (std::size_t i = 0; i < est.size(); ++i) ei[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < gt.size(); ++i) gi[i] = static_cast<int>(i);
  std::sort(ei.begin(), ei.end(), [&](int a, int b) { return est[a].t < est[b].t; });
  std::sort(gi.begin(), gi.end(), [&](int a, int b) { return gt[a].t < gt[b].t; });

  Association out;
  std::size_t j = 0;
  int last_used = -1;
  for (int e : ei) {
    while (j + 1 < gi.size() && std::abs(gt[gi[j + 1]].t - est[e].t) <=
                                    std::abs(gt[gi[j]].t - est[e].t)) {
      ++j;
    }
    if (std::abs(gt[gi[j]].t - est[e].t) <= max_gap &&
        static_cast<int>(j) > last_used) {
      out.pairs.emplace_back(e, gi[j]);
      last_used = static_cast<int>(j);
    }
  }
  return out;
}

/// Rigid transform applied to the estimate: p ↦ R·p + t.
struct Se3 {
  Matrix3d rotation = Matrix3d::Identity();
  Vector3d translation{0, 0, 0};

  Vector3d apply(const Vector3d& p) const { return rotation * p + translation; }
};

/// Closed-form least-squares rigid alignment (rotation via SVD of the
/// cross-covariance, no scale): minimizes Σ‖R·p_est + t − p_gt‖² over the
/// associated pairs.
inline Se3 align_se3(std::span<const TimedPose> est, std::span<const TimedPose> gt,
                     const Association& assoc) {
  if (assoc.pairs.size() < 3) {
    throw DataError("align_se3: need at least 3 associated poses, have " +
                    std::to_string(assoc.pairs.size()));
  }
  Vector3d ce = Vector3d::Zero(), cg = Vector3d::Zero();
  for (const auto& [e, g] : assoc.pairs) {
    ce += est[e].p;
    cg += gt[g].p;
  }
  const double n = static_cast<double>(assoc.pairs.size());
  ce /= n;
  cg /= n;

  Matrix3d cov = Matrix3d::Zero();
  double spread = 0.0;
  for (const auto& [e, g] : assoc.pairs) {
    cov += (gt[g].p - cg) * (est[e].p - ce).transpose();
    spread += (est[e].p - ce).squaredNorm();
  }
  Eigen::JacobiSVD<Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // Collinear or coincident points leave the rotation about the point axis
  // unobservable: the two smaller singular values vanish together.
  if (spread < 1e-18 || sv(1) < 1e-9 * std::max(sv(0), 1e-300)) {
    throw DataError("align_se3: degenerate geometry (collinear or coincident positions)");
  }
  Matrix3d d = Matrix3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) {
    d(2, 2) = -1.0;
  }
  Se3 out;
  out.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  out.translation = cg - out.rotation * ce;
  return out;
}

/// RMSE of post-alignment position errors, meters.
inline double ate_rmse(std::span<const TimedPose> est, std::span<const TimedPose> gt,
                       double max_gap = 0.02) {
  const Association assoc = associate(est, gt, max_gap);
  if (assoc.pairs.empty()) throw DataError("ate_rmse: empty association");
  const Se3 tf = align_se3(est, gt, assoc);
  double sum = 0.0;
  for (const auto& [e, g] : assoc.pairs) {
    sum += (tf.apply(est[e].p) - gt[g].p).squaredNorm();
  }
  return std::sqrt(sum / static_cast<double>(assoc.pairs.size()));
}

/// RMSE of the relative-rotation error over associated-pose deltas, radians.
inline double rpe_rmse(std::span<const TimedPose> est, std::span<const TimedPose> gt,
                       int delta = 1, double max_gap = 0.02) {
  if (delta < 1) throw ConfigError("rpe_rmse: delta must be >= 1");
  const Association assoc = associate(est, gt, max_gap);
  if (assoc.pairs.size() <= static_cast<std::size_t>(delta)) {
    throw DataError("rpe_rmse: not enough associated poses for delta " +
                    std::to_string(delta));
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i + delta < assoc.pairs.size(); ++i) {
    const auto& [e0, g0] = assoc.pairs[i];
    const auto& [e1, g1] = assoc.pairs[i + delta];
    const UnitQuaternion rel_gt = gt[g0].q.inverse() * gt[g1].q;
    const UnitQuaternion rel_est = est[e0].q.inverse() * est[e1].q;
    const double angle = quat_log(rel_gt.inverse() * rel_est).norm();
    sum += angle * angle;
    ++count;
  }
  return std::sqrt(sum / static_cast<double>(count));
}

struct MetricReport {
  double ate_rmse_m = 0.0;
  double rpe_rmse_rad = 0.0;
  int n_associated = 0;
  Se3 alignment;
};

inline MetricReport evaluate_trajectory(std::span<const TimedPose> est,
                                        std::span<const TimedPose> gt, int delta = 1,
                                        double max_gap = 0.02) {
  MetricReport r;
  const Association assoc = associate(est, gt, max_gap);
  r.n_associated = static_cast<int>(assoc.pairs.size());
  r.alignment = align_se3(est, gt, assoc);
  r.ate_rmse_m = ate_rmse(est, gt, max_gap);
  r.rpe_rmse_rad = rpe_rmse(est, gt, delta, max_gap);
  return r;
}

inline json metric_report_json(const MetricReport& r) {
  json rot = json::array();
  for (int i = 0; i < 3; ++i) {
    rot.push_back({r.alignment.rotation(i, 0), r.alignment.rotation(i, 1),
                   r.alignment.rotation(i, 2)});
  }
  return json{{"ate_rmse_m", r.ate_rmse_m},
              {"rpe_rmse_rad", r.rpe_rmse_rad},
              {"n_associated", r.n_associated},
              {"alignment",
               {{"rotation", rot},
                {"translation",
                 {r.alignment.translation.x(), r.alignment.translation.y(),
                  r.alignment.translation.z()}}}}};
}

}  // namespace ipnet
