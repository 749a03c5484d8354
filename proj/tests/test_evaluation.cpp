#include <catch2/catch.hpp>
#include <random>

#include "ipnet/evaluation.hpp"

using namespace ipnet;

namespace {

std::vector<TimedPose> curve_trajectory(int n, double dt = 0.1) {
  std::vector<TimedPose> out(n);
  for (int i = 0; i < n; ++i) {
    const double t = i * dt;
    out[i].t = t;
    out[i].p = Vector3d(std::sin(0.5 * t), 0.8 * std::cos(0.4 * t), 0.1 * t);
    out[i].q = quat_from_rotvec(Vector3d(0.1 * std::sin(t), 0.05 * t, 0.2 * std::cos(0.3 * t)));
  }
  return out;
}

std::vector<TimedPose> apply_rigid(const std::vector<TimedPose>& in, const Se3& tf) {
  std::vector<TimedPose> out = in;
  const UnitQuaternion qr = [&] {
    const Eigen::AngleAxisd aa(tf.rotation);
    return quat_from_rotvec(aa.angle() * aa.axis());
  }();
  for (auto& s : out) {
    s.p = tf.apply(s.p);
    s.q = qr * s.q;
  }
  return out;
}

double alignment_cost(std::span<const TimedPose> est, std::span<const TimedPose> gt,
                      const Association& assoc, const Se3& tf) {
  double sum = 0.0;
  for (const auto& [e, g] : assoc.pairs) sum += (tf.apply(est[e].p) - gt[g].p).squaredNorm();
  return sum;
}

}  // namespace

TEST_CASE("identical trajectories give identity alignment and zero metrics", "[eval]") {
  const auto traj = curve_trajectory(50);
  const auto assoc = associate(traj, traj);
  CHECK(assoc.pairs.size() == 50);
  const Se3 tf = align_se3(traj, traj, assoc);
  CHECK((tf.rotation - Matrix3d::Identity()).norm() < 1e-12);
  CHECK(tf.translation.norm() < 1e-12);
  CHECK(ate_rmse(traj, traj) < 1e-12);
  CHECK(rpe_rmse(traj, traj) < 1e-12);
}

TEST_CASE("alignment recovers a rigid offset exactly", "[eval]") {
  const auto gt = curve_trajectory(60);
  Se3 tf;
  tf.rotation = quat_from_rotvec(Vector3d(0.3, -0.4, 0.9)).rotation_matrix();
  tf.translation = Vector3d(2.0, -1.0, 0.5);
  const auto est = apply_rigid(gt, tf);

  const auto assoc = associate(est, gt);
  const Se3 recovered = align_se3(est, gt, assoc);
  // recovered ∘ tf = identity on the data.
  CHECK((recovered.rotation * tf.rotation - Matrix3d::Identity()).norm() < 1e-10);
  CHECK(ate_rmse(est, gt) < 1e-10);

  // A constant translation alone is absorbed by the alignment.
  auto shifted = gt;
  for (auto& s : shifted) s.p += Vector3d(1, 0, 0);
  CHECK(ate_rmse(shifted, gt) < 1e-12);
}

TEST_CASE("closed-form alignment is a local optimum", "[eval]") {
  const auto gt = curve_trajectory(40);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> gauss(0.0, 0.05);
  auto est = gt;
  for (auto& s : est) s.p += Vector3d(gauss(rng), gauss(rng), gauss(rng));

  const auto assoc = associate(est, gt);
  const Se3 best = align_se3(est, gt, assoc);
  const double best_cost = alignment_cost(est, gt, assoc, best);

  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    Se3 perturbed = best;
    const Vector3d dr(1e-4 * u(rng), 1e-4 * u(rng), 1e-4 * u(rng));
    perturbed.rotation = best.rotation * quat_from_rotvec(dr).rotation_matrix();
    perturbed.translation += 1e-4 * Vector3d(u(rng), u(rng), u(rng));
    CHECK(alignment_cost(est, gt, assoc, perturbed) >= best_cost - 1e-15);
  }
}

TEST_CASE("degenerate geometry is rejected", "[eval]") {
  std::vector<TimedPose> line(10);
  for (int i = 0; i < 10; ++i) {
    line[i].t = i * 0.1;
    line[i].p = Vector3d(i * 0.5, 0, 0);  // collinear
  }
  const auto assoc = associate(line, line);
  CHECK_THROWS_AS(align_se3(line, line, assoc), DataError);

  std::vector<TimedPose> two(2);
  two[0].t = 0;
  two[1].t = 0.1;
  CHECK_THROWS_AS(align_se3(two, two, associate(two, two)), DataError);
}

TEST_CASE("ATE is invariant to rigid transforms of the estimate", "[eval]") {
  const auto gt = curve_trajectory(50);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss(0.0, 0.02);
  auto est = gt;
  for (auto& s : est) s.p += Vector3d(gauss(rng), gauss(rng), gauss(rng));
  const double base = ate_rmse(est, gt);

  Se3 tf;
  tf.rotation = quat_from_rotvec(Vector3d(-0.7, 0.2, 1.1)).rotation_matrix();
  tf.translation = Vector3d(5, -3, 2);
  CHECK(ate_rmse(apply_rigid(est, tf), gt) == Approx(base).epsilon(1e-9));
}

TEST_CASE("RPE is invariant to independent rigid transforms", "[eval]") {
  const auto gt = curve_trajectory(50);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto est = gt;
  for (auto& s : est) {
    s.q = s.q * quat_from_rotvec(0.01 * Vector3d(u(rng), u(rng), u(rng)));
  }
  const double base = rpe_rmse(est, gt, 1);
  CHECK(base > 0.0);

  Se3 tf_a, tf_b;
  tf_a.rotation = quat_from_rotvec(Vector3d(0.5, 0.5, -0.2)).rotation_matrix();
  tf_a.translation = Vector3d(1, 2, 3);
  tf_b.rotation = quat_from_rotvec(Vector3d(-1.0, 0.1, 0.4)).rotation_matrix();
  tf_b.translation = Vector3d(-4, 0, 9);
  CHECK(rpe_rmse(apply_rigid(est, tf_a), apply_rigid(gt, tf_b), 1) ==
        Approx(base).epsilon(1e-9));

  SECTION("delta widens the baseline") {
    CHECK_NOTHROW(rpe_rmse(est, gt, 5));
    CHECK_THROWS_AS(rpe_rmse(est, gt, 0), ConfigError);
  }
}

TEST_CASE("metrics are stable under row reordering", "[eval]") {
  const auto gt = curve_trajectory(40);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> gauss(0.0, 0.01);
  auto est = gt;
  for (auto& s : est) s.p += Vector3d(gauss(rng), gauss(rng), gauss(rng));

  const double ate0 = ate_rmse(est, gt);
  const double rpe0 = rpe_rmse(est, gt);

  auto est_shuffled = est;
  auto gt_shuffled = gt;
  std::shuffle(est_shuffled.begin(), est_shuffled.end(), rng);
  std::shuffle(gt_shuffled.begin(), gt_shuffled.end(), rng);
  CHECK(ate_rmse(est_shuffled, gt_shuffled) == Approx(ate0).epsilon(1e-12));
  CHECK(rpe_rmse(est_shuffled, gt_shuffled) == Approx(rpe0).epsilon(1e-12));
}

TEST_CASE("association respects the 20 ms gap and injectivity", "[eval]") {
  std::vector<TimedPose> est(3), gt(3);
  est[0].t = 0.000;
  est[1].t = 0.500;  // has no gt partner within 20 ms
  est[2].t = 1.000;
  gt[0].t = 0.015;
  gt[1].t = 0.990;
  gt[2].t = 1.005;
  const auto assoc = associate(est, gt);
  REQUIRE(assoc.pairs.size() == 2);
  CHECK(assoc.pairs[0] == std::pair<int, int>{0, 0});
  CHECK(assoc.pairs[1].first == 2);  // est[2] pairs with exactly one gt row
}

TEST_CASE("noisy ATE follows the shrinkage-corrected sigma estimate",
          "[eval][slow]") {
  const int n = 200;
  const double sigma = 0.01;
  const auto gt = curve_trajectory(n, 0.05);
  std::mt19937_64 rng(13);
  std::normal_distribution<double> gauss(0.0, sigma);

  double mean_ate = 0.0;
  const int runs = 50;
  for (int r = 0; r < runs; ++r) {
    auto est = gt;
    for (auto& s : est) s.p += Vector3d(gauss(rng), gauss(rng), gauss(rng));
    mean_ate += ate_rmse(est, gt);
  }
  mean_ate /= runs;
  // SE(3) alignment absorbs 6 of the 3n error dimensions:
  // E[ATE²] ≈ σ²(3 − 6/n).
  const double expected = sigma * std::sqrt(3.0 - 6.0 / n);
  CHECK(mean_ate == Approx(expected).epsilon(0.2));
}

TEST_CASE("metric report serializes", "[eval]") {
  const auto gt = curve_trajectory(30);
  std::mt19937_64 rng(15);
  std::normal_distribution<double> gauss(0.0, 0.01);
  auto est = gt;
  for (auto& s : est) s.p += Vector3d(gauss(rng), gauss(rng), gauss(rng));

  const MetricReport r = evaluate_trajectory(est, gt);
  const json j = metric_report_json(r);
  CHECK(j.at("n_associated").get<int>() == 30);
  CHECK(j.at("ate_rmse_m").get<double>() == r.ate_rmse_m);
  CHECK(j.contains("alignment"));
}
