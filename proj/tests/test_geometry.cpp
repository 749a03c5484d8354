#include <catch2/catch.hpp>
#include <random>

#include "ipnet/geometry.hpp"

using namespace ipnet;

namespace {

// Independent oracle: exp([v]×) by 20-term Taylor series with
// scaling-and-squaring so truncation stays below 1e-12 up to ‖v‖ = π.
Matrix3d rotation_exp_series(const Vector3d& v) {
  const int squarings = 4;
  const Matrix3d a = skew(v) / static_cast<double>(1 << squarings);
  Matrix3d term = Matrix3d::Identity();
  Matrix3d sum = term;
  for (int k = 1; k <= 20; ++k) {
    term = term * a / static_cast<double>(k);
    sum += term;
  }
  for (int k = 0; k < squarings; ++k) {
    sum = sum * sum;
  }
  return sum;
}

Vector3d random_vec(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return scale * Vector3d(u(rng), u(rng), u(rng));
}

UnitQuaternion random_quat(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return UnitQuaternion(u(rng), u(rng), u(rng), u(rng));
}

}  // namespace

TEST_CASE("quat_from_rotvec identity and axis cases", "[geometry]") {
  const auto q0 = quat_from_rotvec(Vector3d::Zero());
  CHECK(q0.w() == 1.0);
  CHECK(q0.x() == 0.0);
  CHECK(q0.y() == 0.0);
  CHECK(q0.z() == 0.0);

  const auto qz = quat_from_rotvec(Vector3d(0, 0, M_PI / 2));
  CHECK(qz.w() == Approx(std::sqrt(2.0) / 2).epsilon(1e-12));
  CHECK(qz.x() == 0.0);
  CHECK(qz.y() == 0.0);
  CHECK(qz.z() == Approx(std::sqrt(2.0) / 2).epsilon(1e-12));

  CHECK_THROWS_AS(quat_from_rotvec(Vector3d(0, 0, std::nan(""))), NumericError);
}

TEST_CASE("quat_from_rotvec matches series-expansion rotation matrix", "[geometry]") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> mag(0.0, M_PI - 1e-6);
  for (int i = 0; i < 200; ++i) {
    Vector3d v = random_vec(rng, 1.0);
    if (v.norm() < 1e-12) continue;
    v *= mag(rng) / v.norm();
    const Matrix3d r = quat_from_rotvec(v).rotation_matrix();
    const Matrix3d r_oracle = rotation_exp_series(v);
    CHECK((r - r_oracle).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("quat_log basics", "[geometry]") {
  CHECK(quat_log(UnitQuaternion::identity()).norm() == 0.0);

  const UnitQuaternion q(std::sqrt(2.0) / 2, 0, 0, std::sqrt(2.0) / 2);
  const Vector3d v = quat_log(q);
  CHECK(v.x() == Approx(0.0).margin(1e-14));
  CHECK(v.y() == Approx(0.0).margin(1e-14));
  CHECK(v.z() == Approx(M_PI / 2).epsilon(1e-12));

  // Negated representation maps to the same rotation vector.
  const UnitQuaternion qn(-std::sqrt(2.0) / 2, 0, 0, -std::sqrt(2.0) / 2);
  CHECK((quat_log(qn) - v).norm() < 1e-12);
}

TEST_CASE("exp/log round-trip on the open ball", "[geometry]") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> mag(0.0, M_PI - 1e-3);
  for (int i = 0; i < 1000; ++i) {
    Vector3d v = random_vec(rng, 1.0);
    if (v.norm() < 1e-12) continue;
    v *= mag(rng) / v.norm();
    const Vector3d back = quat_log(quat_from_rotvec(v));
    CHECK((back - v).norm() < 1e-9);
  }
}

TEST_CASE("quaternion product: identity, associativity, norm", "[geometry]") {
  std::mt19937_64 rng(13);
  const UnitQuaternion a = random_quat(rng);
  const UnitQuaternion e = UnitQuaternion::identity();
  const UnitQuaternion ae = quat_multiply(a, e);
  CHECK(ae.w() == Approx(a.w()).margin(1e-15));
  CHECK(ae.x() == Approx(a.x()).margin(1e-15));

  for (int i = 0; i < 100; ++i) {
    const auto p = random_quat(rng), q = random_quat(rng), r = random_quat(rng);
    const auto lhs = quat_multiply(quat_multiply(p, q), r);
    const auto rhs = quat_multiply(p, quat_multiply(q, r));
    CHECK(std::abs(lhs.w() - rhs.w()) < 1e-12);
    CHECK((lhs.vec() - rhs.vec()).norm() < 1e-12);
    CHECK(std::abs(lhs.norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("quat_rotate rotates basis vectors", "[geometry]") {
  const auto q = quat_from_rotvec(Vector3d(0, 0, M_PI / 2));
  const Vector3d r = quat_rotate(q, Vector3d(1, 0, 0));
  CHECK(r.x() == Approx(0.0).margin(1e-12));
  CHECK(r.y() == Approx(1.0).epsilon(1e-12));
  CHECK(r.z() == Approx(0.0).margin(1e-12));
}

TEST_CASE("rotation matrices are orthonormal and match quat_rotate", "[geometry]") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 100; ++i) {
    const auto q = random_quat(rng);
    const Matrix3d r = q.rotation_matrix();
    CHECK((r.transpose() * r - Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    const Vector3d v = random_vec(rng, 2.0);
    CHECK((r * v - quat_rotate(q, v)).norm() < 1e-12);
  }
}

TEST_CASE("slerp endpoints and midpoint", "[geometry]") {
  std::mt19937_64 rng(19);
  const auto a = random_quat(rng);
  const auto b = quat_multiply(a, quat_from_rotvec(Vector3d(0.05, -0.02, 0.08)));
  const auto s0 = slerp(a, b, 0.0);
  const auto s1 = slerp(a, b, 1.0);
  CHECK(std::abs(s0.w() - a.w()) < 1e-12);
  CHECK(std::abs(s1.w() - b.w()) < 1e-12);

  // Midpoint halves the relative rotation vector.
  const auto mid = slerp(a, b, 0.5);
  const Vector3d full = quat_log(quat_multiply(a.inverse(), b));
  const Vector3d half = quat_log(quat_multiply(a.inverse(), mid));
  CHECK((half - 0.5 * full).norm() < 1e-12);
}

TEST_CASE("quat_left/quat_right reproduce the Hamilton product", "[geometry]") {
  std::mt19937_64 rng(23);
  const auto a = random_quat(rng), b = random_quat(rng);
  const auto ab = quat_multiply(a, b);
  Eigen::Vector4d bv(b.w(), b.x(), b.y(), b.z());
  Eigen::Vector4d av(a.w(), a.x(), a.y(), a.z());
  const Eigen::Vector4d left = quat_left(a) * bv;
  const Eigen::Vector4d right = quat_right(b) * av;
  for (int i = 0; i < 4; ++i) {
    CHECK(left(i) == Approx(right(i)).margin(1e-14));
  }
  CHECK(left(0) == Approx(ab.w()).margin(1e-12));
  CHECK(left(1) == Approx(ab.x()).margin(1e-12));
}

TEST_CASE("right Jacobian and its inverse", "[geometry]") {
  std::mt19937_64 rng(29);
  for (int i = 0; i < 50; ++i) {
    const Vector3d phi = random_vec(rng, 1.5);
    const Matrix3d jr = so3_right_jacobian(phi);
    const Matrix3d jr_inv = so3_right_jacobian_inv(phi);
    CHECK((jr * jr_inv - Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-10);

    // exp(φ + δ) ≈ exp(φ) ⊗ exp(Jr δ) for small δ.
    const Vector3d d = random_vec(rng, 1e-6);
    const auto lhs = quat_from_rotvec(phi + d);
    const auto rhs = quat_multiply(quat_from_rotvec(phi), quat_from_rotvec(jr * d));
    CHECK(quat_log(quat_multiply(lhs.inverse(), rhs)).norm() < 1e-10);
  }
}
