#pragma once

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "ipnet/bias_labeler.hpp"
#include "ipnet/fusion.hpp"
#include "ipnet/model.hpp"

namespace ipnet {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "weights container assumes a little-endian host");

/// One ingested sequence: IMU plus optional ground truth, with the internal
/// time base in f64 seconds relative to t0_ns (subtracted as integer
/// nanoseconds before conversion, so no precision is lost on epoch stamps).
struct SequenceBundle {
  std::string id;
  std::int64_t t0_ns = 0;
  std::vector<ImuSample> imu;
  std::vector<GtState> gt;
  std::string source;
};

namespace detail {

inline std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, const fs::path& path, std::size_t lineno) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path.string() + ":" + std::to_string(lineno) +
                    ": malformed numeric field '" + s + "'");
  }
}

inline std::int64_t parse_ns(const std::string& s, const fs::path& path,
                             std::size_t lineno) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path.string() + ":" + std::to_string(lineno) +
                    ": malformed timestamp '" + s + "'");
  }
}

inline double ns_to_seconds(std::int64_t ns, std::int64_t t0_ns) {
  return static_cast<double>(ns - t0_ns) * 1e-9;
}

inline std::int64_t seconds_to_ns(double t, std::int64_t t0_ns) {
  return t0_ns + std::llround(t * 1e9);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

struct EurocImuData {
  std::int64_t t0_ns = 0;
  std::vector<ImuSample> samples;  // timestamps relative to t0_ns, seconds
  std::size_t rows_read = 0;
  std::vector<std::string> warnings;
};

/// EuRoC imu0/data.csv: header row, then
/// timestamp [ns], w_x, w_y, w_z [rad/s], a_x, a_y, a_z [m/s²].
/// When t0_ns is not supplied, the first row's timestamp becomes the base.
inline EurocImuData read_euroc_imu(const fs::path& path,
                                   std::optional<std::int64_t> t0_ns = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("read_euroc_imu: cannot open " + path.string());

  EurocImuData out;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) {
    throw DataError("read_euroc_imu: empty file " + path.string());
  }
  ++lineno;

  std::int64_t prev_ns = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = detail::split_csv_row(line);
    if (cols.size() != 7) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 7 columns, got " +
                      std::to_string(cols.size()));
    }
    const std::int64_t ns = detail::parse_ns(cols[0], path, lineno);
    if (first) {
      if (!t0_ns) t0_ns = ns;
      out.t0_ns = *t0_ns;
      first = false;
    } else if (ns <= prev_ns) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": non-monotone timestamp " + std::to_string(ns) + " after " +
                      std::to_string(prev_ns));
    }
    prev_ns = ns;
    ImuSample s;
    s.t = detail::ns_to_seconds(ns, *t0_ns);
    for (int i = 0; i < 3; ++i) s.gyro(i) = detail::parse_double(cols[1 + i], path, lineno);
    for (int i = 0; i < 3; ++i) s.accel(i) = detail::parse_double(cols[4 + i], path, lineno);
    out.samples.push_back(s);
    ++out.rows_read;
  }
  if (out.samples.empty()) {
    out.warnings.push_back("read_euroc_imu: no data rows in " + path.string());
  }
  return out;
}

struct EurocGtData {
  std::int64_t t0_ns = 0;
  std::vector<GtState> states;
  std::size_t rows_read = 0;
  bool has_bias = false;
  std::vector<std::string> warnings;
};

/// EuRoC state_groundtruth_estimate0/data.csv layout:
/// timestamp [ns], p(3), q(w,x,y,z), v(3), bw(3), ba(3). Bias channels are
/// optional pass-through (11-column pose-only files are accepted). Quaternion
/// norms may deviate up to 1e-3 and are renormalized; beyond that the row is
/// an error.
inline EurocGtData read_euroc_gt(const fs::path& path,
                                 std::optional<std::int64_t> t0_ns = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("read_euroc_gt: cannot open " + path.string());

  EurocGtData out;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) {
    throw DataError("read_euroc_gt: empty file " + path.string());
  }
  ++lineno;

  std::int64_t prev_ns = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = detail::split_csv_row(line);
    if (cols.size() != 17 && cols.size() != 11) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": expected 17 (or 11) columns, got " + std::to_string(cols.size()));
    }
    const std::int64_t ns = detail::parse_ns(cols[0], path, lineno);
    if (first) {
      if (!t0_ns) t0_ns = ns;
      out.t0_ns = *t0_ns;
      first = false;
    } else if (ns <= prev_ns) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": non-monotone timestamp " + std::to_string(ns));
    }
    prev_ns = ns;

    GtState s;
    s.t = detail::ns_to_seconds(ns, *t0_ns);
    for (int i = 0; i < 3; ++i) s.p(i) = detail::parse_double(cols[1 + i], path, lineno);
    const double qw = detail::parse_double(cols[4], path, lineno);
    const double qx = detail::parse_double(cols[5], path, lineno);
    const double qy = detail::parse_double(cols[6], path, lineno);
    const double qz = detail::parse_double(cols[7], path, lineno);
    const double norm = std::sqrt(qw * qw + qx * qx + qy * qy + qz * qz);
    if (std::abs(norm - 1.0) > 1e-3) {
      throw DataError(path.string() + ":" + std::to_string(lineno) +
                      ": quaternion norm " + std::to_string(norm) + " deviates beyond 1e-3");
    }
    s.q = UnitQuaternion(qw, qx, qy, qz);
    for (int i = 0; i < 3; ++i) s.v(i) = detail::parse_double(cols[8 + i], path, lineno);
    if (cols.size() == 17) {
      ImuBias b;
      for (int i = 0; i < 3; ++i) b.bw(i) = detail::parse_double(cols[11 + i], path, lineno);
      for (int i = 0; i < 3; ++i) b.ba(i) = detail::parse_double(cols[14 + i], path, lineno);
      s.bias = b;
      out.has_bias = true;
    }
    out.states.push_back(s);
    ++out.rows_read;
  }
  if (out.states.empty()) {
    out.warnings.push_back("read_euroc_gt: no data rows in " + path.string());
  }
  return out;
}

inline fs::path euroc_imu_path(const fs::path& dir) { return dir / "mav0" / "imu0" / "data.csv"; }
inline fs::path euroc_gt_path(const fs::path& dir) {
  return dir / "mav0" / "state_groundtruth_estimate0" / "data.csv";
}

/// Loads an EuRoC-layout sequence directory. The shared time base is the
/// earliest timestamp across the IMU and ground-truth files.
inline SequenceBundle load_euroc_sequence(const fs::path& dir, const std::string& id = "") {
  const fs::path imu_path = euroc_imu_path(dir);
  const fs::path gt_path = euroc_gt_path(dir);

  auto first_ns = [](const fs::path& p) -> std::optional<std::int64_t> {
    std::ifstream in(p);
    if (!in) return std::nullopt;
    std::string line;
    if (!std::getline(in, line)) return std::nullopt;
    if (!std::getline(in, line)) return std::nullopt;
    const auto cols = detail::split_csv_row(line);
    if (cols.empty()) return std::nullopt;
    return detail::parse_ns(cols[0], p, 2);
  };

  std::optional<std::int64_t> t0 = first_ns(imu_path);
  if (const auto g = first_ns(gt_path); g && (!t0 || *g < *t0)) t0 = g;
  if (!t0) throw DataError("load_euroc_sequence: no data under " + dir.string());

  SequenceBundle b;
  b.id = id.empty() ? dir.filename().string() : id;
  b.t0_ns = *t0;
  b.source = dir.string();
  b.imu = read_euroc_imu(imu_path, *t0).samples;
  if (fs::exists(gt_path)) {
    b.gt = read_euroc_gt(gt_path, *t0).states;
  }
  return b;
}

/// Writes a bundle back out in the EuRoC directory layout, bit-stable.
inline void write_synthetic_euroc(const SequenceBundle& bundle, const fs::path& dir) {
  const fs::path imu_path = euroc_imu_path(dir);
  fs::create_directories(imu_path.parent_path());
  {
    std::ofstream out(imu_path);
    if (!out) throw DataError("write_synthetic_euroc: cannot write " + imu_path.string());
    out << "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
           "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]\n";
    for (const auto& s : bundle.imu) {
      out << detail::seconds_to_ns(s.t, bundle.t0_ns);
      for (int i = 0; i < 3; ++i) out << ',' << detail::format_double(s.gyro(i));
      for (int i = 0; i < 3; ++i) out << ',' << detail::format_double(s.accel(i));
      out << '\n';
    }
  }
  if (bundle.gt.empty()) return;
  const fs::path gt_path = euroc_gt_path(dir);
  fs::create_directories(gt_path.parent_path());
  std::ofstream out(gt_path);
  if (!out) throw DataError("write_synthetic_euroc: cannot write " + gt_path.string());
  out << "#timestamp, p_RS_R_x [m], p_RS_R_y [m], p_RS_R_z [m], q_RS_w [], q_RS_x [], "
         "q_RS_y [], q_RS_z [], v_RS_R_x [m s^-1], v_RS_R_y [m s^-1], v_RS_R_z [m s^-1], "
         "b_w_RS_S_x [rad s^-1], b_w_RS_S_y [rad s^-1], b_w_RS_S_z [rad s^-1], "
         "b_a_RS_S_x [m s^-2], b_a_RS_S_y [m s^-2], b_a_RS_S_z [m s^-2]\n";
  for (const auto& s : bundle.gt) {
    out << detail::seconds_to_ns(s.t, bundle.t0_ns);
    for (int i = 0; i < 3; ++i) out << ',' << detail::format_double(s.p(i));
    out << ',' << detail::format_double(s.q.w()) << ',' << detail::format_double(s.q.x())
        << ',' << detail::format_double(s.q.y()) << ',' << detail::format_double(s.q.z());
    for (int i = 0; i < 3; ++i) out << ',' << detail::format_double(s.v(i));
    const ImuBias b = s.bias.value_or(ImuBias{});
    for (int i = 0; i < 3; ++i) out << ',' << detail::format_double(b.bw(i));
    for (int i = 0; i < 3; ++i) out << ',' << detail::format_double(b.ba(i));
    out << '\n';
  }
}

// --------------------------------------------------------------------------
// Label files
// --------------------------------------------------------------------------

struct LabelFile {
  std::string sequence_id;
  ImuBias mean_bias;
  LabelResult stats;
  json config_snapshot;  // solver configuration echo
};

inline void write_label_json(const fs::path& path, const LabelFile& label) {
  json j;
  j["sequence_id"] = label.sequence_id;
  j["ba_mean"] = {label.mean_bias.ba.x(), label.mean_bias.ba.y(), label.mean_bias.ba.z()};
  j["bw_mean"] = {label.mean_bias.bw.x(), label.mean_bias.bw.y(), label.mean_bias.bw.z()};
  j["residual_rms"] = {
      {"alpha_before", label.stats.rms_before.alpha},
      {"beta_before", label.stats.rms_before.beta},
      {"gamma_before", label.stats.rms_before.gamma},
      {"alpha_after", label.stats.rms_after.alpha},
      {"beta_after", label.stats.rms_after.beta},
      {"gamma_after", label.stats.rms_after.gamma},
  };
  j["gyro_iterations"] = label.stats.gyro_iterations;
  j["accel_iterations"] = label.stats.accel_iterations;
  j["interval_count"] = label.stats.interval_count;
  j["converged"] = label.stats.converged;
  j["config"] = label.config_snapshot;

  std::ofstream out(path);
  if (!out) throw DataError("write_label_json: cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline LabelFile read_label_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_label_json: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("read_label_json: " + path.string() + ": " + e.what());
  }
  LabelFile out;
  try {
    out.sequence_id = j.at("sequence_id").get<std::string>();
    for (int i = 0; i < 3; ++i) {
      out.mean_bias.ba(i) = j.at("ba_mean").at(i).get<double>();
      out.mean_bias.bw(i) = j.at("bw_mean").at(i).get<double>();
    }
    const auto& r = j.at("residual_rms");
    out.stats.rms_before = {r.at("alpha_before").get<double>(), r.at("beta_before").get<double>(),
                            r.at("gamma_before").get<double>()};
    out.stats.rms_after = {r.at("alpha_after").get<double>(), r.at("beta_after").get<double>(),
                           r.at("gamma_after").get<double>()};
    out.stats.gyro_iterations = j.at("gyro_iterations").get<int>();
    out.stats.accel_iterations = j.at("accel_iterations").get<int>();
    out.stats.interval_count = j.at("interval_count").get<int>();
    out.stats.converged = j.at("converged").get<bool>();
    out.stats.mean_bias = out.mean_bias;
    if (j.contains("config")) out.config_snapshot = j.at("config");
  } catch (const json::exception& e) {
    throw DataError("read_label_json: " + path.string() + ": schema error: " + e.what());
  }
  return out;
}

// --------------------------------------------------------------------------
// Weights container
// --------------------------------------------------------------------------

namespace detail {

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 1099511628211ull;
  }
  return h;
}

inline json config_to_json(const IpnetConfig& c) {
  return json{{"window_len", c.window_len},
              {"outputs_per_window", c.outputs_per_window},
              {"channels", c.channels},
              {"kernels", c.kernels},
              {"pools", c.pools},
              {"gru_hidden", c.gru_hidden},
              {"attention_heads", c.attention_heads},
              {"stride", c.stride}};
}

inline IpnetConfig config_from_json(const json& j) {
  IpnetConfig c;
  c.window_len = j.at("window_len").get<int>();
  c.outputs_per_window = j.at("outputs_per_window").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.kernels = j.at("kernels").get<std::vector<int>>();
  c.pools = j.at("pools").get<std::vector<int>>();
  c.gru_hidden = j.at("gru_hidden").get<int>();
  c.attention_heads = j.at("attention_heads").get<int>();
  c.stride = j.at("stride").get<int>();
  return c;
}

}  // namespace detail

/// Weights container: one JSON header line (config, tensor names / shapes /
/// offsets, normalization stats, payload checksum) followed by the raw
/// little-endian f64 payload in header order. Saving is byte-stable; the
/// loader verifies the checksum and rejects config mismatches.
inline void save_weights(const fs::path& path, const ModelWeights& weights) {
  json header;
  header["format"] = "ipnet-weights";
  header["version"] = 1;
  header["config"] = detail::config_to_json(weights.config);
  header["norm_mean"] = weights.norm.mean;
  header["norm_std"] = weights.norm.stddev;

  std::vector<double> payload;
  json tensors = json::array();
  for (const auto& [name, t] : weights.tensors) {
    tensors.push_back(json{{"name", name},
                           {"shape", t.shape},
                           {"offset", payload.size()},
                           {"requires_grad", t.requires_grad}});
    payload.insert(payload.end(), t.data.begin(), t.data.end());
  }
  header["tensors"] = std::move(tensors);
  header["payload_doubles"] = payload.size();

  const std::span<const std::byte> bytes(reinterpret_cast<const std::byte*>(payload.data()),
                                         payload.size() * sizeof(double));
  char checksum[17];
  std::snprintf(checksum, sizeof(checksum), "%016" PRIx64, detail::fnv1a64(bytes));
  header["payload_fnv1a64"] = checksum;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_weights: cannot write " + path.string());
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
}

inline ModelWeights load_weights(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_weights: cannot open " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) {
    throw DataError("load_weights: missing header in " + path.string());
  }
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw DataError("load_weights: bad header in " + path.string() + ": " + e.what());
  }
  if (header.value("format", "") != "ipnet-weights") {
    throw DataError("load_weights: " + path.string() + " is not a weights file");
  }

  const std::size_t n = header.at("payload_doubles").get<std::size_t>();
  std::vector<double> payload(n);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(double)) {
    throw DataError("load_weights: truncated payload in " + path.string());
  }

  const std::span<const std::byte> bytes(reinterpret_cast<const std::byte*>(payload.data()),
                                         payload.size() * sizeof(double));
  char checksum[17];
  std::snprintf(checksum, sizeof(checksum), "%016" PRIx64, detail::fnv1a64(bytes));
  if (header.at("payload_fnv1a64").get<std::string>() != checksum) {
    throw DataError("load_weights: checksum mismatch in " + path.string());
  }

  ModelWeights w;
  w.config = detail::config_from_json(header.at("config"));
  const auto mean = header.at("norm_mean").get<std::vector<double>>();
  const auto stddev = header.at("norm_std").get<std::vector<double>>();
  if (mean.size() != 6 || stddev.size() != 6) {
    throw DataError("load_weights: bad normalization stats in " + path.string());
  }
  std::copy(mean.begin(), mean.end(), w.norm.mean.begin());
  std::copy(stddev.begin(), stddev.end(), w.norm.stddev.begin());

  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<std::vector<int>>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    ad::Tensor tensor = ad::Tensor::zeros(shape);
    if (offset + tensor.data.size() > payload.size()) {
      throw DataError("load_weights: tensor '" + name + "' overruns payload");
    }
    std::copy(payload.begin() + offset, payload.begin() + offset + tensor.data.size(),
              tensor.data.begin());
    tensor.requires_grad = t.at("requires_grad").get<bool>();
    w.tensors[name] = std::move(tensor);
  }

  // The stored tensors must match the architecture the header declares:
  // same names, same shapes as a fresh parameter set of that config.
  const ModelWeights reference = init_weights(w.config, 0);
  if (reference.tensors.size() != w.tensors.size()) {
    throw DataError("load_weights: " + path.string() + " tensor set does not match config (" +
                    std::to_string(w.tensors.size()) + " tensors, expected " +
                    std::to_string(reference.tensors.size()) + ")");
  }
  for (const auto& [name, ref] : reference.tensors) {
    const auto it = w.tensors.find(name);
    if (it == w.tensors.end() || it->second.shape != ref.shape) {
      throw DataError("load_weights: " + path.string() + " tensor '" + name +
                      "' missing or shaped inconsistently with the stored config");
    }
  }
  return w;
}

// --------------------------------------------------------------------------
// Trajectories
// --------------------------------------------------------------------------

struct TimedPose {
  double t = 0.0;
  Vector3d p{0, 0, 0};
  UnitQuaternion q;
};

/// TUM format: "timestamp tx ty tz qx qy qz qw" per line.
inline void write_tum_trajectory(const fs::path& path, std::span<const TimedPose> poses) {
  std::ofstream out(path);
  if (!out) throw DataError("write_tum_trajectory: cannot write " + path.string());
  char ts[32];
  for (const auto& s : poses) {
    std::snprintf(ts, sizeof(ts), "%.9f", s.t);
    out << ts << ' ' << detail::format_double(s.p.x()) << ' '
        << detail::format_double(s.p.y()) << ' ' << detail::format_double(s.p.z()) << ' '
        << detail::format_double(s.q.x()) << ' ' << detail::format_double(s.q.y()) << ' '
        << detail::format_double(s.q.z()) << ' ' << detail::format_double(s.q.w()) << '\n';
  }
}

inline std::vector<TimedPose> read_tum_trajectory(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_tum_trajectory: cannot open " + path.string());
  std::vector<TimedPose> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double t, tx, ty, tz, qx, qy, qz, qw;
    if (!(ss >> t >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) {
      throw DataError("read_tum_trajectory: " + path.string() + ":" +
                      std::to_string(lineno) + ": malformed line");
    }
    TimedPose s;
    s.t = t;
    s.p = Vector3d(tx, ty, tz);
    s.q = UnitQuaternion(qw, qx, qy, qz);
    out.push_back(s);
  }
  return out;
}

inline std::vector<TimedPose> to_timed_poses(std::span<const KeyframeState> states) {
  std::vector<TimedPose> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back({s.t, s.p, s.q});
  return out;
}

inline std::vector<TimedPose> to_timed_poses(std::span<const GtState> states) {
  std::vector<TimedPose> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back({s.t, s.p, s.q});
  return out;
}

}  // namespace ipnet
