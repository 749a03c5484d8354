#pragma once

#include <atomic>
#include <set>
#include <thread>

#include "ipnet/dataset.hpp"
#include "ipnet/evaluation.hpp"

namespace ipnet {

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError("config: " + where + " must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

inline Vector3d vec3_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) {
    throw ConfigError("config: " + where + " must be a 3-element array");
  }
  return Vector3d(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>());
}

inline json vec3_to_json(const Vector3d& v) { return json{v.x(), v.y(), v.z()}; }

}  // namespace detail

/// One synthetic sequence request: trajectory family, injected bias, noise.
struct SequenceSpec {
  std::string id;
  TrajectorySpec trajectory;
  ImuBias bias;
  NoiseSpec noise;
  bool validation = false;
};

/// Fusion-section knobs (everything run_fixed_lag needs plus the surrogate
/// observation generator and dropout windows).
struct FusionSection {
  int lag = 10;
  double keyframe_period = 0.5;
  double prior_sigma_ba = 0.1;
  double prior_sigma_bw = 0.01;
  double obs_sigma_pos = 0.01;
  double obs_sigma_rot = 0.005;
  bool attach_warmup_priors = false;
  bool retroactive_priors = false;
  double prior_period = 1.0;  // oracle-prior emission cadence
  InfoConfig info;
  std::vector<std::pair<double, double>> dropout_windows;
};

struct EvalSection {
  int rpe_delta = 1;
  double max_gap = 0.02;
};

/// Whole-run configuration document. Schema-validated on parse; unknown keys
/// are rejected so typos cannot silently change an experiment.
struct RunConfig {
  std::uint64_t seed = 0;
  GravityConfig gravity;
  std::vector<SequenceSpec> sequences;
  LabelConfig labeling;
  IpnetConfig net;
  TrainingSchedule schedule;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  FusionSection fusion;
  EvalSection eval;
  json echo;  // the parsed document, embedded in artifacts

  static RunConfig from_json(const json& j);
  static RunConfig from_file(const fs::path& path);
};

namespace detail {

inline TrajectorySpec trajectory_from_json(const json& j, const std::string& where) {
  check_keys(j, {"pos_amp", "pos_freq", "pos_phase", "att_amp", "att_freq", "duration",
                 "imu_rate", "initial_rotvec"},
             where);
  TrajectorySpec t;
  if (j.contains("pos_amp")) t.pos_amp = vec3_from_json(j.at("pos_amp"), where + ".pos_amp");
  if (j.contains("pos_freq"))
    t.pos_freq = vec3_from_json(j.at("pos_freq"), where + ".pos_freq");
  if (j.contains("pos_phase"))
    t.pos_phase = vec3_from_json(j.at("pos_phase"), where + ".pos_phase");
  if (j.contains("att_amp")) t.att_amp = vec3_from_json(j.at("att_amp"), where + ".att_amp");
  if (j.contains("att_freq"))
    t.att_freq = vec3_from_json(j.at("att_freq"), where + ".att_freq");
  if (j.contains("duration")) t.duration = j.at("duration").get<double>();
  if (j.contains("imu_rate")) t.imu_rate = j.at("imu_rate").get<double>();
  if (j.contains("initial_rotvec")) {
    t.initial_orientation =
        quat_from_rotvec(vec3_from_json(j.at("initial_rotvec"), where + ".initial_rotvec"));
  }
  t.validate();
  return t;
}

inline ImuBias bias_from_json(const json& j, const std::string& where) {
  check_keys(j, {"ba", "bw"}, where);
  ImuBias b;
  if (j.contains("ba")) b.ba = vec3_from_json(j.at("ba"), where + ".ba");
  if (j.contains("bw")) b.bw = vec3_from_json(j.at("bw"), where + ".bw");
  return b;
}

inline NoiseSpec noise_from_json(const json& j, const std::string& where) {
  check_keys(j, {"accel_noise_std", "gyro_noise_std", "accel_walk_std", "gyro_walk_std",
                 "rng_seed"},
             where);
  NoiseSpec n;
  if (j.contains("accel_noise_std")) n.accel_noise_std = j.at("accel_noise_std").get<double>();
  if (j.contains("gyro_noise_std")) n.gyro_noise_std = j.at("gyro_noise_std").get<double>();
  if (j.contains("accel_walk_std")) n.accel_walk_std = j.at("accel_walk_std").get<double>();
  if (j.contains("gyro_walk_std")) n.gyro_walk_std = j.at("gyro_walk_std").get<double>();
  if (j.contains("rng_seed")) n.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  n.validate();
  return n;
}

inline OptSchedule opt_schedule_from_json(const json& j, const OptSchedule& defaults,
                                          const std::string& where) {
  check_keys(j, {"lr", "iterations", "decay_factor", "decay_every", "relinearize_passes"},
             where);
  OptSchedule s = defaults;
  if (j.contains("lr")) s.lr = j.at("lr").get<double>();
  if (j.contains("iterations")) s.iterations = j.at("iterations").get<int>();
  if (j.contains("decay_factor")) s.decay_factor = j.at("decay_factor").get<double>();
  if (j.contains("decay_every")) s.decay_every = j.at("decay_every").get<int>();
  if (j.contains("relinearize_passes"))
    s.relinearize_passes = j.at("relinearize_passes").get<int>();
  s.validate();
  return s;
}

inline TrainingSchedule training_schedule_from_json(const json& j, const std::string& where) {
  check_keys(j, {"optimizer", "lr", "decay_factor", "decay_every_epochs", "epochs",
                 "batch_size", "bn_freeze_after_epoch"},
             where);
  TrainingSchedule s;
  if (j.contains("optimizer")) {
    const std::string o = j.at("optimizer").get<std::string>();
    if (o == "rmsprop") {
      s.optimizer = OptKind::rmsprop;
    } else if (o == "adam") {
      s.optimizer = OptKind::adam;
    } else {
      throw ConfigError("config: " + where + ".optimizer must be rmsprop or adam");
    }
  }
  if (j.contains("lr")) s.lr = j.at("lr").get<double>();
  if (j.contains("decay_factor")) s.decay_factor = j.at("decay_factor").get<double>();
  if (j.contains("decay_every_epochs"))
    s.decay_every_epochs = j.at("decay_every_epochs").get<int>();
  if (j.contains("epochs")) s.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) s.batch_size = j.at("batch_size").get<int>();
  if (j.contains("bn_freeze_after_epoch"))
    s.bn_freeze_after_epoch = j.at("bn_freeze_after_epoch").get<int>();
  s.validate();
  return s;
}

inline IpnetConfig net_config_from_json(const json& j, const std::string& where) {
  check_keys(j, {"window_len", "outputs_per_window", "channels", "kernels", "pools",
                 "gru_hidden", "attention_heads", "stride"},
             where);
  IpnetConfig base;
  json merged = config_to_json(base);
  merged.update(j);
  IpnetConfig c = config_from_json(merged);
  c.validate();
  return c;
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const json& j) {
  detail::check_keys(
      j, {"seed", "gravity", "synthesis", "labeling", "training", "fusion", "eval"}, "root");
  RunConfig c;
  c.echo = j;
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("gravity")) {
    detail::check_keys(j.at("gravity"), {"g_world", "unchecked"}, "gravity");
    if (j.at("gravity").contains("g_world")) {
      c.gravity.g_world = detail::vec3_from_json(j.at("gravity").at("g_world"), "gravity");
    }
    if (j.at("gravity").contains("unchecked")) {
      c.gravity.unchecked = j.at("gravity").at("unchecked").get<bool>();
    }
    c.gravity.validate();
  }

  if (j.contains("synthesis")) {
    detail::check_keys(j.at("synthesis"), {"sequences"}, "synthesis");
    for (const auto& s : j.at("synthesis").at("sequences")) {
      detail::check_keys(s, {"id", "trajectory", "bias", "noise", "validation"},
                         "synthesis.sequences[]");
      SequenceSpec spec;
      spec.id = s.at("id").get<std::string>();
      if (s.contains("trajectory")) {
        spec.trajectory = detail::trajectory_from_json(s.at("trajectory"), spec.id);
      }
      if (s.contains("bias")) spec.bias = detail::bias_from_json(s.at("bias"), spec.id);
      if (s.contains("noise")) spec.noise = detail::noise_from_json(s.at("noise"), spec.id);
      if (s.contains("validation")) spec.validation = s.at("validation").get<bool>();
      c.sequences.push_back(std::move(spec));
    }
  }

  if (j.contains("labeling")) {
    detail::check_keys(j.at("labeling"), {"interval_s", "gyro", "accel"}, "labeling");
    const auto& l = j.at("labeling");
    if (l.contains("interval_s")) c.labeling.interval_s = l.at("interval_s").get<double>();
    if (l.contains("gyro")) {
      c.labeling.gyro =
          detail::opt_schedule_from_json(l.at("gyro"), OptSchedule::gyro_defaults(),
                                         "labeling.gyro");
    }
    if (l.contains("accel")) {
      c.labeling.accel =
          detail::opt_schedule_from_json(l.at("accel"), OptSchedule::accel_defaults(),
                                         "labeling.accel");
    }
  }
  c.labeling.gravity = c.gravity;

  if (j.contains("training")) {
    detail::check_keys(j.at("training"), {"config", "schedule", "train_ids", "val_ids"},
                       "training");
    const auto& t = j.at("training");
    if (t.contains("config")) {
      c.net = detail::net_config_from_json(t.at("config"), "training.config");
    }
    if (t.contains("schedule")) {
      c.schedule = detail::training_schedule_from_json(t.at("schedule"), "training.schedule");
    }
    if (t.contains("train_ids")) t.at("train_ids").get_to(c.train_ids);
    if (t.contains("val_ids")) t.at("val_ids").get_to(c.val_ids);
  }

  if (j.contains("fusion")) {
    detail::check_keys(j.at("fusion"),
                       {"lag", "keyframe_period", "prior_sigma_ba", "prior_sigma_bw",
                        "obs_sigma_pos", "obs_sigma_rot", "attach_warmup_priors",
                        "retroactive_priors", "prior_period", "info", "dropout_windows"},
                       "fusion");
    const auto& f = j.at("fusion");
    if (f.contains("lag")) c.fusion.lag = f.at("lag").get<int>();
    if (f.contains("keyframe_period"))
      c.fusion.keyframe_period = f.at("keyframe_period").get<double>();
    if (f.contains("prior_sigma_ba"))
      c.fusion.prior_sigma_ba = f.at("prior_sigma_ba").get<double>();
    if (f.contains("prior_sigma_bw"))
      c.fusion.prior_sigma_bw = f.at("prior_sigma_bw").get<double>();
    if (f.contains("obs_sigma_pos")) c.fusion.obs_sigma_pos = f.at("obs_sigma_pos").get<double>();
    if (f.contains("obs_sigma_rot")) c.fusion.obs_sigma_rot = f.at("obs_sigma_rot").get<double>();
    if (f.contains("attach_warmup_priors"))
      c.fusion.attach_warmup_priors = f.at("attach_warmup_priors").get<bool>();
    if (f.contains("retroactive_priors"))
      c.fusion.retroactive_priors = f.at("retroactive_priors").get<bool>();
    if (f.contains("prior_period")) c.fusion.prior_period = f.at("prior_period").get<double>();
    if (f.contains("info")) {
      detail::check_keys(f.at("info"),
                         {"sigma_accel", "sigma_gyro", "sigma_ba_walk", "sigma_bw_walk"},
                         "fusion.info");
      const auto& i = f.at("info");
      if (i.contains("sigma_accel")) c.fusion.info.sigma_accel = i.at("sigma_accel").get<double>();
      if (i.contains("sigma_gyro")) c.fusion.info.sigma_gyro = i.at("sigma_gyro").get<double>();
      if (i.contains("sigma_ba_walk"))
        c.fusion.info.sigma_ba_walk = i.at("sigma_ba_walk").get<double>();
      if (i.contains("sigma_bw_walk"))
        c.fusion.info.sigma_bw_walk = i.at("sigma_bw_walk").get<double>();
    }
    if (f.contains("dropout_windows")) {
      for (const auto& w : f.at("dropout_windows")) {
        if (!w.is_array() || w.size() != 2) {
          throw ConfigError("config: fusion.dropout_windows entries must be [start, end]");
        }
        c.fusion.dropout_windows.emplace_back(w.at(0).get<double>(), w.at(1).get<double>());
      }
    }
  }

  if (j.contains("eval")) {
    detail::check_keys(j.at("eval"), {"rpe_delta", "max_gap"}, "eval");
    if (j.at("eval").contains("rpe_delta"))
      c.eval.rpe_delta = j.at("eval").at("rpe_delta").get<int>();
    if (j.at("eval").contains("max_gap"))
      c.eval.max_gap = j.at("eval").at("max_gap").get<double>();
  }
  return c;
}

inline RunConfig RunConfig::from_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

// --------------------------------------------------------------------------
// Shared pipeline steps
// --------------------------------------------------------------------------

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t global, std::uint64_t local) {
  std::uint64_t x = global * 0x9e3779b97f4a7c15ull + local + 0x2545f4914f6cdd1dull;
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdull;
  x ^= x >> 29;
  return x;
}

template <typename Fn>
void parallel_for_each(std::size_t count, Fn&& fn, unsigned max_threads = 4) {
  const unsigned workers =
      std::min<unsigned>({max_threads, std::thread::hardware_concurrency(),
                          static_cast<unsigned>(count)});
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

/// Synthesizes one configured sequence (global seed mixed into the noise
/// stream) and returns the bundle plus the exact bias bookkeeping.
struct GeneratedSequence {
  SequenceBundle bundle;
  ImuBias injected;
  ImuBias mean_true_bias;
};

inline GeneratedSequence generate_sequence(const SequenceSpec& spec,
                                           const GravityConfig& gravity,
                                           std::uint64_t global_seed) {
  NoiseSpec noise = spec.noise;
  noise.rng_seed = detail::mix_seed(global_seed, spec.noise.rng_seed);
  const auto seq = synthesize_measurements(spec.trajectory, spec.bias, noise, gravity);

  GeneratedSequence out;
  out.bundle.id = spec.id;
  out.bundle.t0_ns = 0;
  out.bundle.imu = seq.samples;
  out.bundle.gt = sample_gt_states(spec.trajectory);
  for (std::size_t i = 0; i < out.bundle.gt.size() && i < seq.true_bias.size(); ++i) {
    out.bundle.gt[i].bias = seq.true_bias[i];
  }
  out.bundle.source = "synthetic";
  out.injected = spec.bias;
  out.mean_true_bias = seq.mean_true_bias();
  return out;
}

/// Surrogate vision: noisy pose observations at the keyframe period, with the
/// configured dropout windows marked as dropped.
inline std::vector<PoseObservation> make_observations(std::span<const GtState> gt,
                                                      const FusionSection& fusion,
                                                      std::uint64_t seed) {
  if (gt.size() < 2) throw DataError("make_observations: ground truth too short");
  detail::GaussianSampler gauss(seed);
  std::vector<PoseObservation> out;
  double next_t = gt.front().t;
  for (const auto& s : gt) {
    if (s.t + 1e-9 < next_t) continue;
    PoseObservation o;
    o.t = s.t;
    o.p = s.p + fusion.obs_sigma_pos * gauss.vec3();
    o.q = s.q * quat_from_rotvec(fusion.obs_sigma_rot * gauss.vec3());
    for (const auto& [start, end] : fusion.dropout_windows) {
      if (s.t >= start && s.t < end) o.dropped = true;
    }
    out.push_back(o);
    next_t += fusion.keyframe_period;
  }
  return out;
}

inline FixedLagConfig to_fixed_lag_config(const FusionSection& f, const GravityConfig& g,
                                          bool prior_enabled) {
  FixedLagConfig c;
  c.lag = f.lag;
  c.keyframe_period = f.keyframe_period;
  c.prior_enabled = prior_enabled;
  c.attach_warmup_priors = f.attach_warmup_priors;
  c.retroactive_priors = f.retroactive_priors;
  c.prior_weight = default_prior_weight(f.prior_sigma_ba, f.prior_sigma_bw);
  c.obs_sqrt_info = Matrix6::Identity();
  c.obs_sqrt_info.diagonal().head<3>().setConstant(1.0 / std::max(f.obs_sigma_pos, 1e-6));
  c.obs_sqrt_info.diagonal().tail<3>().setConstant(1.0 / std::max(f.obs_sigma_rot, 1e-6));
  c.info = f.info;
  c.gravity = g;
  return c;
}

// --------------------------------------------------------------------------
// Subcommand drivers
// --------------------------------------------------------------------------

/// gen-synthetic: EuRoC-layout directories plus a truth sidecar per sequence
/// and a manifest echoing the configuration.
inline void cmd_gen_synthetic(const RunConfig& config, const fs::path& out_dir) {
  if (config.sequences.empty()) {
    throw ConfigError("gen-synthetic: config has no synthesis.sequences");
  }
  fs::create_directories(out_dir);
  detail::parallel_for_each(config.sequences.size(), [&](std::size_t i) {
    const SequenceSpec& spec = config.sequences[i];
    const GeneratedSequence gen = generate_sequence(spec, config.gravity, config.seed);
    const fs::path dir = out_dir / spec.id;
    write_synthetic_euroc(gen.bundle, dir);

    json truth;
    truth["id"] = spec.id;
    truth["injected_bias"] = {{"ba", detail::vec3_to_json(gen.injected.ba)},
                              {"bw", detail::vec3_to_json(gen.injected.bw)}};
    truth["mean_true_bias"] = {{"ba", detail::vec3_to_json(gen.mean_true_bias.ba)},
                               {"bw", detail::vec3_to_json(gen.mean_true_bias.bw)}};
    truth["validation"] = spec.validation;
    truth["seed"] = config.seed;
    std::ofstream out(dir / "truth.json");
    if (!out) throw DataError("gen-synthetic: cannot write " + (dir / "truth.json").string());
    out << truth.dump(2) << '\n';
  });

  json manifest;
  manifest["config"] = config.echo;
  json ids = json::array();
  for (const auto& s : config.sequences) {
    ids.push_back(json{{"id", s.id}, {"validation", s.validation}});
  }
  manifest["sequences"] = std::move(ids);
  std::ofstream out(out_dir / "manifest.json");
  if (!out) throw DataError("gen-synthetic: cannot write manifest");
  out << manifest.dump(2) << '\n';
}

/// make-labels: one label JSON per sequence directory found under data_dir.
inline std::vector<LabelFile> cmd_make_labels(const RunConfig& config,
                                              const fs::path& data_dir,
                                              const fs::path& out_dir) {
  if (!fs::is_directory(data_dir)) {
    throw DataError("make-labels: " + data_dir.string() + " is not a directory");
  }
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(data_dir)) {
    if (entry.is_directory() && fs::exists(euroc_imu_path(entry.path()))) {
      dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) {
    throw DataError("make-labels: no sequence directories under " + data_dir.string());
  }
  fs::create_directories(out_dir);

  std::vector<LabelFile> results(dirs.size());
  detail::parallel_for_each(dirs.size(), [&](std::size_t i) {
    const SequenceBundle bundle = load_euroc_sequence(dirs[i]);
    if (bundle.gt.empty()) {
      throw DataError("make-labels: " + dirs[i].string() + " has no ground truth");
    }
    const LabelResult res = make_labels(bundle.imu, bundle.gt, config.labeling);

    LabelFile label;
    label.sequence_id = bundle.id;
    label.mean_bias = res.mean_bias;
    label.stats = res;
    label.config_snapshot = config.echo.value("labeling", json::object());
    write_label_json(out_dir / (bundle.id + ".label.json"), label);
    results[i] = std::move(label);
  });
  return results;
}

/// train: consumes sequences + label files, writes weights and the loss log.
inline TrainResult cmd_train(const RunConfig& config, const fs::path& data_dir,
                             const fs::path& labels_dir, const fs::path& out_dir) {
  if (config.train_ids.empty() || config.val_ids.empty()) {
    throw ConfigError("train: training.train_ids and training.val_ids are required");
  }
  std::vector<LabeledSequence> seqs;
  auto load_one = [&](const std::string& id, bool validation) {
    const SequenceBundle bundle = load_euroc_sequence(data_dir / id, id);
    const LabelFile label = read_label_json(labels_dir / (id + ".label.json"));
    LabeledSequence s;
    s.id = id;
    s.imu = bundle.imu;
    s.label = label.mean_bias;
    s.validation = validation;
    seqs.push_back(std::move(s));
  };
  for (const auto& id : config.train_ids) load_one(id, false);
  for (const auto& id : config.val_ids) load_one(id, true);

  TrainingSchedule schedule = config.schedule;
  schedule.seed = detail::mix_seed(config.seed, 0x7a11);
  const WindowDataset data = make_windows(seqs, config.net);
  TrainResult result = train(data, config.net, schedule);

  fs::create_directories(out_dir);
  save_weights(out_dir / "weights.ipw", result.weights);
  {
    std::ofstream echo(out_dir / "run_config.json");
    if (echo) echo << config.echo.dump(2) << '\n';
  }
  std::ofstream log(out_dir / "loss_log.csv");
  if (!log) throw DataError("train: cannot write loss log");
  log << "epoch,lr,train_loss,val_loss\n";
  for (const auto& e : result.log.epochs) {
    log << e.epoch << ',' << detail::format_double(e.lr) << ','
        << detail::format_double(e.train_loss) << ',' << detail::format_double(e.val_loss)
        << '\n';
  }
  return result;
}

/// infer: timestamped bias-prior CSV for one sequence directory.
inline std::vector<PriorSample> cmd_infer(const fs::path& weights_path,
                                          const fs::path& seq_dir, const fs::path& out_file) {
  ModelWeights weights = load_weights(weights_path);
  const SequenceBundle bundle = load_euroc_sequence(seq_dir);
  const auto priors = sliding_inference(bundle.imu, weights);

  fs::create_directories(out_file.parent_path().empty() ? "." : out_file.parent_path());
  std::ofstream out(out_file);
  if (!out) throw DataError("infer: cannot write " + out_file.string());
  out << "t,warmup,ba_x,ba_y,ba_z,bw_x,bw_y,bw_z\n";
  for (const auto& p : priors) {
    out << detail::format_double(p.t) << ',' << (p.warmup ? 1 : 0);
    for (int i = 0; i < 3; ++i) out << ',' << detail::format_double(p.bias.ba(i));
    for (int i = 0; i < 3; ++i) out << ',' << detail::format_double(p.bias.bw(i));
    out << '\n';
  }
  return priors;
}

inline std::vector<PriorSample> read_prior_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_prior_csv: cannot open " + path.string());
  std::vector<PriorSample> out;
  std::string line;
  std::size_t lineno = 0;
  std::getline(in, line);  // header
  ++lineno;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = detail::split_csv_row(line);
    if (cols.size() != 8) {
      throw DataError("read_prior_csv: " + path.string() + ":" + std::to_string(lineno) +
                      ": expected 8 columns");
    }
    PriorSample p;
    p.t = detail::parse_double(cols[0], path, lineno);
    p.warmup = cols[1] == "1";
    for (int i = 0; i < 3; ++i) p.bias.ba(i) = detail::parse_double(cols[2 + i], path, lineno);
    for (int i = 0; i < 3; ++i) p.bias.bw(i) = detail::parse_double(cols[5 + i], path, lineno);
    out.push_back(p);
  }
  return out;
}

enum class PriorMode { off, oracle, network, file };

struct FuseOutput {
  FixedLagResult result;
  fs::path trajectory_path;
  fs::path bias_path;
};

/// fuse: fixed-lag run over one sequence with the selected prior source;
/// writes the TUM trajectory and the bias-estimate CSV
/// (timestamp, prior target, optimized bias, label).
inline FuseOutput cmd_fuse(const RunConfig& config, const fs::path& seq_dir,
                           const fs::path& out_dir, PriorMode mode,
                           const fs::path& weights_path = {},
                           const fs::path& prior_file = {}) {
  const SequenceBundle bundle = load_euroc_sequence(seq_dir);
  if (bundle.gt.empty()) {
    throw DataError("fuse: " + seq_dir.string() + " has no ground truth for observations");
  }

  ImuBias oracle_bias;
  bool have_truth = false;
  const fs::path truth_path = seq_dir / "truth.json";
  if (fs::exists(truth_path)) {
    std::ifstream in(truth_path);
    json truth;
    in >> truth;
    oracle_bias.ba = detail::vec3_from_json(truth.at("mean_true_bias").at("ba"), "truth.ba");
    oracle_bias.bw = detail::vec3_from_json(truth.at("mean_true_bias").at("bw"), "truth.bw");
    have_truth = true;
  }

  const auto observations =
      make_observations(bundle.gt, config.fusion, detail::mix_seed(config.seed, 0xf05e));

  std::vector<PriorSample> priors;
  switch (mode) {
    case PriorMode::off:
      break;
    case PriorMode::oracle: {
      if (!have_truth) throw DataError("fuse: --prior oracle needs truth.json in " +
                                       seq_dir.string());
      for (double t = bundle.imu.front().t; t <= bundle.imu.back().t;
           t += config.fusion.prior_period) {
        priors.push_back({t, oracle_bias, false});
      }
      break;
    }
    case PriorMode::network: {
      if (weights_path.empty()) throw ConfigError("fuse: --prior network needs --weights");
      ModelWeights weights = load_weights(weights_path);
      priors = sliding_inference(bundle.imu, weights);
      break;
    }
    case PriorMode::file: {
      priors = read_prior_csv(prior_file);
      break;
    }
  }

  const FixedLagConfig flc =
      to_fixed_lag_config(config.fusion, config.gravity, mode != PriorMode::off);
  FuseOutput out;
  out.result = run_fixed_lag(bundle.imu, observations, priors, flc);

  fs::create_directories(out_dir);
  {
    std::ofstream echo(out_dir / "run_config.json");
    if (echo) echo << config.echo.dump(2) << '\n';
  }
  out.trajectory_path = out_dir / "trajectory.tum";
  write_tum_trajectory(out.trajectory_path, to_timed_poses(out.result.trajectory));

  out.bias_path = out_dir / "bias_estimates.csv";
  std::ofstream bias_out(out.bias_path);
  if (!bias_out) throw DataError("fuse: cannot write " + out.bias_path.string());
  bias_out << "t,prior_attached,prior_ba_x,prior_ba_y,prior_ba_z,prior_bw_x,prior_bw_y,"
              "prior_bw_z,opt_ba_x,opt_ba_y,opt_ba_z,opt_bw_x,opt_bw_y,opt_bw_z,"
              "label_ba_x,label_ba_y,label_ba_z,label_bw_x,label_bw_y,label_bw_z\n";
  for (const auto& row : out.result.bias_rows) {
    bias_out << detail::format_double(row.t) << ',' << (row.prior_attached ? 1 : 0);
    for (int i = 0; i < 3; ++i) bias_out << ',' << detail::format_double(row.prior_target.ba(i));
    for (int i = 0; i < 3; ++i) bias_out << ',' << detail::format_double(row.prior_target.bw(i));
    for (int i = 0; i < 3; ++i) bias_out << ',' << detail::format_double(row.optimized.ba(i));
    for (int i = 0; i < 3; ++i) bias_out << ',' << detail::format_double(row.optimized.bw(i));
    const ImuBias label = have_truth ? oracle_bias : ImuBias{};
    for (int i = 0; i < 3; ++i) bias_out << ',' << detail::format_double(label.ba(i));
    for (int i = 0; i < 3; ++i) bias_out << ',' << detail::format_double(label.bw(i));
    bias_out << '\n';
  }
  return out;
}

/// eval: ATE/RPE report for an estimate against a sequence's ground truth.
inline MetricReport cmd_eval(const RunConfig& config, const fs::path& est_tum,
                             const fs::path& gt_source, const fs::path& out_file) {
  const auto est = read_tum_trajectory(est_tum);
  std::vector<TimedPose> gt;
  if (fs::is_directory(gt_source)) {
    const SequenceBundle bundle = load_euroc_sequence(gt_source);
    if (bundle.gt.empty()) throw DataError("eval: no ground truth in " + gt_source.string());
    gt = to_timed_poses(bundle.gt);
  } else {
    gt = read_tum_trajectory(gt_source);
  }
  const MetricReport report =
      evaluate_trajectory(est, gt, config.eval.rpe_delta, config.eval.max_gap);

  json j = metric_report_json(report);
  j["config"] = config.echo.value("eval", json::object());
  if (!out_file.empty()) {
    std::ofstream out(out_file);
    if (!out) throw DataError("eval: cannot write " + out_file.string());
    out << j.dump(2) << '\n';
  }
  return report;
}

/// bench-infer: inference throughput report (wall-clock fields expected to
/// differ between runs).
inline InferenceBench cmd_bench_infer(const fs::path& weights_path, int rounds,
                                      const fs::path& out_file) {
  ModelWeights weights = load_weights(weights_path);
  ad::Tensor window = ad::Tensor::zeros({weights.config.window_len, 6});
  detail::GaussianSampler gauss(1);
  for (double& v : window.data) v = gauss();

  const InferenceBench bench = bench_inference(weights, window, rounds);
  json j{{"windows_per_second", bench.windows_per_second},
         {"p50_ms", bench.p50_ms},
         {"p95_ms", bench.p95_ms},
         {"p99_ms", bench.p99_ms},
         {"rounds", bench.rounds}};
  if (!out_file.empty()) {
    std::ofstream out(out_file);
    if (!out) throw DataError("bench-infer: cannot write " + out_file.string());
    out << j.dump(2) << '\n';
  }
  return bench;
}

}  // namespace ipnet
