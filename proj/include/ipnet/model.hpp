#pragma once

#include <array>
#include <chrono>
#include <random>
#include <span>
#include <string>

#include "ipnet/autodiff.hpp"
#include "ipnet/imu_model.hpp"

namespace ipnet {

/// Architecture of the bias-prior network. The window of raw IMU samples
/// (length window_len) passes through four residual conv blocks with max
/// pooling, a GRU / multi-head self-attention / GRU sequence block, and two
/// parallel per-timestep linear decoders that read the final
/// outputs_per_window timesteps.
struct IpnetConfig {
  int window_len = 1000;        // samples per input window
  int outputs_per_window = 50;  // predictions per window, averaged at inference
  std::vector<int> channels{16, 32, 64, 128};
  std::vector<int> kernels{7, 3, 3, 3};
  std::vector<int> pools{2, 2, 2, 2};
  int gru_hidden = 64;
  int attention_heads = 4;
  int stride = 200;  // samples between inference windows

  int encoded_length() const {
    int len = window_len;
    for (int p : pools) len /= p;
    return len;
  }

  void validate() const {
    if (window_len < 2 || outputs_per_window < 1 || gru_hidden < 1 ||
        attention_heads < 1 || stride < 1) {
      throw ConfigError("IpnetConfig: non-positive field");
    }
    if (channels.size() != kernels.size() || channels.size() != pools.size() ||
        channels.empty()) {
      throw ConfigError("IpnetConfig: channels/kernels/pools must have equal length");
    }
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] < 1 || kernels[i] < 1 || pools[i] < 1) {
        throw ConfigError("IpnetConfig: non-positive encoder field");
      }
    }
    if (encoded_length() < outputs_per_window) {
      throw ConfigError("IpnetConfig: window length after pooling (" +
                        std::to_string(encoded_length()) + ") is shorter than " +
                        std::to_string(outputs_per_window) + " decoder timesteps");
    }
    if (gru_hidden % attention_heads != 0) {
      throw ConfigError("IpnetConfig: attention heads must divide gru_hidden");
    }
  }

  bool operator==(const IpnetConfig&) const = default;
};

/// Per-channel input standardization computed from the training set.
struct NormStats {
  std::array<double, 6> mean{0, 0, 0, 0, 0, 0};
  std::array<double, 6> stddev{1, 1, 1, 1, 1, 1};
};

/// Ordered name → tensor container for every parameter plus the batchnorm
/// running statistics (requires_grad=false entries), with the config snapshot
/// and normalization stats that the weights were trained with.
struct ModelWeights {
  IpnetConfig config;
  std::map<std::string, ad::Tensor> tensors;
  NormStats norm;
};

namespace detail {

inline ad::Tensor uniform_init(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  ad::Tensor t = ad::Tensor::zeros(std::move(shape));
  const double k = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  std::uniform_real_distribution<double> u(-k, k);
  for (double& v : t.data) v = u(rng);
  t.requires_grad = true;
  return t;
}

inline void add_gru_params(ModelWeights& w, const std::string& prefix, int in_dim,
                           int hidden, std::mt19937_64& rng) {
  for (const char* gate : {"z", "r", "h"}) {
    w.tensors[prefix + ".w" + gate] = uniform_init({hidden, in_dim}, in_dim, rng);
    w.tensors[prefix + ".u" + gate] = uniform_init({hidden, hidden}, hidden, rng);
    w.tensors[prefix + ".b" + gate] = uniform_init({hidden}, hidden, rng);
  }
}

inline void add_batchnorm_params(ModelWeights& w, const std::string& prefix, int ch) {
  ad::Tensor gamma = ad::Tensor::full({ch}, 1.0);
  gamma.requires_grad = true;
  ad::Tensor beta = ad::Tensor::zeros({ch});
  beta.requires_grad = true;
  w.tensors[prefix + ".gamma"] = std::move(gamma);
  w.tensors[prefix + ".beta"] = std::move(beta);
  w.tensors[prefix + ".rmean"] = ad::Tensor::zeros({ch});
  w.tensors[prefix + ".rvar"] = ad::Tensor::full({ch}, 1.0);
}

}  // namespace detail

inline ModelWeights init_weights(const IpnetConfig& config, std::uint64_t seed) {
  config.validate();
  ModelWeights w;
  w.config = config;
  std::mt19937_64 rng(seed);

  int in_ch = 6;
  for (std::size_t i = 0; i < config.channels.size(); ++i) {
    const std::string p = "enc" + std::to_string(i);
    const int out_ch = config.channels[i];
    const int k = config.kernels[i];
    w.tensors[p + ".conv1.w"] = detail::uniform_init({out_ch, in_ch, k}, in_ch * k, rng);
    w.tensors[p + ".conv1.b"] = detail::uniform_init({out_ch}, in_ch * k, rng);
    detail::add_batchnorm_params(w, p + ".bn1", out_ch);
    ad::Tensor slope = ad::Tensor::full({out_ch}, 0.25);
    slope.requires_grad = true;
    w.tensors[p + ".prelu.slope"] = std::move(slope);
    w.tensors[p + ".conv2.w"] = detail::uniform_init({out_ch, out_ch, k}, out_ch * k, rng);
    w.tensors[p + ".conv2.b"] = detail::uniform_init({out_ch}, out_ch * k, rng);
    detail::add_batchnorm_params(w, p + ".bn2", out_ch);
    w.tensors[p + ".skip.w"] = detail::uniform_init({out_ch, in_ch, 1}, in_ch, rng);
    w.tensors[p + ".skip.b"] = detail::uniform_init({out_ch}, in_ch, rng);
    in_ch = out_ch;
  }

  detail::add_gru_params(w, "gru1", in_ch, config.gru_hidden, rng);
  detail::add_batchnorm_params(w, "attn.norm", config.gru_hidden);
  for (const char* m : {"q", "k", "v", "o"}) {
    w.tensors[std::string("attn.w") + m] =
        detail::uniform_init({config.gru_hidden, config.gru_hidden}, config.gru_hidden, rng);
    w.tensors[std::string("attn.b") + m] =
        detail::uniform_init({config.gru_hidden}, config.gru_hidden, rng);
  }
  detail::add_gru_params(w, "gru2", config.gru_hidden, config.gru_hidden, rng);
  w.tensors["dec_accel.w"] = detail::uniform_init({3, config.gru_hidden}, config.gru_hidden, rng);
  w.tensors["dec_accel.b"] = detail::uniform_init({3}, config.gru_hidden, rng);
  w.tensors["dec_gyro.w"] = detail::uniform_init({3, config.gru_hidden}, config.gru_hidden, rng);
  w.tensors["dec_gyro.b"] = detail::uniform_init({3}, config.gru_hidden, rng);
  return w;
}

/// Forward-pass handles: the two decoder outputs plus the tape bindings of
/// every trainable parameter (for gradient readback after backward()).
struct ForwardResult {
  ad::Var ba_seq;  // (n,3)
  ad::Var bw_seq;  // (n,3)
  std::map<std::string, ad::Var> params;
};

namespace detail {

inline void check_finite(ad::Tape& tape, ad::Var v, const char* layer) {
  for (double x : tape.value(v.id)) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("ipnet forward: non-finite activation in ") + layer);
    }
  }
}

inline ad::Var gru_layer(ad::Tape& tape, ad::Var x, const std::string& prefix,
                         std::map<std::string, ad::Var>& p, int hidden) {
  const int steps = tape.shape(x.id)[0];
  ad::Var h = tape.constant({hidden}, std::vector<double>(hidden, 0.0));
  std::vector<ad::Var> outputs;
  outputs.reserve(steps);
  for (int t = 0; t < steps; ++t) {
    const ad::Var xt = ad::row(x, t);
    const ad::Var z = ad::sigmoid(ad::add(
        ad::add(ad::matvec(p[prefix + ".wz"], xt), ad::matvec(p[prefix + ".uz"], h)),
        p[prefix + ".bz"]));
    const ad::Var r = ad::sigmoid(ad::add(
        ad::add(ad::matvec(p[prefix + ".wr"], xt), ad::matvec(p[prefix + ".ur"], h)),
        p[prefix + ".br"]));
    const ad::Var n = ad::tanh_op(ad::add(
        ad::add(ad::matvec(p[prefix + ".wh"], xt),
                ad::mul(r, ad::matvec(p[prefix + ".uh"], h))),
        p[prefix + ".bh"]));
    // h' = (1−z)∘n + z∘h
    h = ad::add(ad::mul(ad::affine(z, -1.0, 1.0), n), ad::mul(z, h));
    outputs.push_back(h);
  }
  return ad::stack_rows(outputs);
}

inline ad::Var self_attention(ad::Var x, std::map<std::string, ad::Var>& p, int hidden,
                              int heads) {
  const ad::Var q = ad::linear(x, p["attn.wq"], p["attn.bq"]);
  const ad::Var k = ad::linear(x, p["attn.wk"], p["attn.bk"]);
  const ad::Var v = ad::linear(x, p["attn.wv"], p["attn.bv"]);
  const int dk = hidden / heads;
  std::vector<ad::Var> head_outputs;
  head_outputs.reserve(heads);
  for (int hd = 0; hd < heads; ++hd) {
    const ad::Var qh = ad::slice_cols(q, hd * dk, dk);
    const ad::Var kh = ad::slice_cols(k, hd * dk, dk);
    const ad::Var vh = ad::slice_cols(v, hd * dk, dk);
    const ad::Var scores = ad::affine(ad::matmul_nt(qh, kh), 1.0 / std::sqrt(dk), 0.0);
    head_outputs.push_back(ad::matmul(ad::softmax(scores), vh));
  }
  return ad::linear(ad::concat_cols(head_outputs), p["attn.wo"], p["attn.bo"]);
}

}  // namespace detail

/// Forward-pass behavior: batchnorm statistics source and whether parameter
/// gradients are plumbed. The plain train/eval modes couple both; training
/// with frozen batchnorm keeps gradients while using running statistics.
struct ForwardMode {
  bool batchnorm_train = false;
  bool gradients = false;
};

/// Runs the network on one window. The window is raw (unnormalized) s×6 data,
/// [accel ‖ gyro] per row; per-channel standardization from the weights is
/// applied first. In train mode batchnorm uses batch statistics and updates
/// the running stats stored in `weights` in place.
inline ForwardResult forward(ad::Tape& tape, const ad::Tensor& window,
                             ModelWeights& weights, const ForwardMode& mode) {
  const IpnetConfig& cfg = weights.config;
  cfg.validate();
  if (window.shape != std::vector<int>{cfg.window_len, 6}) {
    throw ConfigError("ipnet forward: window shape " + ad::shape_str(window.shape) +
                      " does not match config " + ad::shape_str({cfg.window_len, 6}));
  }
  for (double v : window.data) {
    if (!std::isfinite(v)) throw NumericError("ipnet forward: non-finite input window");
  }

  // Standardize per channel with the training-set statistics.
  ad::Tensor norm = window;
  for (int r = 0; r < cfg.window_len; ++r) {
    for (int c = 0; c < 6; ++c) {
      norm.data[static_cast<std::size_t>(r) * 6 + c] =
          (norm.data[static_cast<std::size_t>(r) * 6 + c] - weights.norm.mean[c]) /
          weights.norm.stddev[c];
    }
  }
  norm.requires_grad = false;

  ForwardResult out;
  std::map<std::string, ad::Var>& p = out.params;
  for (auto& [name, tensor] : weights.tensors) {
    if (tensor.requires_grad) {
      ad::Tensor bound = tensor;
      bound.requires_grad = mode.gradients;  // no plumbing needed at inference
      p[name] = tape.input(bound);
    }
  }

  ad::Var x = tape.input(norm);
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::string pre = "enc" + std::to_string(i);
    ad::Var main = ad::conv1d(x, p[pre + ".conv1.w"], p[pre + ".conv1.b"]);
    main = ad::batchnorm1d(main, p[pre + ".bn1.gamma"], p[pre + ".bn1.beta"],
                           weights.tensors[pre + ".bn1.rmean"],
                           weights.tensors[pre + ".bn1.rvar"], mode.batchnorm_train);
    main = ad::prelu(main, p[pre + ".prelu.slope"]);
    main = ad::conv1d(main, p[pre + ".conv2.w"], p[pre + ".conv2.b"]);
    main = ad::batchnorm1d(main, p[pre + ".bn2.gamma"], p[pre + ".bn2.beta"],
                           weights.tensors[pre + ".bn2.rmean"],
                           weights.tensors[pre + ".bn2.rvar"], mode.batchnorm_train);
    const ad::Var skip = ad::conv1d(x, p[pre + ".skip.w"], p[pre + ".skip.b"]);
    x = ad::maxpool1d(ad::add(main, skip), cfg.pools[i]);
    detail::check_finite(tape, x, pre.c_str());
  }

  const ad::Var h1 = detail::gru_layer(tape, x, "gru1", p, cfg.gru_hidden);
  detail::check_finite(tape, h1, "gru1");
  const ad::Var pre_norm =
      ad::batchnorm1d(h1, p["attn.norm.gamma"], p["attn.norm.beta"],
                      weights.tensors["attn.norm.rmean"], weights.tensors["attn.norm.rvar"],
                      mode.batchnorm_train);
  const ad::Var attended = ad::add(
      h1, detail::self_attention(pre_norm, p, cfg.gru_hidden, cfg.attention_heads));
  const ad::Var h2 = detail::gru_layer(tape, attended, "gru2", p, cfg.gru_hidden);
  detail::check_finite(tape, h2, "gru2");

  const int t2 = tape.shape(h2.id)[0];
  const ad::Var tail = ad::slice_rows(h2, t2 - cfg.outputs_per_window, cfg.outputs_per_window);
  out.ba_seq = ad::linear(tail, p["dec_accel.w"], p["dec_accel.b"]);
  out.bw_seq = ad::linear(tail, p["dec_gyro.w"], p["dec_gyro.b"]);
  detail::check_finite(tape, out.ba_seq, "dec_accel");
  detail::check_finite(tape, out.bw_seq, "dec_gyro");
  return out;
}

/// train = true: batch statistics + gradients. train = false: running
/// statistics, no gradient plumbing.
inline ForwardResult forward(ad::Tape& tape, const ad::Tensor& window,
                             ModelWeights& weights, bool train) {
  return forward(tape, window, weights, ForwardMode{train, train});
}

/// Training loss: L = mean|ba_seq − label.ba| + mean|bw_seq − label.bw|,
/// the per-sequence label broadcast to every output row.
inline ad::Var loss(ad::Tape& tape, ad::Var ba_seq, ad::Var bw_seq, const ImuBias& label) {
  const int n = tape.shape(ba_seq.id)[0];
  std::vector<double> ta(static_cast<std::size_t>(n) * 3), tg(ta.size());
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < 3; ++c) {
      ta[static_cast<std::size_t>(r) * 3 + c] = label.ba(c);
      tg[static_cast<std::size_t>(r) * 3 + c] = label.bw(c);
    }
  }
  return ad::add(ad::l1_loss(ba_seq, tape.constant({n, 3}, std::move(ta))),
                 ad::l1_loss(bw_seq, tape.constant({n, 3}, std::move(tg))));
}

/// Mean of the n predicted rows of each decoder: the window's bias estimate.
inline ImuBias predict(const ad::Tensor& window, ModelWeights& weights) {
  ad::Tape tape;
  const ForwardResult r = forward(tape, window, weights, /*train=*/false);
  const auto& ba = tape.value(r.ba_seq.id);
  const auto& bw = tape.value(r.bw_seq.id);
  const int n = weights.config.outputs_per_window;
  ImuBias out;
  for (int row_i = 0; row_i < n; ++row_i) {
    for (int c = 0; c < 3; ++c) {
      out.ba(c) += ba[static_cast<std::size_t>(row_i) * 3 + c];
      out.bw(c) += bw[static_cast<std::size_t>(row_i) * 3 + c];
    }
  }
  out.ba /= n;
  out.bw /= n;
  return out;
}

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

struct TrainingSchedule {
  OptKind optimizer = OptKind::rmsprop;
  double lr = 1e-6;
  double decay_factor = 0.1;
  int decay_every_epochs = 10;
  int epochs = 30;
  int batch_size = 8;
  // From this epoch on, batchnorm runs with frozen running statistics so the
  // network adapts to its eval-time normalization. Negative: never freeze.
  // Worth setting on small configs, where per-window batch statistics are
  // noisy and the train/eval mismatch dominates validation loss.
  int bn_freeze_after_epoch = -1;
  std::uint64_t seed = 0;

  void validate() const {
    if (lr < 0 || decay_factor <= 0 || decay_every_epochs < 1 || epochs < 1 ||
        batch_size < 1) {
      throw ConfigError("TrainingSchedule: invalid field");
    }
  }
};

/// One labeled training sequence.
struct LabeledSequence {
  std::string id;
  std::vector<ImuSample> imu;
  ImuBias label;
  bool validation = false;
};

struct WindowDataset {
  struct Window {
    ad::Tensor input;  // (s,6) raw
    ImuBias label;
  };
  std::vector<Window> train;
  std::vector<Window> val;
};

/// Builds the raw (s,6) [accel ‖ gyro] input tensor starting at `start`.
inline ad::Tensor make_window_tensor(std::span<const ImuSample> imu, std::size_t start,
                                     int window_len) {
  if (start + window_len > imu.size()) {
    throw ConfigError("make_window_tensor: window exceeds stream length");
  }
  ad::Tensor t = ad::Tensor::zeros({window_len, 6});
  for (int r = 0; r < window_len; ++r) {
    const ImuSample& s = imu[start + r];
    for (int c = 0; c < 3; ++c) {
      t.data[static_cast<std::size_t>(r) * 6 + c] = s.accel(c);
      t.data[static_cast<std::size_t>(r) * 6 + 3 + c] = s.gyro(c);
    }
  }
  return t;
}

/// Cuts each sequence into windows at the configured stride; every window
/// inherits its sequence's label.
inline WindowDataset make_windows(std::span<const LabeledSequence> sequences,
                                  const IpnetConfig& config) {
  config.validate();
  WindowDataset out;
  for (const auto& seq : sequences) {
    if (seq.imu.size() < static_cast<std::size_t>(config.window_len)) {
      throw DataError("make_windows: sequence '" + seq.id + "' shorter than one window");
    }
    for (std::size_t start = 0; start + config.window_len <= seq.imu.size();
         start += config.stride) {
      auto& bucket = seq.validation ? out.val : out.train;
      bucket.push_back({make_window_tensor(seq.imu, start, config.window_len), seq.label});
    }
  }
  return out;
}

inline NormStats compute_norm_stats(const std::vector<WindowDataset::Window>& windows) {
  NormStats n;
  if (windows.empty()) return n;
  std::array<double, 6> sum{}, sum2{};
  std::size_t count = 0;
  for (const auto& w : windows) {
    const int rows = w.input.rows();
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < 6; ++c) {
        const double v = w.input.data[static_cast<std::size_t>(r) * 6 + c];
        sum[c] += v;
        sum2[c] += v * v;
      }
    }
    count += rows;
  }
  for (int c = 0; c < 6; ++c) {
    n.mean[c] = sum[c] / count;
    const double var = sum2[c] / count - n.mean[c] * n.mean[c];
    n.stddev[c] = std::sqrt(std::max(var, 1e-24));
    if (n.stddev[c] < 1e-12) n.stddev[c] = 1.0;
  }
  return n;
}

struct TrainLog {
  struct Epoch {
    int epoch;
    double lr;
    double train_loss;
    double val_loss;
  };
  std::vector<Epoch> epochs;
  int best_epoch = -1;
  double best_val_loss = 0.0;
};

struct TrainResult {
  ModelWeights weights;  // best-validation-loss snapshot
  TrainLog log;
};

/// Full-batch-of-minibatches training loop. Deterministic given the schedule
/// seed; returns the weights of the epoch with the lowest validation loss.
inline TrainResult train(const WindowDataset& data, const IpnetConfig& config,
                         const TrainingSchedule& schedule) {
  schedule.validate();
  if (data.train.empty() || data.val.empty()) {
    throw ConfigError("train: need at least one training and one validation window");
  }

  ModelWeights weights = init_weights(config, schedule.seed);
  weights.norm = compute_norm_stats(data.train);

  std::map<std::string, MomentState> opt_state;
  TrainLog log;
  ModelWeights best = weights;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  auto eval_loss = [&](const std::vector<WindowDataset::Window>& windows,
                       ModelWeights& w) {
    double total = 0.0;
    for (const auto& win : windows) {
      ad::Tape tape;
      ForwardResult f = forward(tape, win.input, w, /*train=*/false);
      total += tape.value(loss(tape, f.ba_seq, f.bw_seq, win.label).id)[0];
    }
    return total / static_cast<double>(windows.size());
  };

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr =
        schedule.lr * std::pow(schedule.decay_factor, epoch / schedule.decay_every_epochs);
    std::mt19937_64 shuffle_rng(schedule.seed + 1 + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const bool bn_train = schedule.bn_freeze_after_epoch < 0 ||
                          epoch < schedule.bn_freeze_after_epoch;
    double train_loss = 0.0;
    std::size_t done = 0;
    while (done < order.size()) {
      const std::size_t batch_end =
          std::min(done + static_cast<std::size_t>(schedule.batch_size), order.size());
      std::map<std::string, std::vector<double>> grad_sum;
      const double batch_n = static_cast<double>(batch_end - done);
      for (std::size_t b = done; b < batch_end; ++b) {
        const auto& win = data.train[order[b]];
        ad::Tape tape;
        ForwardResult f = forward(tape, win.input, weights,
                                  ForwardMode{bn_train, true});
        const ad::Var l = loss(tape, f.ba_seq, f.bw_seq, win.label);
        const double lv = tape.value(l.id)[0];
        if (!std::isfinite(lv)) {
          throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
        }
        train_loss += lv;
        tape.backward(l);
        for (const auto& [name, var] : f.params) {
          auto& g = grad_sum[name];
          const auto& src = tape.grad(var.id);
          if (g.empty()) g.assign(src.size(), 0.0);
          for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i] / batch_n;
        }
      }
      ad::optimizer_step(schedule.optimizer, weights.tensors, grad_sum, opt_state, lr);
      done = batch_end;
    }
    train_loss /= static_cast<double>(order.size());

    const double val_loss = eval_loss(data.val, weights);
    log.epochs.push_back({epoch, lr, train_loss, val_loss});
    if (val_loss < best_val) {
      best_val = val_loss;
      best = weights;
      best_epoch = epoch;
    }
  }
  log.best_epoch = best_epoch;
  log.best_val_loss = best_val;
  return TrainResult{std::move(best), std::move(log)};
}

// --------------------------------------------------------------------------
// Sliding-window inference
// --------------------------------------------------------------------------

/// One timestamped prior. Entries before the first full window carry the
/// configured initial prior and are flagged as warm-up.
struct PriorSample {
  double t = 0.0;
  ImuBias bias;
  bool warmup = false;
};

inline std::vector<PriorSample> sliding_inference(std::span<const ImuSample> imu,
                                                  ModelWeights& weights,
                                                  const ImuBias& initial_prior = {}) {
  const IpnetConfig& cfg = weights.config;
  cfg.validate();
  if (imu.size() < static_cast<std::size_t>(cfg.window_len)) {
    throw DataError("sliding_inference: stream shorter than one window");
  }
  std::vector<PriorSample> out;
  // Warm-up priors at stride cadence before the first complete window.
  for (std::size_t idx = cfg.stride - 1;
       idx + 1 < static_cast<std::size_t>(cfg.window_len); idx += cfg.stride) {
    out.push_back({imu[idx].t, initial_prior, true});
  }
  for (std::size_t start = 0; start + cfg.window_len <= imu.size(); start += cfg.stride) {
    const ad::Tensor window = make_window_tensor(imu, start, cfg.window_len);
    const ImuBias bias = predict(window, weights);
    out.push_back({imu[start + cfg.window_len - 1].t, bias, false});
  }
  return out;
}

/// Inference throughput over `rounds` repeated windows: windows per second
/// plus latency percentiles, for the benchmark report.
struct InferenceBench {
  double windows_per_second = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double p99_ms = 0.0;
  int rounds = 0;
};

inline InferenceBench bench_inference(ModelWeights& weights, const ad::Tensor& window,
                                      int rounds) {
  InferenceBench b;
  b.rounds = rounds;
  std::vector<double> lat;
  lat.reserve(rounds);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < rounds; ++i) {
    const auto w0 = std::chrono::steady_clock::now();
    (void)predict(window, weights);
    const auto w1 = std::chrono::steady_clock::now();
    lat.push_back(std::chrono::duration<double, std::milli>(w1 - w0).count());
  }
  const auto t1 = std::chrono::steady_clock::now();
  const double total_s = std::chrono::duration<double>(t1 - t0).count();
  b.windows_per_second = rounds / total_s;
  std::sort(lat.begin(), lat.end());
  auto pct = [&](double p) { return lat[static_cast<std::size_t>(p * (lat.size() - 1))]; };
  b.p50_ms = pct(0.50);
  b.p95_ms = pct(0.95);
  b.p99_ms = pct(0.99);
  return b;
}

}  // namespace ipnet
