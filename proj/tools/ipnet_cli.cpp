// ipnet — IMU bias-prior pipeline CLI.
//
// Subcommands: gen-synthetic, make-labels, train, infer, fuse, eval,
// bench-infer. Every run is reproducible from (config, seed); errors land on
// stderr with a machine-readable JSON tail.
//
// Exit codes: 0 success, 1 usage/config, 2 data error, 3 numerical failure.

#include <CLI11.hpp>
#include <iostream>

#include "ipnet/ipnet.hpp"

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed_override;
  bool quiet = false;
};

ipnet::RunConfig load_config(const GlobalArgs& args) {
  if (args.config_path.empty()) {
    throw ipnet::ConfigError("missing --config");
  }
  ipnet::RunConfig config = ipnet::RunConfig::from_file(args.config_path);
  if (args.seed_override) {
    config.seed = *args.seed_override;
    config.echo["seed"] = *args.seed_override;
  }
  return config;
}

void note(const GlobalArgs& args, const std::string& message) {
  if (!args.quiet) {
    std::cout << message << '\n';
  }
}

ipnet::PriorMode parse_prior_mode(const std::string& prior, std::string& file_out) {
  if (prior == "off") return ipnet::PriorMode::off;
  if (prior == "oracle") return ipnet::PriorMode::oracle;
  if (prior == "network") return ipnet::PriorMode::network;
  if (prior.rfind("file:", 0) == 0) {
    file_out = prior.substr(5);
    return ipnet::PriorMode::file;
  }
  throw ipnet::ConfigError("--prior must be off, oracle, network, or file:PATH");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"IMU bias-prior pipeline: synthesis, labeling, training, inference, fusion"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  GlobalArgs args;
  app.add_option("--config", args.config_path, "run configuration JSON");
  app.add_option("--seed", args.seed_override, "override the config seed");
  app.add_option("--out", args.out_dir, "output directory");
  app.add_flag("--quiet", args.quiet, "suppress progress output");

  auto* gen = app.add_subcommand("gen-synthetic", "write synthetic EuRoC-layout sequences");

  auto* labels = app.add_subcommand("make-labels", "estimate per-sequence bias labels");
  std::string data_dir;
  labels->add_option("--data", data_dir, "directory of sequence directories")->required();

  auto* train_cmd = app.add_subcommand("train", "train the bias-prior network");
  std::string train_data, labels_dir;
  train_cmd->add_option("--data", train_data, "directory of sequence directories")->required();
  train_cmd->add_option("--labels", labels_dir, "directory of label JSON files")->required();

  auto* infer = app.add_subcommand("infer", "sliding-window bias inference over a sequence");
  std::string infer_weights, infer_seq;
  infer->add_option("--weights", infer_weights, "weights file")->required();
  infer->add_option("--data", infer_seq, "sequence directory")->required();

  auto* fuse = app.add_subcommand("fuse", "fixed-lag fusion with optional bias prior");
  std::string fuse_seq, fuse_prior = "off", fuse_weights;
  fuse->add_option("--data", fuse_seq, "sequence directory")->required();
  fuse->add_option("--prior", fuse_prior, "off | oracle | network | file:PATH");
  fuse->add_option("--weights", fuse_weights, "weights file (for --prior network)");

  auto* eval_cmd = app.add_subcommand("eval", "trajectory metrics (ATE / RPE)");
  std::string est_path, gt_path;
  eval_cmd->add_option("--est", est_path, "estimated trajectory (TUM)")->required();
  eval_cmd->add_option("--gt", gt_path, "ground truth (sequence dir or TUM file)")->required();

  auto* bench = app.add_subcommand("bench-infer", "inference throughput report");
  std::string bench_weights;
  int bench_rounds = 200;
  bench->add_option("--weights", bench_weights, "weights file")->required();
  bench->add_option("--rounds", bench_rounds, "number of windows to time");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const ipnet::fs::path out_dir(args.out_dir);
    ipnet::fs::create_directories(out_dir);
    if (gen->parsed()) {
      const auto config = load_config(args);
      ipnet::cmd_gen_synthetic(config, out_dir);
      note(args, "wrote " + std::to_string(config.sequences.size()) + " sequences to " +
                     out_dir.string());
    } else if (labels->parsed()) {
      const auto config = load_config(args);
      const auto results = ipnet::cmd_make_labels(config, data_dir, out_dir);
      for (const auto& label : results) {
        note(args, label.sequence_id + ": ba_mean [" +
                       std::to_string(label.mean_bias.ba.x()) + ", " +
                       std::to_string(label.mean_bias.ba.y()) + ", " +
                       std::to_string(label.mean_bias.ba.z()) + "]");
      }
    } else if (train_cmd->parsed()) {
      const auto config = load_config(args);
      const auto result = ipnet::cmd_train(config, train_data, labels_dir, out_dir);
      note(args, "best epoch " + std::to_string(result.log.best_epoch) + ", val loss " +
                     std::to_string(result.log.best_val_loss));
    } else if (infer->parsed()) {
      const auto priors = ipnet::cmd_infer(infer_weights, infer_seq, out_dir / "priors.csv");
      note(args, "wrote " + std::to_string(priors.size()) + " prior samples");
    } else if (fuse->parsed()) {
      const auto config = load_config(args);
      std::string prior_file;
      const ipnet::PriorMode mode = parse_prior_mode(fuse_prior, prior_file);
      const auto out = ipnet::cmd_fuse(config, fuse_seq, out_dir, mode, fuse_weights,
                                       prior_file);
      note(args, "wrote " + out.trajectory_path.string() + " (" +
                     std::to_string(out.result.trajectory.size()) + " keyframes)");
    } else if (eval_cmd->parsed()) {
      const auto config = load_config(args);
      const auto report =
          ipnet::cmd_eval(config, est_path, gt_path, out_dir / "metrics.json");
      note(args, "ate_rmse_m " + std::to_string(report.ate_rmse_m) + "  rpe_rmse_rad " +
                     std::to_string(report.rpe_rmse_rad));
    } else if (bench->parsed()) {
      const auto report =
          ipnet::cmd_bench_infer(bench_weights, bench_rounds, out_dir / "bench.json");
      note(args, std::to_string(report.windows_per_second) + " windows/s, p50 " +
                     std::to_string(report.p50_ms) + " ms");
    }
  } catch (const ipnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n'
              << nlohmann::json{{"error", "config"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  } catch (const ipnet::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n'
              << nlohmann::json{{"error", "data"}, {"message", e.what()}}.dump() << '\n';
    return 2;
  } catch (const ipnet::NumericError& e) {
    std::cerr << "numerical error: " << e.what() << '\n'
              << nlohmann::json{{"error", "numerical"}, {"message", e.what()}}.dump() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n'
              << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
    return 3;
  }
  return 0;
}
