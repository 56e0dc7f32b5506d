#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "tnn/cli.hpp"

// tnn: train, compress, evaluate, and verify tensor-network layer models.
//
//   tnn train    --config exp.json [--seed N] [--threads N] [--out DIR]
//   tnn compress --config exp.json --teacher model.tnn [--seed N] ...
//   tnn eval     --config exp.json --teacher model.tnn
//   tnn flops    --config exp.json
//   tnn verify   [--suite gradcheck|equivalence|decomposition|flops|all]

namespace {

struct CommonFlags {
  std::string config_path;
  std::int64_t seed = 0;
  int threads = 0;
  std::string out_dir;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "experiment config (JSON)")
      ->required();
  flags.seed_opt =
      cmd->add_option("--seed", flags.seed, "override the config's seed");
  flags.threads_opt = cmd->add_option("--threads", flags.threads,
                                      "override the config's thread count");
  flags.out_opt =
      cmd->add_option("--out", flags.out_dir, "override the output directory");
}

tnn::Config load_with_overrides(const CommonFlags& flags) {
  tnn::Config config = tnn::load_config(flags.config_path);
  if (flags.seed_opt->count() > 0) {
    if (flags.seed < 0) throw std::invalid_argument("--seed must be >= 0");
    config.seed = static_cast<std::uint64_t>(flags.seed);
  }
  if (flags.threads_opt->count() > 0) {
    if (flags.threads < 1) throw std::invalid_argument("--threads must be >= 1");
    config.threads = flags.threads;
    config.train.threads = flags.threads;
    config.plan.threads = flags.threads;
  }
  if (flags.out_opt->count() > 0) config.output_dir = flags.out_dir;
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tensor-network layers: training, compression, verification"};
  app.require_subcommand(1);

  CommonFlags train_flags, compress_flags, eval_flags, flops_flags;
  std::string teacher_path, eval_archive, suite = "all";

  CLI::App* train = app.add_subcommand("train", "train a reference model");
  add_common(train, train_flags);

  CLI::App* compress =
      app.add_subcommand("compress", "compress a trained model");
  add_common(compress, compress_flags);
  compress->add_option("--teacher", teacher_path, "reference model archive")
      ->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a model archive");
  add_common(eval, eval_flags);
  eval->add_option("--teacher", eval_archive, "model archive to evaluate")
      ->required();

  CLI::App* flops =
      app.add_subcommand("flops", "report parameter and multiply counts");
  add_common(flops, flops_flags);

  CLI::App* verify = app.add_subcommand("verify", "run an invariant suite");
  verify->add_option(
      "--suite", suite,
      "gradcheck | equivalence | decomposition | flops | all");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed())
      return tnn::cmd_train(load_with_overrides(train_flags), std::cout);
    if (compress->parsed())
      return tnn::cmd_compress(load_with_overrides(compress_flags),
                               teacher_path, std::cout);
    if (eval->parsed())
      return tnn::cmd_eval(load_with_overrides(eval_flags), eval_archive,
                           std::cout);
    if (flops->parsed())
      return tnn::cmd_flops(load_with_overrides(flops_flags), std::cout);
    if (verify->parsed()) return tnn::cmd_verify(suite, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
