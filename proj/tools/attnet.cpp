#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "attnet/attnet.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out = ".";
  std::string checkpoint;
  std::string human_csv;
  std::optional<std::uint64_t> seed;
  std::optional<int> display;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "config file (key = value lines)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "overrides the config seed");
}

attnet::CommandArgs resolve_args(const Flags& f) {
  attnet::CommandArgs args;
  args.config = f.config.empty() ? attnet::RunConfig{} : attnet::load_config(f.config);
  if (f.seed) args.config.seed = *f.seed;
  args.config.resolve();
  args.out_dir = f.out;
  if (!f.checkpoint.empty()) args.checkpoint = f.checkpoint;
  if (!f.human_csv.empty()) args.human_csv = f.human_csv;
  args.display_id = f.display;
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnet: routed-attention visual search model"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-data", "write synthetic training displays and a manifest");
  add_common(gen, f);

  auto* train = app.add_subcommand("train", "train a model; writes checkpoint.bin and train_log.csv");
  add_common(train, f);
  train->add_option("--checkpoint", f.checkpoint, "resume from this checkpoint");

  auto* eval = app.add_subcommand("eval", "argmax rollouts: guidance curves, traces, heatmaps");
  add_common(eval, f);
  eval->add_option("--checkpoint", f.checkpoint, "trained checkpoint (default: untrained init)");
  eval->add_option("--human-csv", f.human_csv, "human scanpaths trial_id,display_id,fix_index,x,y");

  auto* rollout = app.add_subcommand("rollout", "per-fixation priority maps and trace for one display");
  add_common(rollout, f);
  rollout->add_option("--checkpoint", f.checkpoint, "trained checkpoint (default: untrained init)");
  rollout->add_option("--display", f.display, "display id")->required();

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every trainable block");
  add_common(grad, f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : attnet::kExitConfig;
  }

  attnet::CommandArgs args;
  try {
    args = resolve_args(f);
  } catch (const attnet::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return attnet::kExitConfig;
  }
  return attnet::run_command(app.get_subcommands().front()->get_name(), args, std::cout, std::cerr);
}
