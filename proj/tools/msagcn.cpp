#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "msagcn/app.hpp"

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string data;
  std::size_t epochs = 0;

  std::optional<std::string> config_path() const {
    return config.empty() ? std::nullopt : std::optional<std::string>(config);
  }
};

void add_common(CLI::App* cmd, Common& c, bool with_data = true) {
  cmd->add_option("-c,--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("-s,--seed", c.seed, "global seed (overrides the config)");
  cmd->add_option("-o,--out", c.out, "output directory (overrides the config)");
  if (with_data) cmd->add_option("-d,--data", c.data, "canonical JSON-lines dataset (overrides the config)");
}

msagcn::app::Overrides overrides(CLI::App* cmd, const Common& c) {
  msagcn::app::Overrides o;
  if (cmd->count("--seed")) o.seed = c.seed;
  if (cmd->count("--out")) o.out = c.out;
  if (cmd->get_option_no_throw("--data") && cmd->count("--data")) o.data = c.data;
  if (cmd->get_option_no_throw("--epochs") && cmd->count("--epochs")) o.epochs = c.epochs;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale adaptive graph network for emotion recognition from gait"};
  app.require_subcommand(1);

  Common train_opts;
  auto* train = app.add_subcommand("train", "train a model and write checkpoint, logs and metrics");
  add_common(train, train_opts);
  train->add_option("-e,--epochs", train_opts.epochs, "number of epochs (overrides the config)")
      ->check(CLI::PositiveNumber);

  Common eval_opts;
  std::string eval_ckpt;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a labeled dataset");
  add_common(eval, eval_opts);
  eval->add_option("-k,--checkpoint", eval_ckpt, "checkpoint file")->required();

  std::string pred_ckpt, pred_data;
  auto* predict = app.add_subcommand("predict", "print class probabilities per sample");
  predict->add_option("-k,--checkpoint", pred_ckpt, "checkpoint file")->required();
  predict->add_option("-d,--data", pred_data, "canonical JSON-lines dataset")->required();

  std::uint64_t gc_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite over five seeds");
  gradcheck->add_option("-s,--seed", gc_seed, "first seed");

  Common ablate_opts;
  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "train one model per grid cell on a shared split");
  add_common(ablate, ablate_opts);
  ablate->add_option("-a,--axis", axis, "scales | csfm-levels | kernels | temporal")
      ->required()
      ->check(CLI::IsMember({"scales", "csfm-levels", "kernels", "temporal"}));

  Common synth_opts;
  auto* synth = app.add_subcommand("synth", "write a synthetic labeled gait dataset");
  add_common(synth, synth_opts, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return msagcn::app::kConfigError;
  }

  namespace a = msagcn::app;
  if (*train) return a::cmd_train(train_opts.config_path(), overrides(train, train_opts), std::cout, std::cerr);
  if (*eval)
    return a::cmd_eval(eval_ckpt, eval_opts.config_path(), overrides(eval, eval_opts), std::cout, std::cerr);
  if (*predict) return a::cmd_predict(pred_ckpt, pred_data, std::cout, std::cerr);
  if (*gradcheck) return a::cmd_gradcheck(gc_seed, std::cout, std::cerr);
  if (*ablate)
    return a::cmd_ablate(ablate_opts.config_path(), axis, overrides(ablate, ablate_opts), std::cout, std::cerr);
  if (*synth) return a::cmd_synth(synth_opts.config_path(), overrides(synth, synth_opts), std::cout, std::cerr);
  return a::kConfigError;
}
