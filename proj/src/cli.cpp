#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <thread>

#include "CLI11.hpp"
#include "proxslim/errors.hpp"
#include "proxslim/harness.hpp"

namespace proxslim {

namespace {

template <typename E>
CLI::Option* enum_option(CLI::App* app, const std::string& name, E& target,
                         const std::map<std::string, E>& names, const std::string& help) {
  return app->add_option(name, target, help)->transform(CLI::CheckedTransformer(names));
}

void add_config_option(CLI::App* app) {
  // Expanded by expand_config() before parsing; registered so it shows in --help.
  app->add_option("--config", "flat key = value file; flags override it");
}

/// CLI11 does not read config files attached to subcommands, so the file is
/// spliced in as "--key=value" arguments directly after the subcommand name,
/// ahead of the explicit flags that may override it.
std::vector<std::string> expand_config(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty() || args[0].starts_with("-")) return args;
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].starts_with("--config=")) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  std::vector<std::string> spliced;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';' || line[0] == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractError(path + ":" + std::to_string(n) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (value.empty()) continue;  // keep the default
    spliced.push_back("--" + key + "=" + value);
  }
  args.insert(args.begin() + 1, spliced.begin(), spliced.end());
  return args;
}

void add_data_options(CLI::App* app, RunConfig& cfg) {
  app->add_option("--data", cfg.data, "PNSD dataset file (default: generate synthetic)");
  app->add_option("--classes", cfg.synthetic.classes, "synthetic: classes")
      ->check(CLI::PositiveNumber);
  app->add_option("--per-class", cfg.synthetic.per_class, "synthetic: samples per class")
      ->check(CLI::PositiveNumber);
  app->add_option("--channels", cfg.synthetic.channels, "synthetic: image channels")
      ->check(CLI::PositiveNumber);
  app->add_option_function<std::size_t>(
         "--size", [&cfg](std::size_t s) { cfg.synthetic.height = cfg.synthetic.width = s; },
         "synthetic: image height and width")
      ->default_str(std::to_string(cfg.synthetic.height))
      ->check(CLI::PositiveNumber);
  app->add_option("--data-seed", cfg.synthetic.seed, "synthetic: generator seed");
  app->add_option("--noise", cfg.synthetic.noise, "synthetic: pixel noise sigma");
  app->add_flag("--interior,!--no-interior", cfg.synthetic.interior_targets,
                "synthetic: emit every image once per class (bounded optimum)");
}

void add_run_options(CLI::App* app, RunConfig& cfg) {
  add_config_option(app);
  app->add_option("--arch", cfg.arch, "tinyvgg, or quadratic for certify");
  app->add_option("--width1", cfg.vgg.width1, "channels of the first conv")
      ->check(CLI::PositiveNumber);
  app->add_option("--width2", cfg.vgg.width2, "channels of the second conv")
      ->check(CLI::PositiveNumber);
  enum_option(app, "--activation", cfg.vgg.activation,
              std::map<std::string, ActivationKind>{{"softplus", ActivationKind::kSoftplus},
                                                    {"relu", ActivationKind::kRelu},
                                                    {"identity", ActivationKind::kIdentity}},
              "softplus | relu | identity");
  enum_option(app, "--pool", cfg.vgg.pool,
              std::map<std::string, PoolKind>{{"softmax", PoolKind::kSoftmax},
                                              {"max", PoolKind::kMax},
                                              {"avg", PoolKind::kAverage}},
              "softmax | max | avg");
  app->add_option("--sharpness", cfg.vgg.sharpness, "softplus / softmax-pool sharpness")
      ->check(CLI::PositiveNumber);
  add_data_options(app, cfg);

  app->add_option("--lambda", cfg.hp.lambda, "l1 weight on xi")->check(CLI::NonNegativeNumber);
  app->add_option("--beta", cfg.hp.beta, "coupling weight")->check(CLI::NonNegativeNumber);
  app->add_option("--alpha", cfg.alpha, "a0 (step schedule), 'first-last:alpha,...' or auto");
  app->add_option("--epochs", cfg.hp.epochs, "epochs")->check(CLI::NonNegativeNumber);
  app->add_option("--batch-size", cfg.hp.batch_size, "mini-batch size")
      ->check(CLI::PositiveNumber);
  app->add_option("--momentum", cfg.hp.momentum, "momentum in [0, 1)");
  app->add_option("--weight-decay", cfg.hp.weight_decay, "weight decay");
  enum_option(app, "--xi-update", cfg.hp.xi_update,
              std::map<std::string, XiUpdate>{{"epoch", XiUpdate::kPerEpoch},
                                              {"batch", XiUpdate::kPerBatch}},
              "epoch | batch");
  enum_option(app, "--mode", cfg.hp.mode,
              std::map<std::string, BatchMode>{{"stochastic", BatchMode::kStochastic},
                                               {"full", BatchMode::kFullBatch}},
              "stochastic | full");
  app->add_option("--seed", cfg.seed, "initialization and batch-order seed");
  enum_option(app, "--variant", cfg.variant,
              std::map<std::string, Variant>{{"prox", Variant::kProximal},
                                             {"baseline", Variant::kSubgradient},
                                             {"sgd", Variant::kPlain}},
              "prox | baseline | sgd");
  app->add_flag("--diagnostics,!--no-diagnostics", cfg.diagnostics, "log F every epoch");
  app->add_flag("--adopt-support,!--no-adopt-support", cfg.adopt_support,
                "zero gamma wherever xi is zero after training");
  app->add_option("--stop-after", cfg.stop_after, "stop after this epoch (0: run to the end)");
  app->add_option("--resume", cfg.resume, "continue from a checkpoint");
  app->add_option("--out", cfg.out, "output directory");
  app->add_option("--lipschitz-samples", cfg.lipschitz_samples, "certify: estimator pairs")
      ->check(CLI::PositiveNumber);
  app->add_option("--lipschitz-radius", cfg.lipschitz_radius, "certify: estimator radius")
      ->check(CLI::PositiveNumber);
  app->add_option("--min-epochs", cfg.min_epochs, "certify: epochs before stopping early");
  app->add_option("--window", cfg.window, "certify: trailing window")->check(CLI::PositiveNumber);
  app->add_option("--tol-step", cfg.tol_step, "certify: step tolerance");
  app->add_option("--tol-w", cfg.tol_w, "certify: subgradient tolerance");
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> v;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const std::string item = text.substr(start, comma - start);
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ContractError(std::string("bad ") + what + " list entry '" + item + "'");
    }
    start = comma + 1;
  }
  return v;
}

unsigned sweep_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PROXSLIM_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    } catch (const std::logic_error&) {
      throw ContractError(std::string("PROXSLIM_THREADS must be a positive integer, got '") +
                          env + "'");
    }
  }
  return n;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"proximal network slimming: train, certify, prune", "proxslim"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  SyntheticSpec gen;
  std::filesystem::path gen_out = "data.pnsd";
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset");
  add_config_option(gen_cmd);
  gen_cmd->add_option("--classes", gen.classes)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--per-class", gen.per_class)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--channels", gen.channels)->check(CLI::PositiveNumber);
  gen_cmd->add_option_function<std::size_t>(
             "--size", [&gen](std::size_t s) { gen.height = gen.width = s; }, "height and width")
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--noise", gen.noise);
  gen_cmd->add_flag("--interior,!--no-interior", gen.interior_targets);
  gen_cmd->add_option("--out", gen_out, "output file");

  RunConfig train_cfg;
  auto* train_cmd = app.add_subcommand("train", "train with proximal or baseline slimming");
  add_run_options(train_cmd, train_cfg);

  RunConfig cert_cfg;
  cert_cfg.hp.mode = BatchMode::kFullBatch;
  cert_cfg.hp.epochs = 300;
  cert_cfg.alpha = "auto";
  cert_cfg.out = "certify";
  auto* cert_cmd = app.add_subcommand("certify", "full-batch run with convergence checks");
  add_run_options(cert_cmd, cert_cfg);

  RunConfig sweep_cfg;
  sweep_cfg.out = "sweep";
  std::string lambdas = "0.0045", betas = "100";
  auto* sweep_cmd = app.add_subcommand("sweep", "train a lambda x beta grid in parallel");
  add_run_options(sweep_cmd, sweep_cfg);
  sweep_cmd->add_option("--lambdas", lambdas, "comma-separated lambda values");
  sweep_cmd->add_option("--betas", betas, "comma-separated beta values");

  std::filesystem::path ckpt, data;
  std::filesystem::path pr_out = "pruned";
  double epsilon = 0.0;
  std::uint64_t pr_seed = 1;
  auto* prune_cmd = app.add_subcommand("prune", "remove zero-scaled channels");
  add_config_option(prune_cmd);
  prune_cmd->add_option("--checkpoint", ckpt)->required();
  prune_cmd->add_option("--data", data)->required();
  prune_cmd->add_option("--out", pr_out);
  prune_cmd->add_option("--epsilon", epsilon, "also prune |gamma| <= epsilon (baselines only)")
      ->check(CLI::NonNegativeNumber);
  prune_cmd->add_option("--seed", pr_seed, "seed of the random equivalence inputs");

  auto* eval_cmd = app.add_subcommand("eval", "accuracy and loss with running statistics");
  eval_cmd->add_option("--checkpoint", ckpt)->required();
  eval_cmd->add_option("--data", data)->required();

  int ft_epochs = 5;
  double ft_alpha = 100.0;
  std::size_t ft_batch = 64;
  std::filesystem::path ft_out = "finetuned";
  auto* ft_cmd = app.add_subcommand("finetune", "retrain without the sparsity terms");
  add_config_option(ft_cmd);
  ft_cmd->add_option("--checkpoint", ckpt)->required();
  ft_cmd->add_option("--data", data)->required();
  ft_cmd->add_option("--epochs", ft_epochs)->check(CLI::NonNegativeNumber);
  ft_cmd->add_option("--alpha", ft_alpha, "constant reciprocal step")->check(CLI::PositiveNumber);
  ft_cmd->add_option("--batch-size", ft_batch)->check(CLI::PositiveNumber);
  ft_cmd->add_option("--out", ft_out);

  try {
    std::vector<std::string> args;
    try {
      args = expand_config(argc, argv);
    } catch (const std::exception& e) {
      err << "usage error: " << e.what() << '\n';
      return kExitUsage;
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    // Subcommand help is reported through the same exception path.
    if (e.get_exit_code() == 0) {
      out << e.what() << '\n';
      return kExitOk;
    }
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, gen_out, out);
    if (*train_cmd) return cmd_train(train_cfg, out);
    if (*cert_cmd) return cmd_certify(cert_cfg, out);
    if (*prune_cmd) return cmd_prune(ckpt, data, pr_out, epsilon, pr_seed, out);
    if (*eval_cmd) return cmd_eval(ckpt, data, out);
    if (*ft_cmd) return cmd_finetune(ckpt, data, ft_epochs, ft_alpha, ft_batch, ft_out, out);
    if (*sweep_cmd) {
      return cmd_sweep(sweep_cfg, parse_list(lambdas, "lambda"), parse_list(betas, "beta"),
                       sweep_threads(), out);
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const RefusePruneError& e) {
    err << "refuse-prune (" << e.layer() << "): " << e.what() << '\n';
    return kExitRefusePrune;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace proxslim
