#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "proxslim/checkpoint.hpp"
#include "proxslim/data.hpp"
#include "proxslim/network.hpp"
#include "proxslim/optimizer.hpp"

namespace proxslim {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitNumeric = 2,
  kExitCertification = 3,
  kExitRefusePrune = 4,
};

struct RunConfig {
  std::string arch = "tinyvgg";  // tinyvgg | quadratic (certify only)
  TinyVggOptions vgg;
  std::string data;  // PNSD file; empty means generate from `synthetic`
  SyntheticSpec synthetic;
  Hyperparams hp;
  /// A number a0 gives the step schedule (a0, 10 a0, 100 a0 at 50% and 75%),
  /// an explicit "first-last:alpha,..." list is used as is, and "auto"
  /// (certify only) means 10 * L_est.
  std::string alpha = "10";
  std::uint64_t seed = 1;
  Variant variant = Variant::kProximal;
  bool diagnostics = false;
  /// After a proximal run, set gamma_i = 0 wherever xi_i == 0.
  bool adopt_support = true;
  std::string resume;  // checkpoint to continue from
  int stop_after = 0;  // > 0: stop (and checkpoint) after this epoch
  std::filesystem::path out = "run";

  // certify
  std::size_t lipschitz_samples = 20;
  double lipschitz_radius = 1e-2;
  int min_epochs = 100;
  std::size_t window = 10;
  double tol_step = 1e-5;
  double tol_w = 1e-4;

  /// Resolves `alpha` into hp.schedule for hp.epochs epochs. "auto" is left
  /// to the caller.
  void resolve_schedule();
  /// Flat "key = value" lines for every field, in a fixed order.
  std::string to_text() const;
};

Dataset load_or_generate(const RunConfig& cfg);
Network build_network(const RunConfig& cfg, InputShape input, std::size_t classes);

int cmd_gen_data(const SyntheticSpec& spec, const std::filesystem::path& out, std::ostream& log);
int cmd_train(const RunConfig& cfg, std::ostream& log);
int cmd_certify(const RunConfig& cfg, std::ostream& log);
int cmd_prune(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
              const std::filesystem::path& out, double epsilon, std::uint64_t seed,
              std::ostream& log);
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
             std::ostream& log);
int cmd_finetune(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                 int epochs, double alpha, std::size_t batch_size,
                 const std::filesystem::path& out, std::ostream& log);
/// Trains every (lambda, beta) pair of the grid into out/lambda_<l>_beta_<b>,
/// up to `threads` at a time, and writes out/sweep.jsonl in grid order.
int cmd_sweep(const RunConfig& base, const std::vector<double>& lambdas,
              const std::vector<double>& betas, unsigned threads, std::ostream& log);

/// Entry point of the command-line tool.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace proxslim
