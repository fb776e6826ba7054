#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "proxslim/network.hpp"
#include "proxslim/objective.hpp"
#include "proxslim/state.hpp"

namespace proxslim {

/// alpha is the reciprocal learning rate; each phase covers an inclusive
/// 1-based epoch range.
struct AlphaPhase {
  int first_epoch = 1;
  int last_epoch = 1;
  double alpha = 10.0;
  bool operator==(const AlphaPhase&) const = default;
};

struct AlphaSchedule {
  std::vector<AlphaPhase> phases;

  double alpha_at(int epoch) const;
  /// Throws ContractError unless the phases are contiguous, cover 1..epochs
  /// and every alpha is positive.
  void validate(int epochs) const;

  /// alpha0 for the first half, 10*alpha0 until 75%, then 100*alpha0.
  static AlphaSchedule step(double alpha0, int epochs);
  static AlphaSchedule constant(double alpha, int epochs);
  /// "1-80:10,81-120:100,121-160:1000"
  static AlphaSchedule parse(const std::string& text);
  std::string to_string() const;
  bool operator==(const AlphaSchedule&) const = default;
};

enum class BatchMode { kStochastic, kFullBatch };
enum class XiUpdate { kPerEpoch, kPerBatch };

struct Hyperparams {
  double lambda = 0.0045;
  double beta = 100.0;
  AlphaSchedule schedule = AlphaSchedule::step(10.0, 160);
  int epochs = 160;
  std::size_t batch_size = 64;
  double momentum = 0.0;       // 0 = plain SGD
  double weight_decay = 0.0;   // on the loss gradients of W and gamma
  XiUpdate xi_update = XiUpdate::kPerEpoch;
  BatchMode mode = BatchMode::kStochastic;

  /// lambda, beta >= 0 (zero allowed for reduction checks), momentum in [0,1),
  /// batch size positive, schedule covering 1..epochs.
  void validate() const;
};

/// Mutable optimizer-side state carried across epochs (and into checkpoints).
struct OptimizerState {
  std::vector<double> velocity_w;
  std::vector<double> velocity_gamma;
  std::mt19937_64 rng;

  explicit OptimizerState(std::uint64_t seed = 0) : rng(seed) {}
  bool operator==(const OptimizerState&) const = default;
};

/// Inputs and output of one xi proximal step, for external verification.
struct XiUpdateRecord {
  int epoch = 0;
  double alpha = 0.0;
  double beta = 0.0;
  double lambda = 0.0;
  std::vector<double> xi_prev;
  std::vector<double> gamma_next;
  std::vector<double> xi_next;
};

struct EpochHooks {
  std::function<void(const XiUpdateRecord&)> on_xi_update;
};

struct EpochStats {
  double mean_batch_loss = 0.0;
  std::size_t batches = 0;
};

/// Elementwise sign(x) * max(0, |x| - t). Entries with |x| <= t become exactly 0.0.
std::vector<double> soft_threshold(std::span<const double> x, double t);

/// W = fan-in scaled uniform noise (BN shifts zero), gamma = 0.5 everywhere,
/// xi ~ Unif[0.47, 0.50], running mean 0 and variance 1.
ModelState init_state(const Network& net, std::uint64_t seed);

/// Sample order for one epoch: a seeded shuffle split into batches, or a
/// single batch with every sample in order for full-batch mode.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t samples, const Hyperparams& hp,
                                                    std::mt19937_64& rng);

/// One epoch of proximal network slimming.
///
/// Per batch:  W     <- W - (1/alpha) g_W
///             gamma <- (alpha*gamma + beta*xi)/(alpha+beta) - g_gamma/(alpha+beta)
/// Per epoch (or per batch with XiUpdate::kPerBatch):
///             xi    <- S((alpha*xi + beta*gamma)/(alpha+beta), lambda/(alpha+beta))
///
/// The gamma step is evaluated as gamma - (g_gamma + beta*(gamma - xi))/(alpha+beta),
/// which is the same map and collapses to plain gradient descent bit for bit when
/// beta = 0. Momentum, when enabled, accumulates g_W and g_gamma only; the
/// coupling term beta*(gamma - xi) never enters the velocity.
ModelState prox_ns_epoch(const Objective& objective, const ModelState& z, const Hyperparams& hp,
                         int epoch, OptimizerState& opt, const EpochHooks& hooks = {},
                         EpochStats* stats = nullptr);

/// Subgradient baseline: gamma <- gamma - delta (g_gamma + lambda * zeta), with
/// zeta_i = sign(gamma_i) and zeta_i = 0 where gamma_i == 0. delta = 1/alpha.
/// xi is carried through untouched.
ModelState subgradient_ns_epoch(const Objective& objective, const ModelState& z,
                                const Hyperparams& hp, int epoch, OptimizerState& opt,
                                EpochStats* stats = nullptr);

/// Plain (momentum) SGD on W and gamma with step 1/alpha and no sparsity terms.
ModelState sgd_epoch(const Objective& objective, const ModelState& z, const Hyperparams& hp,
                     int epoch, OptimizerState& opt, EpochStats* stats = nullptr);

/// Retraining without the l1 term or the coupling penalty. Calls `on_epoch`
/// after every epoch with the epoch number and the current state.
ModelState fine_tune(const Objective& objective, const ModelState& z, const Hyperparams& hp,
                     int epochs, OptimizerState& opt,
                     const std::function<void(int, const ModelState&, const EpochStats&)>&
                         on_epoch = {});

/// Sets gamma_i = 0.0 for every channel whose xi_i is exactly zero and returns
/// how many channels that affected. The trained iterate keeps gamma within
/// about lambda/beta of zero on those channels; this moves them onto the
/// sparse support found by the proximal step.
std::size_t adopt_xi_support(ModelState& z);

}  // namespace proxslim
