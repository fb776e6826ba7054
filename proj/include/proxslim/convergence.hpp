#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "proxslim/objective.hpp"
#include "proxslim/optimizer.hpp"
#include "proxslim/state.hpp"

namespace proxslim {

/// lambda * ||xi||_1 + (beta/2) * ||gamma - xi||^2.
double penalty_value(const ModelState& z, double lambda, double beta);

/// F(W, gamma, xi) = loss(W, gamma) + lambda * ||xi||_1 + (beta/2) * ||gamma - xi||^2,
/// with the loss taken over the full dataset.
double eval_F(const Objective& objective, const ModelState& z, double lambda, double beta);

/// Largest observed ratio ||grad(Z_a) - grad(Z_b)|| / ||Z_a - Z_b|| over `samples`
/// pairs Z_a,b = Z +/- (radius/2) u with u a unit direction in (W, gamma).
/// The first u is random and each later u is the previous pair's gradient
/// difference, so the pairs follow a power iteration on the Hessian instead
/// of sampling typical (much flatter) directions. Gradients are full batch.
/// The result is a lower bound on the local constant.
double estimate_lipschitz(const Objective& objective, const ModelState& z, std::size_t samples,
                          double radius, std::uint64_t seed);

struct EpochDiagnostics {
  int epoch = 0;
  double alpha = 0.0;
  double F_value = 0.0;       // F(Z^t)
  double F_next = 0.0;        // F(Z^{t+1})
  double step_norm_sq = 0.0;  // ||Z^{t+1} - Z^t||^2
  double L_estimate = 0.0;
  double decrease_lhs = 0.0;  // F(Z^{t+1}) - F(Z^t)
  double decrease_rhs = 0.0;  // ((L - alpha)/2) ||Z^{t+1} - Z^t||^2
  double relerr_w_norm = 0.0;
  double relerr_bound = 0.0;  // (3 alpha + 2 L + beta) ||Z^{t+1} - Z^t||
  std::size_t zero_gamma_count = 0;
  std::size_t zero_xi_count = 0;
  double grad_norm_surrogate = 0.0;  // ||w^{t+1}||
  double state_norm = 0.0;           // ||Z^{t+1}||
};

struct SufficientDecreaseEntry {
  int epoch = 0;
  double residual = 0.0;   // lhs - rhs
  double tolerance = 0.0;  // rel_tol * (1 + |F(Z^t)|)
  bool violation = false;
};

/// Residuals of the sufficient-decrease inequality for a deterministic run.
/// Throws ModeError unless hp is full batch with momentum and weight decay off.
std::vector<SufficientDecreaseEntry> check_sufficient_decrease(
    std::span<const EpochDiagnostics> diags, const Hyperparams& hp, double rel_tol = 1e-8);

/// w^{t+1} = (w1, w2, w3), an element of the limiting subdifferential of F at Z^{t+1}:
///   w1 = g_W(t+1) - g_W(t) - alpha (W^{t+1} - W^t)
///   w2 = g_gamma(t+1) - g_gamma(t) - alpha (gamma^{t+1} - gamma^t) - beta (xi^{t+1} - xi^t)
///   w3 = -alpha (xi^{t+1} - xi^t)
struct RelativeErrorTerms {
  std::vector<double> w1;
  std::vector<double> w2;
  std::vector<double> w3;
  double norm = 0.0;
  double bound = 0.0;  // (3 alpha + 2 L + beta) ||Z^{t+1} - Z^t||
};

/// Evaluates both full-batch gradients itself.
RelativeErrorTerms relative_error_terms(const Objective& objective, const ModelState& prev,
                                        const ModelState& next, double alpha, double beta,
                                        double lipschitz);

/// Same construction from gradients the caller already has.
RelativeErrorTerms relative_error_from_gradients(const LossEvaluation& at_prev,
                                                 const LossEvaluation& at_next,
                                                 const ModelState& prev, const ModelState& next,
                                                 double alpha, double beta, double lipschitz);

struct ConvergenceVerdict {
  bool converged = false;
  std::size_t window = 0;
  int first_epoch = 0;  // start of the qualifying window, 0 if none
  double limiting_F = 0.0;
  double max_step_norm = 0.0;  // over the trailing window
  double max_w_norm = 0.0;
  bool norm_growing = false;  // ||Z|| grew over the last half of the run by more than 10%
};

/// Converged when ||Z^{t+1} - Z^t|| < tol_step and ||w^{t+1}|| < tol_w on each of
/// the last `window` epochs.
ConvergenceVerdict critical_point_monitor(std::span<const EpochDiagnostics> diags,
                                          std::size_t window, double tol_step, double tol_w);
inline ConvergenceVerdict critical_point_monitor(std::span<const EpochDiagnostics> diags,
                                                 std::size_t window, double tol) {
  return critical_point_monitor(diags, window, tol, tol);
}

/// Share of sum_t ||Z^{t+1} - Z^t||^2 contributed by the last `tail` of the epochs.
double tail_step_fraction(std::span<const EpochDiagnostics> diags, double tail = 0.25);

struct FdOptions {
  double step = 1e-5;
  /// Denominator floor for the relative error, so coordinates whose exact
  /// gradient vanishes are compared on an absolute scale.
  double floor = 1e-6;
  /// For piecewise-smooth losses (ReLU, max pooling): skip probes whose
  /// stencil may straddle a kink. A kink inside [x - h, x + h] perturbs the
  /// central difference by at most h * |d2| / 2, d2 the second difference, so
  /// a probe is redrawn when that exceeds kink_fraction * max(|fd|, floor).
  /// Smooth losses do not need it and it would discard high-curvature probes.
  bool reject_kinks = false;
  double kink_fraction = 1e-5;
  std::size_t max_attempts_per_probe = 20;
};

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::size_t rejected = 0;
  std::size_t worst_coordinate = 0;  // index into (W, gamma), gamma after W
};

/// Compares the analytic full-batch gradient against central differences on
/// random coordinates of (W, gamma).
FdReport fd_gradient_check(const Objective& objective, const ModelState& z, std::size_t probes,
                           std::uint64_t seed, const FdOptions& options = {});

/// lambda ||xi||_1 + (alpha/2) ||xi - xi_prev||^2 + (beta/2) ||gamma_next - xi||^2.
double xi_subproblem_value(const XiUpdateRecord& record, std::span<const double> xi);

struct XiOptimalityReport {
  double chosen = 0.0;
  double best_candidate = 0.0;
  std::size_t candidates = 0;
  /// Candidates below the chosen value by more than 1e-12 * (1 + chosen),
  /// a margin for rounding in the evaluation itself.
  std::size_t beaten_by = 0;
};

/// Random candidates: with equal probability a Gaussian perturbation of the
/// chosen xi (scale 10^U[-6,0]), a point near the averaged input, or a copy
/// of the chosen xi with random coordinates zeroed.
XiOptimalityReport check_xi_optimality(const XiUpdateRecord& record, std::size_t candidates,
                                       std::uint64_t seed);

struct CertifyOptions {
  double lipschitz = 0.0;  // L_est used in both bounds
  int min_epochs = 100;
  int max_epochs = 300;
  std::size_t window = 10;
  double tol_step = 1e-5;
  double tol_w = 1e-4;
  double rel_tol = 1e-8;
  bool stop_when_converged = true;
};

struct CertifyResult {
  ModelState final_state;
  std::vector<EpochDiagnostics> diagnostics;
  std::vector<SufficientDecreaseEntry> decrease;
  std::size_t decrease_violations = 0;
  std::size_t relerr_violations = 0;
  bool w3_exact = true;  // w3 == -alpha * (xi^{t+1} - xi^t) bit for bit on every epoch
  ConvergenceVerdict verdict;
};

/// Deterministic full-batch proximal run with per-epoch diagnostics. Runs at
/// least min_epochs and stops at the first epoch >= min_epochs where the
/// monitor reports convergence (if requested), or at max_epochs.
CertifyResult certify_run(const Objective& objective, const ModelState& z0,
                          const Hyperparams& hp, const CertifyOptions& options,
                          const std::function<void(const EpochDiagnostics&)>& on_epoch = {},
                          const EpochHooks& hooks = {});

}  // namespace proxslim
