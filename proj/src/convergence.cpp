#include "proxslim/convergence.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <random>

#include "proxslim/errors.hpp"

namespace proxslim {

namespace {

double sum_sq(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

// Coordinate k of the stacked (W, gamma) vector.
double& coordinate(ModelState& z, std::size_t k) {
  return k < z.w.size() ? z.w[k] : z.gamma[k - z.w.size()];
}

double gradient_at(const LossEvaluation& e, std::size_t k) {
  return k < e.grad_w.size() ? e.grad_w[k] : e.grad_gamma[k - e.grad_w.size()];
}

void require_matching(const ModelState& a, const ModelState& b) {
  require_consistent(a);
  require_consistent(b);
  if (a.w.size() != b.w.size() || a.gamma.size() != b.gamma.size()) {
    throw ContractError("consecutive states have different shapes");
  }
}

}  // namespace

double penalty_value(const ModelState& z, double lambda, double beta) {
  require_consistent(z);
  double l1 = 0.0, gap = 0.0;
  for (std::size_t i = 0; i < z.xi.size(); ++i) {
    l1 += std::abs(z.xi[i]);
    const double d = z.gamma[i] - z.xi[i];
    gap += d * d;
  }
  return lambda * l1 + 0.5 * beta * gap;
}

double eval_F(const Objective& objective, const ModelState& z, double lambda, double beta) {
  return objective.full_batch(z, false).loss + penalty_value(z, lambda, beta);
}

double estimate_lipschitz(const Objective& objective, const ModelState& z, std::size_t samples,
                          double radius, std::uint64_t seed) {
  if (samples < 1) throw ContractError("estimate_lipschitz: need at least one pair");
  if (!(radius > 0)) throw ContractError("estimate_lipschitz: radius must be positive");
  require_consistent(z);
  const std::size_t n = z.w.size() + z.gamma.size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double best = 0.0;
  std::vector<double> u(n);
  for (double& x : u) x = gauss(rng);
  for (std::size_t s = 0; s < samples; ++s) {
    const double norm = std::sqrt(sum_sq(u));
    ModelState a = z, b = z;
    for (std::size_t k = 0; k < n; ++k) {
      const double d = 0.5 * radius * u[k] / norm;
      coordinate(a, k) += d;
      coordinate(b, k) -= d;
    }
    const LossEvaluation ga = objective.full_batch(a, true);
    const LossEvaluation gb = objective.full_batch(b, true);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double dg = gradient_at(ga, k) - gradient_at(gb, k);
      const double dz = coordinate(a, k) - coordinate(b, k);
      num += dg * dg;
      den += dz * dz;
      u[k] = dg;
    }
    if (den > 0) best = std::max(best, std::sqrt(num / den));
    // The gradient difference is a Hessian-vector product; following it is a
    // power iteration toward the stiffest direction. Restart from a random
    // direction when it vanishes (flat objective).
    if (!(sum_sq(u) > 0)) {
      for (double& x : u) x = gauss(rng);
    }
  }
  return best;
}

std::vector<SufficientDecreaseEntry> check_sufficient_decrease(
    std::span<const EpochDiagnostics> diags, const Hyperparams& hp, double rel_tol) {
  if (hp.mode != BatchMode::kFullBatch) {
    throw ModeError("sufficient decrease is only defined for exact (full-batch) gradients");
  }
  if (hp.momentum != 0.0 || hp.weight_decay != 0.0) {
    throw ModeError("sufficient decrease needs momentum and weight decay off");
  }
  std::vector<SufficientDecreaseEntry> out;
  out.reserve(diags.size());
  for (const EpochDiagnostics& d : diags) {
    SufficientDecreaseEntry e;
    e.epoch = d.epoch;
    e.residual = d.decrease_lhs - d.decrease_rhs;
    e.tolerance = rel_tol * (1.0 + std::abs(d.F_value));
    e.violation = e.residual > e.tolerance;
    out.push_back(e);
  }
  return out;
}

RelativeErrorTerms relative_error_from_gradients(const LossEvaluation& at_prev,
                                                 const LossEvaluation& at_next,
                                                 const ModelState& prev, const ModelState& next,
                                                 double alpha, double beta, double lipschitz) {
  require_matching(prev, next);
  if (at_prev.grad_w.size() != prev.w.size() || at_next.grad_w.size() != prev.w.size() ||
      at_prev.grad_gamma.size() != prev.gamma.size() ||
      at_next.grad_gamma.size() != prev.gamma.size()) {
    throw ContractError("gradients do not match the state shapes");
  }
  RelativeErrorTerms r;
  r.w1.resize(prev.w.size());
  for (std::size_t i = 0; i < r.w1.size(); ++i) {
    r.w1[i] = at_next.grad_w[i] - at_prev.grad_w[i] - alpha * (next.w[i] - prev.w[i]);
  }
  const std::size_t c = prev.gamma.size();
  r.w2.resize(c);
  r.w3.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    r.w2[i] = at_next.grad_gamma[i] - at_prev.grad_gamma[i] -
              alpha * (next.gamma[i] - prev.gamma[i]) - beta * (next.xi[i] - prev.xi[i]);
    r.w3[i] = -alpha * (next.xi[i] - prev.xi[i]);
  }
  r.norm = std::sqrt(sum_sq(r.w1) + sum_sq(r.w2) + sum_sq(r.w3));
  r.bound = (3.0 * alpha + 2.0 * lipschitz + beta) * std::sqrt(distance_sq(next, prev));
  return r;
}

RelativeErrorTerms relative_error_terms(const Objective& objective, const ModelState& prev,
                                        const ModelState& next, double alpha, double beta,
                                        double lipschitz) {
  require_matching(prev, next);
  return relative_error_from_gradients(objective.full_batch(prev, true),
                                       objective.full_batch(next, true), prev, next, alpha, beta,
                                       lipschitz);
}

ConvergenceVerdict critical_point_monitor(std::span<const EpochDiagnostics> diags,
                                          std::size_t window, double tol_step, double tol_w) {
  ConvergenceVerdict v;
  v.window = window;
  if (diags.empty()) return v;
  v.limiting_F = diags.back().F_next;

  const std::size_t half = diags.size() / 2;
  const double early = diags[half].state_norm;
  v.norm_growing = diags.size() >= 4 && diags.back().state_norm > 1.1 * early;

  if (window == 0 || diags.size() < window) return v;
  const auto tail = diags.subspan(diags.size() - window);
  bool ok = true;
  for (const EpochDiagnostics& d : tail) {
    const double step = std::sqrt(d.step_norm_sq);
    v.max_step_norm = std::max(v.max_step_norm, step);
    v.max_w_norm = std::max(v.max_w_norm, d.grad_norm_surrogate);
    // Written as !(x < tol) so that NaN never counts as converged.
    if (!(step < tol_step) || !(d.grad_norm_surrogate < tol_w)) ok = false;
  }
  v.converged = ok;
  v.first_epoch = ok ? tail.front().epoch : 0;
  return v;
}

double tail_step_fraction(std::span<const EpochDiagnostics> diags, double tail) {
  if (diags.empty()) return 0.0;
  const auto start = diags.size() - static_cast<std::size_t>(std::ceil(tail * diags.size()));
  double total = 0.0, late = 0.0;
  for (std::size_t i = 0; i < diags.size(); ++i) {
    total += diags[i].step_norm_sq;
    if (i >= start) late += diags[i].step_norm_sq;
  }
  return total > 0 ? late / total : 0.0;
}

FdReport fd_gradient_check(const Objective& objective, const ModelState& z, std::size_t probes,
                           std::uint64_t seed, const FdOptions& options) {
  if (probes < 1) throw ContractError("fd_gradient_check: need at least one probe");
  require_consistent(z);
  const std::size_t n = z.w.size() + z.gamma.size();
  if (n == 0) throw ContractError("fd_gradient_check: empty parameter vector");

  const LossEvaluation analytic = objective.full_batch(z, true);
  const double f0 = analytic.loss;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const double h = options.step;

  FdReport report;
  ModelState probe = z;
  const std::size_t budget = probes * std::max<std::size_t>(1, options.max_attempts_per_probe);
  for (std::size_t attempt = 0; attempt < budget && report.probes < probes; ++attempt) {
    const std::size_t k = pick(rng);
    const double x = coordinate(probe, k);
    coordinate(probe, k) = x + h;
    const double fp = objective.full_batch(probe, false).loss;
    coordinate(probe, k) = x - h;
    const double fm = objective.full_batch(probe, false).loss;
    coordinate(probe, k) = x;

    const double fd = (fp - fm) / (2.0 * h);
    const double scale = std::max(std::abs(fd), options.floor);
    if (options.reject_kinks) {
      const double d2 = (fp - 2.0 * f0 + fm) / (h * h);
      if (0.5 * h * std::abs(d2) > options.kink_fraction * scale) {
        ++report.rejected;
        continue;
      }
    }
    const double a = gradient_at(analytic, k);
    const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), options.floor});
    if (report.probes == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_coordinate = k;
    }
    ++report.probes;
  }
  return report;
}

double xi_subproblem_value(const XiUpdateRecord& r, std::span<const double> xi) {
  if (xi.size() != r.xi_prev.size() || r.gamma_next.size() != r.xi_prev.size()) {
    throw ContractError("xi candidate does not match the update record");
  }
  double l1 = 0.0, prox = 0.0, gap = 0.0;
  for (std::size_t i = 0; i < xi.size(); ++i) {
    l1 += std::abs(xi[i]);
    const double a = xi[i] - r.xi_prev[i];
    const double b = r.gamma_next[i] - xi[i];
    prox += a * a;
    gap += b * b;
  }
  return r.lambda * l1 + 0.5 * r.alpha * prox + 0.5 * r.beta * gap;
}

XiOptimalityReport check_xi_optimality(const XiUpdateRecord& r, std::size_t candidates,
                                       std::uint64_t seed) {
  XiOptimalityReport rep;
  rep.chosen = xi_subproblem_value(r, r.xi_next);
  rep.candidates = candidates;
  const std::size_t c = r.xi_next.size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double margin = 1e-12 * (1.0 + std::abs(rep.chosen));
  std::vector<double> cand(c);
  rep.best_candidate = std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < candidates; ++n) {
    const std::size_t kind = n % 3;
    const double scale = std::pow(10.0, -6.0 * unit(rng));
    for (std::size_t i = 0; i < c; ++i) {
      switch (kind) {
        case 0: cand[i] = r.xi_next[i] + scale * gauss(rng); break;
        case 1: {
          const double avg = (r.alpha * r.xi_prev[i] + r.beta * r.gamma_next[i]) / (r.alpha + r.beta);
          cand[i] = avg + scale * gauss(rng);
          break;
        }
        default: cand[i] = unit(rng) < 0.5 ? 0.0 : r.xi_next[i] + scale * gauss(rng); break;
      }
    }
    const double v = xi_subproblem_value(r, cand);
    rep.best_candidate = std::min(rep.best_candidate, v);
    if (v < rep.chosen - margin) ++rep.beaten_by;
  }
  return rep;
}

CertifyResult certify_run(const Objective& objective, const ModelState& z0,
                          const Hyperparams& hp, const CertifyOptions& options,
                          const std::function<void(const EpochDiagnostics&)>& on_epoch,
                          const EpochHooks& hooks) {
  if (options.min_epochs < 1 || options.max_epochs < options.min_epochs) {
    throw ContractError("certify_run: need 1 <= min_epochs <= max_epochs");
  }
  if (hp.mode != BatchMode::kFullBatch || hp.momentum != 0.0 || hp.weight_decay != 0.0) {
    throw ModeError("certification needs full-batch gradients with momentum and weight decay off");
  }
  if (hp.epochs < options.max_epochs) {
    throw ContractError("certify_run: schedule shorter than max_epochs");
  }
  hp.validate();

  CertifyResult res;
  OptimizerState opt(0);
  ModelState cur = z0;
  LossEvaluation at_cur = objective.full_batch(cur, true);
  double F_cur = at_cur.loss + penalty_value(cur, hp.lambda, hp.beta);

  for (int t = 1; t <= options.max_epochs; ++t) {
    const double alpha = hp.schedule.alpha_at(t);
    ModelState next = prox_ns_epoch(objective, cur, hp, t, opt, hooks);
    LossEvaluation at_next = objective.full_batch(next, true);
    const double F_next = at_next.loss + penalty_value(next, hp.lambda, hp.beta);
    if (!std::isfinite(F_next)) throw NumericError("F is not finite", t);

    EpochDiagnostics d;
    d.epoch = t;
    d.alpha = alpha;
    d.F_value = F_cur;
    d.F_next = F_next;
    d.step_norm_sq = distance_sq(next, cur);
    d.L_estimate = options.lipschitz;
    d.decrease_lhs = F_next - F_cur;
    d.decrease_rhs = 0.5 * (options.lipschitz - alpha) * d.step_norm_sq;

    const RelativeErrorTerms w = relative_error_from_gradients(at_cur, at_next, cur, next, alpha,
                                                               hp.beta, options.lipschitz);
    d.relerr_w_norm = w.norm;
    d.relerr_bound = w.bound;
    d.grad_norm_surrogate = w.norm;
    for (std::size_t i = 0; i < w.w3.size(); ++i) {
      const double expect = -alpha * (next.xi[i] - cur.xi[i]);
      if (std::bit_cast<std::uint64_t>(expect) != std::bit_cast<std::uint64_t>(w.w3[i])) {
        res.w3_exact = false;
      }
    }
    if (w.norm > w.bound) ++res.relerr_violations;
    d.zero_gamma_count = count_exact_zeros(next.gamma);
    d.zero_xi_count = count_exact_zeros(next.xi);
    d.state_norm = state_norm(next);
    res.diagnostics.push_back(d);
    if (on_epoch) on_epoch(d);

    cur = std::move(next);
    at_cur = std::move(at_next);
    F_cur = F_next;

    if (options.stop_when_converged && t >= options.min_epochs &&
        critical_point_monitor(res.diagnostics, options.window, options.tol_step, options.tol_w)
            .converged) {
      break;
    }
  }
  res.decrease = check_sufficient_decrease(res.diagnostics, hp, options.rel_tol);
  res.decrease_violations = static_cast<std::size_t>(std::count_if(
      res.decrease.begin(), res.decrease.end(), [](const auto& e) { return e.violation; }));
  res.verdict =
      critical_point_monitor(res.diagnostics, options.window, options.tol_step, options.tol_w);
  res.final_state = std::move(cur);
  return res;
}

}  // namespace proxslim
