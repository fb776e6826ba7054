#include "proxslim/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "proxslim/errors.hpp"

namespace proxslim {

double AlphaSchedule::alpha_at(int epoch) const {
  for (const AlphaPhase& p : phases) {
    if (epoch >= p.first_epoch && epoch <= p.last_epoch) return p.alpha;
  }
  throw ContractError("alpha schedule does not cover epoch " + std::to_string(epoch));
}

void AlphaSchedule::validate(int epochs) const {
  int next = 1;
  for (const AlphaPhase& p : phases) {
    if (!(p.alpha > 0) || !std::isfinite(p.alpha)) {
      throw ContractError("alpha must be positive and finite");
    }
    if (p.first_epoch != next || p.last_epoch < p.first_epoch) {
      throw ContractError("alpha schedule phases must be contiguous starting at epoch 1");
    }
    next = p.last_epoch + 1;
  }
  if (epochs > 0 && next <= epochs) {
    throw ContractError("alpha schedule ends at epoch " + std::to_string(next - 1) +
                        " but training runs " + std::to_string(epochs) + " epochs");
  }
}

AlphaSchedule AlphaSchedule::step(double alpha0, int epochs) {
  AlphaSchedule s;
  if (epochs < 4) {
    s.phases.push_back({1, std::max(1, epochs), alpha0});
    return s;
  }
  const int half = epochs / 2;
  const int three_quarters = (3 * epochs) / 4;
  if (half >= 1) s.phases.push_back({1, half, alpha0});
  if (three_quarters > half) s.phases.push_back({half + 1, three_quarters, 10.0 * alpha0});
  if (epochs > three_quarters) {
    s.phases.push_back({three_quarters + 1, epochs, 100.0 * alpha0});
  }
  return s;
}

AlphaSchedule AlphaSchedule::constant(double alpha, int epochs) {
  return AlphaSchedule{{{1, std::max(1, epochs), alpha}}};
}

AlphaSchedule AlphaSchedule::parse(const std::string& text) {
  AlphaSchedule s;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    AlphaPhase p;
    char dash = 0, colon = 0;
    std::istringstream is(item);
    if (!(is >> p.first_epoch >> dash >> p.last_epoch >> colon >> p.alpha) || dash != '-' ||
        colon != ':') {
      throw ContractError("malformed alpha schedule entry '" + item + "' (want first-last:alpha)");
    }
    s.phases.push_back(p);
  }
  if (s.phases.empty()) throw ContractError("empty alpha schedule");
  return s;
}

std::string AlphaSchedule::to_string() const {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < phases.size(); ++i) {
    if (i) out << ',';
    out << phases[i].first_epoch << '-' << phases[i].last_epoch << ':' << phases[i].alpha;
  }
  return out.str();
}

void Hyperparams::validate() const {
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ContractError("lambda must be >= 0");
  if (!(beta >= 0) || !std::isfinite(beta)) throw ContractError("beta must be >= 0");
  if (epochs < 0) throw ContractError("epochs must be >= 0");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ContractError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0)) throw ContractError("weight decay must be >= 0");
  schedule.validate(epochs);
}

std::vector<double> soft_threshold(std::span<const double> x, double t) {
  if (!(t >= 0)) throw ContractError("soft_threshold: threshold must be nonnegative");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double mag = std::abs(x[i]) - t;
    out[i] = mag > 0 ? std::copysign(mag, x[i]) : 0.0;
  }
  return out;
}

ModelState init_state(const Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelState z;
  z.w.assign(net.weight_count(), 0.0);
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const LayerParams& p = net.params(i);
    for (const auto* block : {&p.weight, &p.bias}) {
      if (!*block || (*block)->fan_in == 0) continue;  // BN shifts stay at zero
      const double bound = 1.0 / std::sqrt(static_cast<double>((*block)->fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (std::size_t k = 0; k < (*block)->size(); ++k) z.w[(*block)->offset + k] = dist(rng);
    }
  }
  const std::size_t c = net.channel_count();
  z.gamma.assign(c, 0.5);
  std::uniform_real_distribution<double> xi_dist(0.47, 0.50);
  z.xi.resize(c);
  for (double& v : z.xi) v = xi_dist(rng);
  z.running_mean.assign(c, 0.0);
  z.running_var.assign(c, 1.0);
  return z;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t samples, const Hyperparams& hp,
                                                    std::mt19937_64& rng) {
  std::vector<std::size_t> order(samples);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::vector<std::size_t>> batches;
  if (hp.mode == BatchMode::kFullBatch) {
    batches.push_back(std::move(order));
    return batches;
  }
  // Fisher-Yates driven directly by the engine so the order does not depend
  // on the standard library's distribution implementation.
  for (std::size_t i = samples; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  for (std::size_t start = 0; start < samples; start += hp.batch_size) {
    const std::size_t end = std::min(samples, start + hp.batch_size);
    // A trailing batch of one sample cannot feed train-mode batch norm.
    if (end - start < 2 && !batches.empty()) {
      batches.back().insert(batches.back().end(), order.begin() + static_cast<std::ptrdiff_t>(start),
                            order.begin() + static_cast<std::ptrdiff_t>(end));
      break;
    }
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

namespace {

enum class StepKind { kProximal, kSubgradient, kPlain };

void require_finite_grad(const LossEvaluation& e, int epoch, std::size_t batch) {
  auto bad = [](const std::vector<double>& v) {
    return std::any_of(v.begin(), v.end(), [](double x) { return !std::isfinite(x); });
  };
  if (!std::isfinite(e.loss) || bad(e.grad_w) || bad(e.grad_gamma)) {
    throw NumericError("non-finite loss or gradient at epoch " + std::to_string(epoch) +
                       ", batch " + std::to_string(batch),
                       epoch, static_cast<std::int64_t>(batch));
  }
}

void xi_prox_step(ModelState& z, double alpha, double beta, double lambda, int epoch,
                  const EpochHooks& hooks) {
  const double denom = alpha + beta;
  std::vector<double> avg(z.xi.size());
  for (std::size_t i = 0; i < avg.size(); ++i) {
    avg[i] = (alpha * z.xi[i] + beta * z.gamma[i]) / denom;
  }
  std::vector<double> next = soft_threshold(avg, lambda / denom);
  if (hooks.on_xi_update) {
    hooks.on_xi_update(XiUpdateRecord{epoch, alpha, beta, lambda, z.xi, z.gamma, next});
  }
  z.xi = std::move(next);
}

ModelState gradient_epoch(StepKind kind, const Objective& objective, const ModelState& z0,
                          const Hyperparams& hp, int epoch, OptimizerState& opt,
                          const EpochHooks& hooks, EpochStats* stats) {
  hp.validate();
  require_consistent(z0);
  if (z0.w.size() != objective.weight_count() || z0.gamma.size() != objective.channel_count()) {
    throw ContractError("model state does not match the objective");
  }
  const double alpha = hp.schedule.alpha_at(epoch);
  const double beta = kind == StepKind::kProximal ? hp.beta : 0.0;
  const double w_step = 1.0 / alpha;
  const double gamma_step = 1.0 / (alpha + beta);
  const bool use_momentum = hp.momentum > 0;
  if (use_momentum) {
    opt.velocity_w.resize(z0.w.size(), 0.0);
    opt.velocity_gamma.resize(z0.gamma.size(), 0.0);
  }

  ModelState z = z0;
  const auto batches = epoch_batches(objective.sample_count(), hp, opt.rng);
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const LossEvaluation e = objective.evaluate(z, batches[b], true);
    require_finite_grad(e, epoch, b);
    loss_sum += e.loss;

    std::vector<double> gw = e.grad_w;
    std::vector<double> gg = e.grad_gamma;
    if (hp.weight_decay > 0) {
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += hp.weight_decay * z.w[i];
      for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += hp.weight_decay * z.gamma[i];
    }
    if (kind == StepKind::kSubgradient) {
      for (std::size_t i = 0; i < gg.size(); ++i) {
        const double zeta = z.gamma[i] > 0 ? 1.0 : (z.gamma[i] < 0 ? -1.0 : 0.0);
        gg[i] += hp.lambda * zeta;
      }
    }
    if (use_momentum) {
      for (std::size_t i = 0; i < gw.size(); ++i) {
        opt.velocity_w[i] = hp.momentum * opt.velocity_w[i] + gw[i];
        gw[i] = opt.velocity_w[i];
      }
      for (std::size_t i = 0; i < gg.size(); ++i) {
        opt.velocity_gamma[i] = hp.momentum * opt.velocity_gamma[i] + gg[i];
        gg[i] = opt.velocity_gamma[i];
      }
    }

    for (std::size_t i = 0; i < z.w.size(); ++i) z.w[i] -= w_step * gw[i];
    if (kind == StepKind::kProximal) {
      for (std::size_t i = 0; i < z.gamma.size(); ++i) {
        z.gamma[i] -= gamma_step * (gg[i] + beta * (z.gamma[i] - z.xi[i]));
      }
    } else {
      for (std::size_t i = 0; i < z.gamma.size(); ++i) z.gamma[i] -= gamma_step * gg[i];
    }
    objective.update_running_stats(z, e);

    if (kind == StepKind::kProximal && hp.xi_update == XiUpdate::kPerBatch) {
      xi_prox_step(z, alpha, beta, hp.lambda, epoch, hooks);
    }
  }
  if (kind == StepKind::kProximal && hp.xi_update == XiUpdate::kPerEpoch) {
    xi_prox_step(z, alpha, beta, hp.lambda, epoch, hooks);
  }
  if (stats) {
    stats->batches = batches.size();
    stats->mean_batch_loss = loss_sum / static_cast<double>(batches.size());
  }
  return z;
}

}  // namespace

ModelState prox_ns_epoch(const Objective& objective, const ModelState& z, const Hyperparams& hp,
                         int epoch, OptimizerState& opt, const EpochHooks& hooks,
                         EpochStats* stats) {
  return gradient_epoch(StepKind::kProximal, objective, z, hp, epoch, opt, hooks, stats);
}

ModelState subgradient_ns_epoch(const Objective& objective, const ModelState& z,
                                const Hyperparams& hp, int epoch, OptimizerState& opt,
                                EpochStats* stats) {
  return gradient_epoch(StepKind::kSubgradient, objective, z, hp, epoch, opt, {}, stats);
}

ModelState sgd_epoch(const Objective& objective, const ModelState& z, const Hyperparams& hp,
                     int epoch, OptimizerState& opt, EpochStats* stats) {
  return gradient_epoch(StepKind::kPlain, objective, z, hp, epoch, opt, {}, stats);
}

ModelState fine_tune(const Objective& objective, const ModelState& z, const Hyperparams& hp,
                     int epochs, OptimizerState& opt,
                     const std::function<void(int, const ModelState&, const EpochStats&)>&
                         on_epoch) {
  if (epochs < 0) throw ContractError("fine_tune: negative epoch count");
  ModelState cur = z;
  for (int t = 1; t <= epochs; ++t) {
    EpochStats stats;
    cur = sgd_epoch(objective, cur, hp, t, opt, &stats);
    if (on_epoch) on_epoch(t, cur, stats);
  }
  return cur;
}

std::size_t adopt_xi_support(ModelState& z) {
  require_consistent(z);
  std::size_t n = 0;
  for (std::size_t i = 0; i < z.xi.size(); ++i) {
    if (z.xi[i] == 0.0) {
      z.gamma[i] = 0.0;
      ++n;
    }
  }
  return n;
}

}  // namespace proxslim
