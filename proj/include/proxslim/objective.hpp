#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "proxslim/network.hpp"
#include "proxslim/state.hpp"

namespace proxslim {

/// A smooth loss over (W, gamma) that can be evaluated on subsets of samples.
/// The optimizer and the convergence diagnostics only see this interface, so
/// the same code runs on real networks and on analytic stubs.
class Objective {
 public:
  virtual ~Objective() = default;

  virtual std::size_t sample_count() const = 0;
  virtual std::size_t weight_count() const = 0;
  virtual std::size_t channel_count() const = 0;

  virtual LossEvaluation evaluate(const ModelState& z, std::span<const std::size_t> samples,
                                  bool with_grad) const = 0;

  /// Folds the batch statistics of a train-mode evaluation into the running
  /// statistics. No-op for objectives without batch normalization.
  virtual void update_running_stats(ModelState& z, const LossEvaluation& eval) const;

  /// Loss (and gradient) over every sample at once.
  LossEvaluation full_batch(const ModelState& z, bool with_grad) const;
};

/// Cross-entropy of a network on a dataset, batch-norm in train mode.
class NetworkObjective final : public Objective {
 public:
  NetworkObjective(const Network& net, const Dataset& data);

  std::size_t sample_count() const override { return data_.size(); }
  std::size_t weight_count() const override { return net_.weight_count(); }
  std::size_t channel_count() const override { return net_.channel_count(); }
  LossEvaluation evaluate(const ModelState& z, std::span<const std::size_t> samples,
                          bool with_grad) const override;
  void update_running_stats(ModelState& z, const LossEvaluation& eval) const override;

  const Network& network() const { return net_; }
  const Dataset& data() const { return data_; }

 private:
  const Network& net_;
  const Dataset& data_;
  std::vector<double> momentum_;  // per gamma index
};

/// 0.5 * (||W - a||^2 + ||gamma - b||^2): gradient Lipschitz constant exactly 1.
class QuadraticObjective final : public Objective {
 public:
  QuadraticObjective(std::vector<double> w_center, std::vector<double> gamma_center);

  std::size_t sample_count() const override { return 1; }
  std::size_t weight_count() const override { return w_center_.size(); }
  std::size_t channel_count() const override { return gamma_center_.size(); }
  LossEvaluation evaluate(const ModelState& z, std::span<const std::size_t> samples,
                          bool with_grad) const override;

 private:
  std::vector<double> w_center_;
  std::vector<double> gamma_center_;
};

/// <a, W> + <b, gamma>: zero curvature.
class LinearObjective final : public Objective {
 public:
  LinearObjective(std::vector<double> w_coeff, std::vector<double> gamma_coeff);

  std::size_t sample_count() const override { return 1; }
  std::size_t weight_count() const override { return w_coeff_.size(); }
  std::size_t channel_count() const override { return gamma_coeff_.size(); }
  LossEvaluation evaluate(const ModelState& z, std::span<const std::size_t> samples,
                          bool with_grad) const override;

 private:
  std::vector<double> w_coeff_;
  std::vector<double> gamma_coeff_;
};

/// State with the given block sizes, gamma = 0.5, xi = 0.5 and unit running
/// variance; convenient for stub objectives.
ModelState stub_state(std::size_t weights, std::size_t channels);

}  // namespace proxslim
