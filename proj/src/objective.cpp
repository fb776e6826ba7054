#include "proxslim/objective.hpp"

#include <numeric>
#include <variant>

#include "proxslim/errors.hpp"

namespace proxslim {

void Objective::update_running_stats(ModelState&, const LossEvaluation&) const {}

LossEvaluation Objective::full_batch(const ModelState& z, bool with_grad) const {
  std::vector<std::size_t> all(sample_count());
  std::iota(all.begin(), all.end(), 0);
  return evaluate(z, all, with_grad);
}

NetworkObjective::NetworkObjective(const Network& net, const Dataset& data)
    : net_(net), data_(data) {
  data_.validate();
  if (data_.class_count != net_.class_count()) {
    throw ContractError("dataset has " + std::to_string(data_.class_count) +
                        " classes, network predicts " + std::to_string(net_.class_count()));
  }
  if (!(data_.image_shape() == net_.input_shape())) {
    throw ContractError("dataset image shape does not match the network input");
  }
  momentum_.resize(net_.channel_count());
  for (std::size_t i = 0; i < momentum_.size(); ++i) {
    const ChannelRef ref = net_.channel_registry()[i];
    momentum_[i] = std::get<BatchNormLayer>(net_.layers()[ref.layer]).momentum;
  }
}

LossEvaluation NetworkObjective::evaluate(const ModelState& z,
                                          std::span<const std::size_t> samples,
                                          bool with_grad) const {
  return evaluate_batch(net_, z, data_, samples, with_grad, BnMode::kTrain);
}

void NetworkObjective::update_running_stats(ModelState& z, const LossEvaluation& eval) const {
  if (eval.batch_mean.size() != momentum_.size()) return;
  for (std::size_t i = 0; i < momentum_.size(); ++i) {
    const double m = momentum_[i];
    z.running_mean[i] = (1.0 - m) * z.running_mean[i] + m * eval.batch_mean[i];
    z.running_var[i] = (1.0 - m) * z.running_var[i] + m * eval.batch_var[i];
  }
}

QuadraticObjective::QuadraticObjective(std::vector<double> w_center,
                                       std::vector<double> gamma_center)
    : w_center_(std::move(w_center)), gamma_center_(std::move(gamma_center)) {}

LossEvaluation QuadraticObjective::evaluate(const ModelState& z, std::span<const std::size_t>,
                                            bool with_grad) const {
  if (z.w.size() != w_center_.size() || z.gamma.size() != gamma_center_.size()) {
    throw ContractError("quadratic stub: state does not match the objective size");
  }
  LossEvaluation out;
  double s = 0.0;
  if (with_grad) {
    out.grad_w.resize(z.w.size());
    out.grad_gamma.resize(z.gamma.size());
  }
  for (std::size_t i = 0; i < z.w.size(); ++i) {
    const double d = z.w[i] - w_center_[i];
    s += d * d;
    if (with_grad) out.grad_w[i] = d;
  }
  for (std::size_t i = 0; i < z.gamma.size(); ++i) {
    const double d = z.gamma[i] - gamma_center_[i];
    s += d * d;
    if (with_grad) out.grad_gamma[i] = d;
  }
  out.loss = 0.5 * s;
  return out;
}

LinearObjective::LinearObjective(std::vector<double> w_coeff, std::vector<double> gamma_coeff)
    : w_coeff_(std::move(w_coeff)), gamma_coeff_(std::move(gamma_coeff)) {}

LossEvaluation LinearObjective::evaluate(const ModelState& z, std::span<const std::size_t>,
                                         bool with_grad) const {
  if (z.w.size() != w_coeff_.size() || z.gamma.size() != gamma_coeff_.size()) {
    throw ContractError("linear stub: state does not match the objective size");
  }
  LossEvaluation out;
  for (std::size_t i = 0; i < z.w.size(); ++i) out.loss += w_coeff_[i] * z.w[i];
  for (std::size_t i = 0; i < z.gamma.size(); ++i) out.loss += gamma_coeff_[i] * z.gamma[i];
  if (with_grad) {
    out.grad_w = w_coeff_;
    out.grad_gamma = gamma_coeff_;
  }
  return out;
}

ModelState stub_state(std::size_t weights, std::size_t channels) {
  ModelState z;
  z.w.assign(weights, 0.0);
  z.gamma.assign(channels, 0.5);
  z.xi.assign(channels, 0.5);
  z.running_mean.assign(channels, 0.0);
  z.running_var.assign(channels, 1.0);
  return z;
}

}  // namespace proxslim
