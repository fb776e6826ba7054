#pragma once

#include <cstddef>
#include <vector>

namespace proxslim {

/// Iterate Z = (W, gamma, xi) plus the batch-norm inference statistics.
///
/// `w` holds every trainable scalar except the scaling factors (kernels,
/// biases, BN shifts, linear weights) in the network's parameter layout.
/// `gamma` and `xi` share the channel indexing of the network's channel
/// registry, as do `running_mean` and `running_var`, which are not optimized.
struct ModelState {
  std::vector<double> w;
  std::vector<double> gamma;
  std::vector<double> xi;
  std::vector<double> running_mean;
  std::vector<double> running_var;

  std::size_t channel_count() const { return gamma.size(); }
  bool operator==(const ModelState&) const = default;
};

/// Squared Euclidean distance between the (W, gamma, xi) blocks of two states.
double distance_sq(const ModelState& a, const ModelState& b);
/// Euclidean norm of (W, gamma, xi).
double state_norm(const ModelState& z);
/// Number of entries exactly equal to 0.0.
std::size_t count_exact_zeros(const std::vector<double>& v);
/// Throws ContractError unless the block lengths agree with each other.
void require_consistent(const ModelState& z);

}  // namespace proxslim
