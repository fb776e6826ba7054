#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "proxslim/network.hpp"
#include "proxslim/state.hpp"

namespace proxslim {

/// keep[b][ch] for the b-th batch-norm layer (in Network::bn_layers() order).
using ChannelMasks = std::vector<std::vector<bool>>;

/// Channel i is dropped iff gamma_i == 0.0. A positive `epsilon` drops
/// |gamma_i| <= epsilon instead; that is only meant for inspecting baselines
/// that never reach exact zeros, and the resulting prune is not lossless.
/// Throws RefusePruneError if any layer would lose every channel.
ChannelMasks select_channels(const Network& net, const ModelState& z, double epsilon = 0.0);

struct PrunedModel {
  Network net;
  ModelState state;
};

/// Rebuilds a narrower network without the masked channels. A dropped
/// channel's batch-norm output is the constant beta_i; it is pushed through
/// the following activation and pooling and folded into the bias of the next
/// conv or linear layer, so the compact network computes the same function.
/// Throws UnsupportedTopologyError when that constant would reach a padded
/// convolution or the network output, where it cannot be folded exactly;
/// masked_inference still works for such networks.
PrunedModel prune_network(const Network& net, const ModelState& z, const ChannelMasks& masks);

/// Forward pass of the original network with gamma forced to zero on the
/// dropped channels.
Tensor masked_inference(const Network& net, const ModelState& z, const ChannelMasks& masks,
                        const Tensor& images, BnMode mode = BnMode::kEval);

struct LayerCost {
  std::size_t layer = 0;
  std::string kind;
  std::size_t params = 0;
  std::size_t macs = 0;         // per sample
  std::size_t elementwise = 0;  // batch-norm and activation outputs, per sample
};

/// Parameters include gamma and beta. MACs: conv C_out*C_in*k*k*H_out*W_out,
/// linear in*out. Pooling and flatten cost nothing.
struct CostSummary {
  std::size_t params = 0;
  std::size_t macs = 0;
  std::size_t elementwise = 0;
  std::vector<LayerCost> layers;
};

CostSummary count_params_flops(const Network& net);

struct LayerChannels {
  std::size_t layer = 0;
  std::size_t before = 0;
  std::size_t after = 0;
};

struct PruneReport {
  std::size_t channels_total = 0;
  std::size_t channels_pruned = 0;
  double channels_pruned_pct = 0.0;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double params_pruned_pct = 0.0;
  std::size_t flops_before = 0;  // MACs per sample
  std::size_t flops_after = 0;
  double flops_pruned_pct = 0.0;
  std::vector<LayerChannels> layers;
  double max_abs_output_diff = 0.0;

  std::size_t params_removed() const { return params_before - params_after; }
  std::size_t flops_removed() const { return flops_before - flops_after; }
};

PruneReport make_prune_report(const Network& before, const Network& after,
                              const ChannelMasks& masks, double max_abs_output_diff);

/// Largest |logit difference| between the original network and the compact
/// one on `count` standard-normal inputs drawn from `seed`.
double max_output_difference(const Network& original, const ModelState& z,
                             const PrunedModel& compact, std::size_t count, std::uint64_t seed,
                             BnMode mode = BnMode::kEval);

std::string prune_report_json(const PruneReport& report);
std::string prune_report_table(const PruneReport& report);

}  // namespace proxslim
