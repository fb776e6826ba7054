#include "proxslim/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>

#include "json.hpp"

#include "proxslim/errors.hpp"

namespace proxslim {

namespace {

std::string bn_name(const Network& net, std::size_t layer) {
  const auto& bn = std::get<BatchNormLayer>(net.layers()[layer]);
  return "layer " + std::to_string(layer) + " (batch-norm, " + std::to_string(bn.channels) +
         " channels)";
}

void check_masks(const Network& net, const ChannelMasks& masks) {
  const auto& bns = net.bn_layers();
  if (masks.size() != bns.size()) {
    throw ContractError("expected " + std::to_string(bns.size()) + " channel masks, got " +
                        std::to_string(masks.size()));
  }
  for (std::size_t b = 0; b < bns.size(); ++b) {
    const auto& bn = std::get<BatchNormLayer>(net.layers()[bns[b]]);
    if (masks[b].size() != bn.channels) {
      throw ContractError("mask for " + bn_name(net, bns[b]) + " has " +
                          std::to_string(masks[b].size()) + " entries");
    }
    if (std::none_of(masks[b].begin(), masks[b].end(), [](bool k) { return k; })) {
      throw RefusePruneError(bn_name(net, bns[b]),
                             "pruning would remove every channel of " + bn_name(net, bns[b]));
    }
  }
}

void check_state(const Network& net, const ModelState& z) {
  require_consistent(z);
  if (z.w.size() != net.weight_count() || z.gamma.size() != net.channel_count() ||
      z.running_mean.size() != net.channel_count() || z.running_var.size() != net.channel_count()) {
    throw ContractError("model state does not match the network");
  }
}

// Constant value carried by the dropped channels of the most recent
// batch-norm layer, as it travels toward the layer that consumes it.
struct Pending {
  std::vector<bool> keep;
  std::vector<double> value;  // meaningful where !keep
  std::size_t spatial = 1;    // H*W per channel once flattened
  bool flattened = false;

  bool any_nonzero() const {
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i] && value[i] != 0.0) return true;
    return false;
  }
};

std::vector<std::size_t> kept_indices(const std::vector<bool>& keep) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.push_back(i);
  return out;
}

}  // namespace

ChannelMasks select_channels(const Network& net, const ModelState& z, double epsilon) {
  if (epsilon < 0) throw ContractError("select_channels: epsilon must be non-negative");
  check_state(net, z);
  ChannelMasks masks;
  for (std::size_t layer : net.bn_layers()) {
    const auto& bn = std::get<BatchNormLayer>(net.layers()[layer]);
    const std::size_t off = net.params(layer).gamma_offset;
    std::vector<bool> keep(bn.channels);
    for (std::size_t ch = 0; ch < bn.channels; ++ch) {
      const double g = z.gamma[off + ch];
      keep[ch] = epsilon > 0 ? std::abs(g) > epsilon : g != 0.0;
    }
    masks.push_back(std::move(keep));
  }
  check_masks(net, masks);
  return masks;
}

PrunedModel prune_network(const Network& net, const ModelState& z, const ChannelMasks& masks) {
  check_state(net, z);
  check_masks(net, masks);
  const auto& layers = net.layers();
  const std::size_t L = layers.size();

  // Per layer: which output channels survive (conv) and which input channels
  // are read (conv/linear), plus the bias increment from absorbed channels.
  std::vector<std::vector<bool>> out_keep(L), in_keep(L);
  std::vector<std::size_t> in_spatial(L, 1);
  std::vector<std::vector<double>> bias_add(L);
  std::vector<std::size_t> mask_of(L, 0);
  {
    std::size_t b = 0;
    for (std::size_t layer : net.bn_layers()) mask_of[layer] = b++;
  }

  std::optional<Pending> pending;
  for (std::size_t i = 0; i < L; ++i) {
    const Shape in_shape = net.input_shape_of(i);
    const LayerParams& p = net.params(i);
    if (const auto* c = std::get_if<Conv2dLayer>(&layers[i])) {
      out_keep[i] = masks[mask_of[i + 1]];
      bias_add[i].assign(c->out_channels, 0.0);
      if (pending) {
        if (c->padding > 0 && pending->any_nonzero()) {
          throw UnsupportedTopologyError(
              "layer " + std::to_string(i) +
              ": dropped channels feed a padded convolution with a nonzero constant; the "
              "constant cannot be folded into its bias (use masked inference instead)");
        }
        const std::size_t kk = c->kernel * c->kernel;
        for (std::size_t o = 0; o < c->out_channels; ++o)
          for (std::size_t ic = 0; ic < c->in_channels; ++ic) {
            if (pending->keep[ic] || pending->value[ic] == 0.0) continue;
            double s = 0.0;
            const std::size_t base = p.weight->offset + (o * c->in_channels + ic) * kk;
            for (std::size_t k = 0; k < kk; ++k) s += z.w[base + k];
            bias_add[i][o] += pending->value[ic] * s;
          }
        in_keep[i] = pending->keep;
        pending.reset();
      } else {
        in_keep[i].assign(c->in_channels, true);
      }
    } else if (std::holds_alternative<BatchNormLayer>(layers[i])) {
      Pending next;
      next.keep = masks[mask_of[i]];
      next.value.resize(next.keep.size());
      for (std::size_t ch = 0; ch < next.keep.size(); ++ch) {
        next.value[ch] = z.w[p.bias->offset + ch];
      }
      pending = std::move(next);
    } else if (const auto* a = std::get_if<ActivationLayer>(&layers[i])) {
      if (pending) {
        for (std::size_t ch = 0; ch < pending->value.size(); ++ch) {
          if (!pending->keep[ch]) pending->value[ch] = activate(*a, pending->value[ch]);
        }
      }
    } else if (std::holds_alternative<PoolLayer>(layers[i])) {
      // Max, average and softmax pooling all map a constant map to itself.
    } else if (std::holds_alternative<FlattenLayer>(layers[i])) {
      if (pending) {
        pending->flattened = true;
        pending->spatial = in_shape[1] * in_shape[2];
      }
    } else if (const auto* l = std::get_if<LinearLayer>(&layers[i])) {
      bias_add[i].assign(l->out_features, 0.0);
      if (pending) {
        const std::size_t hw = pending->spatial;
        for (std::size_t o = 0; o < l->out_features; ++o)
          for (std::size_t ch = 0; ch < pending->keep.size(); ++ch) {
            if (pending->keep[ch] || pending->value[ch] == 0.0) continue;
            double s = 0.0;
            const std::size_t base = p.weight->offset + o * l->in_features + ch * hw;
            for (std::size_t k = 0; k < hw; ++k) s += z.w[base + k];
            bias_add[i][o] += pending->value[ch] * s;
          }
        in_keep[i] = pending->keep;
        in_spatial[i] = hw;
        pending.reset();
      }
    }
  }
  if (pending) {
    throw UnsupportedTopologyError(
        "dropped channels reach the network output without a conv or linear layer to absorb "
        "them (use masked inference instead)");
  }

  // Compact layer list.
  std::vector<Layer> compact;
  compact.reserve(L);
  for (std::size_t i = 0; i < L; ++i) {
    Layer layer = layers[i];
    if (auto* c = std::get_if<Conv2dLayer>(&layer)) {
      c->in_channels = kept_indices(in_keep[i]).size();
      c->out_channels = kept_indices(out_keep[i]).size();
      if (!c->bias && std::any_of(bias_add[i].begin(), bias_add[i].end(),
                                  [](double v) { return v != 0.0; })) {
        c->bias = true;
      }
    } else if (auto* bn = std::get_if<BatchNormLayer>(&layer)) {
      bn->channels = kept_indices(masks[mask_of[i]]).size();
    } else if (auto* l = std::get_if<LinearLayer>(&layer)) {
      if (!in_keep[i].empty()) l->in_features = kept_indices(in_keep[i]).size() * in_spatial[i];
      if (!l->bias && std::any_of(bias_add[i].begin(), bias_add[i].end(),
                                  [](double v) { return v != 0.0; })) {
        l->bias = true;
      }
    }
    compact.push_back(std::move(layer));
  }
  PrunedModel out{Network(net.input_shape(), std::move(compact), net.class_count()), {}};
  const Network& cn = out.net;
  ModelState& cz = out.state;
  cz.w.assign(cn.weight_count(), 0.0);

  for (std::size_t i = 0; i < L; ++i) {
    const LayerParams& op = net.params(i);
    const LayerParams& np = cn.params(i);
    if (const auto* c = std::get_if<Conv2dLayer>(&layers[i])) {
      const auto outs = kept_indices(out_keep[i]);
      const auto ins = kept_indices(in_keep[i]);
      const std::size_t kk = c->kernel * c->kernel;
      std::size_t dst = np.weight->offset;
      for (std::size_t o : outs)
        for (std::size_t ic : ins) {
          const std::size_t src = op.weight->offset + (o * c->in_channels + ic) * kk;
          std::copy_n(z.w.begin() + static_cast<std::ptrdiff_t>(src), kk,
                      cz.w.begin() + static_cast<std::ptrdiff_t>(dst));
          dst += kk;
        }
      if (np.bias) {
        for (std::size_t k = 0; k < outs.size(); ++k) {
          const double old = op.bias ? z.w[op.bias->offset + outs[k]] : 0.0;
          cz.w[np.bias->offset + k] = old + bias_add[i][outs[k]];
        }
      }
    } else if (std::holds_alternative<BatchNormLayer>(layers[i])) {
      const auto keep = kept_indices(masks[mask_of[i]]);
      for (std::size_t k = 0; k < keep.size(); ++k) {
        const std::size_t g = op.gamma_offset + keep[k];
        cz.w[np.bias->offset + k] = z.w[op.bias->offset + keep[k]];
        cz.gamma.push_back(z.gamma[g]);
        cz.xi.push_back(z.xi[g]);
        cz.running_mean.push_back(z.running_mean[g]);
        cz.running_var.push_back(z.running_var[g]);
      }
    } else if (const auto* l = std::get_if<LinearLayer>(&layers[i])) {
      std::vector<std::size_t> cols;
      if (in_keep[i].empty()) {
        cols.resize(l->in_features);
        for (std::size_t k = 0; k < cols.size(); ++k) cols[k] = k;
      } else {
        for (std::size_t ch : kept_indices(in_keep[i]))
          for (std::size_t s = 0; s < in_spatial[i]; ++s) cols.push_back(ch * in_spatial[i] + s);
      }
      std::size_t dst = np.weight->offset;
      for (std::size_t o = 0; o < l->out_features; ++o)
        for (std::size_t col : cols) cz.w[dst++] = z.w[op.weight->offset + o * l->in_features + col];
      if (np.bias) {
        for (std::size_t o = 0; o < l->out_features; ++o) {
          const double old = op.bias ? z.w[op.bias->offset + o] : 0.0;
          cz.w[np.bias->offset + o] = old + bias_add[i][o];
        }
      }
    }
  }
  return out;
}

Tensor masked_inference(const Network& net, const ModelState& z, const ChannelMasks& masks,
                        const Tensor& images, BnMode mode) {
  check_state(net, z);
  if (masks.size() != net.bn_layers().size()) throw ContractError("mask count mismatch");
  ModelState masked = z;
  for (std::size_t b = 0; b < masks.size(); ++b) {
    const std::size_t layer = net.bn_layers()[b];
    const std::size_t off = net.params(layer).gamma_offset;
    const auto& bn = std::get<BatchNormLayer>(net.layers()[layer]);
    if (masks[b].size() != bn.channels) throw ContractError("mask width mismatch");
    for (std::size_t ch = 0; ch < bn.channels; ++ch) {
      if (!masks[b][ch]) masked.gamma[off + ch] = 0.0;
    }
  }
  return forward(net, masked, images, mode);
}

CostSummary count_params_flops(const Network& net) {
  CostSummary s;
  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Shape out = net.output_shapes()[i];
    const std::size_t out_size = shape_size(out);
    LayerCost c;
    c.layer = i;
    if (const auto* cv = std::get_if<Conv2dLayer>(&layers[i])) {
      const std::size_t kernel = cv->out_channels * cv->in_channels * cv->kernel * cv->kernel;
      c.kind = "conv";
      c.params = kernel + (cv->bias ? cv->out_channels : 0);
      c.macs = kernel * out[1] * out[2];
    } else if (const auto* bn = std::get_if<BatchNormLayer>(&layers[i])) {
      c.kind = "bn";
      c.params = 2 * bn->channels;
      c.elementwise = out_size;
    } else if (std::holds_alternative<ActivationLayer>(layers[i])) {
      c.kind = "act";
      c.elementwise = out_size;
    } else if (std::holds_alternative<PoolLayer>(layers[i])) {
      c.kind = "pool";
    } else if (std::holds_alternative<FlattenLayer>(layers[i])) {
      c.kind = "flatten";
    } else if (const auto* l = std::get_if<LinearLayer>(&layers[i])) {
      c.kind = "linear";
      c.params = l->in_features * l->out_features + (l->bias ? l->out_features : 0);
      c.macs = l->in_features * l->out_features;
    }
    s.params += c.params;
    s.macs += c.macs;
    s.elementwise += c.elementwise;
    s.layers.push_back(std::move(c));
  }
  return s;
}

namespace {
double pct(std::size_t removed, std::size_t before) {
  return before == 0 ? 0.0 : 100.0 * static_cast<double>(removed) / static_cast<double>(before);
}
}  // namespace

PruneReport make_prune_report(const Network& before, const Network& after,
                              const ChannelMasks& masks, double max_abs_output_diff) {
  check_masks(before, masks);
  const CostSummary cb = count_params_flops(before);
  const CostSummary ca = count_params_flops(after);
  PruneReport r;
  r.channels_total = before.channel_count();
  for (std::size_t b = 0; b < masks.size(); ++b) {
    const std::size_t kept = static_cast<std::size_t>(std::count(masks[b].begin(), masks[b].end(), true));
    r.layers.push_back({before.bn_layers()[b], masks[b].size(), kept});
    r.channels_pruned += masks[b].size() - kept;
  }
  if (after.channel_count() + r.channels_pruned != r.channels_total) {
    throw ContractError("compact network does not match the masks");
  }
  r.channels_pruned_pct = pct(r.channels_pruned, r.channels_total);
  r.params_before = cb.params;
  r.params_after = ca.params;
  r.params_pruned_pct = pct(r.params_removed(), r.params_before);
  r.flops_before = cb.macs;
  r.flops_after = ca.macs;
  r.flops_pruned_pct = pct(r.flops_removed(), r.flops_before);
  r.max_abs_output_diff = max_abs_output_diff;
  return r;
}

double max_output_difference(const Network& original, const ModelState& z,
                             const PrunedModel& compact, std::size_t count, std::uint64_t seed,
                             BnMode mode) {
  const InputShape in = original.input_shape();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Tensor x({count, in.channels, in.height, in.width});
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = gauss(rng);
  const Tensor a = forward(original, z, x, mode);
  const Tensor b = forward(compact.net, compact.state, x, mode);
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a[k] - b[k]));
  return worst;
}

std::string prune_report_json(const PruneReport& r) {
  nlohmann::ordered_json j;
  j["channels_total"] = r.channels_total;
  j["channels_pruned"] = r.channels_pruned;
  j["channels_pruned_pct"] = r.channels_pruned_pct;
  j["params_before"] = r.params_before;
  j["params_after"] = r.params_after;
  j["params_pruned_pct"] = r.params_pruned_pct;
  j["flops_before"] = r.flops_before;
  j["flops_after"] = r.flops_after;
  j["flops_pruned_pct"] = r.flops_pruned_pct;
  auto layers = nlohmann::ordered_json::array();
  for (const LayerChannels& l : r.layers) {
    layers.push_back({{"layer", l.layer}, {"before", l.before}, {"after", l.after}});
  }
  j["layers"] = std::move(layers);
  j["max_abs_output_diff"] = r.max_abs_output_diff;
  return j.dump();
}

std::string prune_report_table(const PruneReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "              before      after   pruned %\n";
  auto row = [&os](const char* name, std::size_t b, std::size_t a, double p) {
    os << std::left << std::setw(10) << name << std::right << std::setw(10) << b << std::setw(11)
       << a << std::setw(11) << p << '\n';
  };
  row("channels", r.channels_total, r.channels_total - r.channels_pruned, r.channels_pruned_pct);
  row("params", r.params_before, r.params_after, r.params_pruned_pct);
  row("MACs", r.flops_before, r.flops_after, r.flops_pruned_pct);
  for (const LayerChannels& l : r.layers) {
    os << "  bn layer " << l.layer << ": " << l.after << "/" << l.before << " channels kept\n";
  }
  os << std::scientific << std::setprecision(3) << "max |logit diff| " << r.max_abs_output_diff
     << '\n';
  return os.str();
}

}  // namespace proxslim
