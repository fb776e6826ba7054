#include "proxslim/network.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "proxslim/autodiff.hpp"
#include "proxslim/errors.hpp"

namespace proxslim {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* activation_name(ActivationKind k) {
  switch (k) {
    case ActivationKind::kSoftplus: return "softplus";
    case ActivationKind::kRelu: return "relu";
    case ActivationKind::kIdentity: return "identity";
  }
  return "?";
}

const char* pool_name(PoolKind k) {
  switch (k) {
    case PoolKind::kSoftmax: return "softmax";
    case PoolKind::kMax: return "max";
    case PoolKind::kAverage: return "avg";
  }
  return "?";
}

}  // namespace

Network::Network(InputShape input, std::vector<Layer> layers, std::size_t class_count)
    : input_(input), layers_(std::move(layers)), class_count_(class_count) {
  if (input_.channels == 0 || input_.height == 0 || input_.width == 0) {
    throw ShapeError("network input extents must be positive");
  }
  if (class_count_ < 2) throw ContractError("network needs at least two classes");
  if (layers_.empty()) throw ContractError("network has no layers");

  Shape cur{input_.channels, input_.height, input_.width};
  std::size_t offset = 0;
  auto take = [&offset](Shape shape, std::size_t fan_in) {
    ParamBlock b{offset, std::move(shape), fan_in};
    offset += b.size();
    return b;
  };

  params_.resize(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string where = "layer " + std::to_string(i) + ": ";
    LayerParams& p = params_[i];
    std::visit(
        Overloaded{
            [&](const Conv2dLayer& c) {
              if (cur.size() != 3) throw ShapeError(where + "conv2d needs a [C,H,W] input");
              if (c.in_channels != cur[0]) {
                throw ShapeError(where + "conv2d expects " + std::to_string(c.in_channels) +
                                 " channels, receives " + std::to_string(cur[0]));
              }
              if (c.out_channels == 0 || c.kernel == 0) {
                throw ShapeError(where + "conv2d extents must be positive");
              }
              if (i + 1 >= layers_.size() ||
                  !std::holds_alternative<BatchNormLayer>(layers_[i + 1]) ||
                  std::get<BatchNormLayer>(layers_[i + 1]).channels != c.out_channels) {
                throw ContractError(where + "every conv2d must be followed by a batch-norm layer "
                                            "of matching width");
              }
              const std::size_t fan_in = c.in_channels * c.kernel * c.kernel;
              p.weight = take({c.out_channels, c.in_channels, c.kernel, c.kernel}, fan_in);
              if (c.bias) p.bias = take({c.out_channels}, fan_in);
              cur = {c.out_channels, conv_output_extent(cur[1], c.kernel, c.stride, c.padding),
                     conv_output_extent(cur[2], c.kernel, c.stride, c.padding)};
            },
            [&](const BatchNormLayer& bn) {
              if (i == 0 || !std::holds_alternative<Conv2dLayer>(layers_[i - 1])) {
                throw ContractError(where + "batch-norm must directly follow a conv2d");
              }
              if (!(bn.eps > 0)) throw ContractError(where + "batch-norm eps must be positive");
              if (!(bn.momentum > 0 && bn.momentum < 1)) {
                throw ContractError(where + "batch-norm momentum must lie in (0,1)");
              }
              p.bias = take({bn.channels}, 0);
              p.gamma_offset = registry_.size();
              for (std::size_t ch = 0; ch < bn.channels; ++ch) registry_.push_back({i, ch});
              bn_layers_.push_back(i);
            },
            [&](const ActivationLayer& a) {
              if (a.kind == ActivationKind::kSoftplus && !(a.sharpness > 0)) {
                throw ContractError(where + "softplus sharpness must be positive");
              }
            },
            [&](const PoolLayer& pl) {
              if (cur.size() != 3) throw ShapeError(where + "pooling needs a [C,H,W] input");
              if (pl.kind == PoolKind::kSoftmax && !(pl.sharpness > 0)) {
                throw ContractError(where + "softmax pooling sharpness must be positive");
              }
              cur = {cur[0], conv_output_extent(cur[1], pl.size, pl.size, 0),
                     conv_output_extent(cur[2], pl.size, pl.size, 0)};
            },
            [&](const FlattenLayer&) { cur = {shape_size(cur)}; },
            [&](const LinearLayer& l) {
              if (cur.size() != 1 || cur[0] != l.in_features) {
                throw ShapeError(where + "linear expects " + std::to_string(l.in_features) +
                                 " features, receives " + shape_string(cur));
              }
              p.weight = take({l.out_features, l.in_features}, l.in_features);
              if (l.bias) p.bias = take({l.out_features}, l.in_features);
              cur = {l.out_features};
            },
        },
        layers_[i]);
    output_shapes_.push_back(cur);
  }
  if (cur.size() != 1 || cur[0] != class_count_) {
    throw ShapeError("network output " + shape_string(cur) + " does not match " +
                     std::to_string(class_count_) + " classes");
  }
  weight_count_ = offset;
}

Shape Network::input_shape_of(std::size_t layer) const {
  if (layer == 0) return {input_.channels, input_.height, input_.width};
  return output_shapes_.at(layer - 1);
}

std::string Network::describe() const {
  std::ostringstream out;
  out << "input " << input_.channels << ' ' << input_.height << ' ' << input_.width << '\n';
  out << "classes " << class_count_ << '\n';
  for (const Layer& layer : layers_) {
    std::visit(Overloaded{
                   [&](const Conv2dLayer& c) {
                     out << "conv " << c.in_channels << ' ' << c.out_channels << ' ' << c.kernel
                         << ' ' << c.stride << ' ' << c.padding << ' '
                         << (c.bias ? "bias" : "nobias") << '\n';
                   },
                   [&](const BatchNormLayer& bn) {
                     out << "bn " << bn.channels << ' ' << fmt_double(bn.eps) << ' '
                         << fmt_double(bn.momentum) << '\n';
                   },
                   [&](const ActivationLayer& a) {
                     out << "act " << activation_name(a.kind) << ' ' << fmt_double(a.sharpness)
                         << '\n';
                   },
                   [&](const PoolLayer& p) {
                     out << "pool " << pool_name(p.kind) << ' ' << p.size << ' '
                         << fmt_double(p.sharpness) << '\n';
                   },
                   [&](const FlattenLayer&) { out << "flatten\n"; },
                   [&](const LinearLayer& l) {
                     out << "linear " << l.in_features << ' ' << l.out_features << ' '
                         << (l.bias ? "bias" : "nobias") << '\n';
                   },
               },
               layer);
  }
  return out.str();
}

Network Network::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  InputShape input;
  std::size_t classes = 0;
  std::vector<Layer> layers;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) -> ContractError {
    return ContractError("architecture line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind)) continue;
    if (kind == "input") {
      ls >> input.channels >> input.height >> input.width;
    } else if (kind == "classes") {
      ls >> classes;
    } else if (kind == "conv") {
      Conv2dLayer c;
      std::string bias;
      ls >> c.in_channels >> c.out_channels >> c.kernel >> c.stride >> c.padding >> bias;
      c.bias = bias == "bias";
      layers.emplace_back(c);
    } else if (kind == "bn") {
      BatchNormLayer bn;
      ls >> bn.channels >> bn.eps >> bn.momentum;
      layers.emplace_back(bn);
    } else if (kind == "act") {
      ActivationLayer a;
      std::string name;
      ls >> name >> a.sharpness;
      if (name == "softplus") a.kind = ActivationKind::kSoftplus;
      else if (name == "relu") a.kind = ActivationKind::kRelu;
      else if (name == "identity") a.kind = ActivationKind::kIdentity;
      else throw fail("unknown activation '" + name + "'");
      layers.emplace_back(a);
    } else if (kind == "pool") {
      PoolLayer p;
      std::string name;
      ls >> name >> p.size >> p.sharpness;
      if (name == "softmax") p.kind = PoolKind::kSoftmax;
      else if (name == "max") p.kind = PoolKind::kMax;
      else if (name == "avg") p.kind = PoolKind::kAverage;
      else throw fail("unknown pooling '" + name + "'");
      layers.emplace_back(p);
    } else if (kind == "flatten") {
      layers.emplace_back(FlattenLayer{});
    } else if (kind == "linear") {
      LinearLayer l;
      std::string bias;
      ls >> l.in_features >> l.out_features >> bias;
      l.bias = bias == "bias";
      layers.emplace_back(l);
    } else {
      throw fail("unknown layer kind '" + kind + "'");
    }
    if (ls.fail()) throw fail("malformed fields");
  }
  return Network(input, std::move(layers), classes);
}

Network tiny_vgg(InputShape input, std::size_t class_count, const TinyVggOptions& o) {
  const ActivationLayer act{o.activation, o.sharpness};
  const PoolLayer pool{o.pool, 2, o.sharpness};
  std::size_t h = conv_output_extent(input.height, 3, 1, 1) / 2;
  std::size_t w = conv_output_extent(input.width, 3, 1, 1) / 2;
  h = conv_output_extent(h, 3, 1, 0) / 2;
  w = conv_output_extent(w, 3, 1, 0) / 2;
  if (h == 0 || w == 0) throw ShapeError("tiny_vgg: input is too small (needs at least 8x8)");
  std::vector<Layer> layers{
      Conv2dLayer{input.channels, o.width1, 3, 1, 1, true},
      BatchNormLayer{o.width1},
      act,
      pool,
      Conv2dLayer{o.width1, o.width2, 3, 1, 0, true},
      BatchNormLayer{o.width2},
      act,
      pool,
      FlattenLayer{},
      LinearLayer{o.width2 * h * w, class_count, true},
  };
  return Network(input, std::move(layers), class_count);
}

// ---------------------------------------------------------------------------
// Dataset

InputShape Dataset::image_shape() const {
  if (images.rank() != 4) throw ShapeError("dataset images must be [N,C,H,W]");
  return {images.dim(1), images.dim(2), images.dim(3)};
}

void Dataset::validate() const {
  if (labels.empty()) throw ContractError("dataset is empty");
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw ContractError("dataset has " + std::to_string(labels.size()) + " labels but images " +
                        shape_string(images.shape()));
  }
  for (std::size_t y : labels) {
    if (y >= class_count) {
      throw ContractError("label " + std::to_string(y) + " out of range for " +
                          std::to_string(class_count) + " classes");
    }
  }
}

Tensor Dataset::gather(std::span<const std::size_t> samples) const {
  const InputShape s = image_shape();
  const std::size_t per = s.channels * s.height * s.width;
  Tensor out({samples.size(), s.channels, s.height, s.width});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i] >= size()) throw ContractError("sample index out of range");
    std::copy_n(images.data() + samples[i] * per, per, out.data() + i * per);
  }
  return out;
}

std::vector<std::size_t> Dataset::gather_labels(std::span<const std::size_t> samples) const {
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (std::size_t i : samples) out.push_back(labels.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace {

struct TapedForward {
  Var logits;
  std::vector<std::pair<Var, ParamBlock>> w_leaves;
  std::vector<std::pair<Var, std::size_t>> gamma_leaves;  // leaf, gamma offset
  struct BnStats {
    Var mean, var;
    std::size_t offset;
  };
  std::vector<BnStats> bn_stats;
};

Tensor block_tensor(const std::vector<double>& src, std::size_t offset, const Shape& shape) {
  const std::size_t n = shape_size(shape);
  return Tensor(shape, std::vector<double>(src.begin() + static_cast<std::ptrdiff_t>(offset),
                                           src.begin() + static_cast<std::ptrdiff_t>(offset + n)));
}

void check_state(const Network& net, const ModelState& z) {
  if (z.w.size() != net.weight_count() || z.gamma.size() != net.channel_count() ||
      z.running_mean.size() != net.channel_count() ||
      z.running_var.size() != net.channel_count()) {
    throw ContractError("model state does not match the network layout (W " +
                        std::to_string(z.w.size()) + "/" + std::to_string(net.weight_count()) +
                        ", gamma " + std::to_string(z.gamma.size()) + "/" +
                        std::to_string(net.channel_count()) + ")");
  }
}

TapedForward run_forward(Tape& tape, const Network& net, const ModelState& z,
                         const Tensor& images, BnMode mode) {
  check_state(net, z);
  const InputShape in = net.input_shape();
  if (images.rank() != 4 || images.dim(1) != in.channels || images.dim(2) != in.height ||
      images.dim(3) != in.width) {
    throw ShapeError("input " + shape_string(images.shape()) + " does not match network input [B," +
                     std::to_string(in.channels) + "," + std::to_string(in.height) + "," +
                     std::to_string(in.width) + "]");
  }
  const std::size_t B = images.dim(0);
  TapedForward f;
  Var x = tape.leaf(images);
  auto param = [&](const ParamBlock& b) {
    Var v = tape.leaf(block_tensor(z.w, b.offset, b.shape));
    f.w_leaves.emplace_back(v, b);
    return v;
  };

  const auto& layers = net.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerParams& p = net.params(i);
    std::visit(
        Overloaded{
            [&](const Conv2dLayer& c) {
              Var w = param(*p.weight);
              x = ops::conv2d(tape, x, w, {c.stride, c.padding});
              if (p.bias) x = ops::channel_add(tape, x, param(*p.bias));
            },
            [&](const BatchNormLayer& bn) {
              Var gamma = tape.leaf(block_tensor(z.gamma, p.gamma_offset, {bn.channels}));
              f.gamma_leaves.emplace_back(gamma, p.gamma_offset);
              Var beta = param(*p.bias);
              if (mode == BnMode::kTrain) {
                if (tape.value(x).size() / bn.channels < 2) {
                  throw ContractError("batch-norm in train mode needs at least two values per "
                                      "channel");
                }
                Var mu = ops::channel_mean(tape, x);
                Var xc = ops::channel_add(tape, x, ops::scale(tape, mu, -1.0));
                Var var = ops::channel_mean(tape, ops::square(tape, xc));
                Var inv = ops::pow_scalar(tape, ops::add_scalar(tape, var, bn.eps), -0.5);
                Var xhat = ops::channel_mul(tape, xc, inv);
                x = ops::channel_add(tape, ops::channel_mul(tape, xhat, gamma), beta);
                f.bn_stats.push_back({mu, var, p.gamma_offset});
              } else {
                Tensor neg_mean({bn.channels}), inv_std({bn.channels});
                for (std::size_t ch = 0; ch < bn.channels; ++ch) {
                  neg_mean[ch] = -z.running_mean[p.gamma_offset + ch];
                  inv_std[ch] = 1.0 / std::sqrt(z.running_var[p.gamma_offset + ch] + bn.eps);
                }
                Var xc = ops::channel_add(tape, x, tape.leaf(std::move(neg_mean)));
                Var xhat = ops::channel_mul(tape, xc, tape.leaf(std::move(inv_std)));
                x = ops::channel_add(tape, ops::channel_mul(tape, xhat, gamma), beta);
              }
            },
            [&](const ActivationLayer& a) {
              switch (a.kind) {
                case ActivationKind::kSoftplus: x = ops::softplus(tape, x, a.sharpness); break;
                case ActivationKind::kRelu: x = ops::relu(tape, x); break;
                case ActivationKind::kIdentity: break;
              }
            },
            [&](const PoolLayer& pl) {
              switch (pl.kind) {
                case PoolKind::kSoftmax:
                  x = ops::softmax_pool2d(tape, x, pl.size, pl.sharpness);
                  break;
                case PoolKind::kMax: x = ops::max_pool2d(tape, x, pl.size); break;
                case PoolKind::kAverage: x = ops::avg_pool2d(tape, x, pl.size); break;
              }
            },
            [&](const FlattenLayer&) {
              const std::size_t per = tape.value(x).size() / B;
              x = ops::reshape(tape, x, {B, per});
            },
            [&](const LinearLayer&) {
              Var w = param(*p.weight);
              x = ops::matmul(tape, x, ops::transpose(tape, w));
              if (p.bias) x = ops::row_add(tape, x, param(*p.bias));
            },
        },
        layers[i]);
  }
  f.logits = x;
  return f;
}

}  // namespace

LossEvaluation evaluate_batch(const Network& net, const ModelState& z, const Dataset& data,
                              std::span<const std::size_t> samples, bool with_grad, BnMode mode) {
  if (samples.empty()) throw ContractError("evaluate_batch: empty batch");
  Tape tape(with_grad);
  const Tensor images = data.gather(samples);
  const std::vector<std::size_t> labels = data.gather_labels(samples);
  TapedForward f = run_forward(tape, net, z, images, mode);
  Var loss = ops::cross_entropy(tape, f.logits, labels);

  LossEvaluation out;
  out.loss = tape.value(loss).item();
  if (mode == BnMode::kTrain) {
    out.batch_mean.assign(net.channel_count(), 0.0);
    out.batch_var.assign(net.channel_count(), 0.0);
    for (const auto& s : f.bn_stats) {
      const Tensor& m = tape.value(s.mean);
      const Tensor& v = tape.value(s.var);
      std::copy(m.values().begin(), m.values().end(), out.batch_mean.begin() + s.offset);
      std::copy(v.values().begin(), v.values().end(), out.batch_var.begin() + s.offset);
    }
  }
  if (with_grad) {
    const Gradients g = tape.backward(loss);
    out.grad_w.assign(net.weight_count(), 0.0);
    out.grad_gamma.assign(net.channel_count(), 0.0);
    for (const auto& [v, block] : f.w_leaves) {
      const Tensor& gv = g[v];
      std::copy(gv.values().begin(), gv.values().end(), out.grad_w.begin() + block.offset);
    }
    for (const auto& [v, offset] : f.gamma_leaves) {
      const Tensor& gv = g[v];
      std::copy(gv.values().begin(), gv.values().end(), out.grad_gamma.begin() + offset);
    }
  }
  return out;
}

double loss_full_batch(const Network& net, const ModelState& z, const Dataset& data) {
  data.validate();
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return evaluate_batch(net, z, data, all, false, BnMode::kTrain).loss;
}

Tensor forward(const Network& net, const ModelState& z, const Tensor& images, BnMode mode) {
  Tape tape(false);
  TapedForward f = run_forward(tape, net, z, images, mode);
  return tape.value(f.logits);
}

Tensor bn_forward(const BatchNormLayer& layer, std::span<const double> gamma,
                  std::span<const double> beta, std::span<double> running_mean,
                  std::span<double> running_var, const Tensor& z, BnMode mode) {
  if (z.rank() != 4 || z.dim(1) != layer.channels) {
    throw ShapeError("bn_forward: input " + shape_string(z.shape()) + " does not have " +
                     std::to_string(layer.channels) + " channels");
  }
  if (gamma.size() != layer.channels || beta.size() != layer.channels ||
      running_mean.size() != layer.channels || running_var.size() != layer.channels) {
    throw ShapeError("bn_forward: parameter vectors do not match channel count");
  }
  const std::size_t B = z.dim(0), C = z.dim(1), S = z.dim(2) * z.dim(3);
  if (mode == BnMode::kTrain && B * S < 2) {
    throw ContractError("bn_forward: train mode needs at least two values per channel");
  }
  Tensor out(z.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (mode == BnMode::kTrain) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < S; ++k) s += z[(b * C + c) * S + k];
      mu = s / static_cast<double>(B * S);
      double q = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < S; ++k) {
          const double d = z[(b * C + c) * S + k] - mu;
          q += d * d;
        }
      var = q / static_cast<double>(B * S);
      running_mean[c] = (1.0 - layer.momentum) * running_mean[c] + layer.momentum * mu;
      running_var[c] = (1.0 - layer.momentum) * running_var[c] + layer.momentum * var;
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    const double inv = std::pow(var + layer.eps, -0.5);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < S; ++k) {
        const std::size_t i = (b * C + c) * S + k;
        out[i] = (z[i] - mu) * inv * gamma[c] + beta[c];
      }
  }
  return out;
}

Tensor softplus(const Tensor& x, double c) {
  if (!(c > 0)) throw ContractError("softplus: sharpness c must be positive");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = softplus_value(x[i], c);
  return out;
}

double softmax_pool(std::span<const double> window, double c) {
  return softmax_pool_value(window, c);
}

double activate(const ActivationLayer& act, double x) {
  switch (act.kind) {
    case ActivationKind::kSoftplus: return softplus_value(x, act.sharpness);
    case ActivationKind::kRelu: return x > 0 ? x : 0.0;
    case ActivationKind::kIdentity: return x;
  }
  return x;
}

Accuracy evaluate_accuracy(const Network& net, const ModelState& z, const Dataset& data,
                           std::size_t chunk) {
  data.validate();
  if (data.class_count != net.class_count() || !(data.image_shape() == net.input_shape())) {
    throw ContractError("dataset does not match the network (classes or image shape)");
  }
  Accuracy acc;
  acc.predictions.reserve(data.size());
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = forward(net, z, data.gather(idx), BnMode::kEval);
    const std::size_t K = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const double* row = logits.data() + r * K;
      const std::size_t pred = static_cast<std::size_t>(std::max_element(row, row + K) - row);
      acc.predictions.push_back(pred);
      const std::size_t y = data.labels[idx[r]];
      if (pred == y) ++correct;
      const double m = *std::max_element(row, row + K);
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += std::exp(row[k] - m);
      loss_sum += m + std::log(s) - row[y];
    }
  }
  acc.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  acc.loss = loss_sum / static_cast<double>(data.size());
  return acc;
}

}  // namespace proxslim
