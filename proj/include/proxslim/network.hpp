#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "proxslim/state.hpp"
#include "proxslim/tensor.hpp"

namespace proxslim {

enum class ActivationKind { kSoftplus, kRelu, kIdentity };
enum class PoolKind { kSoftmax, kMax, kAverage };

struct Conv2dLayer {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
};

/// Batch normalization whose scaling factors live in the global gamma vector.
struct BatchNormLayer {
  std::size_t channels = 0;
  double eps = 1e-5;
  double momentum = 0.1;
};

struct ActivationLayer {
  ActivationKind kind = ActivationKind::kSoftplus;
  double sharpness = 10.0;  // c in (1/c) log(1 + e^{cx})
};

struct PoolLayer {
  PoolKind kind = PoolKind::kSoftmax;
  std::size_t size = 2;     // window and stride
  double sharpness = 10.0;  // softmax pooling only
};

struct FlattenLayer {};

struct LinearLayer {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  bool bias = true;
};

using Layer =
    std::variant<Conv2dLayer, BatchNormLayer, ActivationLayer, PoolLayer, FlattenLayer, LinearLayer>;

struct InputShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const InputShape&) const = default;
};

/// A contiguous run of W.
struct ParamBlock {
  std::size_t offset = 0;
  Shape shape;
  std::size_t fan_in = 0;  // 0 for shifts/biases of BN
  std::size_t size() const { return shape_size(shape); }
};

/// Where a layer's parameters live. Unused fields stay empty.
struct LayerParams {
  std::optional<ParamBlock> weight;
  std::optional<ParamBlock> bias;      // conv/linear bias, or BN shift beta
  std::size_t gamma_offset = 0;        // BN only
};

/// gamma index -> (BN layer index, channel within that layer).
struct ChannelRef {
  std::size_t layer = 0;
  std::size_t channel = 0;
  bool operator==(const ChannelRef&) const = default;
};

/// Sequential CNN. Immutable once constructed; every convolution is directly
/// followed by a batch-norm layer of matching width.
class Network {
 public:
  Network(InputShape input, std::vector<Layer> layers, std::size_t class_count);

  const std::vector<Layer>& layers() const { return layers_; }
  const LayerParams& params(std::size_t layer) const { return params_.at(layer); }
  InputShape input_shape() const { return input_; }
  std::size_t class_count() const { return class_count_; }
  std::size_t weight_count() const { return weight_count_; }
  std::size_t channel_count() const { return registry_.size(); }
  const std::vector<ChannelRef>& channel_registry() const { return registry_; }
  /// Indices of the batch-norm layers, in order.
  const std::vector<std::size_t>& bn_layers() const { return bn_layers_; }
  /// Per-sample output shape of each layer ([C,H,W] or [F]).
  const std::vector<Shape>& output_shapes() const { return output_shapes_; }
  /// Per-sample shape fed into layer i.
  Shape input_shape_of(std::size_t layer) const;

  /// Stable text form, one layer per line; parse(describe()) reproduces it.
  std::string describe() const;
  static Network parse(std::string_view text);

  bool operator==(const Network& other) const { return describe() == other.describe(); }

 private:
  InputShape input_;
  std::vector<Layer> layers_;
  std::size_t class_count_;
  std::vector<LayerParams> params_;
  std::vector<ChannelRef> registry_;
  std::vector<std::size_t> bn_layers_;
  std::vector<Shape> output_shapes_;
  std::size_t weight_count_ = 0;
};

struct TinyVggOptions {
  std::size_t width1 = 8;
  std::size_t width2 = 16;
  ActivationKind activation = ActivationKind::kSoftplus;
  PoolKind pool = PoolKind::kSoftmax;
  double sharpness = 10.0;
};

/// conv(C->w1, 3x3, pad 1)-BN-act-pool-conv(w1->w2, 3x3, no pad)-BN-act-pool-flatten-linear.
/// The second convolution is unpadded so that absorbing a pruned channel's
/// constant output into its bias is exact at every spatial position.
Network tiny_vgg(InputShape input, std::size_t class_count, const TinyVggOptions& options = {});

/// Labelled images stored as one [N,C,H,W] tensor.
struct Dataset {
  Tensor images;
  std::vector<std::size_t> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  InputShape image_shape() const;
  /// Throws ContractError on N == 0, label/count mismatch, or out-of-range labels.
  void validate() const;
  /// Images of the listed samples, stacked in order.
  Tensor gather(std::span<const std::size_t> samples) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> samples) const;
};

enum class BnMode { kTrain, kEval };

/// Loss value and, optionally, gradients over (W, gamma) for one batch.
struct LossEvaluation {
  double loss = 0.0;
  std::vector<double> grad_w;
  std::vector<double> grad_gamma;
  /// Mini-batch mean/biased variance per gamma index (train mode only).
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
};

/// Mean cross-entropy over the selected samples.
LossEvaluation evaluate_batch(const Network& net, const ModelState& z, const Dataset& data,
                              std::span<const std::size_t> samples, bool with_grad,
                              BnMode mode = BnMode::kTrain);

/// Mean cross-entropy over the whole dataset with batch statistics taken over
/// all N samples; this is the loss the optimizer and diagnostics work with.
double loss_full_batch(const Network& net, const ModelState& z, const Dataset& data);

/// Logits [B, classes] for a stack of images.
Tensor forward(const Network& net, const ModelState& z, const Tensor& images,
               BnMode mode = BnMode::kEval);

/// Batch-norm forward on a [B,C,H,W] feature map for layer-level use and tests.
/// In train mode the running statistics are updated in place.
Tensor bn_forward(const BatchNormLayer& layer, std::span<const double> gamma,
                  std::span<const double> beta, std::span<double> running_mean,
                  std::span<double> running_var, const Tensor& z, BnMode mode);

/// Elementwise (1/c) log(1 + e^{cx}).
Tensor softplus(const Tensor& x, double c);
/// Smooth window maximum.
double softmax_pool(std::span<const double> window, double c);

/// Scalar activation used for pruned-channel constants.
double activate(const ActivationLayer& act, double x);

struct Accuracy {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<std::size_t> predictions;
};

/// Eval-mode top-1 accuracy and mean loss, processed in fixed-size chunks.
Accuracy evaluate_accuracy(const Network& net, const ModelState& z, const Dataset& data,
                           std::size_t chunk = 256);

}  // namespace proxslim
