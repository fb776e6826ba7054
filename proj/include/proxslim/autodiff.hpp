#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "proxslim/tensor.hpp"

namespace proxslim {

/// Handle to a value slot on a Tape.
struct Var {
  std::size_t id = 0;
};

class Gradients;

/// Reverse-mode tape. Slots are appended in evaluation order, so the slot
/// order is already a topological order and backward() replays it in reverse.
/// A tape is single-threaded; separate tapes share nothing.
class Tape {
 public:
  /// Accumulates d(loss)/d(input_i) into grad_in[i] given d(loss)/d(output).
  using BackwardFn =
      std::function<void(const Tape&, const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  /// Leaf slot (parameter or data). Rejects non-finite values.
  Var leaf(Tensor value);

  /// Appends the result of a primitive. When the tape is not recording only
  /// the value is kept.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }

  /// Gradient of a scalar slot with respect to every slot on the tape.
  Gradients backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool recording_;
};

class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  const Tensor& operator[](Var v) const { return grads_.at(v.id); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

struct Conv2dGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Output extent of a convolution/pooling window sweep.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t padding);

namespace ops {

// Structural
Var matmul(Tape& t, Var a, Var b);           // [m,k] x [k,n] -> [m,n]
Var transpose(Tape& t, Var a);               // [m,n] -> [n,m]
Var reshape(Tape& t, Var a, Shape shape);
Var conv2d(Tape& t, Var x, Var w, Conv2dGeometry g);  // x [B,Ci,H,W], w [Co,Ci,k,k]

// Elementwise / broadcast
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var add_scalar(Tape& t, Var a, double s);
Var square(Tape& t, Var a);
Var pow_scalar(Tape& t, Var a, double p);    // requires a > 0
Var exp(Tape& t, Var a);
Var log(Tape& t, Var a);                     // requires a > 0
Var row_add(Tape& t, Var x, Var bias);       // x [R,C] + bias [C]
Var channel_add(Tape& t, Var x, Var v);      // x [B,C,...] + v[C] per channel
Var channel_mul(Tape& t, Var x, Var v);      // x [B,C,...] * v[C] per channel

// Reductions (fixed left-to-right accumulation)
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);
Var channel_mean(Tape& t, Var x);            // [B,C,...] -> [C]

// Activations and pooling
Var softplus(Tape& t, Var a, double c);
Var relu(Tape& t, Var a);
Var avg_pool2d(Tape& t, Var x, std::size_t k);
Var max_pool2d(Tape& t, Var x, std::size_t k);
Var softmax_pool2d(Tape& t, Var x, std::size_t k, double c);

/// Mean softmax cross-entropy of logits [B,K] against class indices.
Var cross_entropy(Tape& t, Var logits, std::span<const std::size_t> labels);

}  // namespace ops

// Scalar kernels shared by the primitives and by the pruner.
double softplus_value(double x, double c);
double logistic(double x);
/// Smooth max of a window: sum_i x_i e^{c x_i} / sum_i e^{c x_i}.
double softmax_pool_value(std::span<const double> window, double c);

}  // namespace proxslim
