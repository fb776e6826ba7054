#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace proxslim {

/// Tensor shapes do not conform to an operation's signature.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller violated a documented precondition.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A non-finite value (NaN/Inf) entered or left a computation.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, int epoch = -1, std::int64_t batch = -1)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}

  int epoch() const { return epoch_; }
  std::int64_t batch() const { return batch_; }

 private:
  int epoch_;
  std::int64_t batch_;
};

/// Pruning would leave a layer with no channels.
class RefusePruneError : public std::runtime_error {
 public:
  RefusePruneError(const std::string& layer, const std::string& what)
      : std::runtime_error(what), layer_(layer) {}
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

/// The network topology is outside what the compacting pruner can rebuild exactly.
class UnsupportedTopologyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An analysis was requested in a training mode it does not support.
class ModeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace proxslim
