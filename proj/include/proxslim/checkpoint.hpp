#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "proxslim/network.hpp"
#include "proxslim/optimizer.hpp"
#include "proxslim/state.hpp"

namespace proxslim {

enum class Variant { kProximal, kSubgradient, kPlain };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);  // prox | baseline | sgd

/// Everything needed to continue a run bit for bit: architecture, iterate,
/// running statistics, hyperparameters, epoch counter and optimizer state
/// (momentum buffers and the batch-order engine).
struct Checkpoint {
  Network net;
  ModelState state;
  Hyperparams hp;
  Variant variant = Variant::kProximal;
  std::uint64_t seed = 0;
  int epoch = 0;  // epochs completed
  OptimizerState opt;
};

/// Layout: "PNSC", u16 version, u32 manifest length, manifest text (key/value
/// lines followed by the architecture descriptor), then seven blocks (W, gamma,
/// xi, running mean, running var, velocity W, velocity gamma), each a u64
/// count and that many little-endian float64 values.
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace proxslim
