#include "proxslim/checkpoint.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include "binary_io.hpp"
#include "proxslim/errors.hpp"

namespace proxslim {

namespace {

constexpr char kMagic[4] = {'P', 'N', 'S', 'C'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint32_t kBlocks = 7;

std::string exact(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string manifest(const Checkpoint& ck) {
  std::ostringstream m;
  m << "variant " << variant_name(ck.variant) << '\n';
  m << "seed " << ck.seed << '\n';
  m << "epoch " << ck.epoch << '\n';
  m << "lambda " << exact(ck.hp.lambda) << '\n';
  m << "beta " << exact(ck.hp.beta) << '\n';
  m << "schedule " << ck.hp.schedule.to_string() << '\n';
  m << "epochs " << ck.hp.epochs << '\n';
  m << "batch_size " << ck.hp.batch_size << '\n';
  m << "momentum " << exact(ck.hp.momentum) << '\n';
  m << "weight_decay " << exact(ck.hp.weight_decay) << '\n';
  m << "xi_update " << (ck.hp.xi_update == XiUpdate::kPerBatch ? "batch" : "epoch") << '\n';
  m << "mode " << (ck.hp.mode == BatchMode::kFullBatch ? "full" : "stochastic") << '\n';
  m << "rng " << ck.opt.rng << '\n';
  m << "architecture\n" << ck.net.describe();
  return m.str();
}

void put_block(std::ostream& out, const std::vector<double>& v) {
  binary::put<std::uint64_t>(out, v.size());
  for (double x : v) binary::put<double>(out, x);
}

std::vector<double> get_block(std::istream& in, const char* what) {
  const auto n = binary::get<std::uint64_t>(in, what);
  if (n > (std::uint64_t{1} << 32)) throw IoError(std::string("implausible length for ") + what);
  std::vector<double> v(n);
  for (double& x : v) x = binary::get<double>(in, what);
  return v;
}

}  // namespace

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kProximal: return "prox";
    case Variant::kSubgradient: return "baseline";
    case Variant::kPlain: return "sgd";
  }
  return "prox";
}

Variant parse_variant(const std::string& name) {
  if (name == "prox") return Variant::kProximal;
  if (name == "baseline") return Variant::kSubgradient;
  if (name == "sgd") return Variant::kPlain;
  throw ContractError("unknown variant '" + name + "' (want prox, baseline or sgd)");
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  require_consistent(ck.state);
  const std::string text = manifest(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, 4);
  binary::put<std::uint16_t>(out, kVersion);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  binary::put<std::uint32_t>(out, kBlocks);
  for (const auto* v : {&ck.state.w, &ck.state.gamma, &ck.state.xi, &ck.state.running_mean,
                        &ck.state.running_var, &ck.opt.velocity_w, &ck.opt.velocity_gamma}) {
    put_block(out, *v);
  }
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kMagic, 4)) {
    throw IoError("'" + path.string() + "' is not a checkpoint");
  }
  const auto version = binary::get<std::uint16_t>(in, "version");
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto len = binary::get<std::uint32_t>(in, "manifest length");
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw IoError("truncated checkpoint manifest");

  const auto arch_at = text.find("architecture\n");
  if (arch_at == std::string::npos) throw IoError("checkpoint manifest lacks an architecture");
  std::map<std::string, std::string> kv;
  {
    std::istringstream ms(text.substr(0, arch_at));
    std::string line;
    while (std::getline(ms, line)) {
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw IoError("malformed manifest line '" + line + "'");
      kv[line.substr(0, sp)] = line.substr(sp + 1);
    }
  }
  auto field = [&kv](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw IoError("checkpoint manifest lacks '" + key + "'");
    return it->second;
  };

  Checkpoint ck{Network::parse(text.substr(arch_at + 13)), {}, {}, {}, 0, 0, OptimizerState{}};
  try {
    ck.variant = parse_variant(field("variant"));
    ck.seed = std::stoull(field("seed"));
    ck.epoch = std::stoi(field("epoch"));
    ck.hp.lambda = std::stod(field("lambda"));
    ck.hp.beta = std::stod(field("beta"));
    ck.hp.schedule = AlphaSchedule::parse(field("schedule"));
    ck.hp.epochs = std::stoi(field("epochs"));
    ck.hp.batch_size = std::stoull(field("batch_size"));
    ck.hp.momentum = std::stod(field("momentum"));
    ck.hp.weight_decay = std::stod(field("weight_decay"));
    ck.hp.xi_update = field("xi_update") == "batch" ? XiUpdate::kPerBatch : XiUpdate::kPerEpoch;
    ck.hp.mode = field("mode") == "full" ? BatchMode::kFullBatch : BatchMode::kStochastic;
  } catch (const std::logic_error& e) {
    throw IoError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  std::istringstream rs(field("rng"));
  if (!(rs >> ck.opt.rng)) throw IoError("malformed RNG state in checkpoint");

  if (binary::get<std::uint32_t>(in, "block count") != kBlocks) {
    throw IoError("unexpected checkpoint block count");
  }
  ck.state.w = get_block(in, "W");
  ck.state.gamma = get_block(in, "gamma");
  ck.state.xi = get_block(in, "xi");
  ck.state.running_mean = get_block(in, "running mean");
  ck.state.running_var = get_block(in, "running var");
  ck.opt.velocity_w = get_block(in, "velocity W");
  ck.opt.velocity_gamma = get_block(in, "velocity gamma");

  require_consistent(ck.state);
  if (ck.state.w.size() != ck.net.weight_count() ||
      ck.state.gamma.size() != ck.net.channel_count() ||
      ck.state.running_mean.size() != ck.net.channel_count() ||
      ck.state.running_var.size() != ck.net.channel_count()) {
    throw IoError("checkpoint parameters do not match its architecture");
  }
  return ck;
}

}  // namespace proxslim
