#include "proxslim/harness.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "proxslim/convergence.hpp"
#include "proxslim/errors.hpp"
#include "proxslim/objective.hpp"
#include "proxslim/pruner.hpp"

namespace proxslim {

namespace {

using Clock = std::chrono::steady_clock;

std::string num(double v, int digits = 10) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*e", digits, v);
  return buf;
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + p.string() + "' for writing");
  return f;
}

const char* activation_text(ActivationKind k) {
  switch (k) {
    case ActivationKind::kSoftplus: return "softplus";
    case ActivationKind::kRelu: return "relu";
    case ActivationKind::kIdentity: return "identity";
  }
  return "softplus";
}

const char* pool_text(PoolKind k) {
  switch (k) {
    case PoolKind::kSoftmax: return "softmax";
    case PoolKind::kMax: return "max";
    case PoolKind::kAverage: return "avg";
  }
  return "softmax";
}

ModelState epoch_step(Variant v, const Objective& obj, const ModelState& z, const Hyperparams& hp,
                      int epoch, OptimizerState& opt, EpochStats& stats) {
  switch (v) {
    case Variant::kProximal: return prox_ns_epoch(obj, z, hp, epoch, opt, {}, &stats);
    case Variant::kSubgradient: return subgradient_ns_epoch(obj, z, hp, epoch, opt, &stats);
    case Variant::kPlain: return sgd_epoch(obj, z, hp, epoch, opt, &stats);
  }
  throw ContractError("unknown variant");
}

std::size_t argmax_agreement(const Accuracy& a, const Accuracy& b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.predictions.size(); ++i) same += a.predictions[i] == b.predictions[i];
  return same;
}

}  // namespace

void RunConfig::resolve_schedule() {
  if (alpha == "auto") return;
  if (alpha.find(':') != std::string::npos) {
    hp.schedule = AlphaSchedule::parse(alpha);
    return;
  }
  double a0 = 0.0;
  try {
    std::size_t used = 0;
    a0 = std::stod(alpha, &used);
    if (used != alpha.size()) throw std::invalid_argument(alpha);
  } catch (const std::logic_error&) {
    throw ContractError("alpha must be a number, a schedule 'first-last:alpha,...' or 'auto'");
  }
  hp.schedule = AlphaSchedule::step(a0, hp.epochs);
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  auto kv = [&o](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
  kv("arch", arch);
  kv("width1", std::to_string(vgg.width1));
  kv("width2", std::to_string(vgg.width2));
  kv("activation", activation_text(vgg.activation));
  kv("pool", pool_text(vgg.pool));
  kv("sharpness", exact(vgg.sharpness));
  kv("data", data.empty() ? "\"\"" : data);
  kv("classes", std::to_string(synthetic.classes));
  kv("per-class", std::to_string(synthetic.per_class));
  kv("channels", std::to_string(synthetic.channels));
  kv("size", std::to_string(synthetic.height));
  kv("data-seed", std::to_string(synthetic.seed));
  kv("noise", exact(synthetic.noise));
  kv("interior", synthetic.interior_targets ? "true" : "false");
  kv("lambda", exact(hp.lambda));
  kv("beta", exact(hp.beta));
  kv("alpha", alpha);
  kv("epochs", std::to_string(hp.epochs));
  kv("batch-size", std::to_string(hp.batch_size));
  kv("momentum", exact(hp.momentum));
  kv("weight-decay", exact(hp.weight_decay));
  kv("xi-update", hp.xi_update == XiUpdate::kPerBatch ? "batch" : "epoch");
  kv("mode", hp.mode == BatchMode::kFullBatch ? "full" : "stochastic");
  kv("seed", std::to_string(seed));
  kv("variant", variant_name(variant));
  kv("diagnostics", diagnostics ? "true" : "false");
  kv("adopt-support", adopt_support ? "true" : "false");
  kv("stop-after", std::to_string(stop_after));
  kv("resume", resume.empty() ? "\"\"" : resume);
  kv("out", out.string());
  kv("lipschitz-samples", std::to_string(lipschitz_samples));
  kv("lipschitz-radius", exact(lipschitz_radius));
  kv("min-epochs", std::to_string(min_epochs));
  kv("window", std::to_string(window));
  kv("tol-step", exact(tol_step));
  kv("tol-w", exact(tol_w));
  return o.str();
}

Dataset load_or_generate(const RunConfig& cfg) {
  return cfg.data.empty() ? generate_synthetic(cfg.synthetic) : load_dataset(cfg.data);
}

Network build_network(const RunConfig& cfg, InputShape input, std::size_t classes) {
  if (cfg.arch != "tinyvgg") {
    throw ContractError("architecture '" + cfg.arch + "' is not a trainable network");
  }
  return tiny_vgg(input, classes, cfg.vgg);
}

int cmd_gen_data(const SyntheticSpec& spec, const std::filesystem::path& out, std::ostream& log) {
  const Dataset d = generate_synthetic(spec);
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  save_dataset(d, out);
  log << "wrote " << d.size() << " records (" << spec.classes << " classes, " << spec.channels
      << "x" << spec.height << "x" << spec.width << ") to " << out.string() << '\n'
      << "nearest-centroid accuracy " << nearest_centroid_accuracy(d) << '\n';
  return kExitOk;
}

int cmd_train(const RunConfig& cfg_in, std::ostream& log) {
  RunConfig cfg = cfg_in;
  const Dataset data = load_or_generate(cfg);
  std::filesystem::create_directories(cfg.out);

  std::optional<Checkpoint> ck;
  if (!cfg.resume.empty()) {
    ck = load_checkpoint(cfg.resume);
    if (ck->net.input_shape() != data.image_shape() || ck->net.class_count() != data.class_count) {
      throw ContractError("checkpoint architecture does not match the dataset");
    }
  } else {
    cfg.resolve_schedule();
    cfg.hp.validate();
    const Network net = build_network(cfg, data.image_shape(), data.class_count);
    ck = Checkpoint{net, init_state(net, cfg.seed), cfg.hp, cfg.variant, cfg.seed, 0,
                    OptimizerState(cfg.seed + 1)};
  }
  const Hyperparams& hp = ck->hp;
  const NetworkObjective obj(ck->net, data);

  {
    auto f = open_out(cfg.out / "config.ini");
    f << cfg.to_text();
  }
  auto tlog = open_out(cfg.out / (cfg.resume.empty() ? "train.log" : "resume.log"));
  std::istringstream cfg_lines(cfg.to_text());
  for (std::string line; std::getline(cfg_lines, line);) tlog << "# " << line << '\n';
  tlog << "# schedule = " << hp.schedule.to_string() << '\n';
  tlog << "# weights = " << ck->net.weight_count() << ", channels = " << ck->net.channel_count()
       << ", samples = " << data.size() << '\n';
  tlog << "epoch\talpha\tloss\tF\tzero_xi\tzero_gamma\n";

  const int last = cfg.stop_after > 0 ? std::min(cfg.stop_after, hp.epochs) : hp.epochs;
  const auto t0 = Clock::now();
  for (int t = ck->epoch + 1; t <= last; ++t) {
    EpochStats stats;
    ModelState next;
    OptimizerState opt = ck->opt;
    try {
      next = epoch_step(ck->variant, obj, ck->state, hp, t, opt, stats);
    } catch (const NumericError& e) {
      save_checkpoint(*ck, cfg.out / "model.ckpt");
      tlog << "# numeric failure: " << e.what() << "; last good epoch " << ck->epoch << '\n';
      log << "numeric failure at epoch " << t << ": " << e.what()
          << "\nlast good checkpoint (epoch " << ck->epoch << ") saved\n";
      return kExitNumeric;
    }
    ck->state = std::move(next);
    ck->opt = std::move(opt);
    ck->epoch = t;
    const std::string F = cfg.diagnostics ? num(eval_F(obj, ck->state, hp.lambda, hp.beta)) : "-";
    tlog << t << '\t' << exact(hp.schedule.alpha_at(t)) << '\t' << num(stats.mean_batch_loss)
         << '\t' << F << '\t' << count_exact_zeros(ck->state.xi) << '\t'
         << count_exact_zeros(ck->state.gamma) << '\n';
    log << "epoch " << t << "/" << hp.epochs << "  loss " << num(stats.mean_batch_loss, 4)
        << "  zero xi " << count_exact_zeros(ck->state.xi) << "  ("
        << num(seconds_since(t0), 2) << " s)\n";
  }

  std::size_t adopted = 0;
  const bool finished = ck->epoch >= hp.epochs;
  if (finished && ck->variant == Variant::kProximal && cfg.adopt_support) {
    adopted = adopt_xi_support(ck->state);
    tlog << "# adopted the xi support: gamma set to 0 on " << adopted << " channels\n";
  }
  const Accuracy acc = evaluate_accuracy(ck->net, ck->state, data);
  save_checkpoint(*ck, cfg.out / "model.ckpt");

  nlohmann::ordered_json s;
  s["epoch"] = ck->epoch;
  s["variant"] = variant_name(ck->variant);
  s["lambda"] = hp.lambda;
  s["beta"] = hp.beta;
  s["channels"] = ck->net.channel_count();
  s["zero_xi"] = count_exact_zeros(ck->state.xi);
  s["zero_gamma"] = count_exact_zeros(ck->state.gamma);
  s["adopted"] = adopted;
  s["train_accuracy"] = acc.accuracy;
  s["train_loss"] = acc.loss;
  auto f = open_out(cfg.out / "summary.json");
  f << s.dump() << '\n';
  tlog << "# " << s.dump() << '\n';
  log << s.dump() << '\n';
  return kExitOk;
}

int cmd_certify(const RunConfig& cfg_in, std::ostream& log) {
  RunConfig cfg = cfg_in;
  Hyperparams& hp = cfg.hp;
  if (hp.mode != BatchMode::kFullBatch || hp.momentum != 0.0 || hp.weight_decay != 0.0) {
    throw ModeError("certify needs --mode full with momentum and weight decay off");
  }
  std::filesystem::create_directories(cfg.out);

  std::optional<Dataset> data;
  std::optional<Network> net;
  std::unique_ptr<Objective> obj;
  ModelState z0;
  if (cfg.arch == "quadratic") {
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> a(20), b(6);
    for (double& v : a) v = g(rng);
    for (double& v : b) v = g(rng);
    obj = std::make_unique<QuadraticObjective>(a, b);
    z0 = stub_state(a.size(), b.size());
  } else {
    data = load_or_generate(cfg);
    net = build_network(cfg, data->image_shape(), data->class_count);
    obj = std::make_unique<NetworkObjective>(*net, *data);
    z0 = init_state(*net, cfg.seed);
  }

  const double L =
      estimate_lipschitz(*obj, z0, cfg.lipschitz_samples, cfg.lipschitz_radius, cfg.seed + 2);
  if (cfg.alpha == "auto") {
    hp.schedule = AlphaSchedule::constant(10.0 * L, hp.epochs);
  } else if (cfg.alpha.find(':') != std::string::npos) {
    hp.schedule = AlphaSchedule::parse(cfg.alpha);
  } else {
    RunConfig tmp = cfg;
    tmp.resolve_schedule();
    hp.schedule = AlphaSchedule::constant(tmp.hp.schedule.alpha_at(1), hp.epochs);
  }
  hp.validate();
  double alpha_min = hp.schedule.phases.front().alpha;
  for (const AlphaPhase& p : hp.schedule.phases) alpha_min = std::min(alpha_min, p.alpha);
  const bool precondition = alpha_min >= 10.0 * L;

  CertifyOptions co;
  co.lipschitz = L;
  co.min_epochs = std::min(cfg.min_epochs, hp.epochs);
  co.max_epochs = hp.epochs;
  co.window = cfg.window;
  co.tol_step = cfg.tol_step;
  co.tol_w = cfg.tol_w;

  {
    auto f = open_out(cfg.out / "config.ini");
    f << cfg.to_text();
  }
  auto table = open_out(cfg.out / "certify.tsv");
  table << "epoch\talpha\tF\tstep_norm\tdecrease_lhs\tdecrease_rhs\tw_norm\trelerr_bound\tzero_xi"
           "\tzero_gamma\tstate_norm\n";
  const auto t0 = Clock::now();
  const CertifyResult r = certify_run(*obj, z0, hp, co, [&](const EpochDiagnostics& d) {
    table << d.epoch << '\t' << exact(d.alpha) << '\t' << num(d.F_next, 12) << '\t'
          << num(std::sqrt(d.step_norm_sq)) << '\t' << num(d.decrease_lhs) << '\t'
          << num(d.decrease_rhs) << '\t' << num(d.relerr_w_norm) << '\t' << num(d.relerr_bound)
          << '\t' << d.zero_xi_count << '\t' << d.zero_gamma_count << '\t' << num(d.state_norm)
          << '\n';
  });
  const double L_final =
      estimate_lipschitz(*obj, r.final_state, cfg.lipschitz_samples, cfg.lipschitz_radius,
                         cfg.seed + 3);

  const bool violated = r.decrease_violations > 0 || r.relerr_violations > 0 || !r.w3_exact;
  std::string verdict;
  if (!precondition) {
    verdict = "precondition unmet (alpha < 10 L_est); not certified";
  } else if (violated) {
    verdict = "violations found";
  } else {
    verdict = r.verdict.converged ? "certified, converged" : "certified, not converged";
  }

  nlohmann::ordered_json s;
  s["arch"] = cfg.arch;
  s["L_est"] = L;
  s["L_est_final"] = L_final;
  s["alpha_min"] = alpha_min;
  s["precondition_met"] = precondition;
  s["lambda"] = hp.lambda;
  s["beta"] = hp.beta;
  s["epochs_run"] = r.diagnostics.size();
  s["decrease_violations"] = r.decrease_violations;
  s["relerr_violations"] = r.relerr_violations;
  s["w3_exact"] = r.w3_exact;
  s["converged"] = r.verdict.converged;
  s["converged_window_start"] = r.verdict.first_epoch;
  s["limiting_F"] = r.verdict.limiting_F;
  s["max_step_norm_window"] = r.verdict.max_step_norm;
  s["max_w_norm_window"] = r.verdict.max_w_norm;
  s["state_norm_growing"] = r.verdict.norm_growing;
  s["tail_step_fraction"] = tail_step_fraction(r.diagnostics);
  s["verdict"] = verdict;
  auto f = open_out(cfg.out / "certify.json");
  f << s.dump() << '\n';
  log << s.dump(2) << '\n' << "elapsed " << num(seconds_since(t0), 2) << " s\n";
  return (!precondition || violated) ? kExitCertification : kExitOk;
}

int cmd_prune(const std::filesystem::path& checkpoint, const std::filesystem::path& data_path,
              const std::filesystem::path& out, double epsilon, std::uint64_t seed,
              std::ostream& log) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(data_path);
  std::filesystem::create_directories(out);

  ChannelMasks masks;
  try {
    masks = select_channels(ck.net, ck.state, epsilon);
  } catch (const RefusePruneError& e) {
    log << "refusing to prune: " << e.what() << '\n';
    throw;
  }
  const PrunedModel compact = prune_network(ck.net, ck.state, masks);
  const double diff = max_output_difference(ck.net, ck.state, compact, 100, seed);
  const PruneReport report = make_prune_report(ck.net, compact.net, masks, diff);

  const Accuracy before = evaluate_accuracy(ck.net, ck.state, data);
  const Accuracy after = evaluate_accuracy(compact.net, compact.state, data);
  nlohmann::ordered_json acc;
  acc["accuracy_before"] = before.accuracy;
  acc["accuracy_after"] = after.accuracy;
  acc["loss_before"] = before.loss;
  acc["loss_after"] = after.loss;
  acc["argmax_agreement"] = static_cast<double>(argmax_agreement(before, after)) /
                            static_cast<double>(data.size());

  Checkpoint out_ck{compact.net, compact.state, ck.hp, ck.variant, ck.seed, ck.epoch,
                    OptimizerState{}};
  out_ck.opt.rng = ck.opt.rng;
  save_checkpoint(out_ck, out / "pruned.ckpt");
  {
    auto f = open_out(out / "prune_report.jsonl");
    f << prune_report_json(report) << '\n' << acc.dump() << '\n';
  }
  const std::string text = prune_report_table(report);
  {
    auto f = open_out(out / "prune_report.txt");
    f << text;
    f << "accuracy before " << before.accuracy << ", after " << after.accuracy << '\n';
  }
  log << text << "accuracy before " << before.accuracy << ", after " << after.accuracy
      << ", argmax agreement " << acc["argmax_agreement"].get<double>() << '\n';
  return kExitOk;
}

int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& data_path,
             std::ostream& log) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(data_path);
  const Accuracy a = evaluate_accuracy(ck.net, ck.state, data);
  nlohmann::ordered_json j;
  j["samples"] = data.size();
  j["accuracy"] = a.accuracy;
  j["loss"] = a.loss;
  log << j.dump() << '\n';
  return kExitOk;
}

int cmd_finetune(const std::filesystem::path& checkpoint, const std::filesystem::path& data_path,
                 int epochs, double alpha, std::size_t batch_size,
                 const std::filesystem::path& out, std::ostream& log) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(data_path);
  std::filesystem::create_directories(out);
  Hyperparams hp = ck.hp;
  hp.epochs = epochs;
  hp.batch_size = batch_size;
  hp.schedule = AlphaSchedule::constant(alpha, epochs);
  hp.validate();
  const NetworkObjective obj(ck.net, data);

  auto f = open_out(out / "finetune.log");
  const Accuracy start = evaluate_accuracy(ck.net, ck.state, data);
  f << "# alpha = " << exact(alpha) << ", batch-size = " << batch_size << '\n';
  f << "# start accuracy " << exact(start.accuracy) << '\n';
  f << "epoch\tloss\taccuracy\n";
  ck.state = fine_tune(obj, ck.state, hp, epochs, ck.opt,
                       [&](int t, const ModelState& z, const EpochStats& s) {
                         const Accuracy a = evaluate_accuracy(ck.net, z, data);
                         f << t << '\t' << num(s.mean_batch_loss) << '\t' << exact(a.accuracy)
                           << '\n';
                         log << "finetune epoch " << t << "  loss " << num(s.mean_batch_loss, 4)
                             << "  accuracy " << a.accuracy << '\n';
                       });
  save_checkpoint(ck, out / "finetuned.ckpt");
  return kExitOk;
}

int cmd_sweep(const RunConfig& base, const std::vector<double>& lambdas,
              const std::vector<double>& betas, unsigned threads, std::ostream& log) {
  struct Job {
    RunConfig cfg;
    int code = 0;
    std::string error;
  };
  std::vector<Job> jobs;
  for (double l : lambdas)
    for (double b : betas) {
      Job j{base, 0, {}};
      j.cfg.hp.lambda = l;
      j.cfg.hp.beta = b;
      j.cfg.out = base.out / ("lambda_" + exact(l) + "_beta_" + exact(b));
      jobs.push_back(std::move(j));
    }
  std::filesystem::create_directories(base.out);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < jobs.size();) {
      std::ostringstream quiet;
      try {
        jobs[k].code = cmd_train(jobs[k].cfg, quiet);
      } catch (const std::exception& e) {
        jobs[k].code = dynamic_cast<const NumericError*>(&e) ? kExitNumeric : kExitUsage;
        jobs[k].error = e.what();
      }
      std::lock_guard lock(log_mutex);
      log << "finished " << jobs[k].cfg.out.string() << " (exit " << jobs[k].code << ")\n";
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(jobs.size())));
  std::vector<std::thread> pool;
  for (unsigned i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  auto f = open_out(base.out / "sweep.jsonl");
  int worst = kExitOk;
  for (const Job& j : jobs) {
    nlohmann::ordered_json row;
    row["lambda"] = j.cfg.hp.lambda;
    row["beta"] = j.cfg.hp.beta;
    row["exit"] = j.code;
    if (j.code == kExitOk) {
      std::ifstream in(j.cfg.out / "summary.json");
      row["summary"] = nlohmann::ordered_json::parse(in);
    } else {
      row["error"] = j.error;
    }
    f << row.dump() << '\n';
    worst = std::max(worst, j.code);
  }
  return worst;
}

}  // namespace proxslim
