#pragma once
// DMFA training loop: fresh patch masks every epoch, minibatch Adam on the
// restricted NLL (plus an MSE term during warmup epochs), JSON-lines logging
// and resumable checkpoints.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmfa/dmfa.hpp"
#include "dmfa/error.hpp"
#include "dmfa/masking.hpp"
#include "dmfa/mfa.hpp"
#include "dmfa/optim.hpp"
#include "dmfa/rng.hpp"
#include "dmfa/tensorio.hpp"

namespace dmfa {

struct TrainConfig {
  double lr = 4e-5;
  int epochs = 50;
  int batch = 64;
  std::uint64_t seed = 0;
  int warmup_epochs = 0;
  PatchSize patch{14, 14};
  Arch arch = Arch::ConvDense;
  int latent = 4;
  std::vector<int> widths;  // empty = architecture default
  int checkpoint_every = 10;
  double head_init_scale = NetworkSpec{}.head_init_scale;
  double initial_noise = NetworkSpec{}.initial_noise;

  void validate(const ImageShape& shape) const {
    if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs) throw ConfigError("warmup_epochs must lie in [0, epochs]");
    if (latent < 0) throw ConfigError("latent must be non-negative");
    if (!(initial_noise > kNoiseFloor)) throw ConfigError("initial_noise must exceed the noise floor");
    if (patch.height < 1 || patch.width < 1 || patch.height > shape.height || patch.width > shape.width) {
      throw ConfigError("patch does not fit the image");
    }
  }

  NetworkSpec network_spec(const ImageShape& shape) const {
    NetworkSpec s;
    s.arch = arch;
    s.shape = shape;
    s.latent = latent;
    s.widths = widths;
    s.seed = seed;
    s.head_init_scale = head_init_scale;
    s.initial_noise = initial_noise;
    return s;
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"epochs", c.epochs},
       {"batch", c.batch},
       {"seed", c.seed},
       {"warmup_epochs", c.warmup_epochs},
       {"patch", {c.patch.height, c.patch.width}},
       {"arch", to_string(c.arch)},
       {"latent", c.latent},
       {"widths", c.widths},
       {"checkpoint_every", c.checkpoint_every},
       {"head_init_scale", c.head_init_scale},
       {"initial_noise", c.initial_noise},
       {"optimizer", AdamConfig{c.lr}}};
}

inline void from_json(const json& j, TrainConfig& c) {
  c.lr = j.at("lr");
  c.epochs = j.at("epochs");
  c.batch = j.at("batch");
  c.seed = j.at("seed");
  c.warmup_epochs = j.at("warmup_epochs");
  c.patch = {j.at("patch").at(0).get<int>(), j.at("patch").at(1).get<int>()};
  c.arch = parse_arch(j.at("arch").get<std::string>());
  c.latent = j.at("latent");
  c.widths = j.at("widths").get<std::vector<int>>();
  c.checkpoint_every = j.value("checkpoint_every", 10);
  c.head_init_scale = j.value("head_init_scale", NetworkSpec{}.head_init_scale);
  c.initial_noise = j.value("initial_noise", NetworkSpec{}.initial_noise);
}

struct EpochLog {
  int epoch = 0;
  LossMode loss_mode = LossMode::Nll;
  double mean_loss = 0;
  double mean_nll = 0;
  double seconds = 0;
  bool mode_switch = false;  // first epoch after the warmup schedule ended
};

/// One JSON object per epoch. `with_time = false` drops the wall-clock field,
/// which is the only non-reproducible entry.
inline json to_json(const EpochLog& e, bool with_time = true) {
  json j = {{"epoch", e.epoch}, {"loss_mode", to_string(e.loss_mode)}, {"mean_loss", e.mean_loss}, {"mean_nll", e.mean_nll}};
  if (with_time) j["seconds"] = e.seconds;
  if (e.mode_switch) j["mode_switch"] = true;
  return j;
}

class DmfaTrainer {
 public:
  DmfaTrainer(const ImageShape& shape, TrainConfig config)
      : config_(std::move(config)), net_(config_.network_spec(shape)), adam_(AdamConfig{config_.lr}) {
    config_.validate(shape);
  }

  const TrainConfig& config() const { return config_; }
  DmfaNetwork<float>& network() { return net_; }
  int epochs_done() const { return epoch_; }

  LossMode mode_for_epoch(int epoch_index) const {
    return epoch_index < config_.warmup_epochs ? LossMode::NllPlusMse : LossMode::Nll;
  }

  EpochLog run_epoch(const Dataset& data) {
    if (data.count() == 0) throw ConfigError("train_dmfa: empty dataset");
    if (data.shape != net_.spec().shape) throw ShapeError("dataset shape does not match the network");
    const auto t0 = std::chrono::steady_clock::now();
    const int e = epoch_;
    EpochLog log;
    log.epoch = e + 1;
    log.loss_mode = mode_for_epoch(e);
    log.mode_switch = e > 0 && mode_for_epoch(e - 1) != log.loss_mode;

    const std::size_t count = data.count();
    const auto order = epoch_permutation(count, config_.seed, static_cast<std::uint64_t>(e));
    const std::size_t batch = static_cast<std::size_t>(config_.batch);
    double loss_sum = 0, nll_sum = 0;
    std::vector<MaskedSample> samples;
    std::vector<const MaskedSample*> ptrs;
    for (std::size_t start = 0; start < count; start += batch) {
      const std::size_t b = std::min(batch, count - start);
      samples.clear();
      ptrs.clear();
      for (std::size_t s = 0; s < b; ++s) {
        const std::size_t idx = order[start + s];
        samples.push_back(apply_mask(data.sample(idx),
                                     sample_patch_mask(data.shape, config_.patch, config_.seed,
                                                       static_cast<std::uint64_t>(e), idx)));
      }
      for (const auto& s : samples) ptrs.push_back(&s);
      BatchLoss bl;
      try {
        bl = loss_gradients<double>(net_, ptrs, log.loss_mode);
      } catch (const DivergedError& err) {
        throw DivergedError(std::string(err.what()) + " in epoch " + std::to_string(e + 1), e + 1);
      }
      loss_sum += bl.mean_loss * static_cast<double>(b);
      nll_sum += bl.mean_nll * static_cast<double>(b);
      adam_.step(net_.param_refs());
    }
    ++epoch_;
    log.mean_loss = loss_sum / static_cast<double>(count);
    log.mean_nll = nll_sum / static_cast<double>(count);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
  }

  /// Network parameters, Adam moments, epoch counter and config.
  Container checkpoint() {
    Container c;
    net_.save(c);
    c.meta["trainer"] = {{"epoch", epoch_}, {"config", config_}};
    adam_.save(c, net_.param_refs());
    return c;
  }

  void save_checkpoint(const fs::path& path) { save_container(path, checkpoint()); }

  static DmfaTrainer resume(const Container& c) {
    if (!c.meta.contains("trainer")) throw FormatError("container is not a training checkpoint");
    const auto spec = c.meta.at("arch").get<NetworkSpec>();
    DmfaTrainer t(spec.shape, c.meta.at("trainer").at("config").get<TrainConfig>());
    t.net_ = DmfaNetwork<float>::load(c);
    t.adam_.load(c, t.net_.param_refs());
    t.epoch_ = c.meta.at("trainer").at("epoch").get<int>();
    return t;
  }

  static DmfaTrainer resume(const fs::path& path) { return resume(load_container(path)); }

 private:
  TrainConfig config_;
  DmfaNetwork<float> net_;
  Adam<float> adam_;
  int epoch_ = 0;
};

struct TrainOptions {
  std::optional<fs::path> checkpoint_dir;  // periodic + final checkpoints
  std::optional<fs::path> log_path;        // JSON-lines epoch log
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  DmfaNetwork<float> network;
  std::vector<EpochLog> log;
};

/// Runs `trainer` until config().epochs. On divergence the last good
/// checkpoint is written (if a checkpoint directory is set) before rethrowing.
inline std::vector<EpochLog> continue_training(DmfaTrainer& trainer, const Dataset& data, const TrainOptions& opt = {}) {
  std::vector<EpochLog> logs;
  std::ofstream log_file;
  if (opt.log_path) {
    log_file.open(*opt.log_path, std::ios::app);
    if (!log_file) throw Error("cannot open log " + opt.log_path->string());
  }
  std::optional<Container> last_good;
  if (opt.checkpoint_dir) fs::create_directories(*opt.checkpoint_dir);
  while (trainer.epochs_done() < trainer.config().epochs) {
    if (opt.checkpoint_dir) last_good = trainer.checkpoint();
    try {
      logs.push_back(trainer.run_epoch(data));
    } catch (const DivergedError&) {
      if (opt.checkpoint_dir && last_good) save_container(*opt.checkpoint_dir / "last_good.dmfa", *last_good);
      throw;
    }
    const EpochLog& e = logs.back();
    if (log_file) log_file << to_json(e).dump() << '\n' << std::flush;
    if (opt.on_epoch) opt.on_epoch(e);
    if (opt.checkpoint_dir) {
      const int every = trainer.config().checkpoint_every;
      if (every > 0 && e.epoch % every == 0) {
        trainer.save_checkpoint(*opt.checkpoint_dir / ("epoch_" + std::to_string(e.epoch) + ".dmfa"));
      }
    }
  }
  if (opt.checkpoint_dir) trainer.save_checkpoint(*opt.checkpoint_dir / "final.dmfa");
  return logs;
}

inline TrainResult train_dmfa(const Dataset& data, const TrainConfig& config, const TrainOptions& opt = {}) {
  if (data.count() == 0) throw ConfigError("train_dmfa: empty dataset");
  DmfaTrainer trainer(data.shape, config);
  auto logs = continue_training(trainer, data, opt);
  return {std::move(trainer.network()), std::move(logs)};
}

// ---------------------------------------------------------------------------
// MFA model files

inline Container mfa_to_container(const MfaModel<float>& mix) {
  mix.validate();
  Container c;
  c.meta["kind"] = "mfa";
  c.meta["k"] = mix.size();
  c.meta["n"] = mix.dim();
  c.meta["latent"] = mix.rank();
  c.add("log_weights", "log_weights", {mix.size()}, {mix.log_weights.data(), mix.log_weights.data() + mix.size()});
  for (Index i = 0; i < mix.size(); ++i) {
    const auto& g = mix.components[static_cast<std::size_t>(i)];
    const std::string tag = std::to_string(i);
    c.add("mean/" + tag, "mean", {g.dim()}, {g.mean.data(), g.mean.data() + g.dim()});
    c.add("factors/" + tag, "factors", {g.dim(), g.rank()}, {g.factors.data(), g.factors.data() + g.factors.size()});
    c.add("noise/" + tag, "noise", {g.dim()}, {g.noise.data(), g.noise.data() + g.dim()});
  }
  return c;
}

inline MfaModel<float> mfa_from_container(const Container& c) {
  if (c.meta.value("kind", "") != "mfa") throw FormatError("container does not hold an MFA model");
  const Index k = c.meta.at("k"), n = c.meta.at("n"), l = c.meta.at("latent");
  auto expect = [](const Tensor& t, std::size_t size) {
    if (t.data.size() != size) throw FormatError("tensor '" + t.name + "' has the wrong size");
    return t.data;
  };
  MfaModel<float> mix;
  const auto lw = expect(c.at("log_weights"), static_cast<std::size_t>(k));
  mix.log_weights = Eigen::Map<const Vec<float>>(lw.data(), k);
  for (Index i = 0; i < k; ++i) {
    const std::string tag = std::to_string(i);
    const auto mu = expect(c.at("mean/" + tag), static_cast<std::size_t>(n));
    const auto a = expect(c.at("factors/" + tag), static_cast<std::size_t>(n * l));
    const auto d = expect(c.at("noise/" + tag), static_cast<std::size_t>(n));
    mix.components.push_back({Eigen::Map<const Vec<float>>(mu.data(), n), Eigen::Map<const Mat<float>>(a.data(), n, l),
                              Eigen::Map<const Vec<float>>(d.data(), n)});
  }
  mix.validate();
  return mix;
}

inline void save_mfa(const fs::path& path, const MfaModel<float>& mix) { save_container(path, mfa_to_container(mix)); }
inline MfaModel<float> load_mfa(const fs::path& path) { return mfa_from_container(load_container(path)); }

inline void save_dmfa(const fs::path& path, DmfaNetwork<float>& net) {
  Container c;
  net.save(c);
  save_container(path, c);
}
inline DmfaNetwork<float> load_dmfa(const fs::path& path) { return DmfaNetwork<float>::load(load_container(path)); }

}  // namespace dmfa
