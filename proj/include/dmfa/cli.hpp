#pragma once
// Command-line front end: train-mfa, train-dmfa, eval, impute, export-params.
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dmfa/dmfa_all.hpp"

#ifndef DMFA_VERSION
#define DMFA_VERSION "0.1.0"
#endif

namespace dmfa::cli {

struct DataFlags {
  std::string data;
  std::string format = "idx";
};

struct CommonFlags {
  DataFlags data;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<int> patch;  // empty = default for the image size
  std::uint64_t mask_seed = 1234;
  std::string impute_mode = "top-component";
  std::vector<std::string> models;
};

inline Dataset load_data(const DataFlags& f) {
  if (f.format == "idx") return load_idx(f.data);
  // imgdir: the size comes from the first image in lexicographic order
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(f.data)) {
    const auto ext = e.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm" || ext == ".PGM" || ext == ".PPM") files.push_back(e.path());
  }
  if (files.empty()) throw FormatError("no PGM/PPM images in " + f.data);
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  const PnmImage first = read_pnm(files.front());
  return load_image_dir(f.data, first.shape.height, first.shape.width);
}

/// 14x14 for 28x28 inputs, 16x16 for 32x32, half the image otherwise.
inline PatchSize resolve_patch(const std::vector<int>& flag, const ImageShape& shape) {
  if (flag.size() == 2) return {flag[0], flag[1]};
  if (!flag.empty()) throw ConfigError("--patch takes two values: H W");
  return {std::max(1, shape.height / 2), std::max(1, shape.width / 2)};
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json manifest(const std::string& command, const std::vector<std::string>& argv, json resolved) {
  return {{"command", command}, {"argv", argv}, {"resolved", std::move(resolved)}, {"version", DMFA_VERSION}};
}

enum class ModelKind { Mfa, Dmfa };

struct LoadedModel {
  ModelKind kind;
  std::string path;
  std::optional<MfaModel<float>> mfa;
  std::optional<DmfaNetwork<float>> dmfa;
};

inline LoadedModel load_model(const std::string& path) {
  Container c = load_container(path);
  const std::string kind = c.meta.value("kind", "");
  if (kind == "mfa") return {ModelKind::Mfa, path, mfa_from_container(c), std::nullopt};
  if (kind == "dmfa") return {ModelKind::Dmfa, path, std::nullopt, DmfaNetwork<float>::load(c)};
  throw FormatError(path + " holds neither an MFA nor a DMFA model");
}

inline NamedImputer make_imputer(LoadedModel& m, ImputeMode mode, std::vector<MfaModel<double>>& keep) {
  if (m.kind == ModelKind::Dmfa) {
    auto* net = &*m.dmfa;
    return {"dmfa", [net](const MaskedSample& s) { return impute_dmfa(*net, s); }};
  }
  keep.push_back(m.mfa->cast<double>());
  const MfaModel<double>* mix = &keep.back();
  return {"mfa", [mix, mode](const MaskedSample& s) { return impute_mfa(*mix, s, mode); }};
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Conditional densities of missing pixels: MFA baseline and DMFA"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DMFA_VERSION);
  std::vector<std::string> args(argv, argv + argc);

  CommonFlags f;
  MfaTrainConfig mfa_cfg;
  mfa_cfg.k = 50;
  mfa_cfg.latent = 6;
  TrainConfig dmfa_cfg;
  std::string arch_flag;
  std::optional<int> warmup_flag;
  std::string resume;
  int grid_rows = 10;
  int count = 10;

  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", f.data.data, "IDX image file or PGM/PPM directory")->required()->check(CLI::ExistingPath);
    sub->add_option("--format", f.data.format, "idx | imgdir")->check(CLI::IsMember({"idx", "imgdir"}));
    sub->add_option("--out", f.out, "output directory")->required();
  };
  auto add_eval = [&](CLI::App* sub) {
    sub->add_option("--patch", f.patch, "missing patch size H W")->expected(2);
    sub->add_option("--mask-seed", f.mask_seed, "seed of the evaluation masks");
    sub->add_option("--impute-mode", f.impute_mode, "MFA imputation")
        ->check(CLI::IsMember({"top-component", "mixture-mean"}));
  };

  auto* train_mfa_cmd = app.add_subcommand("train-mfa", "fit the MFA baseline by gradient-based maximum likelihood");
  add_data(train_mfa_cmd);
  train_mfa_cmd->add_option("--k", mfa_cfg.k, "mixture components")->check(CLI::PositiveNumber);
  train_mfa_cmd->add_option("--latent", mfa_cfg.latent, "factors per component")->check(CLI::NonNegativeNumber);
  train_mfa_cmd->add_option("--lr", mfa_cfg.lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
  train_mfa_cmd->add_option("--epochs", mfa_cfg.epochs)->check(CLI::PositiveNumber);
  train_mfa_cmd->add_option("--batch", mfa_cfg.batch)->check(CLI::PositiveNumber);
  train_mfa_cmd->add_option("--seed", f.seed);

  auto* train_dmfa_cmd = app.add_subcommand("train-dmfa", "train the deep conditional density network");
  add_data(train_dmfa_cmd);
  train_dmfa_cmd->add_option("--latent", dmfa_cfg.latent)->check(CLI::NonNegativeNumber);
  train_dmfa_cmd->add_option("--lr", dmfa_cfg.lr)->check(CLI::NonNegativeNumber);
  train_dmfa_cmd->add_option("--epochs", dmfa_cfg.epochs)->check(CLI::PositiveNumber);
  train_dmfa_cmd->add_option("--batch", dmfa_cfg.batch)->check(CLI::PositiveNumber);
  train_dmfa_cmd->add_option("--seed", f.seed);
  train_dmfa_cmd->add_option("--widths", dmfa_cfg.widths, "four layer widths (default per architecture)")
      ->expected(4)
      ->check(CLI::PositiveNumber);
  train_dmfa_cmd->add_option("--arch", arch_flag)->check(CLI::IsMember({"conv-dense", "full-conv"}));
  train_dmfa_cmd->add_option("--patch", f.patch, "missing patch size H W")->expected(2);
  train_dmfa_cmd->add_option("--warmup-epochs", warmup_flag)->check(CLI::NonNegativeNumber);
  train_dmfa_cmd->add_option("--resume", resume, "continue from a training checkpoint")->check(CLI::ExistingFile);

  auto* eval_cmd = app.add_subcommand("eval", "score models on identically masked test images");
  add_data(eval_cmd);
  eval_cmd->add_option("--model", f.models, "MFA and/or DMFA model files")->required()->check(CLI::ExistingFile);
  add_eval(eval_cmd);
  eval_cmd->add_option("--grid-rows", grid_rows, "rows of the imputation grid (0 = none)")->check(CLI::NonNegativeNumber);

  auto* impute_cmd = app.add_subcommand("impute", "fill the masked patch of test images");
  add_data(impute_cmd);
  impute_cmd->add_option("--model", f.models)->required()->expected(1)->check(CLI::ExistingFile);
  add_eval(impute_cmd);
  impute_cmd->add_option("--count", count, "images to impute (0 = all)")->check(CLI::NonNegativeNumber);

  auto* export_cmd = app.add_subcommand("export-params", "write mean, factor and noise images of DMFA outputs");
  add_data(export_cmd);
  export_cmd->add_option("--model", f.models)->required()->expected(1)->check(CLI::ExistingFile);
  export_cmd->add_option("--patch", f.patch, "missing patch size H W")->expected(2);
  export_cmd->add_option("--mask-seed", f.mask_seed);
  export_cmd->add_option("--count", count, "test images to export")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << DMFA_VERSION << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    const fs::path out_dir = f.out;
    fs::create_directories(out_dir);
    const Dataset data = load_data(f.data);
    if (data.count() == 0) throw ConfigError("dataset " + f.data.data + " is empty");
    json resolved = {{"data", f.data.data}, {"format", f.data.format}, {"out", f.out}, {"shape", data.shape},
                     {"count", data.count()}, {"threads", worker_count()}};

    if (train_mfa_cmd->parsed()) {
      mfa_cfg.seed = f.seed;
      resolved["config"] = mfa_cfg;
      write_json(out_dir / "manifest.json", manifest("train-mfa", args, resolved));
      std::ofstream log(out_dir / "train_log.jsonl");
      auto result = train_mfa(data, mfa_cfg, [&](const MfaEpochLog& e) {
        log << json{{"epoch", e.epoch}, {"mean_nll", e.mean_nll}, {"seconds", e.seconds}}.dump() << '\n' << std::flush;
        out << "epoch " << e.epoch << " mean NLL " << e.mean_nll << '\n';
      });
      save_mfa(out_dir / "model.mfa", result.model);
      return 0;
    }

    const PatchSize patch = resolve_patch(f.patch, data.shape);
    resolved["patch"] = {patch.height, patch.width};

    if (train_dmfa_cmd->parsed()) {
      dmfa_cfg.seed = f.seed;
      dmfa_cfg.patch = patch;
      dmfa_cfg.arch = arch_flag.empty() ? (data.shape.channels == 1 ? Arch::ConvDense : Arch::FullConv)
                                        : parse_arch(arch_flag);
      dmfa_cfg.warmup_epochs = warmup_flag.value_or(dmfa_cfg.arch == Arch::FullConv ? 10 : 0);
      dmfa_cfg.warmup_epochs = std::min(dmfa_cfg.warmup_epochs, dmfa_cfg.epochs);
      std::optional<DmfaTrainer> trainer;
      if (!resume.empty()) {
        trainer.emplace(DmfaTrainer::resume(fs::path(resume)));
      } else {
        trainer.emplace(data.shape, dmfa_cfg);
      }
      resolved["config"] = trainer->config();
      resolved["resume"] = resume;
      write_json(out_dir / "manifest.json", manifest("train-dmfa", args, resolved));
      TrainOptions opt;
      opt.checkpoint_dir = out_dir / "checkpoints";
      opt.log_path = out_dir / "train_log.jsonl";
      opt.on_epoch = [&](const EpochLog& e) { out << to_json(e).dump() << '\n' << std::flush; };
      continue_training(*trainer, data, opt);
      save_dmfa(out_dir / "model.dmfa", trainer->network());
      return 0;
    }

    const ImputeMode mode = parse_impute_mode(f.impute_mode);
    resolved["mask_seed"] = f.mask_seed;
    resolved["impute_mode"] = f.impute_mode;
    resolved["models"] = f.models;
    std::vector<LoadedModel> models;
    for (const auto& p : f.models) models.push_back(load_model(p));

    if (eval_cmd->parsed()) {
      write_json(out_dir / "manifest.json", manifest("eval", args, resolved));
      json metrics = {{"mask_seed", f.mask_seed}, {"patch", {patch.height, patch.width}}, {"models", json::array()}};
      for (auto& m : models) {
        Metrics r = m.kind == ModelKind::Mfa ? evaluate_mfa(*m.mfa, data, patch, f.mask_seed, mode)
                                             : evaluate_dmfa(*m.dmfa, data, patch, f.mask_seed);
        json j = r;
        j["path"] = m.path;
        if (m.kind == ModelKind::Mfa) j["impute_mode"] = f.impute_mode;
        metrics["models"].push_back(j);
        out << r.model << ": NLL " << r.mean_nll << "  MSE " << r.mean_mse << '\n';
      }
      write_json(out_dir / "metrics.json", metrics);
      if (grid_rows > 0) {
        std::vector<MfaModel<double>> keep;
        keep.reserve(models.size());
        std::vector<NamedImputer> imputers;
        for (auto& m : models) imputers.push_back(make_imputer(m, mode, keep));
        std::vector<MaskedSample> rows;
        for (std::size_t i = 0; i < std::min<std::size_t>(static_cast<std::size_t>(grid_rows), data.count()); ++i)
          rows.push_back(eval_sample(data, i, patch, f.mask_seed));
        export_imputation_grid(imputers, rows, out_dir / (data.shape.channels == 3 ? "imputation_grid.ppm" : "imputation_grid.pgm"));
      }
      return 0;
    }

    if (impute_cmd->parsed()) {
      write_json(out_dir / "manifest.json", manifest("impute", args, resolved));
      std::vector<MfaModel<double>> keep;
      keep.reserve(1);
      NamedImputer imp = make_imputer(models.front(), mode, keep);
      const std::size_t n = count == 0 ? data.count() : std::min<std::size_t>(static_cast<std::size_t>(count), data.count());
      Container c;
      c.meta["kind"] = "imputations";
      c.meta["shape"] = data.shape;
      c.meta["mask_seed"] = f.mask_seed;
      std::vector<float> imputed, masks;
      std::vector<MaskedSample> rows;
      for (std::size_t i = 0; i < n; ++i) {
        MaskedSample s = eval_sample(data, i, patch, f.mask_seed);
        const auto x = imp.impute(s);
        imputed.insert(imputed.end(), x.begin(), x.end());
        for (auto b : s.mask.bits) masks.push_back(static_cast<float>(b));
        rows.push_back(std::move(s));
      }
      const auto dim = static_cast<std::int64_t>(data.dim());
      c.add("imputed", "imputed", {static_cast<std::int64_t>(n), dim}, std::move(imputed));
      c.add("mask", "mask", {static_cast<std::int64_t>(n), dim}, std::move(masks));
      save_container(out_dir / "imputed.dmfa", c);
      export_imputation_grid({imp}, rows, out_dir / (data.shape.channels == 3 ? "imputation_grid.ppm" : "imputation_grid.pgm"));
      out << "imputed " << n << " images\n";
      return 0;
    }

    if (export_cmd->parsed()) {
      if (models.front().kind != ModelKind::Dmfa) throw ConfigError("export-params needs a DMFA model");
      write_json(out_dir / "manifest.json", manifest("export-params", args, resolved));
      auto& net = *models.front().dmfa;
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(count), data.count());
      for (std::size_t i = 0; i < n; ++i) {
        const MaskedSample s = eval_sample(data, i, patch, f.mask_seed);
        const auto g = net.forward(s);
        const fs::path dir = out_dir / ("sample_" + std::to_string(i));
        export_parameter_images(g, data.shape, dir);
        export_mask_pgm(dir / "mask.pgm", s.mask);
      }
      out << "exported parameters of " << n << " images\n";
      return 0;
    }
  } catch (const CLI::Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dmfa::cli
