// adfp: train a toy diffusion model, attack a victim classifier, transform
// both benign and adversarial images through DDIM inversion + reversion, and
// train detectors that separate and identify the attacks.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "adfp/pipeline.hpp"

namespace {

struct CliOverrides {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> attacks;
  std::optional<std::string> eps;
  std::optional<int> dm_steps;
  std::optional<int> subsample;
  std::optional<int> epochs;
  bool resume = false;
};

adfp::RunConfig resolve_config(const CliOverrides& o) {
  adfp::RunConfig cfg;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in)
      throw adfp::ConfigError("cannot open config '" + o.config_path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    cfg = adfp::RunConfig::from_config_text(ss.str());
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (o.data) cfg.data = *o.data;
  if (o.attacks) {
    cfg.attacks.clear();
    std::stringstream ss(*o.attacks);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) cfg.attacks.push_back(item);
  }
  if (o.eps) {
    cfg.eps_list.clear();
    std::stringstream ss(*o.eps);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const size_t slash = item.find('/');
      if (slash != std::string::npos)
        cfg.eps_list.push_back(std::stod(item.substr(0, slash)) /
                               std::stod(item.substr(slash + 1)));
      else if (!item.empty())
        cfg.eps_list.push_back(std::stod(item));
    }
  }
  if (o.dm_steps) cfg.dm_T = *o.dm_steps;
  if (o.subsample) cfg.dm_S = *o.subsample;
  if (o.epochs) {
    cfg.dm_epochs = *o.epochs;
    cfg.victim_epochs = *o.epochs;
    cfg.detector_epochs = *o.epochs;
  }
  return cfg;
}

void add_common(CLI::App* app, CliOverrides& o) {
  app->add_option("--config", o.config_path, "key = value config file");
  app->add_option("--seed", o.seed, "master seed");
  app->add_option("--out", o.out, "run directory");
  app->add_option("--data", o.data, "toy | cifar10:<path>");
  app->add_option("--attacks", o.attacks, "comma list of attack families");
  app->add_option("--eps", o.eps, "comma list of epsilons (a/b allowed)");
  app->add_option("--dm-steps", o.dm_steps, "diffusion steps T");
  app->add_option("--subsample", o.subsample, "DDIM subsample count S");
  app->add_option("--epochs", o.epochs, "override all training epoch counts");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffusion-transform adversarial example detection lab"};
  app.require_subcommand(1);

  CliOverrides o;
  std::vector<int> s_list;
  std::string ablate_attack = "pgd_e8";
  std::string rows_arg, cols_arg, spectrum_tags;
  std::string plot_dir;

  auto* p_pipeline = app.add_subcommand("pipeline", "run every stage end to end");
  add_common(p_pipeline, o);
  p_pipeline->add_flag("--resume", o.resume, "continue an existing run dir");

  auto* p_data = app.add_subcommand("train-victim", "data + victim stages");
  add_common(p_data, o);
  auto* p_dm = app.add_subcommand("train-dm", "data + denoiser stages");
  add_common(p_dm, o);
  auto* p_attack = app.add_subcommand("attack", "build attack datasets");
  add_common(p_attack, o);
  auto* p_transform = app.add_subcommand("transform", "transform datasets");
  add_common(p_transform, o);
  auto* p_det = app.add_subcommand("train-detector", "train per-attack detectors");
  add_common(p_det, o);
  auto* p_eval = app.add_subcommand("evaluate", "write reports from checkpoints");
  add_common(p_eval, o);

  auto* p_ablate = app.add_subcommand("ablate-steps",
                                      "reverse-steps ablation table");
  add_common(p_ablate, o);
  p_ablate->add_option("--subsample-list", s_list, "S values")->required();
  p_ablate->add_option("--attack-tag", ablate_attack, "attack dataset tag");

  auto* p_transfer = app.add_subcommand("transfer", "detector transfer grid");
  add_common(p_transfer, o);
  p_transfer->add_option("--rows", rows_arg, "training tags")->required();
  p_transfer->add_option("--cols", cols_arg, "evaluation tags")->required();

  auto* p_spectrum = app.add_subcommand("spectrum", "1-D power spectrum report");
  add_common(p_spectrum, o);
  p_spectrum->add_option("--tags", spectrum_tags, "attack tags to include");

  auto* p_plot = app.add_subcommand("plot", "render SVG plots from reports");
  p_plot->add_option("--out", plot_dir, "run directory")->required();

  auto* p_audit = app.add_subcommand("audit", "verify run directory artifacts");
  add_common(p_audit, o);

  CLI11_PARSE(app, argc, argv);

  auto split_arg = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) out.push_back(item);
    return out;
  };

  try {
    if (p_plot->parsed()) {
      adfp::run_plot(plot_dir);
      return 0;
    }
    const adfp::RunConfig cfg = resolve_config(o);
    const auto entries = adfp::attack_grid(cfg);

    if (p_pipeline->parsed()) {
      adfp::run_pipeline(cfg, o.resume);
    } else if (p_data->parsed()) {
      adfp::stage_data(cfg);
      adfp::stage_victim(cfg);
    } else if (p_dm->parsed()) {
      adfp::stage_data(cfg);
      adfp::stage_dm(cfg);
    } else if (p_attack->parsed()) {
      adfp::stage_attacks(cfg, entries);
    } else if (p_transform->parsed()) {
      adfp::stage_transform(cfg, cfg.dm_S, entries);
    } else if (p_det->parsed()) {
      adfp::stage_detectors(cfg, entries);
    } else if (p_eval->parsed()) {
      adfp::stage_reports(cfg, entries);
    } else if (p_ablate->parsed()) {
      adfp::run_ablate_steps(cfg, s_list, ablate_attack);
    } else if (p_transfer->parsed()) {
      adfp::run_transfer(cfg, split_arg(rows_arg), split_arg(cols_arg));
    } else if (p_spectrum->parsed()) {
      std::vector<std::string> tags = split_arg(spectrum_tags);
      if (tags.empty())
        for (const auto& e : entries) tags.push_back(e.tag);
      adfp::run_spectrum(cfg, tags);
    } else if (p_audit->parsed()) {
      const auto missing = adfp::run_audit(cfg);
      if (missing.empty()) {
        std::printf("audit: OK\n");
      } else {
        for (const auto& m : missing)
          std::fprintf(stderr, "audit: missing %s\n", m.c_str());
        return 3;
      }
    }
  } catch (const adfp::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
