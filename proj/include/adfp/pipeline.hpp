#pragma once

#include <optional>
#include <string>
#include <vector>

#include "adfp/attacks.hpp"
#include "adfp/dataset.hpp"
#include "adfp/denoiser.hpp"
#include "adfp/metrics.hpp"

namespace adfp {

struct RunConfig {
  uint64_t seed = 42;
  std::string data = "toy";  // "toy" or "cifar10:<path>"
  std::string out = "run";

  int64_t benign_count = 2000;
  int64_t source_count = 2000;
  int64_t adv_request = 2000;
  int image_size = 32;
  int classes = 10;

  int dm_T = 200;
  double dm_beta_start = 1e-4;
  double dm_beta_end = 0.02;
  int dm_S = 50;
  int dm_epochs = 30;
  int dm_batch = 64;
  double dm_lr = 1e-3;
  int dm_base = 8;
  int dm_temb = 32;
  int dm_checkpoint_every = 10;

  int victim_epochs = 15;
  int victim_batch = 64;
  double victim_lr = 1e-3;
  int victim_base = 16;

  int detector_epochs = 10;
  int detector_batch = 64;
  double detector_lr = 1e-3;
  int detector_base = 16;
  int identifier_epochs = 8;

  std::vector<std::string> attacks = {"fgsm", "pgd",    "aa",  "masked_pgd",
                                      "df",   "cw",     "square", "nes",
                                      "bandits"};
  std::vector<double> eps_list;  // empty = per-family defaults

  double pgd_alpha = 2.0 / 255.0;
  int pgd_iters = 10;
  int apgd_iters = 20;
  int64_t query_budget = 1000;
  int nes_samples = 10;
  double nes_sigma = 1e-3;
  int nes_iters = 40;
  double blackbox_eps = 0.05;
  int patch_size = 8;
  int df_iters = 50;
  int cw_iters = 60;
  double cw_c = 1.0;

  int spectrum_depth = 5;
  int64_t spectrum_samples = 64;
  bool stage_identifier = true;
  bool stage_transfer = true;
  bool stage_spectrum = true;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  // key = value text, '#' comments, comma lists, a/b fractions
  static RunConfig from_config_text(const std::string& text);
};

struct AttackGridEntry {
  AttackFamily family;
  double epsilon;
  std::string tag;
};

std::vector<AttackGridEntry> attack_grid(const RunConfig& cfg);
AttackSpec make_attack_spec(const RunConfig& cfg, const AttackGridEntry& entry);
std::string attack_tag(AttackFamily family, double epsilon);

// ---- pipeline stages (idempotent; skip when artifacts already exist) ----
void stage_data(const RunConfig& cfg);
void stage_victim(const RunConfig& cfg);
void stage_dm(const RunConfig& cfg);
void stage_attacks(const RunConfig& cfg,
                   const std::vector<AttackGridEntry>& entries);
void stage_transform(const RunConfig& cfg, int S,
                     const std::vector<AttackGridEntry>& entries);
void stage_detectors(const RunConfig& cfg,
                     const std::vector<AttackGridEntry>& entries);
void stage_reports(const RunConfig& cfg,
                   const std::vector<AttackGridEntry>& entries);

// Full run per the training algorithm; `resume` permits continuing an
// existing run directory.
void run_pipeline(const RunConfig& cfg, bool resume = false);

// Re-transforms + retrains the detector for each subsample count and writes
// reports/ablation.csv (steps-vs-accuracy table).
void run_ablate_steps(const RunConfig& cfg, const std::vector<int>& s_list,
                      const std::string& attack_tag);

// Detector-transfer grid over named attack tags; writes transfer CSV/JSON.
void run_transfer(const RunConfig& cfg, const std::vector<std::string>& rows,
                  const std::vector<std::string>& cols,
                  const std::string& out_name = "transfer");

// Power-spectrum report over benign + attack test sets.
void run_spectrum(const RunConfig& cfg, const std::vector<std::string>& tags);

// Renders SVG plots from existing reports.
void run_plot(const std::string& run_dir);

// Verifies that every expected artifact exists and parses; returns the
// missing-item list (empty = pass).
std::vector<std::string> run_audit(const RunConfig& cfg);

}  // namespace adfp
