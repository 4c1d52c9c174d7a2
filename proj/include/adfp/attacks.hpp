#pragma once

#include <map>
#include <optional>
#include <string>

#include "adfp/classifier.hpp"
#include "adfp/dataset.hpp"

namespace adfp {

enum class AttackFamily {
  fgsm,
  pgd,
  masked_pgd,
  apgd_ce,
  apgd_dlr,
  autoattack,
  deepfool,
  cw,
  square,
  nes,
  bandits
};

std::string to_string(AttackFamily f);
AttackFamily attack_family_from_string(const std::string& s);
bool is_black_box(AttackFamily f);
// DeepFool and CW minimize distortion instead of honoring an L-inf budget.
bool respects_epsilon(AttackFamily f);

struct PatchRect {
  int x = 0, y = 0, h = 0, w = 0;  // rows [x, x+h), cols [y, y+w)
};

struct AttackSpec {
  AttackFamily family = AttackFamily::fgsm;
  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int iters = 10;
  std::optional<PatchRect> patch;
  int64_t query_budget = 1000;
  uint64_t seed = 0;
  bool random_start = true;
  // norm-minimizing attacks
  double cw_c = 1.0;
  double cw_kappa = 0.0;
  double cw_lr = 0.01;
  // gradient-estimation attacks
  double nes_sigma = 1e-3;
  int nes_samples = 10;
  double bandits_prior_lr = 0.1;
  double bandits_delta = 0.1;
  double bandits_fd_eta = 0.1;
  int bandits_tile = 8;

  std::string to_json() const;
  static AttackSpec from_json(const std::string& text);
};

struct AdversarialBatch {
  Tensor originals;      // [N,C,H,W]
  Tensor adversarials;   // same shape, in [0,1]
  std::vector<int> true_labels;
  std::vector<int> pred_before;
  std::vector<int> pred_after;
  std::vector<uint8_t> success;  // post-attack argmax != true label
  std::vector<int64_t> queries;  // per sample; zeros for white-box attacks
  std::vector<std::string> attribution;  // ensemble member per sample
  std::map<std::string, double> stats;

  int64_t count() const { return static_cast<int64_t>(true_labels.size()); }
  double success_rate() const;
  // max |adv - orig| restricted to L-inf attacks' contract
  double max_linf() const;
};

// ---- white-box ----
AdversarialBatch fgsm(const VictimModel& model, const Tensor& x,
                      std::span<const int> y, double epsilon);
AdversarialBatch pgd(const VictimModel& model, const Tensor& x,
                     std::span<const int> y, const AttackSpec& spec);
AdversarialBatch masked_pgd(const VictimModel& model, const Tensor& x,
                            std::span<const int> y, const AttackSpec& spec);
enum class ApgdLoss { ce, dlr };
AdversarialBatch apgd(const VictimModel& model, const Tensor& x,
                      std::span<const int> y, const AttackSpec& spec,
                      ApgdLoss loss);
AdversarialBatch autoattack_ensemble(const VictimModel& model, const Tensor& x,
                                     std::span<const int> y,
                                     const AttackSpec& spec);
AdversarialBatch deepfool(const VictimModel& model, const Tensor& x,
                          std::span<const int> y, int iters = 50,
                          double overshoot = 0.02);
AdversarialBatch cw_l2(const VictimModel& model, const Tensor& x,
                       std::span<const int> y, double c, double kappa,
                       int iters, double lr = 0.01);

// ---- black-box (logits-only access) ----
AdversarialBatch square_attack(LogitOracle& oracle, const Tensor& x,
                               std::span<const int> y, const AttackSpec& spec);
AdversarialBatch nes_attack(LogitOracle& oracle, const Tensor& x,
                            std::span<const int> y, const AttackSpec& spec,
                            double sigma, int n);
AdversarialBatch bandits_attack(LogitOracle& oracle, const Tensor& x,
                                std::span<const int> y, const AttackSpec& spec,
                                double prior_lr, double delta);

// Antithetic Gaussian-smoothing gradient estimate of an arbitrary per-sample
// loss; exposed so the estimator can be checked against analytic gradients.
Tensor nes_gradient(
    const std::function<std::vector<double>(const Tensor&)>& loss_fn,
    const Tensor& x, double sigma, int n, Rng& rng);

AdversarialBatch run_attack(const VictimModel& model, const Tensor& x,
                            std::span<const int> y, const AttackSpec& spec);

struct AttackDatasetStats {
  int64_t attacked = 0;
  int64_t kept = 0;
  int64_t shortfall = 0;
  double success_rate = 0.0;
  double mean_queries = 0.0;
};

// Runs the attack over clean-correct sources in batches of 50 and keeps only
// successful samples, up to `requested`.
LabeledImageSet build_attack_dataset(const VictimModel& model,
                                     const LabeledImageSet& sources,
                                     const AttackSpec& spec, int64_t requested,
                                     AttackDatasetStats* stats = nullptr);

// z_y - max_{i != y} z_i, computed from plain logit rows.
std::vector<double> margins_from_logits(const Tensor& logits,
                                        std::span<const int> y);

}  // namespace adfp
