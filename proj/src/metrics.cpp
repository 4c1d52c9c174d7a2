#include "adfp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace adfp {

namespace {

void check_binary(const char* op, std::span<const double> scores,
                  std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument(std::string(op) + ": " +
                                std::to_string(scores.size()) + " scores vs " +
                                std::to_string(labels.size()) + " labels");
  int64_t pos = 0, neg = 0;
  for (int l : labels) {
    if (l == 0)
      ++neg;
    else if (l == 1)
      ++pos;
    else
      throw std::invalid_argument(std::string(op) + ": labels must be 0/1");
  }
  if (pos == 0 || neg == 0)
    throw std::invalid_argument(std::string(op) +
                                ": need at least one sample of each class");
}

double safe_div(double a, double b) { return b != 0.0 ? a / b : 0.0; }

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_binary("roc_auc", scores, labels);
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // midranks over tied scores
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  int64_t pos = 0, neg = 0;
  for (size_t k = 0; k < n; ++k) {
    if (labels[k] == 1) {
      rank_sum_pos += rank[k];
      ++pos;
    } else {
      ++neg;
    }
  }
  const double u = rank_sum_pos - static_cast<double>(pos) *
                                      (static_cast<double>(pos) + 1.0) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double average_precision(std::span<const double> scores,
                         std::span<const int> labels) {
  check_binary("average_precision", scores, labels);
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scores[a] > scores[b];
  });
  int64_t pos_total = 0;
  for (int l : labels) pos_total += l;
  double ap = 0.0;
  int64_t tp = 0;
  for (size_t k = 0; k < n; ++k) {
    if (labels[order[k]] == 1) {
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(k + 1);
    }
  }
  return ap / static_cast<double>(pos_total);
}

DetectionReport binary_report(std::span<const double> scores,
                              std::span<const int> labels, double threshold) {
  check_binary("binary_report", scores, labels);
  DetectionReport r;
  r.threshold = threshold;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1)
      pred ? ++r.tp : ++r.fn;
    else
      pred ? ++r.fp : ++r.tn;
  }
  const auto tp = static_cast<double>(r.tp), fp = static_cast<double>(r.fp);
  const auto tn = static_cast<double>(r.tn), fn = static_cast<double>(r.fn);
  r.acc = safe_div(tp + tn, tp + tn + fp + fn);
  r.tpr = safe_div(tp, tp + fn);
  r.fnr = safe_div(fn, tp + fn);
  r.tnr = safe_div(tn, tn + fp);
  r.fpr = safe_div(fp, tn + fp);
  r.precision = safe_div(tp, tp + fp);
  r.recall = r.tpr;
  r.f1 = safe_div(2.0 * r.precision * r.recall, r.precision + r.recall);
  r.a_std = r.tnr;  // accuracy restricted to benign samples
  r.a_rob = r.tpr;  // accuracy restricted to adversarial samples
  r.auc = roc_auc(scores, labels);
  r.ap = average_precision(scores, labels);
  return r;
}

std::vector<std::vector<int64_t>> confusion_matrix(
    std::span<const int> predictions, std::span<const int> labels, int k) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("confusion_matrix: size mismatch");
  std::vector<std::vector<int64_t>> m(static_cast<size_t>(k),
                                      std::vector<int64_t>(static_cast<size_t>(k), 0));
  for (size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || t >= k || p < 0 || p >= k)
      throw std::invalid_argument("confusion_matrix: entry out of range at " +
                                  std::to_string(i));
    ++m[static_cast<size_t>(t)][static_cast<size_t>(p)];
  }
  return m;
}

DetectionReport evaluate_detector(const ClassifierModel& detector,
                                  const LabeledImageSet& benign_test,
                                  const LabeledImageSet& adv_test) {
  const auto sb = detector_scores(detector, benign_test.images);
  const auto sa = detector_scores(detector, adv_test.images);
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(sb.size() + sa.size());
  for (double s : sb) {
    scores.push_back(s);
    labels.push_back(0);
  }
  for (double s : sa) {
    scores.push_back(s);
    labels.push_back(1);
  }
  return binary_report(scores, labels);
}

TransferMatrix transfer_matrix(
    const LabeledImageSet& benign_train, const LabeledImageSet& benign_test,
    const std::vector<std::pair<std::string, LabeledImageSet>>& train_sets,
    const std::vector<std::pair<std::string, LabeledImageSet>>& eval_sets,
    const TransferConfig& cfg) {
  auto check_names = [](const auto& sets, const char* which) {
    std::set<std::string> seen;
    for (const auto& [name, set] : sets) {
      if (!seen.insert(name).second)
        throw std::invalid_argument(std::string("transfer_matrix: duplicate ") +
                                    which + " set name '" + name + "'");
      if (set.provenance.kind != Provenance::Kind::transformed)
        throw std::invalid_argument("transfer_matrix: set '" + name +
                                    "' is not transformed");
    }
  };
  check_names(train_sets, "train");
  check_names(eval_sets, "eval");

  TransferMatrix out;
  for (const auto& [name, set] : train_sets) out.train_names.push_back(name);
  for (const auto& [name, set] : eval_sets) out.eval_names.push_back(name);
  out.accuracy.assign(train_sets.size(),
                      std::vector<double>(eval_sets.size(), 0.0));
  out.tpr = out.accuracy;

  for (size_t row = 0; row < train_sets.size(); ++row) {
    ClassifierDesc desc;
    desc.classes = 2;
    desc.logits = 1;
    desc.input_size = static_cast<int>(benign_train.images.dim(2));
    desc.channels = static_cast<int>(benign_train.images.dim(1));
    desc.base = cfg.base;
    const uint64_t row_seed =
        Rng(cfg.seed).derive(0x7Au + static_cast<uint64_t>(row)).next_u64();
    ClassifierModel detector(desc, row_seed);
    train_detector(detector, benign_train, train_sets[row].second, cfg.epochs,
                   cfg.batch, cfg.lr, row_seed);
    for (size_t col = 0; col < eval_sets.size(); ++col) {
      const DetectionReport rep =
          evaluate_detector(detector, benign_test, eval_sets[col].second);
      out.accuracy[row][col] = rep.acc;
      out.tpr[row][col] = rep.tpr;
    }
  }
  return out;
}

}  // namespace adfp
