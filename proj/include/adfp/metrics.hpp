#pragma once

#include <span>
#include <string>
#include <vector>

#include "adfp/classifier.hpp"
#include "adfp/dataset.hpp"

namespace adfp {

// Mann-Whitney AUC with ties counted 1/2 (equals the trapezoidal ROC area).
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// Step-interpolated area under precision-recall (sum of precision at
// positive ranks / positive count), descending-score order with ties broken
// by original index.
double average_precision(std::span<const double> scores,
                         std::span<const int> labels);

struct DetectionReport {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  double auc = 0, ap = 0, acc = 0;
  double tnr = 0, fnr = 0, tpr = 0, fpr = 0;
  double precision = 0, recall = 0, f1 = 0;
  double a_std = 0, a_rob = 0;  // benign-subset / adversarial-subset accuracy
  double threshold = 0.5;
};

DetectionReport binary_report(std::span<const double> scores,
                              std::span<const int> labels,
                              double threshold = 0.5);

// rows = true class, columns = predicted class
std::vector<std::vector<int64_t>> confusion_matrix(std::span<const int> predictions,
                                                   std::span<const int> labels,
                                                   int k);

struct TransferMatrix {
  std::vector<std::string> train_names;
  std::vector<std::string> eval_names;
  std::vector<std::vector<double>> accuracy;  // [row][col]
  std::vector<std::vector<double>> tpr;
};

struct TransferConfig {
  int epochs = 10;
  int batch = 64;
  double lr = 1e-3;
  uint64_t seed = 0;
  int base = 16;
};

// Per row: trains a detector on (benign train, row train) and scores accuracy
// against (benign test, column test) for every column.
TransferMatrix transfer_matrix(
    const LabeledImageSet& benign_train, const LabeledImageSet& benign_test,
    const std::vector<std::pair<std::string, LabeledImageSet>>& train_sets,
    const std::vector<std::pair<std::string, LabeledImageSet>>& eval_sets,
    const TransferConfig& cfg);

// Detector evaluation on a labeled pair of transformed test sets.
DetectionReport evaluate_detector(const ClassifierModel& detector,
                                  const LabeledImageSet& benign_test,
                                  const LabeledImageSet& adv_test);

}  // namespace adfp
