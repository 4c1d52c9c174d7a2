#pragma once

#include <map>
#include <string>

#include "adfp/dataset.hpp"
#include "adfp/nn.hpp"

namespace adfp {

// Attack-facing view of a classifier: logits only, plus the class count.
// White-box attacks differentiate through logits(); parameters stay frozen.
struct VictimModel {
  virtual ~VictimModel() = default;
  virtual int num_classes() const = 0;
  virtual int num_logits() const = 0;
  virtual Tensor logits(const Tensor& x) const = 0;
};

struct ClassifierDesc {
  int classes = 10;
  int logits = 10;  // 1 for the sigmoid detector head
  int input_size = 32;
  int channels = 3;
  int base = 16;
  std::string arch = "resnet_s";
};

// Small residual conv net: stem conv, three residual blocks with stride-2
// transitions, global average pooling, linear head.
class ClassifierModel : public VictimModel {
 public:
  ClassifierModel(ClassifierDesc desc, uint64_t seed);

  int num_classes() const override { return desc_.classes; }
  int num_logits() const override { return desc_.logits; }
  Tensor logits(const Tensor& x) const override;
  Tensor forward(const Params<float>& p, const Tensor& x) const;

  const ClassifierDesc& desc() const { return desc_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  void save(const std::string& basepath) const;
  static ClassifierModel load(const std::string& basepath);

 private:
  ClassifierDesc desc_;
  ParameterSet params_;
};

struct FitLog {
  std::vector<double> epoch_loss;
  std::vector<double> val_accuracy;
};

FitLog train_victim(ClassifierModel& model, const LabeledImageSet& train,
                    const LabeledImageSet& val, int epochs, int batch,
                    double lr, uint64_t seed);

// Binary detector per the detection protocol: benign -> 0, adversarial -> 1,
// BCE on a single sigmoid logit. Both inputs must be transformed sets.
// Training batches are randomly cropped (reflect-pad 4) and flipped (p = 0.5);
// evaluation uses images as-is (the center crop of the padded image).
FitLog train_detector(ClassifierModel& model, const LabeledImageSet& benign_tf,
                      const LabeledImageSet& adv_tf, int epochs, int batch,
                      double lr, uint64_t seed);

// (K+1)-way attack identifier over named transformed sets; class order is
// the lexicographic order of set names.
ClassifierModel train_identifier(
    const std::vector<std::pair<std::string, LabeledImageSet>>& sets,
    int epochs, int batch, double lr, uint64_t seed, int base = 16);

// Batched inference (no gradients, chunk-parallel, batch-composition free).
Tensor predict_logits(const VictimModel& model, const Tensor& batch);
std::vector<int> predict_classes(const VictimModel& model, const Tensor& batch);
// Sigmoid of the detector's single logit.
std::vector<double> detector_scores(const ClassifierModel& model,
                                    const Tensor& batch);
double classification_accuracy(const VictimModel& model,
                               const LabeledImageSet& set);

// Query-counting logits-only gateway for black-box attacks. Outputs are
// detached from any graph; there is no gradient path through this class.
class LogitOracle {
 public:
  explicit LogitOracle(const VictimModel& model) : model_(model) {}
  Tensor logits(const Tensor& x);
  int num_classes() const { return model_.num_classes(); }
  int64_t total_queries() const { return queries_; }
  void reset_queries() { queries_ = 0; }

 private:
  const VictimModel& model_;
  int64_t queries_ = 0;
};

std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace adfp
