#include "adfp/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <set>

namespace adfp {

using nlohmann::json;

namespace {

constexpr int kGroups = 4;

void register_res_block(ParameterSet& ps, const std::string& name, int64_t c,
                        Rng& rng) {
  register_group_norm(ps, name + ".gn1", c);
  register_conv(ps, name + ".conv1", c, c, 3, rng);
  register_group_norm(ps, name + ".gn2", c);
  register_conv(ps, name + ".conv2", c, c, 3, rng);
}

Tensor res_block(const Params<float>& p, const std::string& name,
                 const Tensor& x) {
  auto h = group_norm(x, p, name + ".gn1", kGroups);
  h = silu(h);
  h = conv2d_layer(h, p, name + ".conv1");
  h = group_norm(h, p, name + ".gn2", kGroups);
  h = silu(h);
  h = conv2d_layer(h, p, name + ".conv2");
  return add(x, h);
}

// reflect-pad 4 + random crop + horizontal flip, applied on raw buffers
// before graph construction
void augment_sample(const float* src, float* dst, int64_t C, int64_t H,
                    int64_t W, Rng& rng) {
  constexpr int64_t pad = 4;
  const int64_t dy = static_cast<int64_t>(rng.uniform_int(2 * pad + 1));
  const int64_t dx = static_cast<int64_t>(rng.uniform_int(2 * pad + 1));
  const bool flip = rng.uniform() < 0.5;
  auto reflect = [](int64_t i, int64_t n) {
    if (i < 0) return -1 - i;
    if (i >= n) return 2 * n - 1 - i;
    return i;
  };
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t y = 0; y < H; ++y) {
      const int64_t sy = reflect(y + dy - pad, H);
      for (int64_t x = 0; x < W; ++x) {
        const int64_t xq = flip ? W - 1 - x : x;
        const int64_t sx = reflect(xq + dx - pad, W);
        dst[(c * H + y) * W + x] = src[(c * H + sy) * W + sx];
      }
    }
  }
}

struct Pool {
  const float* images;
  int64_t chw;
  std::vector<int64_t> sample;  // index into images
  std::vector<int> label;
};

struct TrainOptions {
  int epochs, batch;
  double lr;
  uint64_t seed;
  bool augment;
  bool binary;  // BCE on a single logit instead of cross-entropy
};

std::vector<double> run_training(ClassifierModel& model, const Pool& pool,
                                 const TrainOptions& opt) {
  const int64_t n = static_cast<int64_t>(pool.sample.size());
  if (n == 0) throw std::invalid_argument("training: empty pool");
  const Rng root(opt.seed);
  AdamConfig adam;
  adam.lr = opt.lr;
  std::vector<double> losses;
  constexpr int64_t kMicro = 8;

  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  const int64_t C = model.desc().channels;
  const int64_t H = model.desc().input_size, W = model.desc().input_size;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng shuffle_rng = root.derive(0x51u + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    int64_t seen = 0;

    for (int64_t start = 0; start < n; start += opt.batch) {
      const int64_t bsz = std::min<int64_t>(opt.batch, n - start);
      const int64_t micro_count = (bsz + kMicro - 1) / kMicro;
      std::vector<Params<float>> shadows(static_cast<size_t>(micro_count));
      std::vector<double> micro_loss(static_cast<size_t>(micro_count), 0.0);

      parallel_for(bsz, kMicro, [&](int64_t mb, int64_t me) {
        const int64_t micro_idx = mb / kMicro;
        const int64_t m = me - mb;
        Params<float> shadow = model.params().shadow();
        std::vector<float> buf(static_cast<size_t>(m * pool.chw));
        std::vector<int> ylab(static_cast<size_t>(m));
        for (int64_t i = 0; i < m; ++i) {
          const int64_t row = order[static_cast<size_t>(start + mb + i)];
          const int64_t sample = pool.sample[static_cast<size_t>(row)];
          ylab[static_cast<size_t>(i)] = pool.label[static_cast<size_t>(row)];
          const float* src = pool.images + sample * pool.chw;
          float* dst = buf.data() + i * pool.chw;
          if (opt.augment) {
            Rng rng = root.derive(0xA0000000ull ^
                                  (static_cast<uint64_t>(epoch) << 32) ^
                                  static_cast<uint64_t>(sample));
            augment_sample(src, dst, C, H, W, rng);
          } else {
            std::memcpy(dst, src, static_cast<size_t>(pool.chw) * sizeof(float));
          }
        }
        Tensor x = Tensor::from_data({m, C, H, W}, std::move(buf));
        Tensor z = model.forward(shadow, x);
        Tensor loss;
        if (opt.binary) {
          std::vector<float> targets(static_cast<size_t>(m));
          for (int64_t i = 0; i < m; ++i)
            targets[static_cast<size_t>(i)] =
                static_cast<float>(ylab[static_cast<size_t>(i)]);
          loss = bce_with_logits(reshape(z, {m}), std::span<const float>(targets));
        } else {
          loss = cross_entropy(z, std::span<const int>(ylab));
        }
        // micro losses are means; rescale so their sum is the batch mean
        loss = mul(loss, static_cast<float>(m) / static_cast<float>(bsz));
        backward(loss);
        micro_loss[static_cast<size_t>(micro_idx)] =
            static_cast<double>(loss.item());
        shadows[static_cast<size_t>(micro_idx)] = std::move(shadow);
      });

      double batch_loss = 0.0;
      for (double l : micro_loss) batch_loss += l;
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("training: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " +
                                 std::to_string(start / opt.batch));
      loss_sum += batch_loss * static_cast<double>(bsz);
      seen += bsz;

      model.params().zero_grads();
      model.params().accumulate(shadows);
      model.params().adam_step(adam);
    }
    losses.push_back(loss_sum / static_cast<double>(seen));
  }
  return losses;
}

}  // namespace

ClassifierModel::ClassifierModel(ClassifierDesc desc, uint64_t seed)
    : desc_(desc) {
  if (desc_.base % kGroups != 0)
    throw std::invalid_argument("ClassifierModel: base channels must be a "
                                "multiple of " + std::to_string(kGroups));
  Rng rng = Rng(seed).derive(0xC1);
  const int64_t b = desc_.base;
  register_conv(params_, "in", b, desc_.channels, 3, rng);
  register_res_block(params_, "rb1", b, rng);
  register_conv(params_, "down1", 2 * b, b, 3, rng);
  register_res_block(params_, "rb2", 2 * b, rng);
  register_conv(params_, "down2", 4 * b, 2 * b, 3, rng);
  register_res_block(params_, "rb3", 4 * b, rng);
  register_group_norm(params_, "head.gn", 4 * b);
  register_linear(params_, "head.fc", 4 * b, desc_.logits, rng);
}

Tensor ClassifierModel::forward(const Params<float>& p, const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != desc_.channels ||
      x.dim(2) != desc_.input_size || x.dim(3) != desc_.input_size)
    throw std::invalid_argument("ClassifierModel: input " +
                                format_shape(x.shape()) +
                                " does not match model size " +
                                std::to_string(desc_.input_size));
  auto h = conv2d_layer(x, p, "in");
  h = res_block(p, "rb1", h);
  h = conv2d_layer(h, p, "down1", /*stride=*/2);
  h = res_block(p, "rb2", h);
  h = conv2d_layer(h, p, "down2", /*stride=*/2);
  h = res_block(p, "rb3", h);
  h = silu(group_norm(h, p, "head.gn", kGroups));
  auto pooled = mean(h, {2, 3}, false);
  return linear_layer(pooled, p, "head.fc");
}

Tensor ClassifierModel::logits(const Tensor& x) const {
  const bool with_grad = x.requires_grad() && !NoGradGuard::active();
  if (with_grad) return forward(params_.frozen(), x);
  // inference: chunked, deterministic for any worker count
  NoGradGuard ng;
  const int64_t n = x.dim(0);
  const int64_t chw = x.size() / std::max<int64_t>(n, 1);
  Tensor out = Tensor::zeros({n, desc_.logits});
  parallel_for(n, 16, [&](int64_t begin, int64_t end) {
    const int64_t m = end - begin;
    std::vector<float> buf(static_cast<size_t>(m * chw));
    std::memcpy(buf.data(), x.data().data() + begin * chw,
                buf.size() * sizeof(float));
    Shape shape = x.shape();
    shape[0] = m;
    Tensor chunk = Tensor::from_data(std::move(shape), std::move(buf));
    Tensor z = forward(params_.frozen(), chunk);
    std::memcpy(out.raw().data() + begin * desc_.logits, z.data().data(),
                static_cast<size_t>(m * desc_.logits) * sizeof(float));
  });
  return out;
}

void ClassifierModel::save(const std::string& basepath) const {
  params_.save(basepath + ".ckpt");
  json j;
  j["classes"] = desc_.classes;
  j["logits"] = desc_.logits;
  j["input_size"] = desc_.input_size;
  j["channels"] = desc_.channels;
  j["base"] = desc_.base;
  j["arch"] = desc_.arch;
  std::ofstream out(basepath + ".json");
  if (!out)
    throw IoError("ClassifierModel: cannot write '" + basepath + ".json'");
  out << j.dump(2) << "\n";
}

ClassifierModel ClassifierModel::load(const std::string& basepath) {
  std::ifstream in(basepath + ".json");
  if (!in) throw IoError("ClassifierModel: missing '" + basepath + ".json'");
  json j;
  in >> j;
  ClassifierDesc d;
  d.classes = j.at("classes").get<int>();
  d.logits = j.at("logits").get<int>();
  d.input_size = j.at("input_size").get<int>();
  d.channels = j.at("channels").get<int>();
  d.base = j.at("base").get<int>();
  d.arch = j.at("arch").get<std::string>();
  ClassifierModel m(d, /*seed=*/0);
  m.params_ = ParameterSet::load(basepath + ".ckpt");
  return m;
}

FitLog train_victim(ClassifierModel& model, const LabeledImageSet& train,
                    const LabeledImageSet& val, int epochs, int batch,
                    double lr, uint64_t seed) {
  if (model.num_classes() < 2)
    throw std::invalid_argument("train_victim: need >= 2 classes");
  for (int l : train.labels)
    if (l < 0 || l >= model.num_classes())
      throw std::invalid_argument("train_victim: label out of range");

  FitLog log;
  Pool pool;
  pool.images = train.images.data().data();
  pool.chw = train.count() > 0 ? train.images.size() / train.count() : 0;
  pool.sample.resize(static_cast<size_t>(train.count()));
  for (int64_t i = 0; i < train.count(); ++i)
    pool.sample[static_cast<size_t>(i)] = i;
  pool.label = train.labels;

  TrainOptions opt{1, batch, lr, seed, /*augment=*/false, /*binary=*/false};
  log.val_accuracy.push_back(classification_accuracy(model, val));
  for (int e = 0; e < epochs; ++e) {
    opt.seed = Rng(seed).derive(static_cast<uint64_t>(e)).next_u64();
    log.epoch_loss.push_back(run_training(model, pool, opt).front());
    log.val_accuracy.push_back(classification_accuracy(model, val));
  }
  return log;
}

FitLog train_detector(ClassifierModel& model, const LabeledImageSet& benign_tf,
                      const LabeledImageSet& adv_tf, int epochs, int batch,
                      double lr, uint64_t seed) {
  if (benign_tf.provenance.kind != Provenance::Kind::transformed ||
      adv_tf.provenance.kind != Provenance::Kind::transformed)
    throw std::invalid_argument(
        "train_detector: both sets must be transformed (got " +
        benign_tf.provenance.to_string() + " and " +
        adv_tf.provenance.to_string() + ")");
  if (model.num_logits() != 1)
    throw std::invalid_argument("train_detector: detector uses a single logit");
  const auto bi = benign_tf.images.data();
  const auto ai = adv_tf.images.data();
  if (bi.size() == ai.size() &&
      std::memcmp(bi.data(), ai.data(), bi.size() * sizeof(float)) == 0)
    throw std::invalid_argument("train_detector: benign and adversarial sets "
                                "are identical");

  const int64_t nb = benign_tf.count(), na = adv_tf.count();
  const int64_t chw = nb > 0 ? benign_tf.images.size() / nb : 0;
  // one flat pool: benign first, adversarial after it
  std::vector<float> merged(static_cast<size_t>((nb + na) * chw));
  std::memcpy(merged.data(), bi.data(), bi.size() * sizeof(float));
  std::memcpy(merged.data() + nb * chw, ai.data(), ai.size() * sizeof(float));

  Pool pool;
  pool.images = merged.data();
  pool.chw = chw;
  pool.sample.resize(static_cast<size_t>(nb + na));
  pool.label.resize(static_cast<size_t>(nb + na));
  for (int64_t i = 0; i < nb + na; ++i) {
    pool.sample[static_cast<size_t>(i)] = i;
    pool.label[static_cast<size_t>(i)] = i < nb ? 0 : 1;
  }

  FitLog log;
  TrainOptions opt{1, batch, lr, seed, /*augment=*/true, /*binary=*/true};
  for (int e = 0; e < epochs; ++e) {
    opt.seed = Rng(seed).derive(0xDE00 + static_cast<uint64_t>(e)).next_u64();
    log.epoch_loss.push_back(run_training(model, pool, opt).front());
  }
  return log;
}

ClassifierModel train_identifier(
    const std::vector<std::pair<std::string, LabeledImageSet>>& sets,
    int epochs, int batch, double lr, uint64_t seed, int base) {
  if (sets.size() < 2)
    throw std::invalid_argument("train_identifier: need >= 2 named sets");
  std::set<std::string> names;
  for (const auto& [name, set] : sets)
    if (!names.insert(name).second)
      throw std::invalid_argument("train_identifier: duplicate set name '" +
                                  name + "'");

  std::vector<std::pair<std::string, const LabeledImageSet*>> ordered;
  for (const auto& [name, set] : sets) ordered.emplace_back(name, &set);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  const int64_t chw = ordered.front().second->count() > 0
                          ? ordered.front().second->images.size() /
                                ordered.front().second->count()
                          : 0;
  int64_t total = 0;
  for (const auto& [name, set] : ordered) total += set->count();
  std::vector<float> merged(static_cast<size_t>(total * chw));
  Pool pool;
  pool.chw = chw;
  int64_t offset = 0;
  int cls = 0;
  for (const auto& [name, set] : ordered) {
    const auto img = set->images.data();
    std::memcpy(merged.data() + offset * chw, img.data(),
                img.size() * sizeof(float));
    for (int64_t i = 0; i < set->count(); ++i) {
      pool.sample.push_back(offset + i);
      pool.label.push_back(cls);
    }
    offset += set->count();
    ++cls;
  }
  pool.images = merged.data();

  const auto& first = *ordered.front().second;
  ClassifierDesc desc;
  desc.classes = static_cast<int>(ordered.size());
  desc.logits = desc.classes;
  desc.input_size = static_cast<int>(first.images.dim(2));
  desc.channels = static_cast<int>(first.images.dim(1));
  desc.base = base;
  ClassifierModel model(desc, seed);

  TrainOptions opt{1, batch, lr, seed, /*augment=*/true, /*binary=*/false};
  for (int e = 0; e < epochs; ++e) {
    opt.seed = Rng(seed).derive(0x1D00 + static_cast<uint64_t>(e)).next_u64();
    run_training(model, pool, opt);
  }
  return model;
}

Tensor predict_logits(const VictimModel& model, const Tensor& batch) {
  NoGradGuard ng;
  return model.logits(batch);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const int64_t B = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(static_cast<size_t>(B));
  const float* z = logits.data().data();
  for (int64_t b = 0; b < B; ++b) {
    int best = 0;
    for (int64_t i = 1; i < K; ++i)
      if (z[b * K + i] > z[b * K + best]) best = static_cast<int>(i);
    out[static_cast<size_t>(b)] = best;
  }
  return out;
}

std::vector<int> predict_classes(const VictimModel& model, const Tensor& batch) {
  return argmax_rows(predict_logits(model, batch));
}

std::vector<double> detector_scores(const ClassifierModel& model,
                                    const Tensor& batch) {
  if (model.num_logits() != 1)
    throw std::invalid_argument("detector_scores: model has more than one logit");
  Tensor z = predict_logits(model, batch);
  std::vector<double> out(static_cast<size_t>(z.dim(0)));
  const float* zv = z.data().data();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(zv[i])));
  return out;
}

double classification_accuracy(const VictimModel& model,
                               const LabeledImageSet& set) {
  if (set.count() == 0) return 0.0;
  const auto pred = predict_classes(model, set.images);
  int64_t correct = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == set.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(set.count());
}

Tensor LogitOracle::logits(const Tensor& x) {
  NoGradGuard ng;
  queries_ += x.dim(0);
  return model_.logits(x).detach();
}

}  // namespace adfp
