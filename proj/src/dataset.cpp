#include "adfp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "adfp/nn.hpp"

namespace adfp {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unsplit: return "unsplit";
  }
  return "unsplit";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unsplit") return Split::unsplit;
  throw std::invalid_argument("unknown split tag '" + s + "'");
}

Provenance Provenance::make_benign() { return Provenance{}; }

Provenance Provenance::make_attack(const std::string& family, double epsilon) {
  Provenance p;
  p.kind = Kind::attack;
  p.family = family;
  p.epsilon = epsilon;
  return p;
}

Provenance Provenance::make_transformed(const Provenance& of) {
  Provenance p;
  p.kind = Kind::transformed;
  p.of = std::make_shared<Provenance>(of);
  return p;
}

std::string Provenance::to_string() const {
  switch (kind) {
    case Kind::benign: return "benign";
    case Kind::attack: return "attack(" + family + ")";
    case Kind::transformed:
      return "transformed(" + (of ? of->to_string() : "?") + ")";
  }
  return "?";
}

namespace {

json provenance_to_json(const Provenance& p) {
  json j;
  switch (p.kind) {
    case Provenance::Kind::benign:
      j["kind"] = "benign";
      break;
    case Provenance::Kind::attack:
      j["kind"] = "attack";
      j["family"] = p.family;
      j["epsilon"] = p.epsilon;
      break;
    case Provenance::Kind::transformed:
      j["kind"] = "transformed";
      j["of"] = p.of ? provenance_to_json(*p.of) : json{{"kind", "benign"}};
      break;
  }
  return j;
}

Provenance provenance_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "benign") return Provenance::make_benign();
  if (kind == "attack")
    return Provenance::make_attack(j.at("family").get<std::string>(),
                                   j.at("epsilon").get<double>());
  if (kind == "transformed")
    return Provenance::make_transformed(provenance_from_json(j.at("of")));
  throw IoError("dataset manifest: unknown provenance kind '" + kind + "'");
}

}  // namespace

LabeledImageSet LabeledImageSet::subset(
    const std::vector<int64_t>& indices) const {
  const int64_t n = count();
  const int64_t chw = n > 0 ? images.size() / n : 0;
  std::vector<float> data(static_cast<size_t>(indices.size()) *
                          static_cast<size_t>(chw));
  std::vector<int> lab(indices.size());
  const float* src = images.data().data();
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t idx = indices[i];
    if (idx < 0 || idx >= n)
      throw std::invalid_argument("subset: index out of range");
    std::copy(src + idx * chw, src + (idx + 1) * chw,
              data.begin() + static_cast<int64_t>(i) * chw);
    lab[i] = labels[static_cast<size_t>(idx)];
  }
  LabeledImageSet out = *this;
  Shape shape = images.shape();
  shape[0] = static_cast<int64_t>(indices.size());
  out.images = Tensor::from_data(std::move(shape), std::move(data));
  out.labels = std::move(lab);
  return out;
}

void LabeledImageSet::validate() const {
  if (!images.defined() || images.rank() != 4)
    throw std::invalid_argument("LabeledImageSet: images must be [N,C,H,W]");
  if (images.dim(0) != count())
    throw std::invalid_argument("LabeledImageSet: " +
                                std::to_string(images.dim(0)) + " images vs " +
                                std::to_string(count()) + " labels");
  for (float v : images.data())
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::invalid_argument(
          "LabeledImageSet: pixel value outside [0, 1]");
}

// ---------- toy generator ----------

namespace {

struct ShapeSpec {
  double cx, cy, r;
};

double shape_alpha(int shape, const ShapeSpec& s, double stripe_period,
                   int stripe_orient, double x, double y, bool soft) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double soften = soft ? 1.0 : 1e-3;  // ~hard edge when not soft
  auto edge = [&](double signed_dist) {
    return std::clamp(0.5 - signed_dist / soften, 0.0, 1.0);
  };
  switch (shape) {
    case 0: {  // disk
      return edge(std::sqrt(dx * dx + dy * dy) - s.r);
    }
    case 1: {  // square
      const double d = std::max(std::abs(dx), std::abs(dy)) - s.r * 0.85;
      return edge(d);
    }
    case 2: {  // cross
      const double bar = s.r * 0.35;
      const double d1 = std::max(std::abs(dx) - bar, std::abs(dy) - s.r);
      const double d2 = std::max(std::abs(dy) - bar, std::abs(dx) - s.r);
      return edge(std::min(d1, d2));
    }
    case 3: {  // stripes across the whole image
      double u = x;
      if (stripe_orient == 1) u = y;
      if (stripe_orient == 2) u = (x + y) * 0.7071067811865476;
      const double phase = u / stripe_period -
                           std::floor(u / stripe_period);  // [0,1)
      const double d = (std::abs(phase - 0.5) - 0.25) * stripe_period;
      return edge(d);
    }
    case 4: {  // ring
      const double d =
          std::abs(std::sqrt(dx * dx + dy * dy) - s.r * 0.8) - s.r * 0.3;
      return edge(d);
    }
  }
  return 0.0;
}

}  // namespace

LabeledImageSet generate_toy_dataset(uint64_t seed, int64_t n, int classes,
                                     int size) {
  if (classes < 2 || classes > 10 || classes % 2 != 0)
    throw std::invalid_argument(
        "generate_toy_dataset: classes must be even and in [2, 10]");
  if (n < classes)
    throw std::invalid_argument("generate_toy_dataset: need n >= classes");
  if (n % classes != 0) {
    const int64_t adjusted = n - n % classes;
    std::fprintf(stderr,
                 "[adfp] warning: %lld images not divisible by %d classes, "
                 "generating %lld\n",
                 static_cast<long long>(n), classes,
                 static_cast<long long>(adjusted));
    n = adjusted;
  }
  const int64_t hw = static_cast<int64_t>(size) * size;
  std::vector<float> data(static_cast<size_t>(n * 3 * hw));
  std::vector<int> labels(static_cast<size_t>(n));
  const Rng root(seed);

  parallel_for(n, 64, [&](int64_t begin, int64_t end) {
    for (int64_t i = begin; i < end; ++i) {
      Rng rng = root.derive(static_cast<uint64_t>(i));
      const int cls = static_cast<int>(i % classes);
      const int shape = cls / 2;
      const bool noisy = cls % 2 == 1;
      labels[static_cast<size_t>(i)] = cls;

      double bg[3], fg[3];
      for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(0.15, 0.85);
      for (int c = 0; c < 3; ++c) {
        const double dir = rng.uniform() < 0.5 ? -1.0 : 1.0;
        fg[c] = std::clamp(bg[c] + dir * rng.uniform(0.3, 0.55), 0.05, 0.95);
      }
      ShapeSpec s;
      const double margin = size * 0.3;
      s.cx = rng.uniform(margin, size - margin);
      s.cy = rng.uniform(margin, size - margin);
      s.r = rng.uniform(size * 0.18, size * 0.32);
      const double stripe_period = rng.uniform(5.0, 9.0);
      const int stripe_orient = static_cast<int>(rng.uniform_int(3));
      const double bg_noise = 0.02;
      const double fg_noise = noisy ? 0.18 : 0.0;

      float* img = data.data() + i * 3 * hw;
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double a = shape_alpha(shape, s, stripe_period, stripe_orient,
                                       x + 0.5, y + 0.5, !noisy);
          const double nb = rng.normal() * bg_noise;
          const double nf = fg_noise > 0.0 ? rng.uniform(-fg_noise, fg_noise) : 0.0;
          for (int c = 0; c < 3; ++c) {
            const double base = bg[c] + nb;
            const double paint = fg[c] + nf;
            const double v = base * (1.0 - a) + paint * a;
            img[c * hw + y * size + x] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
    }
  });

  LabeledImageSet out;
  out.images = Tensor::from_data({n, 3, size, size}, std::move(data));
  out.labels = std::move(labels);
  out.provenance = Provenance::make_benign();
  out.split = Split::unsplit;
  out.seed = seed;
  out.origin_begin = 0;
  out.origin_end = n;
  return out;
}

// ---------- CIFAR-10 ----------

LabeledImageSet read_cifar10_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cifar10: cannot open '" + path + "'");
  const auto length = static_cast<int64_t>(in.tellg());
  constexpr int64_t kRecord = 3073;
  if (length % kRecord != 0)
    throw IoError("cifar10: file length " + std::to_string(length) +
                  " is not a multiple of 3073; partial record starts at offset " +
                  std::to_string(length - length % kRecord));
  const int64_t n = length / kRecord;
  in.seekg(0);
  std::vector<float> data(static_cast<size_t>(n) * 3072);
  std::vector<int> labels(static_cast<size_t>(n));
  std::vector<unsigned char> rec(kRecord);
  for (int64_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(rec.data()), kRecord);
    if (!in)
      throw IoError("cifar10: read failed at record " + std::to_string(i));
    if (rec[0] > 9)
      throw IoError("cifar10: label " + std::to_string(rec[0]) +
                    " out of range at record " + std::to_string(i));
    labels[static_cast<size_t>(i)] = rec[0];
    float* dst = data.data() + i * 3072;
    for (int64_t j = 0; j < 3072; ++j)
      dst[j] = static_cast<float>(rec[static_cast<size_t>(j + 1)]) / 255.0f;
  }
  LabeledImageSet out;
  out.images = Tensor::from_data({n, 3, 32, 32}, std::move(data));
  out.labels = std::move(labels);
  out.provenance = Provenance::make_benign();
  out.split = Split::unsplit;
  out.origin_begin = 0;
  out.origin_end = n;
  return out;
}

// ---------- split ----------

SplitSets split_dataset(const LabeledImageSet& set, uint64_t seed) {
  const int64_t n = set.count();
  if (n < 10)
    throw std::invalid_argument("split_dataset: need at least 10 samples, got " +
                                std::to_string(n));
  std::map<int, std::vector<int64_t>> by_class;
  for (int64_t i = 0; i < n; ++i)
    by_class[set.labels[static_cast<size_t>(i)]].push_back(i);

  std::vector<int64_t> train_idx, val_idx, test_idx;
  const Rng root(seed);
  for (auto& [cls, idx] : by_class) {
    if (idx.size() < 3)
      throw std::invalid_argument("split_dataset: class " +
                                  std::to_string(cls) + " has only " +
                                  std::to_string(idx.size()) +
                                  " samples (need >= 3)");
    Rng rng = root.derive(static_cast<uint64_t>(cls) + 1);
    rng.shuffle(idx.begin(), idx.end());
    const auto nc = static_cast<int64_t>(idx.size());
    const int64_t nv = std::max<int64_t>(1, std::llround(0.1 * nc));
    const int64_t nt = std::max<int64_t>(1, std::llround(0.1 * nc));
    for (int64_t i = 0; i < nc; ++i) {
      if (i < nv)
        val_idx.push_back(idx[static_cast<size_t>(i)]);
      else if (i < nv + nt)
        test_idx.push_back(idx[static_cast<size_t>(i)]);
      else
        train_idx.push_back(idx[static_cast<size_t>(i)]);
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  SplitSets out{set.subset(train_idx), set.subset(val_idx),
                set.subset(test_idx)};
  out.train.split = Split::train;
  out.val.split = Split::val;
  out.test.split = Split::test;
  return out;
}

// ---------- container ----------

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

std::string digest_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("dataset: cannot open '" + path + "'");
  uint64_t h = 14695981039346656037ULL;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    const auto got = static_cast<size_t>(in.gcount());
    if (got) h = fnv1a64(buf, got, h);
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace

void save_dataset(const LabeledImageSet& set, const std::string& dir) {
  set.validate();
  fs::create_directories(dir);
  const std::string bin = (fs::path(dir) / "data.bin").string();

  ParameterSet container;
  container.add("images", set.images.detach());
  std::vector<float> lab(set.labels.size());
  for (size_t i = 0; i < lab.size(); ++i)
    lab[i] = static_cast<float>(set.labels[i]);
  container.add("labels", Tensor::from_data({set.count()}, std::move(lab)));
  container.save(bin);

  json hist = json::object();
  std::map<int, int64_t> counts;
  for (int l : set.labels) ++counts[l];
  for (const auto& [cls, c] : counts) hist[std::to_string(cls)] = c;

  json manifest;
  manifest["format"] = "adfp-dataset-v1";
  manifest["n"] = set.count();
  manifest["channels"] = set.images.dim(1);
  manifest["height"] = set.images.dim(2);
  manifest["width"] = set.images.dim(3);
  manifest["split"] = to_string(set.split);
  manifest["counts_per_split"] = {{to_string(set.split), set.count()}};
  manifest["class_histogram"] = hist;
  manifest["provenance"] = provenance_to_json(set.provenance);
  manifest["seed"] = set.seed;
  manifest["origin"] = {set.origin_begin, set.origin_end};
  manifest["digest"] = digest_file(bin);

  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("dataset: cannot write manifest in '" + dir + "'");
  out << manifest.dump(2) << "\n";
}

LabeledImageSet load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("dataset: missing manifest.json in '" + dir + "'");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("dataset: malformed manifest in '" + dir + "': " + e.what());
  }
  const std::string bin = (fs::path(dir) / "data.bin").string();
  const std::string expected = manifest.at("digest").get<std::string>();
  const std::string actual = digest_file(bin);
  if (expected != actual)
    throw IoError("dataset: digest mismatch in '" + dir + "' (manifest " +
                  expected + ", data.bin " + actual + ")");

  ParameterSet container = ParameterSet::load(bin);
  LabeledImageSet out;
  out.images = container.at("images").detach();
  const auto& lab = container.at("labels");
  out.labels.resize(static_cast<size_t>(lab.size()));
  for (size_t i = 0; i < out.labels.size(); ++i)
    out.labels[i] = static_cast<int>(std::lround(lab.data()[i]));
  out.provenance = provenance_from_json(manifest.at("provenance"));
  out.split = split_from_string(manifest.at("split").get<std::string>());
  out.seed = manifest.at("seed").get<uint64_t>();
  out.origin_begin = manifest.at("origin")[0].get<int64_t>();
  out.origin_end = manifest.at("origin")[1].get<int64_t>();
  if (manifest.at("n").get<int64_t>() != out.count() ||
      manifest.at("channels").get<int64_t>() != out.images.dim(1) ||
      manifest.at("height").get<int64_t>() != out.images.dim(2) ||
      manifest.at("width").get<int64_t>() != out.images.dim(3))
    throw IoError("dataset: manifest counts disagree with tensors in '" + dir +
                  "'");
  out.validate();
  return out;
}

}  // namespace adfp
