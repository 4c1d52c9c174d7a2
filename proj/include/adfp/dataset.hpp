#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include "adfp/tensor.hpp"

namespace adfp {

enum class Split { train, val, test, unsplit };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// Where a set came from: raw generation, an attack run, or the diffusion
// transform of another set.
struct Provenance {
  enum class Kind { benign, attack, transformed };
  Kind kind = Kind::benign;
  std::string family;     // attack only
  double epsilon = 0.0;   // attack only
  std::shared_ptr<const Provenance> of;  // transformed only

  static Provenance make_benign();
  static Provenance make_attack(const std::string& family, double epsilon);
  static Provenance make_transformed(const Provenance& of);
  std::string to_string() const;
};

struct LabeledImageSet {
  Tensor images;  // [N, C, H, W], values in [0, 1]
  std::vector<int> labels;
  Provenance provenance;
  Split split = Split::unsplit;
  uint64_t seed = 0;
  // index range in the generation order, for overlap audits
  int64_t origin_begin = 0;
  int64_t origin_end = 0;

  int64_t count() const { return static_cast<int64_t>(labels.size()); }
  LabeledImageSet subset(const std::vector<int64_t>& indices) const;
  void validate() const;
};

// Procedural RGB shapes-by-texture dataset: 10 classes from
// {disk, square, cross, stripe, ring} x {smooth, noisy}. Colors and geometry
// are randomized per image so class identity never reduces to color.
LabeledImageSet generate_toy_dataset(uint64_t seed, int64_t n, int classes = 10,
                                     int size = 32);

// CIFAR-10 binary records: 1 label byte + 3072 channel-major pixel bytes.
LabeledImageSet read_cifar10_binary(const std::string& path);

struct SplitSets {
  LabeledImageSet train, val, test;
};

// Stratified 80/10/10 split, deterministic for a given seed.
SplitSets split_dataset(const LabeledImageSet& set, uint64_t seed);

// Dataset container: directory with manifest.json + data.bin.
void save_dataset(const LabeledImageSet& set, const std::string& dir);
LabeledImageSet load_dataset(const std::string& dir);

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 14695981039346656037ULL);

}  // namespace adfp
