#include "adfp/nn.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace adfp {

namespace {

constexpr char kMagic[4] = {'A', 'D', 'F', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
constexpr uint8_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>)
    return 0;
  else
    return 1;
}

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    path_ = path;
  }
  void bytes(const void* p, size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("checkpoint: write failed at offset " +
                             std::to_string(offset_) + " in '" + path_ + "'");
    offset_ += n;
  }
  void u16(uint16_t v) { bytes(&v, 2); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u8(uint8_t v) { bytes(&v, 1); }

 private:
  std::ofstream out_;
  std::string path_;
  size_t offset_ = 0;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("checkpoint: cannot open '" + path + "'");
    path_ = path;
  }
  void bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n)
      throw IoError("checkpoint: truncated file '" + path_ + "' at offset " +
                    std::to_string(offset_ + static_cast<size_t>(in_.gcount())));
    offset_ += n;
  }
  uint16_t u16() { uint16_t v; bytes(&v, 2); return v; }
  uint32_t u32() { uint32_t v; bytes(&v, 4); return v; }
  uint8_t u8() { uint8_t v; bytes(&v, 1); return v; }
  size_t offset() const { return offset_; }
  bool at_eof() {
    in_.peek();
    return in_.eof();
  }
  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
  size_t offset_ = 0;
};

}  // namespace

template <typename T>
void ParameterSetT<T>::add(const std::string& name, TensorT<T> value) {
  if (params_.count(name))
    throw std::invalid_argument("ParameterSet: duplicate parameter '" + name +
                                "'");
  value.set_requires_grad(true);
  params_.emplace(name, std::move(value));
}

template <typename T>
bool ParameterSetT<T>::has(const std::string& name) const {
  return params_.count(name) > 0;
}

template <typename T>
TensorT<T>& ParameterSetT<T>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::invalid_argument("ParameterSet: unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
const TensorT<T>& ParameterSetT<T>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::invalid_argument("ParameterSet: unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
Params<T> ParameterSetT<T>::shadow() const {
  Params<T> out;
  for (const auto& [name, t] : params_) {
    TensorT<T> s = t.detach();
    s.set_requires_grad(true);
    out.emplace(name, std::move(s));
  }
  return out;
}

template <typename T>
Params<T> ParameterSetT<T>::frozen() const {
  Params<T> out;
  for (const auto& [name, t] : params_) out.emplace(name, t.detach());
  return out;
}

template <typename T>
void ParameterSetT<T>::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

template <typename T>
void ParameterSetT<T>::accumulate(const std::vector<Params<T>>& shadows) {
  for (auto& [name, t] : params_) {
    for (const auto& view : shadows) {
      auto it = view.find(name);
      if (it == view.end())
        throw std::invalid_argument("ParameterSet: shadow view missing '" +
                                    name + "'");
      if (it->second.has_grad()) t.accumulate_grad(it->second.grad_data());
    }
  }
}

template <typename T>
void ParameterSetT<T>::adam_step(const AdamConfig& cfg) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  for (auto& [name, t] : params_) {
    auto& slot = adam_[name];
    const auto n = static_cast<size_t>(t.size());
    if (slot.m.empty()) {
      slot.m.assign(n, T(0));
      slot.v.assign(n, T(0));
    }
    const auto g = t.grad_data();
    auto values = t.raw();
    for (size_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      if (!std::isfinite(gi))
        throw std::invalid_argument("adam_step: non-finite gradient in '" +
                                    name + "'");
      const double m = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * gi;
      const double v = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * gi * gi;
      slot.m[i] = static_cast<T>(m);
      slot.v[i] = static_cast<T>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      values[i] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <typename T>
void ParameterSetT<T>::save(const std::string& path) const {
  Writer w(path);
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<uint32_t>(params_.size()));
  for (const auto& [name, t] : params_) {
    if (name.size() > 0xffff)
      throw std::invalid_argument("checkpoint: parameter name too long");
    w.u16(static_cast<uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(dtype_tag<T>());
    const auto& shape = t.shape();
    if (shape.size() > 0xff)
      throw std::invalid_argument("checkpoint: rank too large");
    w.u8(static_cast<uint8_t>(shape.size()));
    for (int64_t d : shape) w.u32(static_cast<uint32_t>(d));
    const auto data = t.data();
    w.bytes(data.data(), data.size() * sizeof(T));
  }
}

template <typename T>
ParameterSetT<T> ParameterSetT<T>::load(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in '" + path +
                  "' at offset 0 (expected \"ADF1\")");
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version) +
                  " at offset 4 (expected " + std::to_string(kVersion) + ")");
  const uint32_t count = r.u32();
  ParameterSetT ps;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16();
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    const size_t tag_offset = r.offset();
    const uint8_t tag = r.u8();
    if (tag != dtype_tag<T>())
      throw IoError("checkpoint: dtype tag " + std::to_string(tag) +
                    " at offset " + std::to_string(tag_offset) +
                    " does not match requested precision");
    const uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<T> data(static_cast<size_t>(numel(shape)));
    r.bytes(data.data(), data.size() * sizeof(T));
    ps.add(name, TensorT<T>::from_data(std::move(shape), std::move(data)));
  }
  if (!r.at_eof())
    throw IoError("checkpoint: trailing bytes at offset " +
                  std::to_string(r.offset()) + " in '" + path + "'");
  return ps;
}

template <typename T>
bool ParameterSetT<T>::same_values(const ParameterSetT& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto it = other.params_.begin();
  for (const auto& [name, t] : params_) {
    if (it->first != name || it->second.shape() != t.shape()) return false;
    const auto a = t.data();
    const auto b = it->second.data();
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) != 0) return false;
    ++it;
  }
  return true;
}

// ---- layers ----

template <typename T>
void register_conv(ParameterSetT<T>& ps, const std::string& name, int64_t out_c,
                   int64_t in_c, int64_t k, Rng& rng, bool zero_init) {
  const int64_t fan_in = in_c * k * k;
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> w(static_cast<size_t>(out_c * fan_in));
  if (!zero_init)
    for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
  ps.add(name + ".w", TensorT<T>::from_data({out_c, in_c, k, k}, std::move(w)));
  ps.add(name + ".b", TensorT<T>::zeros({out_c, 1, 1}));
}

template <typename T>
void register_linear(ParameterSetT<T>& ps, const std::string& name, int64_t in_f,
                     int64_t out_f, Rng& rng, bool zero_init) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in_f));
  std::vector<T> w(static_cast<size_t>(in_f * out_f));
  if (!zero_init)
    for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
  ps.add(name + ".w", TensorT<T>::from_data({in_f, out_f}, std::move(w)));
  ps.add(name + ".b", TensorT<T>::zeros({out_f}));
}

template <typename T>
void register_group_norm(ParameterSetT<T>& ps, const std::string& name,
                         int64_t channels) {
  ps.add(name + ".g", TensorT<T>::full({channels, 1, 1}, T(1)));
  ps.add(name + ".b", TensorT<T>::zeros({channels, 1, 1}));
}

template <typename T>
const TensorT<T>& param(const Params<T>& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end())
    throw std::invalid_argument("params: missing '" + name + "'");
  return it->second;
}

template <typename T>
TensorT<T> conv2d_layer(const TensorT<T>& x, const Params<T>& p,
                        const std::string& name, int stride, int pad) {
  auto y = conv2d(x, param(p, name + ".w"), stride, pad);
  return add(y, param(p, name + ".b"));
}

template <typename T>
TensorT<T> linear_layer(const TensorT<T>& x, const Params<T>& p,
                        const std::string& name) {
  auto y = matmul(x, param(p, name + ".w"));
  return add(y, param(p, name + ".b"));
}

template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, const Params<T>& p,
                      const std::string& name, int groups, double eps) {
  if (x.rank() != 4)
    throw std::invalid_argument("group_norm: expected NCHW input, got " +
                                format_shape(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C % groups != 0)
    throw std::invalid_argument("group_norm: channels " + std::to_string(C) +
                                " not divisible by " + std::to_string(groups));
  auto g = reshape(x, {N, static_cast<int64_t>(groups), C / groups * H * W});
  auto mu = mean(g, {2}, true);
  auto centered = sub(g, mu);
  auto var = mean(mul(centered, centered), {2}, true);
  auto norm = div(centered, sqrt(add(var, static_cast<T>(eps))));
  auto y = reshape(norm, {N, C, H, W});
  return add(mul(y, param(p, name + ".g")), param(p, name + ".b"));
}

template <typename T>
TensorT<T> sinusoidal_embedding(std::span<const int> t, int64_t dim,
                                double max_period) {
  if (dim % 2 != 0)
    throw std::invalid_argument("sinusoidal_embedding: dim must be even");
  const int64_t B = static_cast<int64_t>(t.size());
  const int64_t half = dim / 2;
  std::vector<T> out(static_cast<size_t>(B * dim));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(max_period) * static_cast<double>(i) /
                   static_cast<double>(half));
      const double arg = static_cast<double>(t[static_cast<size_t>(b)]) * freq;
      out[static_cast<size_t>(b * dim + i)] = static_cast<T>(std::sin(arg));
      out[static_cast<size_t>(b * dim + half + i)] =
          static_cast<T>(std::cos(arg));
    }
  }
  return TensorT<T>::from_data({B, dim}, std::move(out));
}

#define ADFP_NN_INSTANTIATE(T)                                                  \
  template class ParameterSetT<T>;                                             \
  template void register_conv(ParameterSetT<T>&, const std::string&, int64_t,  \
                              int64_t, int64_t, Rng&, bool);                   \
  template void register_linear(ParameterSetT<T>&, const std::string&,         \
                                int64_t, int64_t, Rng&, bool);                 \
  template void register_group_norm(ParameterSetT<T>&, const std::string&,     \
                                    int64_t);                                  \
  template const TensorT<T>& param(const Params<T>&, const std::string&);      \
  template TensorT<T> conv2d_layer(const TensorT<T>&, const Params<T>&,        \
                                   const std::string&, int, int);              \
  template TensorT<T> linear_layer(const TensorT<T>&, const Params<T>&,        \
                                   const std::string&);                        \
  template TensorT<T> group_norm(const TensorT<T>&, const Params<T>&,          \
                                 const std::string&, int, double);             \
  template TensorT<T> sinusoidal_embedding(std::span<const int>, int64_t,      \
                                           double);

ADFP_NN_INSTANTIATE(float)
ADFP_NN_INSTANTIATE(double)

#undef ADFP_NN_INSTANTIATE

}  // namespace adfp
