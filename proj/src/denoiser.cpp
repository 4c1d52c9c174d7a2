#include "adfp/denoiser.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>

namespace adfp {

using nlohmann::json;

namespace {

constexpr int kGroups = 4;

void register_res_block(ParameterSet& ps, const std::string& name, int64_t c,
                        int64_t temb_dim, Rng& rng) {
  register_group_norm(ps, name + ".gn1", c);
  register_conv(ps, name + ".conv1", c, c, 3, rng);
  register_linear(ps, name + ".tp", temb_dim, c, rng);
  register_group_norm(ps, name + ".gn2", c);
  register_conv(ps, name + ".conv2", c, c, 3, rng);
}

Tensor res_block(const Params<float>& p, const std::string& name,
                 const Tensor& x, const Tensor& temb) {
  auto h = group_norm(x, p, name + ".gn1", kGroups);
  h = silu(h);
  h = conv2d_layer(h, p, name + ".conv1");
  auto proj = linear_layer(temb, p, name + ".tp");
  proj = reshape(proj, {proj.dim(0), proj.dim(1), 1, 1});
  h = add(h, proj);
  h = group_norm(h, p, name + ".gn2", kGroups);
  h = silu(h);
  h = conv2d_layer(h, p, name + ".conv2");
  return add(x, h);
}

}  // namespace

DenoiserModel::DenoiserModel(DenoiserDesc desc, uint64_t seed)
    : desc_(desc) {
  if (desc_.base % kGroups != 0)
    throw std::invalid_argument("DenoiserModel: base channels must be a "
                                "multiple of " + std::to_string(kGroups));
  Rng rng = Rng(seed).derive(0xD1);
  const int64_t b = desc_.base, e = desc_.temb_dim;
  register_linear(params_, "temb.l1", e, e, rng);
  register_linear(params_, "temb.l2", e, e, rng);
  register_conv(params_, "in", b, desc_.channels, 3, rng);
  register_res_block(params_, "rb1", b, e, rng);
  register_conv(params_, "down1", 2 * b, b, 3, rng);
  register_res_block(params_, "rb2", 2 * b, e, rng);
  register_conv(params_, "down2", 4 * b, 2 * b, 3, rng);
  register_res_block(params_, "mid", 4 * b, e, rng);
  register_conv(params_, "up2", 2 * b, 4 * b, 3, rng);
  register_conv(params_, "fuse2", 2 * b, 4 * b, 3, rng);
  register_res_block(params_, "rb4", 2 * b, e, rng);
  register_conv(params_, "up1", b, 2 * b, 3, rng);
  register_conv(params_, "fuse1", b, 2 * b, 3, rng);
  register_res_block(params_, "rb5", b, e, rng);
  register_conv(params_, "out", desc_.channels, b, 3, rng, /*zero_init=*/true);
}

Tensor DenoiserModel::forward(const Params<float>& p, const Tensor& x,
                              std::span<const int> t) const {
  if (x.rank() != 4 || x.dim(1) != desc_.channels ||
      x.dim(2) != desc_.image_size || x.dim(3) != desc_.image_size)
    throw std::invalid_argument("DenoiserModel: input " +
                                format_shape(x.shape()) + " does not match " +
                                std::to_string(desc_.image_size) + "px/" +
                                std::to_string(desc_.channels) + "ch model");
  if (static_cast<int64_t>(t.size()) != x.dim(0))
    throw std::invalid_argument("DenoiserModel: timestep count mismatch");

  auto temb = sinusoidal_embedding<float>(t, desc_.temb_dim);
  temb = linear_layer(temb, p, "temb.l1");
  temb = silu(temb);
  temb = linear_layer(temb, p, "temb.l2");

  auto h0 = conv2d_layer(x, p, "in");
  auto d1 = res_block(p, "rb1", h0, temb);
  auto h1 = conv2d_layer(d1, p, "down1", /*stride=*/2);
  auto d2 = res_block(p, "rb2", h1, temb);
  auto h2 = conv2d_layer(d2, p, "down2", /*stride=*/2);
  auto m = res_block(p, "mid", h2, temb);

  auto u2 = upsample_nearest2d(m, 2);
  u2 = conv2d_layer(u2, p, "up2");
  auto f2 = silu(conv2d_layer(concat<float>({u2, d2}, 1), p, "fuse2"));
  auto r2 = res_block(p, "rb4", f2, temb);

  auto u1 = upsample_nearest2d(r2, 2);
  u1 = conv2d_layer(u1, p, "up1");
  auto f1 = silu(conv2d_layer(concat<float>({u1, d1}, 1), p, "fuse1"));
  auto r1 = res_block(p, "rb5", f1, temb);

  return conv2d_layer(r1, p, "out");
}

Tensor DenoiserModel::predict(const Tensor& x, std::span<const int> t) const {
  NoGradGuard ng;
  return forward(params_.frozen(), x, t);
}

NoiseSchedule DenoiserModel::schedule() const {
  return NoiseSchedule::linear(desc_.T, desc_.beta_start, desc_.beta_end)
      .with_subsample(desc_.S);
}

void DenoiserModel::save(const std::string& basepath) const {
  params_.save(basepath + ".ckpt");
  json j;
  j["image_size"] = desc_.image_size;
  j["channels"] = desc_.channels;
  j["T"] = desc_.T;
  j["beta_start"] = desc_.beta_start;
  j["beta_end"] = desc_.beta_end;
  j["S"] = desc_.S;
  j["base_channels"] = desc_.base;
  j["temb_dim"] = desc_.temb_dim;
  std::ofstream out(basepath + ".json");
  if (!out) throw IoError("DenoiserModel: cannot write '" + basepath + ".json'");
  out << j.dump(2) << "\n";
}

DenoiserModel DenoiserModel::load(const std::string& basepath) {
  std::ifstream in(basepath + ".json");
  if (!in) throw IoError("DenoiserModel: missing '" + basepath + ".json'");
  json j;
  in >> j;
  DenoiserDesc d;
  d.image_size = j.at("image_size").get<int>();
  d.channels = j.at("channels").get<int>();
  d.T = j.at("T").get<int>();
  d.beta_start = j.at("beta_start").get<double>();
  d.beta_end = j.at("beta_end").get<double>();
  d.S = j.at("S").get<int>();
  d.base = j.at("base_channels").get<int>();
  d.temb_dim = j.at("temb_dim").get<int>();
  DenoiserModel m(d, /*seed=*/0);
  ParameterSet loaded = ParameterSet::load(basepath + ".ckpt");
  if (loaded.count() != m.params_.count())
    throw IoError("DenoiserModel: checkpoint parameter count mismatch for '" +
                  basepath + "'");
  m.params_ = std::move(loaded);
  return m;
}

DenoiserTrainLog train_denoiser(DenoiserModel& model,
                                const LabeledImageSet& data, int epochs,
                                int batch, double lr, uint64_t seed,
                                int checkpoint_every,
                                const std::string& checkpoint_dir) {
  if (data.count() == 0)
    throw std::invalid_argument("train_denoiser: empty dataset");
  if (batch < 1) throw std::invalid_argument("train_denoiser: batch must be >= 1");
  const NoiseSchedule sched =
      NoiseSchedule::linear(model.desc().T, model.desc().beta_start,
                            model.desc().beta_end);
  const int64_t n = data.count();
  const int64_t chw = data.images.size() / n;
  const float* raw = data.images.data().data();

  // images live in [-1, 1] inside the model
  std::vector<float> scaled(static_cast<size_t>(n * chw));
  for (size_t i = 0; i < scaled.size(); ++i) scaled[i] = 2.0f * raw[i] - 1.0f;

  const Rng root(seed);
  AdamConfig adam;
  adam.lr = lr;
  DenoiserTrainLog log;

  constexpr int64_t kMicro = 8;
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng = root.derive(0x5u + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    int64_t loss_count = 0;

    for (int64_t start = 0; start < n; start += batch) {
      const int64_t bsz = std::min<int64_t>(batch, n - start);
      const int64_t micro_count = (bsz + kMicro - 1) / kMicro;
      std::vector<Params<float>> shadows(static_cast<size_t>(micro_count));
      std::vector<double> micro_loss(static_cast<size_t>(micro_count), 0.0);

      parallel_for(bsz, kMicro, [&](int64_t mb, int64_t me) {
        const int64_t micro_idx = mb / kMicro;
        const int64_t m = me - mb;
        Params<float> shadow = model.params().shadow();
        std::vector<float> xt(static_cast<size_t>(m * chw));
        std::vector<float> noise(static_cast<size_t>(m * chw));
        std::vector<int> ts(static_cast<size_t>(m));
        for (int64_t i = 0; i < m; ++i) {
          const int64_t sample = order[static_cast<size_t>(start + mb + i)];
          Rng rng = root.derive((static_cast<uint64_t>(epoch) << 32) ^
                                static_cast<uint64_t>(sample));
          const int t = 1 + static_cast<int>(rng.uniform_int(
                                static_cast<uint64_t>(sched.T)));
          ts[static_cast<size_t>(i)] = t;
          const float sa = static_cast<float>(std::sqrt(sched.alpha(t)));
          const float sn = static_cast<float>(std::sqrt(1.0 - sched.alpha(t)));
          const float* x0 = scaled.data() + sample * chw;
          float* xo = xt.data() + i * chw;
          float* no = noise.data() + i * chw;
          for (int64_t j = 0; j < chw; ++j) {
            const float eps = static_cast<float>(rng.normal());
            no[j] = eps;
            xo[j] = sa * x0[j] + sn * eps;
          }
        }
        Shape shape{m, model.desc().channels, model.desc().image_size,
                    model.desc().image_size};
        Tensor xin = Tensor::from_data(shape, std::move(xt));
        Tensor target = Tensor::from_data(shape, std::move(noise));
        Tensor eps_hat = model.forward(shadow, xin, ts);
        Tensor diff = sub(eps_hat, target);
        Tensor loss = mul(sum(mul(diff, diff)),
                          1.0f / static_cast<float>(bsz * chw));
        backward(loss);
        micro_loss[static_cast<size_t>(micro_idx)] =
            static_cast<double>(loss.item());
        shadows[static_cast<size_t>(micro_idx)] = std::move(shadow);
      });

      double batch_loss = 0.0;
      for (double l : micro_loss) batch_loss += l;
      if (!std::isfinite(batch_loss))
        throw std::runtime_error(
            "train_denoiser: non-finite loss at epoch " +
            std::to_string(epoch) + ", batch " + std::to_string(start / batch));
      loss_sum += batch_loss * static_cast<double>(bsz);
      loss_count += bsz;

      model.params().zero_grads();
      model.params().accumulate(shadows);
      model.params().adam_step(adam);
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(loss_count));

    if (checkpoint_every > 0 && !checkpoint_dir.empty() &&
        (epoch + 1) % checkpoint_every == 0) {
      const std::string base =
          (std::filesystem::path(checkpoint_dir) /
           ("dm_ep" + std::to_string(epoch + 1)))
              .string();
      model.save(base);
      log.checkpoints.push_back(base);
    }
  }
  return log;
}

}  // namespace adfp
