#include "adfp/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <json.hpp>

namespace adfp {

using nlohmann::json;

std::string to_string(AttackFamily f) {
  switch (f) {
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::pgd: return "pgd";
    case AttackFamily::masked_pgd: return "masked_pgd";
    case AttackFamily::apgd_ce: return "apgd_ce";
    case AttackFamily::apgd_dlr: return "apgd_dlr";
    case AttackFamily::autoattack: return "aa";
    case AttackFamily::deepfool: return "df";
    case AttackFamily::cw: return "cw";
    case AttackFamily::square: return "square";
    case AttackFamily::nes: return "nes";
    case AttackFamily::bandits: return "bandits";
  }
  return "?";
}

AttackFamily attack_family_from_string(const std::string& s) {
  if (s == "fgsm") return AttackFamily::fgsm;
  if (s == "pgd") return AttackFamily::pgd;
  if (s == "masked_pgd") return AttackFamily::masked_pgd;
  if (s == "apgd_ce") return AttackFamily::apgd_ce;
  if (s == "apgd_dlr") return AttackFamily::apgd_dlr;
  if (s == "aa" || s == "autoattack") return AttackFamily::autoattack;
  if (s == "df" || s == "deepfool") return AttackFamily::deepfool;
  if (s == "cw") return AttackFamily::cw;
  if (s == "square") return AttackFamily::square;
  if (s == "nes") return AttackFamily::nes;
  if (s == "bandits") return AttackFamily::bandits;
  throw ConfigError("unknown attack family '" + s + "'");
}

bool is_black_box(AttackFamily f) {
  return f == AttackFamily::square || f == AttackFamily::nes ||
         f == AttackFamily::bandits;
}

bool respects_epsilon(AttackFamily f) {
  return f != AttackFamily::deepfool && f != AttackFamily::cw;
}

std::string AttackSpec::to_json() const {
  json j;
  j["family"] = adfp::to_string(family);
  j["epsilon"] = epsilon;
  j["alpha"] = alpha;
  j["iters"] = iters;
  if (patch)
    j["patch"] = {patch->x, patch->y, patch->h, patch->w};
  j["query_budget"] = query_budget;
  j["seed"] = seed;
  j["random_start"] = random_start;
  j["cw_c"] = cw_c;
  j["cw_kappa"] = cw_kappa;
  j["cw_lr"] = cw_lr;
  j["nes_sigma"] = nes_sigma;
  j["nes_samples"] = nes_samples;
  j["bandits_prior_lr"] = bandits_prior_lr;
  j["bandits_delta"] = bandits_delta;
  j["bandits_fd_eta"] = bandits_fd_eta;
  j["bandits_tile"] = bandits_tile;
  return j.dump(2);
}

AttackSpec AttackSpec::from_json(const std::string& text) {
  json j = json::parse(text);
  AttackSpec s;
  s.family = attack_family_from_string(j.at("family").get<std::string>());
  s.epsilon = j.at("epsilon").get<double>();
  s.alpha = j.at("alpha").get<double>();
  s.iters = j.at("iters").get<int>();
  if (j.contains("patch")) {
    PatchRect p;
    p.x = j["patch"][0].get<int>();
    p.y = j["patch"][1].get<int>();
    p.h = j["patch"][2].get<int>();
    p.w = j["patch"][3].get<int>();
    s.patch = p;
  }
  s.query_budget = j.at("query_budget").get<int64_t>();
  s.seed = j.at("seed").get<uint64_t>();
  s.random_start = j.value("random_start", true);
  s.cw_c = j.value("cw_c", 1.0);
  s.cw_kappa = j.value("cw_kappa", 0.0);
  s.cw_lr = j.value("cw_lr", 0.01);
  s.nes_sigma = j.value("nes_sigma", 1e-3);
  s.nes_samples = j.value("nes_samples", 10);
  s.bandits_prior_lr = j.value("bandits_prior_lr", 0.1);
  s.bandits_delta = j.value("bandits_delta", 0.1);
  s.bandits_fd_eta = j.value("bandits_fd_eta", 0.1);
  s.bandits_tile = j.value("bandits_tile", 8);
  return s;
}

double AdversarialBatch::success_rate() const {
  if (success.empty()) return 0.0;
  int64_t s = 0;
  for (uint8_t v : success) s += v;
  return static_cast<double>(s) / static_cast<double>(success.size());
}

double AdversarialBatch::max_linf() const {
  const float* a = originals.data().data();
  const float* b = adversarials.data().data();
  double m = 0.0;
  for (int64_t i = 0; i < originals.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

std::vector<double> margins_from_logits(const Tensor& logits,
                                        std::span<const int> y) {
  const int64_t B = logits.dim(0), K = logits.dim(1);
  std::vector<double> out(static_cast<size_t>(B));
  const float* z = logits.data().data();
  for (int64_t b = 0; b < B; ++b) {
    const int yb = y[static_cast<size_t>(b)];
    const float* row = z + b * K;
    float m = -std::numeric_limits<float>::infinity();
    for (int64_t i = 0; i < K; ++i)
      if (i != yb) m = std::max(m, row[i]);
    out[static_cast<size_t>(b)] = static_cast<double>(row[yb]) - m;
  }
  return out;
}

namespace {

constexpr int64_t kChunk = 8;

void clamp01_buf(float* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i) p[i] = std::clamp(p[i], 0.0f, 1.0f);
}

void project_ball(float* cur, const float* orig, int64_t n, float eps) {
  for (int64_t i = 0; i < n; ++i)
    cur[i] = std::clamp(cur[i], orig[i] - eps, orig[i] + eps);
}

std::vector<double> ce_from_logits(const Tensor& logits,
                                   std::span<const int> y) {
  const int64_t B = logits.dim(0), K = logits.dim(1);
  std::vector<double> out(static_cast<size_t>(B));
  const float* z = logits.data().data();
  for (int64_t b = 0; b < B; ++b) {
    const float* row = z + b * K;
    double m = row[0];
    for (int64_t i = 1; i < K; ++i) m = std::max<double>(m, row[i]);
    double s = 0.0;
    for (int64_t i = 0; i < K; ++i) s += std::exp(row[i] - m);
    out[static_cast<size_t>(b)] =
        m + std::log(s) - row[y[static_cast<size_t>(b)]];
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& rows) {
  const int64_t chw = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = static_cast<int64_t>(rows.size());
  std::vector<float> buf(static_cast<size_t>(shape[0] * chw));
  const float* src = x.data().data();
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(buf.data() + static_cast<int64_t>(i) * chw,
                src + rows[i] * chw, static_cast<size_t>(chw) * sizeof(float));
  return Tensor::from_data(std::move(shape), std::move(buf));
}

AdversarialBatch finalize_batch(const VictimModel& model, const Tensor& x,
                                std::span<const int> y, Tensor adversarials) {
  AdversarialBatch out;
  out.originals = x.detach();
  out.adversarials = std::move(adversarials);
  out.true_labels.assign(y.begin(), y.end());
  out.pred_before = predict_classes(model, out.originals);
  out.pred_after = predict_classes(model, out.adversarials);
  out.success.resize(static_cast<size_t>(out.count()));
  for (int64_t i = 0; i < out.count(); ++i)
    out.success[static_cast<size_t>(i)] =
        out.pred_after[static_cast<size_t>(i)] != y[static_cast<size_t>(i)];
  out.queries.assign(static_cast<size_t>(out.count()), 0);
  return out;
}

void check_inputs(const char* op, const Tensor& x, std::span<const int> y,
                  const VictimModel& model) {
  if (x.rank() != 4)
    throw std::invalid_argument(std::string(op) + ": expected NCHW batch, got " +
                                format_shape(x.shape()));
  if (static_cast<int64_t>(y.size()) != x.dim(0))
    throw std::invalid_argument(std::string(op) + ": label count mismatch");
  for (int l : y)
    if (l < 0 || l >= model.num_classes())
      throw std::invalid_argument(std::string(op) + ": label out of range");
  for (float v : x.data())
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::invalid_argument(std::string(op) + ": input outside [0, 1]");
}

// Gradient of the summed objective w.r.t. a chunk of inputs; per-sample rows
// are independent, so chunking never changes results.
struct GradResult {
  std::vector<float> grad;
  std::vector<double> objective;  // per sample, larger = better for the attack
};

GradResult objective_gradient(const VictimModel& model,
                              const std::vector<float>& values,
                              const Shape& shape, std::span<const int> y,
                              ApgdLoss kind) {
  Tensor xt = Tensor::from_data(shape, values);
  xt.set_requires_grad(true);
  Tensor z = model.logits(xt);
  GradResult res;
  if (kind == ApgdLoss::ce) {
    Tensor loss = cross_entropy(z, y);
    backward(loss);
    res.objective = ce_from_logits(z, y);
    res.grad.assign(xt.grad_data().begin(), xt.grad_data().end());
  } else {
    // the quotient is minimized for untargeted attacks; the ascent
    // direction is the gradient of its negation
    Tensor q = dlr_loss(z, y);
    Tensor loss = sum(q);
    backward(loss);
    const float* qv = q.data().data();
    res.objective.resize(static_cast<size_t>(q.dim(0)));
    for (size_t i = 0; i < res.objective.size(); ++i)
      res.objective[i] = -static_cast<double>(qv[i]);
    res.grad.assign(xt.grad_data().begin(), xt.grad_data().end());
    for (float& g : res.grad) g = -g;
  }
  return res;
}

}  // namespace

// ---------- FGSM ----------

AdversarialBatch fgsm(const VictimModel& model, const Tensor& x,
                      std::span<const int> y, double epsilon) {
  check_inputs("fgsm", x, y, model);
  if (epsilon < 0.0)
    throw std::invalid_argument("fgsm: epsilon must be >= 0");
  const int64_t n = x.dim(0);
  const int64_t chw = x.size() / n;
  Tensor adv = x.clone();
  const float eps = static_cast<float>(epsilon);
  parallel_for(n, kChunk, [&](int64_t begin, int64_t end) {
    const int64_t m = end - begin;
    Shape shape = x.shape();
    shape[0] = m;
    std::vector<float> vals(x.data().begin() + begin * chw,
                            x.data().begin() + end * chw);
    auto res = objective_gradient(model, vals, shape,
                                  y.subspan(static_cast<size_t>(begin),
                                            static_cast<size_t>(m)),
                                  ApgdLoss::ce);
    float* dst = adv.raw().data() + begin * chw;
    for (int64_t i = 0; i < m * chw; ++i) {
      const float g = res.grad[static_cast<size_t>(i)];
      const float step = g > 0.0f ? eps : (g < 0.0f ? -eps : 0.0f);
      dst[i] = std::clamp(dst[i] + step, 0.0f, 1.0f);
    }
  });
  return finalize_batch(model, x, y, std::move(adv));
}

// ---------- PGD / masked PGD ----------

namespace {

AdversarialBatch pgd_core(const char* op, const VictimModel& model,
                          const Tensor& x, std::span<const int> y,
                          const AttackSpec& spec,
                          const std::vector<float>* mask) {
  check_inputs(op, x, y, model);
  if (spec.alpha <= 0.0)
    throw std::invalid_argument(std::string(op) + ": alpha must be > 0");
  if (spec.iters < 1)
    throw std::invalid_argument(std::string(op) + ": iters must be >= 1");
  if (spec.epsilon < 0.0)
    throw std::invalid_argument(std::string(op) + ": epsilon must be >= 0");
  const int64_t n = x.dim(0);
  const int64_t chw = x.size() / n;
  const float eps = static_cast<float>(spec.epsilon);
  const float alpha = static_cast<float>(spec.alpha);
  Tensor adv = x.clone();
  const Rng root(spec.seed);

  parallel_for(n, kChunk, [&](int64_t begin, int64_t end) {
    const int64_t m = end - begin;
    Shape shape = x.shape();
    shape[0] = m;
    const float* orig = x.data().data() + begin * chw;
    std::vector<float> cur(orig, orig + m * chw);
    if (spec.random_start) {
      for (int64_t i = 0; i < m; ++i) {
        Rng rng = root.derive(static_cast<uint64_t>(begin + i));
        float* p = cur.data() + i * chw;
        for (int64_t j = 0; j < chw; ++j) {
          float delta = static_cast<float>(rng.uniform(-spec.epsilon, spec.epsilon));
          if (mask) delta *= (*mask)[static_cast<size_t>(j)];
          p[j] = std::clamp(p[j] + delta, 0.0f, 1.0f);
        }
      }
      project_ball(cur.data(), orig, m * chw, eps);
      clamp01_buf(cur.data(), m * chw);
    }
    const auto ysub =
        y.subspan(static_cast<size_t>(begin), static_cast<size_t>(m));
    for (int it = 0; it < spec.iters; ++it) {
      auto res = objective_gradient(model, cur, shape, ysub, ApgdLoss::ce);
      for (int64_t i = 0; i < m * chw; ++i) {
        const float g = res.grad[static_cast<size_t>(i)];
        float step = g > 0.0f ? alpha : (g < 0.0f ? -alpha : 0.0f);
        if (mask) step *= (*mask)[static_cast<size_t>(i % chw)];
        cur[static_cast<size_t>(i)] += step;
      }
      project_ball(cur.data(), orig, m * chw, eps);
      clamp01_buf(cur.data(), m * chw);
    }
    if (mask) {
      // pixels outside the patch stay bit-identical to the original
      for (int64_t i = 0; i < m * chw; ++i)
        if ((*mask)[static_cast<size_t>(i % chw)] == 0.0f)
          cur[static_cast<size_t>(i)] = orig[i];
    }
    std::memcpy(adv.raw().data() + begin * chw, cur.data(),
                cur.size() * sizeof(float));
  });
  return finalize_batch(model, x, y, std::move(adv));
}

}  // namespace

AdversarialBatch pgd(const VictimModel& model, const Tensor& x,
                     std::span<const int> y, const AttackSpec& spec) {
  return pgd_core("pgd", model, x, y, spec, nullptr);
}

AdversarialBatch masked_pgd(const VictimModel& model, const Tensor& x,
                            std::span<const int> y, const AttackSpec& spec) {
  if (!spec.patch)
    throw std::invalid_argument("masked_pgd: missing patch region");
  const PatchRect p = *spec.patch;
  const int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (p.x < 0 || p.y < 0 || p.h < 0 || p.w < 0 || p.x + p.h > H ||
      p.y + p.w > W)
    throw std::invalid_argument("masked_pgd: patch [" + std::to_string(p.x) +
                                "," + std::to_string(p.y) + "," +
                                std::to_string(p.h) + "," +
                                std::to_string(p.w) + "] outside " +
                                std::to_string(H) + "x" + std::to_string(W));
  std::vector<float> mask(static_cast<size_t>(C * H * W), 0.0f);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t yy = p.x; yy < p.x + p.h; ++yy)
      for (int64_t xx = p.y; xx < p.y + p.w; ++xx)
        mask[static_cast<size_t>((c * H + yy) * W + xx)] = 1.0f;
  return pgd_core("masked_pgd", model, x, y, spec, &mask);
}

// ---------- APGD ----------

AdversarialBatch apgd(const VictimModel& model, const Tensor& x,
                      std::span<const int> y, const AttackSpec& spec,
                      ApgdLoss loss) {
  check_inputs("apgd", x, y, model);
  if (spec.iters < 2)
    throw std::invalid_argument("apgd: iters must be >= 2");
  if (spec.alpha <= 0.0)
    throw std::invalid_argument("apgd: alpha must be > 0");
  if (loss == ApgdLoss::dlr && model.num_classes() < 3)
    throw std::invalid_argument("apgd: DLR loss needs >= 3 classes");

  static constexpr double kFractions[] = {0.22, 0.42, 0.58, 0.70,
                                          0.79, 0.86, 0.92, 0.97};
  constexpr double kRho = 0.75;
  std::vector<int> checkpoints;
  for (double f : kFractions) {
    const int c = static_cast<int>(f * spec.iters);
    if (c > 0 && c < spec.iters &&
        (checkpoints.empty() || c > checkpoints.back()))
      checkpoints.push_back(c);
  }

  const int64_t n = x.dim(0);
  const int64_t chw = x.size() / n;
  const float eps = static_cast<float>(spec.epsilon);
  Tensor adv = x.clone();
  std::vector<int64_t> halvings_per_chunk((n + kChunk - 1) / kChunk, 0);

  parallel_for(n, kChunk, [&](int64_t begin, int64_t end) {
    const int64_t m = end - begin;
    Shape shape = x.shape();
    shape[0] = m;
    const float* orig = x.data().data() + begin * chw;
    const auto ysub =
        y.subspan(static_cast<size_t>(begin), static_cast<size_t>(m));

    std::vector<float> cur(orig, orig + m * chw);
    std::vector<float> prev(cur);
    std::vector<float> best_x(cur);
    std::vector<float> eta(static_cast<size_t>(m),
                           2.0f * eps > 0.0f ? 2.0f * eps
                                             : static_cast<float>(spec.alpha));
    auto res = objective_gradient(model, cur, shape, ysub, loss);
    std::vector<double> f_cur = res.objective;
    std::vector<double> f_best = f_cur;
    std::vector<int> improves(static_cast<size_t>(m), 0);
    std::vector<double> ck_best = f_best;
    std::vector<uint8_t> eta_changed(static_cast<size_t>(m), 0);
    int64_t halvings = 0;

    size_t next_ck = 0;
    int last_ck = 0;
    for (int k = 1; k < spec.iters; ++k) {
      // res.grad holds the ascent direction at `cur`
      std::vector<float> z(static_cast<size_t>(m * chw));
      for (int64_t i = 0; i < m * chw; ++i) {
        const float g = res.grad[static_cast<size_t>(i)];
        const float e = eta[static_cast<size_t>(i / chw)];
        const float step = g > 0.0f ? e : (g < 0.0f ? -e : 0.0f);
        z[static_cast<size_t>(i)] = cur[static_cast<size_t>(i)] + step;
      }
      project_ball(z.data(), orig, m * chw, eps);
      clamp01_buf(z.data(), m * chw);
      std::vector<float> next(static_cast<size_t>(m * chw));
      if (k == 1) {
        next = z;
      } else {
        for (int64_t i = 0; i < m * chw; ++i)
          next[static_cast<size_t>(i)] =
              cur[static_cast<size_t>(i)] +
              0.75f * (z[static_cast<size_t>(i)] - cur[static_cast<size_t>(i)]) +
              0.25f * (cur[static_cast<size_t>(i)] - prev[static_cast<size_t>(i)]);
        project_ball(next.data(), orig, m * chw, eps);
        clamp01_buf(next.data(), m * chw);
      }
      prev = cur;
      cur = next;
      res = objective_gradient(model, cur, shape, ysub, loss);
      for (int64_t i = 0; i < m; ++i) {
        const auto iu = static_cast<size_t>(i);
        if (res.objective[iu] > f_cur[iu]) ++improves[iu];
        f_cur[iu] = res.objective[iu];
        if (res.objective[iu] > f_best[iu]) {
          f_best[iu] = res.objective[iu];
          std::memcpy(best_x.data() + i * chw, cur.data() + i * chw,
                      static_cast<size_t>(chw) * sizeof(float));
        }
      }
      if (next_ck < checkpoints.size() && k == checkpoints[next_ck]) {
        const int window = k - last_ck;
        bool any_halved = false;
        for (int64_t i = 0; i < m; ++i) {
          const auto iu = static_cast<size_t>(i);
          const bool cond1 =
              improves[iu] < static_cast<int>(kRho * window);
          const bool cond2 =
              !eta_changed[iu] && !(f_best[iu] > ck_best[iu]);
          if (cond1 || cond2) {
            eta[iu] *= 0.5f;
            ++halvings;
            any_halved = true;
            std::memcpy(cur.data() + i * chw, best_x.data() + i * chw,
                        static_cast<size_t>(chw) * sizeof(float));
            std::memcpy(prev.data() + i * chw, best_x.data() + i * chw,
                        static_cast<size_t>(chw) * sizeof(float));
            f_cur[iu] = f_best[iu];
            eta_changed[iu] = 1;
          } else {
            eta_changed[iu] = 0;
          }
          improves[iu] = 0;
          ck_best[iu] = f_best[iu];
        }
        if (any_halved)
          res = objective_gradient(model, cur, shape, ysub, loss);
        last_ck = k;
        ++next_ck;
      }
    }
    std::memcpy(adv.raw().data() + begin * chw, best_x.data(),
                best_x.size() * sizeof(float));
    halvings_per_chunk[static_cast<size_t>(begin / kChunk)] = halvings;
  });

  AdversarialBatch out = finalize_batch(model, x, y, std::move(adv));
  int64_t total_halvings = 0;
  for (int64_t h : halvings_per_chunk) total_halvings += h;
  out.stats["halvings"] = static_cast<double>(total_halvings);
  return out;
}

// ---------- AutoAttack ensemble ----------

AdversarialBatch autoattack_ensemble(const VictimModel& model, const Tensor& x,
                                     std::span<const int> y,
                                     const AttackSpec& spec) {
  check_inputs("autoattack", x, y, model);
  const int64_t n = x.dim(0);
  const int64_t chw = x.size() / n;
  Tensor adv = x.clone();
  std::vector<uint8_t> success(static_cast<size_t>(n), 0);
  std::vector<std::string> attribution(static_cast<size_t>(n), "none");
  std::vector<int64_t> queries(static_cast<size_t>(n), 0);
  std::vector<int> ycopy(y.begin(), y.end());

  struct Member {
    std::string name;
    std::function<AdversarialBatch(const Tensor&, std::span<const int>)> run;
  };
  std::vector<Member> members;
  members.push_back({"apgd_ce", [&](const Tensor& xs, std::span<const int> ys) {
                       return apgd(model, xs, ys, spec, ApgdLoss::ce);
                     }});
  if (model.num_classes() >= 3)
    members.push_back(
        {"apgd_dlr", [&](const Tensor& xs, std::span<const int> ys) {
           return apgd(model, xs, ys, spec, ApgdLoss::dlr);
         }});
  members.push_back({"square", [&](const Tensor& xs, std::span<const int> ys) {
                       LogitOracle oracle(model);
                       return square_attack(oracle, xs, ys, spec);
                     }});

  for (const auto& member : members) {
    std::vector<int64_t> active;
    for (int64_t i = 0; i < n; ++i)
      if (!success[static_cast<size_t>(i)]) active.push_back(i);
    if (active.empty()) break;
    Tensor xs = gather_rows(x, active);
    std::vector<int> ys(active.size());
    for (size_t i = 0; i < active.size(); ++i)
      ys[i] = ycopy[static_cast<size_t>(active[i])];
    AdversarialBatch sub = member.run(xs, ys);
    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t idx = active[i];
      queries[static_cast<size_t>(idx)] += sub.queries[i];
      if (sub.success[i]) {
        success[static_cast<size_t>(idx)] = 1;
        attribution[static_cast<size_t>(idx)] = member.name;
        std::memcpy(adv.raw().data() + idx * chw,
                    sub.adversarials.data().data() +
                        static_cast<int64_t>(i) * chw,
                    static_cast<size_t>(chw) * sizeof(float));
      }
    }
  }

  AdversarialBatch out = finalize_batch(model, x, y, std::move(adv));
  out.queries = std::move(queries);
  out.attribution = std::move(attribution);
  std::map<std::string, int64_t> counts;
  for (const auto& a : out.attribution) ++counts[a];
  for (const auto& [name, c] : counts)
    out.stats["member_" + name] = static_cast<double>(c);
  return out;
}

// ---------- DeepFool ----------

AdversarialBatch deepfool(const VictimModel& model, const Tensor& x,
                          std::span<const int> y, int iters,
                          double overshoot) {
  check_inputs("deepfool", x, y, model);
  if (model.num_classes() < 2)
    throw std::invalid_argument("deepfool: needs >= 2 classes");
  const int64_t n = x.dim(0);
  const int64_t chw = x.size() / n;
  const int K = model.num_classes();
  Tensor adv = x.clone();

  parallel_for(n, 2, [&](int64_t begin, int64_t end) {
    for (int64_t s = begin; s < end; ++s) {
      Shape shape = x.shape();
      shape[0] = 1;
      const float* orig = x.data().data() + s * chw;
      std::vector<float> r_total(static_cast<size_t>(chw), 0.0f);

      std::vector<float> x0(orig, orig + chw);
      Tensor probe = Tensor::from_data(shape, x0);
      const int ref = predict_classes(model, probe)[0];

      for (int it = 0; it < iters; ++it) {
        std::vector<float> cur(static_cast<size_t>(chw));
        for (int64_t j = 0; j < chw; ++j)
          cur[static_cast<size_t>(j)] = orig[j] + r_total[static_cast<size_t>(j)];
        Tensor xt = Tensor::from_data(shape, cur);
        xt.set_requires_grad(true);
        Tensor z = model.logits(xt);
        const float* zv = z.data().data();
        {
          int cls = 0;
          for (int i = 1; i < K; ++i)
            if (zv[i] > zv[cls]) cls = i;
          if (cls != ref) break;
        }
        double best_score = std::numeric_limits<double>::infinity();
        double best_f = 0.0;
        std::vector<float> best_w;
        Tensor z_ref = slice(z, 1, ref, 1);
        for (int c = 0; c < K; ++c) {
          if (c == ref) continue;
          Tensor diff = sum(sub(slice(z, 1, c, 1), z_ref));
          xt.zero_grad();
          backward(diff);
          const auto g = xt.grad_data();
          double norm2 = 0.0;
          for (float gv : g) norm2 += static_cast<double>(gv) * gv;
          const double f = static_cast<double>(zv[c]) - zv[ref];
          const double score = std::abs(f) / (std::sqrt(norm2) + 1e-12);
          if (score < best_score) {
            best_score = score;
            best_f = f;
            best_w.assign(g.begin(), g.end());
          }
        }
        if (best_w.empty()) break;
        double norm2 = 0.0;
        for (float gv : best_w) norm2 += static_cast<double>(gv) * gv;
        const double coef = std::abs(best_f) / (norm2 + 1e-12);
        for (int64_t j = 0; j < chw; ++j)
          r_total[static_cast<size_t>(j)] +=
              static_cast<float>(coef * best_w[static_cast<size_t>(j)]);

        // flip check on the overshot candidate
        std::vector<float> cand(static_cast<size_t>(chw));
        for (int64_t j = 0; j < chw; ++j)
          cand[static_cast<size_t>(j)] =
              std::clamp(orig[j] + static_cast<float>(1.0 + overshoot) *
                                        r_total[static_cast<size_t>(j)],
                         0.0f, 1.0f);
        Tensor ct = Tensor::from_data(shape, cand);
        if (predict_classes(model, ct)[0] != ref) break;
      }
      float* dst = adv.raw().data() + s * chw;
      for (int64_t j = 0; j < chw; ++j)
        dst[j] = std::clamp(orig[j] + static_cast<float>(1.0 + overshoot) *
                                          r_total[static_cast<size_t>(j)],
                            0.0f, 1.0f);
    }
  });

  AdversarialBatch out = finalize_batch(model, x, y, std::move(adv));
  double l2 = 0.0;
  int64_t cnt = 0;
  const float* a = out.originals.data().data();
  const float* b = out.adversarials.data().data();
  for (int64_t i = 0; i < n; ++i) {
    if (!out.success[static_cast<size_t>(i)]) continue;
    double d2 = 0.0;
    for (int64_t j = 0; j < chw; ++j) {
      const double d = static_cast<double>(a[i * chw + j]) - b[i * chw + j];
      d2 += d * d;
    }
    l2 += std::sqrt(d2);
    ++cnt;
  }
  out.stats["mean_l2"] = cnt ? l2 / static_cast<double>(cnt) : 0.0;
  return out;
}

// ---------- Carlini-Wagner L2 ----------

AdversarialBatch cw_l2(const VictimModel& model, const Tensor& x,
                       std::span<const int> y, double c, double kappa,
                       int iters, double lr) {
  check_inputs("cw_l2", x, y, model);
  if (iters < 1) throw std::invalid_argument("cw_l2: iters must be >= 1");
  const int64_t n = x.dim(0);
  const int64_t chw = x.size() / n;
  Tensor adv = x.clone();

  parallel_for(n, kChunk, [&](int64_t begin, int64_t end) {
    const int64_t m = end - begin;
    Shape shape = x.shape();
    shape[0] = m;
    const float* orig = x.data().data() + begin * chw;
    const auto ysub =
        y.subspan(static_cast<size_t>(begin), static_cast<size_t>(m));

    // box-respecting reparametrization x' = (tanh(w) + 1) / 2
    std::vector<float> w0(static_cast<size_t>(m * chw));
    for (int64_t i = 0; i < m * chw; ++i) {
      const float v = std::clamp(2.0f * orig[i] - 1.0f, -1.0f + 1e-6f,
                                 1.0f - 1e-6f);
      w0[static_cast<size_t>(i)] = std::atanh(v);
    }
    Tensor w = Tensor::from_data(shape, std::move(w0));
    w.set_requires_grad(true);
    std::vector<double> adam_m(static_cast<size_t>(m * chw), 0.0);
    std::vector<double> adam_v(static_cast<size_t>(m * chw), 0.0);

    Tensor xconst = Tensor::from_data(
        shape, std::vector<float>(orig, orig + m * chw));
    std::vector<double> best_l2(static_cast<size_t>(m),
                                std::numeric_limits<double>::infinity());
    std::vector<float> best_adv(orig, orig + m * chw);
    std::vector<uint8_t> found(static_cast<size_t>(m), 0);

    for (int it = 0; it <= iters; ++it) {
      Tensor xprime = mul(add(tanh(w), 1.0f), 0.5f);
      Tensor d = sub(xprime, xconst);
      Tensor l2 = sum(mul(d, d), {1, 2, 3}, false);
      Tensor z = model.logits(xprime);
      Tensor marg = margin_loss(z, ysub);
      Tensor penalty =
          add(relu(add(marg, static_cast<float>(kappa))),
              static_cast<float>(-kappa));
      Tensor obj = add(l2, mul(penalty, static_cast<float>(c)));
      Tensor total = sum(obj);
      if (!std::isfinite(static_cast<double>(total.item())))
        throw std::runtime_error("cw_l2: non-finite objective");

      // bookkeeping: keep the lowest-distortion successful iterate
      const auto pred = argmax_rows(z);
      const float* l2v = l2.data().data();
      const float* xv = xprime.data().data();
      for (int64_t i = 0; i < m; ++i) {
        const auto iu = static_cast<size_t>(i);
        if (pred[iu] != ysub[iu] &&
            static_cast<double>(l2v[i]) < best_l2[iu]) {
          best_l2[iu] = l2v[i];
          found[iu] = 1;
          std::memcpy(best_adv.data() + i * chw, xv + i * chw,
                      static_cast<size_t>(chw) * sizeof(float));
        }
      }
      if (it == iters) break;

      w.zero_grad();
      backward(total);
      const auto g = w.grad_data();
      auto wv = w.raw();
      const double b1 = 0.9, b2 = 0.999, aeps = 1e-8;
      const double bc1 = 1.0 - std::pow(b1, it + 1);
      const double bc2 = 1.0 - std::pow(b2, it + 1);
      for (int64_t i = 0; i < m * chw; ++i) {
        const auto iu = static_cast<size_t>(i);
        adam_m[iu] = b1 * adam_m[iu] + (1.0 - b1) * g[iu];
        adam_v[iu] = b2 * adam_v[iu] + (1.0 - b2) * g[iu] * g[iu];
        wv[i] -= static_cast<float>(lr * (adam_m[iu] / bc1) /
                                    (std::sqrt(adam_v[iu] / bc2) + aeps));
      }
    }

    // fall back to the last candidate when nothing flipped
    float* dst = adv.raw().data() + begin * chw;
    for (int64_t i = 0; i < m; ++i) {
      std::memcpy(dst + i * chw, best_adv.data() + i * chw,
                  static_cast<size_t>(chw) * sizeof(float));
    }
    clamp01_buf(dst, m * chw);
  });

  AdversarialBatch out = finalize_batch(model, x, y, std::move(adv));
  double l2 = 0.0;
  int64_t cnt = 0;
  const float* a = out.originals.data().data();
  const float* b = out.adversarials.data().data();
  for (int64_t i = 0; i < n; ++i) {
    if (!out.success[static_cast<size_t>(i)]) continue;
    double d2 = 0.0;
    for (int64_t j = 0; j < chw; ++j) {
      const double d = static_cast<double>(a[i * chw + j]) - b[i * chw + j];
      d2 += d * d;
    }
    l2 += std::sqrt(d2);
    ++cnt;
  }
  out.stats["mean_l2"] = cnt ? l2 / static_cast<double>(cnt) : 0.0;
  return out;
}

// ---------- Square attack ----------

namespace {

int square_side(double used_fraction, int64_t H, int64_t W) {
  static constexpr double kHalveAt[] = {0.05, 0.15, 0.3, 0.5, 0.7, 0.85};
  double p = 0.24;
  for (double f : kHalveAt)
    if (used_fraction >= f) p *= 0.5;
  const int side = static_cast<int>(
      std::lround(std::sqrt(p * static_cast<double>(H * W))));
  return std::clamp<int>(side, 1, static_cast<int>(std::min(H, W)));
}

}  // namespace

AdversarialBatch square_attack(LogitOracle& oracle, const Tensor& x,
                               std::span<const int> y, const AttackSpec& spec) {
  if (x.rank() != 4)
    throw std::invalid_argument("square_attack: expected NCHW batch");
  if (spec.query_budget < 1)
    throw std::invalid_argument("square_attack: query budget must be >= 1");
  const int64_t n = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t chw = C * H * W;
  const float eps = static_cast<float>(spec.epsilon);
  const Rng root = Rng(spec.seed).derive(0x5A);

  std::vector<float> cur(x.data().begin(), x.data().end());
  std::vector<double> margin(static_cast<size_t>(n),
                             std::numeric_limits<double>::infinity());
  std::vector<int64_t> queries(static_cast<size_t>(n), 0);
  std::vector<uint8_t> success(static_cast<size_t>(n), 0);
  std::vector<int64_t> violations_chunk(1, 0);

  // vertical +/- eps stripes per channel, the classic warm start
  for (int64_t s = 0; s < n; ++s) {
    Rng rng = root.derive(static_cast<uint64_t>(s));
    const float* orig = x.data().data() + s * chw;
    float* dst = cur.data() + s * chw;
    for (int64_t c = 0; c < C; ++c)
      for (int64_t col = 0; col < W; ++col) {
        const float sign = rng.uniform() < 0.5 ? -eps : eps;
        for (int64_t row = 0; row < H; ++row) {
          const int64_t j = (c * H + row) * W + col;
          dst[j] = std::clamp(orig[j] + sign, 0.0f, 1.0f);
        }
      }
  }
  {
    Tensor t = Tensor::from_data(x.shape(), cur);
    const auto m0 = margins_from_logits(oracle.logits(t), y);
    for (int64_t s = 0; s < n; ++s) {
      queries[static_cast<size_t>(s)] = 1;
      margin[static_cast<size_t>(s)] = m0[static_cast<size_t>(s)];
      success[static_cast<size_t>(s)] = m0[static_cast<size_t>(s)] < 0.0;
    }
  }

  std::vector<int64_t> round_of(static_cast<size_t>(n), 0);
  for (;;) {
    std::vector<int64_t> active;
    for (int64_t s = 0; s < n; ++s)
      if (!success[static_cast<size_t>(s)] &&
          queries[static_cast<size_t>(s)] < spec.query_budget)
        active.push_back(s);
    if (active.empty()) break;

    Shape shape = x.shape();
    shape[0] = static_cast<int64_t>(active.size());
    std::vector<float> cand(static_cast<size_t>(shape[0] * chw));
    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t s = active[i];
      Rng rng = root.derive(static_cast<uint64_t>(s))
                    .derive(static_cast<uint64_t>(++round_of[static_cast<size_t>(s)]));
      const float* orig = x.data().data() + s * chw;
      const float* base = cur.data() + s * chw;
      float* dst = cand.data() + static_cast<int64_t>(i) * chw;
      std::memcpy(dst, base, static_cast<size_t>(chw) * sizeof(float));
      const double used = static_cast<double>(queries[static_cast<size_t>(s)]) /
                          static_cast<double>(spec.query_budget);
      const int side = square_side(used, H, W);
      const int64_t uy = static_cast<int64_t>(rng.uniform_int(
          static_cast<uint64_t>(H - side + 1)));
      const int64_t ux = static_cast<int64_t>(rng.uniform_int(
          static_cast<uint64_t>(W - side + 1)));
      for (int64_t c = 0; c < C; ++c) {
        const float sign = rng.uniform() < 0.5 ? -eps : eps;
        for (int64_t yy = uy; yy < uy + side; ++yy)
          for (int64_t xx = ux; xx < ux + side; ++xx) {
            const int64_t j = (c * H + yy) * W + xx;
            dst[j] = std::clamp(orig[j] + sign, 0.0f, 1.0f);
          }
      }
    }
    Tensor ct = Tensor::from_data(std::move(shape), std::move(cand));
    std::vector<int> ys(active.size());
    for (size_t i = 0; i < active.size(); ++i)
      ys[i] = y[static_cast<size_t>(active[i])];
    const auto cm = margins_from_logits(oracle.logits(ct), ys);
    const float* cv = ct.data().data();
    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t s = active[i];
      ++queries[static_cast<size_t>(s)];
      if (cm[i] < margin[static_cast<size_t>(s)]) {
        margin[static_cast<size_t>(s)] = cm[i];
        std::memcpy(cur.data() + s * chw, cv + static_cast<int64_t>(i) * chw,
                    static_cast<size_t>(chw) * sizeof(float));
      }
      if (margin[static_cast<size_t>(s)] < 0.0)
        success[static_cast<size_t>(s)] = 1;
    }
  }

  Tensor adv = Tensor::from_data(x.shape(), std::move(cur));
  AdversarialBatch out;
  out.originals = x.detach();
  out.adversarials = std::move(adv);
  out.true_labels.assign(y.begin(), y.end());
  out.pred_before.assign(static_cast<size_t>(n), -1);
  out.pred_after.assign(static_cast<size_t>(n), -1);
  {
    NoGradGuard ng;
    // classification bookkeeping goes through the same oracle; the extra
    // queries are not charged to the per-sample budget accounting
    const auto before = argmax_rows(oracle.logits(out.originals));
    const auto after = argmax_rows(oracle.logits(out.adversarials));
    for (int64_t i = 0; i < n; ++i) {
      out.pred_before[static_cast<size_t>(i)] = before[static_cast<size_t>(i)];
      out.pred_after[static_cast<size_t>(i)] = after[static_cast<size_t>(i)];
    }
  }
  out.success.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    out.success[static_cast<size_t>(i)] =
        out.pred_after[static_cast<size_t>(i)] != y[static_cast<size_t>(i)];
  out.queries = std::move(queries);
  double mq = 0.0;
  for (int64_t q : out.queries) mq += static_cast<double>(q);
  out.stats["mean_queries"] = mq / static_cast<double>(n);
  return out;
}

// ---------- NES ----------

Tensor nes_gradient(
    const std::function<std::vector<double>(const Tensor&)>& loss_fn,
    const Tensor& x, double sigma, int n, Rng& rng) {
  if (sigma <= 0.0)
    throw std::invalid_argument("nes_gradient: sigma must be > 0");
  if (n < 2 || n % 2 != 0)
    throw std::invalid_argument("nes_gradient: n must be even and >= 2");
  const int64_t d = x.size();
  std::vector<float> dirs(static_cast<size_t>(n) * static_cast<size_t>(d));
  for (auto& v : dirs) v = static_cast<float>(rng.normal());

  // probes stack along the batch axis: [2n, ...sample dims]
  Shape qshape;
  if (x.rank() >= 2 && x.shape()[0] == 1) {
    qshape = x.shape();
    qshape[0] = 2 * static_cast<int64_t>(n);
  } else {
    qshape = x.shape();
    qshape.insert(qshape.begin(), 2 * static_cast<int64_t>(n));
  }
  std::vector<float> probes(static_cast<size_t>(2 * n) *
                            static_cast<size_t>(d));
  const float* xv = x.data().data();
  for (int i = 0; i < n; ++i) {
    const float* u = dirs.data() + static_cast<int64_t>(i) * d;
    float* plus = probes.data() + static_cast<int64_t>(2 * i) * d;
    float* minus = probes.data() + static_cast<int64_t>(2 * i + 1) * d;
    for (int64_t j = 0; j < d; ++j) {
      plus[j] = xv[j] + static_cast<float>(sigma) * u[j];
      minus[j] = xv[j] - static_cast<float>(sigma) * u[j];
    }
  }
  Tensor pt = Tensor::from_data(qshape, std::move(probes));
  const auto losses = loss_fn(pt);
  if (losses.size() != static_cast<size_t>(2 * n))
    throw std::invalid_argument("nes_gradient: loss_fn returned wrong count");

  std::vector<float> ghat(static_cast<size_t>(d), 0.0f);
  for (int i = 0; i < n; ++i) {
    const double delta = losses[static_cast<size_t>(2 * i)] -
                         losses[static_cast<size_t>(2 * i + 1)];
    const float* u = dirs.data() + static_cast<int64_t>(i) * d;
    const double coef = delta / (2.0 * sigma * static_cast<double>(n));
    for (int64_t j = 0; j < d; ++j)
      ghat[static_cast<size_t>(j)] += static_cast<float>(coef * u[j]);
  }
  return Tensor::from_data(x.shape(), std::move(ghat));
}

AdversarialBatch nes_attack(LogitOracle& oracle, const Tensor& x,
                            std::span<const int> y, const AttackSpec& spec,
                            double sigma, int n) {
  if (sigma <= 0.0)
    throw std::invalid_argument("nes_attack: sigma must be > 0");
  if (n < 2 || n % 2 != 0)
    throw std::invalid_argument("nes_attack: n must be even and >= 2");
  const int64_t N = x.dim(0);
  const int64_t chw = x.size() / N;
  const float eps = static_cast<float>(spec.epsilon);
  const float alpha = static_cast<float>(spec.alpha);
  const Rng root = Rng(spec.seed).derive(0xE5);

  std::vector<float> cur(x.data().begin(), x.data().end());
  std::vector<int64_t> queries(static_cast<size_t>(N), 0);
  std::vector<uint8_t> success(static_cast<size_t>(N), 0);
  std::vector<int64_t> iter_of(static_cast<size_t>(N), 0);

  for (int it = 0; it < spec.iters; ++it) {
    std::vector<int64_t> active;
    for (int64_t s = 0; s < N; ++s)
      if (!success[static_cast<size_t>(s)] &&
          queries[static_cast<size_t>(s)] + 2 * n + 1 <= spec.query_budget)
        active.push_back(s);
    if (active.empty()) break;

    // one stacked query batch: 2n probes per active sample
    Shape qshape = x.shape();
    qshape[0] = static_cast<int64_t>(active.size()) * 2 * n;
    std::vector<float> probes(static_cast<size_t>(qshape[0] * chw));
    std::vector<float> dirs(static_cast<size_t>(active.size()) *
                            static_cast<size_t>(n) * static_cast<size_t>(chw));
    std::vector<int> ylong(static_cast<size_t>(qshape[0]));
    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t s = active[i];
      Rng rng = root.derive(static_cast<uint64_t>(s))
                    .derive(static_cast<uint64_t>(++iter_of[static_cast<size_t>(s)]));
      const float* base = cur.data() + s * chw;
      for (int k = 0; k < n; ++k) {
        float* u = dirs.data() +
                   (static_cast<int64_t>(i) * n + k) * chw;
        for (int64_t j = 0; j < chw; ++j)
          u[j] = static_cast<float>(rng.normal());
        float* plus =
            probes.data() +
            ((static_cast<int64_t>(i) * 2 * n) + 2 * k) * chw;
        float* minus = plus + chw;
        for (int64_t j = 0; j < chw; ++j) {
          plus[j] = base[j] + static_cast<float>(sigma) * u[j];
          minus[j] = base[j] - static_cast<float>(sigma) * u[j];
        }
        ylong[static_cast<size_t>((i * 2 * n) + 2 * k)] =
            y[static_cast<size_t>(s)];
        ylong[static_cast<size_t>((i * 2 * n) + 2 * k + 1)] =
            y[static_cast<size_t>(s)];
      }
    }
    Tensor pt = Tensor::from_data(std::move(qshape), std::move(probes));
    const auto losses = ce_from_logits(oracle.logits(pt), ylong);

    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t s = active[i];
      queries[static_cast<size_t>(s)] += 2 * n;
      std::vector<double> ghat(static_cast<size_t>(chw), 0.0);
      for (int k = 0; k < n; ++k) {
        const double delta =
            losses[static_cast<size_t>((i * 2 * n) + 2 * k)] -
            losses[static_cast<size_t>((i * 2 * n) + 2 * k + 1)];
        const float* u =
            dirs.data() + (static_cast<int64_t>(i) * n + k) * chw;
        const double coef = delta / (2.0 * sigma * static_cast<double>(n));
        for (int64_t j = 0; j < chw; ++j)
          ghat[static_cast<size_t>(j)] += coef * u[j];
      }
      float* dst = cur.data() + s * chw;
      const float* orig = x.data().data() + s * chw;
      for (int64_t j = 0; j < chw; ++j) {
        const double g = ghat[static_cast<size_t>(j)];
        const float step = g > 0.0 ? alpha : (g < 0.0 ? -alpha : 0.0f);
        dst[j] = std::clamp(std::clamp(dst[j] + step, orig[j] - eps,
                                       orig[j] + eps),
                            0.0f, 1.0f);
      }
    }
    // success probe, one query per active sample
    Shape cshape = x.shape();
    cshape[0] = static_cast<int64_t>(active.size());
    std::vector<float> cbuf(static_cast<size_t>(cshape[0] * chw));
    for (size_t i = 0; i < active.size(); ++i)
      std::memcpy(cbuf.data() + static_cast<int64_t>(i) * chw,
                  cur.data() + active[i] * chw,
                  static_cast<size_t>(chw) * sizeof(float));
    Tensor ct = Tensor::from_data(std::move(cshape), std::move(cbuf));
    std::vector<int> ys(active.size());
    for (size_t i = 0; i < active.size(); ++i)
      ys[i] = y[static_cast<size_t>(active[i])];
    const auto margins = margins_from_logits(oracle.logits(ct), ys);
    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t s = active[i];
      ++queries[static_cast<size_t>(s)];
      if (margins[i] < 0.0) success[static_cast<size_t>(s)] = 1;
    }
  }

  Tensor adv = Tensor::from_data(x.shape(), std::move(cur));
  AdversarialBatch out;
  out.originals = x.detach();
  out.adversarials = std::move(adv);
  out.true_labels.assign(y.begin(), y.end());
  {
    NoGradGuard ng;
    out.pred_before = argmax_rows(oracle.logits(out.originals));
    out.pred_after = argmax_rows(oracle.logits(out.adversarials));
  }
  out.success.resize(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i)
    out.success[static_cast<size_t>(i)] =
        out.pred_after[static_cast<size_t>(i)] != y[static_cast<size_t>(i)];
  out.queries = std::move(queries);
  double mq = 0.0;
  for (int64_t q : out.queries) mq += static_cast<double>(q);
  out.stats["mean_queries"] = mq / static_cast<double>(N);
  return out;
}

// ---------- Bandits ----------

AdversarialBatch bandits_attack(LogitOracle& oracle, const Tensor& x,
                                std::span<const int> y, const AttackSpec& spec,
                                double prior_lr, double delta) {
  if (spec.query_budget < 2)
    throw std::invalid_argument("bandits_attack: query budget must be >= 2");
  if (delta <= 0.0)
    throw std::invalid_argument("bandits_attack: delta must be > 0");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t chw = C * H * W;
  const int td = std::max(1, spec.bandits_tile);
  const int64_t ph = (H + td - 1) / td, pw = (W + td - 1) / td;
  const int64_t pdim = C * ph * pw;
  const float eps = static_cast<float>(spec.epsilon);
  const float alpha = static_cast<float>(spec.alpha);
  const double h_fd = spec.bandits_fd_eta;
  const Rng root = Rng(spec.seed).derive(0xBA);

  std::vector<float> cur(x.data().begin(), x.data().end());
  std::vector<double> prior(static_cast<size_t>(N * pdim), 0.0);
  std::vector<int64_t> queries(static_cast<size_t>(N), 0);
  std::vector<uint8_t> success(static_cast<size_t>(N), 0);
  std::vector<int64_t> round_of(static_cast<size_t>(N), 0);

  auto upsample = [&](const double* v, std::vector<float>& out_buf) {
    for (int64_t c = 0; c < C; ++c)
      for (int64_t yy = 0; yy < H; ++yy)
        for (int64_t xx = 0; xx < W; ++xx)
          out_buf[static_cast<size_t>((c * H + yy) * W + xx)] =
              static_cast<float>(v[(c * ph + yy / td) * pw + xx / td]);
  };

  for (;;) {
    std::vector<int64_t> active;
    for (int64_t s = 0; s < N; ++s)
      if (!success[static_cast<size_t>(s)] &&
          queries[static_cast<size_t>(s)] + 3 <= spec.query_budget)
        active.push_back(s);
    if (active.empty()) break;

    Shape qshape = x.shape();
    qshape[0] = static_cast<int64_t>(active.size()) * 2;
    std::vector<float> probes(static_cast<size_t>(qshape[0] * chw));
    std::vector<double> u_all(static_cast<size_t>(active.size()) *
                              static_cast<size_t>(pdim));
    std::vector<int> ylong(static_cast<size_t>(qshape[0]));
    std::vector<float> up(static_cast<size_t>(chw));
    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t s = active[i];
      Rng rng = root.derive(static_cast<uint64_t>(s))
                    .derive(static_cast<uint64_t>(++round_of[static_cast<size_t>(s)]));
      double* u = u_all.data() + static_cast<int64_t>(i) * pdim;
      for (int64_t j = 0; j < pdim; ++j) u[j] = rng.normal();
      const double* v = prior.data() + s * pdim;
      const float* base = cur.data() + s * chw;
      for (int sign = 0; sign < 2; ++sign) {
        std::vector<double> q(static_cast<size_t>(pdim));
        const double dsign = sign == 0 ? 1.0 : -1.0;
        for (int64_t j = 0; j < pdim; ++j) q[static_cast<size_t>(j)] = v[j] + dsign * delta * u[j];
        upsample(q.data(), up);
        double norm = 0.0;
        for (float uv : up) norm += static_cast<double>(uv) * uv;
        norm = std::sqrt(norm);
        const double inv = norm > 0.0 ? 1.0 / norm : 0.0;
        float* dst = probes.data() +
                     (static_cast<int64_t>(i) * 2 + sign) * chw;
        for (int64_t j = 0; j < chw; ++j)
          dst[j] = base[j] +
                   static_cast<float>(h_fd * inv * up[static_cast<size_t>(j)]);
        ylong[static_cast<size_t>(i * 2 + sign)] = y[static_cast<size_t>(s)];
      }
    }
    Tensor pt = Tensor::from_data(std::move(qshape), std::move(probes));
    const auto losses = ce_from_logits(oracle.logits(pt), ylong);

    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t s = active[i];
      queries[static_cast<size_t>(s)] += 2;
      const double dl = (losses[i * 2] - losses[i * 2 + 1]) / (2.0 * delta * h_fd);
      double* v = prior.data() + s * pdim;
      const double* u = u_all.data() + static_cast<int64_t>(i) * pdim;
      for (int64_t j = 0; j < pdim; ++j) v[j] += prior_lr * dl * u[j];

      upsample(v, up);
      float* dst = cur.data() + s * chw;
      const float* orig = x.data().data() + s * chw;
      for (int64_t j = 0; j < chw; ++j) {
        const float g = up[static_cast<size_t>(j)];
        const float step = g > 0.0f ? alpha : (g < 0.0f ? -alpha : 0.0f);
        dst[j] = std::clamp(
            std::clamp(dst[j] + step, orig[j] - eps, orig[j] + eps), 0.0f,
            1.0f);
      }
    }
    Shape cshape = x.shape();
    cshape[0] = static_cast<int64_t>(active.size());
    std::vector<float> cbuf(static_cast<size_t>(cshape[0] * chw));
    for (size_t i = 0; i < active.size(); ++i)
      std::memcpy(cbuf.data() + static_cast<int64_t>(i) * chw,
                  cur.data() + active[i] * chw,
                  static_cast<size_t>(chw) * sizeof(float));
    Tensor ct = Tensor::from_data(std::move(cshape), std::move(cbuf));
    std::vector<int> ys(active.size());
    for (size_t i = 0; i < active.size(); ++i)
      ys[i] = y[static_cast<size_t>(active[i])];
    const auto margins = margins_from_logits(oracle.logits(ct), ys);
    for (size_t i = 0; i < active.size(); ++i) {
      const int64_t s = active[i];
      ++queries[static_cast<size_t>(s)];
      if (margins[i] < 0.0) success[static_cast<size_t>(s)] = 1;
    }
  }

  Tensor adv = Tensor::from_data(x.shape(), std::move(cur));
  AdversarialBatch out;
  out.originals = x.detach();
  out.adversarials = std::move(adv);
  out.true_labels.assign(y.begin(), y.end());
  {
    NoGradGuard ng;
    out.pred_before = argmax_rows(oracle.logits(out.originals));
    out.pred_after = argmax_rows(oracle.logits(out.adversarials));
  }
  out.success.resize(static_cast<size_t>(N));
  for (int64_t i = 0; i < N; ++i)
    out.success[static_cast<size_t>(i)] =
        out.pred_after[static_cast<size_t>(i)] != y[static_cast<size_t>(i)];
  out.queries = std::move(queries);
  double mq = 0.0;
  for (int64_t q : out.queries) mq += static_cast<double>(q);
  out.stats["mean_queries"] = mq / static_cast<double>(N);
  return out;
}

// ---------- dispatcher / dataset builder ----------

AdversarialBatch run_attack(const VictimModel& model, const Tensor& x,
                            std::span<const int> y, const AttackSpec& spec) {
  switch (spec.family) {
    case AttackFamily::fgsm:
      return fgsm(model, x, y, spec.epsilon);
    case AttackFamily::pgd:
      return pgd(model, x, y, spec);
    case AttackFamily::masked_pgd:
      return masked_pgd(model, x, y, spec);
    case AttackFamily::apgd_ce:
      return apgd(model, x, y, spec, ApgdLoss::ce);
    case AttackFamily::apgd_dlr:
      return apgd(model, x, y, spec, ApgdLoss::dlr);
    case AttackFamily::autoattack:
      return autoattack_ensemble(model, x, y, spec);
    case AttackFamily::deepfool:
      return deepfool(model, x, y, spec.iters);
    case AttackFamily::cw:
      return cw_l2(model, x, y, spec.cw_c, spec.cw_kappa, spec.iters,
                   spec.cw_lr);
    case AttackFamily::square: {
      LogitOracle oracle(model);
      return square_attack(oracle, x, y, spec);
    }
    case AttackFamily::nes: {
      LogitOracle oracle(model);
      return nes_attack(oracle, x, y, spec, spec.nes_sigma, spec.nes_samples);
    }
    case AttackFamily::bandits: {
      LogitOracle oracle(model);
      return bandits_attack(oracle, x, y, spec, spec.bandits_prior_lr,
                            spec.bandits_delta);
    }
  }
  throw std::invalid_argument("run_attack: unknown family");
}

LabeledImageSet build_attack_dataset(const VictimModel& model,
                                     const LabeledImageSet& sources,
                                     const AttackSpec& spec, int64_t requested,
                                     AttackDatasetStats* stats) {
  constexpr int64_t kBatch = 50;
  const int64_t n = sources.count();
  const int64_t chw = n > 0 ? sources.images.size() / n : 0;

  // only sources the victim classifies correctly can flip
  std::vector<int64_t> eligible;
  if (n > 0) {
    const auto pred = predict_classes(model, sources.images);
    for (int64_t i = 0; i < n; ++i)
      if (pred[static_cast<size_t>(i)] == sources.labels[static_cast<size_t>(i)])
        eligible.push_back(i);
  }

  std::vector<float> kept_images;
  std::vector<int> kept_labels;
  AttackDatasetStats st;
  double query_sum = 0.0;
  int64_t successes = 0;

  for (int64_t start = 0; start < static_cast<int64_t>(eligible.size());
       start += kBatch) {
    if (st.kept >= requested) break;
    const int64_t m =
        std::min<int64_t>(kBatch, static_cast<int64_t>(eligible.size()) - start);
    std::vector<int64_t> rows(eligible.begin() + start,
                              eligible.begin() + start + m);
    Tensor xb = gather_rows(sources.images, rows);
    std::vector<int> yb(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i)
      yb[static_cast<size_t>(i)] =
          sources.labels[static_cast<size_t>(rows[static_cast<size_t>(i)])];

    AttackSpec batch_spec = spec;
    batch_spec.seed = Rng(spec.seed)
                          .derive(static_cast<uint64_t>(start / kBatch))
                          .next_u64();
    AdversarialBatch batch = run_attack(model, xb, yb, batch_spec);
    st.attacked += m;
    for (int64_t q : batch.queries) query_sum += static_cast<double>(q);

    const float* av = batch.adversarials.data().data();
    for (int64_t i = 0; i < m; ++i) {
      if (!batch.success[static_cast<size_t>(i)]) continue;
      ++successes;
      if (st.kept >= requested) continue;
      kept_images.insert(kept_images.end(), av + i * chw, av + (i + 1) * chw);
      kept_labels.push_back(yb[static_cast<size_t>(i)]);
      ++st.kept;
    }
  }

  st.shortfall = std::max<int64_t>(0, requested - st.kept);
  st.success_rate = st.attacked ? static_cast<double>(successes) /
                                      static_cast<double>(st.attacked)
                                : 0.0;
  st.mean_queries =
      st.attacked ? query_sum / static_cast<double>(st.attacked) : 0.0;
  if (st.shortfall > 0)
    std::fprintf(stderr,
                 "[adfp] warning: %s yielded %lld/%lld successful samples\n",
                 to_string(spec.family).c_str(),
                 static_cast<long long>(st.kept),
                 static_cast<long long>(requested));
  if (stats) *stats = st;

  LabeledImageSet out;
  Shape shape = sources.images.shape();
  shape[0] = st.kept;
  out.images = Tensor::from_data(std::move(shape), std::move(kept_images));
  out.labels = std::move(kept_labels);
  out.provenance = Provenance::make_attack(to_string(spec.family), spec.epsilon);
  out.split = Split::unsplit;
  out.seed = spec.seed;
  out.origin_begin = sources.origin_begin;
  out.origin_end = sources.origin_end;
  return out;
}

}  // namespace adfp
