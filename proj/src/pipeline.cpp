#include "adfp/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>
#include <unistd.h>

#include "adfp/svg.hpp"

namespace adfp {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------- config ----------------

std::string RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["data"] = data;
  j["out"] = out;
  j["benign_count"] = benign_count;
  j["source_count"] = source_count;
  j["adv_request"] = adv_request;
  j["image_size"] = image_size;
  j["classes"] = classes;
  j["dm"] = {{"T", dm_T},       {"beta_start", dm_beta_start},
             {"beta_end", dm_beta_end}, {"S", dm_S},
             {"epochs", dm_epochs},     {"batch", dm_batch},
             {"lr", dm_lr},             {"base", dm_base},
             {"temb", dm_temb},         {"checkpoint_every", dm_checkpoint_every}};
  j["victim"] = {{"epochs", victim_epochs},
                 {"batch", victim_batch},
                 {"lr", victim_lr},
                 {"base", victim_base}};
  j["detector"] = {{"epochs", detector_epochs},
                   {"batch", detector_batch},
                   {"lr", detector_lr},
                   {"base", detector_base}};
  j["identifier"] = {{"epochs", identifier_epochs}};
  j["attacks"] = attacks;
  j["eps"] = eps_list;
  j["attack"] = {{"pgd_alpha", pgd_alpha},     {"pgd_iters", pgd_iters},
                 {"apgd_iters", apgd_iters},   {"query_budget", query_budget},
                 {"nes_samples", nes_samples}, {"nes_sigma", nes_sigma},
                 {"nes_iters", nes_iters},     {"blackbox_eps", blackbox_eps},
                 {"patch_size", patch_size},   {"df_iters", df_iters},
                 {"cw_iters", cw_iters},       {"cw_c", cw_c}};
  j["spectrum"] = {{"depth", spectrum_depth}, {"samples", spectrum_samples}};
  j["stages"] = {{"identifier", stage_identifier},
                 {"transfer", stage_transfer},
                 {"spectrum", stage_spectrum}};
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad JSON: ") + e.what());
  }
  RunConfig c;
  c.seed = j.at("seed").get<uint64_t>();
  c.data = j.at("data").get<std::string>();
  c.out = j.at("out").get<std::string>();
  c.benign_count = j.at("benign_count").get<int64_t>();
  c.source_count = j.at("source_count").get<int64_t>();
  c.adv_request = j.at("adv_request").get<int64_t>();
  c.image_size = j.at("image_size").get<int>();
  c.classes = j.at("classes").get<int>();
  const auto& dm = j.at("dm");
  c.dm_T = dm.at("T").get<int>();
  c.dm_beta_start = dm.at("beta_start").get<double>();
  c.dm_beta_end = dm.at("beta_end").get<double>();
  c.dm_S = dm.at("S").get<int>();
  c.dm_epochs = dm.at("epochs").get<int>();
  c.dm_batch = dm.at("batch").get<int>();
  c.dm_lr = dm.at("lr").get<double>();
  c.dm_base = dm.at("base").get<int>();
  c.dm_temb = dm.at("temb").get<int>();
  c.dm_checkpoint_every = dm.at("checkpoint_every").get<int>();
  const auto& v = j.at("victim");
  c.victim_epochs = v.at("epochs").get<int>();
  c.victim_batch = v.at("batch").get<int>();
  c.victim_lr = v.at("lr").get<double>();
  c.victim_base = v.at("base").get<int>();
  const auto& d = j.at("detector");
  c.detector_epochs = d.at("epochs").get<int>();
  c.detector_batch = d.at("batch").get<int>();
  c.detector_lr = d.at("lr").get<double>();
  c.detector_base = d.at("base").get<int>();
  c.identifier_epochs = j.at("identifier").at("epochs").get<int>();
  c.attacks = j.at("attacks").get<std::vector<std::string>>();
  c.eps_list = j.at("eps").get<std::vector<double>>();
  const auto& a = j.at("attack");
  c.pgd_alpha = a.at("pgd_alpha").get<double>();
  c.pgd_iters = a.at("pgd_iters").get<int>();
  c.apgd_iters = a.at("apgd_iters").get<int>();
  c.query_budget = a.at("query_budget").get<int64_t>();
  c.nes_samples = a.at("nes_samples").get<int>();
  c.nes_sigma = a.at("nes_sigma").get<double>();
  c.nes_iters = a.at("nes_iters").get<int>();
  c.blackbox_eps = a.at("blackbox_eps").get<double>();
  c.patch_size = a.at("patch_size").get<int>();
  c.df_iters = a.at("df_iters").get<int>();
  c.cw_iters = a.at("cw_iters").get<int>();
  c.cw_c = a.at("cw_c").get<double>();
  c.spectrum_depth = j.at("spectrum").at("depth").get<int>();
  c.spectrum_samples = j.at("spectrum").at("samples").get<int64_t>();
  c.stage_identifier = j.at("stages").at("identifier").get<bool>();
  c.stage_transfer = j.at("stages").at("transfer").get<bool>();
  c.stage_spectrum = j.at("stages").at("spectrum").get<bool>();
  return c;
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  size_t b = s.find_last_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

double parse_number(const std::string& text) {
  const std::string t = trim(text);
  const size_t slash = t.find('/');
  try {
    if (slash != std::string::npos)
      return std::stod(t.substr(0, slash)) / std::stod(t.substr(slash + 1));
    return std::stod(t);
  } catch (const std::exception&) {
    throw ConfigError("config: cannot parse number '" + text + "'");
  }
}

bool parse_bool(const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "on" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "off" || t == "no") return false;
  throw ConfigError("config: cannot parse boolean '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

RunConfig RunConfig::from_config_text(const std::string& text) {
  RunConfig c;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);

    if (key == "seed") c.seed = static_cast<uint64_t>(parse_number(value));
    else if (key == "data") c.data = value;
    else if (key == "out") c.out = value;
    else if (key == "benign_count") c.benign_count = static_cast<int64_t>(parse_number(value));
    else if (key == "source_count") c.source_count = static_cast<int64_t>(parse_number(value));
    else if (key == "adv_request") c.adv_request = static_cast<int64_t>(parse_number(value));
    else if (key == "image_size") c.image_size = static_cast<int>(parse_number(value));
    else if (key == "classes") c.classes = static_cast<int>(parse_number(value));
    else if (key == "dm.T") c.dm_T = static_cast<int>(parse_number(value));
    else if (key == "dm.beta_start") c.dm_beta_start = parse_number(value);
    else if (key == "dm.beta_end") c.dm_beta_end = parse_number(value);
    else if (key == "dm.S") c.dm_S = static_cast<int>(parse_number(value));
    else if (key == "dm.epochs") c.dm_epochs = static_cast<int>(parse_number(value));
    else if (key == "dm.batch") c.dm_batch = static_cast<int>(parse_number(value));
    else if (key == "dm.lr") c.dm_lr = parse_number(value);
    else if (key == "dm.base") c.dm_base = static_cast<int>(parse_number(value));
    else if (key == "dm.temb") c.dm_temb = static_cast<int>(parse_number(value));
    else if (key == "dm.checkpoint_every") c.dm_checkpoint_every = static_cast<int>(parse_number(value));
    else if (key == "victim.epochs") c.victim_epochs = static_cast<int>(parse_number(value));
    else if (key == "victim.batch") c.victim_batch = static_cast<int>(parse_number(value));
    else if (key == "victim.lr") c.victim_lr = parse_number(value);
    else if (key == "victim.base") c.victim_base = static_cast<int>(parse_number(value));
    else if (key == "detector.epochs") c.detector_epochs = static_cast<int>(parse_number(value));
    else if (key == "detector.batch") c.detector_batch = static_cast<int>(parse_number(value));
    else if (key == "detector.lr") c.detector_lr = parse_number(value);
    else if (key == "detector.base") c.detector_base = static_cast<int>(parse_number(value));
    else if (key == "identifier.epochs") c.identifier_epochs = static_cast<int>(parse_number(value));
    else if (key == "attacks") c.attacks = split_list(value);
    else if (key == "eps") {
      c.eps_list.clear();
      for (const auto& e : split_list(value)) c.eps_list.push_back(parse_number(e));
    }
    else if (key == "attack.pgd_alpha") c.pgd_alpha = parse_number(value);
    else if (key == "attack.pgd_iters") c.pgd_iters = static_cast<int>(parse_number(value));
    else if (key == "attack.apgd_iters") c.apgd_iters = static_cast<int>(parse_number(value));
    else if (key == "attack.query_budget") c.query_budget = static_cast<int64_t>(parse_number(value));
    else if (key == "attack.nes_samples") c.nes_samples = static_cast<int>(parse_number(value));
    else if (key == "attack.nes_sigma") c.nes_sigma = parse_number(value);
    else if (key == "attack.nes_iters") c.nes_iters = static_cast<int>(parse_number(value));
    else if (key == "attack.blackbox_eps") c.blackbox_eps = parse_number(value);
    else if (key == "attack.patch_size") c.patch_size = static_cast<int>(parse_number(value));
    else if (key == "attack.df_iters") c.df_iters = static_cast<int>(parse_number(value));
    else if (key == "attack.cw_iters") c.cw_iters = static_cast<int>(parse_number(value));
    else if (key == "attack.cw_c") c.cw_c = parse_number(value);
    else if (key == "spectrum.depth") c.spectrum_depth = static_cast<int>(parse_number(value));
    else if (key == "spectrum.samples") c.spectrum_samples = static_cast<int64_t>(parse_number(value));
    else if (key == "stages.identifier") c.stage_identifier = parse_bool(value);
    else if (key == "stages.transfer") c.stage_transfer = parse_bool(value);
    else if (key == "stages.spectrum") c.stage_spectrum = parse_bool(value);
    else throw ConfigError("config line " + std::to_string(lineno) +
                           ": unknown key '" + key + "'");
  }
  return c;
}

// ---------------- grid ----------------

std::string attack_tag(AttackFamily family, double epsilon) {
  const std::string base = to_string(family);
  if (!respects_epsilon(family)) return base;
  const double k = epsilon * 255.0;
  if (std::abs(k - std::lround(k)) < 1e-9)
    return base + "_e" + std::to_string(std::lround(k));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", epsilon);
  std::string tok(buf);
  for (auto& ch : tok)
    if (ch == '.') ch = 'p';
  return base + "_e" + tok;
}

std::vector<AttackGridEntry> attack_grid(const RunConfig& cfg) {
  std::vector<AttackGridEntry> out;
  const std::vector<double> grid_eps =
      cfg.eps_list.empty()
          ? std::vector<double>{1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255}
          : cfg.eps_list;
  const std::vector<double> square_eps =
      cfg.eps_list.empty()
          ? std::vector<double>{2.0 / 255, 4.0 / 255, 8.0 / 255}
          : cfg.eps_list;
  for (const auto& name : cfg.attacks) {
    const AttackFamily family = attack_family_from_string(name);
    switch (family) {
      case AttackFamily::fgsm:
      case AttackFamily::pgd:
      case AttackFamily::apgd_ce:
      case AttackFamily::apgd_dlr:
      case AttackFamily::autoattack:
        for (double e : grid_eps)
          out.push_back({family, e, attack_tag(family, e)});
        break;
      case AttackFamily::square:
        for (double e : square_eps)
          out.push_back({family, e, attack_tag(family, e)});
        break;
      case AttackFamily::masked_pgd:
        out.push_back({family, 1.0, attack_tag(family, 1.0)});
        break;
      case AttackFamily::nes:
      case AttackFamily::bandits:
        out.push_back(
            {family, cfg.blackbox_eps, attack_tag(family, cfg.blackbox_eps)});
        break;
      case AttackFamily::deepfool:
      case AttackFamily::cw:
        out.push_back({family, 0.0, attack_tag(family, 0.0)});
        break;
    }
  }
  return out;
}

AttackSpec make_attack_spec(const RunConfig& cfg, const AttackGridEntry& entry) {
  AttackSpec s;
  s.family = entry.family;
  s.epsilon = entry.epsilon;
  s.alpha = cfg.pgd_alpha;
  s.iters = cfg.pgd_iters;
  s.query_budget = cfg.query_budget;
  s.seed = Rng(cfg.seed).derive(fnv1a64(entry.tag.data(), entry.tag.size())).next_u64();
  s.nes_sigma = cfg.nes_sigma;
  s.nes_samples = cfg.nes_samples;
  s.cw_c = cfg.cw_c;
  switch (entry.family) {
    case AttackFamily::apgd_ce:
    case AttackFamily::apgd_dlr:
    case AttackFamily::autoattack:
      s.iters = cfg.apgd_iters;
      break;
    case AttackFamily::masked_pgd: {
      PatchRect p;
      p.h = cfg.patch_size;
      p.w = cfg.patch_size;
      p.x = (cfg.image_size - cfg.patch_size) / 2;
      p.y = (cfg.image_size - cfg.patch_size) / 2;
      s.patch = p;
      break;
    }
    case AttackFamily::deepfool:
      s.iters = cfg.df_iters;
      break;
    case AttackFamily::cw:
      s.iters = cfg.cw_iters;
      break;
    case AttackFamily::nes:
      s.iters = cfg.nes_iters;
      s.alpha = entry.epsilon / 8.0;
      break;
    case AttackFamily::bandits:
      s.alpha = entry.epsilon / 8.0;
      break;
    default:
      break;
  }
  return s;
}

// ---------------- stage plumbing ----------------

namespace {

uint64_t stage_seed(const RunConfig& cfg, const std::string& name) {
  return Rng(cfg.seed).derive(fnv1a64(name.data(), name.size())).next_u64();
}

std::string data_dir(const RunConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out) / "data" / name).string();
}
std::string attack_dir(const RunConfig& cfg, const std::string& tag,
                       const std::string& split) {
  return (fs::path(cfg.out) / "attacks" / tag / split).string();
}
std::string ckpt_base(const RunConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out) / "checkpoints" / name).string();
}
std::string transformed_dir(const RunConfig& cfg, int S,
                            const std::string& name) {
  return (fs::path(cfg.out) / "transformed" / ("S" + std::to_string(S)) / name)
      .string();
}
std::string report_path(const RunConfig& cfg, const std::string& name) {
  return (fs::path(cfg.out) / "reports" / name).string();
}

bool dataset_exists(const std::string& dir) {
  return fs::exists(fs::path(dir) / "manifest.json");
}
bool ckpt_exists(const std::string& base) { return fs::exists(base + ".ckpt"); }

void log_line(const RunConfig& cfg, const std::string& msg) {
  std::ofstream log(fs::path(cfg.out) / "run.log", std::ios::app);
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%d %H:%M:%S",
                std::gmtime(&now));
  log << stamp << " " << msg << "\n";
  std::fprintf(stderr, "[adfp] %s\n", msg.c_str());
}

class RunLock {
 public:
  explicit RunLock(const std::string& dir)
      : path_((fs::path(dir) / ".lock").string()) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw ConfigError("run directory '" + dir +
                        "' is locked by another process (remove " + path_ +
                        " if stale)");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~RunLock() { ::unlink(path_.c_str()); }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
};

template <class Fn>
void run_stage(const RunConfig& cfg, const std::string& name, Fn fn) {
  log_line(cfg, "stage " + name + ": begin");
  try {
    fn();
  } catch (const std::exception& e) {
    log_line(cfg, "stage " + name + ": FAILED: " + e.what());
    throw IoError("stage " + name + " failed: " + e.what());
  }
  log_line(cfg, "stage " + name + ": done");
}

std::string fmt_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}
std::string fmt_eps(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> benign_split_names() {
  return {"benign_train", "benign_val", "benign_test"};
}

DetectionReport report_for_tag(const RunConfig& cfg, const std::string& tag) {
  ClassifierModel det = ClassifierModel::load(ckpt_base(cfg, "detector_" + tag));
  const auto benign_test = load_dataset(transformed_dir(cfg, cfg.dm_S, "benign_test"));
  const auto adv_test = load_dataset(transformed_dir(cfg, cfg.dm_S, tag + "_test"));
  return evaluate_detector(det, benign_test, adv_test);
}

std::string detection_report_json(const DetectionReport& r) {
  json j;
  j["tp"] = r.tp;
  j["fp"] = r.fp;
  j["tn"] = r.tn;
  j["fn"] = r.fn;
  j["auc"] = r.auc;
  j["ap"] = r.ap;
  j["acc"] = r.acc;
  j["tnr"] = r.tnr;
  j["fnr"] = r.fnr;
  j["tpr"] = r.tpr;
  j["fpr"] = r.fpr;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["a_std"] = r.a_std;
  j["a_rob"] = r.a_rob;
  j["threshold"] = r.threshold;
  return j.dump(2);
}

}  // namespace

// ---------------- stages ----------------

void stage_data(const RunConfig& cfg) {
  bool all = true;
  for (const auto& name : benign_split_names())
    all = all && dataset_exists(data_dir(cfg, name));
  all = all && dataset_exists(data_dir(cfg, "sources"));
  if (all) return;

  LabeledImageSet pool;
  const int64_t total = cfg.benign_count + cfg.source_count;
  if (cfg.data == "toy") {
    pool = generate_toy_dataset(stage_seed(cfg, "data"), total, cfg.classes,
                                cfg.image_size);
  } else if (cfg.data.rfind("cifar10:", 0) == 0) {
    LabeledImageSet full = read_cifar10_binary(cfg.data.substr(8));
    if (full.count() < total)
      throw ConfigError("cifar10 file has " + std::to_string(full.count()) +
                        " records, need " + std::to_string(total));
    std::vector<int64_t> idx(static_cast<size_t>(full.count()));
    for (int64_t i = 0; i < full.count(); ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(stage_seed(cfg, "data"));
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(static_cast<size_t>(total));
    pool = full.subset(idx);
    pool.seed = cfg.seed;
  } else {
    throw ConfigError("unknown data source '" + cfg.data +
                      "' (expected toy or cifar10:<path>)");
  }

  // fixed, disjoint index partition: benign detection pool first, attack
  // sources after it
  std::vector<int64_t> benign_idx, source_idx;
  for (int64_t i = 0; i < cfg.benign_count; ++i) benign_idx.push_back(i);
  for (int64_t i = cfg.benign_count; i < total; ++i) source_idx.push_back(i);
  LabeledImageSet benign = pool.subset(benign_idx);
  benign.origin_begin = 0;
  benign.origin_end = cfg.benign_count;
  LabeledImageSet sources = pool.subset(source_idx);
  sources.origin_begin = cfg.benign_count;
  sources.origin_end = total;

  SplitSets splits = split_dataset(benign, stage_seed(cfg, "split"));
  save_dataset(splits.train, data_dir(cfg, "benign_train"));
  save_dataset(splits.val, data_dir(cfg, "benign_val"));
  save_dataset(splits.test, data_dir(cfg, "benign_test"));
  save_dataset(sources, data_dir(cfg, "sources"));
}

void stage_victim(const RunConfig& cfg) {
  if (ckpt_exists(ckpt_base(cfg, "victim"))) return;
  const auto train = load_dataset(data_dir(cfg, "benign_train"));
  const auto val = load_dataset(data_dir(cfg, "benign_val"));
  ClassifierDesc desc;
  desc.classes = cfg.classes;
  desc.logits = cfg.classes;
  desc.input_size = cfg.image_size;
  desc.base = cfg.victim_base;
  ClassifierModel victim(desc, stage_seed(cfg, "victim_init"));
  const FitLog log =
      train_victim(victim, train, val, cfg.victim_epochs, cfg.victim_batch,
                   cfg.victim_lr, stage_seed(cfg, "victim_train"));
  victim.save(ckpt_base(cfg, "victim"));
  json j;
  j["epoch_loss"] = log.epoch_loss;
  j["val_accuracy"] = log.val_accuracy;
  write_text(ckpt_base(cfg, "victim_log") + ".json", j.dump(2) + "\n");
}

void stage_dm(const RunConfig& cfg) {
  if (ckpt_exists(ckpt_base(cfg, "dm"))) return;
  const auto train = load_dataset(data_dir(cfg, "benign_train"));
  DenoiserDesc desc;
  desc.image_size = cfg.image_size;
  desc.base = cfg.dm_base;
  desc.temb_dim = cfg.dm_temb;
  desc.T = cfg.dm_T;
  desc.beta_start = cfg.dm_beta_start;
  desc.beta_end = cfg.dm_beta_end;
  desc.S = cfg.dm_S;
  DenoiserModel dm(desc, stage_seed(cfg, "dm_init"));
  const auto log = train_denoiser(
      dm, train, cfg.dm_epochs, cfg.dm_batch, cfg.dm_lr,
      stage_seed(cfg, "dm_train"), cfg.dm_checkpoint_every,
      (fs::path(cfg.out) / "checkpoints").string());
  dm.save(ckpt_base(cfg, "dm"));
  json j;
  j["epoch_loss"] = log.epoch_loss;
  j["checkpoints"] = log.checkpoints;
  write_text(ckpt_base(cfg, "dm_log") + ".json", j.dump(2) + "\n");
}

void stage_attacks(const RunConfig& cfg,
                   const std::vector<AttackGridEntry>& entries) {
  if (entries.empty()) return;
  std::optional<ClassifierModel> victim;
  std::optional<LabeledImageSet> sources;
  for (const auto& entry : entries) {
    if (dataset_exists(attack_dir(cfg, entry.tag, "test"))) continue;
    if (!victim) victim = ClassifierModel::load(ckpt_base(cfg, "victim"));
    if (!sources) sources = load_dataset(data_dir(cfg, "sources"));
    const AttackSpec spec = make_attack_spec(cfg, entry);
    AttackDatasetStats stats;
    LabeledImageSet adv =
        build_attack_dataset(*victim, *sources, spec, cfg.adv_request, &stats);
    log_line(cfg, "attack " + entry.tag + ": kept " + std::to_string(stats.kept) +
                      "/" + std::to_string(stats.attacked) + " (rate " +
                      fmt_metric(stats.success_rate) + ")");
    SplitSets splits = split_dataset(adv, stage_seed(cfg, "split_" + entry.tag));
    save_dataset(splits.train, attack_dir(cfg, entry.tag, "train"));
    save_dataset(splits.val, attack_dir(cfg, entry.tag, "val"));
    save_dataset(splits.test, attack_dir(cfg, entry.tag, "test"));
    json j;
    j["family"] = to_string(entry.family);
    j["epsilon"] = entry.epsilon;
    j["success_rate"] = stats.success_rate;
    j["mean_queries"] = stats.mean_queries;
    j["kept"] = stats.kept;
    j["attacked"] = stats.attacked;
    j["shortfall"] = stats.shortfall;
    j["spec"] = json::parse(spec.to_json());
    write_text((fs::path(cfg.out) / "attacks" / entry.tag / "attack.json").string(),
               j.dump(2) + "\n");
  }
}

void stage_transform(const RunConfig& cfg, int S,
                     const std::vector<AttackGridEntry>& entries) {
  std::vector<std::pair<std::string, std::string>> jobs;  // src dir -> name
  for (const auto& name : benign_split_names())
    jobs.emplace_back(data_dir(cfg, name), name);
  for (const auto& entry : entries)
    for (const std::string split : {"train", "val", "test"})
      jobs.emplace_back(attack_dir(cfg, entry.tag, split),
                        entry.tag + "_" + split);

  std::optional<DenoiserModel> dm;
  for (const auto& [src, name] : jobs) {
    const std::string dst = transformed_dir(cfg, S, name);
    if (dataset_exists(dst)) continue;
    if (!dm) dm = DenoiserModel::load(ckpt_base(cfg, "dm"));
    LabeledImageSet set = load_dataset(src);
    const NoiseSchedule sched =
        NoiseSchedule::linear(cfg.dm_T, cfg.dm_beta_start, cfg.dm_beta_end);
    LabeledImageSet tf = set;
    tf.images = ddim_transform(set.images, *dm, sched, S);
    tf.provenance = Provenance::make_transformed(set.provenance);
    save_dataset(tf, dst);
    log_line(cfg, "transform S=" + std::to_string(S) + " " + name + ": " +
                      std::to_string(tf.count()) + " images");
  }
}

void stage_detectors(const RunConfig& cfg,
                     const std::vector<AttackGridEntry>& entries) {
  if (entries.empty()) return;
  std::optional<LabeledImageSet> benign_train;
  for (const auto& entry : entries) {
    const std::string base = ckpt_base(cfg, "detector_" + entry.tag);
    if (ckpt_exists(base)) continue;
    if (!benign_train)
      benign_train = load_dataset(transformed_dir(cfg, cfg.dm_S, "benign_train"));
    const auto adv_train =
        load_dataset(transformed_dir(cfg, cfg.dm_S, entry.tag + "_train"));
    ClassifierDesc desc;
    desc.classes = 2;
    desc.logits = 1;
    desc.input_size = cfg.image_size;
    desc.base = cfg.detector_base;
    ClassifierModel det(desc, stage_seed(cfg, "detector_init_" + entry.tag));
    const FitLog log = train_detector(
        det, *benign_train, adv_train, cfg.detector_epochs, cfg.detector_batch,
        cfg.detector_lr, stage_seed(cfg, "detector_train_" + entry.tag));
    det.save(base);
    json j;
    j["epoch_loss"] = log.epoch_loss;
    write_text(base + "_log.json", j.dump(2) + "\n");
  }

  if (cfg.stage_identifier && !entries.empty() &&
      !ckpt_exists(ckpt_base(cfg, "identifier"))) {
    std::vector<std::pair<std::string, LabeledImageSet>> sets;
    if (!benign_train)
      benign_train = load_dataset(transformed_dir(cfg, cfg.dm_S, "benign_train"));
    sets.emplace_back("benign", *benign_train);
    for (const auto& entry : entries)
      sets.emplace_back(entry.tag, load_dataset(transformed_dir(
                                       cfg, cfg.dm_S, entry.tag + "_train")));
    ClassifierModel ident = train_identifier(
        sets, cfg.identifier_epochs, cfg.detector_batch, cfg.detector_lr,
        stage_seed(cfg, "identifier"), cfg.detector_base);
    ident.save(ckpt_base(cfg, "identifier"));
  }
}

void stage_reports(const RunConfig& cfg,
                   const std::vector<AttackGridEntry>& entries) {
  // Table-3-shaped CSV, one row per (attack, epsilon)
  std::string csv =
      "attack,epsilon,auc,acc,ap,a_std,a_rob,tnr,fnr,tpr,fpr,precision,recall,"
      "f1\n";
  for (const auto& entry : entries) {
    const DetectionReport r = report_for_tag(cfg, entry.tag);
    csv += to_string(entry.family) + "," + fmt_eps(entry.epsilon) + "," +
           fmt_metric(r.auc) + "," + fmt_metric(r.acc) + "," +
           fmt_metric(r.ap) + "," + fmt_metric(r.a_std) + "," +
           fmt_metric(r.a_rob) + "," + fmt_metric(r.tnr) + "," +
           fmt_metric(r.fnr) + "," + fmt_metric(r.tpr) + "," +
           fmt_metric(r.fpr) + "," + fmt_metric(r.precision) + "," +
           fmt_metric(r.recall) + "," + fmt_metric(r.f1) + "\n";
    write_text(report_path(cfg, "detector_" + entry.tag + ".json"),
               detection_report_json(r) + "\n");
  }
  write_text(report_path(cfg, "table3.csv"), csv);

  if (cfg.stage_identifier && !entries.empty()) {
    ClassifierModel ident = ClassifierModel::load(ckpt_base(cfg, "identifier"));
    std::vector<std::pair<std::string, LabeledImageSet>> sets;
    sets.emplace_back("benign",
                      load_dataset(transformed_dir(cfg, cfg.dm_S, "benign_test")));
    for (const auto& entry : entries)
      sets.emplace_back(entry.tag, load_dataset(transformed_dir(
                                       cfg, cfg.dm_S, entry.tag + "_test")));
    std::sort(sets.begin(), sets.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<int> labels, preds;
    for (size_t cls = 0; cls < sets.size(); ++cls) {
      const auto p = predict_classes(ident, sets[cls].second.images);
      for (int v : p) {
        preds.push_back(v);
        labels.push_back(static_cast<int>(cls));
      }
    }
    const auto cm =
        confusion_matrix(preds, labels, static_cast<int>(sets.size()));
    std::string ccsv = "true\\pred";
    for (const auto& [name, set] : sets) ccsv += "," + name;
    ccsv += "\n";
    json cj;
    cj["names"] = json::array();
    for (const auto& [name, set] : sets) cj["names"].push_back(name);
    cj["counts"] = cm;
    for (size_t r = 0; r < sets.size(); ++r) {
      ccsv += sets[r].first;
      for (size_t c = 0; c < sets.size(); ++c)
        ccsv += "," + std::to_string(cm[r][c]);
      ccsv += "\n";
    }
    write_text(report_path(cfg, "confusion.csv"), ccsv);
    write_text(report_path(cfg, "confusion.json"), cj.dump(2) + "\n");
  }

  if (cfg.stage_transfer && !entries.empty()) {
    const auto benign_test =
        load_dataset(transformed_dir(cfg, cfg.dm_S, "benign_test"));
    std::string tcsv = "train\\eval";
    for (const auto& entry : entries) tcsv += "," + entry.tag;
    tcsv += "\n";
    json tj;
    tj["rows"] = json::array();
    tj["cols"] = json::array();
    for (const auto& entry : entries) {
      tj["rows"].push_back(entry.tag);
      tj["cols"].push_back(entry.tag);
    }
    std::vector<std::vector<double>> acc, tpr;
    for (const auto& row : entries) {
      ClassifierModel det =
          ClassifierModel::load(ckpt_base(cfg, "detector_" + row.tag));
      tcsv += row.tag;
      std::vector<double> acc_row, tpr_row;
      for (const auto& col : entries) {
        const auto adv_test =
            load_dataset(transformed_dir(cfg, cfg.dm_S, col.tag + "_test"));
        const DetectionReport r = evaluate_detector(det, benign_test, adv_test);
        tcsv += "," + fmt_metric(r.acc);
        acc_row.push_back(r.acc);
        tpr_row.push_back(r.tpr);
      }
      tcsv += "\n";
      acc.push_back(std::move(acc_row));
      tpr.push_back(std::move(tpr_row));
    }
    tj["accuracy"] = acc;
    tj["tpr"] = tpr;
    write_text(report_path(cfg, "transfer.csv"), tcsv);
    write_text(report_path(cfg, "transfer.json"), tj.dump(2) + "\n");
  }

  if (cfg.stage_spectrum) {
    DenoiserModel dm = DenoiserModel::load(ckpt_base(cfg, "dm"));
    const NoiseSchedule sched =
        NoiseSchedule::linear(cfg.dm_T, cfg.dm_beta_start, cfg.dm_beta_end);
    std::vector<std::pair<std::string, LabeledImageSet>> sets;
    sets.emplace_back("benign", load_dataset(data_dir(cfg, "benign_test")));
    for (const auto& entry : entries)
      sets.emplace_back(entry.tag,
                        load_dataset(attack_dir(cfg, entry.tag, "test")));
    const SpectrumReport rep =
        spectrum_report(sets, dm, sched, cfg.dm_S, cfg.spectrum_depth,
                        cfg.spectrum_samples);
    std::string scsv = "depth,set,radius,power\n";
    for (size_t d = 0; d < rep.curves.size(); ++d)
      for (size_t s = 0; s < rep.set_names.size(); ++s)
        for (size_t r = 0; r < rep.curves[d][s].size(); ++r) {
          char buf[48];
          std::snprintf(buf, sizeof(buf), "%.9g", rep.curves[d][s][r]);
          scsv += std::to_string(d + 1) + "," + rep.set_names[s] + "," +
                  std::to_string(r) + "," + buf + "\n";
        }
    write_text(report_path(cfg, "spectrum.csv"), scsv);
    json sj;
    sj["names"] = rep.set_names;
    sj["mean_pairwise_l1"] = rep.mean_pairwise_l1;
    write_text(report_path(cfg, "spectrum.json"), sj.dump(2) + "\n");
  }
}

// ---------------- entry points ----------------

void run_pipeline(const RunConfig& cfg, bool resume) {
  const fs::path out(cfg.out);
  const std::string config_path = (out / "config.json").string();
  if (fs::exists(config_path)) {
    if (!resume)
      throw ConfigError("run directory '" + cfg.out +
                        "' already exists (pass --resume to continue)");
    const std::string existing = read_text(config_path);
    if (existing != cfg.to_json() + "\n")
      throw ConfigError("run directory '" + cfg.out +
                        "' was created with a different config");
  }
  fs::create_directories(out);
  RunLock lock(cfg.out);
  write_text(config_path, cfg.to_json() + "\n");

  const auto entries = attack_grid(cfg);
  run_stage(cfg, "data", [&] { stage_data(cfg); });
  run_stage(cfg, "victim", [&] { stage_victim(cfg); });
  run_stage(cfg, "dm", [&] { stage_dm(cfg); });
  run_stage(cfg, "attacks", [&] { stage_attacks(cfg, entries); });
  run_stage(cfg, "transform",
            [&] { stage_transform(cfg, cfg.dm_S, entries); });
  run_stage(cfg, "detectors", [&] { stage_detectors(cfg, entries); });
  run_stage(cfg, "reports", [&] { stage_reports(cfg, entries); });
}

void run_ablate_steps(const RunConfig& cfg, const std::vector<int>& s_list,
                      const std::string& tag) {
  if (!ckpt_exists(ckpt_base(cfg, "dm")) ||
      !dataset_exists(attack_dir(cfg, tag, "test")))
    throw ConfigError(
        "ablate-steps needs a completed pipeline run (dm checkpoint and "
        "attack dataset '" + tag + "')");
  for (int S : s_list)
    if (S < 1 || S > cfg.dm_T)
      throw ConfigError("ablate-steps: S = " + std::to_string(S) +
                        " outside [1, T = " + std::to_string(cfg.dm_T) + "]");

  AttackGridEntry entry;
  entry.tag = tag;
  // find epsilon from the attack manifest for the report column
  double epsilon = 0.0;
  {
    const std::string manifest =
        (fs::path(cfg.out) / "attacks" / tag / "attack.json").string();
    const json j = json::parse(read_text(manifest));
    epsilon = j.at("epsilon").get<double>();
    entry.family = attack_family_from_string(j.at("family").get<std::string>());
    entry.epsilon = epsilon;
  }

  std::string csv = "attack,steps,epsilon,acc,ap,tnr,fnr,tpr,fpr\n";
  for (int S : s_list) {
    run_stage(cfg, "ablate transform S=" + std::to_string(S),
              [&] { stage_transform(cfg, S, {entry}); });
    const auto benign_train = load_dataset(transformed_dir(cfg, S, "benign_train"));
    const auto benign_test = load_dataset(transformed_dir(cfg, S, "benign_test"));
    const auto adv_train = load_dataset(transformed_dir(cfg, S, tag + "_train"));
    const auto adv_test = load_dataset(transformed_dir(cfg, S, tag + "_test"));

    ClassifierDesc desc;
    desc.classes = 2;
    desc.logits = 1;
    desc.input_size = cfg.image_size;
    desc.base = cfg.detector_base;
    ClassifierModel det(desc, stage_seed(cfg, "ablate_detector_init_" + tag));
    train_detector(det, benign_train, adv_train, cfg.detector_epochs,
                   cfg.detector_batch, cfg.detector_lr,
                   stage_seed(cfg, "ablate_detector_train_" + tag));
    const DetectionReport r = evaluate_detector(det, benign_test, adv_test);
    csv += to_string(entry.family) + "," + std::to_string(S) + "," +
           fmt_eps(epsilon) + "," + fmt_metric(r.acc) + "," +
           fmt_metric(r.ap) + "," + fmt_metric(r.tnr) + "," +
           fmt_metric(r.fnr) + "," + fmt_metric(r.tpr) + "," +
           fmt_metric(r.fpr) + "\n";
  }
  write_text(report_path(cfg, "ablation.csv"), csv);
}

void run_transfer(const RunConfig& cfg, const std::vector<std::string>& rows,
                  const std::vector<std::string>& cols,
                  const std::string& out_name) {
  auto find_entry = [&](const std::string& tag) {
    const std::string manifest =
        (fs::path(cfg.out) / "attacks" / tag / "attack.json").string();
    if (!fs::exists(manifest))
      throw ConfigError("transfer: attack dataset '" + tag +
                        "' not found (run the attack stage first)");
    const json j = json::parse(read_text(manifest));
    AttackGridEntry e;
    e.tag = tag;
    e.family = attack_family_from_string(j.at("family").get<std::string>());
    e.epsilon = j.at("epsilon").get<double>();
    return e;
  };
  std::set<std::string> all_tags(rows.begin(), rows.end());
  all_tags.insert(cols.begin(), cols.end());
  std::vector<AttackGridEntry> entries;
  for (const auto& tag : all_tags) entries.push_back(find_entry(tag));
  stage_transform(cfg, cfg.dm_S, entries);
  std::vector<AttackGridEntry> row_entries;
  for (const auto& tag : rows) row_entries.push_back(find_entry(tag));
  stage_detectors(cfg, row_entries);

  const auto benign_test =
      load_dataset(transformed_dir(cfg, cfg.dm_S, "benign_test"));
  std::string csv = "train\\eval";
  for (const auto& tag : cols) csv += "," + tag;
  csv += "\n";
  json j;
  j["rows"] = rows;
  j["cols"] = cols;
  std::vector<std::vector<double>> acc, tpr;
  for (const auto& row : rows) {
    ClassifierModel det =
        ClassifierModel::load(ckpt_base(cfg, "detector_" + row));
    csv += row;
    std::vector<double> arow, trow;
    for (const auto& col : cols) {
      const auto adv_test =
          load_dataset(transformed_dir(cfg, cfg.dm_S, col + "_test"));
      const DetectionReport r = evaluate_detector(det, benign_test, adv_test);
      csv += "," + fmt_metric(r.acc);
      arow.push_back(r.acc);
      trow.push_back(r.tpr);
    }
    csv += "\n";
    acc.push_back(std::move(arow));
    tpr.push_back(std::move(trow));
  }
  j["accuracy"] = acc;
  j["tpr"] = tpr;
  write_text(report_path(cfg, out_name + ".csv"), csv);
  write_text(report_path(cfg, out_name + ".json"), j.dump(2) + "\n");
}

void run_spectrum(const RunConfig& cfg, const std::vector<std::string>& tags) {
  DenoiserModel dm = DenoiserModel::load(ckpt_base(cfg, "dm"));
  const NoiseSchedule sched =
      NoiseSchedule::linear(cfg.dm_T, cfg.dm_beta_start, cfg.dm_beta_end);
  std::vector<std::pair<std::string, LabeledImageSet>> sets;
  sets.emplace_back("benign", load_dataset(data_dir(cfg, "benign_test")));
  for (const auto& tag : tags)
    sets.emplace_back(tag, load_dataset(attack_dir(cfg, tag, "test")));
  const SpectrumReport rep = spectrum_report(
      sets, dm, sched, cfg.dm_S, cfg.spectrum_depth, cfg.spectrum_samples);
  std::string scsv = "depth,set,radius,power\n";
  for (size_t d = 0; d < rep.curves.size(); ++d)
    for (size_t s = 0; s < rep.set_names.size(); ++s)
      for (size_t r = 0; r < rep.curves[d][s].size(); ++r) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.9g", rep.curves[d][s][r]);
        scsv += std::to_string(d + 1) + "," + rep.set_names[s] + "," +
                std::to_string(r) + "," + buf + "\n";
      }
  write_text(report_path(cfg, "spectrum.csv"), scsv);
  json sj;
  sj["names"] = rep.set_names;
  sj["mean_pairwise_l1"] = rep.mean_pairwise_l1;
  write_text(report_path(cfg, "spectrum.json"), sj.dump(2) + "\n");
}

// ---------------- plots ----------------

namespace {

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("plot: missing report '" + path + "'");
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(split_list(line));
  }
  return rows;
}

}  // namespace

void run_plot(const std::string& run_dir) {
  const fs::path reports = fs::path(run_dir) / "reports";
  const fs::path plots = reports / "plots";
  fs::create_directories(plots);

  auto matrix_plot = [&](const std::string& csv_name,
                         const std::string& svg_name,
                         const std::string& title, bool numeric) {
    const auto rows = read_csv((reports / csv_name).string());
    if (rows.size() < 2) throw IoError("plot: empty report " + csv_name);
    std::vector<std::string> col_labels(rows[0].begin() + 1, rows[0].end());
    std::vector<std::string> row_labels;
    std::vector<std::vector<double>> cells;
    for (size_t r = 1; r < rows.size(); ++r) {
      row_labels.push_back(rows[r][0]);
      std::vector<double> vals;
      for (size_t c = 1; c < rows[r].size(); ++c)
        vals.push_back(std::stod(rows[r][c]));
      cells.push_back(std::move(vals));
    }
    (void)numeric;
    write_text((plots / svg_name).string(),
               svg_heatmap(cells, row_labels, col_labels, title));
  };

  if (fs::exists(reports / "confusion.csv"))
    matrix_plot("confusion.csv", "confusion.svg", "attack identification",
                false);
  if (fs::exists(reports / "transfer.csv"))
    matrix_plot("transfer.csv", "transfer.svg", "detector transferability",
                true);

  if (fs::exists(reports / "spectrum.csv")) {
    const auto rows = read_csv((reports / "spectrum.csv").string());
    // depth -> set -> curve
    std::map<int, std::map<std::string, std::vector<double>>> curves;
    for (size_t r = 1; r < rows.size(); ++r) {
      const int depth = std::stoi(rows[r][0]);
      curves[depth][rows[r][1]].push_back(std::stod(rows[r][3]));
    }
    for (const auto& [depth, sets] : curves) {
      std::vector<double> xs;
      std::vector<std::pair<std::string, std::vector<double>>> series(
          sets.begin(), sets.end());
      for (size_t i = 0; i < series.front().second.size(); ++i)
        xs.push_back(static_cast<double>(i));
      write_text((plots / ("spectrum_depth" + std::to_string(depth) + ".svg"))
                     .string(),
                 svg_lines(xs, series,
                           "1-D power spectrum, depth " + std::to_string(depth),
                           /*log_y=*/true));
    }
  }

  if (fs::exists(reports / "ablation.csv")) {
    const auto rows = read_csv((reports / "ablation.csv").string());
    std::vector<double> xs;
    std::vector<double> acc;
    for (size_t r = 1; r < rows.size(); ++r) {
      xs.push_back(std::stod(rows[r][1]));
      acc.push_back(std::stod(rows[r][3]));
    }
    write_text((plots / "ablation.svg").string(),
               svg_lines(xs, {{"accuracy", acc}},
                         "detector accuracy vs reverse steps"));
  }
}

// ---------------- audit ----------------

std::vector<std::string> run_audit(const RunConfig& cfg) {
  std::vector<std::string> missing;
  auto need_file = [&](const std::string& path) {
    if (!fs::exists(path)) missing.push_back(path);
  };
  auto need_dataset = [&](const std::string& dir) {
    try {
      load_dataset(dir);
    } catch (const std::exception& e) {
      missing.push_back(dir + " (" + e.what() + ")");
    }
  };
  auto need_ckpt = [&](const std::string& base) {
    try {
      ParameterSet::load(base + ".ckpt");
      if (!fs::exists(base + ".json")) missing.push_back(base + ".json");
    } catch (const std::exception& e) {
      missing.push_back(base + ".ckpt (" + std::string(e.what()) + ")");
    }
  };

  need_file((fs::path(cfg.out) / "config.json").string());
  for (const auto& name : benign_split_names()) need_dataset(data_dir(cfg, name));
  need_dataset(data_dir(cfg, "sources"));
  need_ckpt(ckpt_base(cfg, "victim"));
  need_ckpt(ckpt_base(cfg, "dm"));

  const auto entries = attack_grid(cfg);
  for (const auto& entry : entries) {
    for (const std::string split : {"train", "val", "test"})
      need_dataset(attack_dir(cfg, entry.tag, split));
    need_file((fs::path(cfg.out) / "attacks" / entry.tag / "attack.json").string());
    need_ckpt(ckpt_base(cfg, "detector_" + entry.tag));
    for (const std::string split : {"train", "val", "test"})
      need_dataset(transformed_dir(cfg, cfg.dm_S, entry.tag + "_" + split));
    need_file(report_path(cfg, "detector_" + entry.tag + ".json"));
  }
  for (const auto& name : benign_split_names())
    need_dataset(transformed_dir(cfg, cfg.dm_S, name));
  need_file(report_path(cfg, "table3.csv"));
  if (cfg.stage_identifier && !entries.empty()) {
    need_ckpt(ckpt_base(cfg, "identifier"));
    need_file(report_path(cfg, "confusion.csv"));
  }
  if (cfg.stage_transfer && !entries.empty())
    need_file(report_path(cfg, "transfer.csv"));
  if (cfg.stage_spectrum) need_file(report_path(cfg, "spectrum.csv"));
  return missing;
}

}  // namespace adfp
