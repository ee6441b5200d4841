#include "purer/runner.hpp"

#include "purer/archive.hpp"
#include "purer/errors.hpp"
#include "purer/png_io.hpp"

#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace purer {

std::string to_string(ThetaSource s) {
  switch (s) {
    case ThetaSource::kPurer: return "purer";
    case ThetaSource::kRandom: return "random";
    case ThetaSource::kAverage: return "average";
  }
  return "?";
}

ThetaSource parse_theta_source(const std::string& name) {
  if (name == "purer") return ThetaSource::kPurer;
  if (name == "random") return ThetaSource::kRandom;
  if (name == "average") return ThetaSource::kAverage;
  throw ConfigError("unknown theta source '" + name + "' (expected purer, random or average)");
}

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("bad value '" + text + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad boolean '" + text + "' for " + key);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + xs[i];
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename T>
Field number(const char* key, T ExperimentConfig::*member) {
  return {key, [member](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.*member);
            else return std::to_string(c.*member);
          },
          [key, member](ExperimentConfig& c, const std::string& v) { c.*member = parse_number<T>(key, v); }};
}

// Same for members of nested structs.
template <typename S, typename T>
Field nested(const char* key, S ExperimentConfig::*outer, T S::*member) {
  return {key, [outer, member](const ExperimentConfig& c) {
            if constexpr (std::is_same_v<T, bool>) return std::string((c.*outer).*member ? "true" : "false");
            else if constexpr (std::is_floating_point_v<T>) return fmt((c.*outer).*member);
            else return std::to_string((c.*outer).*member);
          },
          [key, outer, member](ExperimentConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, bool>) (c.*outer).*member = parse_bool(key, v);
            else (c.*outer).*member = parse_number<T>(key, v);
          }};
}

Field flag(const char* key, bool ExperimentConfig::*member) {
  return {key, [member](const ExperimentConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [key, member](ExperimentConfig& c, const std::string& v) { c.*member = parse_bool(key, v); }};
}

Field text(const char* key, std::string ExperimentConfig::*member) {
  return {key, [member](const ExperimentConfig& c) { return c.*member; },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = v; }};
}

Field list(const char* key, std::vector<std::string> ExperimentConfig::*member) {
  return {key, [member](const ExperimentConfig& c) { return join(c.*member); },
          [member](ExperimentConfig& c, const std::string& v) { c.*member = split_list(v); }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = {
      {"scenario", [](const C& c) { return to_string(c.scenario); },
       [](C& c, const std::string& v) {
         try {
           c.scenario = parse_scenario(v);
         } catch (const Error& e) {
           throw ConfigError(e.what());
         }
       }},
      list("data.paths", &C::dataset_paths),
      list("data.split_files", &C::split_files),
      number("data.channels", &C::image_channels),
      number("data.image_size", &C::image_size),
      number("data.synthetic_datasets", &C::synthetic_datasets),
      number("data.synthetic_classes", &C::synthetic_classes),
      number("data.synthetic_per_class", &C::synthetic_per_class),
      number("data.train_classes", &C::train_classes),
      number("data.test_classes", &C::test_classes),
      number("zoo.size", &C::zoo_size),
      text("zoo.dir", &C::zoo_dir),
      nested("pretrain.epochs", &C::pretrain, &PretrainConfig::epochs),
      nested("pretrain.lr", &C::pretrain, &PretrainConfig::lr),
      nested("pretrain.batch_size", &C::pretrain, &PretrainConfig::batch_size),
      nested("pretrain.min_accuracy", &C::pretrain, &PretrainConfig::min_accuracy),
      nested("pretrain.resnet_width_multiplier", &C::pretrain, &PretrainConfig::resnet_width_multiplier),
      nested("hp.alpha_inner", &C::hp, &HyperParams::alpha_inner),
      nested("hp.alpha_outer", &C::hp, &HyperParams::alpha_outer),
      nested("hp.beta", &C::hp, &HyperParams::beta),
      nested("hp.lambda", &C::hp, &HyperParams::lambda),
      nested("hp.episode_batch", &C::hp, &HyperParams::episode_batch),
      nested("hp.way", &C::hp, &HyperParams::way),
      nested("hp.shots", &C::hp, &HyperParams::shots),
      nested("hp.queries", &C::hp, &HyperParams::queries),
      nested("hp.curriculum_start_iter", &C::hp, &HyperParams::curriculum_start_iter),
      nested("hp.patience", &C::hp, &HyperParams::patience),
      nested("hp.second_order", &C::hp, &HyperParams::second_order),
      nested("hp.within_model_tasks", &C::hp, &HyperParams::within_model_tasks),
      nested("inversion.alpha_tv", &C::inversion, &InversionWeights::alpha_tv),
      nested("inversion.alpha_l2", &C::inversion, &InversionWeights::alpha_l2),
      nested("inversion.feature_weight", &C::inversion, &InversionWeights::feature_weight),
      nested("icfil.calibrate", &C::icfil, &IcfilConfig::calibrate),
      nested("icfil.pseudo_per_class", &C::icfil, &IcfilConfig::pseudo_per_class),
      nested("icfil.inversion_steps", &C::icfil, &IcfilConfig::inversion_steps),
      nested("icfil.inversion_beta", &C::icfil, &IcfilConfig::inversion_beta),
      nested("icfil.tau", &C::icfil, &IcfilConfig::tau),
      nested("icfil.normalize_embeddings", &C::icfil, &IcfilConfig::normalize_embeddings),
      nested("icfil.backbone_lr", &C::icfil, &IcfilConfig::backbone_lr),
      nested("icfil.head_iterations", &C::icfil, &IcfilConfig::head_iterations),
      nested("icfil.head_lr", &C::icfil, &IcfilConfig::head_lr),
      nested("icfil.head_init_std", &C::icfil, &IcfilConfig::head_init_std),
      {"feedback.metric", [](const C& c) { return to_string(c.feedback_metric); },
       [](C& c, const std::string& v) { c.feedback_metric = parse_feedback_metric(v); }},
      number("train.total_iterations", &C::total_iterations),
      number("train.checkpoint_every", &C::checkpoint_every),
      number("eval.num_tasks", &C::eval_tasks),
      number("eval.queries", &C::eval_queries),
      number("eval.workers", &C::eval_workers),
      flag("ablation.curriculum", &C::ablation_curriculum),
      flag("ablation.icfil", &C::ablation_icfil),
      number("seed.zoo", &C::seed_zoo),
      number("seed.dataset", &C::seed_dataset),
      number("seed.train", &C::seed_train),
      number("seed.eval", &C::seed_eval),
      text("output.dir", &C::output_dir),
      flag("output.log_wall_time", &C::log_wall_time),
  };
  return table;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  Rng rng(seq);
  return rng();
}

Rng derive_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return Rng(seq);
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.key);
  return out;
}

std::string ExperimentConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", lineno);
    try {
      cfg.set(trim(body.substr(0, eq)), trim(body.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::hash() const { return hex(fnv1a(serialize())); }

void ExperimentConfig::validate() const {
  hp.validate();
  inversion.validate();
  icfil.validate();
  if (image_channels != 1 && image_channels != 3) throw ConfigError("data.channels must be 1 or 3");
  if (image_size < 16) throw ConfigError("data.image_size must be >= 16 for conv4");
  if (!split_files.empty() && split_files.size() != dataset_paths.size())
    throw ConfigError("data.split_files needs one entry per data.paths entry");
  for (const auto& p : dataset_paths)
    if (!fs::is_directory(p)) throw ConfigError("dataset path does not exist: " + p);
  for (const auto& p : split_files)
    if (!fs::is_regular_file(p)) throw ConfigError("split file does not exist: " + p);
  const int num_datasets = dataset_paths.empty() ? synthetic_datasets : static_cast<int>(dataset_paths.size());
  if (num_datasets < 1) throw ConfigError("need at least one dataset");
  if (scenario == Scenario::kMH && num_datasets < 2) throw ConfigError("MH needs at least two datasets");
  if (scenario != Scenario::kMH && num_datasets != 1) throw ConfigError(to_string(scenario) + " uses exactly one dataset");
  if (dataset_paths.empty()) {
    if (synthetic_per_class < hp.shots + hp.queries || synthetic_per_class < hp.shots + eval_queries)
      throw ConfigError("data.synthetic_per_class is smaller than K+M");
    if (train_classes + test_classes > synthetic_classes)
      throw ConfigError("data.train_classes + data.test_classes exceed data.synthetic_classes");
  }
  if (train_classes < hp.way || test_classes < hp.way) throw ConfigError("train and test splits need at least N classes");
  if (zoo_size < 1) throw ConfigError("zoo.size must be >= 1");
  if (hp.way * zoo_size < hp.way) throw ConfigError("zoo too small");
  if (!zoo_dir.empty() && fs::exists(zoo_dir) && !fs::is_directory(zoo_dir))
    throw ConfigError("zoo.dir is not a directory: " + zoo_dir);
  if (total_iterations < 1) throw ConfigError("train.total_iterations must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
  if (ablation_curriculum && total_iterations <= hp.curriculum_start_iter)
    throw ConfigError("train.total_iterations must exceed hp.curriculum_start_iter when the curriculum is on");
  if (eval_tasks < 1 || eval_queries < 1 || eval_workers < 1)
    throw ConfigError("eval.num_tasks, eval.queries and eval.workers must be >= 1");
  if (output_dir.empty()) throw ConfigError("output.dir is empty");
}

std::vector<EvalSplit> Workspace::test_splits() const {
  std::vector<EvalSplit> out;
  for (std::size_t i = 0; i < datasets.size(); ++i) out.emplace_back(&datasets[i], splits[i].test_classes);
  return out;
}

ArchSpec meta_spec(const ExperimentConfig& cfg) {
  ArchSpec s;
  s.channels = cfg.image_channels;
  s.height = s.width = cfg.image_size;
  s.num_classes = cfg.hp.way;
  return s;
}

Workspace prepare_workspace(const ExperimentConfig& cfg) {
  cfg.validate();
  Workspace ws;
  const Shape shape{cfg.image_channels, cfg.image_size, cfg.image_size};
  if (cfg.dataset_paths.empty()) {
    for (int d = 0; d < cfg.synthetic_datasets; ++d) {
      ws.datasets.push_back(make_synthetic_blobs(cfg.synthetic_classes, cfg.synthetic_per_class, shape,
                                                 cfg.seed_dataset + static_cast<std::uint64_t>(d)));
      SplitSpec split;
      for (int c = 0; c < cfg.train_classes; ++c) split.train_classes.push_back(c);
      for (int c = 0; c < cfg.test_classes; ++c) split.test_classes.push_back(cfg.train_classes + c);
      ws.splits.push_back(split);
    }
  } else {
    Rng rng(cfg.seed_dataset);
    for (std::size_t d = 0; d < cfg.dataset_paths.size(); ++d) {
      ws.datasets.push_back(load_dataset(cfg.dataset_paths[d], shape));
      ws.splits.push_back(cfg.split_files.empty()
                              ? make_split(ws.datasets.back(), cfg.train_classes, 0, cfg.test_classes, rng)
                              : read_split_file(cfg.split_files[d], ws.datasets.back()));
    }
  }

  if (!cfg.zoo_dir.empty() && fs::exists(fs::path(cfg.zoo_dir) / "zoo.txt")) {
    ws.zoo = load_zoo(cfg.zoo_dir);
    for (const auto& e : ws.zoo.entries)
      if (e.params.spec.input_shape() != shape || e.params.spec.num_classes != cfg.hp.way)
        throw ConfigError("zoo in " + cfg.zoo_dir + " does not match the configured image shape or way");
  } else {
    std::vector<const LabeledDataset*> ptrs;
    for (const auto& ds : ws.datasets) ptrs.push_back(&ds);
    Rng rng(cfg.seed_zoo);
    ws.zoo = build_zoo(ptrs, ws.splits, cfg.zoo_size, cfg.hp.way, cfg.scenario, cfg.pretrain, rng);
    if (!cfg.zoo_dir.empty()) save_zoo(cfg.zoo_dir, ws.zoo);
  }
  return ws;
}

// ---------------------------------------------------------------------------
// Training loop and checkpoints

namespace {

// Everything that shapes the trajectory; run length, evaluation and output
// settings may change between a run and its resumption.
std::string training_fingerprint(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.total_iterations = 0;
  c.checkpoint_every = 0;
  c.eval_tasks = c.eval_queries = c.eval_workers = 0;
  c.ablation_icfil = false;
  c.icfil = IcfilConfig{};
  c.seed_eval = 0;
  c.output_dir.clear();
  c.log_wall_time = false;
  return hex(fnv1a(c.serialize()));
}

std::string ints(const std::vector<int>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& item : split_list(s)) out.push_back(parse_number<int>("int list", item));
  return out;
}

void put_adam(Archive& a, const std::string& prefix, const AdamState<float>& s) {
  a.meta[prefix + ".step"] = std::to_string(s.step);
  a.meta[prefix + ".count"] = std::to_string(s.m.size());
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    a.arrays.add(prefix + "/m/" + std::to_string(i), s.m[i]);
    a.arrays.add(prefix + "/v/" + std::to_string(i), s.v[i]);
  }
}

AdamState<float> get_adam(const Archive& a, const std::string& prefix) {
  AdamState<float> s;
  s.step = a.get_long(prefix + ".step");
  const long n = a.get_long(prefix + ".count");
  for (long i = 0; i < n; ++i) {
    const long mi = a.arrays.index_of(prefix + "/m/" + std::to_string(i));
    const long vi = a.arrays.index_of(prefix + "/v/" + std::to_string(i));
    if (mi < 0 || vi < 0) throw IoError("checkpoint lacks optimizer moments for " + prefix);
    s.m.push_back(a.arrays.values[static_cast<std::size_t>(mi)]);
    s.v.push_back(a.arrays.values[static_cast<std::size_t>(vi)]);
  }
  return s;
}

void save_checkpoint(const std::string& path, const ExperimentConfig& cfg, const MetaState<float>& state,
                     const DynamicDataset<float>& dd, const FeedbackMonitor& mon, const Rng& rng) {
  Archive a;
  a.meta["kind"] = "purer-run";
  a.meta["fingerprint"] = training_fingerprint(cfg);
  a.meta["iteration"] = std::to_string(state.iteration);
  a.meta["curriculum_active"] = state.curriculum_active ? "1" : "0";
  a.meta["monitor.best"] = mon.best_metric ? fmt(*mon.best_metric) : "none";
  a.meta["monitor.stall"] = std::to_string(mon.stall_count);
  a.meta["monitor.patience"] = std::to_string(mon.patience);
  a.meta["monitor.omega"] = mon.last_omega == Omega::kPositive ? "positive" : "negative";
  a.meta["monitor.metric"] = to_string(mon.metric);
  std::ostringstream rs;
  rs << rng;
  a.meta["rng"] = rs.str();
  a.meta["bank.class_owner"] = ints(dd.class_owner);
  a.meta["bank.assigned_labels"] = ints(dd.assigned_labels);
  put_network(a, "theta", state.theta);
  put_adam(a, "theta_adam", state.optimizer_state);
  a.arrays.add("bank/images", dd.images);
  put_adam(a, "bank_adam", dd.optimizer_state);
  save_archive(path, a);
}

struct Restored {
  MetaState<float> state;
  DynamicDataset<float> dd;
  FeedbackMonitor monitor;
  Rng rng;
};

Restored load_checkpoint(const std::string& path, const ExperimentConfig& cfg) {
  const Archive a = load_archive(path);
  if (a.meta.count("kind") == 0 || a.get("kind") != "purer-run") throw IoError(path + " is not a training checkpoint");
  if (a.get("fingerprint") != training_fingerprint(cfg))
    throw ConfigError("checkpoint " + path + " was written under a different training configuration");
  Restored r;
  r.state.theta = get_network(a, "theta");
  r.state.optimizer_state = get_adam(a, "theta_adam");
  r.state.iteration = a.get_long("iteration");
  r.state.curriculum_active = a.get("curriculum_active") == "1";
  const auto& best = a.get("monitor.best");
  if (best != "none") r.monitor.best_metric = a.get_double("monitor.best");
  r.monitor.stall_count = static_cast<int>(a.get_long("monitor.stall"));
  r.monitor.patience = static_cast<int>(a.get_long("monitor.patience"));
  r.monitor.last_omega = a.get("monitor.omega") == "positive" ? Omega::kPositive : Omega::kNegative;
  r.monitor.metric = parse_feedback_metric(a.get("monitor.metric"));
  std::istringstream rs(a.get("rng"));
  rs >> r.rng;
  if (rs.fail()) throw IoError("checkpoint " + path + " has a corrupt RNG state");
  const long img = a.arrays.index_of("bank/images");
  if (img < 0) throw IoError("checkpoint " + path + " lacks the dynamic dataset");
  r.dd.images = a.arrays.values[static_cast<std::size_t>(img)];
  r.dd.class_owner = parse_ints(a.get("bank.class_owner"));
  r.dd.assigned_labels = parse_ints(a.get("bank.assigned_labels"));
  r.dd.optimizer_state = get_adam(a, "bank_adam");
  if (r.dd.images.rank() != 5 || static_cast<std::size_t>(r.dd.images.shape[0]) != r.dd.class_owner.size() ||
      r.dd.optimizer_state.m.size() != 1 || r.dd.optimizer_state.m[0].shape != r.dd.images.shape)
    throw IoError("checkpoint " + path + " has an inconsistent dynamic dataset");
  return r;
}

std::string csv_row(long iteration, const EciResult<float>& eci, const MetaUpdateResult& r, Omega omega, bool active,
                    int sw, double wall_ms) {
  return std::to_string(iteration) + "," + fmt(eci.inv_loss) + "," + fmt(r.batch_outer_loss) + "," +
         fmt(r.batch_train_acc) + "," + (omega == Omega::kPositive ? "1" : "0") + "," + (active ? "1" : "0") + "," +
         std::to_string(sw) + "," + fmt(wall_ms);
}

// Keeps the header and the first `rows` data lines.
void truncate_csv(const std::string& path, long rows) {
  std::vector<std::string> kept{kMetricsHeader};
  {
    std::ifstream in(path);
    std::string line;
    if (in && std::getline(in, line) && line == kMetricsHeader)
      while (static_cast<long>(kept.size()) <= rows && std::getline(in, line)) kept.push_back(line);
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << "\n";
  if (!out) throw IoError("cannot write " + path);
}

}  // namespace

std::string checkpoint_path(const ExperimentConfig& cfg, long iteration) {
  return (fs::path(cfg.output_dir) / "checkpoints" / ("iter_" + std::to_string(iteration) + ".ckpt")).string();
}

TrainingResult run_meta_training(const ExperimentConfig& cfg, const Workspace& ws,
                                 const std::optional<std::string>& resume_from) {
  cfg.validate();
  const HyperParams& hp = cfg.hp;
  fs::create_directories(fs::path(cfg.output_dir) / "checkpoints");
  const std::string csv = (fs::path(cfg.output_dir) / "train_metrics.csv").string();
  {
    std::ofstream(fs::path(cfg.output_dir) / "config.txt") << cfg.serialize();
  }

  TrainingResult out;
  Rng rng;
  if (resume_from) {
    auto r = load_checkpoint(*resume_from, cfg);
    if (r.state.iteration > cfg.total_iterations)
      throw ConfigError("checkpoint is past train.total_iterations");
    out.state = std::move(r.state);
    out.dataset = std::move(r.dd);
    out.monitor = r.monitor;
    rng = r.rng;
    truncate_csv(csv, out.state.iteration);
  } else {
    out.state = init_meta_state<float>(meta_spec(cfg), derive_seed(cfg.seed_train, 1));
    out.dataset = init_dynamic_dataset(ws.zoo, hp.shots, hp.queries, meta_spec(cfg).input_shape(),
                                       derive_seed(cfg.seed_train, 2));
    out.monitor = FeedbackMonitor(hp.patience, cfg.feedback_metric);
    rng = derive_rng(cfg.seed_train, 3);
    truncate_csv(csv, 0);
  }
  out.state.curriculum_active = out.state.iteration >= hp.curriculum_start_iter;
  out.metrics_csv = csv;

  std::ofstream log(csv, std::ios::app);
  if (!log) throw IoError("cannot append to " + csv);
  auto& state = out.state;
  auto& dd = out.dataset;
  while (state.iteration < cfg.total_iterations) {
    const auto t0 = std::chrono::steady_clock::now();
    const long it = state.iteration;
    const std::string at = "iteration " + std::to_string(it) + ": ";
    try {
      const int sw = cfg.ablation_curriculum ? gradient_switch(out.monitor.last_omega, state.curriculum_active) : 0;
      const auto eci = eci_dataset_update(dd, ws.zoo, state, hp, cfg.inversion, sw, rng);
      const auto bank = ad::Var<float>::constant(dd.images);
      std::vector<Episode<float>> batch;
      for (int b = 0; b < hp.episode_batch; ++b)
        batch.push_back(sample_pseudo_episode(dd, bank, hp.way, hp.shots, hp.queries, rng, hp.within_model_tasks));
      const auto r = meta_update(state, batch, hp);
      const Omega omega =
          out.monitor.update(cfg.feedback_metric == FeedbackMetric::kAccuracy ? r.batch_train_acc : r.batch_outer_loss);
      const double ms =
          cfg.log_wall_time
              ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()
              : 0.0;
      log << csv_row(it, eci, r, omega, state.curriculum_active, sw, ms) << "\n";
    } catch (const NumericError& e) {
      throw NumericError(at + e.what());
    } catch (const InputError& e) {
      throw InputError(at + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(at + e.what());
    } catch (const InternalError& e) {
      throw InternalError(at + e.what());
    }
    if (state.iteration % cfg.checkpoint_every == 0 || state.iteration == cfg.total_iterations) {
      log.flush();
      save_checkpoint(checkpoint_path(cfg, state.iteration), cfg, state, dd, out.monitor, rng);
    }
  }
  log.flush();
  if (!log) throw IoError("failed writing " + csv);
  save_network((fs::path(cfg.output_dir) / "meta_theta.ckpt").string(), state.theta);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport run_evaluation(const ExperimentConfig& cfg, const Workspace& ws, ThetaSource source,
                          const NetworkParams<float>* purer_theta) {
  NetworkParams<float> theta;
  switch (source) {
    case ThetaSource::kPurer:
      if (!purer_theta) throw InputError("run_evaluation: no meta-trained parameters given");
      theta = *purer_theta;
      break;
    case ThetaSource::kRandom:
      theta = random_init_baseline(meta_spec(cfg), derive_seed(cfg.seed_eval, 7));
      break;
    case ThetaSource::kAverage:
      if (cfg.scenario != Scenario::kSS)
        throw ScenarioError("the Average baseline needs a homogeneous zoo (SS), not " + to_string(cfg.scenario));
      theta = average_models(ws.zoo);
      break;
  }
  EvalOptions o;
  o.way = cfg.hp.way;
  o.shots = cfg.hp.shots;
  o.queries = cfg.eval_queries;
  o.num_tasks = cfg.eval_tasks;
  o.alpha_inner = cfg.hp.alpha_inner;
  o.use_icfil = source == ThetaSource::kPurer && cfg.ablation_icfil;
  o.icfil = cfg.icfil;
  o.icfil.inversion_weights = cfg.inversion;
  o.workers = cfg.eval_workers;
  Rng rng(cfg.seed_eval);
  return evaluate(theta, ws.test_splits(), o, rng);
}

std::string report_json(const EvalReport& report, const ExperimentConfig& cfg, ThetaSource source, bool icfil) {
  nlohmann::ordered_json j;
  j["theta_source"] = to_string(source);
  j["num_tasks"] = report.num_tasks;
  j["N"] = cfg.hp.way;
  j["K"] = cfg.hp.shots;
  j["M"] = cfg.eval_queries;
  j["use_icfil"] = icfil;
  j["mean"] = report.mean;
  j["std"] = report.std;
  j["ci95"] = report.ci95;
  j["config_hash"] = cfg.hash();
  j["icfil"] = {{"pseudo_per_class", cfg.icfil.pseudo_per_class},
                {"inversion_steps", cfg.icfil.inversion_steps},
                {"inversion_beta", cfg.icfil.inversion_beta},
                {"tau", cfg.icfil.tau}};
  j["config"] = cfg.serialize();
  j["per_task_acc"] = report.per_task_acc;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Metrics file and plots

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty metrics file", 1);
  if (trim(line) != kMetricsHeader) throw ParseError("unexpected header '" + trim(line) + "'", 1);
  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(trim(line));
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (cells.size() != 8) throw ParseError("expected 8 columns, got " + std::to_string(cells.size()), lineno);
    try {
      MetricsRow r;
      r.iteration = parse_number<long>("iteration", cells[0]);
      r.inv_loss = parse_number<double>("inv_loss", cells[1]);
      r.batch_outer_loss = parse_number<double>("batch_outer_loss", cells[2]);
      r.batch_train_acc = parse_number<double>("batch_train_acc", cells[3]);
      r.feedback = parse_number<int>("feedback", cells[4]);
      r.curriculum_active = parse_number<int>("curriculum_active", cells[5]);
      r.gradient_switch = parse_number<int>("switch", cells[6]);
      r.wall_ms = parse_number<double>("wall_ms", cells[7]);
      rows.push_back(r);
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return rows;
}

std::vector<double> ema(const std::vector<double>& xs, double factor) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back(out.empty() ? x : factor * out.back() + (1.0 - factor) * x);
  return out;
}

namespace {

struct Rgb {
  std::uint8_t r, g, b;
};

// 3x5 glyphs for axis labels.
const char* glyph(char c) {
  switch (c) {
    case '0': return "111101101101111";
    case '1': return "010110010010111";
    case '2': return "111001111100111";
    case '3': return "111001111001111";
    case '4': return "101101111001001";
    case '5': return "111100111001111";
    case '6': return "111100111101111";
    case '7': return "111001001001001";
    case '8': return "111101111101111";
    case '9': return "111101111001111";
    case '.': return "000000000000010";
    case '-': return "000000111000000";
    case 'e': return "000111111100111";
    default: return "000000000000000";
  }
}

class Canvas {
 public:
  Canvas(int w, int h) : img_{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h * 3), 255)} {}

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
    auto* p = &img_.pixels[static_cast<std::size_t>((y * img_.width + x) * 3)];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  }
  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }
  void rect(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, c);
  }
  void text(int x, int y, const std::string& s, Rgb c) {
    for (char ch : s) {
      const char* g = glyph(ch);
      for (int r = 0; r < 5; ++r)
        for (int k = 0; k < 3; ++k)
          if (g[r * 3 + k] == '1') rect(x + 2 * k, y + 2 * r, x + 2 * k + 1, y + 2 * r + 1, c);
      x += 8;
    }
  }
  const Image8& image() const { return img_; }

 private:
  Image8 img_;
};

constexpr int kW = 640, kH = 360, kLeft = 70, kRight = 20, kTop = 20, kBottom = 40;
constexpr Rgb kAxis{40, 40, 40}, kGrid{225, 225, 225};

std::string short_number(double v) {
  std::ostringstream ss;
  ss << std::setprecision(3) << v;
  return ss.str();
}

struct Panel {
  int x0, y0, x1, y1;  // pixel box
  double lo, hi;
  long first, last;

  int px(long it) const {
    return last == first ? x0 : x0 + static_cast<int>((x1 - x0) * static_cast<double>(it - first) / static_cast<double>(last - first));
  }
  int py(double v) const {
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return y1 - static_cast<int>(std::lround((y1 - y0) * t));
  }
};

Panel frame(Canvas& c, int y0, int y1, const std::vector<const std::vector<double>*>& series, long first, long last) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* s : series)
    for (double v : *s) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!std::isfinite(lo)) lo = hi = 0;
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  Panel p{kLeft, y0, kW - kRight, y1, lo, hi, first, last};
  for (int k = 1; k < 4; ++k) c.line(p.x0, y0 + (y1 - y0) * k / 4, p.x1, y0 + (y1 - y0) * k / 4, kGrid);
  c.line(p.x0, y0, p.x0, y1, kAxis);
  c.line(p.x0, y1, p.x1, y1, kAxis);
  c.text(4, y0, short_number(hi), kAxis);
  c.text(4, y1 - 10, short_number(lo), kAxis);
  return p;
}

void polyline(Canvas& c, const Panel& p, const std::vector<long>& its, const std::vector<double>& ys, Rgb col) {
  for (std::size_t i = 1; i < ys.size(); ++i)
    if (std::isfinite(ys[i - 1]) && std::isfinite(ys[i]))
      c.line(p.px(its[i - 1]), p.py(ys[i - 1]), p.px(its[i]), p.py(ys[i]), col);
  if (ys.size() == 1) c.set(p.px(its[0]), p.py(ys[0]), col);
}

void x_labels(Canvas& c, long first, long last) {
  c.text(kLeft, kH - kBottom + 12, std::to_string(first), kAxis);
  const std::string s = std::to_string(last);
  c.text(kW - kRight - 8 * static_cast<int>(s.size()), kH - kBottom + 12, s, kAxis);
}

}  // namespace

std::vector<std::string> emit_plots(const std::string& metrics_csv, const std::string& out_dir) {
  const auto rows = read_metrics_csv(metrics_csv);
  if (rows.empty()) throw InputError("emit_plots: " + metrics_csv + " has no data rows");
  fs::create_directories(out_dir);
  std::vector<long> its;
  std::vector<double> outer, acc, inv, fb, sw, active;
  for (const auto& r : rows) {
    its.push_back(r.iteration);
    outer.push_back(r.batch_outer_loss);
    acc.push_back(r.batch_train_acc);
    inv.push_back(r.inv_loss);
    fb.push_back(r.feedback);
    sw.push_back(r.gradient_switch);
    active.push_back(r.curriculum_active);
  }
  const long first = its.front(), last = its.back();
  std::vector<std::string> paths;

  {  // outer loss (top) and train accuracy (bottom), raw and EMA-smoothed
    Canvas c(kW, kH);
    const int mid = kTop + (kH - kTop - kBottom) / 2;
    const auto so = ema(outer), sa = ema(acc);
    auto top = frame(c, kTop, mid - 10, {&outer, &so}, first, last);
    polyline(c, top, its, outer, {170, 190, 230});
    polyline(c, top, its, so, {20, 60, 170});
    auto bottom = frame(c, mid + 10, kH - kBottom, {&acc, &sa}, first, last);
    polyline(c, bottom, its, acc, {240, 190, 150});
    polyline(c, bottom, its, sa, {200, 80, 0});
    x_labels(c, first, last);
    paths.push_back((fs::path(out_dir) / "loss_accuracy.png").string());
    write_png(paths.back(), c.image());
  }
  {  // raster: feedback, switch and curriculum-active rows
    Canvas c(kW, kH);
    const std::vector<std::pair<const std::vector<double>*, Rgb>> tracks{
        {&fb, {20, 120, 40}}, {&sw, {200, 30, 30}}, {&active, {90, 90, 90}}};
    const int band = (kH - kTop - kBottom) / 3;
    Panel p{kLeft, kTop, kW - kRight, kH - kBottom, 0, 1, first, last};
    for (std::size_t t = 0; t < tracks.size(); ++t) {
      const int y0 = kTop + static_cast<int>(t) * band + 6, y1 = kTop + static_cast<int>(t + 1) * band - 6;
      c.rect(p.x0, y0, p.x1, y1, {245, 245, 245});
      for (std::size_t i = 0; i < its.size(); ++i)
        if ((*tracks[t].first)[i] > 0.5) {
          const int xa = p.px(its[i]);
          const int xb = i + 1 < its.size() ? std::max(xa, p.px(its[i + 1]) - 1) : xa;
          c.rect(xa, y0, xb, y1, tracks[t].second);
        }
      c.text(8, (y0 + y1) / 2 - 5, std::to_string(t), kAxis);
    }
    x_labels(c, first, last);
    paths.push_back((fs::path(out_dir) / "feedback_switch.png").string());
    write_png(paths.back(), c.image());
  }
  {  // inversion loss, raw and smoothed
    Canvas c(kW, kH);
    const auto si = ema(inv);
    auto p = frame(c, kTop, kH - kBottom, {&inv, &si}, first, last);
    polyline(c, p, its, inv, {200, 200, 200});
    polyline(c, p, its, si, {110, 30, 140});
    x_labels(c, first, last);
    paths.push_back((fs::path(out_dir) / "inversion_loss.png").string());
    write_png(paths.back(), c.image());
  }
  return paths;
}

// ---------------------------------------------------------------------------
// Pseudo image grids

std::vector<std::string> dump_checkpoint_images(const std::string& checkpoint, const std::string& out_dir) {
  const Archive a = load_archive(checkpoint);
  const long idx = a.arrays.index_of("bank/images");
  if (idx < 0) throw IoError(checkpoint + " holds no dynamic dataset");
  DynamicDataset<float> dd;
  dd.images = a.arrays.values[static_cast<std::size_t>(idx)];
  if (dd.images.rank() != 5) throw IoError(checkpoint + ": dynamic dataset has shape " + shape_str(dd.images.shape));
  dump_images(dd, out_dir);
  std::vector<std::string> paths;
  for (int g = 0; g < dd.num_classes(); ++g)
    paths.push_back((fs::path(out_dir) / ("class_" + std::to_string(g) + ".png")).string());
  return paths;
}

// ---------------------------------------------------------------------------
// Ablation grid

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  fs::create_directories(cfg.output_dir);
  const std::string path = (fs::path(cfg.output_dir) / "ablation.csv").string();
  std::ofstream csv(path, std::ios::trunc);
  csv << "seed,variant,mean,std,ci95,num_tasks\n";
  auto record = [&](const std::string& variant, std::uint64_t seed, EvalReport report) {
    csv << seed << "," << variant << "," << fmt(report.mean) << "," << fmt(report.std) << "," << fmt(report.ci95)
        << "," << report.num_tasks << "\n";
    csv.flush();
    rows.push_back({variant, seed, std::move(report)});
  };
  for (const auto seed : seeds) {
    ExperimentConfig base = cfg;
    base.seed_zoo = base.seed_train = base.seed_eval = seed;
    base.output_dir = (fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed))).string();
    if (!cfg.zoo_dir.empty()) base.zoo_dir = (fs::path(cfg.zoo_dir) / ("seed_" + std::to_string(seed))).string();
    const Workspace ws = prepare_workspace(base);

    ExperimentConfig ei = base, eci = base;
    ei.ablation_curriculum = false;
    eci.ablation_curriculum = true;
    ei.output_dir = (fs::path(base.output_dir) / "EI").string();
    eci.output_dir = (fs::path(base.output_dir) / "ECI").string();
    const auto ei_theta = run_meta_training(ei, ws).state.theta;
    const auto eci_theta = run_meta_training(eci, ws).state.theta;

    auto eval = [&](ExperimentConfig c, const NetworkParams<float>& theta, bool icfil) {
      c.ablation_icfil = icfil;
      return run_evaluation(c, ws, ThetaSource::kPurer, &theta);
    };
    record("EI", seed, eval(ei, ei_theta, false));
    record("+Curriculum", seed, eval(eci, eci_theta, false));
    record("+ICFIL", seed, eval(ei, ei_theta, true));
    record("Ours", seed, eval(eci, eci_theta, true));
    record("Random", seed, run_evaluation(base, ws, ThetaSource::kRandom));
  }
  if (!csv) throw IoError("failed writing " + path);
  return rows;
}

}  // namespace purer
