#include "purer/zoo.hpp"

#include "purer/archive.hpp"
#include "purer/errors.hpp"
#include "purer/functional.hpp"
#include "purer/optim.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace purer {

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::kSS: return "SS";
    case Scenario::kSH: return "SH";
    case Scenario::kMH: return "MH";
  }
  return "?";
}

Scenario parse_scenario(const std::string& name) {
  if (name == "SS") return Scenario::kSS;
  if (name == "SH") return Scenario::kSH;
  if (name == "MH") return Scenario::kMH;
  throw ConfigError("unknown scenario '" + name + "' (expected SS, SH or MH)");
}

template <typename Scalar>
void ModelZoo<Scalar>::validate() const {
  for (std::size_t e = 0; e < entries.size(); ++e) {
    const auto& ids = entries[e].global_class_ids;
    if (static_cast<int>(ids.size()) != entries[e].spec().num_classes)
      throw InternalError("zoo entry " + std::to_string(e) + ": class table does not match its head");
    if (std::set<int>(ids.begin(), ids.end()).size() != ids.size())
      throw InternalError("zoo entry " + std::to_string(e) + ": duplicate global class ids");
  }
  std::size_t total = 0;
  for (const auto& e : entries) total += e.global_class_ids.size();
  if (total != global_classes.size()) throw InternalError("zoo: global class count does not match the entries");
  for (std::size_t g = 0; g < global_classes.size(); ++g) {
    const auto [entry, local] = global_classes[g];
    if (entry < 0 || entry >= static_cast<int>(entries.size()) || local < 0 ||
        local >= static_cast<int>(entries[static_cast<std::size_t>(entry)].global_class_ids.size()) ||
        entries[static_cast<std::size_t>(entry)].global_class_ids[static_cast<std::size_t>(local)] != static_cast<int>(g))
      throw InternalError("zoo: global class " + std::to_string(g) + " is not owned consistently");
  }
}

template <typename Scalar>
double classification_accuracy(const NetworkParams<Scalar>& net, const Tensor<Scalar>& images,
                               const std::vector<int>& labels) {
  if (images.shape.empty() || images.shape[0] != static_cast<Index>(labels.size()))
    throw InputError("classification_accuracy: label count does not match images");
  if (labels.empty()) return 0.0;
  ad::NoGradGuard no_grad;
  const auto logits = forward(net, images, BnMode::kRunningStats).logits.value();
  const Index n = logits.shape[1];
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Index best = 0;
    for (Index j = 1; j < n; ++j)
      if (logits.data[static_cast<Index>(i) * n + j] > logits.data[static_cast<Index>(i) * n + best]) best = j;
    correct += best == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

TrainedClassifier train_classifier(const ArchSpec& spec, const Tensor<float>& images, const std::vector<int>& labels,
                                   const PretrainConfig& cfg, std::uint64_t seed) {
  if (images.shape.size() != 4 || images.shape[0] != static_cast<Index>(labels.size()))
    throw InputError("train_classifier: images and labels disagree");
  if (labels.size() < 2) throw InputError("train_classifier: need at least 2 images");
  if (cfg.epochs < 1 || cfg.batch_size < 2 || !(cfg.lr > 0)) throw ConfigError("invalid pre-training configuration");

  TrainedClassifier out{build_network<float>(spec, seed), 0.0};
  NetworkParams<float>& net = out.net;
  std::vector<const Tensor<float>*> ptrs;
  for (const auto& t : net.params.values) ptrs.push_back(&t);
  auto adam = AdamState<float>::zeros_like(ptrs);
  const AdamConfig adam_cfg{cfg.lr};
  Rng shuffle_rng(seed ^ 0x5bd1e995ULL);

  const Index per = numel({images.shape[1], images.shape[2], images.shape[3]});
  std::vector<Index> order(labels.size());
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (end - start < 2) continue;  // batch statistics need two images
      Tensor<float> batch({static_cast<Index>(end - start), images.shape[1], images.shape[2], images.shape[3]});
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        batch.data.segment(static_cast<Index>(i - start) * per, per) = images.data.segment(order[i] * per, per);
        batch_labels.push_back(labels[static_cast<std::size_t>(order[i])]);
      }
      auto params = param_vars(net, true);
      auto trace = forward(net, params, ad::Var<float>::constant(batch), BnMode::kBatchStats);
      auto loss = ad::cross_entropy(trace.logits, batch_labels);
      if (!std::isfinite(loss.item())) throw NumericError("non-finite loss while pre-training a zoo model");
      auto grads = ad::grad(loss, params);
      std::vector<Tensor<float>> g;
      for (const auto& v : grads) g.push_back(v.value());
      std::vector<Tensor<float>*> mut;
      for (auto& t : net.params.values) mut.push_back(&t);
      adam_step(mut, g, adam, adam_cfg);
      std::vector<Tensor<float>> means, vars;
      for (const auto& m : trace.bn_means) means.push_back(m.value());
      for (const auto& v : trace.bn_variances) vars.push_back(v.value());
      update_running_stats(net, means, vars);
    }
  }
  out.accuracy = classification_accuracy(net, images, labels);
  return out;
}

ModelZoo<float> build_zoo(const std::vector<const LabeledDataset*>& datasets, const std::vector<SplitSpec>& splits,
                          int num_models, int way, Scenario scenario, const PretrainConfig& cfg, Rng& rng) {
  if (datasets.empty() || datasets.size() != splits.size()) throw ConfigError("build_zoo: need one split per dataset");
  if (scenario != Scenario::kMH && datasets.size() != 1)
    throw ConfigError("build_zoo: " + to_string(scenario) + " uses exactly one dataset");
  if (num_models < 1) throw ConfigError("build_zoo: num_models must be >= 1");
  if (way < 2) throw ConfigError("build_zoo: way must be >= 2");
  const Shape shape = datasets[0]->item_shape();
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    if (datasets[i]->item_shape() != shape) throw ConfigError("build_zoo: datasets have different image shapes");
    splits[i].validate(*datasets[i]);
    if (static_cast<int>(splits[i].train_classes.size()) < way)
      throw ConfigError("build_zoo: dataset " + datasets[i]->dataset_id + " has fewer than " + std::to_string(way) +
                        " training classes");
  }

  ModelZoo<float> zoo;
  std::uniform_int_distribution<std::size_t> pick_dataset(0, datasets.size() - 1);
  std::bernoulli_distribution pick_resnet(0.5);
  for (int m = 0; m < num_models; ++m) {
    const std::size_t d = scenario == Scenario::kMH ? pick_dataset(rng) : 0;
    const LabeledDataset& ds = *datasets[d];
    ArchSpec spec;
    spec.channels = shape[0];
    spec.height = shape[1];
    spec.width = shape[2];
    spec.num_classes = way;
    if (scenario != Scenario::kSS && pick_resnet(rng)) {
      spec.arch = ArchId::kResNet8;
      spec.width_multiplier = cfg.resnet_width_multiplier;
    }
    const std::vector<int> classes = sample_without_replacement(splits[d].train_classes, way, rng);
    const std::uint64_t seed = rng();

    std::vector<Index> items;
    std::vector<int> labels;
    for (int local = 0; local < way; ++local)
      for (Index item : ds.class_index.at(classes[static_cast<std::size_t>(local)])) {
        items.push_back(item);
        labels.push_back(local);
      }
    TrainedClassifier trained = train_classifier(spec, ds.gather_items<float>(items), labels, cfg, seed);
    if (trained.accuracy < cfg.min_accuracy) {
      std::ostringstream msg;
      msg << "zoo model " << m << " (" << to_string(spec.arch) << ") reached training accuracy " << trained.accuracy
          << " < " << cfg.min_accuracy << " after " << cfg.epochs << " epochs";
      throw TrainingFailure(msg.str(), trained.accuracy);
    }

    ModelZooEntry<float> entry;
    entry.params = std::move(trained.net);
    entry.source_classes = classes;
    entry.source_dataset_id = ds.dataset_id;
    entry.train_accuracy = trained.accuracy;
    for (int local = 0; local < way; ++local) {
      entry.global_class_ids.push_back(zoo.num_global_classes());
      zoo.global_classes.push_back({m, local});
    }
    zoo.entries.push_back(std::move(entry));
  }
  zoo.validate();
  return zoo;
}

NetworkParams<float> random_init_baseline(const ArchSpec& spec, std::uint64_t seed) {
  return build_network<float>(spec, seed);
}

template <typename Scalar>
NetworkParams<Scalar> average_models(const ModelZoo<Scalar>& zoo) {
  if (zoo.entries.empty()) throw InputError("average_models: empty zoo");
  const ArchSpec& spec = zoo.entries.front().spec();
  for (const auto& e : zoo.entries)
    if (!(e.spec() == spec))
      throw ScenarioError("average_models requires every zoo model to share one architecture and class count");
  NetworkParams<Scalar> avg = zoo.entries.front().params;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(zoo.entries.size());
  for (auto* group : {&avg.params, &avg.buffers}) {
    const bool is_params = group == &avg.params;
    for (std::size_t i = 0; i < group->size(); ++i) {
      auto& acc = group->values[i].data;
      acc.setZero();
      for (const auto& e : zoo.entries) acc += (is_params ? e.params.params : e.params.buffers).values[i].data;
      acc *= inv;
    }
  }
  return avg;
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> parse_ints(const std::string& s, int line) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    int v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) throw ParseError("bad integer '" + tok + "'", line);
    out.push_back(v);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

constexpr const char* kZooMagic = "purer-zoo-v1";

}  // namespace

void save_zoo(const std::string& dir, const ModelZoo<float>& zoo) {
  zoo.validate();
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / "zoo.txt");
  if (!out) throw IoError("cannot write zoo manifest in " + dir);
  out << kZooMagic << '\n';
  for (std::size_t i = 0; i < zoo.entries.size(); ++i) {
    const auto& e = zoo.entries[i];
    if (e.source_dataset_id.find_first_of(" \t\n") != std::string::npos)
      throw InputError("dataset id '" + e.source_dataset_id + "' contains whitespace");
    const std::string file = "entry" + std::to_string(i) + ".ckpt";
    save_network((fs::path(dir) / file).string(), e.params);
    out << "entry file=" << file << " arch=" << to_string(e.spec().arch) << " dataset=" << e.source_dataset_id
        << " train_acc=" << format_double(e.train_accuracy) << " classes=" << join_ints(e.source_classes)
        << " globals=" << join_ints(e.global_class_ids) << '\n';
  }
  if (!out) throw IoError("failed writing zoo manifest in " + dir);
}

ModelZoo<float> load_zoo(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "zoo.txt");
  if (!in) throw IoError("no zoo manifest in " + dir);
  std::string line;
  if (!std::getline(in, line) || line != kZooMagic) throw ParseError("not a zoo manifest", 1);
  ModelZoo<float> zoo;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word != "entry") throw ParseError("expected 'entry'", lineno);
    std::map<std::string, std::string> kv;
    while (ss >> word) {
      const auto eq = word.find('=');
      if (eq == std::string::npos) throw ParseError("expected key=value, got '" + word + "'", lineno);
      kv[word.substr(0, eq)] = word.substr(eq + 1);
    }
    for (const char* key : {"file", "arch", "dataset", "train_acc", "classes", "globals"})
      if (!kv.count(key)) throw ParseError(std::string("missing '") + key + "'", lineno);

    ModelZooEntry<float> e;
    e.params = load_network((fs::path(dir) / kv["file"]).string());
    if (to_string(e.params.spec.arch) != kv["arch"]) throw ParseError("arch disagrees with " + kv["file"], lineno);
    e.source_dataset_id = kv["dataset"];
    const std::string& acc = kv["train_acc"];
    auto res = std::from_chars(acc.data(), acc.data() + acc.size(), e.train_accuracy);
    if (res.ec != std::errc()) throw ParseError("bad train_acc", lineno);
    e.source_classes = parse_ints(kv["classes"], lineno);
    e.global_class_ids = parse_ints(kv["globals"], lineno);
    zoo.entries.push_back(std::move(e));
  }
  int total = 0;
  for (const auto& e : zoo.entries) total += static_cast<int>(e.global_class_ids.size());
  zoo.global_classes.assign(static_cast<std::size_t>(total), GlobalClass{-1, -1});
  for (std::size_t i = 0; i < zoo.entries.size(); ++i) {
    const auto& ids = zoo.entries[i].global_class_ids;
    for (std::size_t local = 0; local < ids.size(); ++local) {
      if (ids[local] < 0 || ids[local] >= total) throw IoError("zoo manifest: global id out of range");
      zoo.global_classes[static_cast<std::size_t>(ids[local])] = {static_cast<int>(i), static_cast<int>(local)};
    }
  }
  zoo.validate();
  return zoo;
}

template struct ModelZoo<float>;
template struct ModelZoo<double>;
template double classification_accuracy<float>(const NetworkParams<float>&, const Tensor<float>&, const std::vector<int>&);
template double classification_accuracy<double>(const NetworkParams<double>&, const Tensor<double>&,
                                                const std::vector<int>&);
template NetworkParams<float> average_models<float>(const ModelZoo<float>&);
template NetworkParams<double> average_models<double>(const ModelZoo<double>&);

}  // namespace purer
