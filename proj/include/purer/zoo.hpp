#pragma once

// Frozen pre-trained classifiers and the two data-free baselines built from them.

#include "purer/data.hpp"
#include "purer/nets.hpp"

#include <string>
#include <vector>

namespace purer {

enum class Scenario { kSS, kSH, kMH };

std::string to_string(Scenario s);
/// "SS" / "SH" / "MH"; ConfigError otherwise.
Scenario parse_scenario(const std::string& name);

template <typename Scalar>
struct ModelZooEntry {
  NetworkParams<Scalar> params;
  std::vector<int> global_class_ids;  // local logit index -> global pseudo-class id
  std::vector<int> source_classes;    // real class ids the model was trained on
  std::string source_dataset_id;
  double train_accuracy = 0.0;

  const ArchSpec& spec() const { return params.spec; }

  template <typename Other>
  ModelZooEntry<Other> cast() const {
    return {params.template cast<Other>(), global_class_ids, source_classes, source_dataset_id, train_accuracy};
  }
  bool operator==(const ModelZooEntry&) const = default;
};

struct GlobalClass {
  int entry = 0;
  int local = 0;
  bool operator==(const GlobalClass&) const = default;
};

template <typename Scalar>
struct ModelZoo {
  std::vector<ModelZooEntry<Scalar>> entries;
  std::vector<GlobalClass> global_classes;  // indexed by global id

  int num_global_classes() const { return static_cast<int>(global_classes.size()); }
  /// Throws InternalError unless every global id is owned by exactly one (entry, local) slot.
  void validate() const;

  template <typename Other>
  ModelZoo<Other> cast() const {
    ModelZoo<Other> out;
    for (const auto& e : entries) out.entries.push_back(e.template cast<Other>());
    out.global_classes = global_classes;
    return out;
  }
  bool operator==(const ModelZoo&) const = default;
};

/// Supervised pre-training recipe for zoo entries.
struct PretrainConfig {
  int epochs = 30;
  double lr = 1e-3;
  int batch_size = 32;
  double min_accuracy = 0.95;
  double resnet_width_multiplier = 0.5;

  bool operator==(const PretrainConfig&) const = default;
};

struct TrainedClassifier {
  NetworkParams<float> net;
  double accuracy = 0.0;  // on the training images, running-statistics BN
};

/// Adam on cross-entropy with batch-statistics BN; running buffers track the batches.
TrainedClassifier train_classifier(const ArchSpec& spec, const Tensor<float>& images, const std::vector<int>& labels,
                                   const PretrainConfig& cfg, std::uint64_t seed);

/// Fraction of `images` whose argmax logit (running-statistics BN) equals the label.
template <typename Scalar>
double classification_accuracy(const NetworkParams<Scalar>& net, const Tensor<Scalar>& images,
                               const std::vector<int>& labels);

/// Pre-trains `num_models` N-way classifiers on classes from the train splits.
/// `splits[i]` belongs to `datasets[i]`. Throws TrainingFailure when a model
/// ends below cfg.min_accuracy.
ModelZoo<float> build_zoo(const std::vector<const LabeledDataset*>& datasets, const std::vector<SplitSpec>& splits,
                          int num_models, int way, Scenario scenario, const PretrainConfig& cfg, Rng& rng);

/// A freshly initialized network.
NetworkParams<float> random_init_baseline(const ArchSpec& spec, std::uint64_t seed);

/// Element-wise mean of all parameters and buffers; ScenarioError unless all
/// entries share one architecture.
template <typename Scalar>
NetworkParams<Scalar> average_models(const ModelZoo<Scalar>& zoo);

/// Writes `<dir>/zoo.txt` plus one checkpoint per entry.
void save_zoo(const std::string& dir, const ModelZoo<float>& zoo);
ModelZoo<float> load_zoo(const std::string& dir);

}  // namespace purer
