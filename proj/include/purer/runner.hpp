#pragma once

// Experiment orchestration: configuration, the data-free meta-training loop
// with checkpoints, evaluation against baselines, plots and the ablation grid.

#include "purer/curriculum.hpp"
#include "purer/icfil.hpp"
#include "purer/zoo.hpp"

#include <optional>
#include <string>
#include <vector>

namespace purer {

enum class ThetaSource { kPurer, kRandom, kAverage };
std::string to_string(ThetaSource s);
ThetaSource parse_theta_source(const std::string& name);

struct ExperimentConfig {
  Scenario scenario = Scenario::kSS;

  // Data: PNG trees under `dataset_paths` (optional split files alongside),
  // or synthetic gratings when no path is given.
  std::vector<std::string> dataset_paths;
  std::vector<std::string> split_files;
  int image_channels = 3;
  int image_size = 16;
  int synthetic_datasets = 1;  // MH needs at least 2
  int synthetic_classes = 12;
  int synthetic_per_class = 30;
  int train_classes = 8;  // used when no split file is given
  int test_classes = 4;

  int zoo_size = 4;
  std::string zoo_dir;  // load from here when it holds a zoo, else build (and save)
  PretrainConfig pretrain;

  HyperParams hp;  // way N, shots K and queries M live here
  InversionWeights inversion;
  IcfilConfig icfil;
  FeedbackMetric feedback_metric = FeedbackMetric::kAccuracy;

  long total_iterations = 1500;
  long checkpoint_every = 500;
  int eval_tasks = 600;
  int eval_queries = 15;
  int eval_workers = 1;

  bool ablation_curriculum = true;
  bool ablation_icfil = true;

  std::uint64_t seed_zoo = 1;
  std::uint64_t seed_dataset = 7;
  std::uint64_t seed_train = 1;
  std::uint64_t seed_eval = 1;

  std::string output_dir = "runs/default";
  bool log_wall_time = true;  // false writes 0 so metrics files compare bitwise

  /// ConfigError on any inconsistency, including missing paths.
  void validate() const;
  /// `key = value` lines, one per field, in a fixed order.
  std::string serialize() const;
  /// ParseError (with line number) on malformed lines, unknown keys or bad values.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  /// Applies one `key = value` override.
  void set(const std::string& key, const std::string& value);
  /// Every key serialize() writes, in order.
  static std::vector<std::string> keys();
  /// Hex FNV-1a of serialize().
  std::string hash() const;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Datasets, their splits and the zoo an experiment runs on.
struct Workspace {
  std::vector<LabeledDataset> datasets;
  std::vector<SplitSpec> splits;
  ModelZoo<float> zoo;

  std::vector<EvalSplit> test_splits() const;
};

/// Loads or synthesizes the data and loads or builds the zoo.
Workspace prepare_workspace(const ExperimentConfig& cfg);

/// Meta model architecture: conv4, N-way, input shape of the data.
ArchSpec meta_spec(const ExperimentConfig& cfg);

struct TrainingResult {
  MetaState<float> state;
  DynamicDataset<float> dataset;
  FeedbackMonitor monitor;
  std::string metrics_csv;
};

inline const char* kMetricsHeader =
    "iteration,inv_loss,batch_outer_loss,batch_train_acc,feedback,curriculum_active,switch,wall_ms";

/// The ECI loop to cfg.total_iterations: eci_dataset_update, a fresh episode
/// batch, meta_update, feedback. Writes <output_dir>/train_metrics.csv and a
/// checkpoint every cfg.checkpoint_every iterations (and at the end). With
/// `resume_from` the run continues from that checkpoint, truncating the CSV to it.
TrainingResult run_meta_training(const ExperimentConfig& cfg, const Workspace& ws,
                                 const std::optional<std::string>& resume_from = std::nullopt);

/// Checkpoint path for an iteration count.
std::string checkpoint_path(const ExperimentConfig& cfg, long iteration);

/// `purer_theta` is required for kPurer. ICFIL runs only for kPurer with
/// cfg.ablation_icfil. Tasks depend on seed_eval alone, so sources are paired.
EvalReport run_evaluation(const ExperimentConfig& cfg, const Workspace& ws, ThetaSource source,
                          const NetworkParams<float>* purer_theta = nullptr);

/// eval_report.json text.
std::string report_json(const EvalReport& report, const ExperimentConfig& cfg, ThetaSource source, bool icfil);

struct MetricsRow {
  long iteration = 0;
  double inv_loss = 0, batch_outer_loss = 0, batch_train_acc = 0;
  int feedback = 0, curriculum_active = 0, gradient_switch = 0;
  double wall_ms = 0;
};

/// ParseError naming the line on malformed input.
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

/// s_0 = x_0, s_t = factor s_{t-1} + (1 - factor) x_t.
std::vector<double> ema(const std::vector<double>& xs, double factor = 0.9);

/// Writes loss_accuracy.png, feedback_switch.png and inversion_loss.png;
/// returns their paths.
std::vector<std::string> emit_plots(const std::string& metrics_csv, const std::string& out_dir);

/// dump_images on a training checkpoint's dynamic dataset; returns the paths.
std::vector<std::string> dump_checkpoint_images(const std::string& checkpoint, const std::string& out_dir);

struct AblationRow {
  std::string variant;  // EI, +Curriculum, +ICFIL, Ours, Random
  std::uint64_t seed = 0;
  EvalReport report;
};

/// {EI, ECI} x {-ICFIL, +ICFIL} plus the Random baseline for every seed, each
/// seed overriding the zoo, train and eval seeds. Results go to
/// <output_dir>/ablation.csv.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds);

}  // namespace purer
