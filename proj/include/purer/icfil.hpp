#pragma once

// Meta-testing: fast adaptation, contrastive backbone calibration against
// images inverted from the adapted model, head retraining and evaluation.

#include "purer/episodic.hpp"

#include <utility>
#include <vector>

namespace purer {

/// An adapted model split into backbone and linear head.
template <typename Scalar>
struct AdaptedModel {
  ArchSpec spec;
  NamedTensors<Scalar> backbone;  // every non-head parameter, network order
  NamedTensors<Scalar> buffers;   // BN running statistics carried over from theta
  Tensor<Scalar> head_weight;     // [feature_dim, N]
  Tensor<Scalar> head_bias;       // [N]

  /// Backbone and head reassembled in network parameter order.
  NetworkParams<Scalar> network() const;
  bool operator==(const AdaptedModel&) const = default;
};

/// Splits a network whose head parameters come last.
template <typename Scalar>
AdaptedModel<Scalar> split_network(const NetworkParams<Scalar>& net);

struct IcfilConfig {
  bool calibrate = true;  // false: skip the backbone step, still retrain the head
  int pseudo_per_class = 5;
  int inversion_steps = 200;
  double inversion_beta = 0.25;
  InversionWeights inversion_weights;
  double tau = 0.1;
  bool normalize_embeddings = true;
  double backbone_lr = 1e-5;
  int head_iterations = 100;
  double head_lr = 0.01;
  double head_init_std = 0.01;

  /// ConfigError on non-positive sizes or rates.
  void validate() const;
  bool operator==(const IcfilConfig&) const = default;
};

/// inner_adapt of every parameter on the support set (first order, nothing
/// downstream needs the tape), then split.
template <typename Scalar>
AdaptedModel<Scalar> fast_adapt_test(const NetworkParams<Scalar>& theta, const Tensor<Scalar>& support_images,
                                     const std::vector<int>& support_labels, double alpha_inner);

/// -sum over real rows r and same-label pseudo rows p of
/// log softmax_p(<e_r, e_p> / tau), the softmax running over all pseudo rows.
/// Rows are l2-normalized first when `normalize`. InputError when a real label
/// has no pseudo positive or tau <= 0.
template <typename Scalar>
ad::Var<Scalar> contrastive_loss(const ad::Var<Scalar>& real_embedding, const std::vector<int>& real_labels,
                                 const ad::Var<Scalar>& pseudo_embedding, const std::vector<int>& pseudo_labels,
                                 double tau, bool normalize);

/// contrastive_loss on backbone embeddings; real and pseudo images are
/// forwarded as separate batches with batch-statistics BN. `params` is aligned
/// with net.params; head entries do not influence the result.
template <typename Scalar>
ad::Var<Scalar> calibration_loss(const NetworkParams<Scalar>& net, const std::vector<ad::Var<Scalar>>& params,
                                 const ad::Var<Scalar>& real_images, const std::vector<int>& real_labels,
                                 const ad::Var<Scalar>& pseudo_images, const std::vector<int>& pseudo_labels,
                                 double tau, bool normalize);

/// Pseudo support inverted from `adapted`, one Adam step on the backbone for
/// the calibration loss, then a fresh head trained on frozen support
/// embeddings. Only support data is ever read.
template <typename Scalar>
AdaptedModel<Scalar> icfil_calibrate(const AdaptedModel<Scalar>& adapted, const Tensor<Scalar>& support_images,
                                     const std::vector<int>& support_labels, const IcfilConfig& cfg,
                                     std::uint64_t seed);

/// Head logits argmax (lowest class on ties), batch-statistics BN, order kept.
template <typename Scalar>
std::vector<int> predict(const AdaptedModel<Scalar>& model, const Tensor<Scalar>& query_images);

struct EvalReport {
  std::vector<double> per_task_acc;
  double mean = 0.0;
  double std = 0.0;   // sample standard deviation, 0 for a single task
  double ci95 = 0.0;  // 1.96 std / sqrt(n)
  int num_tasks = 0;

  /// InputError on an empty list.
  static EvalReport from_accuracies(std::vector<double> accuracies);
};

/// A dataset and the classes tasks may be drawn from.
using EvalSplit = std::pair<const LabeledDataset*, std::vector<int>>;

struct EvalOptions {
  int way = 2;
  int shots = 1;
  int queries = 15;
  int num_tasks = 600;
  double alpha_inner = 0.01;
  bool use_icfil = false;
  IcfilConfig icfil;
  int workers = 1;  // tasks fanned out over this many threads
};

/// Task t uses split t mod (number of splits) and an RNG seeded from
/// (base, t), base being one draw from `rng`; identical `rng` states thus give
/// identical tasks whatever the method or worker count.
template <typename Scalar>
EvalReport evaluate(const NetworkParams<Scalar>& theta, const std::vector<EvalSplit>& splits,
                    const EvalOptions& opts, Rng& rng);

}  // namespace purer
