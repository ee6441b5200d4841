#pragma once

// MAML-style episode training on pseudo tasks drawn from the dynamic dataset.

#include "purer/data.hpp"
#include "purer/inversion.hpp"
#include "purer/optim.hpp"

#include <vector>

namespace purer {

struct HyperParams {
  double alpha_inner = 0.01;
  double alpha_outer = 0.001;
  double beta = 0.25;
  double lambda = 10.0;
  int episode_batch = 4;
  int way = 5;
  int shots = 1;
  int queries = 15;
  long curriculum_start_iter = 4000;
  int patience = 6;
  bool second_order = true;
  bool within_model_tasks = false;

  /// ConfigError on non-positive step sizes, sizes or patience.
  void validate() const;
  bool operator==(const HyperParams&) const = default;
};

template <typename Scalar>
struct MetaState {
  NetworkParams<Scalar> theta;
  AdamState<Scalar> optimizer_state;
  long iteration = 0;
  bool curriculum_active = false;

  bool operator==(const MetaState&) const = default;
};

/// Freshly initialized meta model with zeroed optimizer state.
template <typename Scalar>
MetaState<Scalar> init_meta_state(const ArchSpec& spec, std::uint64_t seed);

/// N global classes drawn from the whole label set (or from one zoo model's
/// classes when hp.within_model_tasks), each split K support / M query at
/// random. `images` is a tape handle on dd.images; the episode's images are
/// differentiable views of it.
template <typename Scalar>
Episode<Scalar> sample_pseudo_episode(const DynamicDataset<Scalar>& dd, const ad::Var<Scalar>& images, int way,
                                      int shots, int queries, Rng& rng, bool within_model_tasks = false);

/// Same items as `episode`, gathered from another handle on the bank.
template <typename Scalar>
Episode<Scalar> rebind_pseudo_episode(const Episode<Scalar>& episode, const ad::Var<Scalar>& images);

/// One gradient step on the support cross-entropy, all parameters adapted,
/// batch-statistics BN. With second_order the step stays on the tape.
template <typename Scalar>
std::vector<ad::Var<Scalar>> inner_adapt(const NetworkParams<Scalar>& net, const std::vector<ad::Var<Scalar>>& params,
                                         const ad::Var<Scalar>& support_images, const std::vector<int>& support_labels,
                                         double alpha_inner, bool second_order);

template <typename Scalar>
struct OuterResult {
  ad::Var<Scalar> loss;  // query cross-entropy of the adapted model
  double accuracy = 0.0;
  std::vector<Tensor<Scalar>> query_bn_means;
  std::vector<Tensor<Scalar>> query_bn_variances;
};

template <typename Scalar>
OuterResult<Scalar> outer_loss(const NetworkParams<Scalar>& net, const std::vector<ad::Var<Scalar>>& params,
                               const Episode<Scalar>& episode, double alpha_inner, bool second_order);

struct MetaUpdateResult {
  double batch_outer_loss = 0.0;  // summed over the batch
  double batch_train_acc = 0.0;   // mean query accuracy
};

/// One Adam step (alpha_outer) on the summed outer loss; BN buffers follow the
/// mean query statistics once per batch. NumericError names the iteration.
template <typename Scalar>
MetaUpdateResult meta_update(MetaState<Scalar>& state, const std::vector<Episode<Scalar>>& episodes,
                             const HyperParams& hp);

/// Row-wise argmax, lowest index on ties.
template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& logits);

}  // namespace purer
