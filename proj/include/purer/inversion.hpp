#pragma once

// Model inversion: the learnable pseudo-image bank, its loss and its optimizer.

#include "purer/autodiff.hpp"
#include "purer/optim.hpp"
#include "purer/zoo.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace purer {

struct InversionWeights {
  double alpha_tv = 1e-4;
  double alpha_l2 = 1e-5;
  double feature_weight = 1.0;

  /// ConfigError on negative weights.
  void validate() const;
  bool operator==(const InversionWeights&) const = default;
};

/// K+M learnable images per global pseudo-class.
template <typename Scalar>
struct DynamicDataset {
  Tensor<Scalar> images;             // [G, K+M, C, H, W]
  std::vector<int> class_owner;      // global id -> zoo entry
  std::vector<int> assigned_labels;  // global id -> local logit index of the owner
  AdamState<Scalar> optimizer_state;

  int num_classes() const { return static_cast<int>(images.shape[0]); }
  int instances_per_class() const { return static_cast<int>(images.shape[1]); }
  Shape item_shape() const { return {images.shape[2], images.shape[3], images.shape[4]}; }
  /// All instances as a [G*(K+M), C, H, W] batch; instance i of class g sits at g*(K+M)+i.
  static ad::Var<Scalar> flat(const ad::Var<Scalar>& images);

  bool operator==(const DynamicDataset&) const = default;
};

/// Pixels i.i.d. N(0, 1), deterministic in seed; optimizer state zeroed.
template <typename Scalar>
DynamicDataset<Scalar> init_dynamic_dataset(const ModelZoo<Scalar>& zoo, int shots, int queries, const Shape& shape,
                                            std::uint64_t seed);

/// Anisotropic squared total variation of [B, C, H, W], divided by B.
template <typename Scalar>
ad::Var<Scalar> tv_prior(const ad::Var<Scalar>& images);

/// Mean over the batch of each image's squared l2 norm.
template <typename Scalar>
ad::Var<Scalar> l2_prior(const ad::Var<Scalar>& images);

/// Sum over BN layers of squared l2 distances between batch and running mean
/// and between batch and running variance. 0 for networks without BN.
template <typename Scalar>
ad::Var<Scalar> bn_feature_loss(const NetworkParams<Scalar>& net, const ForwardTrace<Scalar>& trace);

/// Inversion objective for images owned by a single model: summed
/// cross-entropy against `labels` plus the weighted priors and feature term.
template <typename Scalar>
ad::Var<Scalar> model_inversion_loss(const NetworkParams<Scalar>& net, const ad::Var<Scalar>& images,
                                     const std::vector<int>& labels, const InversionWeights& weights);

/// Inversion objective over the bank (or the global classes in `class_subset`),
/// grouped by owning model. `images` is a tape handle on dd.images.
template <typename Scalar>
ad::Var<Scalar> inversion_loss(const ModelZoo<Scalar>& zoo, const DynamicDataset<Scalar>& dd,
                               const ad::Var<Scalar>& images, const InversionWeights& weights,
                               const std::vector<int>* class_subset = nullptr);

/// One Adam step (step size beta) on the bank. NumericError on non-finite gradients.
template <typename Scalar>
void dataset_step(DynamicDataset<Scalar>& dd, const Tensor<Scalar>& grad, double beta);

/// One pure inversion step on the whole bank; returns the loss before the step.
template <typename Scalar>
double inversion_step(DynamicDataset<Scalar>& dd, const ModelZoo<Scalar>& zoo, const InversionWeights& weights,
                      double beta);

/// Fresh N(0,1) images, `count_per_label` per label (label-major), optimized
/// `steps` Adam iterations against the single-model inversion objective.
template <typename Scalar>
Tensor<Scalar> synthesize_from_model(const NetworkParams<Scalar>& net, const std::vector<int>& labels,
                                     int count_per_label, int steps, const InversionWeights& weights, double beta,
                                     std::uint64_t seed);

/// Writes one PNG grid per class into `dir` (class_<g>.png), each image
/// clamped to [0, 1] and min-max normalized.
void dump_images(const DynamicDataset<float>& dd, const std::string& dir);

}  // namespace purer
