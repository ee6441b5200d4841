#pragma once

// Composite differentiable building blocks expressed in autodiff primitives.

#include "purer/autodiff.hpp"

#include <type_traits>
#include <vector>

namespace purer::ad {

enum class Reduction { kMean, kSum };

/// x: [B, F], weight: [F, N], bias: [N] -> [B, N]
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

/// Per-channel mean of x: [B, C, H, W] -> [C].
template <typename Scalar>
Var<Scalar> channel_mean(const Var<Scalar>& x);

/// v: [C] -> [B, C, H, W]
template <typename Scalar>
Var<Scalar> channel_expand(const Var<Scalar>& v, const Shape& like);

template <typename Scalar>
struct BatchNormResult {
  Var<Scalar> output;
  Var<Scalar> batch_mean;      // [C]
  Var<Scalar> batch_variance;  // [C], biased
};

/// Batch normalization with affine parameters. When running_mean/variance are
/// given the activations are normalized with them, otherwise with the batch
/// statistics; the batch statistics are returned either way.
template <typename Scalar>
BatchNormResult<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                                   std::type_identity_t<const Tensor<Scalar>*> running_mean,
                                   std::type_identity_t<const Tensor<Scalar>*> running_variance,
                                   std::type_identity_t<Scalar> eps = Scalar(1e-5));

/// Row-wise log-softmax of [B, N] logits.
template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& logits);

template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, const std::vector<int>& labels,
                          Reduction reduction = Reduction::kMean);

/// Row-wise l2 normalization of [B, F].
template <typename Scalar>
Var<Scalar> l2_normalize_rows(const Var<Scalar>& x, Scalar eps = Scalar(1e-12));

/// Rows (first-axis slices) of x in the given order.
template <typename Scalar>
Var<Scalar> select_rows(const Var<Scalar>& x, const std::vector<Index>& rows);

/// Mean over all elements.
template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x);

}  // namespace purer::ad
