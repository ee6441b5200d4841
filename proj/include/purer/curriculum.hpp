#pragma once

// Plateau feedback, the gradient switch and the adversarial dataset update.

#include "purer/episodic.hpp"

#include <optional>
#include <string>

namespace purer {

enum class Omega { kNegative, kPositive };
enum class FeedbackMetric { kAccuracy, kLoss };

std::string to_string(FeedbackMetric m);
FeedbackMetric parse_feedback_metric(const std::string& name);

/// Positive feedback once the monitored metric has gone `patience`
/// consecutive updates without strictly improving; it stays positive until
/// the next improvement.
struct FeedbackMonitor {
  std::optional<double> best_metric;
  int stall_count = 0;
  int patience = 6;
  Omega last_omega = Omega::kNegative;
  FeedbackMetric metric = FeedbackMetric::kAccuracy;

  FeedbackMonitor() = default;
  explicit FeedbackMonitor(int patience_, FeedbackMetric metric_ = FeedbackMetric::kAccuracy)
      : patience(patience_), metric(metric_) {}

  /// Higher is better for accuracy, lower for loss.
  Omega update(double value);
  bool operator==(const FeedbackMonitor&) const = default;
};

/// 1 iff the feedback is positive and the curriculum is active.
inline int gradient_switch(Omega omega, bool curriculum_active) {
  return omega == Omega::kPositive && curriculum_active ? 1 : 0;
}

template <typename Scalar>
struct EciResult {
  double inv_loss = 0.0;
  std::optional<double> outer_loss;  // only when the switch is on
  Episode<Scalar> task;              // the independently sampled task
};

/// One step on the bank for L_inv - switch * lambda * L_outer(task; theta).
/// The task is always drawn from `rng`, so the random stream does not depend
/// on the switch. theta is read, never written.
template <typename Scalar>
EciResult<Scalar> eci_dataset_update(DynamicDataset<Scalar>& dd, const ModelZoo<Scalar>& zoo,
                                     const MetaState<Scalar>& state, const HyperParams& hp,
                                     const InversionWeights& weights, int gradient_switch_value, Rng& rng);

}  // namespace purer
