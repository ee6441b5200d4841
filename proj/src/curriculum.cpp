#include "purer/curriculum.hpp"

#include "purer/errors.hpp"

#include <cmath>

namespace purer {

std::string to_string(FeedbackMetric m) { return m == FeedbackMetric::kAccuracy ? "accuracy" : "loss"; }

FeedbackMetric parse_feedback_metric(const std::string& name) {
  if (name == "accuracy") return FeedbackMetric::kAccuracy;
  if (name == "loss") return FeedbackMetric::kLoss;
  throw ConfigError("unknown feedback metric '" + name + "' (expected accuracy or loss)");
}

Omega FeedbackMonitor::update(double value) {
  const bool improved = !best_metric || (metric == FeedbackMetric::kAccuracy ? value > *best_metric : value < *best_metric);
  if (improved) {
    best_metric = value;
    stall_count = 0;
    last_omega = Omega::kNegative;
  } else {
    ++stall_count;
    last_omega = stall_count >= patience ? Omega::kPositive : Omega::kNegative;
  }
  return last_omega;
}

template <typename Scalar>
EciResult<Scalar> eci_dataset_update(DynamicDataset<Scalar>& dd, const ModelZoo<Scalar>& zoo,
                                     const MetaState<Scalar>& state, const HyperParams& hp,
                                     const InversionWeights& weights, int gradient_switch_value, Rng& rng) {
  if (gradient_switch_value != 0 && gradient_switch_value != 1) throw InputError("gradient switch must be 0 or 1");
  auto images = ad::Var<Scalar>::parameter(dd.images);
  EciResult<Scalar> result;
  result.task = sample_pseudo_episode(dd, images, hp.way, hp.shots, hp.queries, rng, hp.within_model_tasks);

  auto objective = inversion_loss(zoo, dd, images, weights);
  result.inv_loss = static_cast<double>(objective.item());
  if (gradient_switch_value == 1) {
    const auto params = param_vars(state.theta, false);
    const auto outer = outer_loss(state.theta, params, result.task, hp.alpha_inner, hp.second_order);
    result.outer_loss = static_cast<double>(outer.loss.item());
    objective = objective - ad::scale(outer.loss, static_cast<Scalar>(hp.lambda));
  }
  if (!std::isfinite(static_cast<double>(objective.item()))) throw NumericError("non-finite dataset objective");
  const auto g = ad::grad(objective, {images});
  dataset_step(dd, g[0].value(), hp.beta);
  return result;
}

template EciResult<float> eci_dataset_update<float>(DynamicDataset<float>&, const ModelZoo<float>&,
                                                    const MetaState<float>&, const HyperParams&,
                                                    const InversionWeights&, int, Rng&);
template EciResult<double> eci_dataset_update<double>(DynamicDataset<double>&, const ModelZoo<double>&,
                                                      const MetaState<double>&, const HyperParams&,
                                                      const InversionWeights&, int, Rng&);

}  // namespace purer
