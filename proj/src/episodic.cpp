#include "purer/episodic.hpp"

#include "purer/errors.hpp"
#include "purer/functional.hpp"

#include <cmath>
#include <map>
#include <numeric>

namespace purer {

void HyperParams::validate() const {
  if (!(alpha_inner > 0) || !(alpha_outer > 0) || !(beta > 0)) throw ConfigError("step sizes must be positive");
  if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
  if (episode_batch < 1) throw ConfigError("episode_batch must be >= 1");
  if (way < 2 || shots < 1 || queries < 1) throw ConfigError("need way >= 2, shots >= 1, queries >= 1");
  if (curriculum_start_iter < 0) throw ConfigError("curriculum_start_iter must be >= 0");
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

template <typename Scalar>
MetaState<Scalar> init_meta_state(const ArchSpec& spec, std::uint64_t seed) {
  MetaState<Scalar> s;
  s.theta = build_network<Scalar>(spec, seed);
  std::vector<const Tensor<Scalar>*> ptrs;
  for (const auto& t : s.theta.params.values) ptrs.push_back(&t);
  s.optimizer_state = AdamState<Scalar>::zeros_like(ptrs);
  return s;
}

namespace {

template <typename Scalar>
Episode<Scalar> gather_episode(Episode<Scalar> ep, const ad::Var<Scalar>& images) {
  const auto flat = DynamicDataset<Scalar>::flat(images);
  ep.support_images = ad::select_rows(flat, ep.support_items);
  ep.query_images = ad::select_rows(flat, ep.query_items);
  return ep;
}

}  // namespace

template <typename Scalar>
Episode<Scalar> sample_pseudo_episode(const DynamicDataset<Scalar>& dd, const ad::Var<Scalar>& images, int way,
                                      int shots, int queries, Rng& rng, bool within_model_tasks) {
  if (images.shape() != dd.images.shape) throw InputError("sample_pseudo_episode: image handle does not match the bank");
  if (way < 1 || shots < 1 || queries < 1) throw InputError("sample_pseudo_episode: bad task size");
  const int per_class = dd.instances_per_class();
  if (shots + queries > per_class)
    throw InputError("sample_pseudo_episode: K+M = " + std::to_string(shots + queries) + " exceeds the " +
                     std::to_string(per_class) + " instances per class");
  if (way > dd.num_classes())
    throw InputError("sample_pseudo_episode: " + std::to_string(way) + "-way task from " +
                     std::to_string(dd.num_classes()) + " classes");

  std::vector<int> pool;
  if (within_model_tasks) {
    std::map<int, std::vector<int>> by_owner;
    for (int g = 0; g < dd.num_classes(); ++g) by_owner[dd.class_owner[static_cast<std::size_t>(g)]].push_back(g);
    std::vector<int> eligible;
    for (const auto& [owner, classes] : by_owner)
      if (static_cast<int>(classes.size()) >= way) eligible.push_back(owner);
    if (eligible.empty()) throw InputError("sample_pseudo_episode: no zoo model owns " + std::to_string(way) + " classes");
    std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
    pool = by_owner[eligible[pick(rng)]];
  } else {
    pool.resize(static_cast<std::size_t>(dd.num_classes()));
    std::iota(pool.begin(), pool.end(), 0);
  }

  Episode<Scalar> ep;
  ep.way = way;
  ep.shots = shots;
  ep.queries_per_class = queries;
  ep.origin = EpisodeOrigin::kPseudo;
  ep.source_classes = sample_without_replacement(pool, way, rng);
  std::vector<int> instances(static_cast<std::size_t>(per_class));
  std::iota(instances.begin(), instances.end(), 0);
  for (int label = 0; label < way; ++label) {
    const Index base = static_cast<Index>(ep.source_classes[static_cast<std::size_t>(label)]) * per_class;
    const auto order = sample_without_replacement(instances, shots + queries, rng);
    for (int i = 0; i < shots + queries; ++i) {
      const Index item = base + order[static_cast<std::size_t>(i)];
      if (i < shots) {
        ep.support_items.push_back(item);
        ep.support_labels.push_back(label);
      } else {
        ep.query_items.push_back(item);
        ep.query_labels.push_back(label);
      }
    }
  }
  return gather_episode(std::move(ep), images);
}

template <typename Scalar>
Episode<Scalar> rebind_pseudo_episode(const Episode<Scalar>& episode, const ad::Var<Scalar>& images) {
  if (episode.origin != EpisodeOrigin::kPseudo) throw InputError("rebind_pseudo_episode: not a pseudo episode");
  return gather_episode(episode, images);
}

template <typename Scalar>
std::vector<ad::Var<Scalar>> inner_adapt(const NetworkParams<Scalar>& net, const std::vector<ad::Var<Scalar>>& params,
                                         const ad::Var<Scalar>& support_images, const std::vector<int>& support_labels,
                                         double alpha_inner, bool second_order) {
  if (support_labels.empty()) throw InputError("inner_adapt: empty support set");
  // Constants (theta held fixed by the caller) still need a gradient here.
  std::vector<ad::Var<Scalar>> start;
  start.reserve(params.size());
  for (const auto& p : params) start.push_back(p.requires_grad() ? p : ad::Var<Scalar>::parameter(p.value()));
  const auto trace = forward(net, start, support_images, BnMode::kBatchStats);
  const auto loss = ad::cross_entropy(trace.logits, support_labels);
  if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("non-finite support loss in inner loop");
  const auto grads = ad::grad(loss, start, second_order);
  std::vector<ad::Var<Scalar>> adapted;
  adapted.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    adapted.push_back(params[i] - ad::scale(grads[i], static_cast<Scalar>(alpha_inner)));
  return adapted;
}

template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& logits) {
  if (logits.rank() != 2) throw InputError("argmax_rows: expected [B, N] logits");
  const Index n = logits.shape[1];
  std::vector<int> out;
  for (Index i = 0; i < logits.shape[0]; ++i) {
    Index best = 0;
    for (Index j = 1; j < n; ++j)
      if (logits.data[i * n + j] > logits.data[i * n + best]) best = j;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

template <typename Scalar>
OuterResult<Scalar> outer_loss(const NetworkParams<Scalar>& net, const std::vector<ad::Var<Scalar>>& params,
                               const Episode<Scalar>& episode, double alpha_inner, bool second_order) {
  if (episode.support_labels.size() != static_cast<std::size_t>(episode.support_images.shape().at(0)) ||
      episode.query_labels.size() != static_cast<std::size_t>(episode.query_images.shape().at(0)))
    throw InputError("outer_loss: malformed episode");
  if (episode.way != net.spec.num_classes)
    throw InputError("outer_loss: " + std::to_string(episode.way) + "-way episode for a " +
                     std::to_string(net.spec.num_classes) + "-way head");
  const auto adapted = inner_adapt(net, params, episode.support_images, episode.support_labels, alpha_inner, second_order);
  const auto trace = forward(net, adapted, episode.query_images, BnMode::kBatchStats);

  OuterResult<Scalar> out;
  out.loss = ad::cross_entropy(trace.logits, episode.query_labels);
  const auto predicted = argmax_rows(trace.logits.value());
  int correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == episode.query_labels[i];
  out.accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());
  for (const auto& m : trace.bn_means) out.query_bn_means.push_back(m.value());
  for (const auto& v : trace.bn_variances) out.query_bn_variances.push_back(v.value());
  return out;
}

template <typename Scalar>
MetaUpdateResult meta_update(MetaState<Scalar>& state, const std::vector<Episode<Scalar>>& episodes,
                             const HyperParams& hp) {
  if (static_cast<int>(episodes.size()) != hp.episode_batch)
    throw InputError("meta_update: expected " + std::to_string(hp.episode_batch) + " episodes, got " +
                     std::to_string(episodes.size()));
  const std::string where = " at iteration " + std::to_string(state.iteration);
  auto params = param_vars(state.theta, true);
  ad::Var<Scalar> total;
  MetaUpdateResult result;
  std::vector<Tensor<Scalar>> means, vars;
  for (const auto& ep : episodes) {
    OuterResult<Scalar> r;
    try {
      r = outer_loss(state.theta, params, ep, hp.alpha_inner, hp.second_order);
    } catch (const NumericError& e) {
      throw NumericError(e.what() + where);
    }
    total = total.defined() ? total + r.loss : r.loss;
    result.batch_train_acc += r.accuracy;
    if (means.empty()) {
      means = r.query_bn_means;
      vars = r.query_bn_variances;
    } else {
      for (std::size_t l = 0; l < means.size(); ++l) {
        means[l].data += r.query_bn_means[l].data;
        vars[l].data += r.query_bn_variances[l].data;
      }
    }
  }
  result.batch_outer_loss = static_cast<double>(total.item());
  result.batch_train_acc /= static_cast<double>(episodes.size());
  if (!std::isfinite(result.batch_outer_loss)) throw NumericError("non-finite outer loss" + where);

  const auto grads = ad::grad(total, params);
  std::vector<Tensor<Scalar>> g;
  for (const auto& v : grads) {
    if (!v.value().data.allFinite()) throw NumericError("non-finite meta gradient" + where);
    g.push_back(v.value());
  }
  std::vector<Tensor<Scalar>*> mut;
  for (auto& t : state.theta.params.values) mut.push_back(&t);
  AdamConfig cfg;
  cfg.lr = hp.alpha_outer;
  adam_step(mut, g, state.optimizer_state, cfg);

  const Scalar inv = Scalar(1) / static_cast<Scalar>(episodes.size());
  for (std::size_t l = 0; l < means.size(); ++l) {
    means[l].data *= inv;
    vars[l].data *= inv;
  }
  update_running_stats(state.theta, means, vars);
  ++state.iteration;
  state.curriculum_active = state.iteration >= hp.curriculum_start_iter;
  return result;
}

#define PURER_INSTANTIATE_EPISODIC(S)                                                                              \
  template MetaState<S> init_meta_state<S>(const ArchSpec&, std::uint64_t);                                        \
  template Episode<S> sample_pseudo_episode<S>(const DynamicDataset<S>&, const ad::Var<S>&, int, int, int, Rng&,   \
                                               bool);                                                              \
  template Episode<S> rebind_pseudo_episode<S>(const Episode<S>&, const ad::Var<S>&);                              \
  template std::vector<ad::Var<S>> inner_adapt<S>(const NetworkParams<S>&, const std::vector<ad::Var<S>>&,         \
                                                  const ad::Var<S>&, const std::vector<int>&, double, bool);       \
  template OuterResult<S> outer_loss<S>(const NetworkParams<S>&, const std::vector<ad::Var<S>>&, const Episode<S>&, \
                                        double, bool);                                                             \
  template MetaUpdateResult meta_update<S>(MetaState<S>&, const std::vector<Episode<S>>&, const HyperParams&);     \
  template std::vector<int> argmax_rows<S>(const Tensor<S>&);

PURER_INSTANTIATE_EPISODIC(float)
PURER_INSTANTIATE_EPISODIC(double)

}  // namespace purer
