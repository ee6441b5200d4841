#include "purer/icfil.hpp"

#include "purer/errors.hpp"
#include "purer/functional.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

namespace purer {

template <typename Scalar>
NetworkParams<Scalar> AdaptedModel<Scalar>::network() const {
  NetworkParams<Scalar> net;
  net.spec = spec;
  net.params = backbone;
  net.params.add("head.weight", head_weight);
  net.params.add("head.bias", head_bias);
  net.buffers = buffers;
  return net;
}

template <typename Scalar>
AdaptedModel<Scalar> split_network(const NetworkParams<Scalar>& net) {
  AdaptedModel<Scalar> out;
  out.spec = net.spec;
  out.buffers = net.buffers;
  const std::size_t n = net.params.size();
  if (n < 2 || net.params.names[n - 2] != "head.weight" || net.params.names[n - 1] != "head.bias")
    throw InternalError("split_network: head parameters must come last");
  for (std::size_t i = 0; i + 2 < n; ++i) {
    if (is_head_param(net.params.names[i])) throw InternalError("split_network: stray head parameter");
    out.backbone.add(net.params.names[i], net.params.values[i]);
  }
  out.head_weight = net.params.values[n - 2];
  out.head_bias = net.params.values[n - 1];
  return out;
}

void IcfilConfig::validate() const {
  if (pseudo_per_class < 1 || inversion_steps < 1 || head_iterations < 0)
    throw ConfigError("icfil: pseudo_per_class and inversion_steps must be >= 1, head_iterations >= 0");
  if (!(inversion_beta > 0) || !(tau > 0) || !(backbone_lr > 0) || !(head_lr > 0) || !(head_init_std >= 0))
    throw ConfigError("icfil: rates and tau must be positive");
  inversion_weights.validate();
}

template <typename Scalar>
AdaptedModel<Scalar> fast_adapt_test(const NetworkParams<Scalar>& theta, const Tensor<Scalar>& support_images,
                                     const std::vector<int>& support_labels, double alpha_inner) {
  const auto adapted = inner_adapt(theta, param_vars(theta, false), ad::Var<Scalar>::constant(support_images),
                                   support_labels, alpha_inner, false);
  NetworkParams<Scalar> net = theta;
  for (std::size_t i = 0; i < adapted.size(); ++i) net.params.values[i] = adapted[i].value();
  return split_network(net);
}

template <typename Scalar>
ad::Var<Scalar> contrastive_loss(const ad::Var<Scalar>& real_embedding, const std::vector<int>& real_labels,
                                 const ad::Var<Scalar>& pseudo_embedding, const std::vector<int>& pseudo_labels,
                                 double tau, bool normalize) {
  if (!(tau > 0)) throw InputError("contrastive_loss: tau must be positive");
  if (real_embedding.shape().size() != 2 || pseudo_embedding.shape().size() != 2 ||
      real_embedding.shape()[1] != pseudo_embedding.shape()[1])
    throw InputError("contrastive_loss: expected [R, F] and [P, F] embeddings");
  const Index r = real_embedding.shape()[0], p = pseudo_embedding.shape()[0];
  if (static_cast<std::size_t>(r) != real_labels.size() || static_cast<std::size_t>(p) != pseudo_labels.size())
    throw InputError("contrastive_loss: label count does not match the embeddings");
  if (p == 0) throw InputError("contrastive_loss: empty pseudo support");

  Tensor<Scalar> positives({r, p});
  for (Index i = 0; i < r; ++i) {
    bool any = false;
    for (Index j = 0; j < p; ++j) {
      const bool same = real_labels[static_cast<std::size_t>(i)] == pseudo_labels[static_cast<std::size_t>(j)];
      positives[i * p + j] = same ? Scalar(1) : Scalar(0);
      any = any || same;
    }
    if (!any)
      throw InputError("contrastive_loss: class " + std::to_string(real_labels[static_cast<std::size_t>(i)]) +
                       " has no pseudo positive");
  }
  const auto a = normalize ? ad::l2_normalize_rows(real_embedding) : real_embedding;
  const auto b = normalize ? ad::l2_normalize_rows(pseudo_embedding) : pseudo_embedding;
  const auto sims = ad::scale(ad::matmul(a, ad::transpose(b)), static_cast<Scalar>(1.0 / tau));
  const auto logp = ad::log_softmax(sims);
  return -ad::sum(logp * ad::Var<Scalar>::constant(std::move(positives)));
}

template <typename Scalar>
ad::Var<Scalar> calibration_loss(const NetworkParams<Scalar>& net, const std::vector<ad::Var<Scalar>>& params,
                                 const ad::Var<Scalar>& real_images, const std::vector<int>& real_labels,
                                 const ad::Var<Scalar>& pseudo_images, const std::vector<int>& pseudo_labels,
                                 double tau, bool normalize) {
  const auto real = forward(net, params, real_images, BnMode::kBatchStats).embedding;
  const auto pseudo = forward(net, params, pseudo_images, BnMode::kBatchStats).embedding;
  return contrastive_loss(real, real_labels, pseudo, pseudo_labels, tau, normalize);
}

template <typename Scalar>
AdaptedModel<Scalar> icfil_calibrate(const AdaptedModel<Scalar>& adapted, const Tensor<Scalar>& support_images,
                                     const std::vector<int>& support_labels, const IcfilConfig& cfg,
                                     std::uint64_t seed) {
  cfg.validate();
  if (support_labels.empty()) throw InputError("icfil_calibrate: empty support set");
  const int way = adapted.spec.num_classes;
  for (int l : support_labels)
    if (l < 0 || l >= way) throw InputError("icfil_calibrate: support label out of range");
  NetworkParams<Scalar> net = adapted.network();
  const auto support = ad::Var<Scalar>::constant(support_images);

  if (cfg.calibrate) {
    std::vector<int> classes(static_cast<std::size_t>(way));
    std::iota(classes.begin(), classes.end(), 0);
    const auto pseudo = synthesize_from_model(net, classes, cfg.pseudo_per_class, cfg.inversion_steps,
                                              cfg.inversion_weights, cfg.inversion_beta, seed);
    std::vector<int> pseudo_labels;
    for (int c : classes) pseudo_labels.insert(pseudo_labels.end(), static_cast<std::size_t>(cfg.pseudo_per_class), c);

    const auto params = param_vars(net, true);
    const auto loss = calibration_loss(net, params, support, support_labels, ad::Var<Scalar>::constant(pseudo),
                                       pseudo_labels, cfg.tau, cfg.normalize_embeddings);
    if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("non-finite calibration loss");
    const auto grads = ad::grad(loss, params);
    std::vector<Tensor<Scalar>*> mut;
    std::vector<Tensor<Scalar>> g;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (is_head_param(net.params.names[i])) continue;
      mut.push_back(&net.params.values[i]);
      g.push_back(grads[i].value());
    }
    std::vector<const Tensor<Scalar>*> cm(mut.begin(), mut.end());
    auto state = AdamState<Scalar>::zeros_like(cm);
    AdamConfig ac;
    ac.lr = cfg.backbone_lr;
    adam_step(mut, g, state, ac);
  }

  // Fresh head on frozen support embeddings.
  Tensor<Scalar> embedding;
  {
    ad::GradModeGuard off(false);
    embedding = forward(net, support_images, BnMode::kBatchStats).embedding.value();
  }
  const Index f = embedding.shape[1];
  std::seed_seq head_seed{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x4eadu};
  Rng rng(head_seed);
  std::normal_distribution<double> normal(0.0, cfg.head_init_std);
  Tensor<Scalar> w({f, static_cast<Index>(way)});
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(normal(rng));
  Tensor<Scalar> b({static_cast<Index>(way)});
  auto state = AdamState<Scalar>::zeros_like({&w, &b});
  AdamConfig ac;
  ac.lr = cfg.head_lr;
  const auto x = ad::Var<Scalar>::constant(embedding);
  for (int it = 0; it < cfg.head_iterations; ++it) {
    const auto wv = ad::Var<Scalar>::parameter(w), bv = ad::Var<Scalar>::parameter(b);
    const auto loss = ad::cross_entropy(ad::linear(x, wv, bv), support_labels);
    const auto g = ad::grad(loss, {wv, bv});
    adam_step<Scalar>({&w, &b}, {g[0].value(), g[1].value()}, state, ac);
  }
  auto out = split_network(net);
  out.head_weight = std::move(w);
  out.head_bias = std::move(b);
  return out;
}

template <typename Scalar>
std::vector<int> predict(const AdaptedModel<Scalar>& model, const Tensor<Scalar>& query_images) {
  const Shape in = model.spec.input_shape();
  if (query_images.rank() != 4 || query_images.shape[1] != in[0] || query_images.shape[2] != in[1] ||
      query_images.shape[3] != in[2])
    throw InputError("predict: query images do not match the model input shape");
  ad::GradModeGuard off(false);
  return argmax_rows(forward(model.network(), query_images, BnMode::kBatchStats).logits.value());
}

EvalReport EvalReport::from_accuracies(std::vector<double> accuracies) {
  if (accuracies.empty()) throw InputError("EvalReport: no tasks");
  EvalReport r;
  r.num_tasks = static_cast<int>(accuracies.size());
  const double n = static_cast<double>(accuracies.size());
  r.mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / n;
  if (accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : accuracies) ss += (a - r.mean) * (a - r.mean);
    r.std = std::sqrt(ss / (n - 1.0));
  }
  r.ci95 = 1.96 * r.std / std::sqrt(n);
  r.per_task_acc = std::move(accuracies);
  return r;
}

template <typename Scalar>
EvalReport evaluate(const NetworkParams<Scalar>& theta, const std::vector<EvalSplit>& splits,
                    const EvalOptions& opts, Rng& rng) {
  if (opts.num_tasks < 1) throw InputError("evaluate: num_tasks must be >= 1");
  if (splits.empty()) throw InputError("evaluate: no evaluation splits");
  if (theta.spec.num_classes != opts.way)
    throw InputError("evaluate: " + std::to_string(opts.way) + "-way tasks for a " +
                     std::to_string(theta.spec.num_classes) + "-way head");
  for (const auto& [ds, classes] : splits) {
    if (!ds) throw InputError("evaluate: null dataset");
    int usable = 0;
    for (int c : classes) {
      const auto it = ds->class_index.find(c);
      usable += it != ds->class_index.end() && static_cast<int>(it->second.size()) >= opts.shots + opts.queries;
    }
    if (usable < opts.way) throw InputError("evaluate: a split cannot supply " + std::to_string(opts.way) + "-way tasks");
  }
  if (opts.use_icfil) opts.icfil.validate();

  const std::uint64_t base = rng();
  std::vector<double> acc(static_cast<std::size_t>(opts.num_tasks));
  auto run_task = [&](int t) {
    std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                      static_cast<std::uint32_t>(t)};
    Rng task_rng(seq);
    const auto& [ds, classes] = splits[static_cast<std::size_t>(t) % splits.size()];
    const auto ep = sample_episode_from_dataset<Scalar>(*ds, classes, opts.way, opts.shots, opts.queries, task_rng);
    auto model = fast_adapt_test(theta, ep.support_images.value(), ep.support_labels, opts.alpha_inner);
    if (opts.use_icfil) model = icfil_calibrate(model, ep.support_images.value(), ep.support_labels, opts.icfil, task_rng());
    const auto predicted = predict(model, ep.query_images.value());
    int correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == ep.query_labels[i];
    acc[static_cast<std::size_t>(t)] = static_cast<double>(correct) / static_cast<double>(predicted.size());
  };

  const int workers = std::max(1, std::min(opts.workers, opts.num_tasks));
  if (workers == 1) {
    for (int t = 0; t < opts.num_tasks; ++t) run_task(t);
  } else {
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (int t = next++; t < opts.num_tasks; t = next++) run_task(t);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
          next = opts.num_tasks;
        }
      });
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return EvalReport::from_accuracies(std::move(acc));
}

#define PURER_INSTANTIATE_ICFIL(S)                                                                                 \
  template struct AdaptedModel<S>;                                                                                 \
  template AdaptedModel<S> split_network<S>(const NetworkParams<S>&);                                              \
  template AdaptedModel<S> fast_adapt_test<S>(const NetworkParams<S>&, const Tensor<S>&, const std::vector<int>&,  \
                                              double);                                                             \
  template ad::Var<S> contrastive_loss<S>(const ad::Var<S>&, const std::vector<int>&, const ad::Var<S>&,           \
                                          const std::vector<int>&, double, bool);                                  \
  template ad::Var<S> calibration_loss<S>(const NetworkParams<S>&, const std::vector<ad::Var<S>>&,                 \
                                          const ad::Var<S>&, const std::vector<int>&, const ad::Var<S>&,           \
                                          const std::vector<int>&, double, bool);                                  \
  template AdaptedModel<S> icfil_calibrate<S>(const AdaptedModel<S>&, const Tensor<S>&, const std::vector<int>&,   \
                                              const IcfilConfig&, std::uint64_t);                                  \
  template std::vector<int> predict<S>(const AdaptedModel<S>&, const Tensor<S>&);                                  \
  template EvalReport evaluate<S>(const NetworkParams<S>&, const std::vector<EvalSplit>&, const EvalOptions&, Rng&);

PURER_INSTANTIATE_ICFIL(float)
PURER_INSTANTIATE_ICFIL(double)

}  // namespace purer
