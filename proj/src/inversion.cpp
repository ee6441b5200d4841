#include "purer/inversion.hpp"

#include "purer/errors.hpp"
#include "purer/functional.hpp"
#include "purer/png_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

namespace purer {

void InversionWeights::validate() const {
  if (!(alpha_tv >= 0) || !(alpha_l2 >= 0) || !(feature_weight >= 0))
    throw ConfigError("inversion weights must be non-negative");
}

template <typename Scalar>
ad::Var<Scalar> DynamicDataset<Scalar>::flat(const ad::Var<Scalar>& images) {
  const Shape& s = images.shape();
  if (s.size() != 5) throw InputError("dynamic dataset images must be [G, K+M, C, H, W]");
  return ad::reshape(images, {s[0] * s[1], s[2], s[3], s[4]});
}

template <typename Scalar>
DynamicDataset<Scalar> init_dynamic_dataset(const ModelZoo<Scalar>& zoo, int shots, int queries, const Shape& shape,
                                            std::uint64_t seed) {
  if (shots < 1 || queries < 1) throw InputError("init_dynamic_dataset: K and M must be >= 1");
  if (zoo.entries.empty()) throw InputError("init_dynamic_dataset: empty zoo");
  if (shape.size() != 3) throw InputError("init_dynamic_dataset: shape must be (C, H, W)");
  for (const auto& e : zoo.entries)
    if (e.spec().input_shape() != shape)
      throw InputError("init_dynamic_dataset: shape " + shape_str(shape) + " does not match zoo input " +
                       shape_str(e.spec().input_shape()));

  DynamicDataset<Scalar> dd;
  dd.images = Tensor<Scalar>({zoo.num_global_classes(), shots + queries, shape[0], shape[1], shape[2]});
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < dd.images.size(); ++i) dd.images[i] = static_cast<Scalar>(normal(rng));
  for (const auto& gc : zoo.global_classes) {
    dd.class_owner.push_back(gc.entry);
    dd.assigned_labels.push_back(gc.local);
  }
  dd.optimizer_state = AdamState<Scalar>::zeros_like({&dd.images});
  return dd;
}

template <typename Scalar>
ad::Var<Scalar> tv_prior(const ad::Var<Scalar>& images) {
  const Shape& s = images.shape();
  if (s.size() != 4) throw InputError("tv_prior: expected [B, C, H, W], got " + shape_str(s));
  const Index b = s[0], c = s[1], h = s[2], w = s[3];
  if (h < 2 || w < 2) throw InputError("tv_prior: needs H, W >= 2");
  auto down_hi = std::make_shared<std::vector<Index>>(), down_lo = std::make_shared<std::vector<Index>>();
  auto right_hi = std::make_shared<std::vector<Index>>(), right_lo = std::make_shared<std::vector<Index>>();
  for (Index p = 0; p < b * c; ++p)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const Index o = (p * h + y) * w + x;
        if (y + 1 < h) {
          down_hi->push_back(o + w);
          down_lo->push_back(o);
        }
        if (x + 1 < w) {
          right_hi->push_back(o + 1);
          right_lo->push_back(o);
        }
      }
  const Shape vs{static_cast<Index>(down_lo->size())}, hs{static_cast<Index>(right_lo->size())};
  auto dv = ad::gather(images, down_hi, vs) - ad::gather(images, down_lo, vs);
  auto dh = ad::gather(images, right_hi, hs) - ad::gather(images, right_lo, hs);
  return ad::scale(ad::sum(dv * dv) + ad::sum(dh * dh), Scalar(1) / static_cast<Scalar>(b));
}

template <typename Scalar>
ad::Var<Scalar> l2_prior(const ad::Var<Scalar>& images) {
  if (images.shape().empty() || images.shape()[0] < 1) throw InputError("l2_prior: empty batch");
  return ad::scale(ad::sum(images * images), Scalar(1) / static_cast<Scalar>(images.shape()[0]));
}

template <typename Scalar>
ad::Var<Scalar> bn_feature_loss(const NetworkParams<Scalar>& net, const ForwardTrace<Scalar>& trace) {
  const std::size_t layers = net.num_bn_layers();
  if (trace.bn_means.size() != layers || trace.bn_variances.size() != layers)
    throw InternalError("bn_feature_loss: trace has " + std::to_string(trace.bn_means.size()) + " BN layers, network " +
                        std::to_string(layers));
  ad::Var<Scalar> total = ad::Var<Scalar>::scalar(Scalar(0));
  for (std::size_t l = 0; l < layers; ++l) {
    auto dm = trace.bn_means[l] - ad::Var<Scalar>::constant(net.buffers.values[2 * l]);
    auto dv = trace.bn_variances[l] - ad::Var<Scalar>::constant(net.buffers.values[2 * l + 1]);
    total = total + ad::sum(dm * dm) + ad::sum(dv * dv);
  }
  return total;
}

template <typename Scalar>
ad::Var<Scalar> model_inversion_loss(const NetworkParams<Scalar>& net, const ad::Var<Scalar>& images,
                                     const std::vector<int>& labels, const InversionWeights& weights) {
  const auto trace = forward(net, param_vars(net, false), images, BnMode::kBatchStats);
  auto loss = ad::cross_entropy(trace.logits, labels, ad::Reduction::kSum);
  loss = loss + ad::scale(tv_prior(images), static_cast<Scalar>(weights.alpha_tv));
  loss = loss + ad::scale(l2_prior(images), static_cast<Scalar>(weights.alpha_l2));
  loss = loss + ad::scale(bn_feature_loss(net, trace), static_cast<Scalar>(weights.feature_weight));
  return loss;
}

template <typename Scalar>
ad::Var<Scalar> inversion_loss(const ModelZoo<Scalar>& zoo, const DynamicDataset<Scalar>& dd,
                               const ad::Var<Scalar>& images, const InversionWeights& weights,
                               const std::vector<int>* class_subset) {
  const int classes = dd.num_classes();
  if (static_cast<int>(dd.class_owner.size()) != classes || zoo.num_global_classes() != classes)
    throw InternalError("inversion_loss: dynamic dataset does not match the zoo");
  std::vector<int> selected;
  if (class_subset) {
    selected = *class_subset;
    std::sort(selected.begin(), selected.end());
    selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
    for (int g : selected)
      if (g < 0 || g >= classes) throw InputError("inversion_loss: unknown global class " + std::to_string(g));
  } else {
    for (int g = 0; g < classes; ++g) selected.push_back(g);
  }
  if (selected.empty()) throw InputError("inversion_loss: empty class selection");

  std::map<int, std::vector<int>> by_owner;
  for (int g : selected) by_owner[dd.class_owner[static_cast<std::size_t>(g)]].push_back(g);

  const auto flat = DynamicDataset<Scalar>::flat(images);
  const Index per_class = dd.instances_per_class();
  ad::Var<Scalar> total;
  for (const auto& [owner, globals] : by_owner) {
    std::vector<Index> rows;
    std::vector<int> labels;
    for (int g : globals)
      for (Index i = 0; i < per_class; ++i) {
        rows.push_back(g * per_class + i);
        labels.push_back(dd.assigned_labels[static_cast<std::size_t>(g)]);
      }
    auto term = model_inversion_loss(zoo.entries[static_cast<std::size_t>(owner)].params, ad::select_rows(flat, rows),
                                     labels, weights);
    total = total.defined() ? total + term : term;
  }
  return total;
}

template <typename Scalar>
void dataset_step(DynamicDataset<Scalar>& dd, const Tensor<Scalar>& grad, double beta) {
  if (grad.shape != dd.images.shape) throw InputError("dataset_step: gradient shape mismatch");
  require_finite(grad, "dynamic dataset gradient");
  AdamConfig cfg;
  cfg.lr = beta;
  adam_step<Scalar>({&dd.images}, {grad}, dd.optimizer_state, cfg);
}

template <typename Scalar>
double inversion_step(DynamicDataset<Scalar>& dd, const ModelZoo<Scalar>& zoo, const InversionWeights& weights,
                      double beta) {
  auto images = ad::Var<Scalar>::parameter(dd.images);
  auto loss = inversion_loss(zoo, dd, images, weights);
  if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("non-finite inversion loss");
  auto g = ad::grad(loss, {images});
  dataset_step(dd, g[0].value(), beta);
  return static_cast<double>(loss.item());
}

template <typename Scalar>
Tensor<Scalar> synthesize_from_model(const NetworkParams<Scalar>& net, const std::vector<int>& labels,
                                     int count_per_label, int steps, const InversionWeights& weights, double beta,
                                     std::uint64_t seed) {
  if (steps < 1) throw InputError("synthesize_from_model: steps must be >= 1");
  if (count_per_label < 1 || labels.empty()) throw InputError("synthesize_from_model: nothing to synthesize");
  if (labels.size() * static_cast<std::size_t>(count_per_label) < 2)
    throw InputError("synthesize_from_model: need at least 2 images for batch statistics");
  for (int l : labels)
    if (l < 0 || l >= net.spec.num_classes) throw InputError("synthesize_from_model: label out of range");

  const Shape in = net.spec.input_shape();
  Tensor<Scalar> images({static_cast<Index>(labels.size()) * count_per_label, in[0], in[1], in[2]});
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Index i = 0; i < images.size(); ++i) images[i] = static_cast<Scalar>(normal(rng));
  std::vector<int> targets;
  for (int l : labels) targets.insert(targets.end(), static_cast<std::size_t>(count_per_label), l);

  auto state = AdamState<Scalar>::zeros_like({&images});
  AdamConfig cfg;
  cfg.lr = beta;
  for (int step = 0; step < steps; ++step) {
    auto x = ad::Var<Scalar>::parameter(images);
    auto loss = model_inversion_loss(net, x, targets, weights);
    auto g = ad::grad(loss, {x});
    require_finite(g[0].value(), "synthesized image gradient");
    adam_step<Scalar>({&images}, {g[0].value()}, state, cfg);
  }
  return images;
}

void dump_images(const DynamicDataset<float>& dd, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const Index n = dd.instances_per_class();
  const Index c = dd.images.shape[2], h = dd.images.shape[3], w = dd.images.shape[4];
  if (c != 1 && c != 3) throw InputError("dump_images: only 1 or 3 channels can be written");
  const Index per = c * h * w;
  constexpr Index kGap = 1;
  for (int g = 0; g < dd.num_classes(); ++g) {
    Image8 grid;
    grid.channels = static_cast<int>(c);
    grid.width = static_cast<int>(n * (w + kGap) - kGap);
    grid.height = static_cast<int>(h);
    grid.pixels.assign(static_cast<std::size_t>(grid.width * grid.height * grid.channels), 0);
    for (Index i = 0; i < n; ++i) {
      Eigen::ArrayXf img = dd.images.data.segment((g * n + i) * per, per).array().max(0.0f).min(1.0f);
      const float lo = img.minCoeff(), hi = img.maxCoeff();
      if (hi > lo) img = (img - lo) / (hi - lo);
      for (Index ch = 0; ch < c; ++ch)
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            const float v = img[(ch * h + y) * w + x];
            const Index gx = i * (w + kGap) + x;
            grid.pixels[static_cast<std::size_t>((y * grid.width + gx) * c + ch)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0f));
          }
    }
    write_png((std::filesystem::path(dir) / ("class_" + std::to_string(g) + ".png")).string(), grid);
  }
}

#define PURER_INSTANTIATE_INVERSION(S)                                                                             \
  template struct DynamicDataset<S>;                                                                               \
  template DynamicDataset<S> init_dynamic_dataset<S>(const ModelZoo<S>&, int, int, const Shape&, std::uint64_t);   \
  template ad::Var<S> tv_prior<S>(const ad::Var<S>&);                                                              \
  template ad::Var<S> l2_prior<S>(const ad::Var<S>&);                                                              \
  template ad::Var<S> bn_feature_loss<S>(const NetworkParams<S>&, const ForwardTrace<S>&);                         \
  template ad::Var<S> model_inversion_loss<S>(const NetworkParams<S>&, const ad::Var<S>&, const std::vector<int>&, \
                                              const InversionWeights&);                                            \
  template ad::Var<S> inversion_loss<S>(const ModelZoo<S>&, const DynamicDataset<S>&, const ad::Var<S>&,           \
                                        const InversionWeights&, const std::vector<int>*);                         \
  template void dataset_step<S>(DynamicDataset<S>&, const Tensor<S>&, double);                                     \
  template double inversion_step<S>(DynamicDataset<S>&, const ModelZoo<S>&, const InversionWeights&, double);      \
  template Tensor<S> synthesize_from_model<S>(const NetworkParams<S>&, const std::vector<int>&, int, int,          \
                                              const InversionWeights&, double, std::uint64_t);

PURER_INSTANTIATE_INVERSION(float)
PURER_INSTANTIATE_INVERSION(double)

}  // namespace purer
