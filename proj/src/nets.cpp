#include "purer/nets.hpp"

#include "purer/errors.hpp"
#include "purer/functional.hpp"

#include <cmath>
#include <cstring>

namespace purer {

std::string to_string(ArchId arch) { return arch == ArchId::kConv4 ? "conv4" : "resnet8"; }

ArchId parse_arch_id(const std::string& name) {
  if (name == "conv4") return ArchId::kConv4;
  if (name == "resnet8") return ArchId::kResNet8;
  throw ConfigError("unknown arch_id '" + name + "'");
}

Index ArchSpec::filters() const {
  return std::max<Index>(1, static_cast<Index>(std::lround(32.0 * width_multiplier)));
}

Index ArchSpec::feature_dim() const {
  if (arch == ArchId::kResNet8) return filters();
  Index h = height, w = width;
  for (int i = 0; i < 4; ++i) {
    h = (h + 1) / 2;
    w = (w + 1) / 2;
  }
  return filters() * h * w;
}

void ArchSpec::validate() const {
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("input shape must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (!(width_multiplier > 0)) throw ConfigError("width_multiplier must be positive");
}

template <typename Scalar>
const Tensor<Scalar>& NamedTensors<Scalar>::at(const std::string& name) const {
  const long i = index_of(name);
  if (i < 0) throw InputError("no tensor named '" + name + "'");
  return values[static_cast<std::size_t>(i)];
}

template <typename Scalar>
Tensor<Scalar>& NamedTensors<Scalar>::at(const std::string& name) {
  const long i = index_of(name);
  if (i < 0) throw InputError("no tensor named '" + name + "'");
  return values[static_cast<std::size_t>(i)];
}

namespace {

template <typename Scalar>
Tensor<Scalar> uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
void add_conv_bn(NetworkParams<Scalar>& net, const std::string& prefix, Index cin, Index cout, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * 9));
  net.params.add(prefix + ".conv.weight", uniform<Scalar>({cout, cin, 3, 3}, bound, rng));
  net.params.add(prefix + ".conv.bias", uniform<Scalar>({cout}, bound, rng));
  net.params.add(prefix + ".bn.weight", Tensor<Scalar>::constant({cout}, Scalar(1)));
  net.params.add(prefix + ".bn.bias", Tensor<Scalar>::zeros({cout}));
  net.buffers.add(prefix + ".bn.running_mean", Tensor<Scalar>::zeros({cout}));
  net.buffers.add(prefix + ".bn.running_var", Tensor<Scalar>::constant({cout}, Scalar(1)));
}

// Walks params/buffers in build order.
template <typename Scalar>
struct LayerCursor {
  const NetworkParams<Scalar>& net;
  const std::vector<ad::Var<Scalar>>& params;
  BnMode mode;
  ForwardTrace<Scalar>& trace;
  std::size_t next_param = 0;
  std::size_t next_buffer = 0;

  const ad::Var<Scalar>& take() { return params[next_param++]; }

  ad::Var<Scalar> conv_bn(const ad::Var<Scalar>& x) {
    const auto& w = take();
    const auto& b = take();
    auto y = ad::conv2d(x, w);
    y = y + ad::channel_expand(b, y.shape());
    const auto& gamma = take();
    const auto& beta = take();
    const Tensor<Scalar>* rm = nullptr;
    const Tensor<Scalar>* rv = nullptr;
    if (mode == BnMode::kRunningStats) {
      rm = &net.buffers.values[next_buffer];
      rv = &net.buffers.values[next_buffer + 1];
    }
    next_buffer += 2;
    auto bn = ad::batch_norm(y, gamma, beta, rm, rv);
    trace.bn_means.push_back(bn.batch_mean);
    trace.bn_variances.push_back(bn.batch_variance);
    return bn.output;
  }
};

}  // namespace

template <typename Scalar>
NetworkParams<Scalar> build_network(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  NetworkParams<Scalar> net;
  net.spec = spec;
  const Index f = spec.filters();
  if (spec.arch == ArchId::kConv4) {
    for (int i = 0; i < 4; ++i) add_conv_bn(net, "block" + std::to_string(i), i == 0 ? spec.channels : f, f, rng);
  } else {
    add_conv_bn(net, "stem", spec.channels, f, rng);
    for (int i = 0; i < 3; ++i) {
      add_conv_bn(net, "block" + std::to_string(i) + ".a", f, f, rng);
      add_conv_bn(net, "block" + std::to_string(i) + ".b", f, f, rng);
    }
  }
  const Index d = spec.feature_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  net.params.add("head.weight", uniform<Scalar>({d, spec.num_classes}, bound, rng));
  net.params.add("head.bias", uniform<Scalar>({spec.num_classes}, bound, rng));
  return net;
}

template <typename Scalar>
std::vector<ad::Var<Scalar>> param_vars(const NetworkParams<Scalar>& net, bool requires_grad) {
  std::vector<ad::Var<Scalar>> out;
  out.reserve(net.params.size());
  for (const auto& t : net.params.values)
    out.push_back(requires_grad ? ad::Var<Scalar>::parameter(t) : ad::Var<Scalar>::constant(t));
  return out;
}

template <typename Scalar>
ForwardTrace<Scalar> forward(const NetworkParams<Scalar>& net, const std::vector<ad::Var<Scalar>>& params,
                             const ad::Var<Scalar>& images, BnMode mode) {
  const ArchSpec& spec = net.spec;
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != spec.channels || s[2] != spec.height || s[3] != spec.width || s[0] < 1)
    throw InputError("forward: images " + shape_str(s) + " do not match input " + shape_str(spec.input_shape()));
  if (mode == BnMode::kBatchStats && s[0] < 2) throw InputError("forward: batch statistics need at least 2 images");
  if (params.size() != net.params.size()) throw InputError("forward: parameter count mismatch");

  ForwardTrace<Scalar> trace;
  LayerCursor<Scalar> cur{net, params, mode, trace};
  const Index batch = s[0];
  ad::Var<Scalar> x = images;
  if (spec.arch == ArchId::kConv4) {
    for (int i = 0; i < 4; ++i) x = ad::max_pool2x2(ad::relu(cur.conv_bn(x)));
    trace.embedding = ad::reshape(x, {batch, spec.feature_dim()});
  } else {
    x = ad::relu(cur.conv_bn(x));
    for (int i = 0; i < 3; ++i) {
      auto h = ad::relu(cur.conv_bn(x));
      h = cur.conv_bn(h);
      x = ad::max_pool2x2(ad::relu(h + x));
    }
    const Shape& xs = x.shape();
    auto flat = ad::reshape(x, {xs[0], xs[1], xs[2] * xs[3]});
    trace.embedding = ad::scale(ad::sum_axis(flat, 2), Scalar(1) / static_cast<Scalar>(xs[2] * xs[3]));
  }
  const auto& hw = cur.take();
  const auto& hb = cur.take();
  trace.logits = ad::linear(trace.embedding, hw, hb);
  return trace;
}

template <typename Scalar>
ForwardTrace<Scalar> forward(const NetworkParams<Scalar>& net, const Tensor<Scalar>& images, BnMode mode) {
  return forward(net, param_vars(net, false), ad::Var<Scalar>::constant(images), mode);
}

template <typename Scalar>
void update_running_stats(NetworkParams<Scalar>& net, const std::vector<Tensor<Scalar>>& batch_means,
                          const std::vector<Tensor<Scalar>>& batch_variances, Scalar momentum) {
  if (batch_means.size() != net.num_bn_layers() || batch_variances.size() != net.num_bn_layers())
    throw InternalError("update_running_stats: BN layer count mismatch");
  for (std::size_t l = 0; l < net.num_bn_layers(); ++l) {
    auto& rm = net.buffers.values[2 * l].data;
    auto& rv = net.buffers.values[2 * l + 1].data;
    rm = (Scalar(1) - momentum) * rm + momentum * batch_means[l].data;
    rv = (Scalar(1) - momentum) * rv + momentum * batch_variances[l].data;
  }
}

namespace {
void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
}
}  // namespace

template <typename Scalar>
std::uint64_t checksum(const NetworkParams<Scalar>& net) {
  std::uint64_t h = 1469598103934665603ULL;
  const std::string arch = to_string(net.spec.arch);
  fnv(h, arch.data(), arch.size());
  for (const auto* group : {&net.params, &net.buffers}) {
    for (std::size_t i = 0; i < group->size(); ++i) {
      fnv(h, group->names[i].data(), group->names[i].size());
      const auto& t = group->values[i];
      fnv(h, t.shape.data(), t.shape.size() * sizeof(Index));
      fnv(h, t.data.data(), static_cast<std::size_t>(t.size()) * sizeof(Scalar));
    }
  }
  return h;
}

#define PURER_INSTANTIATE_NETS(S)                                                                                    \
  template struct NamedTensors<S>;                                                                                   \
  template NetworkParams<S> build_network<S>(const ArchSpec&, std::uint64_t);                                        \
  template std::vector<ad::Var<S>> param_vars<S>(const NetworkParams<S>&, bool);                                     \
  template ForwardTrace<S> forward<S>(const NetworkParams<S>&, const std::vector<ad::Var<S>>&, const ad::Var<S>&,    \
                                      BnMode);                                                                       \
  template ForwardTrace<S> forward<S>(const NetworkParams<S>&, const Tensor<S>&, BnMode);                            \
  template void update_running_stats<S>(NetworkParams<S>&, const std::vector<Tensor<S>>&,                            \
                                        const std::vector<Tensor<S>>&, S);                                           \
  template std::uint64_t checksum<S>(const NetworkParams<S>&);

PURER_INSTANTIATE_NETS(float)
PURER_INSTANTIATE_NETS(double)

}  // namespace purer
