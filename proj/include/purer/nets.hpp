#pragma once

#include "purer/autodiff.hpp"
#include "purer/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace purer {

using Rng = std::mt19937_64;

enum class ArchId { kConv4, kResNet8 };

std::string to_string(ArchId arch);
/// Throws ConfigError for anything but "conv4" / "resnet8".
ArchId parse_arch_id(const std::string& name);

struct ArchSpec {
  ArchId arch = ArchId::kConv4;
  Index channels = 3;
  Index height = 16;
  Index width = 16;
  int num_classes = 2;
  double width_multiplier = 1.0;

  /// Filters per conv layer: 32 scaled by width_multiplier.
  Index filters() const;
  /// Length of the backbone output.
  Index feature_dim() const;
  Shape input_shape() const { return {channels, height, width}; }
  void validate() const;

  bool operator==(const ArchSpec&) const = default;
};

/// Insertion-ordered name -> tensor collection.
template <typename Scalar>
struct NamedTensors {
  std::vector<std::string> names;
  std::vector<Tensor<Scalar>> values;

  std::size_t size() const { return names.size(); }
  void add(std::string name, Tensor<Scalar> value) {
    names.push_back(std::move(name));
    values.push_back(std::move(value));
  }
  /// -1 when absent.
  long index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<long>(i);
    return -1;
  }
  const Tensor<Scalar>& at(const std::string& name) const;
  Tensor<Scalar>& at(const std::string& name);

  bool operator==(const NamedTensors&) const = default;
};

/// Learnable parameters plus batch-norm running statistics of one network.
/// Buffers hold (running_mean, running_var) per BN layer, in layer order, and
/// never receive gradient updates.
template <typename Scalar>
struct NetworkParams {
  ArchSpec spec;
  NamedTensors<Scalar> params;
  NamedTensors<Scalar> buffers;

  std::size_t num_bn_layers() const { return buffers.size() / 2; }

  template <typename Other>
  NetworkParams<Other> cast() const {
    NetworkParams<Other> out;
    out.spec = spec;
    for (std::size_t i = 0; i < params.size(); ++i) out.params.add(params.names[i], params.values[i].template cast<Other>());
    for (std::size_t i = 0; i < buffers.size(); ++i)
      out.buffers.add(buffers.names[i], buffers.values[i].template cast<Other>());
    return out;
  }

  bool operator==(const NetworkParams&) const = default;
};

enum class BnMode { kBatchStats, kRunningStats };

template <typename Scalar>
struct ForwardTrace {
  ad::Var<Scalar> logits;     // [B, num_classes]
  ad::Var<Scalar> embedding;  // [B, feature_dim]
  std::vector<ad::Var<Scalar>> bn_means;
  std::vector<ad::Var<Scalar>> bn_variances;
};

/// Deterministic in (spec, seed). BN running buffers start at mean 0, variance 1.
template <typename Scalar>
NetworkParams<Scalar> build_network(const ArchSpec& spec, std::uint64_t seed);

/// Parameters of `net` as tape leaves, aligned with net.params.
template <typename Scalar>
std::vector<ad::Var<Scalar>> param_vars(const NetworkParams<Scalar>& net, bool requires_grad);

/// Forward pass with explicit parameter values (e.g. inner-loop adapted ones)
/// aligned with net.params; net supplies the architecture and BN buffers.
template <typename Scalar>
ForwardTrace<Scalar> forward(const NetworkParams<Scalar>& net, const std::vector<ad::Var<Scalar>>& params,
                             const ad::Var<Scalar>& images, BnMode mode);

template <typename Scalar>
ForwardTrace<Scalar> forward(const NetworkParams<Scalar>& net, const Tensor<Scalar>& images, BnMode mode);

/// Exponential moving average of the BN buffers towards the traced batch statistics.
template <typename Scalar>
void update_running_stats(NetworkParams<Scalar>& net, const std::vector<Tensor<Scalar>>& batch_means,
                          const std::vector<Tensor<Scalar>>& batch_variances, Scalar momentum = Scalar(0.1));

inline bool is_head_param(const std::string& name) { return name.rfind("head.", 0) == 0; }

/// FNV-1a over the spec, every parameter and every buffer.
template <typename Scalar>
std::uint64_t checksum(const NetworkParams<Scalar>& net);

}  // namespace purer
