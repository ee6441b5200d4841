#pragma once

#include "purer/errors.hpp"
#include "purer/tensor.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace purer {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments for a list of tensors, plus the shared step counter.
template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> m;
  std::vector<Tensor<Scalar>> v;
  long step = 0;

  static AdamState zeros_like(const std::vector<const Tensor<Scalar>*>& params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.push_back(Tensor<Scalar>::zeros(p->shape));
      s.v.push_back(Tensor<Scalar>::zeros(p->shape));
    }
    return s;
  }

  bool operator==(const AdamState&) const = default;
};

/// Throws NumericError naming `what` if any entry is NaN or infinite.
template <typename Scalar>
void require_finite(const Tensor<Scalar>& t, const std::string& what) {
  if (!t.data.allFinite()) throw NumericError("non-finite values in " + what);
}

/// One bias-corrected Adam step applied in place.
template <typename Scalar>
void adam_step(const std::vector<Tensor<Scalar>*>& params, const std::vector<Tensor<Scalar>>& grads,
               AdamState<Scalar>& state, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw InternalError("adam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape != params[i]->shape) throw InputError("adam_step: gradient shape mismatch");
    require_finite(grads[i], "gradient");
  }
  ++state.step;
  const auto b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const auto lr = static_cast<Scalar>(cfg.lr), eps = static_cast<Scalar>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = grads[i].data.array();
    auto m = state.m[i].data.array();
    auto v = state.v[i].data.array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    params[i]->data.array() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

}  // namespace purer
