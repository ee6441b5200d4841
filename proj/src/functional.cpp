#include "purer/functional.hpp"

#include "purer/errors.hpp"

namespace purer::ad {

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  return matmul(x, weight) + expand_axis(bias, 0, x.shape()[0]);
}

template <typename Scalar>
Var<Scalar> channel_mean(const Var<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw InputError("channel_mean: expects [B, C, H, W]");
  auto flat = reshape(x, {s[0], s[1], s[2] * s[3]});
  auto per_channel = sum_axis(sum_axis(flat, 2), 0);
  return scale(per_channel, Scalar(1) / static_cast<Scalar>(s[0] * s[2] * s[3]));
}

template <typename Scalar>
Var<Scalar> channel_expand(const Var<Scalar>& v, const Shape& like) {
  auto rows = expand_axis(expand_axis(v, 1, like[2] * like[3]), 0, like[0]);
  return reshape(rows, like);
}

template <typename Scalar>
BatchNormResult<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                                   std::type_identity_t<const Tensor<Scalar>*> running_mean,
                                   std::type_identity_t<const Tensor<Scalar>*> running_variance,
                                   std::type_identity_t<Scalar> eps) {
  const Shape& s = x.shape();
  auto mu = channel_mean(x);
  auto centered = x - channel_expand(mu, s);
  auto var = channel_mean(centered * centered);

  Var<Scalar> normalized;
  if (running_mean != nullptr && running_variance != nullptr) {
    auto rm = Var<Scalar>::constant(*running_mean);
    Tensor<Scalar> inv_std(running_variance->shape,
                           (running_variance->data.array() + eps).rsqrt().matrix());
    normalized = (x - channel_expand(rm, s)) * channel_expand(Var<Scalar>::constant(std::move(inv_std)), s);
  } else {
    normalized = centered * channel_expand(pow(add_scalar(var, eps), Scalar(-0.5)), s);
  }
  auto out = normalized * channel_expand(gamma, s) + channel_expand(beta, s);
  return {out, mu, var};
}

template <typename Scalar>
Var<Scalar> log_softmax(const Var<Scalar>& logits) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw InputError("log_softmax: expects [B, N]");
  // Shifting by a constant row max leaves value and gradient unchanged.
  Tensor<Scalar> row_max({s[0]});
  for (Index b = 0; b < s[0]; ++b) row_max[b] = logits.value().data.segment(b * s[1], s[1]).maxCoeff();
  auto shifted = logits - expand_axis(Var<Scalar>::constant(std::move(row_max)), 1, s[1]);
  auto lse = log(sum_axis(exp(shifted), 1));
  return shifted - expand_axis(lse, 1, s[1]);
}

template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, const std::vector<int>& labels, Reduction reduction) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || static_cast<Index>(labels.size()) != s[0])
    throw InputError("cross_entropy: labels do not match logits " + shape_str(s));
  auto idx = std::make_shared<std::vector<Index>>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= s[1]) throw InputError("cross_entropy: label out of range");
    (*idx)[i] = static_cast<Index>(i) * s[1] + labels[i];
  }
  auto picked = gather(log_softmax(logits), IndexList(std::move(idx)), {s[0]});
  auto total = neg(sum(picked));
  return reduction == Reduction::kMean ? scale(total, Scalar(1) / static_cast<Scalar>(s[0])) : total;
}

template <typename Scalar>
Var<Scalar> l2_normalize_rows(const Var<Scalar>& x, Scalar eps) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw InputError("l2_normalize_rows: expects [B, F]");
  auto norms = pow(add_scalar(sum_axis(x * x, 1), eps), Scalar(0.5));
  return x / expand_axis(norms, 1, s[1]);
}

template <typename Scalar>
Var<Scalar> select_rows(const Var<Scalar>& x, const std::vector<Index>& rows) {
  const Shape& s = x.shape();
  const Index row = numel(s) / s[0];
  auto idx = std::make_shared<std::vector<Index>>();
  idx->reserve(rows.size() * static_cast<std::size_t>(row));
  for (Index r : rows) {
    if (r < 0 || r >= s[0]) throw InputError("select_rows: row out of range");
    for (Index j = 0; j < row; ++j) idx->push_back(r * row + j);
  }
  Shape out = s;
  out[0] = static_cast<Index>(rows.size());
  return gather(x, IndexList(std::move(idx)), out);
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

#define PURER_INSTANTIATE_FUNCTIONAL(S)                                                                     \
  template Var<S> linear<S>(const Var<S>&, const Var<S>&, const Var<S>&);                                  \
  template Var<S> channel_mean<S>(const Var<S>&);                                                          \
  template Var<S> channel_expand<S>(const Var<S>&, const Shape&);                                          \
  template BatchNormResult<S> batch_norm<S>(const Var<S>&, const Var<S>&, const Var<S>&, const Tensor<S>*, \
                                            const Tensor<S>*, S);                                          \
  template Var<S> log_softmax<S>(const Var<S>&);                                                           \
  template Var<S> cross_entropy<S>(const Var<S>&, const std::vector<int>&, Reduction);                     \
  template Var<S> l2_normalize_rows<S>(const Var<S>&, S);                                                  \
  template Var<S> select_rows<S>(const Var<S>&, const std::vector<Index>&);                                \
  template Var<S> mean<S>(const Var<S>&);

PURER_INSTANTIATE_FUNCTIONAL(float)
PURER_INSTANTIATE_FUNCTIONAL(double)

}  // namespace purer::ad
