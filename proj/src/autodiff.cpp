#include "purer/autodiff.hpp"

#include "purer/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace purer {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace ad {
namespace {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapMat = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstMapMat = Eigen::Map<const RowMat<Scalar>>;

template <typename Scalar>
Var<Scalar> make(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs, const char* op,
                 typename Node<Scalar>::BackwardFn backward) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->op = op;
  if (grad_mode_enabled()) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var<Scalar>& v) { return v.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (const auto& v : inputs) n->parents.push_back(v.node());
      n->backward = std::move(backward);
    }
  }
  return Var<Scalar>(std::move(n));
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape())
    throw InputError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

struct AxisSplit {
  Index outer, n, inner;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  if (axis < 0 || axis >= static_cast<Index>(shape.size())) throw InputError("axis out of range for " + shape_str(shape));
  AxisSplit s{1, shape[axis], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[i];
  return s;
}

// cols[(c*k + a)*k + b, y*W + x] = x[c, y + a - p, x + b - p] (zero outside)
template <typename Scalar>
void im2col(const Scalar* img, Index channels, Index height, Index width, Index k, Scalar* cols) {
  const Index pad = k / 2;
  const Index hw = height * width;
  for (Index c = 0; c < channels; ++c) {
    for (Index a = 0; a < k; ++a) {
      for (Index b = 0; b < k; ++b) {
        Scalar* row = cols + ((c * k + a) * k + b) * hw;
        for (Index y = 0; y < height; ++y) {
          const Index sy = y + a - pad;
          Scalar* out = row + y * width;
          if (sy < 0 || sy >= height) {
            std::fill(out, out + width, Scalar(0));
            continue;
          }
          const Scalar* src = img + (c * height + sy) * width;
          for (Index x = 0; x < width; ++x) {
            const Index sx = x + b - pad;
            out[x] = (sx < 0 || sx >= width) ? Scalar(0) : src[sx];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
std::vector<Var<Scalar>> grad(const Var<Scalar>& output, const std::vector<Var<Scalar>>& inputs, bool create_graph) {
  using N = Node<Scalar>;
  if (!output.defined() || output.size() != 1) throw InputError("grad: output must be a single-element tensor");

  std::unordered_set<const N*> targets;
  for (const auto& v : inputs) targets.insert(v.node().get());

  // Post-order over the tape (parents first), remembering which nodes lead to a target.
  std::unordered_map<const N*, bool> reaches;
  std::vector<N*> order;
  if (output.requires_grad() || targets.count(output.node().get())) {
    std::vector<std::pair<N*, std::size_t>> stack;
    stack.emplace_back(output.node().get(), 0);
    reaches[output.node().get()] = false;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        N* parent = node->parents[next++].get();
        if (parent->requires_grad && !reaches.count(parent)) {
          reaches[parent] = false;
          stack.emplace_back(parent, 0);
        }
        continue;
      }
      bool r = targets.count(node) > 0;
      for (const auto& p : node->parents)
        if (p->requires_grad && reaches[p.get()]) r = true;
      reaches[node] = r;
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const N*, Var<Scalar>> grads;
  GradModeGuard mode(create_graph);
  grads[output.node().get()] = Var<Scalar>::constant(Tensor<Scalar>::constant(output.shape(), Scalar(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* node = *it;
    if (!reaches[node] || !node->backward) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    const Var<Scalar> g = found->second;
    if (!targets.count(node)) grads.erase(found);

    std::vector<bool> need(node->parents.size());
    for (std::size_t i = 0; i < need.size(); ++i)
      need[i] = node->parents[i]->requires_grad && reaches[node->parents[i].get()];
    auto parent_grads = node->backward(g, need);
    for (std::size_t i = 0; i < need.size(); ++i) {
      if (!need[i] || !parent_grads[i].defined()) continue;
      const N* p = node->parents[i].get();
      auto slot = grads.find(p);
      if (slot == grads.end())
        grads.emplace(p, parent_grads[i]);
      else
        slot->second = add(slot->second, parent_grads[i]);
    }
  }

  std::vector<Var<Scalar>> result;
  result.reserve(inputs.size());
  for (const auto& v : inputs) {
    auto found = grads.find(v.node().get());
    if (found != grads.end())
      result.push_back(found->second);
    else
      result.push_back(Var<Scalar>::constant(Tensor<Scalar>::zeros(v.shape())));
  }
  return result;
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "add");
  return make<Scalar>(Tensor<Scalar>(a.shape(), a.value().data + b.value().data), {a, b}, "add",
                      [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{g, g}; });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "sub");
  return make<Scalar>(Tensor<Scalar>(a.shape(), a.value().data - b.value().data), {a, b}, "sub",
                      [](const Var<Scalar>& g, const std::vector<bool>& need) {
                        return std::vector<Var<Scalar>>{g, need[1] ? neg(g) : Var<Scalar>()};
                      });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "mul");
  return make<Scalar>(Tensor<Scalar>(a.shape(), a.value().data.cwiseProduct(b.value().data)), {a, b}, "mul",
                      [a, b](const Var<Scalar>& g, const std::vector<bool>& need) {
                        return std::vector<Var<Scalar>>{need[0] ? mul(g, b) : Var<Scalar>(),
                                                        need[1] ? mul(g, a) : Var<Scalar>()};
                      });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a, b, "div");
  return make<Scalar>(Tensor<Scalar>(a.shape(), a.value().data.cwiseQuotient(b.value().data)), {a, b}, "div",
                      [a, b](const Var<Scalar>& g, const std::vector<bool>& need) {
                        return std::vector<Var<Scalar>>{need[0] ? div(g, b) : Var<Scalar>(),
                                                        need[1] ? neg(div(mul(g, a), mul(b, b))) : Var<Scalar>()};
                      });
}

template <typename Scalar>
Var<Scalar> neg(const Var<Scalar>& a) {
  return make<Scalar>(Tensor<Scalar>(a.shape(), -a.value().data), {a}, "neg",
                      [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{neg(g)}; });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return make<Scalar>(Tensor<Scalar>(a.shape(), a.value().data * s), {a}, "scale",
                      [s](const Var<Scalar>& g, const std::vector<bool>&) {
                        return std::vector<Var<Scalar>>{scale(g, s)};
                      });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  return make<Scalar>(Tensor<Scalar>(a.shape(), (a.value().data.array() + s).matrix()), {a}, "add_scalar",
                      [](const Var<Scalar>& g, const std::vector<bool>&) { return std::vector<Var<Scalar>>{g}; });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  return make<Scalar>(Tensor<Scalar>(a.shape(), a.value().data.array().exp().matrix()), {a}, "exp",
                      [a](const Var<Scalar>& g, const std::vector<bool>&) {
                        return std::vector<Var<Scalar>>{mul(g, exp(a))};
                      });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  return make<Scalar>(Tensor<Scalar>(a.shape(), a.value().data.array().log().matrix()), {a}, "log",
                      [a](const Var<Scalar>& g, const std::vector<bool>&) {
                        return std::vector<Var<Scalar>>{div(g, a)};
                      });
}

template <typename Scalar>
Var<Scalar> pow(const Var<Scalar>& a, Scalar p) {
  return make<Scalar>(Tensor<Scalar>(a.shape(), a.value().data.array().pow(p).matrix()), {a}, "pow",
                      [a, p](const Var<Scalar>& g, const std::vector<bool>&) {
                        return std::vector<Var<Scalar>>{mul(g, scale(pow(a, p - Scalar(1)), p))};
                      });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  const auto& x = a.value().data;
  Tensor<Scalar> mask(a.shape(), (x.array() > Scalar(0)).template cast<Scalar>().matrix());
  Tensor<Scalar> out(a.shape(), x.cwiseProduct(mask.data));
  auto mask_var = Var<Scalar>::constant(std::move(mask));
  return make<Scalar>(std::move(out), {a}, "relu", [mask_var](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{mul(g, mask_var)};
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Shape in_shape = a.shape();
  return make<Scalar>(Tensor<Scalar>::scalar(a.value().data.sum()), {a}, "sum",
                      [in_shape](const Var<Scalar>& g, const std::vector<bool>&) {
                        return std::vector<Var<Scalar>>{fill(g, in_shape)};
                      });
}

template <typename Scalar>
Var<Scalar> fill(const Var<Scalar>& a, const Shape& shape) {
  if (a.size() != 1) throw InputError("fill: source must have one element");
  Shape in_shape = a.shape();
  return make<Scalar>(Tensor<Scalar>::constant(shape, a.item()), {a}, "fill",
                      [in_shape](const Var<Scalar>& g, const std::vector<bool>&) {
                        return std::vector<Var<Scalar>>{reshape(sum(g), in_shape)};
                      });
}

template <typename Scalar>
Var<Scalar> sum_axis(const Var<Scalar>& a, Index axis) {
  const AxisSplit s = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + axis);
  Tensor<Scalar> out(out_shape);
  const Scalar* src = a.value().data.data();
  for (Index o = 0; o < s.outer; ++o) {
    ConstMapMat<Scalar> block(src + o * s.n * s.inner, s.n, s.inner);
    out.data.segment(o * s.inner, s.inner) = block.colwise().sum().transpose();
  }
  const Index n = s.n;
  return make<Scalar>(std::move(out), {a}, "sum_axis", [axis, n](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{expand_axis(g, axis, n)};
  });
}

template <typename Scalar>
Var<Scalar> expand_axis(const Var<Scalar>& a, Index axis, Index n) {
  Shape out_shape = a.shape();
  if (axis < 0 || axis > static_cast<Index>(out_shape.size())) throw InputError("expand_axis: axis out of range");
  out_shape.insert(out_shape.begin() + axis, n);
  const AxisSplit s = split_at(out_shape, axis);
  Tensor<Scalar> out(out_shape);
  const auto& src = a.value().data;
  for (Index o = 0; o < s.outer; ++o)
    for (Index j = 0; j < n; ++j) out.data.segment((o * n + j) * s.inner, s.inner) = src.segment(o * s.inner, s.inner);
  return make<Scalar>(std::move(out), {a}, "expand_axis", [axis](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{sum_axis(g, axis)};
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, const Shape& shape) {
  if (numel(shape) != a.size())
    throw InputError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  Shape in_shape = a.shape();
  return make<Scalar>(Tensor<Scalar>(shape, a.value().data), {a}, "reshape",
                      [in_shape](const Var<Scalar>& g, const std::vector<bool>&) {
                        return std::vector<Var<Scalar>>{reshape(g, in_shape)};
                      });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0])
    throw InputError("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<Scalar> out({m, n});
  MapMat<Scalar>(out.data.data(), m, n).noalias() =
      ConstMapMat<Scalar>(a.value().data.data(), m, k) * ConstMapMat<Scalar>(b.value().data.data(), k, n);
  return make<Scalar>(std::move(out), {a, b}, "matmul", [a, b](const Var<Scalar>& g, const std::vector<bool>& need) {
    return std::vector<Var<Scalar>>{need[0] ? matmul(g, transpose(b)) : Var<Scalar>(),
                                    need[1] ? matmul(transpose(a), g) : Var<Scalar>()};
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  if (a.value().rank() != 2) throw InputError("transpose: expects a matrix");
  const Index m = a.shape()[0], n = a.shape()[1];
  Tensor<Scalar> out({n, m});
  MapMat<Scalar>(out.data.data(), n, m) = ConstMapMat<Scalar>(a.value().data.data(), m, n).transpose();
  return make<Scalar>(std::move(out), {a}, "transpose", [](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{transpose(g)};
  });
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0)
    throw InputError("conv2d: bad shapes " + shape_str(xs) + " * " + shape_str(ws));
  const Index batch = xs[0], cin = xs[1], h = xs[2], wd = xs[3], cout = ws[0], k = ws[2];
  const Index hw = h * wd, patch = cin * k * k;
  Tensor<Scalar> out({batch, cout, h, wd});
  RowMat<Scalar> cols(patch, hw);
  ConstMapMat<Scalar> kernel(w.value().data.data(), cout, patch);
  for (Index b = 0; b < batch; ++b) {
    im2col(x.value().data.data() + b * cin * hw, cin, h, wd, k, cols.data());
    MapMat<Scalar>(out.data.data() + b * cout * hw, cout, hw).noalias() = kernel * cols;
  }
  return make<Scalar>(std::move(out), {x, w}, "conv2d", [x, w, k](const Var<Scalar>& g, const std::vector<bool>& need) {
    return std::vector<Var<Scalar>>{need[0] ? conv2d(g, flip_transpose(w)) : Var<Scalar>(),
                                    need[1] ? conv2d_weight_grad(x, g, k) : Var<Scalar>()};
  });
}

template <typename Scalar>
Var<Scalar> conv2d_weight_grad(const Var<Scalar>& x, const Var<Scalar>& g, Index k) {
  const Shape& xs = x.shape();
  const Shape& gs = g.shape();
  if (xs.size() != 4 || gs.size() != 4 || xs[0] != gs[0] || xs[2] != gs[2] || xs[3] != gs[3])
    throw InputError("conv2d_weight_grad: bad shapes " + shape_str(xs) + ", " + shape_str(gs));
  const Index batch = xs[0], cin = xs[1], h = xs[2], wd = xs[3], cout = gs[1];
  const Index hw = h * wd, patch = cin * k * k;
  Tensor<Scalar> out({cout, cin, k, k});
  MapMat<Scalar> acc(out.data.data(), cout, patch);
  RowMat<Scalar> cols(patch, hw);
  for (Index b = 0; b < batch; ++b) {
    im2col(x.value().data.data() + b * cin * hw, cin, h, wd, k, cols.data());
    acc.noalias() += ConstMapMat<Scalar>(g.value().data.data() + b * cout * hw, cout, hw) * cols.transpose();
  }
  return make<Scalar>(std::move(out), {x, g}, "conv2d_weight_grad",
                      [x, g](const Var<Scalar>& gw, const std::vector<bool>& need) {
                        return std::vector<Var<Scalar>>{need[0] ? conv2d(g, flip_transpose(gw)) : Var<Scalar>(),
                                                        need[1] ? conv2d(x, gw) : Var<Scalar>()};
                      });
}

template <typename Scalar>
Var<Scalar> flip_transpose(const Var<Scalar>& w) {
  const Shape& s = w.shape();
  if (s.size() != 4 || s[2] != s[3]) throw InputError("flip_transpose: expects [O, I, k, k]");
  const Index o = s[0], i = s[1], k = s[2];
  Tensor<Scalar> out({i, o, k, k});
  for (Index a = 0; a < o; ++a)
    for (Index b = 0; b < i; ++b)
      for (Index r = 0; r < k; ++r)
        for (Index c = 0; c < k; ++c) out.data[offset4(out.shape, b, a, k - 1 - r, k - 1 - c)] = w.value().data[offset4(s, a, b, r, c)];
  return make<Scalar>(std::move(out), {w}, "flip_transpose", [](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{flip_transpose(g)};
  });
}

template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& a, IndexList idx, const Shape& shape) {
  if (numel(shape) != static_cast<Index>(idx->size())) throw InputError("gather: index count does not match shape");
  Tensor<Scalar> out(shape);
  const auto& src = a.value().data;
  const Index limit = src.size();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const Index j = (*idx)[i];
    if (j < 0 || j >= limit) throw InputError("gather: index out of range");
    out.data[static_cast<Index>(i)] = src[j];
  }
  Shape in_shape = a.shape();
  return make<Scalar>(std::move(out), {a}, "gather", [idx, in_shape](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{scatter(g, idx, in_shape)};
  });
}

template <typename Scalar>
Var<Scalar> scatter(const Var<Scalar>& a, IndexList idx, const Shape& shape) {
  if (a.size() != static_cast<Index>(idx->size())) throw InputError("scatter: index count does not match source");
  Tensor<Scalar> out(shape);
  const Index limit = out.size();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const Index j = (*idx)[i];
    if (j < 0 || j >= limit) throw InputError("scatter: index out of range");
    out.data[j] += a.value().data[static_cast<Index>(i)];
  }
  Shape in_shape = a.shape();
  return make<Scalar>(std::move(out), {a}, "scatter", [idx, in_shape](const Var<Scalar>& g, const std::vector<bool>&) {
    return std::vector<Var<Scalar>>{gather(g, idx, in_shape)};
  });
}

template <typename Scalar>
Var<Scalar> max_pool2x2(const Var<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw InputError("max_pool2x2: expects [B, C, H, W]");
  const Index h = s[2], w = s[3], ho = (h + 1) / 2, wo = (w + 1) / 2;
  auto idx = std::make_shared<std::vector<Index>>();
  idx->reserve(static_cast<std::size_t>(s[0] * s[1] * ho * wo));
  const auto& v = x.value().data;
  for (Index b = 0; b < s[0]; ++b)
    for (Index c = 0; c < s[1]; ++c)
      for (Index y = 0; y < ho; ++y)
        for (Index xx = 0; xx < wo; ++xx) {
          Index best = offset4(s, b, c, 2 * y, 2 * xx);
          for (Index dy = 0; dy < 2; ++dy)
            for (Index dx = 0; dx < 2; ++dx) {
              const Index yy = 2 * y + dy, xc = 2 * xx + dx;
              if (yy >= h || xc >= w) continue;
              const Index j = offset4(s, b, c, yy, xc);
              if (v[j] > v[best]) best = j;
            }
          idx->push_back(best);
        }
  return gather(x, IndexList(std::move(idx)), {s[0], s[1], ho, wo});
}

#define PURER_INSTANTIATE_AD(S)                                                                  \
  template std::vector<Var<S>> grad<S>(const Var<S>&, const std::vector<Var<S>>&, bool);        \
  template Var<S> add<S>(const Var<S>&, const Var<S>&);                                         \
  template Var<S> sub<S>(const Var<S>&, const Var<S>&);                                         \
  template Var<S> mul<S>(const Var<S>&, const Var<S>&);                                         \
  template Var<S> div<S>(const Var<S>&, const Var<S>&);                                         \
  template Var<S> neg<S>(const Var<S>&);                                                        \
  template Var<S> scale<S>(const Var<S>&, S);                                                   \
  template Var<S> add_scalar<S>(const Var<S>&, S);                                              \
  template Var<S> exp<S>(const Var<S>&);                                                        \
  template Var<S> log<S>(const Var<S>&);                                                        \
  template Var<S> pow<S>(const Var<S>&, S);                                                     \
  template Var<S> relu<S>(const Var<S>&);                                                       \
  template Var<S> sum<S>(const Var<S>&);                                                        \
  template Var<S> sum_axis<S>(const Var<S>&, Index);                                            \
  template Var<S> expand_axis<S>(const Var<S>&, Index, Index);                                  \
  template Var<S> fill<S>(const Var<S>&, const Shape&);                                         \
  template Var<S> reshape<S>(const Var<S>&, const Shape&);                                      \
  template Var<S> matmul<S>(const Var<S>&, const Var<S>&);                                      \
  template Var<S> transpose<S>(const Var<S>&);                                                  \
  template Var<S> conv2d<S>(const Var<S>&, const Var<S>&);                                      \
  template Var<S> conv2d_weight_grad<S>(const Var<S>&, const Var<S>&, Index);                   \
  template Var<S> flip_transpose<S>(const Var<S>&);                                             \
  template Var<S> gather<S>(const Var<S>&, IndexList, const Shape&);                            \
  template Var<S> scatter<S>(const Var<S>&, IndexList, const Shape&);                           \
  template Var<S> max_pool2x2<S>(const Var<S>&);

PURER_INSTANTIATE_AD(float)
PURER_INSTANTIATE_AD(double)

}  // namespace ad
}  // namespace purer
