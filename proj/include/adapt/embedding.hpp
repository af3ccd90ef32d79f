#pragma once

#include <string>
#include <vector>

#include "adapt/pointcloud.hpp"
#include "adapt/random.hpp"
#include "adapt/tensor.hpp"

namespace adapt {

template <typename T>
using ParamRegistry = std::vector<std::pair<std::string, Tensor<T>*>>;

namespace detail {
template <typename T>
Tensor<T> linear_init(RandomSource& rng, size_t in, size_t out) {
  Tensor<T> w = randn_tensor<T>(rng, {in, out}, static_cast<T>(1.0 / std::sqrt(double(in))));
  w.set_requires_grad(true);
  return w;
}

template <typename T>
Tensor<T> zeros_param(Shape s) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> ones_param(Shape s) {
  Tensor<T> t = Tensor<T>::full(std::move(s), T(1));
  t.set_requires_grad(true);
  return t;
}
}  // namespace detail

// Linear -> GroupNorm (affine) -> ELU -> Linear, mapping in_dim to out_dim.
template <typename T>
struct NormMlpParams {
  Tensor<T> w1, b1, gn_scale, gn_shift, w2, b2;
  size_t in_dim = 0, out_dim = 0;
  size_t gn_groups = 4;

  void init(RandomSource& rng, size_t in, size_t out, size_t groups) {
    in_dim = in;
    out_dim = out;
    gn_groups = groups;
    w1 = detail::linear_init<T>(rng, in, out);
    b1 = detail::zeros_param<T>({out});
    gn_scale = detail::ones_param<T>({out});
    gn_shift = detail::zeros_param<T>({out});
    w2 = detail::linear_init<T>(rng, out, out);
    b2 = detail::zeros_param<T>({out});
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.emplace_back(prefix + ".w1", &w1);
    reg.emplace_back(prefix + ".b1", &b1);
    reg.emplace_back(prefix + ".gn_scale", &gn_scale);
    reg.emplace_back(prefix + ".gn_shift", &gn_shift);
    reg.emplace_back(prefix + ".w2", &w2);
    reg.emplace_back(prefix + ".b2", &b2);
  }

  Tensor<T> apply(const Tensor<T>& x) const {
    Tensor<T> h = add(matmul(x, w1), b1);
    h = add(mul(group_norm(h, gn_groups), gn_scale), gn_shift);
    h = elu(h);
    return add(matmul(h, w2), b2);
  }
};

// Tokenizer mapping each point through a per-neighbor MLP h over its k nearest
// neighbors (max-pooled), then an outer MLP gamma. h sees the neighbor's
// absolute coordinates concatenated with its offset from the center point.
template <typename T>
struct ArpeParams {
  NormMlpParams<T> h;      // 2F -> F_h
  NormMlpParams<T> gamma;  // F_h -> D
  size_t k = 32;

  void init(RandomSource& rng, size_t in_features, size_t hidden, size_t d_model,
            size_t neighbors, size_t gn_groups) {
    k = neighbors;
    h.init(rng, 2 * in_features, hidden, gn_groups);
    gamma.init(rng, hidden, d_model, gn_groups);
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    h.collect(reg, prefix + ".h");
    gamma.collect(reg, prefix + ".gamma");
  }
};

// One token per point; permutation-equivariant by construction.
template <typename T>
Tensor<T> arpe_embed(const PointCloud& pc, const ArpeParams<T>& params) {
  const size_t n = pc.n, f = pc.f, k = params.k;
  std::vector<size_t> nbr = knn_indices(pc.points, n, f, k);  // throws if k > n

  std::vector<T> vals(pc.points.begin(), pc.points.end());
  Tensor<T> points = Tensor<T>::from_values({n, f}, std::move(vals));

  std::vector<size_t> centers(n * k);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < k; ++j) centers[i * k + j] = i;

  Tensor<T> abs = gather_rows(points, nbr);               // (n*k, F)
  Tensor<T> ctr = gather_rows(points, std::move(centers));
  Tensor<T> rel = sub(abs, ctr);
  Tensor<T> hin = concat<T>({abs, rel}, 1);               // (n*k, 2F)

  Tensor<T> feat = params.h.apply(hin);                   // (n*k, F_h)
  feat = reshape(feat, {n, k, params.h.out_dim});
  Tensor<T> pooled = max_over_axis(feat, 1);              // (n, F_h)
  return params.gamma.apply(pooled);                      // (n, D)
}

}  // namespace adapt
