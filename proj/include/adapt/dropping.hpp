#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "adapt/embedding.hpp"
#include "adapt/pointcloud.hpp"
#include "adapt/random.hpp"
#include "adapt/tensor.hpp"

namespace adapt {

// ---------------------------------------------------------------------------
// Target schedule
// ---------------------------------------------------------------------------

// Target drop ratios t[b][i] for budgets b = 1..B and predictor slots i = 1..ell,
// plus the block indices hosting the predictors.
struct DropSchedule {
  size_t ell = 4;
  double rho = 0.8;
  size_t budgets = 4;                        // B
  std::vector<std::vector<double>> targets;  // [B][ell], row b-1
  std::vector<size_t> placement;             // block index each predictor runs before

  const std::vector<double>& row(size_t budget) const {
    if (budget < 1 || budget > budgets)
      throw config_error("budget " + std::to_string(budget) + " out of range [1, " +
                         std::to_string(budgets) + "]");
    return targets[budget - 1];
  }
};

// t[b][i] = ((B-b)/(B-1)) * (i/ell) * rho, evaluated exactly (no rounding).
inline DropSchedule drop_targets(size_t ell, double rho, size_t budgets) {
  if (ell < 1) throw config_error("drop_targets: ell must be >= 1");
  if (!(rho >= 0.0) || rho >= 1.0)
    throw config_error("drop_targets: rho must lie in [0, 1), got " + std::to_string(rho));
  if (budgets < 2) throw config_error("drop_targets: need at least 2 budgets");
  DropSchedule s;
  s.ell = ell;
  s.rho = rho;
  s.budgets = budgets;
  s.targets.assign(budgets, std::vector<double>(ell, 0.0));
  for (size_t b = 1; b <= budgets; ++b)
    for (size_t i = 1; i <= ell; ++i)
      s.targets[b - 1][i - 1] = (static_cast<double>(budgets - b) /
                                 static_cast<double>(budgets - 1)) *
                                (static_cast<double>(i) / static_cast<double>(ell)) * rho;
  return s;
}

// Evenly spaced hosting blocks, final predictor before the last block.
// n_blocks=8, ell=4 -> {2, 4, 6, 7}; n_blocks=4, ell=4 -> {0, 1, 2, 3}.
inline std::vector<size_t> predictor_placement(size_t n_blocks, size_t ell) {
  if (ell > n_blocks)
    throw config_error("predictor_placement: " + std::to_string(ell) +
                       " predictors exceed " + std::to_string(n_blocks) + " blocks");
  std::vector<size_t> p(ell);
  for (size_t j = 1; j <= ell; ++j)
    p[j - 1] = std::min(j * n_blocks / ell, n_blocks - 1);
  for (size_t j = ell - 1; j-- > 0;)
    p[j] = std::min(p[j], p[j + 1] - 1);
  return p;
}

inline DropSchedule make_schedule(size_t ell, double rho, size_t budgets, size_t n_blocks) {
  DropSchedule s = drop_targets(ell, rho, budgets);
  s.placement = predictor_placement(n_blocks, ell);
  return s;
}

// Deterministic kept count for a drop target: round((1 - t) * N_initial).
inline size_t kept_count_for_target(double target_t, size_t n_initial) {
  return static_cast<size_t>(std::lround((1.0 - target_t) * static_cast<double>(n_initial)));
}

// ---------------------------------------------------------------------------
// Drop predictor
// ---------------------------------------------------------------------------

// Single linear maps: local D -> F', global D -> F' (mean-aggregated over kept
// tokens), decision 2F' -> 2, with F' = D/2.
template <typename T>
struct DropPredictorParams {
  Tensor<T> local_w, local_b, global_w, global_b, dec_w, dec_b;
  size_t d_model = 0, f_prime = 0;

  void init(RandomSource& rng, size_t d) {
    d_model = d;
    f_prime = d / 2;
    local_w = detail::linear_init<T>(rng, d, f_prime);
    local_b = detail::zeros_param<T>({f_prime});
    global_w = detail::linear_init<T>(rng, d, f_prime);
    global_b = detail::zeros_param<T>({f_prime});
    dec_w = detail::linear_init<T>(rng, 2 * f_prime, 2);
    dec_b = detail::zeros_param<T>({2});
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.emplace_back(prefix + ".local_w", &local_w);
    reg.emplace_back(prefix + ".local_b", &local_b);
    reg.emplace_back(prefix + ".global_w", &global_w);
    reg.emplace_back(prefix + ".global_b", &global_b);
    reg.emplace_back(prefix + ".dec_w", &dec_w);
    reg.emplace_back(prefix + ".dec_b", &dec_b);
  }
};

// B parallel predictor sets sharing one backbone; predictors[b-1][slot].
template <typename T>
struct BudgetBank {
  std::vector<std::vector<DropPredictorParams<T>>> predictors;
  DropSchedule schedule;

  void init(RandomSource& rng, const DropSchedule& sched, size_t d_model) {
    schedule = sched;
    predictors.assign(sched.budgets, {});
    for (auto& bank : predictors) {
      bank.resize(sched.ell);
      for (auto& p : bank) p.init(rng, d_model);
    }
  }

  void collect(ParamRegistry<T>& reg, const std::string& prefix) {
    for (size_t b = 0; b < predictors.size(); ++b)
      for (size_t s = 0; s < predictors[b].size(); ++s)
        predictors[b][s].collect(reg, prefix + ".bank" + std::to_string(b + 1) + ".slot" +
                                          std::to_string(s));
  }
};

// Per-token keep/drop logits: concatenated local features and the broadcast
// masked mean (over kept tokens) of the global features, through the decision map.
template <typename T>
Tensor<T> predict_keep_logits(const Tensor<T>& tokens, const std::vector<uint8_t>& keep_mask,
                              const DropPredictorParams<T>& p) {
  const size_t n = tokens.dim(0);
  std::vector<uint8_t> mask = keep_mask.empty() ? std::vector<uint8_t>(n, 1) : keep_mask;
  Tensor<T> local = add(matmul(tokens, p.local_w), p.local_b);    // (n, F')
  Tensor<T> global = add(matmul(tokens, p.global_w), p.global_b); // (n, F')
  Tensor<T> agg = masked_mean(global, mask, 0);                   // (F')
  Tensor<T> tiled = repeat_rows(agg, n);                          // (n, F')
  Tensor<T> z = concat<T>({local, tiled}, 1);                     // (n, 2F')
  return add(matmul(z, p.dec_w), p.dec_b);                        // (n, 2)
}

// ---------------------------------------------------------------------------
// Gumbel-Softmax straight-through selection
// ---------------------------------------------------------------------------

// Column 1 = keep, column 0 = drop. hard_mask as stored by the model is the
// running mask (a token dropped once stays dropped); raw argmax results are in
// raw_keep.
template <typename T>
struct DropDecision {
  std::vector<T> keep_probs;        // noise-free pi_{.,1}
  std::vector<uint8_t> raw_keep;    // argmax of the noisy sample, this slot alone
  std::vector<uint8_t> hard_mask;   // running mask after this slot
  Tensor<T> soft_onehot;            // GS soft sample (training only)
  Tensor<T> st_onehot;              // straight-through output (training only)
  Tensor<T> soft_dropped_frac;      // differentiable d_i surrogate (training only)
  double dropped_fraction = 0.0;    // 1 - |kept| / N_initial, from hard_mask
};

// Training-time sampler: soft = softmax((log_softmax(logits) + g) / tau); the
// forward value is the one-hot argmax (ties to drop) and the gradient flows
// through the soft sample.
template <typename T>
DropDecision<T> gumbel_softmax_st(const Tensor<T>& logits, T tau, const Tensor<T>& noise) {
  if (logits.rank() != 2 || logits.dim(1) != 2)
    throw std::invalid_argument("gumbel_softmax_st: expected (n, 2) logits, got " +
                                shape_to_string(logits.shape()));
  if (!(tau > T(0))) throw std::invalid_argument("gumbel_softmax_st: tau must be positive");
  if (noise.shape() != logits.shape())
    detail::shape_error("gumbel_softmax_st", logits.shape(), noise.shape());
  const size_t n = logits.dim(0);

  DropDecision<T> dec;
  dec.keep_probs.resize(n);
  {
    const T* lp = logits.values().data();
    for (size_t i = 0; i < n; ++i) {
      const T mx = std::max(lp[2 * i], lp[2 * i + 1]);
      const T e0 = std::exp(lp[2 * i] - mx), e1 = std::exp(lp[2 * i + 1] - mx);
      dec.keep_probs[i] = e1 / (e0 + e1);
    }
  }

  Tensor<T> perturbed = scalar_mul(add(log_softmax(logits), noise), T(1) / tau);
  dec.soft_onehot = softmax(perturbed);

  std::vector<T> hard(2 * n, T(0));
  dec.raw_keep.resize(n);
  const T* soft = dec.soft_onehot.values().data();
  for (size_t i = 0; i < n; ++i) {
    const bool keep = soft[2 * i + 1] > soft[2 * i];  // tie -> drop (index 0)
    dec.raw_keep[i] = keep ? 1 : 0;
    hard[2 * i + (keep ? 1 : 0)] = T(1);
  }
  dec.st_onehot = straight_through(dec.soft_onehot, std::move(hard));
  return dec;
}

template <typename T>
DropDecision<T> gumbel_softmax_st(const Tensor<T>& logits, T tau, RandomSource& rng) {
  Tensor<T> noise = gumbel_sample<T>(rng, logits.shape());
  return gumbel_softmax_st(logits, tau, noise);
}

// ---------------------------------------------------------------------------
// Inference-time selection
// ---------------------------------------------------------------------------

// Keeps the round((1-t)*N_initial) currently-alive tokens with the highest keep
// probabilities; ties to the lower token index; dropped tokens stay dropped.
template <typename T>
std::vector<uint8_t> select_inference(const std::vector<T>& keep_probs,
                                      const std::vector<uint8_t>& keep_mask, double target_t,
                                      size_t n_initial) {
  if (keep_probs.size() != keep_mask.size())
    throw std::invalid_argument("select_inference: probs/mask size mismatch");
  std::vector<size_t> alive;
  for (size_t i = 0; i < keep_mask.size(); ++i)
    if (keep_mask[i]) alive.push_back(i);
  const size_t m = kept_count_for_target(target_t, n_initial);
  if (m < 1 || m > alive.size())
    throw std::invalid_argument("select_inference: target keeps " + std::to_string(m) + " of " +
                                std::to_string(alive.size()) + " alive tokens");
  if (m == alive.size()) return keep_mask;

  std::partial_sort(alive.begin(), alive.begin() + m, alive.end(), [&](size_t a, size_t b) {
    if (keep_probs[a] != keep_probs[b]) return keep_probs[a] > keep_probs[b];
    return a < b;
  });
  std::vector<uint8_t> out(keep_mask.size(), 0);
  for (size_t i = 0; i < m; ++i) out[alive[i]] = 1;
  return out;
}

enum class SamplerKind { kAdaptive, kRandom, kFarthestPoint };

inline SamplerKind sampler_from_string(const std::string& s) {
  if (s == "adaptive") return SamplerKind::kAdaptive;
  if (s == "random") return SamplerKind::kRandom;
  if (s == "fps") return SamplerKind::kFarthestPoint;
  throw config_error("unknown sampler '" + s + "' (expected adaptive, random, or fps)");
}

// Non-learned selection baselines under the same kept-count contract.
// `positions` are the original xyz coordinates of all tokens (3 per token).
inline std::vector<uint8_t> ablation_select(SamplerKind strategy,
                                            const std::vector<uint8_t>& keep_mask,
                                            double target_t, size_t n_initial,
                                            const std::vector<float>& positions,
                                            RandomSource& rng) {
  std::vector<size_t> alive;
  for (size_t i = 0; i < keep_mask.size(); ++i)
    if (keep_mask[i]) alive.push_back(i);
  const size_t m = kept_count_for_target(target_t, n_initial);
  if (m < 1 || m > alive.size())
    throw std::invalid_argument("ablation_select: target keeps " + std::to_string(m) + " of " +
                                std::to_string(alive.size()) + " alive tokens");
  if (m == alive.size()) return keep_mask;

  std::vector<uint8_t> out(keep_mask.size(), 0);
  if (strategy == SamplerKind::kRandom) {
    for (size_t i = 0; i < m; ++i) std::swap(alive[i], alive[i + rng.index(alive.size() - i)]);
    for (size_t i = 0; i < m; ++i) out[alive[i]] = 1;
    return out;
  }
  if (strategy == SamplerKind::kFarthestPoint) {
    std::vector<float> sub(alive.size() * 3);
    for (size_t i = 0; i < alive.size(); ++i)
      std::copy(positions.begin() + 3 * alive[i], positions.begin() + 3 * alive[i] + 3,
                sub.begin() + 3 * i);
    auto picks = farthest_point_indices(sub, alive.size(), 3, m, 0);
    for (size_t p : picks) out[alive[p]] = 1;
    return out;
  }
  throw std::invalid_argument("ablation_select: adaptive strategy uses select_inference");
}

// ---------------------------------------------------------------------------
// Drop regularization
// ---------------------------------------------------------------------------

// Mean over predictor slots of (d_i - t_i)^2, with the differentiable soft d_i
// tensors produced during the forward pass.
template <typename T>
Tensor<T> drop_loss(const std::vector<Tensor<T>>& soft_dropped, const std::vector<double>& targets) {
  if (soft_dropped.size() != targets.size())
    throw std::invalid_argument("drop_loss: " + std::to_string(soft_dropped.size()) +
                                " decisions vs " + std::to_string(targets.size()) + " targets");
  Tensor<T> acc;
  for (size_t i = 0; i < soft_dropped.size(); ++i) {
    Tensor<T> e = scalar_add(soft_dropped[i], static_cast<T>(-targets[i]));
    Tensor<T> sq = mul(e, e);
    acc = acc.defined() ? add(acc, sq) : sq;
  }
  return scalar_mul(acc, T(1) / static_cast<T>(soft_dropped.size()));
}

}  // namespace adapt
