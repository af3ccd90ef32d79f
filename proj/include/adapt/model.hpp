#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "adapt/attention.hpp"
#include "adapt/dropping.hpp"
#include "adapt/embedding.hpp"
#include "adapt/pointcloud.hpp"
#include "adapt/random.hpp"
#include "adapt/tensor.hpp"

namespace adapt {

struct ModelConfig {
  size_t d_model = 256;
  size_t n_blocks = 8;
  size_t n_heads = 4;
  size_t mlp_ratio = 2;
  size_t knn_k = 32;
  size_t arpe_hidden = 0;  // 0 -> d_model / 2
  size_t gn_groups = 4;
  size_t in_features = 3;
  size_t num_classes = 6;
  size_t ell = 4;
  double rho = 0.8;
  size_t budgets = 4;

  size_t arpe_hidden_or_default() const { return arpe_hidden ? arpe_hidden : d_model / 2; }

  // Reduced configuration sized so every check runs quickly on a laptop CPU.
  static ModelConfig desk_preset() {
    ModelConfig c;
    c.d_model = 64;
    c.n_blocks = 4;
    c.n_heads = 2;
    return c;
  }

  void validate() const {
    if (d_model == 0 || n_blocks == 0 || n_heads == 0 || mlp_ratio == 0)
      throw config_error("model: dimensions must be positive");
    if (d_model % n_heads != 0)
      throw config_error("model: d_model " + std::to_string(d_model) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
    if (d_model % 2 != 0) throw config_error("model: d_model must be even (F' = d_model/2)");
    if (ell > n_blocks)
      throw config_error("model: ell " + std::to_string(ell) + " exceeds " +
                         std::to_string(n_blocks) + " blocks");
    if (num_classes < 2) throw config_error("model: need at least 2 classes");
  }
};

// All named weight tensors: ARPE MLPs, block weights, B banks of drop
// predictors, head weights.
template <typename T>
struct ModelParams {
  ModelConfig cfg;
  ArpeParams<T> arpe;
  std::vector<BlockParams<T>> blocks;
  BudgetBank<T> bank;
  HeadParams<T> head;

  void init(const ModelConfig& c, RandomSource& rng) {
    c.validate();
    cfg = c;
    arpe.init(rng, c.in_features, c.arpe_hidden_or_default(), c.d_model, c.knn_k, c.gn_groups);
    blocks.resize(c.n_blocks);
    for (auto& b : blocks) b.init(rng, c.d_model, c.n_heads, c.mlp_ratio);
    bank.init(rng, make_schedule(c.ell, c.rho, c.budgets, c.n_blocks), c.d_model);
    head.init(rng, c.d_model, c.num_classes);
  }

  ParamRegistry<T> registry() {
    ParamRegistry<T> reg;
    arpe.collect(reg, "arpe");
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(reg, "block" + std::to_string(i));
    bank.collect(reg, "drop");
    head.collect(reg, "head");
    return reg;
  }

  size_t num_params() {
    size_t n = 0;
    for (auto& [name, t] : registry()) n += t->numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : registry()) t->zero_grad();
  }

  const DropSchedule& schedule() const { return bank.schedule; }
};

// Supplies the Gumbel noise for one predictor slot; lets tests pin the noise.
template <typename T>
using NoiseFn = std::function<Tensor<T>(const Shape&)>;

template <typename T>
NoiseFn<T> sampled_noise(RandomSource& rng) {
  return [&rng](const Shape& s) { return gumbel_sample<T>(rng, s); };
}

template <typename T>
struct TrainForward {
  Tensor<T> logits;                     // (num_classes)
  std::vector<DropDecision<T>> decisions;
};

// Training-mode forward on one cloud: tokens are masked in the attention, not
// removed; each predictor's decision is ANDed into the running mask so a
// dropped token stays dropped. Masked rows are zeroed after each update so
// their values stay bounded; nothing downstream reads them.
template <typename T>
TrainForward<T> forward_train(ModelParams<T>& params, const PointCloud& pc, size_t budget,
                              T tau, const NoiseFn<T>& noise) {
  const DropSchedule& sched = params.schedule();
  sched.row(budget);  // validates the budget index
  const auto& slots = params.bank.predictors[budget - 1];
  const size_t n = pc.n;

  Tensor<T> tokens = arpe_embed(pc, params.arpe);
  std::vector<uint8_t> mask(n, 1);

  TrainForward<T> out;
  size_t slot = 0;
  for (size_t l = 0; l < params.blocks.size(); ++l) {
    if (slot < sched.ell && sched.placement[slot] == l) {
      Tensor<T> logits = predict_keep_logits(tokens, mask, slots[slot]);
      DropDecision<T> dec = gumbel_softmax_st(logits, tau, noise(logits.shape()));

      // Soft surrogate for the dropped fraction: tokens already dropped
      // contribute zero keep mass.
      std::vector<T> prev_alive(n);
      for (size_t i = 0; i < n; ++i) prev_alive[i] = mask[i] ? T(1) : T(0);
      Tensor<T> soft_keep = reshape(slice_last(dec.soft_onehot, 1, 2), {n});
      Tensor<T> kept_mass =
          mean_over_axis(mul(soft_keep, Tensor<T>::from_values({n}, std::move(prev_alive))), 0);
      dec.soft_dropped_frac = scalar_add(scalar_mul(kept_mass, T(-1)), T(1));

      for (size_t i = 0; i < n; ++i) mask[i] = mask[i] && dec.raw_keep[i] ? 1 : 0;
      if (std::find(mask.begin(), mask.end(), uint8_t(1)) == mask.end()) {
        // Keep-mask must never be all-false: retain the most keep-worthy token.
        size_t best = 0;
        for (size_t i = 1; i < n; ++i)
          if (dec.keep_probs[i] > dec.keep_probs[best]) best = i;
        mask[best] = 1;
      }
      dec.hard_mask = mask;
      size_t kept = 0;
      for (uint8_t m : mask) kept += m;
      dec.dropped_fraction = 1.0 - static_cast<double>(kept) / static_cast<double>(n);
      out.decisions.push_back(std::move(dec));

      std::vector<T> maskvals(n);
      for (size_t i = 0; i < n; ++i) maskvals[i] = mask[i] ? T(1) : T(0);
      tokens = mul(tokens, Tensor<T>::from_values({n, size_t(1)}, std::move(maskvals)));
      ++slot;
    }
    tokens = block_forward_single(tokens, mask, params.blocks[l]);
  }
  out.logits = classify_single(tokens, mask, params.head);
  return out;
}

template <typename T>
struct InferForward {
  std::vector<T> logits;
  std::vector<size_t> kept_counts;  // live tokens after each predictor slot
  int predicted = -1;
};

// Inference forward on one cloud: deterministic selection, dropped tokens
// physically removed before the hosting block. `rng` is consulted only by the
// random ablation sampler.
template <typename T>
InferForward<T> forward_infer(ModelParams<T>& params, const PointCloud& pc, size_t budget,
                              SamplerKind sampler = SamplerKind::kAdaptive,
                              RandomSource* rng = nullptr) {
  NoGradScope no_grad;
  const DropSchedule& sched = params.schedule();
  const auto& targets = sched.row(budget);
  const auto& slots = params.bank.predictors[budget - 1];
  const size_t n_initial = pc.n;

  Tensor<T> tokens = arpe_embed(pc, params.arpe);
  std::vector<size_t> live(n_initial);
  std::iota(live.begin(), live.end(), 0);
  std::vector<uint8_t> mask(n_initial, 1);

  std::vector<float> xyz;  // packed positions for the FPS sampler
  if (sampler == SamplerKind::kFarthestPoint) {
    xyz.resize(3 * n_initial);
    for (size_t i = 0; i < n_initial; ++i)
      std::copy(pc.row(i), pc.row(i) + 3, xyz.begin() + 3 * i);
  }

  InferForward<T> out;
  size_t slot = 0;
  for (size_t l = 0; l < params.blocks.size(); ++l) {
    if (slot < sched.ell && sched.placement[slot] == l) {
      Tensor<T> logits = predict_keep_logits(tokens, {}, slots[slot]);
      Tensor<T> probs = softmax(logits);

      std::vector<T> full_probs(n_initial, T(0));
      for (size_t i = 0; i < live.size(); ++i)
        full_probs[live[i]] = probs.values()[2 * i + 1];

      std::vector<uint8_t> new_mask;
      if (sampler == SamplerKind::kAdaptive) {
        new_mask = select_inference(full_probs, mask, targets[slot], n_initial);
      } else {
        if (sampler == SamplerKind::kRandom && rng == nullptr)
          throw std::invalid_argument("forward_infer: random sampler needs an rng");
        RandomSource dummy(0);
        new_mask = ablation_select(sampler, mask, targets[slot], n_initial, xyz,
                                   rng ? *rng : dummy);
      }

      std::vector<size_t> keep_rel;
      std::vector<size_t> new_live;
      for (size_t i = 0; i < live.size(); ++i) {
        if (new_mask[live[i]]) {
          keep_rel.push_back(i);
          new_live.push_back(live[i]);
        }
      }
      tokens = gather_rows(tokens, std::move(keep_rel));
      live = std::move(new_live);
      mask = std::move(new_mask);
      out.kept_counts.push_back(live.size());
      ++slot;
    }
    tokens = block_forward_single(tokens, {}, params.blocks[l]);
  }
  Tensor<T> logits = classify_single(tokens, {}, params.head);
  out.logits = logits.values();
  out.predicted = static_cast<int>(
      std::max_element(out.logits.begin(), out.logits.end()) - out.logits.begin());
  return out;
}

}  // namespace adapt
