#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "adapt/dropping.hpp"
#include "adapt/model.hpp"
#include "adapt/tensor.hpp"

namespace adapt {

using flops_t = unsigned long long;

// Architecture constants the analytic count depends on. Conventions are the
// ones in flop_cost: matmul m*k*n costs 2mkn, softmax 5/element, layer or
// group norm 8/element (affine included), activations 4/element; everything
// else (adds, elementwise products, reductions, gathers, neighbor search)
// bills zero. The tape instrumentation uses the same table, so analytic and
// instrumented counts must agree exactly.
struct CostModel {
  size_t d_model = 256;
  size_t n_heads = 4;
  size_t mlp_ratio = 2;
  size_t n_blocks = 8;
  std::vector<size_t> placement;  // block index each predictor runs before
  size_t in_features = 3;
  size_t knn_k = 32;
  size_t arpe_hidden = 128;
  size_t num_classes = 6;

  static CostModel from_model(const ModelConfig& m) {
    CostModel c;
    c.d_model = m.d_model;
    c.n_heads = m.n_heads;
    c.mlp_ratio = m.mlp_ratio;
    c.n_blocks = m.n_blocks;
    c.placement = predictor_placement(m.n_blocks, m.ell);
    c.in_features = m.in_features;
    c.knn_k = m.knn_k;
    c.arpe_hidden = m.arpe_hidden_or_default();
    c.num_classes = m.num_classes;
    return c;
  }
};

struct BlockFlopsBreakdown {
  flops_t projections = 0;  // Q/K/V/Out: 8 n D^2
  flops_t attention = 0;    // QK^T and AV over heads: 4 n^2 D
  flops_t softmax = 0;      // 5 H n^2
  flops_t mlp = 0;          // 4 r n D^2
  flops_t norms = 0;        // two layer norms: 16 n D
  flops_t activations = 0;  // GELU on (n, rD): 4 r n D

  flops_t total() const {
    return projections + attention + softmax + mlp + norms + activations;
  }
};

inline BlockFlopsBreakdown block_flops_breakdown(size_t n, const CostModel& cm) {
  const flops_t D = cm.d_model, H = cm.n_heads, r = cm.mlp_ratio, N = n;
  const flops_t dh = D / H;
  BlockFlopsBreakdown b;
  b.projections = 4 * flop_cost::matmul(N, D, D);
  b.attention = H * (flop_cost::matmul(N, dh, N) + flop_cost::matmul(N, N, dh));
  b.softmax = flop_cost::kSoftmaxPerElem * H * N * N;
  b.mlp = flop_cost::matmul(N, D, r * D) + flop_cost::matmul(N, r * D, D);
  b.norms = 2 * flop_cost::kNormPerElem * N * D;
  b.activations = flop_cost::kActivationPerElem * N * r * D;
  return b;
}

// One transformer block on n live tokens.
inline flops_t block_flops(size_t n, const CostModel& cm) {
  if (n < 1) throw std::invalid_argument("block_flops: n must be >= 1");
  return block_flops_breakdown(n, cm).total();
}

// ARPE on n points: the per-neighbor MLP h over n*k gathered rows, max-pool
// (unbilled), then gamma.
inline flops_t arpe_flops(size_t n, const CostModel& cm) {
  const flops_t rows = flops_t(n) * cm.knn_k;
  const flops_t f2 = 2 * cm.in_features, fh = cm.arpe_hidden, D = cm.d_model;
  flops_t h = flop_cost::matmul(rows, f2, fh) +
              (flop_cost::kNormPerElem + flop_cost::kActivationPerElem) * rows * fh +
              flop_cost::matmul(rows, fh, fh);
  flops_t gamma = flop_cost::matmul(n, fh, D) +
                  (flop_cost::kNormPerElem + flop_cost::kActivationPerElem) * flops_t(n) * D +
                  flop_cost::matmul(n, D, D);
  return h + gamma;
}

// One drop predictor on n live tokens, including the keep-probability softmax.
inline flops_t predictor_flops(size_t n, const CostModel& cm) {
  const flops_t D = cm.d_model, fp = D / 2;
  return flop_cost::matmul(n, D, fp) + flop_cost::matmul(n, D, fp) +
         flop_cost::matmul(n, 2 * fp, 2) + flop_cost::kSoftmaxPerElem * 2 * flops_t(n);
}

// Classification head on the pooled token (token count independent).
inline flops_t head_flops(const CostModel& cm) {
  const flops_t D = cm.d_model;
  return flop_cost::matmul(1, D, D) + flop_cost::kActivationPerElem * D +
         flop_cost::matmul(1, D, cm.num_classes);
}

// Per-layer multiply-add counts for an inference pass under a deterministic
// token-count trajectory.
struct FlopsReport {
  size_t n_initial = 0;
  size_t budget = 0;
  std::vector<size_t> tokens_per_block;  // live count each block runs on
  std::vector<flops_t> per_block;
  flops_t embedding = 0;
  flops_t predictors = 0;
  flops_t head = 0;
  flops_t total = 0;  // exact sum of the parts
};

inline FlopsReport trajectory_flops(size_t n_initial, const DropSchedule& sched, size_t budget,
                                    const CostModel& cm) {
  const auto& targets = sched.row(budget);
  if (sched.placement.size() != sched.ell)
    throw std::invalid_argument("trajectory_flops: schedule has no placement");
  FlopsReport rep;
  rep.n_initial = n_initial;
  rep.budget = budget;
  rep.embedding = arpe_flops(n_initial, cm);

  size_t live = n_initial;
  size_t slot = 0;
  for (size_t l = 0; l < cm.n_blocks; ++l) {
    if (slot < sched.ell && sched.placement[slot] == l) {
      rep.predictors += predictor_flops(live, cm);
      live = kept_count_for_target(targets[slot], n_initial);
      ++slot;
    }
    rep.tokens_per_block.push_back(live);
    rep.per_block.push_back(block_flops(live, cm));
  }
  rep.head = head_flops(cm);

  rep.total = rep.embedding + rep.predictors + rep.head;
  for (flops_t f : rep.per_block) rep.total += f;
  return rep;
}

inline void write_flops_csv_header(std::ostream& os) {
  os << "n_initial,budget,token_trajectory,per_block_flops,embedding_flops,"
        "predictor_flops,head_flops,total_flops\n";
}

inline void write_flops_csv_row(std::ostream& os, const FlopsReport& r) {
  os << r.n_initial << ',' << r.budget << ',';
  for (size_t i = 0; i < r.tokens_per_block.size(); ++i)
    os << (i ? "|" : "") << r.tokens_per_block[i];
  os << ',';
  for (size_t i = 0; i < r.per_block.size(); ++i) os << (i ? "|" : "") << r.per_block[i];
  os << ',' << r.embedding << ',' << r.predictors << ',' << r.head << ',' << r.total << '\n';
}

}  // namespace adapt
