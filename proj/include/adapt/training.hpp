#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "adapt/dataset.hpp"
#include "adapt/dropping.hpp"
#include "adapt/model.hpp"
#include "adapt/pointcloud.hpp"
#include "adapt/random.hpp"
#include "adapt/tensor.hpp"

namespace adapt {

struct TrainConfig {
  ModelConfig model;
  double alpha = 2.0;      // drop-loss weight
  double base_lr = 1e-3;
  double tau = 1.0;
  size_t batch_size = 64;
  size_t epochs = 60;
  uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool augment_inputs = true;
  AugmentConfig aug;
  size_t eval_every = 1;       // epochs between evaluations (0 = final only)
  size_t checkpoint_every = 0; // epochs between checkpoints (0 = final only)

  void validate() const {
    model.validate();
    if (alpha < 0.0) throw config_error("train: alpha must be >= 0");
    if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
    if (!(tau > 0.0)) throw config_error("train: tau must be positive");
  }

  static TrainConfig desk_preset() {
    TrainConfig c;
    c.model = ModelConfig::desk_preset();
    return c;
  }
};

// Cosine annealing from base_lr to 0 across the configured epochs.
inline double lr_at(size_t epoch, const TrainConfig& cfg) {
  if (cfg.epochs == 0) return cfg.base_lr;
  if (epoch >= cfg.epochs)
    throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) + " out of range");
  return cfg.base_lr * 0.5 *
         (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(cfg.epochs)));
}

// ---------------------------------------------------------------------------
// Optimizer: adaptive-moment SGD with bias correction
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  size_t step = 0;

  void init(const ParamRegistry<T>& reg) {
    m.clear();
    v.clear();
    for (const auto& [name, t] : reg) {
      m.emplace_back(t->numel(), T(0));
      v.emplace_back(t->numel(), T(0));
    }
    step = 0;
  }

  void update(ParamRegistry<T>& reg, double lr, double beta1, double beta2, double eps) {
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (size_t pi = 0; pi < reg.size(); ++pi) {
      Tensor<T>& t = *reg[pi].second;
      if (!t.has_grad()) continue;
      const std::vector<T>& g = t.grad();
      std::vector<T>& vals = t.values_mut();
      std::vector<T>& mi = m[pi];
      std::vector<T>& vi = v[pi];
      for (size_t i = 0; i < vals.size(); ++i) {
        mi[i] = static_cast<T>(beta1 * mi[i] + (1.0 - beta1) * g[i]);
        vi[i] = static_cast<T>(beta2 * vi[i] + (1.0 - beta2) * g[i] * g[i]);
        const double mhat = mi[i] / bc1;
        const double vhat = vi[i] / bc2;
        vals[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, int label) {
  Tensor<T> lp = log_softmax(logits);
  return scalar_mul(pick(lp, static_cast<size_t>(label)), T(-1));
}

// Mean cross-entropy over the batch plus alpha times the drop regularizer.
template <typename T>
Tensor<T> total_loss(const std::vector<Tensor<T>>& logits, const std::vector<int>& labels,
                     const std::vector<std::vector<Tensor<T>>>& soft_dropped,
                     const std::vector<double>& targets, double alpha) {
  if (logits.size() != labels.size() || logits.size() != soft_dropped.size())
    throw std::invalid_argument("total_loss: batch size mismatch");
  Tensor<T> acc;
  for (size_t i = 0; i < logits.size(); ++i) {
    Tensor<T> li = cross_entropy(logits[i], labels[i]);
    if (alpha != 0.0)
      li = add(li, scalar_mul(drop_loss(soft_dropped[i], targets), static_cast<T>(alpha)));
    acc = acc.defined() ? add(acc, li) : li;
  }
  return scalar_mul(acc, T(1) / static_cast<T>(logits.size()));
}

// ---------------------------------------------------------------------------
// Training state and steps
// ---------------------------------------------------------------------------

template <typename T>
struct TrainState {
  TrainConfig cfg;
  ModelParams<T> params;
  AdamState<T> opt;
  size_t epoch = 0;
  RandomSource data_rng{0, 0};
  RandomSource gumbel_rng{0, 1};
  RandomSource budget_rng{0, 2};

  static TrainState init(const TrainConfig& cfg) {
    cfg.validate();
    TrainState s;
    s.cfg = cfg;
    RandomSource init_rng(cfg.seed, 0xadae1);
    s.params.init(cfg.model, init_rng);
    auto reg = s.params.registry();
    s.opt.init(reg);
    s.data_rng = RandomSource(cfg.seed, 0xda7a);
    s.gumbel_rng = RandomSource(cfg.seed, 0x6b3);
    s.budget_rng = RandomSource(cfg.seed, 0xb4d6e7);
    return s;
  }
};

struct StepMetrics {
  double loss = 0, ce = 0, ldrop = 0;
  size_t budget = 0;
  std::vector<double> soft_d, hard_d;  // per-slot batch means
};

// One optimization step on an already-augmented batch under drop-predictor
// bank `budget`. Per-cloud losses are scaled by 1/batch and backpropagated
// individually; gradients accumulate across clouds into the shared parameters.
template <typename T>
StepMetrics train_step(TrainState<T>& state, const std::vector<const PointCloud*>& batch,
                       size_t budget, double lr) {
  const auto& targets = state.params.schedule().row(budget);
  const size_t bsz = batch.size();
  if (bsz == 0) throw std::invalid_argument("train_step: empty batch");

  StepMetrics met;
  met.budget = budget;
  met.soft_d.assign(state.cfg.model.ell, 0.0);
  met.hard_d.assign(state.cfg.model.ell, 0.0);
  const T tau = static_cast<T>(state.cfg.tau);
  const T inv_b = T(1) / static_cast<T>(bsz);

  for (size_t bi = 0; bi < bsz; ++bi) {
    const PointCloud& pc = *batch[bi];
    RandomSource cloud_gumbel = state.gumbel_rng.substream(state.gumbel_rng.next_u64());
    auto noise = sampled_noise<T>(cloud_gumbel);
    TrainForward<T> fw = forward_train(state.params, pc, budget, tau, noise);

    Tensor<T> ce = cross_entropy(fw.logits, pc.label);
    std::vector<Tensor<T>> soft;
    soft.reserve(fw.decisions.size());
    for (auto& d : fw.decisions) soft.push_back(d.soft_dropped_frac);
    Tensor<T> ld = drop_loss(soft, targets);
    Tensor<T> loss = add(ce, scalar_mul(ld, static_cast<T>(state.cfg.alpha)));

    const double ce_v = ce.item(), ld_v = ld.item(), loss_v = loss.item();
    if (!std::isfinite(loss_v))
      throw numeric_error("train_step: non-finite loss on batch element " + std::to_string(bi) +
                          " (cloud '" + pc.id + "', ce=" + std::to_string(ce_v) +
                          ", drop=" + std::to_string(ld_v) + ")");
    met.ce += ce_v / static_cast<double>(bsz);
    met.ldrop += ld_v / static_cast<double>(bsz);
    met.loss += loss_v / static_cast<double>(bsz);
    for (size_t s = 0; s < fw.decisions.size(); ++s) {
      met.soft_d[s] += fw.decisions[s].soft_dropped_frac.item() / static_cast<double>(bsz);
      met.hard_d[s] += fw.decisions[s].dropped_fraction / static_cast<double>(bsz);
    }

    backward(scalar_mul(loss, inv_b));
  }

  auto reg = state.params.registry();
  state.opt.update(reg, lr, state.cfg.adam_beta1, state.cfg.adam_beta2, state.cfg.adam_eps);
  state.params.zero_grads();
  return met;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> mean_kept;  // live tokens after each predictor slot
  size_t count = 0;
};

// Deterministic inference pass: no noise, exact-count selection, dropped
// tokens physically removed.
template <typename T>
EvalResult evaluate(ModelParams<T>& params, const std::vector<const PointCloud*>& clouds,
                    size_t budget, SamplerKind sampler = SamplerKind::kAdaptive,
                    RandomSource* rng = nullptr) {
  EvalResult res;
  res.mean_kept.assign(params.schedule().ell, 0.0);
  size_t correct = 0;
  for (const PointCloud* pc : clouds) {
    InferForward<T> fw = forward_infer(params, *pc, budget, sampler, rng);
    if (fw.predicted == pc->label) ++correct;
    for (size_t s = 0; s < fw.kept_counts.size(); ++s)
      res.mean_kept[s] += static_cast<double>(fw.kept_counts[s]);
    ++res.count;
  }
  if (res.count) {
    res.accuracy = static_cast<double>(correct) / static_cast<double>(res.count);
    for (double& k : res.mean_kept) k /= static_cast<double>(res.count);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Epoch loop with CSV metrics and drop telemetry
// ---------------------------------------------------------------------------

struct EpochRow {
  size_t epoch = 0;
  double train_loss = 0, train_ce = 0, train_ldrop = 0;
  std::vector<double> eval_acc;          // per budget 1..B (NaN when skipped)
  std::vector<double> mean_hard_d;       // per slot
};

inline void write_metrics_header(std::ostream& os, size_t budgets, size_t ell) {
  os << "epoch,train_loss,train_ce,train_ldrop";
  for (size_t b = 1; b <= budgets; ++b) os << ",eval_acc_b" << b;
  for (size_t s = 1; s <= ell; ++s) os << ",hard_d" << s;
  os << '\n';
}

inline void write_metrics_row(std::ostream& os, const EpochRow& r) {
  os << r.epoch << ',' << r.train_loss << ',' << r.train_ce << ',' << r.train_ldrop;
  for (double a : r.eval_acc) {
    os << ',';
    if (std::isfinite(a)) os << a;
  }
  for (double d : r.mean_hard_d) os << ',' << d;
  os << '\n';
}

// Runs until cfg.epochs (resume-aware). Telemetry rows are
// (epoch, budget, slot, soft d, hard d, target). `on_epoch` fires after each
// completed epoch (checkpointing hooks in here).
template <typename T>
std::vector<EpochRow> run_training(TrainState<T>& state, const DiskDataset& data,
                                   std::ostream* metrics_csv = nullptr,
                                   std::ostream* telemetry_csv = nullptr,
                                   std::ostream* progress = nullptr,
                                   const std::function<void(TrainState<T>&, const EpochRow&)>&
                                       on_epoch = {}) {
  const TrainConfig& cfg = state.cfg;
  const std::vector<size_t> train_idx = data.split_indices("train");
  const std::vector<size_t> eval_idx = data.split_indices("eval");
  if (train_idx.empty()) throw data_error("run_training: no training split in manifest");

  std::vector<PointCloud> train_clouds;
  train_clouds.reserve(train_idx.size());
  for (size_t i : train_idx) train_clouds.push_back(data.load(data.records[i]));
  std::vector<PointCloud> eval_clouds;
  eval_clouds.reserve(eval_idx.size());
  for (size_t i : eval_idx) eval_clouds.push_back(data.load(data.records[i]));
  std::vector<const PointCloud*> eval_ptrs;
  for (const auto& pc : eval_clouds) eval_ptrs.push_back(&pc);

  if (metrics_csv && state.epoch == 0)
    write_metrics_header(*metrics_csv, cfg.model.budgets, cfg.model.ell);
  if (telemetry_csv && state.epoch == 0)
    *telemetry_csv << "epoch,budget,slot,soft_d,hard_d,target\n";

  std::vector<EpochRow> rows;
  while (state.epoch < cfg.epochs) {
    const size_t epoch = state.epoch;
    const double lr = lr_at(epoch, cfg);

    std::vector<size_t> order(train_clouds.size());
    std::iota(order.begin(), order.end(), 0);
    state.data_rng.shuffle(order.begin(), order.end());

    EpochRow row;
    row.epoch = epoch;
    row.mean_hard_d.assign(cfg.model.ell, 0.0);
    // telemetry accumulators per (budget, slot)
    std::vector<std::vector<double>> soft_acc(cfg.model.budgets,
                                              std::vector<double>(cfg.model.ell, 0.0));
    std::vector<std::vector<double>> hard_acc = soft_acc;
    std::vector<size_t> budget_batches(cfg.model.budgets, 0);

    size_t steps = 0;
    std::vector<PointCloud> batch_storage;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      const size_t budget = 1 + state.budget_rng.index(cfg.model.budgets);

      batch_storage.clear();
      std::vector<const PointCloud*> batch;
      for (size_t i = start; i < end; ++i) {
        const PointCloud& src = train_clouds[order[i]];
        if (cfg.augment_inputs) {
          RandomSource aug_rng = state.data_rng.substream(state.data_rng.next_u64());
          batch_storage.push_back(augment(src, cfg.aug, aug_rng));
        } else {
          batch_storage.push_back(src);
        }
      }
      for (const auto& pc : batch_storage) batch.push_back(&pc);

      StepMetrics met = train_step(state, batch, budget, lr);
      row.train_loss += met.loss;
      row.train_ce += met.ce;
      row.train_ldrop += met.ldrop;
      for (size_t s = 0; s < cfg.model.ell; ++s) {
        row.mean_hard_d[s] += met.hard_d[s];
        soft_acc[budget - 1][s] += met.soft_d[s];
        hard_acc[budget - 1][s] += met.hard_d[s];
      }
      ++budget_batches[budget - 1];
      ++steps;
    }
    if (steps) {
      row.train_loss /= static_cast<double>(steps);
      row.train_ce /= static_cast<double>(steps);
      row.train_ldrop /= static_cast<double>(steps);
      for (double& d : row.mean_hard_d) d /= static_cast<double>(steps);
    }

    state.epoch = epoch + 1;
    const bool last = state.epoch == cfg.epochs;
    const bool do_eval =
        !eval_ptrs.empty() && (last || (cfg.eval_every > 0 && state.epoch % cfg.eval_every == 0));
    row.eval_acc.assign(cfg.model.budgets, std::numeric_limits<double>::quiet_NaN());
    if (do_eval)
      for (size_t b = 1; b <= cfg.model.budgets; ++b)
        row.eval_acc[b - 1] = evaluate(state.params, eval_ptrs, b).accuracy;

    if (metrics_csv) {
      write_metrics_row(*metrics_csv, row);
      metrics_csv->flush();
    }
    if (telemetry_csv) {
      for (size_t b = 1; b <= cfg.model.budgets; ++b) {
        if (!budget_batches[b - 1]) continue;
        for (size_t s = 0; s < cfg.model.ell; ++s)
          *telemetry_csv << epoch << ',' << b << ',' << s + 1 << ','
                         << soft_acc[b - 1][s] / budget_batches[b - 1] << ','
                         << hard_acc[b - 1][s] / budget_batches[b - 1] << ','
                         << state.params.schedule().targets[b - 1][s] << '\n';
      }
      telemetry_csv->flush();
    }
    if (progress) {
      *progress << "epoch " << epoch << " loss " << row.train_loss << " ce " << row.train_ce
                << " ldrop " << row.train_ldrop;
      if (do_eval) {
        *progress << " acc";
        for (double a : row.eval_acc) *progress << ' ' << a;
      }
      *progress << std::endl;
    }
    if (on_epoch) on_epoch(state, row);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace adapt
