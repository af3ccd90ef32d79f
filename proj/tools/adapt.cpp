// Command-line surface: dataset synthesis and ingestion, training, budgeted
// evaluation with ablation samplers, and analytic FLOPS reports.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "adapt/checkpoint.hpp"
#include "adapt/dataset.hpp"
#include "adapt/flops.hpp"
#include "adapt/model.hpp"
#include "adapt/training.hpp"

namespace fs = std::filesystem;
using namespace adapt;

namespace {

// The fully resolved option set is written next to every run's outputs;
// re-running with `--config <out>/run_config.cfg` reproduces the run.
void write_resolved_config(CLI::App* sub, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream os(out_dir / "run_config.cfg");
  const CLI::App* root = sub;
  while (root->get_parent() != nullptr) root = root->get_parent();
  os << root->config_to_str(true, false);
}

struct ModelFlags {
  size_t d_model = 64, blocks = 4, heads = 2, mlp_ratio = 2;
  size_t knn_k = 32, arpe_hidden = 0, gn_groups = 4;
  size_t ell = 4, budgets = 4;
  double rho = 0.8;

  void attach(CLI::App* app) {
    app->add_option("--d-model", d_model, "token width");
    app->add_option("--blocks", blocks, "transformer block count");
    app->add_option("--heads", heads, "attention heads");
    app->add_option("--mlp-ratio", mlp_ratio, "block MLP expansion");
    app->add_option("--knn", knn_k, "embedding neighborhood size");
    app->add_option("--arpe-hidden", arpe_hidden, "embedding hidden width (0 = d_model/2)");
    app->add_option("--gn-groups", gn_groups, "group-norm group count");
    app->add_option("--ell", ell, "drop predictor count");
    app->add_option("--budgets", budgets, "number of budgets B");
    app->add_option("--rho", rho, "final target drop ratio");
  }

  void apply(ModelConfig& m) const {
    m.d_model = d_model;
    m.n_blocks = blocks;
    m.n_heads = heads;
    m.mlp_ratio = mlp_ratio;
    m.knn_k = knn_k;
    m.arpe_hidden = arpe_hidden;
    m.gn_groups = gn_groups;
    m.ell = ell;
    m.budgets = budgets;
    m.rho = rho;
  }
};

int cmd_synth(CLI::App* sub, const SynthConfig& cfg, double eval_fraction,
              const std::string& out) {
  synth_to_disk(cfg, eval_fraction, out);
  write_resolved_config(sub, out);
  std::cout << "wrote " << cfg.classes.size() * cfg.per_class << " clouds to " << out << '\n';
  return 0;
}

int cmd_ingest(CLI::App* sub, const std::string& in, const std::string& out, size_t points,
               uint64_t seed) {
  IngestSummary s = ingest_off_tree(in, out, points, seed, &std::cerr);
  write_resolved_config(sub, out);
  std::cout << "ingested " << s.ingested << " meshes, " << s.failures.size() << " failures\n";
  return 0;
}

int cmd_train(CLI::App* sub, TrainConfig cfg, const std::string& data, const std::string& out,
              const std::string& resume) {
  DiskDataset ds = DiskDataset::open(data);
  if (ds.num_classes < 2) throw data_error("train: manifest has fewer than 2 classes");
  cfg.model.num_classes = ds.num_classes;

  TrainState<float> state =
      resume.empty() ? TrainState<float>::init(cfg) : load_checkpoint(resume);
  if (!resume.empty() && state.cfg.epochs != cfg.epochs) state.cfg.epochs = cfg.epochs;

  fs::create_directories(out);
  write_resolved_config(sub, out);
  const bool fresh = state.epoch == 0;
  std::ofstream metrics(fs::path(out) / "metrics.csv", fresh ? std::ios::out : std::ios::app);
  std::ofstream telemetry(fs::path(out) / "drop_telemetry.csv",
                          fresh ? std::ios::out : std::ios::app);

  const fs::path ckpt_path = fs::path(out) / "checkpoint.bin";
  const size_t ckpt_every = state.cfg.checkpoint_every;
  run_training<float>(state, ds, &metrics, &telemetry, &std::cout,
                      [&](TrainState<float>& s, const EpochRow&) {
                        if (ckpt_every > 0 && s.epoch % ckpt_every == 0)
                          save_checkpoint(ckpt_path, s);
                      });
  save_checkpoint(ckpt_path, state);  // final (or initial, when epochs == 0)
  std::cout << "checkpoint: " << ckpt_path.string() << '\n';
  return 0;
}

int cmd_eval(CLI::App* sub, const std::string& checkpoint, const std::string& data,
             const std::string& budget_arg, const std::string& sampler_name, uint64_t seed,
             const std::string& split, const std::string& out) {
  TrainState<float> state = load_checkpoint(checkpoint);
  DiskDataset ds = DiskDataset::open(data);
  const size_t B = state.cfg.model.budgets;

  std::vector<size_t> budgets;
  if (budget_arg == "all") {
    for (size_t b = 1; b <= B; ++b) budgets.push_back(b);
  } else {
    size_t b = 0;
    try {
      b = std::stoull(budget_arg);
    } catch (const std::exception&) {
      throw config_error("--budget expects an integer or 'all', got '" + budget_arg + "'");
    }
    if (b < 1 || b > B)
      throw config_error("budget " + std::to_string(b) + " out of range [1, " +
                         std::to_string(B) + "]");
    budgets.push_back(b);
  }
  SamplerKind sampler = sampler_from_string(sampler_name);

  std::vector<size_t> idx = ds.split_indices(split);
  if (idx.empty()) throw data_error("eval: no '" + split + "' split in manifest");
  std::vector<PointCloud> clouds;
  clouds.reserve(idx.size());
  for (size_t i : idx) clouds.push_back(ds.load(ds.records[i]));
  std::vector<const PointCloud*> ptrs;
  for (const auto& pc : clouds) ptrs.push_back(&pc);

  std::ofstream csv;
  if (!out.empty()) {
    fs::create_directories(out);
    write_resolved_config(sub, out);
    csv.open(fs::path(out) / "eval.csv");
    csv << "budget,sampler,accuracy,count,kept_counts\n";
  }
  for (size_t b : budgets) {
    RandomSource rng(seed, 0xab1a7e ^ b);
    EvalResult res = evaluate(state.params, ptrs, b, sampler, &rng);
    std::cout << "budget " << b << " sampler " << sampler_name << " accuracy " << res.accuracy
              << " (" << res.count << " clouds) kept:";
    for (double k : res.mean_kept) std::cout << ' ' << k;
    std::cout << '\n';
    if (csv) {
      csv << b << ',' << sampler_name << ',' << res.accuracy << ',' << res.count << ',';
      for (size_t s = 0; s < res.mean_kept.size(); ++s)
        csv << (s ? "|" : "") << res.mean_kept[s];
      csv << '\n';
    }
  }
  return 0;
}

int cmd_flops(CLI::App* sub, const ModelFlags& mf, size_t n_min, size_t n_max,
              const std::string& out) {
  ModelConfig m;
  mf.apply(m);
  m.validate();
  CostModel cm = CostModel::from_model(m);
  DropSchedule sched = make_schedule(m.ell, m.rho, m.budgets, m.n_blocks);

  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!out.empty()) {
    fs::path path(out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    file.open(path);
    if (!file) throw data_error("cannot write " + out);
    os = &file;
  }
  write_flops_csv_header(*os);
  for (size_t n = n_min; n <= n_max; n *= 2) {
    for (size_t b = 1; b <= m.budgets; ++b)
      write_flops_csv_row(*os, trajectory_flops(n, sched, b, cm));
    if (n > n_max / 2) break;
  }
  (void)sub;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adapt: budgeted point cloud transformer with learned token dropping"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value config file; flags override file values");

  // --- synth ---
  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
  synth->option_defaults()->always_capture_default();
  SynthConfig synth_cfg;
  double eval_fraction = 0.2;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--classes", synth_cfg.classes, "class names");
  synth->add_option("--per-class", synth_cfg.per_class, "clouds per class");
  synth->add_option("--points", synth_cfg.points, "points per cloud");
  synth->add_option("--clutter", synth_cfg.clutter_ratio, "background clutter fraction");
  synth->add_option("--noise", synth_cfg.noise_sigma, "surface noise sigma");
  synth->add_option("--eval-fraction", eval_fraction, "fraction tagged eval");
  synth->add_option("--seed", synth_cfg.seed, "random seed");

  // --- ingest ---
  auto* ingest = app.add_subcommand("ingest", "ingest an OFF mesh tree (class/{train,test}/*.off)");
  ingest->option_defaults()->always_capture_default();
  std::string ingest_in, ingest_out;
  size_t ingest_points = 2048;
  uint64_t ingest_seed = 1;
  ingest->add_option("--in", ingest_in, "mesh tree root")->required();
  ingest->add_option("--out", ingest_out, "output dataset directory")->required();
  ingest->add_option("--points", ingest_points, "surface samples per mesh");
  ingest->add_option("--seed", ingest_seed, "random seed");

  // --- train ---
  auto* train = app.add_subcommand("train", "train a model on a dataset directory");
  train->option_defaults()->always_capture_default();
  TrainConfig tc = TrainConfig::desk_preset();
  ModelFlags train_mf;
  std::string train_data, train_out, train_resume;
  train->add_option("--data", train_data, "dataset directory (manifest.jsonl)")->required();
  train->add_option("--out", train_out, "run output directory")->required();
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train->add_option("--epochs", tc.epochs, "training epochs");
  train->add_option("--batch-size", tc.batch_size, "batch size");
  train->add_option("--lr", tc.base_lr, "initial learning rate");
  train->add_option("--alpha", tc.alpha, "drop-loss weight");
  train->add_option("--tau", tc.tau, "Gumbel-Softmax temperature");
  train->add_option("--seed", tc.seed, "random seed");
  train->add_option("--eval-every", tc.eval_every, "epochs between evaluations");
  train->add_option("--checkpoint-every", tc.checkpoint_every, "epochs between checkpoints");
  bool train_no_augment = false;
  train->add_flag("--no-augment", train_no_augment, "disable training augmentation");
  train_mf.attach(train);

  // --- eval ---
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under a chosen budget");
  eval->option_defaults()->always_capture_default();
  std::string eval_ckpt, eval_data, eval_budget = "all", eval_sampler = "adaptive";
  std::string eval_split = "eval", eval_out;
  uint64_t eval_seed = 1;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--budget", eval_budget, "budget index 1..B or 'all'");
  eval->add_option("--sampler", eval_sampler, "token selection: adaptive, random, fps");
  eval->add_option("--split", eval_split, "manifest split to evaluate");
  eval->add_option("--seed", eval_seed, "seed for the random sampler");
  eval->add_option("--out", eval_out, "optional output directory for eval.csv");

  // --- flops ---
  auto* flops = app.add_subcommand("flops", "analytic FLOPS report over token counts and budgets");
  flops->option_defaults()->always_capture_default();
  ModelFlags flops_mf;
  flops_mf.d_model = 256;
  flops_mf.blocks = 8;
  flops_mf.heads = 4;
  size_t n_min = 256, n_max = 4096;
  std::string flops_out;
  flops->add_option("--n-min", n_min, "smallest initial token count");
  flops->add_option("--n-max", n_max, "largest initial token count (doubling sweep)");
  flops->add_option("--out", flops_out, "CSV path (stdout when omitted)");
  flops_mf.attach(flops);

  try {
    app.parse(argc, argv);
    if (synth->parsed()) return cmd_synth(synth, synth_cfg, eval_fraction, synth_out);
    if (ingest->parsed())
      return cmd_ingest(ingest, ingest_in, ingest_out, ingest_points, ingest_seed);
    if (train->parsed()) {
      train_mf.apply(tc.model);
      tc.augment_inputs = !train_no_augment;
      return cmd_train(train, tc, train_data, train_out, train_resume);
    }
    if (eval->parsed())
      return cmd_eval(eval, eval_ckpt, eval_data, eval_budget, eval_sampler, eval_seed,
                      eval_split, eval_out);
    if (flops->parsed()) return cmd_flops(flops, flops_mf, n_min, n_max, flops_out);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);  // 0 for help, nonzero usage errors
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
