#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "adapt/errors.hpp"
#include "adapt/training.hpp"

namespace adapt {

// Binary checkpoint: magic, format version, flat key=value config text, epoch,
// named parameter tensors (name, shape, little-endian 32-bit floats), Adam
// moments, and RNG stream states. load(save(state)) resumes bit-identically.

namespace detail {

constexpr char kCheckpointMagic[8] = {'A', 'D', 'P', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

inline void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void write_f32_span(std::ostream& os, const std::vector<float>& v) {
  write_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
}

inline uint32_t read_u32(std::istream& is) {
  uint32_t v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw data_error("checkpoint: truncated file");
  return v;
}
inline uint64_t read_u64(std::istream& is) {
  uint64_t v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw data_error("checkpoint: truncated file");
  return v;
}
inline std::string read_string(std::istream& is) {
  const uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw data_error("checkpoint: truncated file");
  return s;
}
inline std::vector<float> read_f32_span(std::istream& is) {
  const uint64_t n = read_u64(is);
  std::vector<float> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw data_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Flat key=value serialization of TrainConfig (the reproducibility record
// embedded in checkpoints).
// ---------------------------------------------------------------------------

inline std::string train_config_to_text(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "d_model=" << c.model.d_model << '\n'
     << "blocks=" << c.model.n_blocks << '\n'
     << "heads=" << c.model.n_heads << '\n'
     << "mlp_ratio=" << c.model.mlp_ratio << '\n'
     << "knn_k=" << c.model.knn_k << '\n'
     << "arpe_hidden=" << c.model.arpe_hidden << '\n'
     << "gn_groups=" << c.model.gn_groups << '\n'
     << "in_features=" << c.model.in_features << '\n'
     << "classes=" << c.model.num_classes << '\n'
     << "ell=" << c.model.ell << '\n'
     << "rho=" << c.model.rho << '\n'
     << "budgets=" << c.model.budgets << '\n'
     << "alpha=" << c.alpha << '\n'
     << "lr=" << c.base_lr << '\n'
     << "tau=" << c.tau << '\n'
     << "batch_size=" << c.batch_size << '\n'
     << "epochs=" << c.epochs << '\n'
     << "seed=" << c.seed << '\n'
     << "adam_beta1=" << c.adam_beta1 << '\n'
     << "adam_beta2=" << c.adam_beta2 << '\n'
     << "adam_eps=" << c.adam_eps << '\n'
     << "augment=" << (c.augment_inputs ? 1 : 0) << '\n'
     << "aug_translation=" << c.aug.translation_max << '\n'
     << "aug_scale_min=" << c.aug.scale_min << '\n'
     << "aug_scale_max=" << c.aug.scale_max << '\n'
     << "aug_dropout_max=" << c.aug.dropout_max_ratio << '\n'
     << "eval_every=" << c.eval_every << '\n'
     << "checkpoint_every=" << c.checkpoint_every << '\n';
  return os.str();
}

inline TrainConfig train_config_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(line_no) + ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
    };
    trim(key);
    trim(val);
    kv[key] = val;
  }
  TrainConfig c;
  auto geti = [&](const char* k, size_t& out) {
    if (auto it = kv.find(k); it != kv.end()) out = std::stoull(it->second);
  };
  auto getd = [&](const char* k, double& out) {
    if (auto it = kv.find(k); it != kv.end()) out = std::stod(it->second);
  };
  geti("d_model", c.model.d_model);
  geti("blocks", c.model.n_blocks);
  geti("heads", c.model.n_heads);
  geti("mlp_ratio", c.model.mlp_ratio);
  geti("knn_k", c.model.knn_k);
  geti("arpe_hidden", c.model.arpe_hidden);
  geti("gn_groups", c.model.gn_groups);
  geti("in_features", c.model.in_features);
  geti("classes", c.model.num_classes);
  geti("ell", c.model.ell);
  getd("rho", c.model.rho);
  geti("budgets", c.model.budgets);
  getd("alpha", c.alpha);
  getd("lr", c.base_lr);
  getd("tau", c.tau);
  geti("batch_size", c.batch_size);
  geti("epochs", c.epochs);
  if (auto it = kv.find("seed"); it != kv.end()) c.seed = std::stoull(it->second);
  getd("adam_beta1", c.adam_beta1);
  getd("adam_beta2", c.adam_beta2);
  getd("adam_eps", c.adam_eps);
  if (auto it = kv.find("augment"); it != kv.end()) c.augment_inputs = it->second != "0";
  getd("aug_translation", c.aug.translation_max);
  c.aug.translation_min = -c.aug.translation_max;
  getd("aug_scale_min", c.aug.scale_min);
  getd("aug_scale_max", c.aug.scale_max);
  getd("aug_dropout_max", c.aug.dropout_max_ratio);
  geti("eval_every", c.eval_every);
  geti("checkpoint_every", c.checkpoint_every);
  return c;
}

// ---------------------------------------------------------------------------
// Save / load
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& path, TrainState<float>& state) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoints are written little-endian");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("cannot write checkpoint " + path.string());
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_u32(os, detail::kCheckpointVersion);
  detail::write_string(os, train_config_to_text(state.cfg));
  detail::write_u64(os, state.epoch);
  detail::write_u64(os, state.opt.step);

  auto reg = state.params.registry();
  detail::write_u64(os, reg.size());
  for (size_t pi = 0; pi < reg.size(); ++pi) {
    const auto& [name, t] = reg[pi];
    detail::write_string(os, name);
    detail::write_u64(os, t->rank());
    for (size_t d = 0; d < t->rank(); ++d) detail::write_u64(os, t->shape()[d]);
    detail::write_f32_span(os, t->values());
    detail::write_f32_span(os, state.opt.m[pi]);
    detail::write_f32_span(os, state.opt.v[pi]);
  }
  detail::write_string(os, state.data_rng.save_state());
  detail::write_string(os, state.gumbel_rng.save_state());
  detail::write_string(os, state.budget_rng.save_state());
  if (!os) throw data_error("failed writing checkpoint " + path.string());
}

inline TrainState<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, detail::kCheckpointMagic))
    throw data_error("not a checkpoint: " + path.string());
  const uint32_t version = detail::read_u32(is);
  if (version != detail::kCheckpointVersion)
    throw data_error("checkpoint " + path.string() + " has unknown format version " +
                     std::to_string(version));

  const std::string cfg_text = detail::read_string(is);
  TrainConfig cfg = train_config_from_text(cfg_text);
  TrainState<float> state = TrainState<float>::init(cfg);
  state.epoch = detail::read_u64(is);
  state.opt.step = detail::read_u64(is);

  auto reg = state.params.registry();
  const uint64_t count = detail::read_u64(is);
  if (count != reg.size())
    throw data_error("checkpoint tensor count " + std::to_string(count) +
                     " does not match model (" + std::to_string(reg.size()) + ")");
  for (size_t pi = 0; pi < reg.size(); ++pi) {
    auto& [name, t] = reg[pi];
    const std::string got = detail::read_string(is);
    if (got != name)
      throw data_error("checkpoint tensor '" + got + "' does not match expected '" + name + "'");
    const uint64_t rank = detail::read_u64(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::read_u64(is);
    if (shape != t->shape())
      throw data_error("checkpoint tensor '" + name + "' has shape " + shape_to_string(shape) +
                       ", expected " + shape_to_string(t->shape()));
    std::vector<float> vals = detail::read_f32_span(is);
    if (vals.size() != t->numel())
      throw data_error("checkpoint tensor '" + name + "' has wrong element count");
    t->values_mut() = std::move(vals);
    state.opt.m[pi] = detail::read_f32_span(is);
    state.opt.v[pi] = detail::read_f32_span(is);
  }
  state.data_rng.load_state(detail::read_string(is));
  state.gumbel_rng.load_state(detail::read_string(is));
  state.budget_rng.load_state(detail::read_string(is));
  return state;
}

}  // namespace adapt
