#pragma once

#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adapt/errors.hpp"
#include "adapt/pointcloud.hpp"

namespace adapt {

namespace fs = std::filesystem;

// One record per cloud in the line-delimited manifest.
struct ManifestRecord {
  std::string id;
  std::string class_name;
  int class_index = -1;
  std::string source;  // originating file path or synth spec
  std::string split;   // "train" or "eval"
};

inline void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream os(path);
  if (!os) throw data_error("cannot write manifest " + path.string());
  for (const auto& r : records) {
    nlohmann::json j{{"id", r.id},
                     {"class", r.class_name},
                     {"class_index", r.class_index},
                     {"source", r.source},
                     {"split", r.split}};
    os << j.dump() << '\n';
  }
}

inline std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw data_error("cannot open manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw data_error("manifest " + path.string() + " line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    ManifestRecord r;
    r.id = j.at("id").get<std::string>();
    r.class_name = j.at("class").get<std::string>();
    r.class_index = j.at("class_index").get<int>();
    r.source = j.value("source", "");
    r.split = j.at("split").get<std::string>();
    out.push_back(std::move(r));
  }
  return out;
}

// Point arrays are little-endian 32-bit float binary blobs with a sidecar
// shape file holding "N F".
inline void save_points_blob(const fs::path& dir, const std::string& id, const PointCloud& pc) {
  static_assert(std::endian::native == std::endian::little,
                "point blobs are written little-endian");
  fs::create_directories(dir);
  {
    std::ofstream os(dir / (id + ".f32"), std::ios::binary);
    if (!os) throw data_error("cannot write blob for " + id);
    os.write(reinterpret_cast<const char*>(pc.points.data()),
             static_cast<std::streamsize>(pc.points.size() * sizeof(float)));
  }
  std::ofstream hs(dir / (id + ".dims"));
  if (!hs) throw data_error("cannot write shape sidecar for " + id);
  hs << pc.n << ' ' << pc.f << '\n';
}

inline PointCloud load_points_blob(const fs::path& dir, const std::string& id) {
  PointCloud pc;
  pc.id = id;
  {
    std::ifstream hs(dir / (id + ".dims"));
    if (!hs) throw data_error("missing shape sidecar for " + id);
    hs >> pc.n >> pc.f;
    if (!hs || pc.n == 0 || pc.f < 3) throw data_error("malformed shape sidecar for " + id);
  }
  std::ifstream is(dir / (id + ".f32"), std::ios::binary);
  if (!is) throw data_error("missing blob for " + id);
  pc.points.resize(pc.n * pc.f);
  is.read(reinterpret_cast<char*>(pc.points.data()),
          static_cast<std::streamsize>(pc.points.size() * sizeof(float)));
  if (is.gcount() != static_cast<std::streamsize>(pc.points.size() * sizeof(float)))
    throw data_error("blob for " + id + " is shorter than its sidecar claims");
  return pc;
}

// A dataset directory: manifest.jsonl plus points/<id>.{f32,dims}.
struct DiskDataset {
  fs::path root;
  std::vector<ManifestRecord> records;
  size_t num_classes = 0;

  static DiskDataset open(const fs::path& root) {
    DiskDataset d;
    d.root = root;
    d.records = read_manifest(root / "manifest.jsonl");
    int max_class = -1;
    for (const auto& r : d.records) max_class = std::max(max_class, r.class_index);
    d.num_classes = static_cast<size_t>(max_class + 1);
    return d;
  }

  PointCloud load(const ManifestRecord& r) const {
    PointCloud pc = load_points_blob(root / "points", r.id);
    pc.label = r.class_index;
    return pc;
  }

  std::vector<size_t> split_indices(const std::string& split) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); ++i)
      if (records[i].split == split) out.push_back(i);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Dataset builders
// ---------------------------------------------------------------------------

// Writes a synthetic dataset; per class, the trailing eval_fraction of clouds
// is tagged eval.
inline void synth_to_disk(const SynthConfig& cfg, double eval_fraction, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<PointCloud> clouds = synth_dataset(cfg);
  const size_t eval_per_class =
      static_cast<size_t>(std::lround(eval_fraction * static_cast<double>(cfg.per_class)));
  std::vector<ManifestRecord> records;
  records.reserve(clouds.size());
  for (size_t idx = 0; idx < clouds.size(); ++idx) {
    const PointCloud& pc = clouds[idx];
    const size_t within = idx % cfg.per_class;
    ManifestRecord r;
    r.id = pc.id;
    r.class_name = cfg.classes[pc.label];
    r.class_index = pc.label;
    std::ostringstream spec;
    spec << "synth:" << r.class_name << ":seed=" << cfg.seed << ":points=" << cfg.points
         << ":clutter=" << cfg.clutter_ratio << ":noise=" << cfg.noise_sigma;
    r.source = spec.str();
    r.split = within + eval_per_class >= cfg.per_class ? "eval" : "train";
    save_points_blob(out_dir / "points", r.id, pc);
    records.push_back(std::move(r));
  }
  write_manifest(out_dir / "manifest.jsonl", records);
}

struct IngestFailure {
  std::string file;
  std::string reason;
};

struct IngestSummary {
  size_t ingested = 0;
  std::vector<IngestFailure> failures;
};

// Ingests a ModelNet-style tree (class/{train,test}/*.off): parse, sample to
// n_points, write blobs and the manifest honoring the directory split. Parse
// failures are recorded and skipped; the run continues.
inline IngestSummary ingest_off_tree(const fs::path& in_dir, const fs::path& out_dir,
                                     size_t n_points, uint64_t seed,
                                     std::ostream* log = nullptr) {
  if (!fs::is_directory(in_dir)) throw data_error("ingest: no such directory " + in_dir.string());
  std::vector<std::string> classes;
  for (const auto& e : fs::directory_iterator(in_dir))
    if (e.is_directory()) classes.push_back(e.path().filename().string());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw data_error("ingest: no class directories under " + in_dir.string());

  fs::create_directories(out_dir);
  IngestSummary summary;
  std::vector<ManifestRecord> records;
  RandomSource root(seed, 0x0ff5eed);
  uint64_t file_counter = 0;

  for (size_t c = 0; c < classes.size(); ++c) {
    for (const char* split_dir : {"train", "test"}) {
      const fs::path dir = in_dir / classes[c] / split_dir;
      if (!fs::is_directory(dir)) continue;
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".off") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& file : files) {
        const uint64_t stream_key = file_counter++;
        try {
          std::ifstream is(file);
          if (!is) throw data_error("cannot open file");
          std::stringstream buf;
          buf << is.rdbuf();
          TriangleMesh mesh = parse_off(buf.str());
          RandomSource rng = root.substream(stream_key);
          PointCloud pc = sample_surface(mesh, n_points, rng);
          pc.label = static_cast<int>(c);
          pc.id = classes[c] + "_" + file.stem().string();
          save_points_blob(out_dir / "points", pc.id, pc);
          ManifestRecord r;
          r.id = pc.id;
          r.class_name = classes[c];
          r.class_index = static_cast<int>(c);
          r.source = file.string();
          r.split = std::string(split_dir) == "test" ? "eval" : "train";
          records.push_back(std::move(r));
          ++summary.ingested;
        } catch (const std::exception& e) {
          summary.failures.push_back({file.string(), e.what()});
          if (log) *log << "ingest failure: " << file.string() << ": " << e.what() << '\n';
        }
      }
    }
  }
  write_manifest(out_dir / "manifest.jsonl", records);
  if (log) {
    *log << "ingested " << summary.ingested << " meshes";
    if (!summary.failures.empty()) *log << ", " << summary.failures.size() << " failed";
    *log << '\n';
  }
  return summary;
}

}  // namespace adapt
