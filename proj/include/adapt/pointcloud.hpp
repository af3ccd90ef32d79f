#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "adapt/errors.hpp"
#include "adapt/random.hpp"

namespace adapt {

// N x F point array, row-major, columns 0..2 are xyz.
struct PointCloud {
  std::vector<float> points;
  size_t n = 0;
  size_t f = 3;
  int label = -1;
  std::string id;

  float* row(size_t i) { return points.data() + i * f; }
  const float* row(size_t i) const { return points.data() + i * f; }
};

struct TriangleMesh {
  std::vector<double> vertices;                 // V x 3
  std::vector<std::array<uint32_t, 3>> faces;   // T x 3

  size_t vertex_count() const { return vertices.size() / 3; }
};

struct AugmentConfig {
  double translation_min = -0.2, translation_max = 0.2;
  double scale_min = 0.67, scale_max = 1.5;
  double dropout_max_ratio = 0.875;
};

// ---------------------------------------------------------------------------
// OFF parsing
// ---------------------------------------------------------------------------

namespace detail {

struct OffLineReader {
  std::istringstream in;
  size_t line_no = 0;

  explicit OffLineReader(const std::string& text) : in(text) {}

  // Next significant line (comments stripped, blanks skipped). Returns false at EOF.
  bool next(std::string& out) {
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      size_t a = line.find_first_not_of(" \t\r\n");
      if (a == std::string::npos) continue;
      size_t b = line.find_last_not_of(" \t\r\n");
      out = line.substr(a, b - a + 1);
      return true;
    }
    return false;
  }
};

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> toks;
  std::istringstream is(s);
  std::string t;
  while (is >> t) toks.push_back(t);
  return toks;
}

inline double parse_double(const std::string& tok, size_t line_no, const char* what) {
  size_t pos = 0;
  double v;
  try {
    v = std::stod(tok, &pos);
  } catch (const std::exception&) {
    throw off_parse_error(line_no, std::string("non-numeric ") + what + " '" + tok + "'");
  }
  if (pos != tok.size())
    throw off_parse_error(line_no, std::string("non-numeric ") + what + " '" + tok + "'");
  return v;
}

inline long parse_long(const std::string& tok, size_t line_no, const char* what) {
  size_t pos = 0;
  long v;
  try {
    v = std::stol(tok, &pos);
  } catch (const std::exception&) {
    throw off_parse_error(line_no, std::string("malformed ") + what + " '" + tok + "'");
  }
  if (pos != tok.size())
    throw off_parse_error(line_no, std::string("malformed ") + what + " '" + tok + "'");
  return v;
}

inline std::array<double, 3> triangle_cross(const TriangleMesh& m,
                                            const std::array<uint32_t, 3>& f) {
  const double* a = &m.vertices[3 * f[0]];
  const double* b = &m.vertices[3 * f[1]];
  const double* c = &m.vertices[3 * f[2]];
  const double u[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const double v[3] = {c[0] - a[0], c[1] - a[1], c[2] - a[2]};
  return {u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]};
}

inline double triangle_area(const TriangleMesh& m, const std::array<uint32_t, 3>& f) {
  auto c = triangle_cross(m, f);
  return 0.5 * std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
}

}  // namespace detail

// Parses OFF text: optional "OFF" header (possibly fused with the counts, as
// in "OFF490 518 0"), a "V T E" counts line, V vertex lines, T polygon lines.
// Polygons are fan-triangulated; zero-area triangles are dropped afterwards.
inline TriangleMesh parse_off(const std::string& text) {
  detail::OffLineReader reader(text);
  std::string line;
  if (!reader.next(line)) throw off_parse_error(reader.line_no + 1, "empty OFF file");

  std::string counts_line;
  if (line.rfind("OFF", 0) == 0) {
    std::string rest = line.substr(3);
    if (rest.find_first_not_of(" \t") != std::string::npos) {
      counts_line = rest;  // header fused with counts
    } else if (!reader.next(counts_line)) {
      throw off_parse_error(reader.line_no + 1, "missing counts line");
    }
  } else {
    counts_line = line;
  }

  const size_t counts_line_no = reader.line_no;
  auto toks = detail::split_ws(counts_line);
  if (toks.size() < 2)
    throw off_parse_error(counts_line_no, "malformed counts line '" + counts_line + "'");
  const long vn = detail::parse_long(toks[0], counts_line_no, "vertex count");
  const long tn = detail::parse_long(toks[1], counts_line_no, "face count");
  if (vn < 0 || tn < 0) throw off_parse_error(counts_line_no, "negative counts");

  TriangleMesh mesh;
  mesh.vertices.reserve(3 * static_cast<size_t>(vn));
  for (long i = 0; i < vn; ++i) {
    if (!reader.next(line))
      throw off_parse_error(reader.line_no + 1, "expected vertex " + std::to_string(i + 1) +
                                                    " of " + std::to_string(vn));
    auto vt = detail::split_ws(line);
    if (vt.size() < 3)
      throw off_parse_error(reader.line_no, "vertex line has " + std::to_string(vt.size()) +
                                                " values, expected at least 3");
    for (int c = 0; c < 3; ++c)
      mesh.vertices.push_back(detail::parse_double(vt[c], reader.line_no, "coordinate"));
  }

  for (long i = 0; i < tn; ++i) {
    if (!reader.next(line))
      throw off_parse_error(reader.line_no + 1, "expected face " + std::to_string(i + 1) +
                                                    " of " + std::to_string(tn));
    auto ft = detail::split_ws(line);
    const long arity = detail::parse_long(ft[0], reader.line_no, "face arity");
    if (arity < 3) throw off_parse_error(reader.line_no, "face arity < 3");
    if (ft.size() < static_cast<size_t>(arity) + 1)
      throw off_parse_error(reader.line_no, "face line lists " + std::to_string(ft.size() - 1) +
                                                " indices, arity says " + std::to_string(arity));
    std::vector<uint32_t> poly(arity);
    for (long j = 0; j < arity; ++j) {
      const long idx = detail::parse_long(ft[j + 1], reader.line_no, "vertex index");
      if (idx < 0 || idx >= vn)
        throw off_parse_error(reader.line_no, "vertex index " + std::to_string(idx) +
                                                  " out of range [0, " + std::to_string(vn) + ")");
      poly[j] = static_cast<uint32_t>(idx);
    }
    for (long j = 1; j + 1 < arity; ++j)
      mesh.faces.push_back({poly[0], poly[j], poly[j + 1]});
  }

  // Ingestion cleanup: keep positive-area triangles only.
  std::erase_if(mesh.faces, [&](const std::array<uint32_t, 3>& f) {
    return !(detail::triangle_area(mesh, f) > 0.0);
  });
  return mesh;
}

inline std::string serialize_off(const TriangleMesh& mesh) {
  std::ostringstream os;
  os << "OFF\n" << mesh.vertex_count() << ' ' << mesh.faces.size() << " 0\n";
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (size_t i = 0; i < mesh.vertex_count(); ++i)
    os << mesh.vertices[3 * i] << ' ' << mesh.vertices[3 * i + 1] << ' '
       << mesh.vertices[3 * i + 2] << '\n';
  for (const auto& f : mesh.faces) os << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Surface sampling
// ---------------------------------------------------------------------------

// n points by area-weighted triangle choice and uniform barycentric placement,
// then centered at the origin and scaled into the unit sphere.
inline PointCloud sample_surface(const TriangleMesh& mesh, size_t n, RandomSource& rng) {
  std::vector<double> cum;
  cum.reserve(mesh.faces.size());
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    total += detail::triangle_area(mesh, f);
    cum.push_back(total);
  }
  if (mesh.faces.empty() || !(total > 0.0))
    throw data_error("sample_surface: mesh has no positive-area triangles");

  std::vector<double> pts(3 * n);
  for (size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * total;
    const size_t t = static_cast<size_t>(
        std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
    const auto& f = mesh.faces[std::min(t, mesh.faces.size() - 1)];
    double r1 = rng.uniform(), r2 = rng.uniform();
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    const double* a = &mesh.vertices[3 * f[0]];
    const double* b = &mesh.vertices[3 * f[1]];
    const double* c = &mesh.vertices[3 * f[2]];
    for (int d = 0; d < 3; ++d)
      pts[3 * i + d] = a[d] + r1 * (b[d] - a[d]) + r2 * (c[d] - a[d]);
  }

  double centroid[3] = {0, 0, 0};
  for (size_t i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) centroid[d] += pts[3 * i + d];
  for (int d = 0; d < 3; ++d) centroid[d] /= static_cast<double>(n);
  double max_norm = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double s = 0;
    for (int d = 0; d < 3; ++d) {
      pts[3 * i + d] -= centroid[d];
      s += pts[3 * i + d] * pts[3 * i + d];
    }
    max_norm = std::max(max_norm, std::sqrt(s));
  }
  const double inv = max_norm > 0.0 ? 1.0 / max_norm : 1.0;

  PointCloud pc;
  pc.n = n;
  pc.f = 3;
  pc.points.resize(3 * n);
  for (size_t i = 0; i < 3 * n; ++i) pc.points[i] = static_cast<float>(pts[i] * inv);
  return pc;
}

// ---------------------------------------------------------------------------
// Augmentation (training only)
// ---------------------------------------------------------------------------

// Global isotropic scale, per-axis translation, then input dropout replacing a
// uniform fraction of points with copies of the first surviving point (N is
// preserved).
inline PointCloud augment(const PointCloud& pc, const AugmentConfig& cfg, RandomSource& rng) {
  PointCloud out = pc;
  const double scale = rng.uniform_in(cfg.scale_min, cfg.scale_max);
  double shift[3];
  for (int d = 0; d < 3; ++d) shift[d] = rng.uniform_in(cfg.translation_min, cfg.translation_max);
  for (size_t i = 0; i < out.n; ++i) {
    float* p = out.row(i);
    for (int d = 0; d < 3; ++d) p[d] = static_cast<float>(p[d] * scale + shift[d]);
  }

  const double ratio = rng.uniform_in(0.0, cfg.dropout_max_ratio);
  const size_t drop = static_cast<size_t>(ratio * static_cast<double>(out.n));
  if (drop == 0) return out;

  // Uniform subset of `drop` indices via partial Fisher-Yates.
  std::vector<size_t> perm(out.n);
  std::iota(perm.begin(), perm.end(), 0);
  for (size_t i = 0; i < drop; ++i) std::swap(perm[i], perm[i + rng.index(out.n - i)]);
  std::vector<uint8_t> dropped(out.n, 0);
  for (size_t i = 0; i < drop; ++i) dropped[perm[i]] = 1;
  size_t survivor = 0;
  while (survivor < out.n && dropped[survivor]) ++survivor;
  for (size_t i = 0; i < out.n; ++i) {
    if (!dropped[i]) continue;
    std::copy(out.row(survivor), out.row(survivor) + out.f, out.row(i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neighborhood queries
// ---------------------------------------------------------------------------

// Row i holds the k nearest points to point i (self first, then ascending
// squared distance, ties to the lower index). Uses columns 0..2.
template <typename T>
std::vector<size_t> knn_indices(const std::vector<T>& points, size_t n, size_t f, size_t k) {
  if (k < 1 || k > n)
    throw std::invalid_argument("knn_indices: k=" + std::to_string(k) + " out of range [1, " +
                                std::to_string(n) + "]");
  std::vector<size_t> out(n * k);
  std::vector<std::pair<T, size_t>> cand;
  cand.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const T* pi = points.data() + i * f;
    cand.clear();
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const T* pj = points.data() + j * f;
      T d2 = 0;
      for (int d = 0; d < 3; ++d) {
        const T diff = pi[d] - pj[d];
        d2 += diff * diff;
      }
      cand.emplace_back(d2, j);
    }
    const size_t take = k - 1;
    std::partial_sort(cand.begin(), cand.begin() + take, cand.end());
    out[i * k] = i;
    for (size_t j = 0; j < take; ++j) out[i * k + 1 + j] = cand[j].second;
  }
  return out;
}

// Greedy farthest-point sampling over columns 0..2, starting at `start`;
// each step adds the point maximizing the min distance to the chosen set,
// ties to the lower index.
template <typename T>
std::vector<size_t> farthest_point_indices(const std::vector<T>& points, size_t n, size_t f,
                                           size_t m, size_t start) {
  if (m < 1 || m > n)
    throw std::invalid_argument("farthest_point_indices: m=" + std::to_string(m) +
                                " out of range [1, " + std::to_string(n) + "]");
  if (start >= n) throw std::invalid_argument("farthest_point_indices: start out of range");
  std::vector<size_t> chosen;
  chosen.reserve(m);
  std::vector<T> best(n, std::numeric_limits<T>::max());
  std::vector<uint8_t> taken(n, 0);
  size_t cur = start;
  for (size_t s = 0; s < m; ++s) {
    chosen.push_back(cur);
    taken[cur] = 1;
    const T* pc = points.data() + cur * f;
    T far_d = -1;
    size_t far_i = n;
    for (size_t j = 0; j < n; ++j) {
      const T* pj = points.data() + j * f;
      T d2 = 0;
      for (int d = 0; d < 3; ++d) {
        const T diff = pc[d] - pj[d];
        d2 += diff * diff;
      }
      best[j] = std::min(best[j], d2);
      if (!taken[j] && best[j] > far_d) {
        far_d = best[j];
        far_i = j;
      }
    }
    cur = far_i;  // n (unused) only when s == m-1 and everything is taken
  }
  return chosen;
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::vector<std::string> classes = {"sphere", "box",  "cylinder",
                                      "torus",  "cone", "two-spheres"};
  size_t per_class = 100;
  size_t points = 256;
  double clutter_ratio = 0.3;   // fraction drawn from the uniform background cube
  double noise_sigma = 0.0;
  uint64_t seed = 1;
};

namespace detail {

// Shapes live inside the unit box [-0.5, 0.5]^3; the clutter cube is slightly
// smaller so shape extremities stay the farthest points of a cloud.
constexpr double kClutterHalfExtent = 0.35;

inline void sample_unit_sphere_dir(RandomSource& rng, double out[3]) {
  double s;
  do {
    for (int d = 0; d < 3; ++d) out[d] = rng.normal();
    s = out[0] * out[0] + out[1] * out[1] + out[2] * out[2];
  } while (s == 0.0);
  const double inv = 1.0 / std::sqrt(s);
  for (int d = 0; d < 3; ++d) out[d] *= inv;
}

inline void synth_surface_point(const std::string& cls, RandomSource& rng, double p[3]) {
  if (cls == "sphere") {
    double dir[3];
    sample_unit_sphere_dir(rng, dir);
    for (int d = 0; d < 3; ++d) p[d] = 0.5 * dir[d];
    return;
  }
  if (cls == "box") {
    const double h[3] = {0.4, 0.3, 0.2};
    const double areas[3] = {h[1] * h[2], h[0] * h[2], h[0] * h[1]};  // face pair areas / 4
    const double total = 2.0 * (areas[0] + areas[1] + areas[2]);
    double u = rng.uniform() * total;
    int axis = 0;
    for (; axis < 2; ++axis) {
      if (u < 2.0 * areas[axis]) break;
      u -= 2.0 * areas[axis];
    }
    const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    p[axis] = side * h[axis];
    p[(axis + 1) % 3] = rng.uniform_in(-h[(axis + 1) % 3], h[(axis + 1) % 3]);
    p[(axis + 2) % 3] = rng.uniform_in(-h[(axis + 2) % 3], h[(axis + 2) % 3]);
    return;
  }
  if (cls == "cylinder") {
    const double r = 0.3, hh = 0.5;
    const double lateral = 2.0 * M_PI * r * (2.0 * hh);
    const double caps = 2.0 * M_PI * r * r;
    if (rng.uniform() * (lateral + caps) < lateral) {
      const double th = rng.uniform_in(0.0, 2.0 * M_PI);
      p[0] = r * std::cos(th);
      p[1] = r * std::sin(th);
      p[2] = rng.uniform_in(-hh, hh);
    } else {
      const double th = rng.uniform_in(0.0, 2.0 * M_PI);
      const double rr = r * std::sqrt(rng.uniform());
      p[0] = rr * std::cos(th);
      p[1] = rr * std::sin(th);
      p[2] = rng.uniform() < 0.5 ? -hh : hh;
    }
    return;
  }
  if (cls == "torus") {
    const double R = 0.35, r = 0.15;
    // rejection on the curvature factor for uniform area
    double u, v;
    do {
      u = rng.uniform_in(0.0, 2.0 * M_PI);
      v = rng.uniform_in(0.0, 2.0 * M_PI);
    } while (rng.uniform() > (R + r * std::cos(v)) / (R + r));
    p[0] = (R + r * std::cos(v)) * std::cos(u);
    p[1] = (R + r * std::cos(v)) * std::sin(u);
    p[2] = r * std::sin(v);
    return;
  }
  if (cls == "cone") {
    const double r = 0.45, h = 1.0, apex_z = 0.5;
    const double slant = std::sqrt(r * r + h * h);
    const double lateral = M_PI * r * slant;
    const double base = M_PI * r * r;
    if (rng.uniform() * (lateral + base) < lateral) {
      const double s = std::sqrt(rng.uniform());  // area density grows with radius
      const double th = rng.uniform_in(0.0, 2.0 * M_PI);
      p[0] = s * r * std::cos(th);
      p[1] = s * r * std::sin(th);
      p[2] = apex_z - s * h;
    } else {
      const double th = rng.uniform_in(0.0, 2.0 * M_PI);
      const double rr = r * std::sqrt(rng.uniform());
      p[0] = rr * std::cos(th);
      p[1] = rr * std::sin(th);
      p[2] = apex_z - h;
    }
    return;
  }
  if (cls == "two-spheres") {
    const double r = 0.22, cx = 0.28;
    double dir[3];
    sample_unit_sphere_dir(rng, dir);
    const double center = rng.uniform() < 0.5 ? -cx : cx;
    p[0] = center + r * dir[0];
    p[1] = r * dir[1];
    p[2] = r * dir[2];
    return;
  }
  throw config_error("synth_dataset: unknown class '" + cls + "'");
}

}  // namespace detail

inline PointCloud synth_cloud(const std::string& cls, int label, const SynthConfig& cfg,
                              RandomSource& rng) {
  PointCloud pc;
  pc.n = cfg.points;
  pc.f = 3;
  pc.label = label;
  pc.points.resize(3 * cfg.points);
  const size_t clutter = static_cast<size_t>(std::lround(cfg.clutter_ratio *
                                                         static_cast<double>(cfg.points)));
  const size_t surface = cfg.points - clutter;
  for (size_t i = 0; i < surface; ++i) {
    double p[3];
    detail::synth_surface_point(cls, rng, p);
    if (cfg.noise_sigma > 0.0)
      for (int d = 0; d < 3; ++d) p[d] += cfg.noise_sigma * rng.normal();
    for (int d = 0; d < 3; ++d) pc.points[3 * i + d] = static_cast<float>(p[d]);
  }
  for (size_t i = surface; i < cfg.points; ++i)
    for (int d = 0; d < 3; ++d)
      pc.points[3 * i + d] = static_cast<float>(
          rng.uniform_in(-detail::kClutterHalfExtent, detail::kClutterHalfExtent));
  return pc;
}

// Deterministic labeled collection; one substream per cloud.
inline std::vector<PointCloud> synth_dataset(const SynthConfig& cfg) {
  // Validate names before any work so bad configs fail fast.
  for (const auto& cls : cfg.classes) {
    RandomSource probe(0, 0);
    double p[3];
    detail::synth_surface_point(cls, probe, p);
  }
  std::vector<PointCloud> out;
  out.reserve(cfg.classes.size() * cfg.per_class);
  RandomSource root(cfg.seed, 0x5f4e7d1b);
  for (size_t c = 0; c < cfg.classes.size(); ++c) {
    for (size_t i = 0; i < cfg.per_class; ++i) {
      RandomSource rng = root.substream(c * cfg.per_class + i);
      PointCloud pc = synth_cloud(cfg.classes[c], static_cast<int>(c), cfg, rng);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "_%04zu", i);
      pc.id = cfg.classes[c] + buf;
      out.push_back(std::move(pc));
    }
  }
  return out;
}

}  // namespace adapt
