#pragma once

// Synthetic shape families, XYZ ingestion, `path,label,split` manifests,
// point subsampling, augmentation and few-shot episode sampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <cstdio>
#include <map>
#include <numeric>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "femae/errors.hpp"
#include "femae/geometry.hpp"
#include "femae/patchmask.hpp"
#include "femae/tensor.hpp"

namespace femae {

enum class ShapeFamily { Sphere, Box, Cylinder, Torus, Cone, PlaneCross };

inline constexpr std::array<ShapeFamily, 6> kFamilies = {ShapeFamily::Sphere, ShapeFamily::Box,
                                                         ShapeFamily::Cylinder, ShapeFamily::Torus,
                                                         ShapeFamily::Cone, ShapeFamily::PlaneCross};

inline const char* to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Sphere: return "sphere";
    case ShapeFamily::Box: return "box";
    case ShapeFamily::Cylinder: return "cylinder";
    case ShapeFamily::Torus: return "torus";
    case ShapeFamily::Cone: return "cone";
    case ShapeFamily::PlaneCross: return "plane-cross";
  }
  return "?";
}

struct ShapeRequest {
  ShapeFamily family = ShapeFamily::Sphere;
  std::size_t points = 1024;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

namespace data_detail {

using Vec3 = std::array<double, 3>;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

/// Pick an index with probability proportional to `weights`.
inline std::size_t pick(Rng& rng, std::initializer_list<double> weights) {
  double total = 0;
  for (double w : weights) total += w;
  double u = uniform(rng, 0.0, total);
  std::size_t i = 0;
  for (double w : weights) {
    if (u < w) return i;
    u -= w;
    ++i;
  }
  return weights.size() - 1;
}

inline Vec3 sphere_point(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v{n(rng), n(rng), n(rng)};
    const double r = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    if (r > 1e-12) return {v[0] / r, v[1] / r, v[2] / r};
  }
}

// Instance shape parameters are drawn once per cloud so each family has some spread.
struct Sampler {
  ShapeFamily family;
  double a = 1, b = 1, c = 1;

  Sampler(ShapeFamily f, Rng& rng) : family(f) {
    switch (f) {
      case ShapeFamily::Sphere: break;
      case ShapeFamily::Box:
        a = uniform(rng, 0.6, 1.0), b = uniform(rng, 0.6, 1.0), c = uniform(rng, 0.6, 1.0);
        break;
      case ShapeFamily::Cylinder: a = uniform(rng, 0.4, 0.7), b = uniform(rng, 0.7, 1.0); break;
      case ShapeFamily::Torus: a = uniform(rng, 0.7, 1.0), b = uniform(rng, 0.15, 0.35); break;
      case ShapeFamily::Cone: a = uniform(rng, 0.5, 0.8), b = uniform(rng, 0.8, 1.2); break;
      case ShapeFamily::PlaneCross: a = uniform(rng, 0.7, 1.0), b = uniform(rng, 0.7, 1.0); break;
    }
  }

  // y is the vertical axis.
  Vec3 operator()(Rng& rng) const {
    switch (family) {
      case ShapeFamily::Sphere: return sphere_point(rng);
      case ShapeFamily::Box: {
        const std::size_t face = pick(rng, {b * c, a * c, a * b});
        const double s = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
        const double u = uniform(rng, -1.0, 1.0), v = uniform(rng, -1.0, 1.0);
        if (face == 0) return {s * a, u * b, v * c};
        if (face == 1) return {u * a, s * b, v * c};
        return {u * a, v * b, s * c};
      }
      case ShapeFamily::Cylinder: {
        // a = radius, b = half height; side plus both caps
        const double r = a, h = b;
        const std::size_t part = pick(rng, {2.0 * std::numbers::pi * r * 2.0 * h, std::numbers::pi * r * r,
                                            std::numbers::pi * r * r});
        const double t = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        if (part == 0) return {r * std::cos(t), uniform(rng, -h, h), r * std::sin(t)};
        const double rr = r * std::sqrt(uniform(rng, 0.0, 1.0));
        return {rr * std::cos(t), part == 1 ? h : -h, rr * std::sin(t)};
      }
      case ShapeFamily::Torus: {
        // a = major radius, b = minor radius; rejection keeps the area element uniform
        const double R = a, r = b;
        for (;;) {
          const double u = uniform(rng, 0.0, 2.0 * std::numbers::pi);
          const double v = uniform(rng, 0.0, 2.0 * std::numbers::pi);
          if (uniform(rng, 0.0, R + r) <= R + r * std::cos(v)) {
            return {(R + r * std::cos(v)) * std::cos(u), r * std::sin(v), (R + r * std::cos(v)) * std::sin(u)};
          }
        }
      }
      case ShapeFamily::Cone: {
        // a = base radius, b = height; apex up, lateral surface plus base disk
        const double r = a, h = b;
        const double slant = std::sqrt(r * r + h * h);
        const std::size_t part = pick(rng, {std::numbers::pi * r * slant, std::numbers::pi * r * r});
        const double t = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        if (part == 0) {
          const double f = std::sqrt(uniform(rng, 0.0, 1.0));  // fraction of the way from apex to base
          return {f * r * std::cos(t), h * (0.5 - f), f * r * std::sin(t)};
        }
        const double rr = r * std::sqrt(uniform(rng, 0.0, 1.0));
        return {rr * std::cos(t), -0.5 * h, rr * std::sin(t)};
      }
      case ShapeFamily::PlaneCross: {
        // two perpendicular a × b plates crossing along the vertical axis
        const double u = uniform(rng, -a, a), v = uniform(rng, -b, b);
        if (uniform(rng, 0.0, 1.0) < 0.5) return {u, v, 0.0};
        return {0.0, v, u};
      }
    }
    return {0, 0, 0};
  }
};

}  // namespace data_detail

/// Uniform surface samples of one family, Gaussian jitter, then unit-sphere normalization.
/// Spheres are sampled in antipodal pairs so the sample centroid is the true center.
template <typename T = double>
PointCloud<T> gen_synthetic(const ShapeRequest& req) {
  if (req.points == 0) throw UsageError("gen_synthetic: point count must be positive");
  if (req.noise < 0) throw UsageError("gen_synthetic: noise must be non-negative");
  Rng rng(req.seed);
  data_detail::Sampler sampler(req.family, rng);
  Tensor<double> pts({req.points, 3});
  for (std::size_t i = 0; i < req.points; ++i) {
    data_detail::Vec3 p;
    if (req.family == ShapeFamily::Sphere && i % 2 == 1) {
      p = {-pts.at(i - 1, 0), -pts.at(i - 1, 1), -pts.at(i - 1, 2)};
    } else {
      p = sampler(rng);
    }
    for (std::size_t d = 0; d < 3; ++d) pts.at(i, d) = p[d];
  }
  if (req.noise > 0) {
    std::normal_distribution<double> n(0.0, req.noise);
    for (auto& v : pts.storage()) v += n(rng);
  }
  return PointCloud<T>(normalize_unit_sphere(pts).template cast<T>(), static_cast<int>(req.family));
}

/// Whitespace-separated `x y z` per line; blank lines and `#` comments are skipped.
/// `source` names the input in error messages.
template <typename T = double>
PointCloud<T> parse_xyz(std::istream& in, bool normalize = false, const std::string& source = "") {
  const std::string where = source.empty() ? "" : " (" + source + ")";
  std::vector<T> flat;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<std::string> fields;
    for (std::string f; ls >> f;) fields.push_back(f);
    if (fields.empty()) continue;
    if (fields.size() != 3) {
      throw ParseError("expected 3 coordinates, found " + std::to_string(fields.size()) + where, lineno);
    }
    for (const auto& f : fields) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(f, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != f.size() || !std::isfinite(v)) throw ParseError("not a finite number: '" + f + "'" + where, lineno);
      flat.push_back(static_cast<T>(v));
    }
  }
  if (flat.empty()) throw ParseError("no points" + where, lineno == 0 ? 1 : lineno);
  const std::size_t n = flat.size() / 3;
  Tensor<T> pts({n, 3}, std::move(flat));
  return PointCloud<T>(normalize ? normalize_unit_sphere(pts) : std::move(pts));
}

template <typename T = double>
PointCloud<T> load_xyz(const std::filesystem::path& path, bool normalize = false) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open point file '" + path.string() + "'");
  return parse_xyz<T>(in, normalize, path.string());
}

template <typename T>
void write_xyz(const std::filesystem::path& path, const Tensor<T>& pts) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write point file '" + path.string() + "'");
  char buf[96];
  for (std::size_t i = 0; i < pts.dim(0); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", static_cast<double>(pts.at(i, 0)),
                  static_cast<double>(pts.at(i, 1)), static_cast<double>(pts.at(i, 2)));
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

enum class Split { Train, Test };

inline const char* to_string(Split s) { return s == Split::Train ? "train" : "test"; }

struct ManifestEntry {
  std::string path;  // relative to the manifest root
  int label = 0;
  Split split = Split::Train;
};

/// `relative/path.xyz,<label>,<train|test>` lines under `root`. Class names live in a
/// `# classes: a,b,c` header line.
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return class_names.size(); }
  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == s) out.push_back(i);
    return out;
  }
};

inline constexpr const char* kManifestName = "manifest.csv";

inline void write_manifest(const DatasetManifest& m) {
  std::ofstream out(m.root / kManifestName);
  if (!out) throw UsageError("cannot write manifest under '" + m.root.string() + "'");
  out << "# classes: ";
  for (std::size_t i = 0; i < m.class_names.size(); ++i) out << (i ? "," : "") << m.class_names[i];
  out << "\n";
  for (const auto& e : m.entries) out << e.path << ',' << e.label << ',' << to_string(e.split) << "\n";
}

/// Reads and validates a manifest: labels dense in [0, classes), every file present.
inline DatasetManifest read_manifest(const std::filesystem::path& root) {
  const auto file = root / kManifestName;
  std::ifstream in(file);
  if (!in) throw UsageError("no manifest at '" + file.string() + "'");
  DatasetManifest m;
  m.root = root;
  std::string line;
  std::size_t lineno = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind("# classes:", 0) == 0) {
      std::istringstream ls(line.substr(10));
      for (std::string name; std::getline(ls, name, ',');) {
        name.erase(0, name.find_first_not_of(' '));
        if (!name.empty()) m.class_names.push_back(name);
      }
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string path, label, split;
    if (!std::getline(ls, path, ',') || !std::getline(ls, label, ',') || !std::getline(ls, split) ||
        path.empty()) {
      throw ParseError(file.string() + ": expected path,label,split", lineno);
    }
    ManifestEntry e;
    e.path = path;
    try {
      std::size_t used = 0;
      e.label = std::stoi(label, &used);
      if (used != label.size() || e.label < 0) throw std::invalid_argument("label");
    } catch (const std::exception&) {
      throw ParseError(file.string() + ": bad label '" + label + "'", lineno);
    }
    if (split == "train") {
      e.split = Split::Train;
    } else if (split == "test") {
      e.split = Split::Test;
    } else {
      throw ParseError(file.string() + ": split must be train or test, got '" + split + "'", lineno);
    }
    if (!std::filesystem::exists(root / e.path)) {
      throw UsageError("manifest line " + std::to_string(lineno) + ": missing file '" + (root / e.path).string() + "'");
    }
    max_label = std::max(max_label, e.label);
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw UsageError("manifest '" + file.string() + "' lists no items");
  if (m.class_names.empty()) {
    for (int i = 0; i <= max_label; ++i) m.class_names.push_back("class" + std::to_string(i));
  }
  std::vector<bool> seen(m.class_names.size(), false);
  for (const auto& e : m.entries) {
    if (static_cast<std::size_t>(e.label) >= m.class_names.size()) {
      throw UsageError("label " + std::to_string(e.label) + " outside the " + std::to_string(m.class_names.size()) +
                       " declared classes");
    }
    seen[e.label] = true;
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (!seen[c]) throw UsageError("labels are not dense: class " + std::to_string(c) + " has no items");
  }
  return m;
}

/// A loaded item: cloud plus label.
template <typename T>
struct Sample {
  std::string id;
  int label = 0;
  Tensor<T> points;
};

template <typename T>
std::vector<Sample<T>> load_split(const DatasetManifest& m, Split s) {
  std::vector<Sample<T>> out;
  for (std::size_t i : m.indices(s)) {
    const auto& e = m.entries[i];
    out.push_back({e.path, e.label, load_xyz<T>(m.root / e.path).points});
  }
  return out;
}

struct GenDataOptions {
  std::size_t classes = 6;
  std::size_t per_class = 40;
  std::size_t points = 256;
  double noise = 0.0;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Seed for item `index` of family `family`; stable regardless of how many items are generated.
inline std::uint64_t item_seed(std::uint64_t seed, std::size_t family, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(family), static_cast<std::uint32_t>(index)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t(words[0]) << 32) | words[1];
}

/// In-memory synthetic dataset; the last round(test_fraction · per_class) items of each class are test items.
template <typename T>
std::vector<std::pair<ManifestEntry, PointCloud<T>>> make_synthetic_dataset(const GenDataOptions& o) {
  if (o.classes == 0 || o.classes > kFamilies.size()) {
    throw UsageError("classes must lie in [1, " + std::to_string(kFamilies.size()) + "]");
  }
  if (o.per_class == 0) throw UsageError("per-class must be positive");
  if (!(o.test_fraction >= 0.0 && o.test_fraction < 1.0)) throw UsageError("test fraction must lie in [0, 1)");
  const auto n_test = static_cast<std::size_t>(std::llround(o.test_fraction * static_cast<double>(o.per_class)));
  std::vector<std::pair<ManifestEntry, PointCloud<T>>> out;
  for (std::size_t c = 0; c < o.classes; ++c) {
    const ShapeFamily fam = kFamilies[c];
    for (std::size_t i = 0; i < o.per_class; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s/%s_%04zu.xyz", to_string(fam), to_string(fam), i);
      ManifestEntry e{name, static_cast<int>(c), i + n_test >= o.per_class ? Split::Test : Split::Train};
      out.emplace_back(e, gen_synthetic<T>({fam, o.points, o.noise, item_seed(o.seed, c, i)}));
    }
  }
  return out;
}

/// Writes XYZ files plus manifest.csv under `root`.
inline DatasetManifest write_synthetic_dataset(const std::filesystem::path& root, const GenDataOptions& o) {
  auto items = make_synthetic_dataset<double>(o);
  DatasetManifest m;
  m.root = root;
  for (std::size_t c = 0; c < o.classes; ++c) {
    m.class_names.push_back(to_string(kFamilies[c]));
    std::filesystem::create_directories(root / to_string(kFamilies[c]));
  }
  for (auto& [e, pc] : items) {
    write_xyz(root / e.path, pc.points);
    m.entries.push_back(e);
  }
  write_manifest(m);
  return m;
}

// ---------------------------------------------------------------------------
// Sampling and augmentation
// ---------------------------------------------------------------------------

template <typename T>
struct Subsample {
  Tensor<T> points;
  std::vector<std::size_t> indices;
  bool with_replacement = false;
};

/// n points uniformly without replacement when the cloud has at least n, with replacement otherwise.
template <typename T>
Subsample<T> sample_points(const Tensor<T>& pts, std::size_t n, Rng& rng) {
  if (n == 0) throw UsageError("sample_points: n must be positive");
  const std::size_t N = pts.dim(0);
  Subsample<T> out;
  if (N >= n) {
    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, N - 1);
      std::swap(perm[i], perm[d(rng)]);
    }
    out.indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    out.with_replacement = true;
    std::uniform_int_distribution<std::size_t> d(0, N - 1);
    for (std::size_t i = 0; i < n; ++i) out.indices.push_back(d(rng));
  }
  out.points = Tensor<T>({n, 3});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(&pts[3 * out.indices[i]], 3, &out.points[3 * i]);
  return out;
}

enum class Augmentation { None, Rotate, ScaleTranslate };

inline const char* to_string(Augmentation a) {
  switch (a) {
    case Augmentation::None: return "none";
    case Augmentation::Rotate: return "rotate";
    case Augmentation::ScaleTranslate: return "scale_translate";
  }
  return "?";
}

inline Augmentation parse_augmentation(const std::string& s) {
  if (s == "none") return Augmentation::None;
  if (s == "rotate") return Augmentation::Rotate;
  if (s == "scale_translate") return Augmentation::ScaleTranslate;
  throw ConfigError("unknown augmentation '" + s + "' (none, rotate, scale_translate)");
}

/// Rotation by `angle` radians about the vertical (y) axis.
template <typename T>
Tensor<T> rotate_vertical(const Tensor<T>& pts, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  Tensor<T> out(pts.shape());
  for (std::size_t i = 0; i < pts.dim(0); ++i) {
    const double x = pts.at(i, 0), y = pts.at(i, 1), z = pts.at(i, 2);
    out.at(i, 0) = static_cast<T>(c * x + s * z);
    out.at(i, 1) = static_cast<T>(y);
    out.at(i, 2) = static_cast<T>(-s * x + c * z);
  }
  return out;
}

template <typename T>
Tensor<T> scale_translate(const Tensor<T>& pts, double scale, const std::array<double, 3>& shift) {
  Tensor<T> out(pts.shape());
  for (std::size_t i = 0; i < pts.dim(0); ++i)
    for (std::size_t d = 0; d < 3; ++d) out.at(i, d) = static_cast<T>(scale * pts.at(i, d) + shift[d]);
  return out;
}

/// rotate: uniform angle about the vertical axis. scale_translate: scale in [0.8, 1.2], shift in [-0.1, 0.1]^3.
template <typename T>
Tensor<T> augment(const Tensor<T>& pts, Augmentation kind, Rng& rng) {
  switch (kind) {
    case Augmentation::None: return pts;
    case Augmentation::Rotate:
      return rotate_vertical(pts, std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng));
    case Augmentation::ScaleTranslate: {
      std::uniform_real_distribution<double> s(0.8, 1.2), t(-0.1, 0.1);
      const double scale = s(rng);
      const std::array<double, 3> shift{t(rng), t(rng), t(rng)};
      return scale_translate(pts, scale, shift);
    }
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Few-shot episodes
// ---------------------------------------------------------------------------

inline constexpr std::size_t kQueryPerClass = 20;

/// Manifest indices of one episode; episode labels are positions in `classes`.
struct Episode {
  std::vector<int> classes;
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  int episode_label(int original) const {
    auto it = std::find(classes.begin(), classes.end(), original);
    return static_cast<int>(it - classes.begin());
  }
};

/// n_way classes without replacement; m_shot train items and 20 test items per class.
inline Episode few_shot_episode(const DatasetManifest& m, std::size_t n_way, std::size_t m_shot, Rng& rng) {
  const std::size_t classes = m.num_classes();
  if (n_way == 0 || n_way > classes) {
    throw UsageError("n_way " + std::to_string(n_way) + " exceeds the " + std::to_string(classes) + " classes");
  }
  std::vector<std::vector<std::size_t>> train(classes), test(classes);
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    (m.entries[i].split == Split::Train ? train : test)[m.entries[i].label].push_back(i);
  }
  std::vector<int> order(classes);
  std::iota(order.begin(), order.end(), 0);
  Episode ep;
  for (std::size_t i = 0; i < n_way; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, classes - 1);
    std::swap(order[i], order[d(rng)]);
    ep.classes.push_back(order[i]);
  }
  auto draw = [&](std::vector<std::size_t> pool, std::size_t k, std::vector<std::size_t>& into) {
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, pool.size() - 1);
      std::swap(pool[i], pool[d(rng)]);
      into.push_back(pool[i]);
    }
  };
  for (int c : ep.classes) {
    const std::string& name = m.class_names[c];
    if (train[c].size() < m_shot) {
      throw UsageError("class '" + name + "' has " + std::to_string(train[c].size()) + " train items, needs " +
                       std::to_string(m_shot));
    }
    if (test[c].size() < kQueryPerClass) {
      throw UsageError("class '" + name + "' has " + std::to_string(test[c].size()) + " test items, needs " +
                       std::to_string(kQueryPerClass));
    }
    draw(train[c], m_shot, ep.support);
    draw(test[c], kQueryPerClass, ep.query);
  }
  return ep;
}

}  // namespace femae
