#pragma once

// Synthetic shape datasets, normalisation, and the xyz / manifest file formats.
//
// xyz: one point per line, three whitespace-separated decimal floats. Blank
// lines are ignored. Written with 17 significant digits so a save/load
// round trip is exact.
// manifest: one xyz path per line; relative paths resolve against the
// manifest's own directory.

#include "lcd/geometry.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lcd {

enum class Family { sphere, cube, cylinder, torus };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::sphere: return "sphere";
    case Family::cube: return "cube";
    case Family::cylinder: return "cylinder";
    case Family::torus: return "torus";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  for (Family f : {Family::sphere, Family::cube, Family::cylinder, Family::torus})
    if (s == family_name(f)) return f;
  throw std::invalid_argument("unknown shape family '" + std::string(s) + "'");
}

inline std::vector<Family> all_families() {
  return {Family::sphere, Family::cube, Family::cylinder, Family::torus};
}

enum class Split { train, eval };

struct Dataset {
  std::vector<PointCloud> clouds;
  std::vector<std::string> labels;  // shape family per cloud, may be empty strings
  Split split = Split::train;

  std::size_t size() const { return clouds.size(); }
};

struct Normalized {
  PointCloud cloud;
  Point centroid;
  double scale;
  bool degenerate;  // every point coincided; scale forced to 1
};

// Translate to zero centroid and scale to unit max radius. The original is
// recovered as centroid + scale * p.
inline Normalized normalize(const PointCloud& cloud) {
  Point c{0.0, 0.0, 0.0};
  for (const auto& p : cloud)
    for (std::size_t k = 0; k < 3; ++k) c[k] += p[k];
  for (auto& v : c) v /= static_cast<double>(cloud.size());
  std::vector<Point> pts(cloud.size());
  double radius = 0.0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) pts[i][k] = cloud[i][k] - c[k];
    radius = std::max(radius, std::sqrt(squared_distance(pts[i], Point{0.0, 0.0, 0.0})));
  }
  const bool degenerate = !(radius > 0.0);
  const double scale = degenerate ? 1.0 : radius;
  for (auto& p : pts)
    for (auto& v : p) v /= scale;
  return {PointCloud(std::move(pts)), c, scale, degenerate};
}

namespace detail {

// One surface sample of a shape centred at the origin. Every family is
// symmetric under p -> -p, which the generator uses to pair samples.
struct ShapeSampler {
  Family family;
  Point extent{1.0, 1.0, 1.0};  // cube half-extents; cylinder {radius, half-height}; torus {R, r}

  Point sample(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    switch (family) {
      case Family::sphere: {
        std::normal_distribution<double> g;
        for (;;) {
          Point p{g(rng), g(rng), g(rng)};
          const double r = std::sqrt(squared_distance(p, Point{0.0, 0.0, 0.0}));
          if (r > 1e-12) return {p[0] / r, p[1] / r, p[2] / r};
        }
      }
      case Family::cube: {
        const auto& h = extent;
        const double ax = h[1] * h[2], ay = h[0] * h[2], az = h[0] * h[1];
        const double pick = u01(rng) * (ax + ay + az);
        const std::size_t axis = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
        Point p;
        for (std::size_t k = 0; k < 3; ++k) p[k] = (2.0 * u01(rng) - 1.0) * h[k];
        p[axis] = u01(rng) < 0.5 ? -h[axis] : h[axis];
        return p;
      }
      case Family::cylinder: {
        const double r = extent[0], hh = extent[1];
        const double lateral = 2.0 * hh / (2.0 * hh + r);
        const double phi = two_pi * u01(rng);
        if (u01(rng) < lateral) return {r * std::cos(phi), r * std::sin(phi), (2.0 * u01(rng) - 1.0) * hh};
        const double rho = r * std::sqrt(u01(rng));
        return {rho * std::cos(phi), rho * std::sin(phi), u01(rng) < 0.5 ? -hh : hh};
      }
      case Family::torus: {
        const double big = extent[0], small = extent[1];
        for (;;) {
          const double theta = two_pi * u01(rng);
          const double phi = two_pi * u01(rng);
          const double ring = big + small * std::cos(theta);
          if (u01(rng) * (big + small) <= ring)
            return {ring * std::cos(phi), ring * std::sin(phi), small * std::sin(theta)};
        }
      }
    }
    throw std::logic_error("unhandled family");
  }
};

}  // namespace detail

// `count` clouds, family k % |families| for the k-th cloud, each normalised.
// Samples come in antipodal pairs, so with an even point count and no noise
// the centroid is exactly the shape centre; an odd count adds one unpaired sample.
// Shape proportions are drawn per cloud: cuboid half-extents in [0.5,1],
// cylinder half-height in [0.5,1.5] at unit radius, torus tube radius in
// [0.25,0.5] at unit ring radius.
inline Dataset gen_shapes(std::span<const Family> families, std::size_t count, std::size_t points,
                          double noise_std, std::uint64_t seed, Split split = Split::train) {
  if (families.empty()) throw std::invalid_argument("gen_shapes: empty family set");
  if (count < 1) throw std::invalid_argument("gen_shapes: count must be >= 1");
  if (points < 8) throw std::invalid_argument("gen_shapes: need at least 8 points per cloud");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("gen_shapes: noise_std must be >= 0");

  std::vector<Family> fams(families.begin(), families.end());
  std::sort(fams.begin(), fams.end());
  fams.erase(std::unique(fams.begin(), fams.end()), fams.end());

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 1.0);
  Dataset ds;
  ds.split = split;
  for (std::size_t k = 0; k < count; ++k) {
    detail::ShapeSampler sampler{fams[k % fams.size()]};
    switch (sampler.family) {
      case Family::sphere: break;
      case Family::cube:
        for (auto& h : sampler.extent) h = 0.5 + 0.5 * u01(rng);
        break;
      case Family::cylinder: sampler.extent = {1.0, 0.5 + u01(rng), 0.0}; break;
      case Family::torus: sampler.extent = {1.0, 0.25 + 0.25 * u01(rng), 0.0}; break;
    }
    std::vector<Point> pts;
    pts.reserve(points);
    while (pts.size() + 1 < points) {
      Point p = sampler.sample(rng);
      pts.push_back(p);
      pts.push_back({-p[0], -p[1], -p[2]});
    }
    if (pts.size() < points) pts.push_back(sampler.sample(rng));
    if (noise_std > 0.0)
      for (auto& p : pts)
        for (auto& v : p) v += noise_std * jitter(rng);
    ds.clouds.push_back(normalize(PointCloud(std::move(pts))).cloud);
    ds.labels.emplace_back(family_name(sampler.family));
  }
  return ds;
}

inline PointCloud load_xyz(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("xyz: cannot open " + path.string());
  std::vector<Point> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (!rest.empty()) {
      const auto start = rest.find_first_not_of(" \t\r");
      if (start == std::string_view::npos) break;
      rest.remove_prefix(start);
      const auto stop = rest.find_first_of(" \t\r");
      fields.push_back(rest.substr(0, stop));
      rest.remove_prefix(stop == std::string_view::npos ? rest.size() : stop);
    }
    if (fields.empty()) continue;
    const std::string where = "xyz " + path.string() + ": line " + std::to_string(lineno);
    if (fields.size() != 3)
      throw std::runtime_error(where + ": expected 3 fields, got " + std::to_string(fields.size()));
    Point p;
    for (std::size_t k = 0; k < 3; ++k) {
      const auto f = fields[k];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), p[k]);
      if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(p[k]))
        throw std::runtime_error(where + ": malformed number '" + std::string(f) + "'");
    }
    pts.push_back(p);
  }
  if (pts.empty()) throw std::runtime_error("xyz " + path.string() + ": no points");
  return PointCloud(std::move(pts));
}

inline void save_xyz(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("xyz: cannot open " + path.string() + " for writing");
  char buf[96];
  for (const auto& p : cloud) {
    std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    os << buf;
  }
  if (!os) throw std::runtime_error("xyz: write failed for " + path.string());
}

inline std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("manifest: cannot open " + path.string());
  std::vector<std::filesystem::path> out;
  std::string line;
  while (std::getline(is, line)) {
    const auto a = line.find_first_not_of(" \t\r");
    if (a == std::string::npos) continue;
    const auto b = line.find_last_not_of(" \t\r");
    std::filesystem::path p = line.substr(a, b - a + 1);
    out.push_back(p.is_relative() ? path.parent_path() / p : p);
  }
  if (out.empty()) throw std::runtime_error("manifest " + path.string() + ": no entries");
  return out;
}

inline void write_manifest(std::span<const std::filesystem::path> entries,
                           const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("manifest: cannot open " + path.string() + " for writing");
  for (const auto& e : entries) os << e.generic_string() << '\n';
  if (!os) throw std::runtime_error("manifest: write failed for " + path.string());
}

// Family tag from a file name like "torus_0007.xyz"; the whole stem otherwise.
inline std::string label_from_path(const std::filesystem::path& p) {
  const std::string stem = p.stem().string();
  const auto cut = stem.find_last_of('_');
  if (cut == std::string::npos || cut + 1 == stem.size()) return stem;
  const bool digits = std::all_of(stem.begin() + static_cast<std::ptrdiff_t>(cut) + 1, stem.end(),
                                  [](unsigned char ch) { return std::isdigit(ch); });
  return digits ? stem.substr(0, cut) : stem;
}

// Loads every manifest entry, normalised like generated data.
inline Dataset load_dataset(const std::filesystem::path& manifest, bool normalise = true) {
  Dataset ds;
  for (const auto& p : read_manifest(manifest)) {
    PointCloud c = load_xyz(p);
    ds.clouds.push_back(normalise ? normalize(c).cloud : c);
    ds.labels.push_back(label_from_path(p));
  }
  return ds;
}

}  // namespace lcd
