#pragma once

// Point clouds, exact nearest-neighbour matching and the shape metrics:
// Chamfer, Hausdorff and multi-scale Chamfer distance, plus farthest-point
// sampling.

#include "lcd/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lcd {

using Point = std::array<double, 3>;

class PointCloud {
 public:
  explicit PointCloud(std::vector<Point> points) : points_(std::move(points)) {
    if (points_.empty()) throw std::invalid_argument("point cloud: must hold at least one point");
    for (std::size_t i = 0; i < points_.size(); ++i)
      for (double c : points_[i])
        if (!std::isfinite(c))
          throw std::invalid_argument("point cloud: non-finite coordinate at point " +
                                      std::to_string(i));
  }

  static PointCloud from_tensor(const ad::Tensor& t) {
    if (t.rank() != 2 || t.cols() != 3)
      throw std::invalid_argument("point cloud: expected an [n,3] tensor, got " +
                                  ad::to_string(t.shape()));
    std::vector<Point> pts(t.rows());
    for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
    return PointCloud(std::move(pts));
  }

  ad::Tensor to_tensor() const {
    ad::Tensor t({points_.size(), 3});
    for (std::size_t i = 0; i < points_.size(); ++i)
      for (std::size_t c = 0; c < 3; ++c) t.at(i, c) = points_[i][c];
    return t;
  }

  std::size_t size() const { return points_.size(); }
  const Point& operator[](std::size_t i) const { return points_[i]; }
  std::span<const Point> points() const { return points_; }
  auto begin() const { return points_.begin(); }
  auto end() const { return points_.end(); }

  bool operator==(const PointCloud&) const = default;

 private:
  std::vector<Point> points_;
};

inline double squared_distance(const Point& a, const Point& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

struct Matching {
  std::vector<std::size_t> indices;  // nearest target index per source point
  std::vector<double> distances;     // Euclidean distance to that target point
};

enum class NnMethod { brute, kdtree };

// Unsquared Euclidean distances follow the usual Chamfer notation; `squared`
// reproduces the variant many public implementations use.
enum class DistanceMode { euclidean, squared };

// Exact k=1 kd-tree with median splits on the widest axis. Ties resolve to the
// lowest target index, so results are identical to brute force.
class KdTree {
 public:
  static constexpr std::size_t kLeafSize = 16;

  explicit KdTree(const PointCloud& cloud) : cloud_(&cloud), order_(cloud.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * cloud.size() / kLeafSize + 2);
    build(0, order_.size());
  }

  // Returns {index, squared distance}.
  std::pair<std::size_t, double> nearest(const Point& q) const {
    Best best{std::numeric_limits<std::size_t>::max(), std::numeric_limits<double>::infinity()};
    search(0, q, best);
    return {best.index, best.d2};
  }

 private:
  struct Node {
    std::size_t begin, end;
    std::size_t axis = 0;
    double split = 0.0;
    std::size_t left = 0, right = 0;  // child node ids; leaf when left == right == 0
  };
  struct Best {
    std::size_t index;
    double d2;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{begin, end});
    if (end - begin <= kLeafSize) return id;

    const auto& pts = *cloud_;
    Point lo = pts[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t c = 0; c < 3; ++c) {
        lo[c] = std::min(lo[c], pts[order_[i]][c]);
        hi[c] = std::max(hi[c], pts[order_[i]][c]);
      }
    std::size_t axis = 0;
    for (std::size_t c = 1; c < 3; ++c)
      if (hi[c] - lo[c] > hi[axis] - lo[axis]) axis = c;

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return pts[a][axis] < pts[b][axis]; });
    const double split = pts[order_[mid]][axis];
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    Node& n = nodes_[id];
    n.axis = axis;
    n.split = split;
    n.left = left;
    n.right = right;
    return id;
  }

  void search(std::size_t id, const Point& q, Best& best) const {
    const Node& n = nodes_[id];
    if (n.left == 0 && n.right == 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t idx = order_[i];
        const double d2 = squared_distance(q, (*cloud_)[idx]);
        if (d2 < best.d2 || (d2 == best.d2 && idx < best.index)) best = {idx, d2};
      }
      return;
    }
    // Points left of the split have coordinate <= split, right ones >= split.
    const double diff = q[n.axis] - n.split;
    const std::size_t near = diff < 0.0 ? n.left : n.right;
    const std::size_t far = diff < 0.0 ? n.right : n.left;
    search(near, q, best);
    if (diff * diff <= best.d2) search(far, q, best);
  }

  const PointCloud* cloud_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

inline Matching nn_match(const PointCloud& source, const PointCloud& target,
                         NnMethod method = NnMethod::kdtree) {
  Matching m;
  m.indices.resize(source.size());
  m.distances.resize(source.size());
  if (method == NnMethod::brute) {
    for (std::size_t i = 0; i < source.size(); ++i) {
      std::size_t best = 0;
      double best_d2 = squared_distance(source[i], target[0]);
      for (std::size_t j = 1; j < target.size(); ++j) {
        const double d2 = squared_distance(source[i], target[j]);
        if (d2 < best_d2) {
          best_d2 = d2;
          best = j;
        }
      }
      m.indices[i] = best;
      m.distances[i] = std::sqrt(best_d2);
    }
    return m;
  }
  const KdTree tree(target);
  for (std::size_t i = 0; i < source.size(); ++i) {
    const auto [idx, d2] = tree.nearest(source[i]);
    m.indices[i] = idx;
    m.distances[i] = std::sqrt(d2);
  }
  return m;
}

namespace detail {
inline double mean_of(const std::vector<double>& v, DistanceMode mode) {
  double s = 0.0;
  for (double d : v) s += mode == DistanceMode::squared ? d * d : d;
  return s / static_cast<double>(v.size());
}
}  // namespace detail

inline double chamfer(const PointCloud& a, const PointCloud& b,
                      DistanceMode mode = DistanceMode::euclidean,
                      NnMethod method = NnMethod::kdtree) {
  const auto ab = nn_match(a, b, method);
  const auto ba = nn_match(b, a, method);
  return 0.5 * (detail::mean_of(ab.distances, mode) + detail::mean_of(ba.distances, mode));
}

inline double directed_hausdorff(const PointCloud& a, const PointCloud& b,
                                 NnMethod method = NnMethod::kdtree) {
  const auto ab = nn_match(a, b, method);
  return *std::max_element(ab.distances.begin(), ab.distances.end());
}

inline double hausdorff(const PointCloud& a, const PointCloud& b,
                        NnMethod method = NnMethod::kdtree) {
  return std::max(directed_hausdorff(a, b, method), directed_hausdorff(b, a, method));
}

// Greedy farthest-point subset of size k, in selection order, starting at
// seed_index. Ties pick the lowest index.
inline PointCloud fps(const PointCloud& cloud, std::size_t k, std::size_t seed_index = 0) {
  const std::size_t n = cloud.size();
  if (k < 1 || k > n)
    throw std::invalid_argument("fps: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(n) + "]");
  if (seed_index >= n) throw std::invalid_argument("fps: seed index out of range");
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<Point> out;
  out.reserve(k);
  std::size_t current = seed_index;
  for (std::size_t s = 0; s < k; ++s) {
    out.push_back(cloud[current]);
    dist[current] = -1.0;
    std::size_t next = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (dist[i] < 0.0) continue;
      dist[i] = std::min(dist[i], squared_distance(cloud[i], cloud[current]));
      if (dist[i] > best) {
        best = dist[i];
        next = i;
      }
    }
    current = next;
  }
  return PointCloud(std::move(out));
}

// Index of the lexicographically smallest point; a start for FPS that does
// not depend on point order.
inline std::size_t canonical_seed(const PointCloud& cloud) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < cloud.size(); ++i)
    if (cloud[i] < cloud[best]) best = i;
  return best;
}

inline const std::vector<double>& default_mcd_scales() {
  static const std::vector<double> scales{1.0, 0.5, 0.25};
  return scales;
}

// Mean Chamfer distance over FPS-downsampled copies of both clouds, one per
// scale fraction; each copy keeps max(1, floor(n * fraction)) points.
inline double mcd(const PointCloud& a, const PointCloud& b,
                  std::span<const double> scales = default_mcd_scales()) {
  if (scales.empty()) throw std::invalid_argument("mcd: no scales given");
  auto keep = [](std::size_t n, double f) {
    if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("mcd: scale fractions must lie in (0,1]");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(n) * f)));
  };
  const std::size_t seed_a = canonical_seed(a), seed_b = canonical_seed(b);
  double total = 0.0;
  for (double f : scales) {
    total += chamfer(fps(a, keep(a.size(), f), seed_a), fps(b, keep(b.size(), f), seed_b));
  }
  return total / static_cast<double>(scales.size());
}

}  // namespace lcd
