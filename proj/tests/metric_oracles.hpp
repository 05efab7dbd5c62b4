#pragma once

// Brute-force metric references: every threshold is evaluated from scratch.

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "cnd/image.hpp"
#include "test_util.hpp"

namespace cnd::testing {

using Labels = std::vector<std::uint8_t>;

inline double pairwise_auroc(const std::vector<double>& s, const Labels& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] && !y[j]) {
        den += 1.0;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / den;
}

// Precision at every distinct threshold, recomputed from scratch.
inline double threshold_ap(const std::vector<double>& s, const Labels& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double pos = 0.0;
  for (auto l : y) pos += l;
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) (y[i] ? tp : fp) += 1.0;
    const double recall = tp / pos;
    ap += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
  }
  return ap;
}

// Flood-fill regions, then every distinct threshold evaluated independently.
inline double threshold_aupro(const std::vector<Mat>& maps, const std::vector<Mask>& masks, double limit,
                              int connectivity = 8) {
  struct Region {
    std::size_t image;
    std::vector<Index> pixels;
  };
  std::vector<Region> regions;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    Mask seen = Mask::Zero(masks[m].rows(), masks[m].cols());
    for (Index y = 0; y < masks[m].rows(); ++y)
      for (Index x = 0; x < masks[m].cols(); ++x) {
        if (!masks[m](y, x) || seen(y, x)) continue;
        Region r{m, {}};
        std::vector<std::pair<Index, Index>> stack{{y, x}};
        seen(y, x) = 1;
        while (!stack.empty()) {
          auto [cy, cx] = stack.back();
          stack.pop_back();
          r.pixels.push_back(cy * masks[m].cols() + cx);
          for (Index dy = -1; dy <= 1; ++dy)
            for (Index dx = -1; dx <= 1; ++dx) {
              if (connectivity == 4 && dy != 0 && dx != 0) continue;
              const Index ny = cy + dy, nx = cx + dx;
              if (ny < 0 || nx < 0 || ny >= masks[m].rows() || nx >= masks[m].cols()) continue;
              if (masks[m](ny, nx) && !seen(ny, nx)) {
                seen(ny, nx) = 1;
                stack.push_back({ny, nx});
              }
            }
        }
        regions.push_back(std::move(r));
      }
  }
  std::set<double, std::greater<>> thresholds;
  double normal = 0.0;
  for (std::size_t m = 0; m < maps.size(); ++m)
    for (Index p = 0; p < maps[m].size(); ++p) {
      thresholds.insert(maps[m].data()[p]);
      normal += masks[m].data()[p] == 0;
    }
  std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
  for (double t : thresholds) {
    double fp = 0.0;
    for (std::size_t m = 0; m < maps.size(); ++m)
      for (Index p = 0; p < maps[m].size(); ++p) fp += masks[m].data()[p] == 0 && maps[m].data()[p] >= t;
    double pro = 0.0;
    for (const auto& r : regions) {
      double hit = 0.0;
      for (Index p : r.pixels) hit += maps[r.image].data()[p] >= t;
      pro += hit / static_cast<double>(r.pixels.size());
    }
    curve.push_back({fp / normal, pro / static_cast<double>(regions.size())});
  }
  double area = 0.0;
  for (std::size_t k = 1; k < curve.size(); ++k) {
    auto [x0, y0] = curve[k - 1];
    auto [x1, y1] = curve[k];
    if (x1 >= limit) {
      const double y = x1 > x0 ? y0 + (limit - x0) / (x1 - x0) * (y1 - y0) : y1;
      area += 0.5 * (limit - x0) * (y0 + y);
      break;
    }
    area += 0.5 * (x1 - x0) * (y0 + y1);
  }
  return area / limit;
}

struct Fixture {
  std::vector<Mat> maps;
  std::vector<Mask> masks;
};

inline Fixture random_fixture(std::uint64_t seed, int n, int size, bool quantize) {
  Rng rng(seed);
  std::uniform_int_distribution<int> pos(0, size - 1), len(1, size / 2);
  Fixture f;
  for (int i = 0; i < n; ++i) {
    Mask m = Mask::Zero(size, size);
    for (int blobs = 0; blobs < 2; ++blobs) {
      const int y = pos(rng), x = pos(rng), h = len(rng), w = len(rng);
      m.block(y, x, std::min(h, size - y), std::min(w, size - x)).setOnes();
    }
    Mat s = random_mat(size, size, rng());
    for (Index p = 0; p < s.size(); ++p) {
      if (m.data()[p]) s.data()[p] += 1.0;
      if (quantize) s.data()[p] = std::round(s.data()[p] * 2.0) / 2.0;
    }
    f.maps.push_back(s);
    f.masks.push_back(m);
  }
  return f;
}


}  // namespace cnd::testing
