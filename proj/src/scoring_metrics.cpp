#include "cnd/scoring_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "cnd/errors.hpp"
#include "cnd/pipeline.hpp"

namespace cnd {

Mat cosine_distance_grid(const Mat& encoded, const Mat& decoded, int grid_h, int grid_w, int* degenerate) {
  if (encoded.rows() != decoded.rows() || encoded.cols() != decoded.cols())
    throw ConfigError("anomaly_map: encoded and decoded grids differ in shape");
  if (encoded.rows() != static_cast<Index>(grid_h) * grid_w)
    throw ConfigError("anomaly_map: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " does not match " +
                      std::to_string(encoded.rows()) + " patches");
  Mat out(grid_h, grid_w);
  for (Index r = 0; r < encoded.rows(); ++r) {
    const double na = encoded.row(r).norm();
    const double nb = decoded.row(r).norm();
    double d = 0.0;
    if (na > 0.0 && nb > 0.0) {
      const double cos = std::clamp(encoded.row(r).dot(decoded.row(r)) / (na * nb), -1.0, 1.0);
      d = 1.0 - cos;
    } else if (degenerate) {
      ++*degenerate;
    }
    out.data()[r] = d;
  }
  return out;
}

Mat upsample_bilinear(const Mat& grid, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1 || grid.size() == 0) throw ConfigError("upsample: empty input or output size");
  const Index in_h = grid.rows(), in_w = grid.cols();
  auto coord = [](int o, int out_n, Index in_n, Index& i0, double& t) {
    const double s = out_n > 1 ? static_cast<double>(o) * static_cast<double>(in_n - 1) / (out_n - 1) : 0.0;
    i0 = std::min<Index>(static_cast<Index>(std::floor(s)), in_n - 1);
    t = s - static_cast<double>(i0);
  };
  Mat out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    Index y0;
    double ty;
    coord(y, out_h, in_h, y0, ty);
    const Index y1 = std::min(y0 + 1, in_h - 1);
    for (int x = 0; x < out_w; ++x) {
      Index x0;
      double tx;
      coord(x, out_w, in_w, x0, tx);
      const Index x1 = std::min(x0 + 1, in_w - 1);
      const double top = (1.0 - tx) * grid(y0, x0) + tx * grid(y0, x1);
      const double bottom = (1.0 - tx) * grid(y1, x0) + tx * grid(y1, x1);
      out(y, x) = (1.0 - ty) * top + ty * bottom;
    }
  }
  return out;
}

Mat gaussian_smooth(const Mat& map, double sigma) {
  if (!(sigma > 0.0)) return map;
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double total = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= total;
  const Index h = map.rows(), w = map.cols();
  Mat tmp(h, w), out(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * map(y, std::clamp<Index>(x + i, 0, w - 1));
      tmp(y, x) = acc;
    }
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * tmp(std::clamp<Index>(y + i, 0, h - 1), x);
      out(y, x) = acc;
    }
  return out;
}

AnomalyResult anomaly_map(std::span<const Mat, 3> encoded, std::span<const Mat, 3> decoded, int grid_h, int grid_w,
                          int out_h, int out_w) {
  AnomalyResult res;
  res.pixel_map = Mat::Zero(out_h, out_w);
  for (std::size_t i = 0; i < 3; ++i)
    res.pixel_map += upsample_bilinear(cosine_distance_grid(encoded[i], decoded[i], grid_h, grid_w, &res.degenerate_patches),
                                       out_h, out_w);
  res.image_score = res.pixel_map.maxCoeff();
  return res;
}

AnomalyResult anomaly_map(std::span<const PromotedFeature, 3> encoded, std::span<const PromotedFeature, 3> decoded,
                          int out_h, int out_w) {
  std::array<Mat, 3> a, b;
  for (std::size_t i = 0; i < 3; ++i) {
    a[i] = encoded[i].patches;
    b[i] = decoded[i].patches;
  }
  return anomaly_map(a, b, encoded[0].grid_h, encoded[0].grid_w, out_h, out_w);
}

namespace {

void check_pairs(std::span<const double> scores, std::span<const std::uint8_t> labels, const char* what) {
  if (scores.size() != labels.size())
    throw ConfigError(std::string(what) + ": " + std::to_string(scores.size()) + " scores for " +
                      std::to_string(labels.size()) + " labels");
  for (double s : scores)
    if (!std::isfinite(s)) throw InputError(std::string(what) + ": non-finite score");
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_pairs(scores, labels, "auroc");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[idx[t]]) {
        pos += 1.0;
        rank_sum += avg_rank;
      } else {
        neg += 1.0;
      }
    }
    i = j;
  }
  if (pos == 0.0 || neg == 0.0) throw UndefinedMetricError("auroc: both classes must be present");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_pairs(scores, labels, "average_precision");
  const double total_pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  if (total_pos == 0.0) throw UndefinedMetricError("average_precision: no positive labels");
  const auto idx = descending_order(scores);
  double tp = 0.0, fp = 0.0, prev_recall = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

std::vector<int> label_regions(const Mask& mask, int connectivity, int* count) {
  if (connectivity != 4 && connectivity != 8) throw ConfigError("label_regions: connectivity must be 4 or 8");
  const Index h = mask.rows(), w = mask.cols();
  std::vector<int> labels(static_cast<std::size_t>(h * w), 0);
  std::vector<Index> stack;
  int next = 0;
  for (Index start = 0; start < h * w; ++start) {
    if (!mask.data()[start] || labels[static_cast<std::size_t>(start)]) continue;
    ++next;
    labels[static_cast<std::size_t>(start)] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const Index p = stack.back();
      stack.pop_back();
      const Index y = p / w, x = p % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if ((dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0)) continue;
          const Index ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const Index q = ny * w + nx;
          if (mask.data()[q] && !labels[static_cast<std::size_t>(q)]) {
            labels[static_cast<std::size_t>(q)] = next;
            stack.push_back(q);
          }
        }
    }
  }
  if (count) *count = next;
  return labels;
}

double aupro(std::span<const Mat> maps, std::span<const Mask> masks, double fpr_limit, int connectivity) {
  if (maps.size() != masks.size()) throw ConfigError("aupro: maps and masks differ in count");
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("aupro: fpr_limit must be in (0, 1]");

  struct Pixel {
    double score;
    int region;  // -1: normal pixel
  };
  std::vector<Pixel> pixels;
  std::vector<double> region_size;
  double normal = 0.0;
  for (std::size_t m = 0; m < maps.size(); ++m) {
    if (maps[m].rows() != masks[m].rows() || maps[m].cols() != masks[m].cols())
      throw ConfigError("aupro: map and mask " + std::to_string(m) + " differ in size");
    int count = 0;
    const auto labels = label_regions(masks[m], connectivity, &count);
    const int base = static_cast<int>(region_size.size());
    region_size.resize(region_size.size() + static_cast<std::size_t>(count), 0.0);
    for (Index p = 0; p < maps[m].size(); ++p) {
      const double s = maps[m].data()[p];
      if (!std::isfinite(s)) throw InputError("aupro: non-finite score");
      const int l = labels[static_cast<std::size_t>(p)];
      if (l) {
        region_size[static_cast<std::size_t>(base + l - 1)] += 1.0;
        pixels.push_back({s, base + l - 1});
      } else {
        normal += 1.0;
        pixels.push_back({s, -1});
      }
    }
  }
  if (region_size.empty()) throw UndefinedMetricError("aupro: no anomalous regions");
  if (normal == 0.0) throw UndefinedMetricError("aupro: no normal pixels");
  std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

  const double regions = static_cast<double>(region_size.size());
  double fp = 0.0, pro_sum = 0.0, prev_fpr = 0.0, prev_pro = 0.0, area = 0.0;
  for (std::size_t i = 0; i < pixels.size();) {
    std::size_t j = i;
    while (j < pixels.size() && pixels[j].score == pixels[i].score) {
      if (pixels[j].region < 0)
        fp += 1.0;
      else
        pro_sum += 1.0 / region_size[static_cast<std::size_t>(pixels[j].region)];
      ++j;
    }
    const double fpr = fp / normal;
    const double pro = pro_sum / regions;
    if (fpr >= fpr_limit) {
      const double t = fpr > prev_fpr ? (fpr_limit - prev_fpr) / (fpr - prev_fpr) : 1.0;
      const double pro_at_limit = prev_pro + t * (pro - prev_pro);
      area += 0.5 * (fpr_limit - prev_fpr) * (prev_pro + pro_at_limit);
      return area / fpr_limit;
    }
    area += 0.5 * (fpr - prev_fpr) * (prev_pro + pro);
    prev_fpr = fpr;
    prev_pro = pro;
    i = j;
  }
  return area / fpr_limit;  // unreachable: the last threshold has fpr = 1
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << "category,i_auroc,p_auroc,aupro,i_map,p_map\n";
  auto row = [&](const CategoryMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f\n", m.category.c_str(), m.i_auroc, m.p_auroc, m.aupro,
                  m.i_map, m.p_map);
    out << buf;
  };
  for (const auto& c : categories) row(c);
  row(mean);
  return out.str();
}

MetricsReport compute_report(std::span<const ScoredSample> samples, const MetricOptions& options) {
  std::map<std::string, std::vector<const ScoredSample*>> by_category;
  for (const auto& s : samples) by_category[s.category].push_back(&s);
  if (by_category.empty()) throw InputError("evaluate: empty test set");

  MetricsReport report;
  report.mean.category = "mean";
  for (const auto& [name, items] : by_category) {
    try {
      std::vector<double> img_scores, px_scores;
      std::vector<std::uint8_t> img_labels, px_labels;
      std::vector<Mat> maps;
      std::vector<Mask> masks;
      for (const ScoredSample* s : items) {
        const Mat& map = s->result.pixel_map;
        if (s->mask.rows() != map.rows() || s->mask.cols() != map.cols())
          throw InputError("mask of " + std::to_string(s->mask.rows()) + "x" + std::to_string(s->mask.cols()) +
                           " does not match map of " + std::to_string(map.rows()) + "x" + std::to_string(map.cols()));
        img_scores.push_back(s->result.image_score);
        img_labels.push_back(s->is_anomalous ? 1 : 0);
        for (Index p = 0; p < map.size(); ++p) {
          px_scores.push_back(map.data()[p]);
          px_labels.push_back(s->mask.data()[p] ? 1 : 0);
        }
        maps.push_back(map);
        masks.push_back(s->mask);
      }
      CategoryMetrics m;
      m.category = name;
      m.i_auroc = auroc(img_scores, img_labels);
      m.p_auroc = auroc(px_scores, px_labels);
      m.aupro = aupro(maps, masks, options.fpr_limit, options.connectivity);
      m.i_map = average_precision(img_scores, img_labels);
      m.p_map = average_precision(px_scores, px_labels);
      report.categories.push_back(m);
    } catch (const UndefinedMetricError& e) {
      throw UndefinedMetricError("category " + name + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError("category " + name + ": " + e.what());
    }
  }
  const double n = static_cast<double>(report.categories.size());
  for (const auto& c : report.categories) {
    report.mean.i_auroc += c.i_auroc / n;
    report.mean.p_auroc += c.p_auroc / n;
    report.mean.aupro += c.aupro / n;
    report.mean.i_map += c.i_map / n;
    report.mean.p_map += c.p_map / n;
  }
  return report;
}

std::vector<AnomalyResult> score_images(const Model& model, std::span<const ImageSample> images, double smoothing_sigma) {
  constexpr std::size_t kChunk = 16;
  std::vector<AnomalyResult> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const auto chunk = images.subspan(start, std::min(kChunk, images.size() - start));
    const ForwardOutputs f = model.forward(chunk, false, 0.0, NoiseInto::off, nullptr);
    const Index hw = f.rows_per_image;
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::array<Mat, 3> enc, dec;
      for (std::size_t i = 0; i < 3; ++i) {
        enc[i] = f.encoded[i].value().middleRows(static_cast<Index>(b) * hw, hw);
        dec[i] = f.decoded[i].value().middleRows(static_cast<Index>(b) * hw, hw);
      }
      AnomalyResult r =
          anomaly_map(enc, dec, f.grid_h, f.grid_w, chunk[b].pixels.height, chunk[b].pixels.width);
      if (smoothing_sigma > 0.0) {
        r.pixel_map = gaussian_smooth(r.pixel_map, smoothing_sigma);
        r.image_score = r.pixel_map.maxCoeff();
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

MetricsReport evaluate(const Model& model, std::span<const ImageSample> test_set, const MetricOptions& options,
                       double smoothing_sigma) {
  auto results = score_images(model, test_set, smoothing_sigma);
  std::vector<ScoredSample> scored;
  scored.reserve(test_set.size());
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const auto& s = test_set[i];
    ScoredSample ss;
    ss.category = s.category;
    ss.is_anomalous = s.is_anomalous;
    ss.result = std::move(results[i]);
    ss.mask = s.mask ? *s.mask : Mask::Zero(s.pixels.height, s.pixels.width);
    scored.push_back(std::move(ss));
  }
  return compute_report(scored, options);
}

}  // namespace cnd
