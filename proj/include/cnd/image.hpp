#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cnd/autograd.hpp"

namespace cnd {

/// Row-major H x W x 3 image with values in [0, 1].
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  RgbImage() = default;
  RgbImage(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Binary ground-truth mask, 1 marks anomalous pixels.
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ImageSample {
  RgbImage pixels;
  std::string category;
  std::optional<Mask> mask;
  bool is_anomalous = false;
  std::string source;  // file path or generator id, for reporting

  /// Throws InputError when pixels leave [0, 1] or the mask size differs.
  void validate() const;
};

}  // namespace cnd
