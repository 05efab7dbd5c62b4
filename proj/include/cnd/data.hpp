#pragma once

// MVTec-style dataset layout, the procedural defect generator, image and raw
// score-map I/O, and heatmap rendering.
//
//   <root>/<category>/train/good/*.png
//   <root>/<category>/test/good/*.png
//   <root>/<category>/test/<defect>/*.png
//   <root>/<category>/ground_truth/<defect>/<stem>_mask.png

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cnd/image.hpp"
#include "cnd/scoring_metrics.hpp"

namespace cnd {

enum class DefectKind { patch_swap, intensity_blot, scratch_line };
DefectKind parse_defect_kind(const std::string& s);
std::string to_string(DefectKind kind);

enum class TextureFamily { stripes, checker, cellular };
std::string to_string(TextureFamily family);

struct SynthSpec {
  int num_categories = 3;
  int train_per_category = 64;
  int test_good_per_category = 8;
  int test_anomalous_per_category = 16;
  int resolution = 64;
  std::vector<DefectKind> defects{DefectKind::patch_swap, DefectKind::intensity_blot, DefectKind::scratch_line};
  double min_defect_fraction = 0.005;
  double max_defect_fraction = 0.10;
  std::uint64_t seed = 7;

  void validate() const;
};

/// [synth] section with the SynthSpec field names; unknown keys rejected.
SynthSpec parse_synth_spec(const std::string& text);
SynthSpec load_synth_spec(const std::filesystem::path& path);

/// Category name for index i: family name plus index, e.g. "stripes0".
std::string synth_category_name(int index);
TextureFamily synth_family(int index);

/// Defect-free texture image of category `category_index`; `variant` picks
/// the per-image phase and noise.
RgbImage synth_texture(int category_index, int resolution, std::uint64_t seed, std::uint64_t variant);

/// Composites one defect onto `image` and returns its exact mask. The mask
/// covers between min and max fraction of the image.
Mask apply_defect(RgbImage& image, DefectKind kind, int category_index, const SynthSpec& spec, std::uint64_t variant);

/// Writes the whole dataset. Throws IoError when `out` exists and is not
/// empty unless `overwrite`.
void generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out, bool overwrite = false);

enum class Split { train, test };

/// Samples sorted by (category, defect directory, file name), resized to
/// `resolution`. An empty filter keeps every category. Throws
/// DatasetIntegrityError on layout violations.
std::vector<ImageSample> load_dataset(const std::filesystem::path& root, Split split, int resolution,
                                      const std::vector<std::string>& categories = {});

RgbImage read_image(const std::filesystem::path& path);
void write_image(const RgbImage& image, const std::filesystem::path& path);
Mask read_mask(const std::filesystem::path& path);
void write_mask(const Mask& mask, const std::filesystem::path& path);
RgbImage resize_image(const RgbImage& image, int height, int width);

// Raw score map: "AMAP", u32 height, u32 width, height*width little-endian
// float32 values, row-major.
void write_raw_map(const Mat& map, const std::filesystem::path& path);
Mat read_raw_map(const std::filesystem::path& path);

inline constexpr double kHeatmapScale = 6.0;

/// 16-bit grayscale PNG with intensity clamp(v / scale, 0, 1) * 65535.
void write_heatmap(const Mat& map, const std::filesystem::path& path, double scale = kHeatmapScale);
/// Per pixel: (1 - a s) * image + a s * red, with s = clamp(v / scale, 0, 1).
RgbImage overlay_heatmap(const Mat& map, const RgbImage& image, double alpha = 0.6, double scale = kHeatmapScale);
void export_heatmap(const AnomalyResult& result, const ImageSample& image, const std::filesystem::path& path);

}  // namespace cnd
