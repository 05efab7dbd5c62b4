#include "cnd/data.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "cnd/encoders.hpp"
#include "cnd/errors.hpp"

namespace fs = std::filesystem;

namespace cnd {

DefectKind parse_defect_kind(const std::string& s) {
  if (s == "patch_swap") return DefectKind::patch_swap;
  if (s == "intensity_blot") return DefectKind::intensity_blot;
  if (s == "scratch_line") return DefectKind::scratch_line;
  throw ConfigError("unknown defect kind '" + s + "'");
}

std::string to_string(DefectKind kind) {
  switch (kind) {
    case DefectKind::patch_swap: return "patch_swap";
    case DefectKind::intensity_blot: return "intensity_blot";
    case DefectKind::scratch_line: return "scratch_line";
  }
  return "?";
}

std::string to_string(TextureFamily family) {
  switch (family) {
    case TextureFamily::stripes: return "stripes";
    case TextureFamily::checker: return "checker";
    case TextureFamily::cellular: return "cellular";
  }
  return "?";
}

void SynthSpec::validate() const {
  if (num_categories < 1) throw ConfigError("synth categories must be >= 1");
  if (train_per_category < 1) throw ConfigError("synth train_per_category must be >= 1");
  if (test_good_per_category < 0 || test_anomalous_per_category < 0)
    throw ConfigError("synth test counts must be >= 0");
  if (resolution < 16) throw ConfigError("synth resolution must be >= 16");
  if (test_anomalous_per_category > 0 && defects.empty()) throw ConfigError("synth needs at least one defect kind");
  if (!(min_defect_fraction > 0.0 && min_defect_fraction < max_defect_fraction && max_defect_fraction <= 0.5))
    throw ConfigError("synth defect fractions must satisfy 0 < min < max <= 0.5");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0, std::uint64_t d = 0) {
  const std::uint64_t words[4] = {a, b, c, d};
  return hash_bytes(words, sizeof words);
}

struct Color {
  double r, g, b;
};

Color random_color(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

void put(RgbImage& img, int y, int x, const Color& c, double t, const Color& d) {
  img.at(y, x, 0) = (1.0 - t) * c.r + t * d.r;
  img.at(y, x, 1) = (1.0 - t) * c.g + t * d.g;
  img.at(y, x, 2) = (1.0 - t) * c.b + t * d.b;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

SynthSpec parse_synth_spec(const std::string& text) {
  SynthSpec s;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "synth spec line " + std::to_string(lineno);
    if (line.front() == '[') {
      section = trim(line.substr(1, line.size() - 2));
      if (section != "synth") throw ConfigError(where + ": unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos || section.empty()) throw ConfigError(where + ": expected key = value inside [synth]");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "categories") s.num_categories = std::stoi(value);
      else if (key == "train_per_category") s.train_per_category = std::stoi(value);
      else if (key == "test_good_per_category") s.test_good_per_category = std::stoi(value);
      else if (key == "test_anomalous_per_category") s.test_anomalous_per_category = std::stoi(value);
      else if (key == "resolution") s.resolution = std::stoi(value);
      else if (key == "min_defect_fraction") s.min_defect_fraction = std::stod(value);
      else if (key == "max_defect_fraction") s.max_defect_fraction = std::stod(value);
      else if (key == "seed") s.seed = std::stoull(value);
      else if (key == "defects") {
        s.defects.clear();
        std::istringstream parts(value);
        std::string p;
        while (std::getline(parts, p, ',')) s.defects.push_back(parse_defect_kind(trim(p)));
      } else {
        throw ConfigError(where + ": unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError(where + ": bad value '" + value + "' for " + key);
    } catch (const std::out_of_range&) {
      throw ConfigError(where + ": value out of range for " + key);
    }
  }
  s.validate();
  return s;
}

SynthSpec load_synth_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read synth spec " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_synth_spec(ss.str());
}

TextureFamily synth_family(int index) { return static_cast<TextureFamily>(index % 3); }

std::string synth_category_name(int index) { return to_string(synth_family(index)) + std::to_string(index); }

RgbImage synth_texture(int category_index, int resolution, std::uint64_t seed, std::uint64_t variant) {
  Rng cat_rng(mix_seed(seed, 0xCA7, static_cast<std::uint64_t>(category_index)));
  Rng rng(mix_seed(seed, 0x1A6E, static_cast<std::uint64_t>(category_index), variant));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.02);
  const double r = resolution;
  const Color c1 = random_color(cat_rng, 0.15, 0.5);
  const Color c2 = random_color(cat_rng, 0.5, 0.9);
  RgbImage img(resolution, resolution);

  switch (synth_family(category_index)) {
    case TextureFamily::stripes: {
      const double angle = u01(cat_rng) * std::numbers::pi + 0.05 * (u01(rng) - 0.5);
      const double period = r / (5.0 + 5.0 * u01(cat_rng));
      const double phase = 2.0 * std::numbers::pi * u01(rng);
      const double ca = std::cos(angle), sa = std::sin(angle);
      for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
          const double t = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * (x * ca + y * sa) / period + phase);
          put(img, y, x, c1, t, c2);
        }
      break;
    }
    case TextureFamily::checker: {
      const double cell = r / (6.0 + 4.0 * u01(cat_rng));
      const double ox = cell * 2.0 * u01(rng), oy = cell * 2.0 * u01(rng);
      for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
          const long cx = static_cast<long>(std::floor((x + ox) / cell));
          const long cy = static_cast<long>(std::floor((y + oy) / cell));
          put(img, y, x, c1, ((cx + cy) & 1) ? 1.0 : 0.0, c2);
        }
      break;
    }
    case TextureFamily::cellular: {
      const double spacing = r / (5.0 + 3.0 * u01(cat_rng));
      const int count = std::max(4, static_cast<int>(std::lround((r / spacing) * (r / spacing))));
      std::vector<std::pair<double, double>> points(static_cast<std::size_t>(count));
      for (auto& p : points) p = {u01(rng) * r, u01(rng) * r};
      for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
          double best = 1e300;
          for (const auto& [py, px] : points) {
            // toroidal distance keeps the density uniform near borders
            double dy = std::abs(y - py), dx = std::abs(x - px);
            dy = std::min(dy, r - dy);
            dx = std::min(dx, r - dx);
            best = std::min(best, dy * dy + dx * dx);
          }
          put(img, y, x, c1, clamp01(std::sqrt(best) / (0.7 * spacing)), c2);
        }
      break;
    }
  }
  for (double& v : img.data) v = clamp01(v + noise(rng));
  return img;
}

Mask apply_defect(RgbImage& image, DefectKind kind, int category_index, const SynthSpec& spec, std::uint64_t variant) {
  const int res = image.height;
  const double total = static_cast<double>(image.height) * image.width;
  Rng rng(mix_seed(spec.seed, 0xDEFEC7, static_cast<std::uint64_t>(category_index), variant));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double area = uniform(spec.min_defect_fraction, spec.max_defect_fraction) * total;
    Mask mask = Mask::Zero(image.height, image.width);
    RgbImage out = image;
    switch (kind) {
      case DefectKind::patch_swap: {
        const double aspect = uniform(0.6, 1.6);
        const int h = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 2, res - 2);
        const int w = std::clamp(static_cast<int>(std::lround(area / h)), 2, res - 2);
        const int y0 = static_cast<int>(uniform(0.0, res - h));
        const int x0 = static_cast<int>(uniform(0.0, res - w));
        const RgbImage donor = synth_texture(category_index + 1, res, spec.seed, variant ^ 0xD0D0ULL);
        for (int y = y0; y < y0 + h; ++y)
          for (int x = x0; x < x0 + w; ++x) {
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = donor.at(y, x, c);
            mask(y, x) = 1;
          }
        break;
      }
      case DefectKind::intensity_blot: {
        const double aspect = uniform(0.6, 1.6);
        const double ry = std::sqrt(area * aspect / std::numbers::pi);
        const double rx = area / (std::numbers::pi * ry);
        const double cy = uniform(ry, res - ry), cx = uniform(rx, res - rx);
        double shift[3];
        const double sign = u01(rng) < 0.5 ? -1.0 : 1.0;
        for (double& s : shift) s = sign * uniform(0.25, 0.45);
        for (int y = 0; y < res; ++y)
          for (int x = 0; x < res; ++x) {
            const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
            if (dy * dy + dx * dx > 1.0) continue;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp01(out.at(y, x, c) + shift[c]);
            mask(y, x) = 1;
          }
        break;
      }
      case DefectKind::scratch_line: {
        const double thickness = uniform(1.5, 3.0);
        const double length = std::min(area / thickness, 0.9 * res);
        const double angle = uniform(0.0, std::numbers::pi);
        const double hx = 0.5 * length * std::cos(angle), hy = 0.5 * length * std::sin(angle);
        const double cy = uniform(std::abs(hy) + 2.0, res - std::abs(hy) - 2.0);
        const double cx = uniform(std::abs(hx) + 2.0, res - std::abs(hx) - 2.0);
        const double ay = cy - hy, ax = cx - hx, by = cy + hy, bx = cx + hx;
        const double len2 = (by - ay) * (by - ay) + (bx - ax) * (bx - ax);
        const double bright = u01(rng) < 0.5 ? 0.05 : 0.95;
        for (int y = 0; y < res; ++y)
          for (int x = 0; x < res; ++x) {
            const double py = y + 0.5, px = x + 0.5;
            const double t = std::clamp(((py - ay) * (by - ay) + (px - ax) * (bx - ax)) / len2, 0.0, 1.0);
            const double qy = ay + t * (by - ay), qx = ax + t * (bx - ax);
            if ((py - qy) * (py - qy) + (px - qx) * (px - qx) > 0.25 * thickness * thickness) continue;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = bright;
            mask(y, x) = 1;
          }
        break;
      }
    }
    const double frac = static_cast<double>(mask.cast<int>().sum()) / total;
    if (frac >= spec.min_defect_fraction && frac <= spec.max_defect_fraction) {
      image = std::move(out);
      return mask;
    }
  }
  throw ConfigError("apply_defect: cannot place a " + to_string(kind) + " defect within the area bounds at resolution " +
                    std::to_string(res));
}

namespace {

std::string indexed_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", i);
  return buf;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (directories ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace

void generate_synthetic(const SynthSpec& spec, const fs::path& out, bool overwrite) {
  spec.validate();
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw IoError(out.string() + " exists and is not a directory");
    if (!fs::is_empty(out)) {
      if (!overwrite) throw IoError(out.string() + " is not empty (pass --overwrite to replace it)");
      fs::remove_all(out);
    }
  }
  for (int c = 0; c < spec.num_categories; ++c) {
    const fs::path cat = out / synth_category_name(c);
    ensure_dir(cat / "train" / "good");
    ensure_dir(cat / "test" / "good");
    std::uint64_t variant = 0;
    for (int i = 0; i < spec.train_per_category; ++i)
      write_image(synth_texture(c, spec.resolution, spec.seed, variant++), cat / "train" / "good" / (indexed_name(i) + ".png"));
    for (int i = 0; i < spec.test_good_per_category; ++i)
      write_image(synth_texture(c, spec.resolution, spec.seed, variant++), cat / "test" / "good" / (indexed_name(i) + ".png"));
    std::vector<int> per_kind(spec.defects.size(), 0);
    for (int i = 0; i < spec.test_anomalous_per_category; ++i) {
      const std::size_t k = static_cast<std::size_t>(i) % spec.defects.size();
      const std::string kind = to_string(spec.defects[k]);
      const std::string stem = indexed_name(per_kind[k]++);
      RgbImage img = synth_texture(c, spec.resolution, spec.seed, variant);
      const Mask mask = apply_defect(img, spec.defects[k], c, spec, variant++);
      ensure_dir(cat / "test" / kind);
      ensure_dir(cat / "ground_truth" / kind);
      write_image(img, cat / "test" / kind / (stem + ".png"));
      write_mask(mask, cat / "ground_truth" / kind / (stem + "_mask.png"));
    }
  }
}

std::vector<ImageSample> load_dataset(const fs::path& root, Split split, int resolution,
                                      const std::vector<std::string>& categories) {
  if (resolution < 1) throw ConfigError("load_dataset: resolution must be >= 1");
  if (!fs::is_directory(root)) throw DatasetIntegrityError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> cat_dirs;
  for (const auto& d : sorted_entries(root, true))
    if (categories.empty() || std::find(categories.begin(), categories.end(), d.filename().string()) != categories.end())
      cat_dirs.push_back(d);
  for (const auto& want : categories)
    if (std::none_of(cat_dirs.begin(), cat_dirs.end(), [&](const fs::path& d) { return d.filename() == want; }))
      throw DatasetIntegrityError("category '" + want + "' not found under " + root.string());
  if (cat_dirs.empty()) throw DatasetIntegrityError("no categories under " + root.string());

  std::vector<ImageSample> out;
  for (const auto& cat : cat_dirs) {
    const std::string name = cat.filename().string();
    const fs::path split_dir = cat / (split == Split::train ? "train" : "test");
    if (!fs::is_directory(split_dir)) throw DatasetIntegrityError(name + ": missing " + split_dir.filename().string() + "/");
    const std::size_t before = out.size();
    for (const auto& kind_dir : sorted_entries(split_dir, true)) {
      const std::string kind = kind_dir.filename().string();
      const bool anomalous = kind != "good";
      if (split == Split::train && anomalous)
        throw DatasetIntegrityError(name + ": train split contains non-good directory '" + kind + "'");
      for (const auto& file : sorted_entries(kind_dir, false)) {
        ImageSample s;
        s.category = name;
        s.source = file.string();
        s.is_anomalous = anomalous;
        const RgbImage raw = read_image(file);
        if (anomalous) {
          const fs::path mpath = cat / "ground_truth" / kind / (file.stem().string() + "_mask.png");
          if (!fs::exists(mpath)) throw DatasetIntegrityError(file.string() + ": missing mask " + mpath.string());
          Mask m = read_mask(mpath);
          if (m.rows() != raw.height || m.cols() != raw.width)
            throw DatasetIntegrityError(file.string() + ": mask is " + std::to_string(m.cols()) + "x" +
                                        std::to_string(m.rows()) + ", image is " + std::to_string(raw.width) + "x" +
                                        std::to_string(raw.height));
          if (m.rows() != resolution || m.cols() != resolution) {
            cv::Mat src(static_cast<int>(m.rows()), static_cast<int>(m.cols()), CV_8UC1, m.data()), dst;
            cv::resize(src, dst, cv::Size(resolution, resolution), 0, 0, cv::INTER_NEAREST);
            Mask r(resolution, resolution);
            std::memcpy(r.data(), dst.data, static_cast<std::size_t>(resolution) * resolution);
            m = std::move(r);
          }
          s.mask = std::move(m);
        }
        s.pixels = (raw.height == resolution && raw.width == resolution) ? raw : resize_image(raw, resolution, resolution);
        out.push_back(std::move(s));
      }
    }
    if (out.size() == before) throw DatasetIntegrityError(name + ": no images in " + split_dir.string());
  }
  return out;
}

RgbImage read_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image " + path.string());
  RgbImage img(bgr.rows, bgr.cols);
  for (int y = 0; y < bgr.rows; ++y)
    for (int x = 0; x < bgr.cols; ++x) {
      const auto& p = bgr.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = p[2 - c] / 255.0;
    }
  return img;
}

void write_image(const RgbImage& image, const fs::path& path) {
  cv::Mat bgr(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      auto& p = bgr.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) p[2 - c] = cv::saturate_cast<std::uint8_t>(std::lround(clamp01(image.at(y, x, c)) * 255.0));
    }
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image " + path.string());
}

Mask read_mask(const fs::path& path) {
  cv::Mat g = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (g.empty()) throw IoError("cannot read mask " + path.string());
  Mask m(g.rows, g.cols);
  for (int y = 0; y < g.rows; ++y)
    for (int x = 0; x < g.cols; ++x) m(y, x) = g.at<std::uint8_t>(y, x) > 127 ? 1 : 0;
  return m;
}

void write_mask(const Mask& mask, const fs::path& path) {
  cv::Mat g(static_cast<int>(mask.rows()), static_cast<int>(mask.cols()), CV_8UC1);
  for (int y = 0; y < g.rows; ++y)
    for (int x = 0; x < g.cols; ++x) g.at<std::uint8_t>(y, x) = mask(y, x) ? 255 : 0;
  if (!cv::imwrite(path.string(), g)) throw IoError("cannot write mask " + path.string());
}

RgbImage resize_image(const RgbImage& image, int height, int width) {
  cv::Mat src(image.height, image.width, CV_64FC3, const_cast<double*>(image.data.data())), dst;
  const bool shrink = height < image.height || width < image.width;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  RgbImage out(height, width);
  std::memcpy(out.data.data(), dst.ptr<double>(), out.data.size() * sizeof(double));
  for (double& v : out.data) v = clamp01(v);
  return out;
}

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

}  // namespace

void write_raw_map(const Mat& map, const fs::path& path) {
  std::string bytes = "AMAP";
  put_u32(bytes, static_cast<std::uint32_t>(map.rows()));
  put_u32(bytes, static_cast<std::uint32_t>(map.cols()));
  for (Index i = 0; i < map.size(); ++i) {
    const float f = static_cast<float>(map.data()[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32(bytes, bits);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
    throw IoError("cannot write raw map " + path.string());
}

Mat read_raw_map(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read raw map " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < 12 || bytes.compare(0, 4, "AMAP") != 0) throw IoError(path.string() + ": not a raw map");
  const std::uint32_t h = get_u32(bytes, 4), w = get_u32(bytes, 8);
  if (bytes.size() != 12 + 4ULL * h * w) throw IoError(path.string() + ": truncated raw map");
  Mat m(h, w);
  for (Index i = 0; i < m.size(); ++i) {
    const std::uint32_t bits = get_u32(bytes, 12 + 4 * static_cast<std::size_t>(i));
    float f;
    std::memcpy(&f, &bits, sizeof f);
    m.data()[i] = f;
  }
  return m;
}

void write_heatmap(const Mat& map, const fs::path& path, double scale) {
  cv::Mat g(static_cast<int>(map.rows()), static_cast<int>(map.cols()), CV_16UC1);
  for (int y = 0; y < g.rows; ++y)
    for (int x = 0; x < g.cols; ++x)
      g.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(std::lround(clamp01(map(y, x) / scale) * 65535.0));
  if (!cv::imwrite(path.string(), g)) throw IoError("cannot write heatmap " + path.string());
}

RgbImage overlay_heatmap(const Mat& map, const RgbImage& image, double alpha, double scale) {
  if (map.rows() != image.height || map.cols() != image.width)
    throw ConfigError("overlay: map and image differ in size");
  RgbImage out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double a = alpha * clamp01(map(y, x) / scale);
      out.at(y, x, 0) = (1.0 - a) * image.at(y, x, 0) + a;
      out.at(y, x, 1) = (1.0 - a) * image.at(y, x, 1);
      out.at(y, x, 2) = (1.0 - a) * image.at(y, x, 2);
    }
  return out;
}

void export_heatmap(const AnomalyResult& result, const ImageSample& image, const fs::path& path) {
  write_image(overlay_heatmap(result.pixel_map, image.pixels), path);
}

}  // namespace cnd
