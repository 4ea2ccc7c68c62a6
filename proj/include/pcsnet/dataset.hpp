#pragma once

// Procedural desk-scale dataset and the MVTec-style directory loader.
//
//   root/train/good/*.ppm
//   root/test/good/*.ppm
//   root/test/defect/*.ppm
//   root/test/defect_masks/*.pgm          (same stem as the defect image)
//   root/train/real_defect/images/*.ppm   (optional)
//   root/train/real_defect/masks/*.pgm

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcsnet/image_io.hpp"
#include "pcsnet/rng.hpp"
#include "pcsnet/tensor.hpp"

namespace pcsnet {

enum class DefectType { blob, scratch, patch_swap };

inline const char* to_string(DefectType d) {
  switch (d) {
    case DefectType::blob: return "blob";
    case DefectType::scratch: return "scratch";
    case DefectType::patch_swap: return "patch-swap";
  }
  return "?";
}

struct ProceduralConfig {
  std::uint64_t seed = 42;
  std::size_t size = 128;
  std::size_t train_normal = 8;
  std::size_t test_normal = 100;
  std::size_t test_anomalous = 100;
  std::vector<DefectType> defect_types{DefectType::blob, DefectType::scratch, DefectType::patch_swap};
  // Total defect area per image, as a fraction of the image area.
  double min_defect_area = 0.004;
  double max_defect_area = 0.03;

  void validate() const {
    if (size == 0 || size % 8) throw std::invalid_argument("image size must be a positive multiple of 8");
    if (train_normal < 1 || test_normal < 1 || test_anomalous < 1) throw std::invalid_argument("counts must be >= 1");
    if (defect_types.empty()) throw std::invalid_argument("at least one defect type is required");
    if (!(min_defect_area > 0.0 && min_defect_area < max_defect_area && max_defect_area < 0.5))
      throw std::invalid_argument("invalid defect area range");
  }

  std::size_t min_area_px() const { return static_cast<std::size_t>(std::ceil(min_defect_area * double(size * size))); }
  std::size_t max_area_px() const { return static_cast<std::size_t>(std::floor(max_defect_area * double(size * size))); }
};

/// Category-level appearance drawn once from the dataset seed: a fixed
/// band-limited noise field and a periodic grid of lines. The layout is the
/// same for every image of the category.
struct Texture {
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::array<double, 3> base{};
  std::array<double, 3> tint{};
  std::vector<Wave> field;
  std::size_t period_x = 16, period_y = 10;
  std::array<double, 3> hline{}, vline{};
  double grain = 0.02;
  double brightness_jitter = 0.03;
  double illumination = 0.02;  // per-image low-frequency shading amplitude
  int max_shift = 1;           // per-image layout shift in pixels

  static Texture from_seed(std::uint64_t seed, std::size_t waves = 12) {
    Rng rng(derive_seed(seed, 0x7E7));
    Texture t;
    for (auto& c : t.base) c = rng.uniform(0.35, 0.6);
    for (auto& c : t.tint) c = rng.uniform(0.6, 1.0);
    for (std::size_t i = 0; i < waves; ++i) {
      const double period = rng.uniform(10.0, 40.0), angle = rng.uniform(0.0, std::numbers::pi);
      t.field.push_back({std::cos(angle) / period, std::sin(angle) / period, rng.uniform(0.0, 2.0 * std::numbers::pi),
                         rng.uniform(0.025, 0.05)});
    }
    t.period_x = static_cast<std::size_t>(rng.uniform_int(14, 18));
    t.period_y = static_cast<std::size_t>(rng.uniform_int(8, 11));
    for (auto& c : t.hline) c = -rng.uniform(0.10, 0.16);
    for (auto& c : t.vline) c = rng.uniform(0.05, 0.09);
    return t;
  }
};

/// One normal sample: the category layout shifted by a pixel or so, with
/// brightness jitter, faint illumination shading and fresh grain.
inline Tensor<float> render_normal(const Texture& tex, std::uint64_t image_seed, std::size_t size) {
  Rng rng(image_seed);
  const double brightness = rng.uniform(-tex.brightness_jitter, tex.brightness_jitter);
  const auto dy = static_cast<double>(rng.uniform_int(-tex.max_shift, tex.max_shift));
  const auto dx = static_cast<double>(rng.uniform_int(-tex.max_shift, tex.max_shift));
  const double light_angle = rng.uniform(0.0, 2.0 * std::numbers::pi), light_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double lfx = std::cos(light_angle) / 160.0, lfy = std::sin(light_angle) / 160.0;
  const auto period_x = static_cast<std::ptrdiff_t>(tex.period_x), period_y = static_cast<std::ptrdiff_t>(tex.period_y);
  Tensor<float> img(Shape{3, size, size});
  const std::size_t hw = size * size;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = double(x) + dx, v = double(y) + dy;
      double field = 0.0;
      for (const auto& w : tex.field) field += w.amp * std::cos(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
      const double light = tex.illumination * std::cos(2.0 * std::numbers::pi * (lfx * double(x) + lfy * double(y)) + light_phase);
      const auto gy = static_cast<std::ptrdiff_t>(v), gx = static_cast<std::ptrdiff_t>(u);
      const bool hline = ((gy % period_y) + period_y) % period_y < 2;
      const bool vline = ((gx % period_x) + period_x) % period_x < 1;
      for (std::size_t c = 0; c < 3; ++c) {
        double val = tex.base[c] + brightness + light + field * tex.tint[c];
        if (hline) val += tex.hline[c];
        if (vline) val += tex.vline[c];
        val += rng.uniform(-tex.grain, tex.grain);
        img[c * hw + y * size + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  return img;
}

struct DefectSample {
  Tensor<float> image;  // [3, H, W]
  Tensor<float> mask;   // [1, H, W]
  std::vector<DefectType> types;
};

namespace detail {

inline double dist_to_segment(double py, double px, double ay, double ax, double by, double bx) {
  const double vy = by - ay, vx = bx - ax;
  const double len2 = vy * vy + vx * vx;
  double t = len2 > 0 ? ((py - ay) * vy + (px - ax) * vx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dy = py - (ay + t * vy), dx = px - (ax + t * vx);
  return std::sqrt(dy * dy + dx * dx);
}

// Region mask for one defect of roughly `target` pixels; empty on failure.
inline std::vector<std::uint8_t> defect_region(DefectType type, Rng& rng, std::size_t size, double target) {
  const double s = static_cast<double>(size);
  std::vector<std::uint8_t> m(size * size, 0);
  switch (type) {
    case DefectType::blob: {
      const double aspect = rng.uniform(0.5, 2.0), theta = rng.uniform(0.0, std::numbers::pi);
      const double ra = std::sqrt(target * aspect / std::numbers::pi), rb = std::sqrt(target / (aspect * std::numbers::pi));
      const double rmax = std::max(ra, rb) + 1.0;
      if (2 * rmax >= s) return {};
      const double cy = rng.uniform(rmax, s - rmax), cx = rng.uniform(rmax, s - rmax);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dy = double(y) - cy, dx = double(x) - cx;
          const double u = (dx * ct + dy * st) / ra, v = (-dx * st + dy * ct) / rb;
          if (u * u + v * v <= 1.0) m[y * size + x] = 1;
        }
      break;
    }
    case DefectType::scratch: {
      const double halfwidth = 1.0;
      const double length = target / (2.0 * halfwidth + 0.5);
      const std::size_t segments = static_cast<std::size_t>(rng.uniform_int(2, 4));
      const double seg_len = length / double(segments);
      std::vector<std::pair<double, double>> pts;
      double y = rng.uniform(0.2 * s, 0.8 * s), x = rng.uniform(0.2 * s, 0.8 * s);
      double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
      pts.emplace_back(y, x);
      for (std::size_t i = 0; i < segments; ++i) {
        dir += rng.uniform(-1.0, 1.0);
        y = std::clamp(y + seg_len * std::sin(dir), 2.0, s - 3.0);
        x = std::clamp(x + seg_len * std::cos(dir), 2.0, s - 3.0);
        pts.emplace_back(y, x);
      }
      for (std::size_t py = 0; py < size; ++py)
        for (std::size_t px = 0; px < size; ++px)
          for (std::size_t i = 0; i + 1 < pts.size(); ++i)
            if (dist_to_segment(double(py), double(px), pts[i].first, pts[i].second, pts[i + 1].first,
                                pts[i + 1].second) <= halfwidth) {
              m[py * size + px] = 1;
              break;
            }
      break;
    }
    case DefectType::patch_swap: {
      const auto side = static_cast<std::size_t>(std::lround(std::sqrt(target)));
      if (side < 2 || side + 2 >= size) return {};
      const auto y0 = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(size - side - 1)));
      const auto x0 = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(size - side - 1)));
      for (std::size_t y = y0; y < y0 + side; ++y)
        for (std::size_t x = x0; x < x0 + side; ++x) m[y * size + x] = 1;
      break;
    }
  }
  return m;
}

inline void paint_defect(DefectType type, Rng& rng, const std::vector<std::uint8_t>& region, Tensor<float>& img) {
  const std::size_t size = img.dim(1), hw = size * size;
  switch (type) {
    case DefectType::blob: {
      std::array<double, 3> delta{};
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      for (auto& d : delta) d = sign * rng.uniform(0.12, 0.3);
      for (std::size_t p = 0; p < hw; ++p)
        if (region[p])
          for (std::size_t c = 0; c < 3; ++c)
            img[c * hw + p] = static_cast<float>(std::clamp(double(img[c * hw + p]) + delta[c], 0.0, 1.0));
      break;
    }
    case DefectType::scratch: {
      const double delta = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.2, 0.35);
      for (std::size_t p = 0; p < hw; ++p)
        if (region[p])
          for (std::size_t c = 0; c < 3; ++c)
            img[c * hw + p] = static_cast<float>(std::clamp(double(img[c * hw + p]) + delta, 0.0, 1.0));
      break;
    }
    case DefectType::patch_swap: {
      // Transposed copy of another square of the same image.
      std::size_t y0 = size, x0 = size, y1 = 0, x1 = 0;
      for (std::size_t p = 0; p < hw; ++p)
        if (region[p]) {
          y0 = std::min(y0, p / size), x0 = std::min(x0, p % size);
          y1 = std::max(y1, p / size), x1 = std::max(x1, p % size);
        }
      const std::size_t side = y1 - y0 + 1;
      const auto sy = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(size - side)));
      const auto sx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(size - side)));
      const Tensor<float> src = img;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t dy = 0; dy < side; ++dy)
          for (std::size_t dx = 0; dx < side; ++dx)
            img[c * hw + (y0 + dy) * size + x0 + dx] = src[c * hw + (sy + dx) * size + sx + dy];
      (void)x1;
      break;
    }
  }
}

}  // namespace detail

/// Adds one or two defects whose union covers an area inside the
/// configured range.
inline DefectSample add_defects(const Tensor<float>& normal, std::uint64_t seed, const ProceduralConfig& cfg) {
  const std::size_t size = normal.dim(1), hw = size * size;
  const double lo = double(cfg.min_area_px()), hi = double(cfg.max_area_px());
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, attempt));
    const std::size_t count = rng.bernoulli(0.25) ? 2 : 1;
    DefectSample out{normal, Tensor<float>(Shape{1, size, size}), {}};
    std::vector<std::uint8_t> uni(hw, 0);
    bool ok = true;
    for (std::size_t i = 0; i < count && ok; ++i) {
      const auto type = cfg.defect_types[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(cfg.defect_types.size()) - 1))];
      const double target = rng.uniform(lo, hi) / double(count);
      const auto region = detail::defect_region(type, rng, size, target);
      if (region.empty()) {
        ok = false;
        break;
      }
      detail::paint_defect(type, rng, region, out.image);
      for (std::size_t p = 0; p < hw; ++p) uni[p] |= region[p];
      out.types.push_back(type);
    }
    std::size_t area = 0;
    for (auto v : uni) area += v;
    if (!ok || double(area) < lo || double(area) > hi) {
      if (attempt > 1000) throw std::runtime_error("could not place a defect within the configured area range");
      continue;
    }
    for (std::size_t p = 0; p < hw; ++p) out.mask[p] = uni[p] ? 1.0f : 0.0f;
    return out;
  }
}

inline std::string indexed_name(std::size_t i) {
  std::ostringstream os;
  os << std::setw(3) << std::setfill('0') << i;
  return os.str();
}

/// Writes a complete dataset tree under `root`.
inline void generate_dataset(const ProceduralConfig& cfg, const std::filesystem::path& root) {
  cfg.validate();
  namespace fs = std::filesystem;
  const auto tex = Texture::from_seed(cfg.seed);
  for (const char* sub : {"train/good", "test/good", "test/defect", "test/defect_masks"}) fs::create_directories(root / sub);
  for (std::size_t i = 0; i < cfg.train_normal; ++i)
    write_pnm(root / "train/good" / (indexed_name(i) + ".ppm"),
              to_image(render_normal(tex, derive_seed(cfg.seed, 1, i), cfg.size)));
  for (std::size_t i = 0; i < cfg.test_normal; ++i)
    write_pnm(root / "test/good" / (indexed_name(i) + ".ppm"),
              to_image(render_normal(tex, derive_seed(cfg.seed, 2, i), cfg.size)));
  for (std::size_t i = 0; i < cfg.test_anomalous; ++i) {
    const auto base = render_normal(tex, derive_seed(cfg.seed, 3, i), cfg.size);
    const auto d = add_defects(base, derive_seed(cfg.seed, 4, i), cfg);
    write_pnm(root / "test/defect" / (indexed_name(i) + ".ppm"), to_image(d.image));
    write_pnm(root / "test/defect_masks" / (indexed_name(i) + ".pgm"), to_image(d.mask));
  }
}

struct Sample {
  std::string name;
  Tensor<float> image;  // [3, H, W] in [0, 1]
  Tensor<float> mask;   // [1, H, W] in {0, 1}
  int label = 0;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  std::vector<Sample> real_defects;

  std::size_t image_size() const { return train.empty() ? 0 : train.front().image.dim(1); }
};

namespace detail {

inline std::vector<std::filesystem::path> list_files(const std::filesystem::path& dir, const std::string& ext) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  // Byte-order sort on the file name keeps ordering platform independent.
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  return out;
}

inline Tensor<float> load_rgb(const std::filesystem::path& p) {
  const auto img = read_pnm(p);
  if (img.channels != 3) throw FormatError("expected an RGB (P6) image: " + p.string());
  return to_tensor<float>(img);
}

inline Tensor<float> load_mask(const std::filesystem::path& p) {
  const auto img = read_pnm(p);
  if (img.channels != 1) throw FormatError("expected a grayscale (P5) mask: " + p.string());
  Tensor<float> m(Shape{1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m[i] = img.pixels[i] >= 128 ? 1.0f : 0.0f;
  return m;
}

inline Sample load_with_mask(const std::filesystem::path& image, const std::filesystem::path& mask_dir) {
  const auto mask_path = mask_dir / (image.stem().string() + ".pgm");
  if (!std::filesystem::exists(mask_path))
    throw std::runtime_error("missing mask for defect image " + image.string() + " (expected " + mask_path.string() + ")");
  Sample s{image.filename().string(), load_rgb(image), load_mask(mask_path), 1};
  if (s.mask.dim(1) != s.image.dim(1) || s.mask.dim(2) != s.image.dim(2))
    throw ShapeError("mask " + mask_path.string() + " does not match the size of " + image.string());
  return s;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root / "train/good")) throw std::runtime_error("dataset has no train/good directory: " + root.string());
  Dataset ds;
  for (const auto& p : detail::list_files(root / "train/good", ".ppm")) {
    auto img = detail::load_rgb(p);
    Tensor<float> mask(Shape{1, img.dim(1), img.dim(2)});
    ds.train.push_back({p.filename().string(), std::move(img), std::move(mask), 0});
  }
  for (const auto& p : detail::list_files(root / "test/good", ".ppm")) {
    auto img = detail::load_rgb(p);
    Tensor<float> mask(Shape{1, img.dim(1), img.dim(2)});
    ds.test.push_back({"good/" + p.filename().string(), std::move(img), std::move(mask), 0});
  }
  for (const auto& p : detail::list_files(root / "test/defect", ".ppm")) {
    ds.test.push_back(detail::load_with_mask(p, root / "test/defect_masks"));
    ds.test.back().name = "defect/" + ds.test.back().name;
  }
  for (const auto& p : detail::list_files(root / "train/real_defect/images", ".ppm"))
    ds.real_defects.push_back(detail::load_with_mask(p, root / "train/real_defect/masks"));

  if (ds.train.empty()) throw std::runtime_error("dataset has no training images: " + root.string());
  const Shape ref = ds.train.front().image.shape();
  auto check = [&](const std::vector<Sample>& v) {
    for (const auto& s : v)
      if (s.image.shape() != ref) throw ShapeError("image " + s.name + " differs in size from the training images");
  };
  check(ds.train);
  check(ds.test);
  check(ds.real_defects);
  return ds;
}

/// Seeded Fisher-Yates shuffle of [0, available), truncated to k.
inline std::vector<std::size_t> select_shots(std::size_t available, std::size_t k, std::uint64_t seed) {
  if (k < 1 || k > available)
    throw std::invalid_argument("cannot select " + std::to_string(k) + " shots from " + std::to_string(available) +
                                " training images");
  std::vector<std::size_t> idx(available);
  for (std::size_t i = 0; i < available; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, 0x5407));
  for (std::size_t i = available; i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  idx.resize(k);
  return idx;
}

}  // namespace pcsnet
