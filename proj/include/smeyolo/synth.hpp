#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"

namespace sme {

/// Pixel pattern used to paint a defect inside its box.
enum class DefectShape {
  disc,    // plugged hole: bright disc with a dark core
  notch,   // bite taken out of copper: dark ellipse
  gap,     // break across a trace: mid-dark rectangle
  bridge,  // copper joining two traces: bright rectangle
  spur,    // protrusion narrowing toward its tip
  blob,    // stray copper: rounded square
};

struct ClassSpec {
  std::string name;
  double area_fraction = 0.001;  // mean box area / image area
  DefectShape shape = DefectShape::blob;
};

/// The six defect types with their mean box-area fractions.
inline std::vector<ClassSpec> default_defect_classes() {
  return {
      {"missing_hole", 0.0008, DefectShape::disc},    {"mouse_bite", 0.0007, DefectShape::notch},
      {"open_circuit", 0.0005, DefectShape::gap},     {"short", 0.0013, DefectShape::bridge},
      {"spur", 0.0009, DefectShape::spur},            {"spurious_copper", 0.0009, DefectShape::blob},
  };
}

struct SynthConfig {
  int image_size = 256;
  int num_images = 500;  // split 8:1:1 into train/val/test
  std::vector<ClassSpec> classes = default_defect_classes();
  int min_defects = 1;
  int max_defects = 6;
  /// Log-normal spread of individual box areas around the class mean.
  double area_spread = 0.25;
  int trace_pitch = 16;
  int trace_width = 4;
  int placement_retries = 50;
  std::uint64_t seed = 42;

  void validate() const {
    if (image_size < 16) throw std::invalid_argument("synth: image_size must be at least 16");
    if (num_images < 0) throw std::invalid_argument("synth: num_images must be non-negative");
    if (classes.empty()) throw std::invalid_argument("synth: at least one class is required");
    for (const auto& c : classes)
      if (!(c.area_fraction > 0 && c.area_fraction < 0.05))
        throw std::invalid_argument("synth: area fraction of '" + c.name + "' must lie in (0, 0.05)");
    if (min_defects < 1 || max_defects < min_defects) throw std::invalid_argument("synth: need 1 <= min_defects <= max_defects");
    if (!(area_spread >= 0 && area_spread < 1)) throw std::invalid_argument("synth: area_spread must lie in [0, 1)");
    if (trace_pitch < 2 || trace_width < 1 || trace_width >= trace_pitch)
      throw std::invalid_argument("synth: need 1 <= trace_width < trace_pitch");
    if (placement_retries < 1) throw std::invalid_argument("synth: placement_retries must be positive");
  }
};

/// One label line: class id and a box in normalized [0,1] center format.
struct Annotation {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
};

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool empty() const { return x1 <= x0 || y1 <= y0; }
};

struct GrayImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, std::uint8_t fill = 0) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

struct SynthSample {
  GrayImage image;
  std::vector<Annotation> annotations;
  std::vector<PixelRect> painted;  // pixels touched by each annotated defect
  int skipped = 0;                 // defects dropped after exhausting placement retries
};

namespace detail {

inline std::uint8_t defect_level(DefectShape s, double u, double v) {
  switch (s) {
    case DefectShape::disc: return u * u + v * v < 0.2 ? 70 : 250;
    case DefectShape::notch: return 10;
    case DefectShape::gap: return 90;
    case DefectShape::bridge: return 215;
    case DefectShape::spur: return 145;
    case DefectShape::blob: return 120;
  }
  return 0;
}

// Shape membership in box-normalized coordinates u, v in [-1, 1].
inline bool defect_covers(DefectShape s, double u, double v) {
  switch (s) {
    case DefectShape::disc:
    case DefectShape::notch: return u * u + v * v <= 1.0;
    case DefectShape::gap:
    case DefectShape::bridge: return true;
    case DefectShape::spur: return std::abs(v) <= 1.0 - 0.6 * std::max(0.0, u);
    case DefectShape::blob: return std::pow(std::abs(u), 3) + std::pow(std::abs(v), 3) <= 1.0;
  }
  return false;
}

inline void paint_background(GrayImage& img, const SynthConfig& cfg, Rng& rng) {
  const int pitch = cfg.trace_pitch;
  const auto phase_y = static_cast<int>(rng.uniform_int(0, pitch - 1));
  const auto phase_x = static_cast<int>(rng.uniform_int(0, 2 * pitch - 1));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const bool row_trace = (y + phase_y) % pitch < cfg.trace_width;
      const bool col_trace = (x + phase_x) % (2 * pitch) < cfg.trace_width;
      const int base = row_trace || col_trace ? 170 : 40;
      img.at(x, y) = static_cast<std::uint8_t>(base + rng.uniform_int(-6, 6));
    }
}

}  // namespace detail

/// Renders image `index` of the dataset. Each image draws from its own
/// stream, so the result does not depend on which other images are rendered.
inline SynthSample render_sample(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  Rng rng(cfg.seed, stream_id("synth.image") ^ (static_cast<std::uint64_t>(index) * 0x9E3779B97F4A7C15ULL));
  const int S = cfg.image_size;
  SynthSample out;
  out.image = GrayImage(S, S);
  detail::paint_background(out.image, cfg, rng);

  struct Placed {
    double x1, y1, x2, y2;
  };
  std::vector<Placed> placed;
  const auto count = rng.uniform_int(cfg.min_defects, cfg.max_defects);
  const double sigma = cfg.area_spread;
  for (std::int64_t d = 0; d < count; ++d) {
    const auto cls = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(cfg.classes.size()) - 1));
    const ClassSpec& spec = cfg.classes[cls];
    // Log-normal with mean exactly area_fraction.
    const double frac = spec.area_fraction * std::exp(sigma * rng.normal() - sigma * sigma / 2);
    const double aspect = std::exp(rng.uniform(-0.35, 0.35));
    const double area = frac * S * S;
    const double w = std::clamp(std::sqrt(area * aspect), 3.0, S / 4.0);
    const double h = std::clamp(std::sqrt(area / aspect), 3.0, S / 4.0);
    bool ok = false;
    Placed box{};
    for (int attempt = 0; attempt < cfg.placement_retries && !ok; ++attempt) {
      const double cx = rng.uniform(w / 2 + 1, S - w / 2 - 1);
      const double cy = rng.uniform(h / 2 + 1, S - h / 2 - 1);
      box = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
      ok = std::none_of(placed.begin(), placed.end(), [&](const Placed& o) {
        return box.x1 < o.x2 + 2 && o.x1 < box.x2 + 2 && box.y1 < o.y2 + 2 && o.y1 < box.y2 + 2;
      });
    }
    if (!ok) {
      ++out.skipped;
      std::clog << "synth: image " << index << ": dropped a " << spec.name << " defect after " << cfg.placement_retries
                << " placement attempts\n";
      continue;
    }
    placed.push_back(box);
    const double cx = (box.x1 + box.x2) / 2, cy = (box.y1 + box.y2) / 2;
    PixelRect rect{S, S, 0, 0};
    for (int y = std::max(0, static_cast<int>(box.y1) - 1); y <= std::min(S - 1, static_cast<int>(box.y2) + 1); ++y)
      for (int x = std::max(0, static_cast<int>(box.x1) - 1); x <= std::min(S - 1, static_cast<int>(box.x2) + 1); ++x) {
        const double px = x + 0.5, py = y + 0.5;
        if (px < box.x1 || px > box.x2 || py < box.y1 || py > box.y2) continue;
        const double u = (px - cx) / (w / 2), v = (py - cy) / (h / 2);
        if (!detail::defect_covers(spec.shape, u, v)) continue;
        out.image.at(x, y) = detail::defect_level(spec.shape, u, v);
        rect = {std::min(rect.x0, x), std::min(rect.y0, y), std::max(rect.x1, x + 1), std::max(rect.y1, y + 1)};
      }
    out.painted.push_back(rect);
    out.annotations.push_back({cls, cx / S, cy / S, w / S, h / S});
  }
  return out;
}

// ---------------------------------------------------------------------------
// File formats.

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error(path.string() + ": not an 8-bit binary PGM");
  is.get();
  GrayImage img(w, h);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!is) throw std::runtime_error(path.string() + ": truncated pixel data");
  return img;
}

inline std::string format_annotations(const std::vector<Annotation>& anns) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  for (const auto& a : anns) os << a.class_id << ' ' << a.cx << ' ' << a.cy << ' ' << a.w << ' ' << a.h << '\n';
  return os.str();
}

/// Parses `class_id cx cy w h` lines. Blank lines are ignored. Errors name
/// the source and line.
inline std::vector<Annotation> parse_annotations(std::istream& is, const std::string& source) {
  std::vector<Annotation> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Annotation a;
    std::string extra;
    if (!(ls >> a.class_id >> a.cx >> a.cy >> a.w >> a.h) || (ls >> extra))
      throw std::runtime_error(source + ":" + std::to_string(lineno) + ": expected 'class_id cx cy w h', got '" + line + "'");
    if (a.class_id < 0) throw std::runtime_error(source + ":" + std::to_string(lineno) + ": negative class id");
    if (!(a.w > 0 && a.h > 0) || a.cx - a.w / 2 < -1e-6 || a.cx + a.w / 2 > 1 + 1e-6 || a.cy - a.h / 2 < -1e-6 ||
        a.cy + a.h / 2 > 1 + 1e-6)
      throw std::runtime_error(source + ":" + std::to_string(lineno) + ": box outside the unit square");
    out.push_back(a);
  }
  return out;
}

inline std::vector<Annotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return parse_annotations(is, path.string());
}

struct SplitSizes {
  int train = 0, val = 0, test = 0;
};

inline SplitSizes split_sizes(int n) {
  SplitSizes s;
  s.val = n / 10;
  s.test = n / 10;
  s.train = n - s.val - s.test;
  return s;
}

inline std::string sample_name(std::size_t index) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

struct GenerateResult {
  SplitSizes splits;
  std::size_t defects = 0;
  std::size_t skipped = 0;
};

/// Writes images/NNNNNN.pgm, labels/NNNNNN.txt and train/val/test.txt
/// manifests (paths relative to `out_dir`). Images are assigned to splits in
/// index order.
inline GenerateResult generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "labels", ec);
  if (!fs::is_directory(out_dir / "images") || !fs::is_directory(out_dir / "labels"))
    throw std::runtime_error("cannot create dataset directories under " + out_dir.string());
  GenerateResult res;
  res.splits = split_sizes(cfg.num_images);
  std::ofstream manifests[3] = {std::ofstream(out_dir / "train.txt"), std::ofstream(out_dir / "val.txt"),
                                std::ofstream(out_dir / "test.txt")};
  for (auto& m : manifests)
    if (!m) throw std::runtime_error("cannot write split manifests under " + out_dir.string());
  for (int i = 0; i < cfg.num_images; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    const SynthSample s = render_sample(cfg, idx);
    const std::string name = sample_name(idx);
    write_pgm(out_dir / "images" / (name + ".pgm"), s.image);
    std::ofstream lab(out_dir / "labels" / (name + ".txt"));
    if (!lab) throw std::runtime_error("cannot write labels for " + name);
    lab << format_annotations(s.annotations);
    const int split = i < res.splits.train ? 0 : i < res.splits.train + res.splits.val ? 1 : 2;
    manifests[split] << "images/" << name << ".pgm\n";
    res.defects += s.annotations.size();
    res.skipped += static_cast<std::size_t>(s.skipped);
  }
  return res;
}

/// Label file that belongs to an image path from a manifest.
inline std::filesystem::path label_path_for(const std::filesystem::path& dataset_dir, const std::string& image_rel) {
  std::filesystem::path p(image_rel);
  return dataset_dir / "labels" / p.filename().replace_extension(".txt");
}

inline std::vector<std::string> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Statistics.

struct ClassStats {
  int class_id = 0;
  std::string name;
  std::size_t count = 0;
  double proportion = 0;
  double mean_area_px = 0;
  double mean_area_fraction = 0;
};

struct DatasetStats {
  std::vector<ClassStats> classes;
  std::size_t total = 0;
  std::vector<double> fractions;  // area fraction of every box, in file order

  double fraction_in_band(double lo, double hi) const {
    if (fractions.empty()) return 0;
    const auto n = std::count_if(fractions.begin(), fractions.end(), [&](double f) { return f >= lo && f <= hi; });
    return static_cast<double>(n) / static_cast<double>(fractions.size());
  }
};

inline DatasetStats stats_from_annotations(const std::vector<Annotation>& anns, int image_size,
                                           const std::vector<std::string>& class_names) {
  std::map<int, ClassStats> by_id;
  for (std::size_t i = 0; i < class_names.size(); ++i) by_id[static_cast<int>(i)] = {static_cast<int>(i), class_names[i]};
  DatasetStats st;
  const double px = static_cast<double>(image_size) * image_size;
  for (const auto& a : anns) {
    auto& c = by_id[a.class_id];
    if (c.name.empty()) c = {a.class_id, "class_" + std::to_string(a.class_id)};
    const double f = a.w * a.h;
    ++c.count;
    c.mean_area_fraction += f;
    c.mean_area_px += f * px;
    st.fractions.push_back(f);
  }
  st.total = anns.size();
  for (auto& [id, c] : by_id) {
    if (c.count > 0) {
      c.mean_area_fraction /= static_cast<double>(c.count);
      c.mean_area_px /= static_cast<double>(c.count);
      c.proportion = static_cast<double>(c.count) / static_cast<double>(st.total);
    }
    st.classes.push_back(c);
  }
  return st;
}

/// Reads every *.txt file under `labels_dir` in name order.
inline DatasetStats dataset_stats(const std::filesystem::path& labels_dir, int image_size,
                                  const std::vector<std::string>& class_names) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(labels_dir)) throw std::runtime_error("not a directory: " + labels_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(labels_dir))
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Annotation> all;
  for (const auto& f : files) {
    auto anns = read_annotations(f);
    all.insert(all.end(), anns.begin(), anns.end());
  }
  return stats_from_annotations(all, image_size, class_names);
}

inline void write_stats_csv(std::ostream& os, const DatasetStats& st) {
  os << "class_id,class_name,sample_count,proportion,mean_area_px2,mean_area_fraction\n";
  os << std::setprecision(10);
  for (const auto& c : st.classes)
    os << c.class_id << ',' << c.name << ',' << c.count << ',' << c.proportion << ',' << c.mean_area_px << ','
       << c.mean_area_fraction << '\n';
}

struct HistogramBin {
  double lo = 0, hi = 0;
  std::size_t count = 0;
};

/// Area-fraction histogram with `bins` equal bins over [0, max_fraction);
/// a final open bin collects everything larger.
inline std::vector<HistogramBin> area_histogram(const DatasetStats& st, double max_fraction = 0.003, int bins = 30) {
  std::vector<HistogramBin> h(static_cast<std::size_t>(bins) + 1);
  const double step = max_fraction / bins;
  for (int i = 0; i < bins; ++i) h[i] = {i * step, (i + 1) * step, 0};
  h[bins] = {max_fraction, 1.0, 0};
  for (double f : st.fractions) {
    const auto i = std::min(bins, static_cast<int>(f / step));
    ++h[static_cast<std::size_t>(i)].count;
  }
  return h;
}

inline void write_histogram_csv(std::ostream& os, const std::vector<HistogramBin>& h) {
  os << "bin_lo,bin_hi,count\n" << std::setprecision(10);
  for (const auto& b : h) os << b.lo << ',' << b.hi << ',' << b.count << '\n';
}

}  // namespace sme
