#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "smeyolo/synth.hpp"

namespace sme {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("smeyolo_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::string> class_names(const SynthConfig& cfg) {
  std::vector<std::string> n;
  for (const auto& c : cfg.classes) n.push_back(c.name);
  return n;
}

TEST(Synth, SameSeedGivesIdenticalBytes) {
  SynthConfig cfg;
  cfg.num_images = 20;
  const auto a = scratch_dir("det_a"), b = scratch_dir("det_b");
  generate_dataset(cfg, a);
  generate_dataset(cfg, b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 2u * 20u + 3u);
  cfg.seed = 43;
  const auto c = scratch_dir("det_c");
  generate_dataset(cfg, c);
  EXPECT_NE(slurp(a / "images" / "000000.pgm"), slurp(c / "images" / "000000.pgm"));
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST(Synth, SamplesAreIndependentOfRenderOrder) {
  SynthConfig cfg;
  const auto late = render_sample(cfg, 7);
  render_sample(cfg, 3);
  EXPECT_EQ(render_sample(cfg, 7).image.pixels, late.image.pixels);
}

TEST(Synth, SingleClassCalibration) {
  SynthConfig cfg;
  cfg.classes = {{"missing_hole", 0.0008, DefectShape::disc}};
  std::vector<Annotation> all;
  for (int i = 0; i < 500; ++i) {
    const auto s = render_sample(cfg, static_cast<std::size_t>(i));
    all.insert(all.end(), s.annotations.begin(), s.annotations.end());
  }
  const auto st = stats_from_annotations(all, cfg.image_size, class_names(cfg));
  ASSERT_EQ(st.classes.size(), 1u);
  EXPECT_NEAR(st.classes[0].mean_area_fraction, 0.0008, 0.2 * 0.0008);
}

TEST(Synth, BoxesInsideUnitSquareAndTight) {
  SynthConfig cfg;
  const double S = cfg.image_size;
  for (int i = 0; i < 200; ++i) {
    const auto s = render_sample(cfg, static_cast<std::size_t>(i));
    ASSERT_EQ(s.annotations.size(), s.painted.size());
    EXPECT_GE(s.annotations.size(), 1u);
    EXPECT_LE(s.annotations.size(), 6u);
    for (std::size_t k = 0; k < s.annotations.size(); ++k) {
      const auto& a = s.annotations[k];
      EXPECT_GE(a.cx - a.w / 2, 0.0);
      EXPECT_LE(a.cx + a.w / 2, 1.0);
      EXPECT_GE(a.cy - a.h / 2, 0.0);
      EXPECT_LE(a.cy + a.h / 2, 1.0);
      const auto& r = s.painted[k];
      ASSERT_FALSE(r.empty());
      EXPECT_LE(std::abs(r.x0 - (a.cx - a.w / 2) * S), 1.0);
      EXPECT_LE(std::abs(r.x1 - (a.cx + a.w / 2) * S), 1.0);
      EXPECT_LE(std::abs(r.y0 - (a.cy - a.h / 2) * S), 1.0);
      EXPECT_LE(std::abs(r.y1 - (a.cy + a.h / 2) * S), 1.0);
    }
  }
}

TEST(Synth, DefaultsConcentrateInTinyBand) {
  SynthConfig cfg;
  std::vector<Annotation> all;
  for (int i = 0; i < 300; ++i) {
    const auto s = render_sample(cfg, static_cast<std::size_t>(i));
    all.insert(all.end(), s.annotations.begin(), s.annotations.end());
  }
  const auto st = stats_from_annotations(all, cfg.image_size, class_names(cfg));
  EXPECT_GE(st.fraction_in_band(0.0004, 0.0014), 0.6);
  double sum = 0;
  for (const auto& c : st.classes) sum += c.proportion;
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(Synth, SplitsAreEightOneOneAndDisjoint) {
  const auto s = split_sizes(500);
  EXPECT_EQ(s.train, 400);
  EXPECT_EQ(s.val, 50);
  EXPECT_EQ(s.test, 50);
  SynthConfig cfg;
  cfg.num_images = 30;
  const auto dir = scratch_dir("splits");
  const auto res = generate_dataset(cfg, dir);
  EXPECT_EQ(res.splits.train, 24);
  std::set<std::string> seen;
  std::size_t total = 0;
  for (const char* m : {"train.txt", "val.txt", "test.txt"})
    for (const auto& p : read_manifest(dir / m)) {
      seen.insert(p);
      ++total;
      EXPECT_TRUE(fs::exists(dir / p));
      EXPECT_TRUE(fs::exists(label_path_for(dir, p)));
    }
  EXPECT_EQ(total, 30u);
  EXPECT_EQ(seen.size(), 30u);
  const auto img = read_pgm(dir / "images" / "000000.pgm");
  EXPECT_EQ(img.width, 256);
  EXPECT_EQ(img.height, 256);
  EXPECT_EQ(img.pixels, render_sample(cfg, 0).image.pixels);
  fs::remove_all(dir);
}

TEST(Synth, AnnotationFormat) {
  const std::string text = format_annotations({{3, 0.5, 0.25, 0.03125, 0.0625}});
  EXPECT_EQ(text, "3 0.500000 0.250000 0.031250 0.062500\n");
  std::istringstream is(text);
  const auto back = parse_annotations(is, "mem");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].class_id, 3);
  EXPECT_EQ(back[0].w, 0.03125);
}

TEST(Synth, MalformedAnnotationNamesFileAndLine) {
  std::istringstream is("0 0.5 0.5 0.1 0.1\n\n1 0.5 oops 0.1 0.1\n");
  try {
    parse_annotations(is, "labels/x.txt");
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("labels/x.txt:3"), std::string::npos) << e.what();
  }
  std::istringstream outside("0 0.99 0.5 0.1 0.1\n");
  EXPECT_THROW(parse_annotations(outside, "m"), std::runtime_error);
  std::istringstream extra("0 0.5 0.5 0.1 0.1 7\n");
  EXPECT_THROW(parse_annotations(extra, "m"), std::runtime_error);
}

TEST(Stats, HandFixtureMeans) {
  // Areas in a 100x100 image: 10x10, 20x5 and 4x4 pixels.
  const std::vector<Annotation> anns{{0, 0.5, 0.5, 0.1, 0.1}, {0, 0.5, 0.5, 0.2, 0.05}, {2, 0.5, 0.5, 0.04, 0.04}};
  const auto st = stats_from_annotations(anns, 100, {"a", "b", "c"});
  ASSERT_EQ(st.classes.size(), 3u);
  EXPECT_EQ(st.total, 3u);
  EXPECT_EQ(st.classes[0].count, 2u);
  EXPECT_NEAR(st.classes[0].mean_area_px, 100.0, 1e-9);
  EXPECT_NEAR(st.classes[0].mean_area_fraction, 0.01, 1e-12);
  EXPECT_NEAR(st.classes[0].proportion, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(st.classes[1].count, 0u);
  EXPECT_EQ(st.classes[1].proportion, 0.0);
  EXPECT_NEAR(st.classes[2].mean_area_px, 16.0, 1e-9);
}

TEST(Stats, EmptyDataset) {
  const auto dir = scratch_dir("empty");
  fs::create_directories(dir / "labels");
  const auto st = dataset_stats(dir / "labels", 256, {"a", "b"});
  EXPECT_EQ(st.total, 0u);
  for (const auto& c : st.classes) EXPECT_EQ(c.count, 0u);
  EXPECT_EQ(st.fraction_in_band(0, 1), 0.0);
  fs::remove_all(dir);
}

TEST(Stats, CsvSchema) {
  const auto st = stats_from_annotations({{1, 0.5, 0.5, 0.1, 0.1}}, 256, {"a", "b"});
  std::ostringstream os;
  write_stats_csv(os, st);
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "class_id,class_name,sample_count,proportion,mean_area_px2,mean_area_fraction");
  std::string line;
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 2);
  const auto h = area_histogram(st);
  std::size_t n = 0;
  for (const auto& b : h) n += b.count;
  EXPECT_EQ(n, 1u);
  EXPECT_EQ(h.back().count, 1u);  // 0.01 is above the 0.3% histogram range
}

TEST(Stats, StatsFromDiskMatchMemory) {
  SynthConfig cfg;
  cfg.num_images = 12;
  const auto dir = scratch_dir("disk");
  generate_dataset(cfg, dir);
  std::vector<Annotation> mem;
  for (int i = 0; i < 12; ++i) {
    const auto s = render_sample(cfg, static_cast<std::size_t>(i));
    mem.insert(mem.end(), s.annotations.begin(), s.annotations.end());
  }
  const auto a = dataset_stats(dir / "labels", 256, class_names(cfg));
  const auto b = stats_from_annotations(mem, 256, class_names(cfg));
  ASSERT_EQ(a.total, b.total);
  for (std::size_t k = 0; k < a.classes.size(); ++k) {
    EXPECT_EQ(a.classes[k].count, b.classes[k].count);
    // Files hold 6 decimals.
    EXPECT_NEAR(a.classes[k].mean_area_fraction, b.classes[k].mean_area_fraction, 1e-6);
  }
  fs::remove_all(dir);
}

TEST(Synth, RejectsBadConfig) {
  SynthConfig cfg;
  cfg.classes[0].area_fraction = 0.2;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.max_defects = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.trace_width = cfg.trace_pitch;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace sme
