#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "detector.hpp"
#include "synth.hpp"

namespace sme {

inline const std::vector<std::pair<std::string, DefectShape>>& defect_shape_names() {
  static const std::vector<std::pair<std::string, DefectShape>> names{
      {"disc", DefectShape::disc},     {"notch", DefectShape::notch}, {"gap", DefectShape::gap},
      {"bridge", DefectShape::bridge}, {"spur", DefectShape::spur},   {"blob", DefectShape::blob}};
  return names;
}

inline std::string to_string(DefectShape s) {
  for (const auto& [name, v] : defect_shape_names())
    if (v == s) return name;
  return "blob";
}

/// Reads the [synth] keys. Classes are given as three parallel lists.
inline void apply_synth(ConfigReader& r, SynthConfig& cfg) {
  r.get("image_size", cfg.image_size);
  r.get("num_images", cfg.num_images);
  std::vector<std::string> names, shapes;
  std::vector<double> fractions;
  for (const auto& c : cfg.classes) {
    names.push_back(c.name);
    shapes.push_back(to_string(c.shape));
    fractions.push_back(c.area_fraction);
  }
  r.get("class_names", names);
  r.get("class_fractions", fractions);
  r.get("class_shapes", shapes);
  if (names.size() != fractions.size() || names.size() != shapes.size())
    throw ConfigError("[synth] class_names, class_fractions and class_shapes must have equal length");
  cfg.classes.clear();
  for (std::size_t i = 0; i < names.size(); ++i) {
    ClassSpec c{names[i], fractions[i], DefectShape::blob};
    bool found = false;
    for (const auto& [name, v] : defect_shape_names())
      if (name == shapes[i]) {
        c.shape = v;
        found = true;
      }
    if (!found) throw ConfigError("[synth] unknown defect shape '" + shapes[i] + "'");
    cfg.classes.push_back(c);
  }
  r.get("min_defects", cfg.min_defects);
  r.get("max_defects", cfg.max_defects);
  r.get("area_spread", cfg.area_spread);
  r.get("trace_pitch", cfg.trace_pitch);
  r.get("trace_width", cfg.trace_width);
  r.get("placement_retries", cfg.placement_retries);
  r.get("seed", cfg.seed);
}

inline void echo_synth(ConfigWriter& w, const SynthConfig& cfg) {
  std::vector<std::string> names, shapes;
  std::vector<double> fractions;
  for (const auto& c : cfg.classes) {
    names.push_back(c.name);
    shapes.push_back(to_string(c.shape));
    fractions.push_back(c.area_fraction);
  }
  w.put("image_size", cfg.image_size)
      .put("num_images", cfg.num_images)
      .put("class_names", names)
      .put("class_fractions", fractions)
      .put("class_shapes", shapes)
      .put("min_defects", cfg.min_defects)
      .put("max_defects", cfg.max_defects)
      .put("area_spread", cfg.area_spread)
      .put("trace_pitch", cfg.trace_pitch)
      .put("trace_width", cfg.trace_width)
      .put("placement_retries", cfg.placement_retries)
      .put("seed", cfg.seed);
}

struct GradcheckConfig {
  int instances = 20;
  std::uint64_t seed = 0;
};

struct SensitivityConfig {
  std::vector<double> sizes{6, 36};
  double max_offset = 12;
  double step = 1;
  double nwd_c = kDefaultNwdConstant;

  std::vector<double> offsets() const {
    if (!(step > 0) || !(max_offset >= 0)) throw ConfigError("[sensitivity] need step > 0 and max_offset >= 0");
    std::vector<double> out;
    for (int i = 0; i * step <= max_offset + 1e-9; ++i) out.push_back(i * step);
    return out;
  }
};

/// Effective configuration of one CLI run: every module under its own
/// section plus an optional global seed that overrides the module seeds.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  SynthConfig synth;
  DetectorConfig detector;
  GradcheckConfig gradcheck;
  SensitivityConfig sensitivity;

  static RunConfig parse(const ConfigFile& cf) {
    cf.require_sections({"run", "synth", "detector", "gradcheck", "sensitivity"});
    RunConfig rc;
    {
      ConfigReader r(cf, "run");
      std::uint64_t s = 0;
      bool has = false;
      if (auto it = cf.sections.find("run"); it != cf.sections.end())
        for (const auto& e : it->second.entries) has = has || e.key == "seed";
      r.get("seed", s);
      if (has) rc.seed = s;
      r.finish();
    }
    {
      ConfigReader r(cf, "synth");
      apply_synth(r, rc.synth);
      r.finish();
    }
    {
      ConfigReader r(cf, "detector");
      rc.detector.apply(r);
      r.finish();
    }
    {
      ConfigReader r(cf, "gradcheck");
      r.get("instances", rc.gradcheck.instances);
      r.get("seed", rc.gradcheck.seed);
      r.finish();
    }
    {
      ConfigReader r(cf, "sensitivity");
      r.get("sizes", rc.sensitivity.sizes);
      r.get("max_offset", rc.sensitivity.max_offset);
      r.get("step", rc.sensitivity.step);
      r.get("nwd_c", rc.sensitivity.nwd_c);
      r.finish();
    }
    return rc;
  }

  static RunConfig from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    return parse(ConfigFile::parse(is, path.string()));
  }

  static RunConfig from_text(const std::string& text, const std::string& source = "config") {
    return parse(ConfigFile::parse_string(text, source));
  }

  /// Pushes the global seed into every module and validates the result.
  void finalize() {
    if (seed) {
      synth.seed = *seed;
      detector.seed = *seed;
      gradcheck.seed = *seed;
    }
    synth.validate();
    detector.validate();
    if (gradcheck.instances < 1) throw ConfigError("[gradcheck] instances must be positive");
    sensitivity.offsets();
    if (sensitivity.sizes.empty()) throw ConfigError("[sensitivity] sizes must not be empty");
    for (double s : sensitivity.sizes)
      if (!(s > 0)) throw ConfigError("[sensitivity] sizes must be positive");
    if (!(sensitivity.nwd_c > 0)) throw ConfigError("[sensitivity] nwd_c must be positive");
  }

  std::string echo_text() const {
    std::ostringstream os;
    ConfigWriter w(os);
    if (seed) w.section("run").put("seed", *seed);
    w.section("synth");
    echo_synth(w, synth);
    w.section("detector");
    detector.echo(w);
    w.section("gradcheck").put("instances", gradcheck.instances).put("seed", gradcheck.seed);
    w.section("sensitivity")
        .put("sizes", sensitivity.sizes)
        .put("max_offset", sensitivity.max_offset)
        .put("step", sensitivity.step)
        .put("nwd_c", sensitivity.nwd_c);
    return os.str();
  }
};

inline constexpr const char* kDatasetMetaFile = "dataset.ini";

/// Records the generator settings next to a dataset so later commands know
/// its image size and class names.
inline void write_dataset_meta(const std::filesystem::path& dir, const SynthConfig& cfg) {
  std::ofstream os(dir / kDatasetMetaFile);
  if (!os) throw std::runtime_error("cannot write " + (dir / kDatasetMetaFile).string());
  ConfigWriter w(os);
  w.section("synth");
  echo_synth(w, cfg);
}

inline SynthConfig read_dataset_meta(const std::filesystem::path& dir) {
  const auto path = dir / kDatasetMetaFile;
  std::ifstream is(path);
  if (!is) throw std::runtime_error("not a generated dataset (missing " + path.string() + ")");
  const ConfigFile cf = ConfigFile::parse(is, path.string());
  cf.require_sections({"synth"});
  SynthConfig cfg;
  ConfigReader r(cf, "synth");
  apply_synth(r, cfg);
  r.finish();
  cfg.validate();
  return cfg;
}

}  // namespace sme
