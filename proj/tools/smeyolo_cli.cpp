#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smeyolo/detector.hpp"
#include "smeyolo/gradcheck_suite.hpp"
#include "smeyolo/run_config.hpp"
#include "smeyolo/runtime.hpp"
#include "smeyolo/svg.hpp"

namespace fs = std::filesystem;
using namespace sme;

namespace {

struct Globals {
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string config;
  bool plot = false;
};

struct Options {
  int images = 0;
  std::string data;
  std::string checkpoint;
  std::string split = "test";
  int epochs = 0;
  int instances = 0;
  std::vector<double> sizes;
  double max_offset = 0;
  double step = 0;
};

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  body(os);
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

RunConfig load_run_config(const Globals& g) {
  RunConfig rc = g.config.empty() ? RunConfig{} : RunConfig::from_file(g.config);
  if (g.seed) rc.seed = g.seed;
  return rc;
}

fs::path prepare_out(const Globals& g) {
  const fs::path out(g.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (!fs::is_directory(out)) throw std::runtime_error("cannot create output directory " + out.string());
  return out;
}

void echo_config(const fs::path& out, const RunConfig& rc) {
  write_file(out / "config.ini", [&](std::ostream& os) { os << rc.echo_text(); });
}

/// Refuses an output directory that is the dataset itself, so no command
/// overwrites its inputs.
fs::path require_data(const std::string& data, const fs::path& out) {
  const fs::path dir(data);
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + data);
  if (fs::exists(out) && fs::equivalent(dir, out)) throw std::runtime_error("--out must differ from --data");
  return dir;
}

/// Detector settings that must follow the dataset.
void adopt_dataset(DetectorConfig& cfg, const SynthConfig& meta) {
  cfg.input_size = meta.image_size;
  cfg.num_classes = static_cast<int>(meta.classes.size());
  cfg.validate();
}

std::vector<double> to_double(const std::vector<EpochRow>& rows, double EpochRow::*field) {
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(r.*field);
  return out;
}

int cmd_gen_data(const Globals& g, const Options& o) {
  RunConfig rc = load_run_config(g);
  if (o.images > 0) rc.synth.num_images = o.images;
  rc.finalize();
  const fs::path out = prepare_out(g);
  const GenerateResult res = generate_dataset(rc.synth, out);
  write_dataset_meta(out, rc.synth);
  echo_config(out, rc);
  write_file(out / "summary.csv", [&](std::ostream& os) {
    os << "metric,value\n"
       << "train_images," << res.splits.train << "\nval_images," << res.splits.val << "\ntest_images," << res.splits.test
       << "\ndefects," << res.defects << "\nskipped_defects," << res.skipped << '\n';
  });
  std::cerr << "gen-data: " << rc.synth.num_images << " images, " << res.defects << " defects, " << res.skipped
            << " skipped placements\n";
  return 0;
}

int cmd_stats(const Globals& g, const Options& o) {
  RunConfig rc = load_run_config(g);
  rc.finalize();
  const fs::path out = prepare_out(g);
  const fs::path data = require_data(o.data, out);
  SynthConfig meta = rc.synth;
  if (fs::exists(data / kDatasetMetaFile)) meta = read_dataset_meta(data);
  std::vector<std::string> names;
  for (const auto& c : meta.classes) names.push_back(c.name);
  const DatasetStats st = dataset_stats(data / "labels", meta.image_size, names);
  const auto hist = area_histogram(st);
  echo_config(out, rc);
  write_file(out / "stats.csv", [&](std::ostream& os) { write_stats_csv(os, st); });
  write_file(out / "summary.csv", [&](std::ostream& os) { write_stats_csv(os, st); });
  write_file(out / "area_histogram.csv", [&](std::ostream& os) { write_histogram_csv(os, hist); });
  if (g.plot) {
    PlotSeries s{"boxes per bin", {}, {}};
    for (const auto& b : hist) {
      s.x.push_back(b.lo);
      s.y.push_back(static_cast<double>(b.count));
    }
    emit_svg_plot({s}, {"Box area fraction histogram", "area fraction (bin start)", "boxes"}, out / "area_histogram.svg");
  }
  std::cerr << "stats: " << st.total << " boxes over " << st.classes.size() << " classes\n";
  return 0;
}

int cmd_gradcheck(const Globals& g, const Options& o) {
  RunConfig rc = load_run_config(g);
  if (o.instances > 0) rc.gradcheck.instances = o.instances;
  rc.finalize();
  const fs::path out = prepare_out(g);
  const auto rows = run_gradcheck_suite(rc.gradcheck.instances, rc.gradcheck.seed, &std::cerr);
  echo_config(out, rc);
  write_file(out / "summary.csv", [&](std::ostream& os) { write_gradcheck_csv(os, rows); });
  bool ok = true;
  for (const auto& r : rows) ok = ok && r.pass();
  if (!ok) {
    std::cerr << "gradcheck: some blocks exceed tolerance\n";
    return 1;
  }
  return 0;
}

int cmd_sensitivity(const Globals& g, const Options& o) {
  RunConfig rc = load_run_config(g);
  if (!o.sizes.empty()) rc.sensitivity.sizes = o.sizes;
  if (o.max_offset > 0) rc.sensitivity.max_offset = o.max_offset;
  if (o.step > 0) rc.sensitivity.step = o.step;
  rc.finalize();
  const fs::path out = prepare_out(g);
  const auto rows = sensitivity_sweep(rc.sensitivity.sizes, rc.sensitivity.offsets(), rc.sensitivity.nwd_c);
  echo_config(out, rc);
  write_file(out / "sensitivity.csv", [&](std::ostream& os) { write_sensitivity_csv(os, rows); });
  write_file(out / "summary.csv", [&](std::ostream& os) { write_sensitivity_csv(os, rows); });
  PlotPanel iou_panel{{"IoU vs offset", "offset (px)", "IoU"}, {}};
  PlotPanel nwd_panel{{"NWD vs offset", "offset (px)", "NWD (canonical)"}, {}};
  for (double s : rc.sensitivity.sizes) {
    PlotSeries a{"side " + fmt_real(s) + " px", {}, {}}, b = a;
    for (const auto& r : rows)
      if (r.size_px == s) {
        a.x.push_back(r.offset_px);
        a.y.push_back(r.iou);
        b.x.push_back(r.offset_px);
        b.y.push_back(r.nwd_canonical);
      }
    iou_panel.series.push_back(a);
    nwd_panel.series.push_back(b);
  }
  emit_svg_plot({iou_panel, nwd_panel}, out / "sensitivity.svg");
  return 0;
}

struct LoadedData {
  SynthConfig meta;
  std::vector<DetSample> train, val, test;
};

LoadedData load_dataset(const fs::path& data, bool need_train) {
  LoadedData d;
  d.meta = read_dataset_meta(data);
  const int size = d.meta.image_size, k = static_cast<int>(d.meta.classes.size());
  if (need_train) {
    d.train = load_split(data, "train", size, k);
    d.val = load_split(data, "val", size, k);
  }
  d.test = load_split(data, "test", size, k);
  return d;
}

int cmd_train(const Globals& g, const Options& o) {
  RunConfig rc = load_run_config(g);
  if (o.epochs > 0) rc.detector.epochs = o.epochs;
  rc.finalize();
  const fs::path out = prepare_out(g);
  const fs::path data = require_data(o.data, out);
  const LoadedData d = load_dataset(data, true);
  adopt_dataset(rc.detector, d.meta);
  echo_config(out, rc);
  TrainOptions opts;
  opts.log = &std::cerr;
  opts.dump_dir = out;
  const TrainResult tr = train_detector(rc.detector, d.train, d.val, opts);
  save_checkpoint(out / "final.ckpt", tr.final_state);
  if (tr.best_epoch > 0) save_checkpoint(out / "best.ckpt", tr.best_state);
  const auto& hist = tr.final_state.history;
  write_file(out / "metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, hist); });
  write_file(out / "summary.csv", [&](std::ostream& os) {
    os << "metric,value\n"
       << "epochs_run," << hist.size() << "\nbest_epoch," << tr.best_epoch << "\nbest_val_map50,"
       << fmt_real(tr.best_val_map50) << "\nfinal_train_loss," << fmt_real(hist.empty() ? 0.0 : hist.back().train_loss)
       << "\nstopped_early," << (tr.stopped_early ? 1 : 0) << "\nparameters," << parameter_count(rc.detector)
       << "\nmacs," << model_macs(rc.detector) << '\n';
  });
  if (g.plot && !hist.empty()) {
    std::vector<double> epochs;
    for (const auto& r : hist) epochs.push_back(r.epoch);
    emit_svg_plot({PlotPanel{{"Training loss", "epoch", "loss"},
                             {{"total", epochs, to_double(hist, &EpochRow::train_loss)},
                              {"box", epochs, to_double(hist, &EpochRow::box_loss)},
                              {"obj", epochs, to_double(hist, &EpochRow::obj_loss)},
                              {"cls", epochs, to_double(hist, &EpochRow::cls_loss)}}},
                   PlotPanel{{"Validation", "epoch", "mAP@0.5"}, {{"val mAP@0.5", epochs, to_double(hist, &EpochRow::val_map50)}}}},
                  out / "training.svg");
  }
  return 0;
}

int cmd_eval(const Globals& g, const Options& o) {
  RunConfig rc = load_run_config(g);
  rc.finalize();
  const fs::path out = prepare_out(g);
  const fs::path data = require_data(o.data, out);
  if (o.checkpoint.empty()) throw std::runtime_error("eval needs --checkpoint");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const SynthConfig meta = read_dataset_meta(data);
  if (ck.model.cfg.input_size != meta.image_size || ck.model.cfg.num_classes != static_cast<int>(meta.classes.size()))
    throw std::runtime_error("checkpoint input size or class count does not match the dataset");
  const auto samples = load_split(data, o.split, meta.image_size, static_cast<int>(meta.classes.size()));
  std::vector<Detection> preds;
  const EvalReport report = evaluate(ck.model, samples, &preds);
  rc.detector = ck.model.cfg;
  echo_config(out, rc);
  write_file(out / "report.csv", [&](std::ostream& os) { write_report_csv(os, report); });
  write_file(out / "summary.csv", [&](std::ostream& os) { write_report_csv(os, report); });
  write_file(out / "predictions.csv", [&](std::ostream& os) { write_predictions_csv(os, preds); });
  for (const auto& w : report.warnings) std::cerr << "eval: " << w << '\n';
  std::cerr << "eval: mAP@0.5 " << fmt_real(report.map50) << " on " << samples.size() << " images\n";
  return 0;
}

int cmd_ablate(const Globals& g, const Options& o) {
  RunConfig rc = load_run_config(g);
  if (o.epochs > 0) rc.detector.epochs = o.epochs;
  rc.finalize();
  const fs::path out = prepare_out(g);
  const fs::path data = require_data(o.data, out);
  const LoadedData d = load_dataset(data, true);
  adopt_dataset(rc.detector, d.meta);
  echo_config(out, rc);
  const auto rows = run_ablation(rc.detector, d.train, d.val, d.test, &std::cerr);
  write_file(out / "ablation.csv", [&](std::ostream& os) { write_ablation_csv(os, rows); });
  write_file(out / "summary.csv", [&](std::ostream& os) { write_ablation_csv(os, rows); });
  if (g.plot) {
    PlotSeries m50{"mAP@0.5", {}, {}}, m95{"mAP@0.5:0.95", {}, {}};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      m50.x.push_back(static_cast<double>(i));
      m50.y.push_back(rows[i].report.map50);
      m95.x.push_back(static_cast<double>(i));
      m95.y.push_back(rows[i].report.map50_95);
    }
    emit_svg_plot({m50, m95}, {"Ablation ladder (test split)", "variant (0 = baseline, 3 = full)", "mAP"},
                  out / "ablation.svg");
  }
  return 0;
}

int cmd_flops(const Globals& g, const Options&) {
  RunConfig rc = load_run_config(g);
  rc.finalize();
  const fs::path out = prepare_out(g);
  echo_config(out, rc);
  const auto variants = ablation_variants(rc.detector);
  const double base = static_cast<double>(model_macs(variants.front().second));
  write_file(out / "summary.csv", [&](std::ostream& os) {
    os << "variant,parameters,macs,ratio_to_baseline\n";
    for (const auto& [name, cfg] : variants)
      os << name << ',' << parameter_count(cfg) << ',' << model_macs(cfg) << ','
         << fmt_real(static_cast<double>(model_macs(cfg)) / base) << '\n';
  });
  std::vector<std::size_t> extended = kDefaultMsfaKernels;
  extended.push_back(21);
  write_file(out / "msfa_flops.csv", [&](std::ostream& os) {
    os << "channels,height,width,default_macs,extended_macs\n";
    for (std::uint64_t c : {8, 16, 32, 64, 128})
      for (std::uint64_t hw : {8, 16, 32, 64})
        os << c << ',' << hw << ',' << hw << ',' << msfa_flops(c, hw, hw) << ',' << msfa_flops(c, hw, hw, extended) << '\n';
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const RunConfig defaults;
  Globals g;
  Options o;
  o.sizes = defaults.sensitivity.sizes;
  o.max_offset = defaults.sensitivity.max_offset;
  o.step = defaults.sensitivity.step;

  CLI::App app{"Tiny-defect detector toolkit: data generation, statistics, gradient checks, training and evaluation"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_option("--out", g.out, "Output directory")->required();
  app.add_option("--seed", g.seed, "Global seed; overrides every module seed");
  app.add_option("--config", g.config, "Config file with [run], [synth], [detector], [gradcheck], [sensitivity] sections")
      ->check(CLI::ExistingFile);
  app.add_flag("--plot", g.plot, "Also write SVG plots");

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic PCB defect dataset into --out");
  gen->add_option("--images", o.images, "Number of images (0 keeps the config value, default " +
                                            std::to_string(defaults.synth.num_images) + ")");
  auto* stats = app.add_subcommand("stats", "Per-class box statistics of a dataset");
  stats->add_option("--data", o.data, "Dataset directory")->required();
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks of every block");
  grad->add_option("--instances", o.instances, "Instances per block (0 keeps the config value, default " +
                                                   std::to_string(defaults.gradcheck.instances) + ")");
  auto* sens = app.add_subcommand("sensitivity", "IoU and NWD against center offset for square boxes");
  sens->add_option("--sizes", o.sizes, "Box sides in pixels")->delimiter(',');
  sens->add_option("--max-offset", o.max_offset, "Largest offset in pixels");
  sens->add_option("--step", o.step, "Offset step in pixels");
  auto* train = app.add_subcommand("train", "Train the detector on a generated dataset");
  train->add_option("--data", o.data, "Dataset directory")->required();
  train->add_option("--epochs", o.epochs, "Epochs (0 keeps the config value, default " +
                                              std::to_string(defaults.detector.epochs) + ")");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  eval->add_option("--data", o.data, "Dataset directory")->required();
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", o.split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  auto* ablate = app.add_subcommand("ablate", "Train and test the four ablation variants");
  ablate->add_option("--data", o.data, "Dataset directory")->required();
  ablate->add_option("--epochs", o.epochs, "Epochs per variant (0 keeps the config value, default " +
                                               std::to_string(defaults.detector.epochs) + ")");
  auto* flops = app.add_subcommand("flops", "Parameter and multiply-accumulate counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  using Handler = int (*)(const Globals&, const Options&);
  const std::vector<std::pair<CLI::App*, Handler>> handlers{
      {gen, cmd_gen_data},     {stats, cmd_stats}, {grad, cmd_gradcheck}, {sens, cmd_sensitivity},
      {train, cmd_train},      {eval, cmd_eval},   {ablate, cmd_ablate},  {flops, cmd_flops}};
  try {
    for (const auto& [sub, handler] : handlers)
      if (sub->parsed()) return handler(g, o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
