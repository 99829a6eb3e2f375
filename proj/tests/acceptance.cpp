// Runs the nine acceptance criteria and prints one PASS/FAIL line each, also
// written to acceptance_results.txt in the working directory.
// Usage: acceptance [criterion numbers...]; with no arguments all run.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "smeyolo/detector.hpp"
#include "smeyolo/gradcheck_suite.hpp"
#include "smeyolo/run_config.hpp"
#include "smeyolo/runtime.hpp"

namespace fs = std::filesystem;
using namespace sme;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

fs::path work_dir() {
  static const fs::path dir = fs::temp_directory_path() / ("smeyolo_acceptance_" + std::to_string(getpid()));
  return dir;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SMEYOLO_CLI) + " " + args + " >>" + (work_dir() / "cli.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(slurp(p));
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::string num(double v) { return fmt_real(v); }

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Stopwatch sw;
  const auto rows = run_gradcheck_suite(20, 0);
  const double secs = sw.seconds();
  std::ostringstream d;
  bool ok = true;
  for (const auto& r : rows) {
    ok = ok && r.pass() && r.instances == 20;
    if (!r.pass()) d << r.block << " " << r.max_rel_err << " > " << r.tolerance << "; ";
  }
  double worst_pure = 0, worst_bn = 0;
  for (const auto& r : rows) {
    double& worst = r.bn_coupled ? worst_bn : worst_pure;
    worst = std::max(worst, r.max_rel_err);
  }
  d << rows.size() << " blocks x 20 instances, worst pure " << worst_pure << ", worst BN-coupled " << worst_bn << ", "
    << num(secs) << " s";
  return {ok && secs < 120, d.str()};
}

Outcome closed_form_geometry() {
  Rng rng(2024, "acceptance.geometry");
  auto box = [&] { return BBox{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(1, 40), rng.uniform(1, 40)}; };
  double worst_w2 = 0;
  for (int i = 0; i < 1000; ++i) {
    const BBox a = box(), b = box();
    const double dx = a.cx - b.cx, dy = a.cy - b.cy, dw = (a.w - b.w) / 2, dh = (a.h - b.h) / 2;
    const double reduced = dx * dx + dy * dy + dw * dw + dh * dh;
    const double got = wasserstein2_sq(a, b);
    const double scale = std::max(1.0, reduced);
    worst_w2 = std::max({worst_w2, std::abs(got - reduced) / scale, std::abs(got - oracle::w2sq_matrix(a, b)) / scale});
  }
  double worst_iou = 0;
  for (int i = 0; i < 100; ++i) {
    const BBox a = box();
    const BBox b{a.cx + rng.uniform(-15, 15), a.cy + rng.uniform(-15, 15), rng.uniform(1, 40), rng.uniform(1, 40)};
    worst_iou = std::max(worst_iou, std::abs(iou(a, b) - oracle::iou_monte_carlo(a, b)));
  }
  return {worst_w2 <= 1e-12 && worst_iou <= 0.01,
          "W2^2 worst relative gap " + num(worst_w2) + " (1000 pairs), IoU worst gap " + num(worst_iou) + " (100 pairs)"};
}

Outcome small_object_sensitivity() {
  bool ok = true;
  std::ostringstream d;
  for (int off = 1; off <= 6; ++off) {
    const BBox s{0, 0, 6, 6}, l{0, 0, 36, 36};
    const double iou_s = iou(s, s.translated(off, 0)), iou_l = iou(l, l.translated(off, 0));
    const double w_s = std::sqrt(wasserstein2_sq(s, s.translated(off, 0)));
    const double w_l = std::sqrt(wasserstein2_sq(l, l.translated(off, 0)));
    ok = ok && iou_s < iou_l && w_s == off && w_l == off;
    d << "d=" << off << " IoU " << num(iou_s) << "/" << num(iou_l) << " W2 " << w_s << "/" << w_l << "; ";
  }
  return {ok, d.str()};
}

Outcome metrics_oracle() {
  Rng rng(77, "acceptance.metrics");
  int agree = 0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<GroundTruth> gts;
    std::vector<Detection> preds;
    const auto ng = rng.uniform_int(0, 5), np = rng.uniform_int(0, 6);
    auto rand_box = [&] { return BBox{rng.uniform(8, 24), rng.uniform(8, 24), rng.uniform(4, 10), rng.uniform(4, 10)}; };
    for (std::int64_t i = 0; i < ng; ++i) gts.push_back({"img" + std::to_string(rng.uniform_int(0, 1)), 0, rand_box()});
    for (std::int64_t i = 0; i < np; ++i) {
      Detection d{"img" + std::to_string(rng.uniform_int(0, 1)), 0, rand_box(), 0};
      if (!gts.empty() && rng.uniform() < 0.7) {
        const auto& g = gts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(gts.size()) - 1))];
        d.image_id = g.image_id;
        d.box = g.box.translated(rng.uniform(-3, 3), rng.uniform(-3, 3));
      }
      d.score = static_cast<double>(rng.uniform_int(1, 6)) / 6.0;
      preds.push_back(d);
    }
    const auto m = match_detections(preds, gts, 0.5, 1);
    const auto ref_tp = oracle::brute_force_match(preds, gts, 0.5);
    std::vector<double> scores;
    for (const auto& p : preds) scores.push_back(p.score);
    const double ap = average_precision(scores, m.tp, gts.size()).ap;
    const double ref_ap = oracle::brute_force_ap(scores, ref_tp, gts.size());
    agree += m.tp == ref_tp && ap == ref_ap;
  }
  return {agree == 50, std::to_string(agree) + "/50 micro-instances agree exactly"};
}

Outcome dataset_calibration() {
  const fs::path ds = work_dir() / "calib", st = work_dir() / "calib_stats";
  const SynthConfig defaults;
  const int images = 500 * static_cast<int>(defaults.classes.size());
  if (run_cli("gen-data --seed 42 --images " + std::to_string(images) + " --out " + ds.string()) != 0)
    return {false, "gen-data failed"};
  if (run_cli("stats --data " + ds.string() + " --out " + st.string()) != 0) return {false, "stats failed"};
  const auto rows = read_csv(st / "summary.csv");
  const std::vector<std::string> header{"class_id", "class_name", "sample_count", "proportion", "mean_area_px2",
                                        "mean_area_fraction"};
  bool ok = !rows.empty() && rows[0] == header && rows.size() == defaults.classes.size() + 1;
  std::ostringstream d;
  d << images << " images; ";
  for (std::size_t i = 1; ok && i < rows.size(); ++i) {
    const double target = defaults.classes[i - 1].area_fraction, got = std::stod(rows[i][5]);
    const double rel = (got - target) / target;
    ok = ok && std::abs(rel) <= 0.2;
    d << rows[i][1] << " " << num(got) << " (" << (rel >= 0 ? "+" : "") << num(std::round(rel * 1000) / 10) << "%) ";
  }
  fs::remove_all(ds);
  return {ok, d.str()};
}

Outcome overfit_sanity() {
  Stopwatch sw;
  const auto data = synth_samples(SynthConfig{}, 0, 10);
  DetectorConfig cfg;
  cfg.epochs = 200;
  cfg.patience = cfg.epochs;
  cfg.lr = 3e-3;
  cfg.batch_size = 10;
  const TrainResult r = train_detector(cfg, data, data);
  const double secs = sw.seconds();
  int first = 0;
  for (const auto& row : r.final_state.history)
    if (row.val_map50 >= 0.95) {
      first = row.epoch;
      break;
    }
  const double final_map = evaluate(r.final_state.model, data).map50;
  std::ostringstream d;
  d << "train mAP@0.5 >= 0.95 first at epoch " << (first ? std::to_string(first) : "never") << ", best "
    << num(r.best_val_map50) << ", final " << num(final_map) << ", lr 3e-3 full batch, " << num(secs) << " s";
  return {first > 0 && first <= 200 && secs < 300, d.str()};
}

Outcome ablation_direction() {
  Stopwatch sw;
  const fs::path ds = work_dir() / "ablation_data";
  SynthConfig sc;
  sc.seed = 42;
  generate_dataset(sc, ds);
  DetectorConfig cfg;
  cfg.seed = 42;
  const int size = sc.image_size, k = static_cast<int>(sc.classes.size());
  const auto rows = run_ablation(cfg, load_split(ds, "train", size, k), load_split(ds, "val", size, k),
                                 load_split(ds, "test", size, k), &std::cerr);
  const double secs = sw.seconds();
  fs::remove_all(ds);
  const auto& base = rows.front();
  const auto& full = rows.back();
  const double ratio = static_cast<double>(full.macs) / static_cast<double>(base.macs);
  std::ostringstream d;
  for (const auto& r : rows) {
    const double drop = 1 - r.history.back().train_loss / r.history.front().train_loss;
    d << r.variant << " mAP@0.5 " << num(r.report.map50) << " (best epoch " << r.best_epoch << ", loss drop "
      << num(std::round(drop * 1000) / 10) << "%); ";
  }
  d << "MAC ratio " << num(ratio) << ", " << num(secs) << " s";
  return {full.report.map50 >= base.report.map50 && ratio >= 1.0 && ratio <= 1.3 && secs < 1800, d.str()};
}

Outcome determinism() {
  const fs::path root = work_dir() / "determinism";
  fs::create_directories(root);
  std::ofstream(root / "micro.ini") << "[synth]\nimage_size = 32\nnum_images = 30\nmax_defects = 2\n"
                                       "[detector]\nepochs = 2\nbatch_size = 4\nwidth1 = 2\nwidth2 = 4\n"
                                       "width3 = 4\nfuse_width = 4\n";
  const std::string cfg = "--config " + (root / "micro.ini").string();
  auto dir = [&](const std::string& name) { return (root / name).string(); };
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "gen-data " + cfg},
      {"stats", "stats --data " + dir("gen-data_a") + " " + cfg},
      {"gradcheck", "gradcheck --instances 2"},
      {"sensitivity", "sensitivity --sizes 6,36 --max-offset 12"},
      {"train", "train --data " + dir("gen-data_a") + " " + cfg},
      {"eval", "eval --data " + dir("gen-data_a") + " --checkpoint " + dir("train_a") + "/final.ckpt " + cfg},
      {"ablate", "ablate --data " + dir("gen-data_a") + " " + cfg},
      {"flops", "flops " + cfg},
  };
  std::ostringstream d;
  bool ok = true;
  std::size_t csvs = 0;
  for (const auto& [name, args] : commands) {
    for (const char* round : {"a", "b"})
      if (run_cli(args + " --out " + dir(name + "_" + round)) != 0) {
        ok = false;
        d << name << " failed; ";
      }
    for (const auto& e : fs::recursive_directory_iterator(dir(name + "_a"))) {
      if (e.path().extension() != ".csv") continue;
      ++csvs;
      const fs::path twin = fs::path(dir(name + "_b")) / fs::relative(e.path(), dir(name + "_a"));
      if (slurp(e.path()) != slurp(twin)) {
        ok = false;
        d << name << ":" << e.path().filename().string() << " differs; ";
      }
    }
  }
  const fs::path ckpt = fs::path(dir("train_a")) / "final.ckpt", again = root / "resaved.ckpt";
  const Checkpoint ck = load_checkpoint(ckpt);
  save_checkpoint(again, ck);
  const bool bytes_equal = slurp(ckpt) == slurp(again);
  const auto meta = read_dataset_meta(dir("gen-data_a"));
  const auto val = load_split(dir("gen-data_a"), "val", meta.image_size, static_cast<int>(meta.classes.size()));
  const Checkpoint back = load_checkpoint(again);
  auto m1 = ck.model, m2 = back.model;
  set_bn_mode(m1, BnMode::eval);
  set_bn_mode(m2, BnMode::eval);
  const auto x = stack_images(val, {0, 1});
  const bool forward_equal = detector_forward(m1, x).bit_equal(detector_forward(m2, x));
  const bool report_equal = evaluate(ck.model, val) == evaluate(back.model, val);
  ok = ok && bytes_equal && forward_equal && report_equal && csvs > 0;
  d << csvs << " CSV files compared across 8 subcommands; checkpoint re-save "
    << (bytes_equal ? "byte-identical" : "DIFFERS") << ", forward " << (forward_equal ? "bit-exact" : "DIFFERS")
    << ", eval report " << (report_equal ? "identical" : "DIFFERS");
  fs::remove_all(root);
  return {ok, d.str()};
}

Outcome msfa_flop_claim() {
  std::vector<std::size_t> extended = kDefaultMsfaKernels;
  extended.push_back(21);
  int cases = 0;
  bool ok = true;
  for (std::uint64_t c : {1, 2, 3, 8, 16, 32, 64, 128, 256})
    for (std::uint64_t h : {1, 2, 7, 16, 32, 64, 128})
      for (std::uint64_t w : {1, 3, 16, 64, 128}) {
        ok = ok && msfa_flops(c, h, w) < msfa_flops(c, h, w, extended);
        ++cases;
      }
  return {ok, std::to_string(cases) + " (C,h,w) cases, default < default + (1x21, 21x1) branch"};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient oracle suite", gradient_suite},
      {"closed-form geometry", closed_form_geometry},
      {"small-object IoU vs W2 sensitivity", small_object_sensitivity},
      {"metrics oracle", metrics_oracle},
      {"dataset calibration", dataset_calibration},
      {"overfit sanity", overfit_sanity},
      {"ablation direction", ablation_direction},
      {"determinism", determinism},
      {"MSFA FLOP claim", msfa_flop_claim},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  fs::create_directories(work_dir());
  std::ofstream results("acceptance_results.txt");
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail;
    std::cout << line.str() << std::endl;
    results << line.str() << std::endl;
  }
  fs::remove_all(work_dir());
  return failures == 0 ? 0 : 1;
}
