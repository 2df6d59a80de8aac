// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance                 every criterion
//   acceptance --only 3,4,6    a subset
//   acceptance --seeds 2       fewer seeds for the phantom trend check

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "../brute.hpp"
#include "../oracles.hpp"
#include "protuseg/cli.hpp"
#include "protuseg/evalmetrics.hpp"
#include "protuseg/gradcheck.hpp"
#include "protuseg/losses.hpp"
#include "protuseg/parallel.hpp"
#include "protuseg/pipeline.hpp"
#include "protuseg/pvol_io.hpp"
#include "protuseg/synthgen.hpp"
#include "protuseg/training.hpp"

namespace fs = std::filesystem;
using namespace protuseg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

struct Options {
  fs::path work;
  int threads = 1;
  int seeds = 5;
  std::string desk_config;
  std::ostream* report = nullptr;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "protuseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << "  cli " << args[1] << " failed: " << err.str();
  return code;
}

fs::path fresh(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// 1. Generator soundness at 64^3 with an independent recount from disk.
Outcome synth_soundness(const Options& o) {
  const fs::path dir = fresh(o.work / "c1");
  Stopwatch t;
  if (run_cli({"--threads", std::to_string(o.threads), "gen-synth", "--n", "1000", "--seed", "2024", "--grid", "64",
               "--out", dir.string()}) != 0)
    return {false, "gen-synth failed"};
  const double secs = t.seconds();
  const SynthManifest m = load_synth_manifest(dir / kSynthManifestName);
  int ok = 0;
  double worst_cov = 0.0, worst_con = 0.0;
  for (const auto& s : m.samples) {
    const Mask k = read_mask(dir / s.kidney_path);
    const Mask tu = read_mask(dir / s.tumor_path);
    long kk = 0, tt = 0, both = 0;
    for (std::size_t i = 0; i < k.size(); ++i) {
      kk += k[i];
      tt += tu[i];
      both += k[i] && tu[i];
    }
    if (kk == 0 || tt == 0) continue;
    const double cov = static_cast<double>(both) / kk, con = static_cast<double>(both) / tt;
    worst_cov = std::max(worst_cov, cov);
    worst_con = std::max(worst_con, con);
    ok += both > 0 && cov < 0.3 && con < 0.95;
  }
  const bool pass = m.complete && m.samples.size() == 1000 && ok == 1000 && secs < 600.0;
  return {pass, std::to_string(ok) + "/" + std::to_string(m.samples.size()) + " valid, max coverage " +
                    fmt(worst_cov) + ", max containment " + fmt(worst_con) + ", " + fmt(secs, 3) + " s"};
}

// 2. Finite-difference gradient checks.
Outcome gradients(const Options&) {
  Stopwatch t;
  const auto results = run_grad_checks(2024);
  const double secs = t.seconds();
  int passed = 0;
  double worst = 0.0;
  std::string failed;
  for (const auto& r : results) {
    if (r.passed && r.probes > 0) {
      ++passed;
    } else {
      failed += " " + r.name;
    }
    worst = std::max(worst, r.max_rel_error / r.tolerance);
  }
  const bool pass = !results.empty() && passed == static_cast<int>(results.size()) && secs < 300.0;
  return {pass, std::to_string(passed) + "/" + std::to_string(results.size()) + " checks, worst error/tol " +
                    fmt(worst, 3) + ", " + fmt(secs, 3) + " s" + (failed.empty() ? "" : ", failed:" + failed)};
}

// 3. Losses against scalar-loop oracles.
Outcome loss_oracles(const Options&) {
  const double worst = oracle::max_loss_error(2024, 50);
  Rng rng(7);
  double self = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto m = oracle::random_binary(rng, {2, 2, 4, 5, 6}, uniform(rng, 0.05, 0.9));
    for (bool squared : {true, false}) self = std::max(self, dice_loss(m, m, 1e-5, squared).item());
  }
  return {worst < 1e-6 && self < 1e-6, "max |loss - oracle| " + fmt(worst, 3) + ", max dice_loss(m,m) " + fmt(self, 3)};
}

// 4. Learning-rate schedule.
Outcome schedule_exactness(const Options&) {
  bool pass = true;
  double junction = 0.0, tail = 0.0;
  const double pi = std::acos(-1.0);
  for (int step = 1; step <= 3; ++step) {
    const Schedule s = StepPlan::full_scale(step).schedule(1e-4, 0.1);
    const long w = s.warmup_steps();
    pass = pass && lr_at(0, s) == 1e-4 && lr_at(w, s) == 0.1;
    junction = std::max(junction, std::abs(warmup_lr(w, s) - cosine_lr(w, s)));
    junction = std::max(junction, std::abs(warmup_lr(w - 1, s) + (0.1 - 1e-4) / static_cast<double>(w) - lr_at(w, s)));
    for (long k = w; k < s.total_steps; k += 997) {
      const double want = 0.1 * 0.5 * (1.0 + std::cos(pi * static_cast<double>(k - w) / static_cast<double>(s.total_steps - w)));
      tail = std::max(tail, std::abs(lr_at(k, s) - want));
    }
    const long last = s.total_steps - 1;
    const double want_last =
        0.1 * 0.5 * (1.0 + std::cos(pi * static_cast<double>(last - w) / static_cast<double>(s.total_steps - w)));
    tail = std::max(tail, std::abs(lr_at(last, s) - want_last));
  }
  pass = pass && junction < 1e-12 && tail < 1e-12;
  return {pass, "endpoints exact " + std::string(pass ? "yes" : "no") + ", junction gap " + fmt(junction, 3) +
                    ", max cosine error " + fmt(tail, 3)};
}

LabeledImage phantom_image(std::uint64_t seed, int grid) {
  PhantomConfig pc;
  pc.grid = grid;
  return make_phantom(seed, pc).labeled;
}

TrainConfig small_config() {
  TrainConfig c;
  c.seed = 5;
  c.patch = 16;
  for (auto* n : {&c.base, &c.protuberance, &c.fusion}) {
    n->base_channels = 2;
    n->num_downsamplings = 2;
  }
  c.peak_lr = 0.05;
  for (auto* p : {&c.step1, &c.step2, &c.step3}) {
    p->batch_size = 2;
    p->total_steps = 4;
  }
  return c;
}

// 5. Step-3 freeze contract.
Outcome freeze_contract(const Options&) {
  TrainConfig cfg = small_config();
  cfg.step3.total_steps = 100;
  std::vector<LabeledImage> data;
  for (int i = 0; i < 4; ++i) data.push_back(phantom_image(derive_seed(31, i), 16));
  const auto synth = SynthConfig::for_grid(16);
  const TrainResult r1 = run_step1(cfg, data);
  const TrainResult r2 = run_step2(cfg, 8, [&](std::size_t i) {
    const SynthSample s = generate_sample(derive_seed(32, i), synth);
    return std::pair{s.input_mask, s.target_mask};
  });
  const TrainResult r3 = run_step3(cfg, data, r1.checkpoint, r2.checkpoint);
  const auto& h = r3.param_hashes;
  const bool prot_same = h.at("protuberance").before == h.at("protuberance").after &&
                         r3.checkpoint.load("protuberance").params().hash() ==
                             r2.checkpoint.load("protuberance").params().hash();
  const bool base_moved = h.at("base").before != h.at("base").after;
  const bool fusion_moved = h.at("fusion").before != h.at("fusion").after;
  return {r3.loss.size() == 100 && prot_same && base_moved && fusion_moved,
          std::to_string(r3.loss.size()) + " steps, protuberance unchanged " + (prot_same ? "yes" : "no") +
              ", base changed " + (base_moved ? "yes" : "no") + ", fusion changed " + (fusion_moved ? "yes" : "no")};
}

Mask span_mask(int n, std::initializer_list<std::pair<int, int>> spans) {
  Mask m({1, 1, n});
  for (auto [lo, hi] : spans)
    for (int i = lo; i < hi; ++i) m(0, 0, i) = 1;
  return m;
}

// 6. Lesion matcher and composite dice.
Outcome metric_oracle(const Options&) {
  Rng rng(2024);
  int agree = 0;
  for (int i = 0; i < 200; ++i) {
    const auto [pred, gt] = brute::random_lesion_case(rng, 24);
    const LesionReport got = lesion_match(pred, gt);
    const brute::Match want = brute::lesion_match(pred, gt);
    std::vector<double> dices;
    for (const auto& l : got.lesions) dices.push_back(l.dice);
    std::sort(dices.begin(), dices.end());
    bool same = got.tp == want.tp && got.fn == want.fn && got.fp == want.fp && dices.size() == want.dice.size();
    for (std::size_t k = 0; same && k < dices.size(); ++k) same = std::abs(dices[k] - want.dice[k]) < 1e-12;
    agree += same;
  }
  // Kidney 19474 of 20000 shared, tumor 8509 of 10000 shared.
  const int n = 21000;
  const auto d = composite_dice(span_mask(n, {{526, 1491}, {11491, 20526}}), span_mask(n, {{1491, 11491}}),
                                span_mask(n, {{10000, 20000}}), span_mask(n, {{0, 10000}}));
  const bool composite_ok = std::abs(d.kidney - 0.9737) < 1e-12 && std::abs(d.tumor - 0.8509) < 1e-12 &&
                            std::abs(d.composite - 0.9123) < 1e-12;
  return {agree == 200 && composite_ok, std::to_string(agree) + "/200 instances agree, composite " +
                                            fmt(d.kidney) + "/" + fmt(d.tumor) + " -> " + fmt(d.composite)};
}

struct SeedResult {
  double base_dice = 0.0, full_dice = 0.0;
  double base_iso_sens = 0.0, full_iso_sens = 0.0;
  int isodense = 0;
  double train_seconds = 0.0;
};

SeedResult phantom_trend(const Options& o, const TrainConfig& desk, std::uint64_t seed) {
  const fs::path dir = fresh(o.work / ("c7_seed" + std::to_string(seed)));
  PhantomConfig pc;
  pc.grid = 32;
  const DatasetManifest dm = make_phantom_dataset(80, 20, derive_seed(seed, 77), dir / "data", pc);
  generate_dataset(1000, derive_seed(seed, 78), dir / "synth", SynthConfig::for_grid(32));
  const auto manifest = dir / "data" / kDatasetManifestName;
  const auto train = load_dataset(manifest, "train");
  const auto test = load_dataset(manifest, "test");
  std::set<std::string> iso;
  for (const auto& e : dm.entries)
    if (e.split == "test" && e.isodense) iso.insert(e.id);

  TrainConfig cfg = desk;
  cfg.seed = seed;
  Stopwatch t;
  const TrainResult r1 = run_step1(cfg, train);
  const TrainResult r2 = run_step2(cfg, dir / "synth" / kSynthManifestName);
  const TrainResult r3 = run_step3(cfg, train, r1.checkpoint, r2.checkpoint);
  SeedResult out;
  out.train_seconds = t.seconds();

  const Models baseline = Models::from_checkpoint(r1.checkpoint);
  const Models full = Models::from_checkpoint(r3.checkpoint);
  std::vector<EvalCase> b_all, f_all, b_iso, f_iso;
  for (const auto& s : test) {
    const Prediction pb = infer(baseline, s.image, cfg.patch);
    const Prediction pf = infer(full, s.image, cfg.patch);
    const Mask gt_kidney = kidney_target(s);
    EvalCase b{s.id, pb.tumor, s.tumor, pb.kidney, gt_kidney};
    EvalCase f{s.id, pf.tumor, s.tumor, pf.kidney, gt_kidney};
    if (iso.count(s.id)) {
      b_iso.push_back(b);
      f_iso.push_back(f);
    }
    b_all.push_back(std::move(b));
    f_all.push_back(std::move(f));
  }
  out.base_dice = evaluate_cases(b_all).mean_tumor_dice;
  out.full_dice = evaluate_cases(f_all).mean_tumor_dice;
  out.isodense = static_cast<int>(b_iso.size());
  out.base_iso_sens = evaluate_cases(b_iso).sensitivity;
  out.full_iso_sens = evaluate_cases(f_iso).sensitivity;
  return out;
}

// 7. Phantom trend: full pipeline beats the Step-1 baseline.
Outcome trend(const Options& o) {
  const TrainConfig desk = load_train_config(o.desk_config);
  int wins = 0;
  std::string detail;
  for (int seed = 1; seed <= o.seeds; ++seed) {
    const SeedResult r = phantom_trend(o, desk, static_cast<std::uint64_t>(seed));
    const bool dice_ok = r.full_dice >= r.base_dice + 0.05;
    const bool sens_ok = r.full_iso_sens > r.base_iso_sens;
    const bool time_ok = r.train_seconds <= 1800.0;
    const bool win = dice_ok && sens_ok && time_ok;
    wins += win;
    std::ostringstream line;
    line << "  seed " << seed << ": tumor dice " << fmt(r.base_dice) << " -> " << fmt(r.full_dice)
         << ", isodense sensitivity (" << r.isodense << " cases) " << fmt(r.base_iso_sens) << " -> "
         << fmt(r.full_iso_sens) << ", training " << fmt(r.train_seconds, 3) << " s  " << (win ? "ok" : "miss")
         << "\n";
    std::cout << line.str() << std::flush;
    if (o.report) *o.report << line.str() << std::flush;
  }
  const int need = o.seeds == 5 ? 4 : o.seeds;
  detail = std::to_string(wins) + "/" + std::to_string(o.seeds) + " seeds hold, need " + std::to_string(need);
  return {wins >= need, detail};
}

// Byte comparison of two directory trees.
std::vector<std::string> tree_diff(const fs::path& a, const fs::path& b) {
  std::vector<std::string> diffs;
  std::set<std::string> names;
  for (const auto* root : {&a, &b})
    for (const auto& e : fs::recursive_directory_iterator(*root))
      if (e.is_regular_file()) names.insert(fs::relative(e.path(), *root).string());
  for (const auto& n : names) {
    if (!fs::exists(a / n) || !fs::exists(b / n) || slurp(a / n) != slurp(b / n)) diffs.push_back(n);
  }
  return diffs;
}

// 8. Every CLI stage, serial vs threaded.
Outcome determinism(const Options& o) {
  const int wide = std::max(2, o.threads);
  const fs::path root = fresh(o.work / "c8");
  TrainConfig cfg = small_config();
  cfg.step1.total_steps = 6;
  cfg.step2.total_steps = 6;
  cfg.step3.total_steps = 6;
  const fs::path config = root / "train.json";
  std::ofstream(config) << nlohmann::json(cfg).dump(2) << "\n";

  // Both passes run in the same directory so echoed paths match.
  auto pipeline = [&](const std::string& tag, int threads) -> bool {
    const fs::path d = fresh(root / "run");
    const std::string t = std::to_string(threads);
    const std::string data = (d / "data").string(), synth = (d / "synth").string(), ck = (d / "ckpt").string();
    const std::string manifest = (d / "data" / kDatasetManifestName).string();
    return run_cli({"--threads", t, "gen-synth", "--n", "12", "--seed", "9", "--grid", "16", "--out", synth}) == 0 &&
           run_cli({"--threads", t, "make-phantoms", "--n", "6", "--test", "2", "--seed", "9", "--grid", "16",
                    "--out", data}) == 0 &&
           run_cli({"--threads", t, "preprocess", "--in", (d / "data" / "phantom_0000_image.pvol").string(), "--out",
                    (d / "pre.pvol").string(), "--spacing", "2"}) == 0 &&
           run_cli({"--threads", t, "train-step1", "--config", config.string(), "--out", ck, "--data", manifest}) ==
               0 &&
           run_cli({"--threads", t, "train-step2", "--config", config.string(), "--out", ck, "--synth",
                    synth + "/" + kSynthManifestName}) == 0 &&
           run_cli({"--threads", t, "train-step3", "--config", config.string(), "--out", ck, "--data", manifest}) ==
               0 &&
           run_cli({"--threads", t, "infer", "--ckpt-dir", ck, "--data", manifest, "--split", "test", "--out",
                    (d / "pred").string()}) == 0 &&
           run_cli({"--threads", t, "eval", "--pred", (d / "pred").string(), "--gt", data, "--data", manifest,
                    "--split", "test", "--out", (d / "report.json").string()}) == 0 &&
           (fs::rename(d, root / tag), true);
  };
  if (!pipeline("serial", 1) || !pipeline("threaded", wide)) return {false, "a stage failed"};
  const auto diffs = tree_diff(root / "serial", root / "threaded");
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "serial")) files += e.is_regular_file();
  std::string detail = std::to_string(files) + " artifacts compared at 1 vs " + std::to_string(wide) + " threads";
  for (const auto& n : diffs) detail += ", differs: " + n;
  return {diffs.empty() && files > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  Options o;
  o.work = fs::temp_directory_path() / "protuseg_acceptance";
  o.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  o.desk_config = PROTUSEG_DESK_CONFIG;
  std::string only, work = o.work.string();
  app.add_option("--only", only, "comma-separated criteria to run (default all)");
  app.add_option("--seeds", o.seeds, "seeds for the phantom trend check")->check(CLI::Range(1, 5));
  app.add_option("--work", work, "scratch directory");
  app.add_option("--threads", o.threads, "worker threads")->check(CLI::Range(1, 256));
  app.add_option("--desk-config", o.desk_config, "training config for the phantom trend check");
  std::string report;
  app.add_option("--report", report, "also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);
  o.work = work;

  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) selected.insert(std::stoi(tok));

  const std::vector<std::pair<std::string, std::function<Outcome(const Options&)>>> criteria{
      {"synthetic generator soundness", synth_soundness},
      {"gradient correctness", gradients},
      {"loss oracles", loss_oracles},
      {"schedule exactness", schedule_exactness},
      {"freeze contract", freeze_contract},
      {"metric oracle", metric_oracle},
      {"phantom trend", trend},
      {"determinism", determinism},
  };

  fs::create_directories(o.work);
  std::ofstream report_file;
  if (!report.empty()) {
    report_file.open(report);
    o.report = &report_file;
  }
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    set_num_threads(o.threads);
    Outcome r;
    Stopwatch t;
    try {
      r = criteria[i].second(o);
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    all = all && r.pass;
    std::ostringstream line;
    line << (r.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << r.detail << " ["
         << fmt(t.seconds(), 3) << " s]\n";
    std::cout << line.str() << std::flush;
    if (report_file) report_file << line.str() << std::flush;
  }
  return all ? 0 : 1;
}
