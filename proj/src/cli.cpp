#include "protuseg/cli.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "protuseg/errors.hpp"
#include "protuseg/evalmetrics.hpp"
#include "protuseg/gradcheck.hpp"
#include "protuseg/parallel.hpp"
#include "protuseg/pipeline.hpp"
#include "protuseg/pvol_io.hpp"
#include "protuseg/synthgen.hpp"
#include "protuseg/training.hpp"

namespace protuseg {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
    if (c == '"') c = '\'';
  }
  return s;
}

void report_error(std::ostream& err, const char* kind, const std::string& msg, const std::string& where = "") {
  err << "error: kind=" << kind;
  if (!where.empty()) err << " where=" << where;
  err << " msg=\"" << one_line(msg) << "\"\n";
}

json read_json(const fs::path& path) {
  const auto text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string case_id(const fs::path& image) {
  std::string stem = image.stem().string();
  const std::string suffix = "_image";
  if (stem.size() > suffix.size() && stem.ends_with(suffix)) stem.resize(stem.size() - suffix.size());
  return stem;
}

struct Options {
  int threads = 1;

  // gen-synth / make-phantoms
  int n = 0;
  int n_test = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  int grid = 0;
  double p_iso = -1.0;
  std::string config;

  // preprocess
  std::string in;
  double spacing = 1.0;
  double clip_lo = -90.0;
  double clip_hi = 210.0;

  // training / inference
  std::string data;
  std::string split;
  std::string synth;
  std::string ckpt_dir;
  std::vector<std::string> images;
  bool baseline = false;
  int patch = 0;
  int log_every = 0;

  // eval
  std::string pred;
  std::string gt;
};

TrainConfig train_config(const Options& o) {
  TrainConfig cfg = load_train_config(o.config);
  if (o.seed_set) cfg.seed = o.seed;
  if (!o.data.empty()) cfg.dataset = o.data;
  if (!o.synth.empty()) cfg.synth_manifest = o.synth;
  return cfg;
}

StepCallback progress(const Options& o, std::ostream& err, int step_id) {
  if (o.log_every <= 0) return {};
  return [&err, every = o.log_every, step_id](long step, double lr, double loss) {
    if (step % every == 0) err << "step" << step_id << " " << step << " lr=" << lr << " loss=" << loss << "\n";
  };
}

void write_training(const fs::path& dir, int step_id, const TrainConfig& cfg, const TrainResult& r,
                    std::ostream& out) {
  ensure_dir(dir);
  const std::string base = "step" + std::to_string(step_id);
  save_checkpoint(dir / (base + ".ckpt"), r.checkpoint);
  write_file(dir / (base + "_loss.csv"), r.loss_log());
  write_file(dir / (base + "_config.json"), json(cfg).dump(2) + "\n");
  char buf[128];
  std::snprintf(buf, sizeof(buf), "step%d: %zu steps, final loss %.6g\n", step_id, r.loss.size(),
                r.loss.empty() ? 0.0 : r.loss.back());
  out << buf;
}

std::vector<LabeledImage> training_images(const TrainConfig& cfg, const std::string& split) {
  if (cfg.dataset.empty()) throw std::invalid_argument("no dataset manifest (set paths.dataset or --data)");
  return load_dataset(cfg.dataset, split);
}

int cmd_gen_synth(const Options& o, std::ostream& out) {
  SynthConfig cfg = SynthConfig::for_grid(o.grid > 0 ? o.grid : 64);
  if (!o.config.empty()) {
    cfg = read_json(o.config).get<SynthConfig>();
    if (o.grid > 0 && o.grid != cfg.grid) throw std::invalid_argument("--grid disagrees with the config grid");
  }
  const SynthManifest m = generate_dataset(o.n, o.seed, o.out, cfg);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "gen-synth: %zu samples, %ld proposals, acceptance rate %.4f\n", m.samples.size(),
                m.proposals, static_cast<double>(m.samples.size()) / static_cast<double>(m.proposals));
  out << buf;
  return 0;
}

int cmd_make_phantoms(const Options& o, std::ostream& out) {
  PhantomConfig cfg;
  if (!o.config.empty()) cfg = read_json(o.config).get<PhantomConfig>();
  if (o.grid > 0) cfg.grid = o.grid;
  if (o.p_iso >= 0.0) cfg.p_isodense = o.p_iso;
  const DatasetManifest m = make_phantom_dataset(o.n, o.n_test, o.seed, o.out, cfg);
  int iso = 0;
  for (const auto& e : m.entries) iso += e.isodense;
  out << "make-phantoms: " << m.entries.size() << " phantoms (" << o.n_test << " test, " << iso << " isodense)\n";
  return 0;
}

int cmd_preprocess(const Options& o, std::ostream& out) {
  PreprocessConfig cfg;
  cfg.target_spacing = o.spacing;
  cfg.clip_lo = o.clip_lo;
  cfg.clip_hi = o.clip_hi;
  const Volume v = preprocess(read_volume(o.in), cfg);
  write_pvol(o.out, v);
  out << "preprocess: " << to_string(v.dims()) << "\n";
  return 0;
}

int cmd_train(int step_id, const Options& o, std::ostream& out, std::ostream& err) {
  const TrainConfig cfg = train_config(o);
  const std::string split = o.split.empty() ? "train" : o.split;
  TrainResult r;
  if (step_id == 1) {
    r = run_step1(cfg, training_images(cfg, split), progress(o, err, 1));
  } else if (step_id == 2) {
    if (cfg.synth_manifest.empty()) throw std::invalid_argument("no synthetic manifest (set paths.synth_manifest or --synth)");
    r = run_step2(cfg, fs::path(cfg.synth_manifest), progress(o, err, 2));
  } else {
    const fs::path dir = o.ckpt_dir.empty() ? fs::path(o.out) : fs::path(o.ckpt_dir);
    const Checkpoint c1 = load_checkpoint(dir / "step1.ckpt");
    const Checkpoint c2 = load_checkpoint(dir / "step2.ckpt");
    r = run_step3(cfg, training_images(cfg, split), c1, c2, progress(o, err, 3));
  }
  write_training(o.out, step_id, cfg, r, out);
  return 0;
}

int cmd_infer(const Options& o, std::ostream& out) {
  const fs::path ckpt = fs::path(o.ckpt_dir) / (o.baseline ? "step1.ckpt" : "step3.ckpt");
  const Checkpoint c = load_checkpoint(ckpt);
  const Models models = Models::from_checkpoint(c);
  int patch = o.patch;
  if (patch <= 0) patch = c.extra.value("patch", 128);

  std::vector<std::pair<std::string, fs::path>> inputs;
  for (const auto& img : o.images) inputs.emplace_back(case_id(img), img);
  if (!o.data.empty()) {
    const DatasetManifest m = load_dataset_manifest(o.data);
    const fs::path dir = fs::path(o.data).parent_path();
    for (const auto& e : m.entries) {
      if (o.split.empty() || e.split == o.split) inputs.emplace_back(e.id, dir / e.image);
    }
  }
  if (inputs.empty()) throw std::invalid_argument("infer needs --image or --data");
  ensure_dir(o.out);
  for (const auto& [id, path] : inputs) {
    const Prediction p = infer(models, read_volume(path), patch);
    write_pvol(fs::path(o.out) / (id + "_kidney.pvol"), p.kidney);
    write_pvol(fs::path(o.out) / (id + "_tumor.pvol"), p.tumor);
  }
  out << "infer: " << inputs.size() << " images (" << (models.full() ? "full pipeline" : "base only") << ")\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  std::optional<std::set<std::string>> ids;
  std::set<std::string> isodense;
  if (!o.data.empty()) {
    ids.emplace();
    for (const auto& e : load_dataset_manifest(o.data).entries) {
      if (!o.split.empty() && e.split != o.split) continue;
      ids->insert(e.id);
      if (e.isodense) isodense.insert(e.id);
    }
  }
  const SetReport r = evaluate_set(o.pred, o.gt, ids);
  json j = r;
  if (!isodense.empty()) {
    std::vector<ImageResult> subset;
    long tp = 0, lesions = 0;
    double dice_sum = 0.0;
    for (const auto& im : r.per_image) {
      if (!isodense.count(im.id)) continue;
      tp += im.lesions.tp;
      lesions += im.lesions.num_lesions();
      dice_sum += im.tumor_dice;
      subset.push_back(im);
    }
    j["subsets"]["isodense"] = {{"images", subset.size()},
                                {"mean_tumor_dice", dice_sum / static_cast<double>(subset.size())},
                                {"sensitivity", lesions ? json(static_cast<double>(tp) / lesions) : json(nullptr)}};
  }
  if (!o.out.empty()) write_file(o.out, j.dump(2) + "\n");
  char buf[160];
  std::snprintf(buf, sizeof(buf), "eval: %zu images, mean tumor dice %.4f, sensitivity %.4f, fps/image %.4f\n",
                r.per_image.size(), r.mean_tumor_dice, r.sensitivity, r.fps_per_image);
  out << buf;
  return 0;
}

int cmd_grad_check(const Options& o, std::ostream& out) {
  bool ok = true;
  for (const auto& r : run_grad_checks(o.seed)) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-20s probes=%-4d max_rel_error=%.3e tol=%.0e %s\n", r.name.c_str(), r.probes,
                  r.max_rel_error, r.tolerance, r.passed ? "PASS" : "FAIL");
    out << buf;
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"protuberance-aware kidney tumor segmentation toolkit", "protuseg"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--threads", o.threads, "worker threads (1 = serial)")->check(CLI::Range(1, 256));

  auto seed_opt = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "master seed")->each([&o](const std::string&) { o.seed_set = true; });
  };

  auto* gen = app.add_subcommand("gen-synth", "generate the synthetic protuberance mask dataset");
  gen->add_option("--n", o.n, "number of samples")->required()->check(CLI::PositiveNumber);
  seed_opt(gen);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--grid", o.grid, "cubic grid size (default 64)")->check(CLI::Range(8, 1024));
  gen->add_option("--config", o.config, "synthetic generator config (JSON)");

  auto* phantoms = app.add_subcommand("make-phantoms", "generate a labelled toy phantom dataset");
  phantoms->add_option("--n", o.n, "number of phantoms")->required()->check(CLI::PositiveNumber);
  phantoms->add_option("--test", o.n_test, "how many of them to tag as test (default 0)");
  seed_opt(phantoms);
  phantoms->add_option("--out", o.out, "output directory")->required();
  phantoms->add_option("--grid", o.grid, "cubic grid size (default 32)")->check(CLI::Range(8, 1024));
  phantoms->add_option("--p-iso", o.p_iso, "probability of an isodense tumor (default 0.5)")->check(CLI::Range(0.0, 1.0));
  phantoms->add_option("--config", o.config, "phantom config (JSON)");

  auto* prep = app.add_subcommand("preprocess", "resample to isotropic spacing and normalise intensities");
  prep->add_option("--in", o.in, "input PVOL volume (HU)")->required();
  prep->add_option("--out", o.out, "output PVOL volume")->required();
  prep->add_option("--spacing", o.spacing, "target spacing in mm (default 1)");
  prep->add_option("--clip-lo", o.clip_lo, "lower clip bound (default -90)");
  prep->add_option("--clip-hi", o.clip_hi, "upper clip bound (default 210)");

  std::array<CLI::App*, 3> train{};
  for (int s = 1; s <= 3; ++s) {
    static const char* help[] = {"train the base network", "train the protuberance network on synthetic masks",
                                 "train base and fusion networks jointly with the protuberance network frozen"};
    auto* t = app.add_subcommand("train-step" + std::to_string(s), help[s - 1]);
    t->add_option("--config", o.config, "training config (JSON)")->required();
    t->add_option("--out", o.out, "output directory")->required();
    seed_opt(t);
    if (s != 2) {
      t->add_option("--data", o.data, "dataset manifest (overrides paths.dataset)");
      t->add_option("--split", o.split, "dataset split to train on (default train)");
    } else {
      t->add_option("--synth", o.synth, "synthetic manifest (overrides paths.synth_manifest)");
    }
    if (s == 3) t->add_option("--ckpt-dir", o.ckpt_dir, "directory holding step1.ckpt and step2.ckpt (default --out)");
    t->add_option("--log-every", o.log_every, "print progress every N steps to stderr");
    train[s - 1] = t;
  }

  auto* inf = app.add_subcommand("infer", "predict kidney and tumor masks");
  inf->add_option("--ckpt-dir", o.ckpt_dir, "directory holding step3.ckpt (step1.ckpt with --baseline)")->required();
  inf->add_option("--image", o.images, "preprocessed image(s); output ids drop a trailing _image");
  inf->add_option("--data", o.data, "dataset manifest to take images from");
  inf->add_option("--split", o.split, "restrict --data to this split");
  inf->add_option("--out", o.out, "output directory for <id>_kidney.pvol and <id>_tumor.pvol")->required();
  inf->add_flag("--baseline", o.baseline, "use the Step-1 base network only");
  inf->add_option("--patch", o.patch, "tile size (default: training patch)")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "dice, lesion sensitivity and false positives per image");
  ev->add_option("--pred", o.pred, "prediction directory")->required();
  ev->add_option("--gt", o.gt, "ground-truth directory")->required();
  ev->add_option("--out", o.out, "report file (JSON)");
  ev->add_option("--data", o.data, "dataset manifest restricting the cases and marking isodense ones");
  ev->add_option("--split", o.split, "restrict --data to this split");

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every differentiable op");
  seed_opt(gc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    report_error(err, "usage", e.what());
    return 2;
  }

  try {
    set_num_threads(o.threads);
    if (gen->parsed()) return cmd_gen_synth(o, out);
    if (phantoms->parsed()) return cmd_make_phantoms(o, out);
    if (prep->parsed()) return cmd_preprocess(o, out);
    for (int s = 1; s <= 3; ++s) {
      if (train[s - 1]->parsed()) return cmd_train(s, o, out, err);
    }
    if (inf->parsed()) return cmd_infer(o, out);
    if (ev->parsed()) return cmd_eval(o, out);
    if (gc->parsed()) return cmd_grad_check(o, out);
  } catch (const NumericFault& e) {
    report_error(err, "numeric", e.what(), e.where());
    return 1;
  } catch (const IoError& e) {
    report_error(err, "io", e.what());
    return 1;
  } catch (const FormatError& e) {
    report_error(err, "format", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    report_error(err, "invalid_argument", e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 1;
  }
  report_error(err, "usage", "no subcommand");
  return 2;
}

}  // namespace protuseg
