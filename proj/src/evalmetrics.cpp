#include "protuseg/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "protuseg/errors.hpp"
#include "protuseg/parallel.hpp"
#include "protuseg/pvol_io.hpp"

namespace protuseg {

namespace {

void require_same(const Mask& a, const Mask& b, const char* where) {
  if (a.dims() != b.dims()) {
    throw std::invalid_argument(std::string(where) + ": dims " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  }
}

double ratio_or_nan(long num, long den) {
  return den == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

constexpr const char* kTumorSuffix = "_tumor.pvol";
constexpr const char* kKidneySuffix = "_kidney.pvol";

}  // namespace

double dice(const Mask& pred, const Mask& gt) {
  require_same(pred, gt, "dice");
  std::size_t p = 0, g = 0, both = 0;
  const auto a = pred.values();
  const auto b = gt.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    p += a[i];
    g += b[i];
    both += a[i] & b[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

CompositeDice composite_dice(const Mask& pred_kidney, const Mask& pred_tumor, const Mask& gt_kidney,
                             const Mask& gt_tumor) {
  require_same(pred_kidney, pred_tumor, "composite_dice");
  require_same(pred_kidney, gt_kidney, "composite_dice");
  require_same(pred_kidney, gt_tumor, "composite_dice");
  CompositeDice d;
  d.kidney = dice(mask_union(pred_kidney, pred_tumor), mask_union(gt_kidney, gt_tumor));
  d.tumor = dice(pred_tumor, gt_tumor);
  d.composite = 0.5 * (d.kidney + d.tumor);
  return d;
}

double LesionReport::sensitivity() const { return ratio_or_nan(tp, tp + fn); }

LesionReport lesion_match(const Mask& pred, const Mask& gt, Connectivity connectivity) {
  require_same(pred, gt, "lesion_match");
  const Components pc = connected_components(pred, connectivity);
  const Components gc = connected_components(gt, connectivity);

  // Sizes and pairwise overlaps in one pass.
  std::vector<long> pred_size(pc.count + 1, 0), gt_size(gc.count + 1, 0);
  std::map<std::pair<int, int>, long> overlap;
  const auto pl = pc.labels.values();
  const auto gl = gc.labels.values();
  for (std::size_t i = 0; i < pl.size(); ++i) {
    ++pred_size[pl[i]];
    ++gt_size[gl[i]];
    if (pl[i] && gl[i]) ++overlap[{gl[i], pl[i]}];
  }

  LesionReport r;
  std::vector<bool> touches(pc.count + 1, false);
  for (int g = 1; g <= gc.count; ++g) {
    LesionMatch m;
    m.gt_label = g;
    long pred_total = 0, inter = 0;
    for (auto it = overlap.lower_bound({g, 0}); it != overlap.end() && it->first.first == g; ++it) {
      const int p = it->first.second;
      m.pred_labels.push_back(p);
      touches[p] = true;
      pred_total += pred_size[p];
      inter += it->second;
    }
    m.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(pred_total + gt_size[g]);
    m.detected = m.dice > 0.5;
    (m.detected ? r.tp : r.fn) += 1;
    r.lesions.push_back(std::move(m));
  }
  for (int p = 1; p <= pc.count; ++p) {
    if (!touches[p]) r.false_positive_labels.push_back(p);
  }
  r.fp = static_cast<int>(r.false_positive_labels.size());
  return r;
}

SetReport evaluate_cases(const std::vector<EvalCase>& cases) {
  SetReport report;
  report.per_image.resize(cases.size());
  parallel_for(static_cast<int>(cases.size()), [&](int i) {
    const auto& c = cases[i];
    ImageResult& r = report.per_image[i];
    r.id = c.id;
    r.tumor_dice = dice(c.pred_tumor, c.gt_tumor);
    r.lesions = lesion_match(c.pred_tumor, c.gt_tumor);
    r.has_kidney = !c.pred_kidney.empty() && !c.gt_kidney.empty();
    if (r.has_kidney) r.composite = composite_dice(c.pred_kidney, c.pred_tumor, c.gt_kidney, c.gt_tumor);
  });

  long tp = 0, lesions = 0, fp = 0;
  double dice_sum = 0.0;
  for (const auto& r : report.per_image) {
    dice_sum += r.tumor_dice;
    tp += r.lesions.tp;
    lesions += r.lesions.num_lesions();
    fp += r.lesions.fp;
  }
  const double n = static_cast<double>(cases.size());
  report.mean_tumor_dice = cases.empty() ? std::numeric_limits<double>::quiet_NaN() : dice_sum / n;
  report.sensitivity = ratio_or_nan(tp, lesions);
  report.fps_per_image = cases.empty() ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(fp) / n;
  return report;
}

SetReport evaluate_set(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                       const std::optional<std::set<std::string>>& ids) {
  auto tumor_ids = [](const std::filesystem::path& dir) {
    std::set<std::string> ids;
    std::error_code ec;
    std::filesystem::directory_iterator it(dir, ec);
    if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
    const std::string suffix = kTumorSuffix;
    for (const auto& entry : it) {
      const auto name = entry.path().filename().string();
      if (name.size() > suffix.size() && name.ends_with(suffix)) ids.insert(name.substr(0, name.size() - suffix.size()));
    }
    return ids;
  };
  auto gt_ids = tumor_ids(gt_dir);
  auto pred_ids = tumor_ids(pred_dir);
  if (ids) {
    for (const auto& id : *ids) {
      if (!gt_ids.count(id)) throw IoError("missing ground truth for " + id + kTumorSuffix);
    }
    gt_ids = *ids;
    std::erase_if(pred_ids, [&](const std::string& id) { return !ids->count(id); });
  }
  if (gt_ids.empty()) throw IoError("no *" + std::string(kTumorSuffix) + " files in " + gt_dir.string());
  for (const auto& id : gt_ids) {
    if (!pred_ids.count(id)) throw IoError("missing prediction for " + id + kTumorSuffix);
  }
  for (const auto& id : pred_ids) {
    if (!gt_ids.count(id)) throw IoError("missing ground truth for " + id + kTumorSuffix);
  }

  std::vector<EvalCase> cases;
  for (const auto& id : gt_ids) {
    EvalCase c;
    c.id = id;
    c.pred_tumor = read_mask(pred_dir / (id + kTumorSuffix));
    c.gt_tumor = read_mask(gt_dir / (id + kTumorSuffix));
    const auto pk = pred_dir / (id + kKidneySuffix);
    const auto gk = gt_dir / (id + kKidneySuffix);
    if (std::filesystem::exists(pk) && std::filesystem::exists(gk)) {
      c.pred_kidney = read_mask(pk);
      c.gt_kidney = read_mask(gk);
    }
    if (c.pred_tumor.dims() != c.gt_tumor.dims()) throw std::invalid_argument(id + ": prediction and ground truth dims differ");
    cases.push_back(std::move(c));
  }
  return evaluate_cases(cases);
}

void to_json(nlohmann::json& j, const SetReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& im : r.per_image) {
    nlohmann::json lesions = nlohmann::json::array();
    for (const auto& l : im.lesions.lesions) {
      lesions.push_back({{"gt_label", l.gt_label}, {"pred_labels", l.pred_labels}, {"dice", l.dice}, {"detected", l.detected}});
    }
    nlohmann::json e{{"id", im.id},
                     {"tumor_dice", im.tumor_dice},
                     {"tp", im.lesions.tp},
                     {"fn", im.lesions.fn},
                     {"fp", im.lesions.fp},
                     {"lesions", std::move(lesions)}};
    if (im.has_kidney) {
      e["kidney_dice"] = im.composite.kidney;
      e["composite_dice"] = im.composite.composite;
    }
    images.push_back(std::move(e));
  }
  j = {{"version", 1},
       {"per_image", std::move(images)},
       {"mean_tumor_dice", number_or_null(r.mean_tumor_dice)},
       {"sensitivity", number_or_null(r.sensitivity)},
       {"fps_per_image", number_or_null(r.fps_per_image)}};
}

}  // namespace protuseg
