#pragma once

// Voxel dice and lesion-level detection metrics.

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "protuseg/volume.hpp"

namespace protuseg {

/// 2 |P & G| / (|P| + |G|); 1 when both are empty.
double dice(const Mask& pred, const Mask& gt);

struct CompositeDice {
  double kidney = 0.0;
  double tumor = 0.0;
  double composite = 0.0;
};

/// Kidney dice compares kidney | tumor on both sides; tumor dice compares the
/// tumor masks; composite is their mean.
CompositeDice composite_dice(const Mask& pred_kidney, const Mask& pred_tumor, const Mask& gt_kidney,
                             const Mask& gt_tumor);

struct LesionMatch {
  int gt_label = 0;
  /// Predicted components overlapping this lesion, ascending.
  std::vector<int> pred_labels;
  /// Dice between the union of pred_labels and the lesion.
  double dice = 0.0;
  bool detected = false;
};

struct LesionReport {
  std::vector<LesionMatch> lesions;
  /// Predicted components that touch no lesion.
  std::vector<int> false_positive_labels;
  int tp = 0;
  int fn = 0;
  int fp = 0;

  int num_lesions() const { return tp + fn; }
  /// tp / (tp + fn); NaN without lesions.
  double sensitivity() const;
};

/// Lesions are connected components of gt. A lesion is detected when the
/// union of every predicted component overlapping it reaches dice > 0.5.
LesionReport lesion_match(const Mask& pred, const Mask& gt, Connectivity connectivity = Connectivity::k26);

struct EvalCase {
  std::string id;
  Mask pred_tumor;
  Mask gt_tumor;
  /// Optional; kidney and composite dice are reported when both are set.
  Mask pred_kidney;
  Mask gt_kidney;
};

struct ImageResult {
  std::string id;
  double tumor_dice = 0.0;
  bool has_kidney = false;
  CompositeDice composite;
  LesionReport lesions;
};

struct SetReport {
  std::vector<ImageResult> per_image;
  double mean_tumor_dice = 0.0;
  /// Pooled over lesions: sum tp / sum (tp + fn). NaN without lesions.
  double sensitivity = 0.0;
  double fps_per_image = 0.0;
};

SetReport evaluate_cases(const std::vector<EvalCase>& cases);

/// Pairs every "<id>_tumor.pvol" in gt_dir with the same file in pred_dir,
/// plus "<id>_kidney.pvol" when both directories have it. With `ids`, only
/// those cases are evaluated. Throws IoError naming the first unpaired file.
SetReport evaluate_set(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                       const std::optional<std::set<std::string>>& ids = std::nullopt);

void to_json(nlohmann::json& j, const SetReport& r);

}  // namespace protuseg
