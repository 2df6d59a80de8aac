#pragma once

// Preprocessing, labelled-image datasets and toy phantom generation.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "protuseg/synthgen.hpp"
#include "protuseg/training.hpp"
#include "protuseg/volume.hpp"

namespace protuseg {

struct PreprocessConfig {
  double clip_lo = -90.0;
  double clip_hi = 210.0;
  double target_spacing = 1.0;

  void validate() const;
};

/// Resample to target_spacing, then clip to [clip_lo, clip_hi] and map that
/// window linearly onto [-1, 1]. Throws NumericFault on non-finite input.
Volume preprocess(const Volume& image, const PreprocessConfig& cfg = {});

struct DatasetEntry {
  std::string id;
  std::string image;   // paths relative to the manifest directory
  std::string kidney;
  std::string tumor;
  std::string split;   // "train" or "test"
  std::uint64_t seed = 0;
  /// Phantom only: tumor intensity equals kidney intensity.
  bool isodense = false;
};

struct DatasetManifest {
  int version = 1;
  std::uint64_t master_seed = 0;
  std::vector<DatasetEntry> entries;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

inline constexpr const char* kDatasetManifestName = "dataset.json";

DatasetManifest load_dataset_manifest(const std::filesystem::path& path);
/// Reads every entry whose split matches (all entries for an empty split).
/// Throws std::invalid_argument when an entry's files disagree on dims.
std::vector<LabeledImage> load_dataset(const std::filesystem::path& manifest_path, const std::string& split = "");

struct PhantomConfig {
  int grid = 32;
  double p_isodense = 0.5;
  float background = -1.0f;
  float kidney = 0.2f;
  /// Non-isodense tumors sit this far above or below the kidney intensity.
  double contrast_min = 0.4;
  double contrast_max = 0.7;
  double noise_std = 0.05;
  double blur_sigma = 0.4;

  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomConfig& c);
void from_json(const nlohmann::json& j, PhantomConfig& c);

struct Phantom {
  LabeledImage labeled;  // kidney label excludes the tumor
  bool isodense = false;
  SynthMeta meta;
};

/// One phantom: synthetic kidney and tumor shapes composed under the usual
/// coverage and containment limits, painted into an image with blur and noise.
Phantom make_phantom(std::uint64_t seed, const PhantomConfig& cfg);

/// n phantoms with seeds derive_seed(master_seed, i); the last n_test are
/// tagged "test", the rest "train". Writes <id>_image/_kidney/_tumor.pvol and
/// dataset.json into out_dir.
DatasetManifest make_phantom_dataset(int n, int n_test, std::uint64_t master_seed, const std::filesystem::path& out_dir,
                                     const PhantomConfig& cfg = {});

}  // namespace protuseg
