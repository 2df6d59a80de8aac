#pragma once

// Synthetic protuberance dataset: procedurally generated kidney and tumor
// shapes, random tumor insertion with coverage/containment acceptance, and the
// input degradations that make binary masks look like soft network outputs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protuseg/random.hpp"
#include "protuseg/volume.hpp"

namespace protuseg {

struct RadiusRange {
  double min = 1.0;
  double max = 1.0;
};

/// Ellipsoid with a low-frequency radial perturbation, centred in a cubic grid.
struct ShapeParams {
  int grid = 64;
  RadiusRange radius_z;
  RadiusRange radius_y;
  RadiusRange radius_x;
  /// Relative radial perturbation, 0 gives a plain ellipsoid.
  double perturb_amplitude = 0.0;
  /// Highest angular frequency of the perturbation (smaller is smoother).
  double perturb_frequency = 2.0;
  /// Bean-shaped bend along z, as a fraction of radius_x.
  double bend_amplitude = 0.0;

  static ShapeParams kidney_defaults(int grid = 64);
  static ShapeParams tumor_defaults(int grid = 64);
  void validate() const;
};

/// Single 26-connected blob with its long axis along z, bent in x.
Mask gen_kidney_shape(Rng& rng, const ShapeParams& p);
/// As gen_kidney_shape without the bend.
Mask gen_tumor_shape(Rng& rng, const ShapeParams& p);

/// sum(k t) / sum(k). Throws std::invalid_argument for an empty kidney.
double coverage_ratio(const Mask& kidney, const Mask& tumor);
/// sum(k t) / sum(t). Throws std::invalid_argument for an empty tumor.
double containment_ratio(const Mask& kidney, const Mask& tumor);

/// Whole inserted tumor, or only the part outside the kidney.
enum class TargetMode { kWholeTumor, kExophytic };

struct Placement {
  EulerAngles rotation;
  double scale = 1.0;
  Index3 offset{0, 0, 0};
};

struct ComposeLimits {
  double max_coverage = 0.3;
  double max_containment = 0.95;
  int max_attempts = 100;
  double rotation_z_deg = 180.0;
  double rotation_xy_deg = 20.0;
  double scale_min = 0.7;
  double scale_max = 1.3;
  TargetMode target = TargetMode::kWholeTumor;
  /// Evaluate exactly this placement once instead of sampling.
  std::optional<Placement> forced;

  void validate() const;
};

struct SynthMeta {
  EulerAngles rotation;
  double scale = 1.0;
  Index3 offset{0, 0, 0};
  double coverage_ratio = 0.0;
  double containment_ratio = 0.0;
  std::uint64_t seed = 0;
  int attempts = 0;
};

struct SynthSample {
  Mask input_mask;   // kidney OR tumor
  Mask target_mask;  // protruded-region label
  Mask kidney_mask;
  Mask tumor_mask;   // placed tumor
  SynthMeta meta;
};

struct ComposeResult {
  std::optional<SynthSample> sample;
  /// Reason for the last rejected attempt: "no overlap", "coverage",
  /// "containment" or "empty tumor".
  std::string reject_reason;
  int attempts = 0;

  explicit operator bool() const { return sample.has_value(); }
};

/// Rotates and scales the tumor about its centroid, places its centroid inside
/// the kidney bounding box dilated by the tumor radius, and accepts when the
/// masks overlap with coverage < max_coverage and containment < max_containment.
/// Tries up to max_attempts placements.
ComposeResult try_compose(const Mask& kidney, const Mask& tumor, Rng& rng, const ComposeLimits& limits = {});

struct SynthConfig {
  int grid = 64;
  ShapeParams kidney = ShapeParams::kidney_defaults(64);
  ShapeParams tumor = ShapeParams::tumor_defaults(64);
  ComposeLimits limits;

  /// Shape defaults scaled to `grid`.
  static SynthConfig for_grid(int grid);
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// One accepted sample drawn from its own seed. Shapes are resampled each
/// time the placement budget runs out. `proposals`, when given, receives the
/// number of placements evaluated.
SynthSample generate_sample(std::uint64_t seed, const SynthConfig& cfg, long* proposals = nullptr);

struct SynthManifestEntry {
  std::string input_path;   // relative to the manifest directory
  std::string target_path;
  std::string kidney_path;
  std::string tumor_path;
  SynthMeta meta;
};

struct SynthManifest {
  int version = 1;
  std::uint64_t master_seed = 0;
  Dims grid;
  bool complete = false;
  std::string error;
  long proposals = 0;
  std::vector<SynthManifestEntry> samples;
};

void to_json(nlohmann::json& j, const SynthManifest& m);
void from_json(const nlohmann::json& j, SynthManifest& m);

inline constexpr const char* kSynthManifestName = "manifest.json";

/// Writes n samples (input, target, kidney, tumor PVOL files) and
/// manifest.json into out_dir. Sample i uses derive_seed(master_seed, i), so
/// output bytes depend only on (n, master_seed, cfg). On I/O failure the
/// manifest is written with complete = false and the error re-thrown.
SynthManifest generate_dataset(int n, std::uint64_t master_seed, const std::filesystem::path& out_dir,
                               const SynthConfig& cfg);

SynthManifest load_synth_manifest(const std::filesystem::path& manifest_path);

struct Step2AugConfig {
  RadiusRange blur_sigma{0.5, 2.0};
  RadiusRange noise_std{0.0, 0.1};
  RadiusRange intensity_shift{-0.2, 0.2};
  double blur_probability = 0.5;
  double noise_probability = 0.5;
  double shift_probability = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const Step2AugConfig& c);
void from_json(const nlohmann::json& j, Step2AugConfig& c);

/// Mask to [0, 1] volume with optional blur, additive Gaussian noise and a
/// global intensity shift, then clamped to [0, 1].
Volume augment_step2_input(const Mask& m, const Step2AugConfig& cfg, Rng& rng);

}  // namespace protuseg
