#pragma once

// Optimiser, learning-rate schedule and the three training steps:
//   step 1  base network on images (kidney + tumor heads)
//   step 2  protuberance network on synthetic masks
//   step 3  base + frozen protuberance + fusion, trained jointly

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "protuseg/checkpoint.hpp"
#include "protuseg/losses.hpp"
#include "protuseg/nn/network.hpp"
#include "protuseg/synthgen.hpp"
#include "protuseg/volume.hpp"

namespace protuseg {

struct Schedule {
  double base_lr = 1e-4;
  double peak_lr = 0.1;
  double warmup_fraction = 0.3;
  long total_steps = 250000;

  /// round(warmup_fraction * total_steps)
  long warmup_steps() const;
  void validate() const;
};

/// base + (peak - base) * step / w
double warmup_lr(long step, const Schedule& s);
/// peak * 0.5 * (1 + cos(pi * (step - w) / (total - w)))
double cosine_lr(long step, const Schedule& s);
/// warmup_lr before step w, cosine_lr from w on. Throws std::invalid_argument
/// outside [0, total_steps).
double lr_at(long step, const Schedule& s);

struct OptimConfig {
  double momentum = 0.9;
  double weight_decay = 1e-7;
};

/// v = momentum * v + g + weight_decay * p;  p -= lr * v.
/// Frozen parameters are skipped. A non-finite gradient raises NumericFault
/// naming the parameter before anything is modified.
template <typename T>
void sgd_update(nn::ParamSet<T>& params, double lr, const OptimConfig& cfg);

/// (image, clamp01(tumor_prob + prot_prob)) stacked as two channels.
template <typename T>
nn::Tensor<T> fuse(const nn::Tensor<T>& tumor_prob, const nn::Tensor<T>& prot_prob, const nn::Tensor<T>& image);

enum class DataSource { kImages, kSynthetic };

struct StepPlan {
  int step = 1;
  int batch_size = 8;
  long total_steps = 250000;
  double warmup_fraction = 0.3;
  DataSource source = DataSource::kImages;
  /// Networks whose parameters stay fixed during the step.
  std::vector<std::string> frozen;
  /// Replaces the shared peak rate for this step only.
  std::optional<double> peak_lr;

  /// Batch sizes 8 / 16 / 4, 250k / 100k / 100k steps.
  static StepPlan full_scale(int step);
  /// Uses `peak_lr` when set, else `shared_peak_lr`.
  Schedule schedule(double base_lr, double shared_peak_lr) const;
  void validate() const;
};

/// Spatial and intensity augmentation for image steps.
struct ImageAugConfig {
  double rotation_z_deg = 15.0;
  double rotation_xy_deg = 10.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double noise_std_max = 0.05;
  double rotate_probability = 0.5;
  double scale_probability = 0.5;
  double noise_probability = 0.5;
  /// Share of crops centred on a random kidney voxel.
  double foreground_fraction = 0.5;
  /// Image value for voxels moved in from outside the grid.
  float fill = -1.0f;

  void validate() const;
};

/// Step-3 fusion weights: copied from the Step-1 base network (image channel
/// and tumor head; the fused-mask channel starts at zero) or drawn fresh.
enum class FusionInit { kFromBase, kRandom };

struct TrainConfig {
  std::uint64_t seed = 1;
  /// Cubic training patch edge, a multiple of every network's grid multiple.
  int patch = 128;
  nn::NetworkConfig base = nn::NetworkConfig::base();
  nn::NetworkConfig protuberance = nn::NetworkConfig::protuberance();
  nn::NetworkConfig fusion = nn::NetworkConfig::fusion();
  double base_lr = 1e-4;
  double peak_lr = 0.1;
  FusionInit fusion_init = FusionInit::kFromBase;
  OptimConfig optim;
  LossConfig loss;
  StepPlan step1 = StepPlan::full_scale(1);
  StepPlan step2 = StepPlan::full_scale(2);
  StepPlan step3 = StepPlan::full_scale(3);
  ImageAugConfig augment;
  Step2AugConfig step2_augment;
  /// Optional dataset locations, overridable from the command line.
  std::string dataset;
  std::string synth_manifest;
  /// Step 1 starts from this checkpoint's "base" network when set.
  std::string init_checkpoint;

  static TrainConfig full_scale();
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Image with kidney and tumor labels on the same grid. The kidney label may
/// or may not include the tumor; training uses kidney | tumor as the kidney
/// target.
struct LabeledImage {
  std::string id;
  Volume image;
  Mask kidney;
  Mask tumor;
};

/// Loads input and target masks of synthetic sample i.
using SynthLoader = std::function<std::pair<Mask, Mask>(std::size_t)>;

struct HashChange {
  std::uint64_t before = 0;
  std::uint64_t after = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> lr;
  std::vector<double> loss;
  /// ParamSet::hash of each network at the first and after the last step.
  std::map<std::string, HashChange> param_hashes;

  /// "step,lr,loss" per line.
  std::string loss_log() const;
};

/// Called after every optimiser step with (step, lr, loss).
using StepCallback = std::function<void(long, double, double)>;

/// Trains the base network. Checkpoint holds "base".
TrainResult run_step1(const TrainConfig& cfg, const std::vector<LabeledImage>& data,
                      const StepCallback& on_step = {});
/// Trains the protuberance network on n synthetic pairs. Checkpoint holds
/// "protuberance".
TrainResult run_step2(const TrainConfig& cfg, std::size_t n, const SynthLoader& load,
                      const StepCallback& on_step = {});
TrainResult run_step2(const TrainConfig& cfg, const std::filesystem::path& manifest_path,
                      const StepCallback& on_step = {});
/// Joint training from the Step-1 and Step-2 checkpoints. Checkpoint holds
/// "base", "protuberance" (unchanged) and "fusion".
TrainResult run_step3(const TrainConfig& cfg, const std::vector<LabeledImage>& data, const Checkpoint& step1,
                      const Checkpoint& step2, const StepCallback& on_step = {});

/// Networks used at prediction time. protuberance and fusion are absent for
/// the base-only baseline.
struct Models {
  std::optional<nn::Network<float>> base;
  std::optional<nn::Network<float>> protuberance;
  std::optional<nn::Network<float>> fusion;

  /// Full pipeline from a Step-3 checkpoint, or base only from a Step-1 one.
  static Models from_checkpoint(const Checkpoint& c);
  bool full() const { return protuberance && fusion; }
};

struct Prediction {
  Volume kidney_prob;  // kidney | tumor region
  Volume tumor_prob;
  Mask kidney;
  Mask tumor;
};

/// Patch-tiled prediction. Each axis uses tiles of min(extent, patch) voxels
/// with 50% overlap, averaged where tiles overlap. Tiles must be divisible by
/// the networks' grid multiple. Without the protuberance and fusion networks
/// the tumor map is the base tumor head.
Prediction infer(const Models& models, const Volume& image, int patch);

/// Kidney target used by the base network: kidney | tumor.
Mask kidney_target(const LabeledImage& s);

}  // namespace protuseg
