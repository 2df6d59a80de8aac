#include "protuseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

#include "protuseg/errors.hpp"
#include "protuseg/nn/ops.hpp"
#include "protuseg/parallel.hpp"
#include "protuseg/pvol_io.hpp"

namespace protuseg {

using nn::Network;
using nn::Tensor;

long Schedule::warmup_steps() const { return std::lround(warmup_fraction * static_cast<double>(total_steps)); }

void Schedule::validate() const {
  if (!(base_lr > 0.0 && base_lr < peak_lr)) throw std::invalid_argument("schedule needs 0 < base_lr < peak_lr");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw std::invalid_argument("warmup fraction must lie in (0, 1)");
  }
  if (total_steps < 2) throw std::invalid_argument("schedule needs at least 2 steps");
  if (warmup_steps() >= total_steps) throw std::invalid_argument("warmup leaves no cosine phase");
}

double warmup_lr(long step, const Schedule& s) {
  const long w = s.warmup_steps();
  if (w == 0) return s.peak_lr;
  return s.base_lr + (s.peak_lr - s.base_lr) * static_cast<double>(step) / static_cast<double>(w);
}

double cosine_lr(long step, const Schedule& s) {
  const long w = s.warmup_steps();
  const double t = static_cast<double>(step - w) / static_cast<double>(s.total_steps - w);
  return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double lr_at(long step, const Schedule& s) {
  s.validate();
  if (step < 0 || step >= s.total_steps) {
    throw std::invalid_argument("step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + ")");
  }
  return step < s.warmup_steps() ? warmup_lr(step, s) : cosine_lr(step, s);
}

template <typename T>
void sgd_update(nn::ParamSet<T>& params, double lr, const OptimConfig& cfg) {
  for (auto& p : params) {
    if (p.frozen || !p.value.has_grad()) continue;
    for (T g : std::as_const(p.value).grad()) {
      if (!std::isfinite(g)) throw NumericFault(p.name, "non-finite gradient");
    }
  }
  for (auto& p : params) {
    if (p.frozen || !p.value.has_grad()) continue;
    auto w = p.value.data();
    auto g = std::as_const(p.value).grad();
    p.momentum.resize(w.size(), T{0});
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double v = cfg.momentum * p.momentum[i] + g[i] + cfg.weight_decay * w[i];
      p.momentum[i] = static_cast<T>(v);
      w[i] = static_cast<T>(w[i] - lr * v);
    }
  }
}

template void sgd_update<float>(nn::ParamSet<float>&, double, const OptimConfig&);
template void sgd_update<double>(nn::ParamSet<double>&, double, const OptimConfig&);

template <typename T>
Tensor<T> fuse(const Tensor<T>& tumor_prob, const Tensor<T>& prot_prob, const Tensor<T>& image) {
  if (image.channels() != 1 || tumor_prob.channels() != 1 || prot_prob.channels() != 1) {
    throw std::invalid_argument("fuse expects single-channel inputs");
  }
  if (image.shape() != tumor_prob.shape()) {
    throw std::invalid_argument("fuse: image " + nn::to_string(image.shape()) + " vs tumor " +
                                nn::to_string(tumor_prob.shape()));
  }
  return nn::concat_channels(image, nn::clamp01(nn::add(tumor_prob, prot_prob)));
}

template Tensor<float> fuse<float>(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> fuse<double>(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

StepPlan StepPlan::full_scale(int step) {
  StepPlan p;
  p.step = step;
  switch (step) {
    case 1:
      p.batch_size = 8;
      p.total_steps = 250000;
      p.warmup_fraction = 0.3;
      break;
    case 2:
      p.batch_size = 16;
      p.total_steps = 100000;
      p.warmup_fraction = 0.1;
      p.source = DataSource::kSynthetic;
      break;
    case 3:
      p.batch_size = 4;
      p.total_steps = 100000;
      p.warmup_fraction = 0.3;
      p.frozen = {"protuberance"};
      break;
    default:
      throw std::invalid_argument("training step must be 1, 2 or 3");
  }
  return p;
}

Schedule StepPlan::schedule(double base_lr, double shared_peak_lr) const {
  return Schedule{base_lr, peak_lr.value_or(shared_peak_lr), warmup_fraction, total_steps};
}

void StepPlan::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (peak_lr && !(*peak_lr > 0.0)) throw std::invalid_argument("step peak_lr must be > 0");
  Schedule{1e-4, 0.1, warmup_fraction, total_steps}.validate();
}

void ImageAugConfig::validate() const {
  if (rotation_z_deg < 0 || rotation_xy_deg < 0) throw std::invalid_argument("rotation ranges must be >= 0");
  if (!(scale_min >= 0.1 && scale_min <= scale_max && scale_max <= 10.0)) {
    throw std::invalid_argument("augmentation scale range must lie in [0.1, 10]");
  }
  if (!(noise_std_max >= 0.0)) throw std::invalid_argument("noise std must be >= 0");
  for (double p : {rotate_probability, scale_probability, noise_probability, foreground_fraction}) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("augmentation probabilities must lie in [0, 1]");
  }
}

TrainConfig TrainConfig::full_scale() { return TrainConfig{}; }

void TrainConfig::validate() const {
  base.validate();
  protuberance.validate();
  fusion.validate();
  if (patch < 1) throw std::invalid_argument("patch must be >= 1");
  for (const auto* n : {&base, &protuberance, &fusion}) n->validate_grid(patch, patch, patch);
  if (base.output_channels != 2) throw std::invalid_argument("base network needs 2 outputs (kidney, tumor)");
  if (protuberance.input_channels != 1 || protuberance.output_channels != 1) {
    throw std::invalid_argument("protuberance network needs 1 input and 1 output");
  }
  if (fusion.input_channels != 2 || fusion.output_channels != 1) {
    throw std::invalid_argument("fusion network needs 2 inputs and 1 output");
  }
  if (base.input_channels != 1) throw std::invalid_argument("base network needs 1 input channel");
  Schedule{base_lr, peak_lr, 0.5, 10}.validate();
  for (const auto* p : {&step1, &step2, &step3}) p->schedule(base_lr, peak_lr).validate();
  if (!(optim.momentum >= 0.0 && optim.momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  if (!(optim.weight_decay >= 0.0)) throw std::invalid_argument("weight decay must be >= 0");
  loss.validate();
  step1.validate();
  step2.validate();
  step3.validate();
  augment.validate();
  step2_augment.validate();
}

namespace {

using json = nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw std::invalid_argument("unknown config key '" + section + "." + key + "'");
  }
}

json plan_json(const StepPlan& p) {
  json j{{"batch_size", p.batch_size}, {"total_steps", p.total_steps}, {"warmup_fraction", p.warmup_fraction}};
  if (p.peak_lr) j["peak_lr"] = *p.peak_lr;
  return j;
}

void plan_from(const json& j, StepPlan& p, const std::string& section) {
  check_keys(j, {"batch_size", "total_steps", "warmup_fraction", "peak_lr"}, section);
  p.batch_size = j.value("batch_size", p.batch_size);
  if (j.contains("peak_lr")) p.peak_lr = j["peak_lr"].get<double>();
  p.total_steps = j.value("total_steps", p.total_steps);
  p.warmup_fraction = j.value("warmup_fraction", p.warmup_fraction);
}

}  // namespace

void to_json(json& j, const TrainConfig& c) {
  j = {{"seed", c.seed},
       {"patch", c.patch},
       {"networks",
        {{"base", c.base},
         {"protuberance", c.protuberance},
         {"fusion", c.fusion},
         {"fusion_init", c.fusion_init == FusionInit::kFromBase ? "base" : "random"}}},
       {"schedule", {{"base_lr", c.base_lr}, {"peak_lr", c.peak_lr}}},
       {"optimizer", {{"momentum", c.optim.momentum}, {"weight_decay", c.optim.weight_decay}}},
       {"loss",
        {{"dice_weight", c.loss.dice_weight},
         {"ce_weight", c.loss.ce_weight},
         {"smoothing", c.loss.smoothing},
         {"dice_delta", c.loss.dice_delta},
         {"squared_dice", c.loss.squared_dice}}},
       {"steps", {{"step1", plan_json(c.step1)}, {"step2", plan_json(c.step2)}, {"step3", plan_json(c.step3)}}},
       {"augment",
        {{"rotation_z_deg", c.augment.rotation_z_deg},
         {"rotation_xy_deg", c.augment.rotation_xy_deg},
         {"scale", {c.augment.scale_min, c.augment.scale_max}},
         {"noise_std_max", c.augment.noise_std_max},
         {"rotate_probability", c.augment.rotate_probability},
         {"scale_probability", c.augment.scale_probability},
         {"noise_probability", c.augment.noise_probability},
         {"foreground_fraction", c.augment.foreground_fraction},
         {"fill", c.augment.fill}}},
       {"step2_augment", c.step2_augment},
       {"paths",
        {{"dataset", c.dataset}, {"synth_manifest", c.synth_manifest}, {"init_checkpoint", c.init_checkpoint}}}};
}

void from_json(const json& j, TrainConfig& c) {
  check_keys(j,
             {"seed", "patch", "networks", "schedule", "optimizer", "loss", "steps", "augment", "step2_augment",
              "paths"},
             "config");
  c.seed = j.value("seed", c.seed);
  c.patch = j.value("patch", c.patch);
  if (j.contains("networks")) {
    const auto& n = j["networks"];
    check_keys(n, {"base", "protuberance", "fusion", "fusion_init"}, "networks");
    if (n.contains("base")) from_json(n["base"], c.base);
    if (n.contains("protuberance")) from_json(n["protuberance"], c.protuberance);
    if (n.contains("fusion")) from_json(n["fusion"], c.fusion);
    if (n.contains("fusion_init")) {
      const auto mode = n["fusion_init"].get<std::string>();
      if (mode == "base") {
        c.fusion_init = FusionInit::kFromBase;
      } else if (mode == "random") {
        c.fusion_init = FusionInit::kRandom;
      } else {
        throw std::invalid_argument("networks.fusion_init must be \"base\" or \"random\", got \"" + mode + "\"");
      }
    }
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    check_keys(s, {"base_lr", "peak_lr"}, "schedule");
    c.base_lr = s.value("base_lr", c.base_lr);
    c.peak_lr = s.value("peak_lr", c.peak_lr);
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    check_keys(o, {"momentum", "weight_decay"}, "optimizer");
    c.optim.momentum = o.value("momentum", c.optim.momentum);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    check_keys(l, {"dice_weight", "ce_weight", "smoothing", "dice_delta", "squared_dice"}, "loss");
    c.loss.dice_weight = l.value("dice_weight", c.loss.dice_weight);
    c.loss.ce_weight = l.value("ce_weight", c.loss.ce_weight);
    c.loss.smoothing = l.value("smoothing", c.loss.smoothing);
    c.loss.dice_delta = l.value("dice_delta", c.loss.dice_delta);
    c.loss.squared_dice = l.value("squared_dice", c.loss.squared_dice);
  }
  if (j.contains("steps")) {
    const auto& s = j["steps"];
    check_keys(s, {"step1", "step2", "step3"}, "steps");
    if (s.contains("step1")) plan_from(s["step1"], c.step1, "steps.step1");
    if (s.contains("step2")) plan_from(s["step2"], c.step2, "steps.step2");
    if (s.contains("step3")) plan_from(s["step3"], c.step3, "steps.step3");
  }
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    check_keys(a,
               {"rotation_z_deg", "rotation_xy_deg", "scale", "noise_std_max", "rotate_probability",
                "scale_probability", "noise_probability", "foreground_fraction", "fill"},
               "augment");
    auto& g = c.augment;
    g.rotation_z_deg = a.value("rotation_z_deg", g.rotation_z_deg);
    g.rotation_xy_deg = a.value("rotation_xy_deg", g.rotation_xy_deg);
    if (a.contains("scale")) {
      g.scale_min = a["scale"].at(0).get<double>();
      g.scale_max = a["scale"].at(1).get<double>();
    }
    g.noise_std_max = a.value("noise_std_max", g.noise_std_max);
    g.rotate_probability = a.value("rotate_probability", g.rotate_probability);
    g.scale_probability = a.value("scale_probability", g.scale_probability);
    g.noise_probability = a.value("noise_probability", g.noise_probability);
    g.foreground_fraction = a.value("foreground_fraction", g.foreground_fraction);
    g.fill = a.value("fill", g.fill);
  }
  if (j.contains("step2_augment")) from_json(j["step2_augment"], c.step2_augment);
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    check_keys(p, {"dataset", "synth_manifest", "init_checkpoint"}, "paths");
    c.dataset = p.value("dataset", c.dataset);
    c.synth_manifest = p.value("synth_manifest", c.synth_manifest);
    c.init_checkpoint = p.value("init_checkpoint", c.init_checkpoint);
  }
  c.validate();
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    return json::parse(text).get<TrainConfig>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string TrainResult::loss_log() const {
  std::string out;
  char buf[96];
  for (std::size_t i = 0; i < loss.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", i, lr[i], loss[i]);
    out += buf;
  }
  return out;
}

Mask kidney_target(const LabeledImage& s) { return mask_union(s.kidney, s.tumor); }

namespace {

// Stream ids so that initialisation and per-step sampling never share seeds.
constexpr std::uint64_t kInitStream = 1000;
constexpr std::uint64_t kStepStream = 2000;

std::uint64_t step_seed(const TrainConfig& cfg, int step_id, long step) {
  return derive_seed(derive_seed(cfg.seed, kStepStream + step_id), static_cast<std::uint64_t>(step));
}

Rng init_rng(const TrainConfig& cfg, int step_id) { return Rng(derive_seed(cfg.seed, kInitStream + step_id)); }

template <typename G>
void copy_into(std::span<float> dst, const G& grid) {
  const auto& v = grid.values();
  std::transform(v.begin(), v.end(), dst.begin(), [](auto x) { return static_cast<float>(x); });
}

Point3 grid_center(const Dims& d) { return {(d.nz - 1) / 2.0, (d.ny - 1) / 2.0, (d.nx - 1) / 2.0}; }

// Voxel index of the k-th foreground voxel in raster order.
Index3 nth_foreground(const Mask& m, std::size_t k) {
  const auto& d = m.dims();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] && k-- == 0) {
      const int x = static_cast<int>(i % d.nx);
      const int y = static_cast<int>((i / d.nx) % d.ny);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(d.nx) * d.ny));
      return {z, y, x};
    }
  }
  return {d.nz / 2, d.ny / 2, d.nx / 2};
}

Index3 crop_origin(const Mask& foreground, int patch, double foreground_fraction, Rng& rng) {
  const auto& d = foreground.dims();
  const std::array<int, 3> extent{d.nz, d.ny, d.nx};
  const std::size_t n_fg = count(foreground);
  const bool centred = n_fg > 0 && bernoulli(rng, foreground_fraction);
  const Index3 c = centred ? nth_foreground(foreground, static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(n_fg) - 1)))
                           : Index3{0, 0, 0};
  Index3 origin{};
  for (int a = 0; a < 3; ++a) {
    if (extent[a] <= patch) {
      origin[a] = (extent[a] - patch) / 2;
    } else if (centred) {
      const int jitter = uniform_int(rng, -patch / 4, patch / 4);
      origin[a] = std::clamp(c[a] - patch / 2 + jitter, 0, extent[a] - patch);
    } else {
      origin[a] = uniform_int(rng, 0, extent[a] - patch);
    }
  }
  return origin;
}

struct ImageBatch {
  Tensor<float> image, kidney, tumor;
};

ImageBatch make_image_batch(const std::vector<LabeledImage>& data, const TrainConfig& cfg, int batch,
                            std::uint64_t seed) {
  const int p = cfg.patch;
  const nn::Shape shape{batch, 1, p, p, p};
  ImageBatch b{Tensor<float>(shape), Tensor<float>(shape), Tensor<float>(shape)};
  Rng rng(seed);
  std::vector<int> pick(batch);
  for (auto& i : pick) i = uniform_int(rng, 0, static_cast<int>(data.size()) - 1);
  const std::size_t stride = static_cast<std::size_t>(p) * p * p;
  const auto& aug = cfg.augment;

  parallel_for(batch, [&](int n) {
    Rng r(derive_seed(seed, static_cast<std::uint64_t>(n) + 1));
    const LabeledImage& s = data[pick[n]];
    Volume image = s.image;
    Mask kidney = kidney_target(s);
    Mask tumor = s.tumor;

    EulerAngles angles;
    double factor = 1.0;
    const bool rotate = bernoulli(r, aug.rotate_probability);
    if (rotate) {
      angles.z = uniform(r, -aug.rotation_z_deg, aug.rotation_z_deg);
      angles.y = uniform(r, -aug.rotation_xy_deg, aug.rotation_xy_deg);
      angles.x = uniform(r, -aug.rotation_xy_deg, aug.rotation_xy_deg);
    }
    const bool scale = bernoulli(r, aug.scale_probability);
    if (scale) factor = uniform(r, aug.scale_min, aug.scale_max);
    if (rotate || scale) {
      const Point3 c = grid_center(image.dims());
      image = rotate_scale<float>(image, angles, factor, c, aug.fill);
      kidney = rotate_scale<std::uint8_t>(kidney, angles, factor, c, 0);
      tumor = rotate_scale<std::uint8_t>(tumor, angles, factor, c, 0);
    }
    if (bernoulli(r, aug.noise_probability)) {
      const double sd = uniform(r, 0.0, aug.noise_std_max);
      if (sd > 0.0) {
        std::normal_distribution<double> noise(0.0, sd);
        for (auto& v : image.data()) v = static_cast<float>(v + noise(r));
      }
    }
    const Index3 origin = crop_origin(kidney, p, aug.foreground_fraction, r);
    const Dims size{p, p, p};
    copy_into(b.image.data().subspan(n * stride, stride), crop<float>(image, origin, size, aug.fill));
    copy_into(b.kidney.data().subspan(n * stride, stride), crop<std::uint8_t>(kidney, origin, size, 0));
    copy_into(b.tumor.data().subspan(n * stride, stride), crop<std::uint8_t>(tumor, origin, size, 0));
  });
  return b;
}

struct MaskBatch {
  Tensor<float> input, target;
};

MaskBatch make_synth_batch(std::size_t n, const SynthLoader& load, const TrainConfig& cfg, int batch,
                           std::uint64_t seed) {
  const int p = cfg.patch;
  const nn::Shape shape{batch, 1, p, p, p};
  MaskBatch b{Tensor<float>(shape), Tensor<float>(shape)};
  Rng rng(seed);
  std::vector<std::size_t> pick(batch);
  for (auto& i : pick) i = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(n) - 1));
  const std::size_t stride = static_cast<std::size_t>(p) * p * p;

  parallel_for(batch, [&](int k) {
    Rng r(derive_seed(seed, static_cast<std::uint64_t>(k) + 1));
    auto [input, target] = load(pick[k]);
    if (input.dims() != target.dims()) throw std::invalid_argument("synthetic input and target dims differ");
    const Volume degraded = augment_step2_input(input, cfg.step2_augment, r);
    const Index3 origin = crop_origin(input, p, 1.0, r);
    const Dims size{p, p, p};
    copy_into(b.input.data().subspan(k * stride, stride), crop<float>(degraded, origin, size, 0.0f));
    copy_into(b.target.data().subspan(k * stride, stride), crop<std::uint8_t>(target, origin, size, 0));
  });
  return b;
}

void check_images(const std::vector<LabeledImage>& data, int batch) {
  if (data.size() < static_cast<std::size_t>(batch)) {
    throw std::invalid_argument("training needs at least one batch of images: have " + std::to_string(data.size()) +
                                ", batch size " + std::to_string(batch));
  }
  for (const auto& s : data) {
    if (s.image.dims() != s.kidney.dims() || s.image.dims() != s.tumor.dims()) {
      throw std::invalid_argument("image " + s.id + ": image and label dims differ");
    }
  }
}

template <typename StepFn>
void train_loop(const TrainConfig& cfg, const StepPlan& plan, const std::vector<nn::ParamSet<float>*>& trainable,
                StepFn&& step_loss, TrainResult& result, const StepCallback& on_step) {
  const Schedule schedule = plan.schedule(cfg.base_lr, cfg.peak_lr);
  schedule.validate();
  result.lr.reserve(plan.total_steps);
  result.loss.reserve(plan.total_steps);
  for (long step = 0; step < plan.total_steps; ++step) {
    const double lr = lr_at(step, schedule);
    for (auto* ps : trainable) ps->zero_grad();
    const Tensor<float> loss = step_loss(step);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericFault("loss", "non-finite loss at step " + std::to_string(step));
    nn::backward(loss);
    for (auto* ps : trainable) sgd_update(*ps, lr, cfg.optim);
    result.lr.push_back(lr);
    result.loss.push_back(value);
    if (on_step) on_step(step, lr, value);
  }
}

// Same-shape tensors are copied. The first conv takes the image weights for
// input channel 0 and zeros for the fused-mask channel; the head keeps only
// the tumor row.
void init_fusion_from_base(Network<float>& fusion, const Network<float>& base) {
  const auto& fc = fusion.config();
  const auto& bc = base.config();
  if (fc.base_channels != bc.base_channels || fc.num_downsamplings != bc.num_downsamplings ||
      fc.single_conv_decoder != bc.single_conv_decoder) {
    throw std::invalid_argument("fusion_init \"base\" needs fusion and base networks of the same width and depth");
  }
  const auto& names = bc.output_names;
  const int tumor = static_cast<int>(std::find(names.begin(), names.end(), "tumor") - names.begin());
  for (auto& p : fusion.params()) {
    const Tensor<float>& src = base.params().at(p.name).value;
    auto dst = p.value.data();
    const auto from = src.data();
    if (src.shape() == p.value.shape()) {
      std::copy(from.begin(), from.end(), dst.begin());
    } else if (p.name == "enc0.conv1.weight") {
      std::fill(dst.begin(), dst.end(), 0.0f);
      const std::size_t taps = src.numel() / (src.shape()[0] * src.shape()[1]);
      for (int o = 0; o < src.shape()[0]; ++o) {
        std::copy_n(from.begin() + static_cast<std::ptrdiff_t>(o * taps), taps,
                    dst.begin() + static_cast<std::ptrdiff_t>(o * p.value.shape()[1] * taps));
      }
    } else if (p.name == "head.weight" || p.name == "head.bias") {
      const std::size_t row = p.value.numel();
      std::copy_n(from.begin() + static_cast<std::ptrdiff_t>(tumor * row), row, dst.begin());
    } else {
      throw std::invalid_argument("fusion_init \"base\": cannot map parameter " + p.name);
    }
  }
}

void reset_momentum(Network<float>& net) {
  for (auto& p : net.params()) std::fill(p.momentum.begin(), p.momentum.end(), 0.0f);
}

nlohmann::json run_extra(const TrainConfig& cfg, int step) {
  return {{"step", step}, {"seed", cfg.seed}, {"patch", cfg.patch}};
}

}  // namespace

TrainResult run_step1(const TrainConfig& cfg, const std::vector<LabeledImage>& data, const StepCallback& on_step) {
  cfg.validate();
  const StepPlan& plan = cfg.step1;
  check_images(data, plan.batch_size);

  Rng rng = init_rng(cfg, 1);
  Network<float> base(cfg.base, rng);
  if (!cfg.init_checkpoint.empty()) {
    load_checkpoint(cfg.init_checkpoint).restore("base", base);
    reset_momentum(base);
  }

  TrainResult result;
  result.param_hashes["base"].before = base.params().hash();
  train_loop(
      cfg, plan, {&base.params()},
      [&](long step) {
        const ImageBatch b = make_image_batch(data, cfg, plan.batch_size, step_seed(cfg, 1, step));
        return step1_loss(base.forward(b.image), b.kidney, b.tumor, cfg.loss);
      },
      result, on_step);
  result.param_hashes["base"].after = base.params().hash();
  result.checkpoint.store("base", base);
  result.checkpoint.extra = run_extra(cfg, 1);
  return result;
}

TrainResult run_step2(const TrainConfig& cfg, std::size_t n, const SynthLoader& load, const StepCallback& on_step) {
  cfg.validate();
  const StepPlan& plan = cfg.step2;
  if (n < static_cast<std::size_t>(plan.batch_size)) {
    throw std::invalid_argument("step 2 needs at least one batch of synthetic samples: have " + std::to_string(n) +
                                ", batch size " + std::to_string(plan.batch_size));
  }
  Rng rng = init_rng(cfg, 2);
  Network<float> prot(cfg.protuberance, rng);

  TrainResult result;
  result.param_hashes["protuberance"].before = prot.params().hash();
  train_loop(
      cfg, plan, {&prot.params()},
      [&](long step) {
        const MaskBatch b = make_synth_batch(n, load, cfg, plan.batch_size, step_seed(cfg, 2, step));
        return step2_loss(prot.forward(b.input), b.target, cfg.loss);
      },
      result, on_step);
  result.param_hashes["protuberance"].after = prot.params().hash();
  result.checkpoint.store("protuberance", prot);
  result.checkpoint.extra = run_extra(cfg, 2);
  return result;
}

TrainResult run_step2(const TrainConfig& cfg, const std::filesystem::path& manifest_path,
                      const StepCallback& on_step) {
  const SynthManifest m = load_synth_manifest(manifest_path);
  if (!m.complete) throw std::invalid_argument(manifest_path.string() + ": synthetic dataset is incomplete");
  const auto dir = manifest_path.parent_path();
  return run_step2(
      cfg, m.samples.size(),
      [&](std::size_t i) {
        const auto& e = m.samples.at(i);
        return std::make_pair(read_mask(dir / e.input_path), read_mask(dir / e.target_path));
      },
      on_step);
}

TrainResult run_step3(const TrainConfig& cfg, const std::vector<LabeledImage>& data, const Checkpoint& step1,
                      const Checkpoint& step2, const StepCallback& on_step) {
  cfg.validate();
  const StepPlan& plan = cfg.step3;
  check_images(data, plan.batch_size);
  if (!step1.has("base")) throw std::invalid_argument("step 1 checkpoint has no base network");
  if (!step2.has("protuberance")) throw std::invalid_argument("step 2 checkpoint has no protuberance network");
  if (!(step1.networks.at("base") == cfg.base)) {
    throw std::invalid_argument("step 1 checkpoint does not match the configured base network");
  }
  if (!(step2.networks.at("protuberance") == cfg.protuberance)) {
    throw std::invalid_argument("step 2 checkpoint does not match the configured protuberance network");
  }

  Network<float> base = step1.load("base");
  Network<float> prot = step2.load("protuberance");
  reset_momentum(base);
  Rng rng = init_rng(cfg, 3);
  Network<float> fusion(cfg.fusion, rng);
  if (cfg.fusion_init == FusionInit::kFromBase) init_fusion_from_base(fusion, base);
  prot.params().set_frozen(true);

  TrainResult result;
  const std::vector<std::pair<std::string, const Network<float>*>> nets{
      {"base", &base}, {"protuberance", &prot}, {"fusion", &fusion}};
  for (const auto& [name, net] : nets) result.param_hashes[name].before = net->params().hash();
  train_loop(
      cfg, plan, {&base.params(), &fusion.params()},
      [&](long step) {
        const ImageBatch b = make_image_batch(data, cfg, plan.batch_size, step_seed(cfg, 3, step));
        const Tensor<float> base_out = base.forward(b.image);
        const Tensor<float> prot_out = prot.forward(base.output(base_out, "kidney"));
        const Tensor<float> fused = fuse(base.output(base_out, "tumor"), prot_out, b.image);
        return step3_loss(fusion.forward(fused), base_out, b.kidney, b.tumor, cfg.loss);
      },
      result, on_step);

  prot.params().set_frozen(false);
  for (const auto& [name, net] : nets) result.param_hashes[name].after = net->params().hash();
  result.checkpoint.store("base", base);
  result.checkpoint.store("protuberance", prot);
  result.checkpoint.store("fusion", fusion);
  result.checkpoint.extra = run_extra(cfg, 3);
  return result;
}

Models Models::from_checkpoint(const Checkpoint& c) {
  Models m;
  m.base = c.load("base");
  if (c.has("protuberance") && c.has("fusion")) {
    m.protuberance = c.load("protuberance");
    m.fusion = c.load("fusion");
  }
  return m;
}

Prediction infer(const Models& models, const Volume& image, int patch) {
  if (!models.base) throw std::invalid_argument("infer needs a base network");
  if (patch < 1) throw std::invalid_argument("patch must be >= 1");
  const auto& d = image.dims();
  const std::array<int, 3> extent{d.nz, d.ny, d.nx};
  std::array<int, 3> tile{};
  std::array<std::vector<int>, 3> starts;
  for (int a = 0; a < 3; ++a) {
    tile[a] = std::min(extent[a], patch);
    for (int s = 0;; s += std::max(1, tile[a] / 2)) {
      if (s + tile[a] >= extent[a]) {
        starts[a].push_back(extent[a] - tile[a]);
        break;
      }
      starts[a].push_back(s);
    }
  }
  models.base->config().validate_grid(tile[0], tile[1], tile[2]);
  if (models.full()) {
    models.protuberance->config().validate_grid(tile[0], tile[1], tile[2]);
    models.fusion->config().validate_grid(tile[0], tile[1], tile[2]);
  }

  std::vector<double> kidney_sum(image.size(), 0.0), tumor_sum(image.size(), 0.0), hits(image.size(), 0.0);
  nn::NoGradGuard no_grad;
  const Dims tile_dims{tile[0], tile[1], tile[2]};
  for (int z0 : starts[0])
    for (int y0 : starts[1])
      for (int x0 : starts[2]) {
        const Volume patch_img = crop<float>(image, {z0, y0, x0}, tile_dims, 0.0f);
        Tensor<float> x({1, 1, tile[0], tile[1], tile[2]});
        copy_into(x.data(), patch_img);
        const Tensor<float> base_out = models.base->forward(x);
        const Tensor<float> kidney = models.base->output(base_out, "kidney");
        Tensor<float> tumor = models.base->output(base_out, "tumor");
        if (models.full()) {
          const Tensor<float> prot = models.protuberance->forward(kidney);
          tumor = models.fusion->forward(fuse(tumor, prot, x));
        }
        const auto kd = kidney.data();
        const auto td = tumor.data();
        std::size_t i = 0;
        for (int z = 0; z < tile[0]; ++z)
          for (int y = 0; y < tile[1]; ++y)
            for (int xx = 0; xx < tile[2]; ++xx, ++i) {
              const std::size_t g = image.index(z0 + z, y0 + y, x0 + xx);
              kidney_sum[g] += kd[i];
              tumor_sum[g] += td[i];
              hits[g] += 1.0;
            }
      }

  Prediction out;
  out.kidney_prob = Volume(d, image.spacing());
  out.tumor_prob = Volume(d, image.spacing());
  for (std::size_t g = 0; g < image.size(); ++g) {
    out.kidney_prob[g] = static_cast<float>(kidney_sum[g] / hits[g]);
    out.tumor_prob[g] = static_cast<float>(tumor_sum[g] / hits[g]);
  }
  out.kidney = binarize(out.kidney_prob);
  out.tumor = binarize(out.tumor_prob);
  return out;
}

}  // namespace protuseg
