#include "protuseg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numbers>

#include "protuseg/errors.hpp"
#include "protuseg/parallel.hpp"
#include "protuseg/pvol_io.hpp"

namespace protuseg {

namespace {

RadiusRange scaled(RadiusRange r, double f) { return {r.min * f, r.max * f}; }

void check_range(const RadiusRange& r, double lo, double hi, const char* name) {
  if (!(r.min <= r.max) || r.min < lo || r.max > hi) {
    throw std::invalid_argument(std::string(name) + " range [" + std::to_string(r.min) + ", " +
                                std::to_string(r.max) + "] is invalid");
  }
}

// Smooth function on the unit sphere with values in [-1, 1].
struct RadialField {
  static constexpr int kTerms = 4;
  std::array<Point3, kTerms> direction{};
  std::array<double, kTerms> frequency{}, phase{}, weight{};

  RadialField(Rng& rng, double max_frequency) {
    std::normal_distribution<double> normal(0.0, 1.0);
    double total = 0.0;
    for (int j = 0; j < kTerms; ++j) {
      Point3 d{normal(rng), normal(rng), normal(rng)};
      const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
      for (auto& v : d) v = len > 0 ? v / len : 0.0;
      direction[j] = d;
      frequency[j] = uniform(rng, 1.0, std::max(1.0, max_frequency));
      phase[j] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      weight[j] = uniform(rng, -1.0, 1.0);
      total += std::abs(weight[j]);
    }
    if (total > 0)
      for (auto& w : weight) w /= total;
  }

  double operator()(const Point3& u) const {
    double v = 0.0;
    for (int j = 0; j < kTerms; ++j) {
      const double proj = direction[j][0] * u[0] + direction[j][1] * u[1] + direction[j][2] * u[2];
      v += weight[j] * std::cos(frequency[j] * proj * std::numbers::pi + phase[j]);
    }
    return v;
  }
};

Mask gen_shape(Rng& rng, const ShapeParams& p, bool bend) {
  p.validate();
  const double rz = uniform(rng, p.radius_z.min, p.radius_z.max);
  const double ry = uniform(rng, p.radius_y.min, p.radius_y.max);
  const double rx = uniform(rng, p.radius_x.min, p.radius_x.max);
  const RadialField field(rng, p.perturb_frequency);
  const double bend_sign = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
  const double bend_shift = bend ? bend_sign * p.bend_amplitude * rx : 0.0;

  const Dims d{p.grid, p.grid, p.grid};
  const double c = (p.grid - 1) / 2.0;
  Mask m(d);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const double uz = (z - c) / rz;
        const double uy = (y - c) / ry;
        const double ux = (x - c - bend_shift * uz * uz) / rx;
        const double rho = std::sqrt(uz * uz + uy * uy + ux * ux);
        bool inside = rho == 0.0;
        if (!inside) {
          const double limit = 1.0 + p.perturb_amplitude * field({uz / rho, uy / rho, ux / rho});
          inside = rho <= limit;
        }
        if (inside) m(z, y, x) = 1;
      }
  return largest_component(m, Connectivity::k26);
}

struct Box {
  Index3 lo{0, 0, 0}, hi{-1, -1, -1};
};

Box bounding_box(const Mask& m) {
  const auto& d = m.dims();
  Box b{{d.nz, d.ny, d.nx}, {-1, -1, -1}};
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        if (!m(z, y, x)) continue;
        const Index3 p{z, y, x};
        for (int a = 0; a < 3; ++a) {
          b.lo[a] = std::min(b.lo[a], p[a]);
          b.hi[a] = std::max(b.hi[a], p[a]);
        }
      }
  return b;
}

std::string sample_name(int i, const char* kind) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "sample_%06d_%s.pvol", i, kind);
  return buf;
}

}  // namespace

ShapeParams ShapeParams::kidney_defaults(int grid) {
  const double f = grid / 64.0;
  ShapeParams p;
  p.grid = grid;
  p.radius_z = scaled({16.0, 20.0}, f);
  p.radius_y = scaled({10.0, 12.0}, f);
  p.radius_x = scaled({8.0, 10.0}, f);
  p.perturb_amplitude = 0.08;
  p.perturb_frequency = 2.0;
  p.bend_amplitude = 0.3;
  return p;
}

ShapeParams ShapeParams::tumor_defaults(int grid) {
  const double f = grid / 64.0;
  ShapeParams p;
  p.grid = grid;
  p.radius_z = scaled({5.0, 9.0}, f);
  p.radius_y = scaled({5.0, 9.0}, f);
  p.radius_x = scaled({5.0, 9.0}, f);
  p.perturb_amplitude = 0.1;
  p.perturb_frequency = 2.0;
  p.bend_amplitude = 0.0;
  return p;
}

void ShapeParams::validate() const {
  if (grid < 4) throw std::invalid_argument("shape grid must be >= 4");
  const double half = grid / 2.0;
  check_range(radius_z, 0.5, half, "radius_z");
  check_range(radius_y, 0.5, half, "radius_y");
  check_range(radius_x, 0.5, half, "radius_x");
  if (!(perturb_amplitude >= 0.0 && perturb_amplitude < 0.5)) {
    throw std::invalid_argument("perturbation amplitude must lie in [0, 0.5)");
  }
  if (!(perturb_frequency >= 1.0)) throw std::invalid_argument("perturbation frequency must be >= 1");
  if (!(bend_amplitude >= 0.0 && bend_amplitude <= 1.0)) throw std::invalid_argument("bend must lie in [0, 1]");
}

Mask gen_kidney_shape(Rng& rng, const ShapeParams& p) { return gen_shape(rng, p, true); }

Mask gen_tumor_shape(Rng& rng, const ShapeParams& p) { return gen_shape(rng, p, false); }

double coverage_ratio(const Mask& kidney, const Mask& tumor) {
  const auto k = count(kidney);
  if (k == 0) throw std::invalid_argument("coverage_ratio: kidney mask is empty");
  return static_cast<double>(count(mask_intersection(kidney, tumor))) / static_cast<double>(k);
}

double containment_ratio(const Mask& kidney, const Mask& tumor) {
  const auto t = count(tumor);
  if (t == 0) throw std::invalid_argument("containment_ratio: tumor mask is empty");
  return static_cast<double>(count(mask_intersection(kidney, tumor))) / static_cast<double>(t);
}

void ComposeLimits::validate() const {
  if (!(max_coverage > 0 && max_coverage <= 1) || !(max_containment > 0 && max_containment <= 1)) {
    throw std::invalid_argument("compose limits must lie in (0, 1]");
  }
  if (max_attempts < 1) throw std::invalid_argument("compose attempt budget must be >= 1");
  if (!(scale_min >= 0.1 && scale_min <= scale_max && scale_max <= 10.0)) {
    throw std::invalid_argument("compose scale range must lie in [0.1, 10]");
  }
  if (rotation_z_deg < 0 || rotation_xy_deg < 0) throw std::invalid_argument("rotation ranges must be >= 0");
}

ComposeResult try_compose(const Mask& kidney, const Mask& tumor, Rng& rng, const ComposeLimits& limits) {
  limits.validate();
  if (kidney.dims() != tumor.dims()) throw std::invalid_argument("try_compose: kidney and tumor dims differ");
  if (count(kidney) == 0 || count(tumor) == 0) throw std::invalid_argument("try_compose: empty input mask");

  const Box kbox = bounding_box(kidney);
  const auto& d = kidney.dims();
  const std::array<int, 3> extent{d.nz, d.ny, d.nx};
  const Point3 tumor_center = centroid(tumor);

  ComposeResult result;
  const int budget = limits.forced ? 1 : limits.max_attempts;
  for (int attempt = 0; attempt < budget; ++attempt) {
    ++result.attempts;
    Placement pl;
    if (limits.forced) {
      pl = *limits.forced;
    } else {
      pl.rotation.z = uniform(rng, -limits.rotation_z_deg, limits.rotation_z_deg);
      pl.rotation.y = uniform(rng, -limits.rotation_xy_deg, limits.rotation_xy_deg);
      pl.rotation.x = uniform(rng, -limits.rotation_xy_deg, limits.rotation_xy_deg);
      pl.scale = uniform(rng, limits.scale_min, limits.scale_max);
    }
    const Mask transformed = rotate_scale<std::uint8_t>(tumor, pl.rotation, pl.scale, tumor_center, 0);
    const auto t_count = count(transformed);
    if (t_count == 0) {
      result.reject_reason = "empty tumor";
      continue;
    }
    if (!limits.forced) {
      const Point3 c = centroid(transformed);
      const int radius = static_cast<int>(std::ceil(std::cbrt(3.0 * t_count / (4.0 * std::numbers::pi))));
      for (int a = 0; a < 3; ++a) {
        const int lo = std::max(0, kbox.lo[a] - radius);
        const int hi = std::min(extent[a] - 1, kbox.hi[a] + radius);
        const int target = uniform_int(rng, lo, hi);
        pl.offset[a] = static_cast<int>(std::lround(target - c[a]));
      }
    }
    Mask placed = translate_mask(transformed, pl.offset);
    if (count(placed) == 0) {
      result.reject_reason = "empty tumor";
      continue;
    }
    if (count(mask_intersection(kidney, placed)) == 0) {
      result.reject_reason = "no overlap";
      continue;
    }
    const double coverage = coverage_ratio(kidney, placed);
    const double containment = containment_ratio(kidney, placed);
    if (!(coverage < limits.max_coverage)) {
      result.reject_reason = "coverage";
      continue;
    }
    if (!(containment < limits.max_containment)) {
      result.reject_reason = "containment";
      continue;
    }

    SynthSample s;
    s.input_mask = mask_union(kidney, placed);
    s.target_mask = limits.target == TargetMode::kWholeTumor ? placed : mask_difference(placed, kidney);
    s.kidney_mask = kidney;
    s.tumor_mask = std::move(placed);
    s.meta.rotation = pl.rotation;
    s.meta.scale = pl.scale;
    s.meta.offset = pl.offset;
    s.meta.coverage_ratio = coverage;
    s.meta.containment_ratio = containment;
    s.meta.attempts = result.attempts;
    result.sample = std::move(s);
    result.reject_reason.clear();
    return result;
  }
  return result;
}

SynthConfig SynthConfig::for_grid(int grid) {
  SynthConfig c;
  c.grid = grid;
  c.kidney = ShapeParams::kidney_defaults(grid);
  c.tumor = ShapeParams::tumor_defaults(grid);
  return c;
}

SynthSample generate_sample(std::uint64_t seed, const SynthConfig& cfg, long* proposals) {
  Rng rng(seed);
  long total = 0;
  // Bounded only by the acceptance rate; every shape pair gets a fresh budget.
  for (;;) {
    const Mask kidney = gen_kidney_shape(rng, cfg.kidney);
    const Mask tumor = gen_tumor_shape(rng, cfg.tumor);
    auto res = try_compose(kidney, tumor, rng, cfg.limits);
    total += res.attempts;
    if (res) {
      res.sample->meta.seed = seed;
      if (proposals) *proposals = total;
      return std::move(*res.sample);
    }
  }
}

namespace {

nlohmann::json range_json(const RadiusRange& r) { return nlohmann::json::array({r.min, r.max}); }
RadiusRange range_from(const nlohmann::json& j, const RadiusRange& fallback) {
  if (j.is_null()) return fallback;
  return {j.at(0).get<double>(), j.at(1).get<double>()};
}

nlohmann::json shape_json(const ShapeParams& p) {
  return {{"grid", p.grid},
          {"radius_z", range_json(p.radius_z)},
          {"radius_y", range_json(p.radius_y)},
          {"radius_x", range_json(p.radius_x)},
          {"perturb_amplitude", p.perturb_amplitude},
          {"perturb_frequency", p.perturb_frequency},
          {"bend_amplitude", p.bend_amplitude}};
}

ShapeParams shape_from(const nlohmann::json& j, ShapeParams p) {
  p.grid = j.value("grid", p.grid);
  p.radius_z = range_from(j.value("radius_z", nlohmann::json()), p.radius_z);
  p.radius_y = range_from(j.value("radius_y", nlohmann::json()), p.radius_y);
  p.radius_x = range_from(j.value("radius_x", nlohmann::json()), p.radius_x);
  p.perturb_amplitude = j.value("perturb_amplitude", p.perturb_amplitude);
  p.perturb_frequency = j.value("perturb_frequency", p.perturb_frequency);
  p.bend_amplitude = j.value("bend_amplitude", p.bend_amplitude);
  p.validate();
  return p;
}

nlohmann::json meta_json(const SynthMeta& m) {
  return {{"seed", m.seed},
          {"coverage_ratio", m.coverage_ratio},
          {"containment_ratio", m.containment_ratio},
          {"rotation", {m.rotation.z, m.rotation.y, m.rotation.x}},
          {"scale", m.scale},
          {"offset", {m.offset[0], m.offset[1], m.offset[2]}},
          {"attempts", m.attempts}};
}

SynthMeta meta_from(const nlohmann::json& j) {
  SynthMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.coverage_ratio = j.at("coverage_ratio").get<double>();
  m.containment_ratio = j.at("containment_ratio").get<double>();
  const auto& r = j.at("rotation");
  m.rotation = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
  m.scale = j.at("scale").get<double>();
  const auto& o = j.at("offset");
  m.offset = {o.at(0).get<int>(), o.at(1).get<int>(), o.at(2).get<int>()};
  m.attempts = j.value("attempts", 0);
  return m;
}

}  // namespace

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"grid", c.grid},
       {"kidney", shape_json(c.kidney)},
       {"tumor", shape_json(c.tumor)},
       {"limits",
        {{"max_coverage", c.limits.max_coverage},
         {"max_containment", c.limits.max_containment},
         {"max_attempts", c.limits.max_attempts},
         {"rotation_z_deg", c.limits.rotation_z_deg},
         {"rotation_xy_deg", c.limits.rotation_xy_deg},
         {"scale", {c.limits.scale_min, c.limits.scale_max}},
         {"target", c.limits.target == TargetMode::kWholeTumor ? "whole_tumor" : "exophytic"}}}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.grid = j.value("grid", c.grid);
  const SynthConfig defaults = SynthConfig::for_grid(c.grid);
  c.kidney = shape_from(j.value("kidney", nlohmann::json::object()), defaults.kidney);
  c.tumor = shape_from(j.value("tumor", nlohmann::json::object()), defaults.tumor);
  if (c.kidney.grid != c.grid || c.tumor.grid != c.grid) {
    throw std::invalid_argument("synth config: shape grids must match the dataset grid");
  }
  const auto l = j.value("limits", nlohmann::json::object());
  c.limits.max_coverage = l.value("max_coverage", c.limits.max_coverage);
  c.limits.max_containment = l.value("max_containment", c.limits.max_containment);
  c.limits.max_attempts = l.value("max_attempts", c.limits.max_attempts);
  c.limits.rotation_z_deg = l.value("rotation_z_deg", c.limits.rotation_z_deg);
  c.limits.rotation_xy_deg = l.value("rotation_xy_deg", c.limits.rotation_xy_deg);
  if (l.contains("scale")) {
    c.limits.scale_min = l["scale"].at(0).get<double>();
    c.limits.scale_max = l["scale"].at(1).get<double>();
  }
  const auto target = l.value("target", std::string("whole_tumor"));
  if (target == "whole_tumor") {
    c.limits.target = TargetMode::kWholeTumor;
  } else if (target == "exophytic") {
    c.limits.target = TargetMode::kExophytic;
  } else {
    throw std::invalid_argument("synth config: unknown target mode " + target);
  }
  c.limits.validate();
}

void to_json(nlohmann::json& j, const SynthManifest& m) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& e : m.samples) {
    auto s = meta_json(e.meta);
    s["input_path"] = e.input_path;
    s["target_path"] = e.target_path;
    s["kidney_path"] = e.kidney_path;
    s["tumor_path"] = e.tumor_path;
    samples.push_back(std::move(s));
  }
  j = {{"version", m.version},
       {"master_seed", m.master_seed},
       {"grid", {m.grid.nz, m.grid.ny, m.grid.nx}},
       {"complete", m.complete},
       {"proposals", m.proposals},
       {"samples", std::move(samples)}};
  if (!m.error.empty()) j["error"] = m.error;
}

void from_json(const nlohmann::json& j, SynthManifest& m) {
  m.version = j.at("version").get<int>();
  if (m.version != 1) throw FormatError("synth manifest: unsupported version " + std::to_string(m.version));
  m.master_seed = j.at("master_seed").get<std::uint64_t>();
  const auto& g = j.at("grid");
  m.grid = {g.at(0).get<int>(), g.at(1).get<int>(), g.at(2).get<int>()};
  m.complete = j.value("complete", false);
  m.proposals = j.value("proposals", 0L);
  m.error = j.value("error", std::string());
  m.samples.clear();
  for (const auto& s : j.at("samples")) {
    SynthManifestEntry e;
    e.input_path = s.at("input_path").get<std::string>();
    e.target_path = s.at("target_path").get<std::string>();
    e.kidney_path = s.value("kidney_path", std::string());
    e.tumor_path = s.value("tumor_path", std::string());
    e.meta = meta_from(s);
    m.samples.push_back(std::move(e));
  }
}

SynthManifest generate_dataset(int n, std::uint64_t master_seed, const std::filesystem::path& out_dir,
                               const SynthConfig& cfg) {
  if (n < 1) throw std::invalid_argument("generate_dataset: n must be >= 1");
  cfg.limits.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  SynthManifest manifest;
  manifest.master_seed = master_seed;
  manifest.grid = {cfg.grid, cfg.grid, cfg.grid};
  std::vector<std::optional<SynthManifestEntry>> entries(n);
  std::vector<long> proposals(n, 0);

  std::string failure;
  try {
    parallel_for(n, [&](int i) {
      const SynthSample s = generate_sample(derive_seed(master_seed, static_cast<std::uint64_t>(i)), cfg, &proposals[i]);
      SynthManifestEntry e{sample_name(i, "input"), sample_name(i, "target"), sample_name(i, "kidney"),
                           sample_name(i, "tumor"), s.meta};
      write_pvol(out_dir / e.input_path, s.input_mask);
      write_pvol(out_dir / e.target_path, s.target_mask);
      write_pvol(out_dir / e.kidney_path, s.kidney_mask);
      write_pvol(out_dir / e.tumor_path, s.tumor_mask);
      entries[i] = std::move(e);
    });
  } catch (const std::exception& e) {
    failure = e.what();
  }

  for (int i = 0; i < n; ++i) {
    if (entries[i]) manifest.samples.push_back(std::move(*entries[i]));
    manifest.proposals += proposals[i];
  }
  manifest.complete = failure.empty();
  manifest.error = failure;
  nlohmann::json j = manifest;
  j["config"] = cfg;
  write_file(out_dir / kSynthManifestName, j.dump(2) + "\n");
  if (!failure.empty()) throw IoError("generate_dataset aborted: " + failure);
  return manifest;
}

SynthManifest load_synth_manifest(const std::filesystem::path& manifest_path) {
  const auto text = read_file(manifest_path);
  SynthManifest m;
  try {
    from_json(nlohmann::json::parse(text), m);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  return m;
}

void Step2AugConfig::validate() const {
  check_range(blur_sigma, 0.0, 10.0, "blur sigma");
  check_range(noise_std, 0.0, 1.0, "noise std");
  check_range(intensity_shift, -1.0, 1.0, "intensity shift");
  for (double p : {blur_probability, noise_probability, shift_probability}) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("augmentation probabilities must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const Step2AugConfig& c) {
  j = {{"blur_sigma", range_json(c.blur_sigma)},
       {"noise_std", range_json(c.noise_std)},
       {"intensity_shift", range_json(c.intensity_shift)},
       {"blur_probability", c.blur_probability},
       {"noise_probability", c.noise_probability},
       {"shift_probability", c.shift_probability}};
}

void from_json(const nlohmann::json& j, Step2AugConfig& c) {
  c.blur_sigma = range_from(j.value("blur_sigma", nlohmann::json()), c.blur_sigma);
  c.noise_std = range_from(j.value("noise_std", nlohmann::json()), c.noise_std);
  c.intensity_shift = range_from(j.value("intensity_shift", nlohmann::json()), c.intensity_shift);
  c.blur_probability = j.value("blur_probability", c.blur_probability);
  c.noise_probability = j.value("noise_probability", c.noise_probability);
  c.shift_probability = j.value("shift_probability", c.shift_probability);
  c.validate();
}

Volume augment_step2_input(const Mask& m, const Step2AugConfig& cfg, Rng& rng) {
  cfg.validate();
  Volume v = to_volume(m);
  if (bernoulli(rng, cfg.blur_probability)) {
    v = gaussian_blur(v, uniform(rng, cfg.blur_sigma.min, cfg.blur_sigma.max));
  }
  if (bernoulli(rng, cfg.noise_probability)) {
    const double sd = uniform(rng, cfg.noise_std.min, cfg.noise_std.max);
    if (sd > 0.0) {
      std::normal_distribution<double> noise(0.0, sd);
      for (auto& x : v.data()) x = static_cast<float>(x + noise(rng));
    }
  }
  if (bernoulli(rng, cfg.shift_probability)) {
    const auto shift = static_cast<float>(uniform(rng, cfg.intensity_shift.min, cfg.intensity_shift.max));
    for (auto& x : v.data()) x += shift;
  }
  for (auto& x : v.data()) x = std::clamp(x, 0.0f, 1.0f);
  return v;
}

}  // namespace protuseg
