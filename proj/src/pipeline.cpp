#include "protuseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>

#include "protuseg/errors.hpp"
#include "protuseg/parallel.hpp"
#include "protuseg/pvol_io.hpp"

namespace protuseg {

void PreprocessConfig::validate() const {
  if (!(clip_lo < clip_hi)) throw std::invalid_argument("clip window needs lo < hi");
  if (!(target_spacing > 0.0)) throw std::invalid_argument("target spacing must be > 0");
}

Volume preprocess(const Volume& image, const PreprocessConfig& cfg) {
  cfg.validate();
  for (float v : image.values()) {
    if (!std::isfinite(v)) throw NumericFault("preprocess", "non-finite input voxel");
  }
  Volume out = resample(image, cfg.target_spacing);
  const double mid = 0.5 * (cfg.clip_lo + cfg.clip_hi);
  const double half = 0.5 * (cfg.clip_hi - cfg.clip_lo);
  for (auto& v : out.data()) v = static_cast<float>((std::clamp<double>(v, cfg.clip_lo, cfg.clip_hi) - mid) / half);
  return out;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"id", e.id},
                       {"image", e.image},
                       {"kidney", e.kidney},
                       {"tumor", e.tumor},
                       {"split", e.split},
                       {"seed", e.seed},
                       {"isodense", e.isodense}});
  }
  j = {{"version", m.version}, {"master_seed", m.master_seed}, {"entries", std::move(entries)}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.version = j.at("version").get<int>();
  if (m.version != 1) throw FormatError("dataset manifest: unsupported version " + std::to_string(m.version));
  m.master_seed = j.value("master_seed", std::uint64_t{0});
  m.entries.clear();
  for (const auto& e : j.at("entries")) {
    DatasetEntry d;
    d.id = e.at("id").get<std::string>();
    d.image = e.at("image").get<std::string>();
    d.kidney = e.at("kidney").get<std::string>();
    d.tumor = e.at("tumor").get<std::string>();
    d.split = e.value("split", std::string("train"));
    d.seed = e.value("seed", std::uint64_t{0});
    d.isodense = e.value("isodense", false);
    m.entries.push_back(std::move(d));
  }
}

DatasetManifest load_dataset_manifest(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    return nlohmann::json::parse(text).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<LabeledImage> load_dataset(const std::filesystem::path& manifest_path, const std::string& split) {
  const DatasetManifest m = load_dataset_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  std::vector<LabeledImage> out;
  for (const auto& e : m.entries) {
    if (!split.empty() && e.split != split) continue;
    LabeledImage s{e.id, read_volume(dir / e.image), read_mask(dir / e.kidney), read_mask(dir / e.tumor)};
    if (s.image.dims() != s.kidney.dims() || s.image.dims() != s.tumor.dims()) {
      throw std::invalid_argument("dataset entry " + e.id + ": image and masks differ in dims");
    }
    out.push_back(std::move(s));
  }
  return out;
}

void PhantomConfig::validate() const {
  if (grid < 8) throw std::invalid_argument("phantom grid must be >= 8");
  if (!(p_isodense >= 0.0 && p_isodense <= 1.0)) throw std::invalid_argument("p_isodense must lie in [0, 1]");
  if (!(contrast_min >= 0.0 && contrast_min <= contrast_max)) throw std::invalid_argument("bad contrast range");
  if (!(noise_std >= 0.0) || !(blur_sigma >= 0.0)) throw std::invalid_argument("noise and blur must be >= 0");
}

void to_json(nlohmann::json& j, const PhantomConfig& c) {
  j = {{"grid", c.grid},
       {"p_isodense", c.p_isodense},
       {"background", c.background},
       {"kidney", c.kidney},
       {"contrast", {c.contrast_min, c.contrast_max}},
       {"noise_std", c.noise_std},
       {"blur_sigma", c.blur_sigma}};
}

void from_json(const nlohmann::json& j, PhantomConfig& c) {
  c.grid = j.value("grid", c.grid);
  c.p_isodense = j.value("p_isodense", c.p_isodense);
  c.background = j.value("background", c.background);
  c.kidney = j.value("kidney", c.kidney);
  if (j.contains("contrast")) {
    c.contrast_min = j["contrast"].at(0).get<double>();
    c.contrast_max = j["contrast"].at(1).get<double>();
  }
  c.noise_std = j.value("noise_std", c.noise_std);
  c.blur_sigma = j.value("blur_sigma", c.blur_sigma);
  c.validate();
}

Phantom make_phantom(std::uint64_t seed, const PhantomConfig& cfg) {
  cfg.validate();
  const SynthSample s = generate_sample(seed, SynthConfig::for_grid(cfg.grid));
  Rng rng(derive_seed(seed, 1));

  Phantom p;
  p.meta = s.meta;
  p.isodense = bernoulli(rng, cfg.p_isodense);
  float tumor_value = cfg.kidney;
  if (!p.isodense) {
    const double sign = bernoulli(rng, 0.5) ? 1.0 : -1.0;
    tumor_value = static_cast<float>(cfg.kidney + sign * uniform(rng, cfg.contrast_min, cfg.contrast_max));
  }

  Volume image(s.kidney_mask.dims(), {}, cfg.background);
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (s.tumor_mask[i]) {
      image[i] = tumor_value;
    } else if (s.kidney_mask[i]) {
      image[i] = cfg.kidney;
    }
  }
  image = gaussian_blur(image, cfg.blur_sigma);
  if (cfg.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    for (auto& v : image.data()) v = static_cast<float>(v + noise(rng));
  }

  p.labeled.image = std::move(image);
  p.labeled.kidney = mask_difference(s.kidney_mask, s.tumor_mask);
  p.labeled.tumor = s.tumor_mask;
  return p;
}

DatasetManifest make_phantom_dataset(int n, int n_test, std::uint64_t master_seed, const std::filesystem::path& out_dir,
                                     const PhantomConfig& cfg) {
  if (n < 1) throw std::invalid_argument("make_phantom_dataset: n must be >= 1");
  if (n_test < 0 || n_test > n) throw std::invalid_argument("make_phantom_dataset: test count must lie in [0, n]");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest manifest;
  manifest.master_seed = master_seed;
  manifest.entries.resize(n);
  parallel_for(n, [&](int i) {
    const std::uint64_t seed = derive_seed(master_seed, static_cast<std::uint64_t>(i));
    const Phantom p = make_phantom(seed, cfg);
    char id[32];
    std::snprintf(id, sizeof(id), "phantom_%04d", i);
    DatasetEntry e{id, std::string(id) + "_image.pvol", std::string(id) + "_kidney.pvol",
                   std::string(id) + "_tumor.pvol", i >= n - n_test ? "test" : "train", seed, p.isodense};
    write_pvol(out_dir / e.image, p.labeled.image);
    write_pvol(out_dir / e.kidney, p.labeled.kidney);
    write_pvol(out_dir / e.tumor, p.labeled.tumor);
    manifest.entries[i] = std::move(e);
  });
  nlohmann::json j = manifest;
  j["config"] = cfg;
  write_file(out_dir / kDatasetManifestName, j.dump(2) + "\n");
  return manifest;
}

}  // namespace protuseg
