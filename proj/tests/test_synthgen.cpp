#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "helpers.hpp"
#include "protuseg/parallel.hpp"
#include "protuseg/synthgen.hpp"

using namespace protuseg;

namespace {

ShapeParams fixed_shape(int grid, double rz, double ry, double rx) {
  ShapeParams p;
  p.grid = grid;
  p.radius_z = {rz, rz};
  p.radius_y = {ry, ry};
  p.radius_x = {rx, rx};
  p.perturb_amplitude = 0.0;
  p.bend_amplitude = 0.0;
  return p;
}

Mask line_mask(Dims d, int y, int x, int z0, int len) {
  Mask m(d);
  for (int z = z0; z < z0 + len; ++z) m(z, y, x) = 1;
  return m;
}

// Independent recount straight from voxel values.
std::pair<double, double> recount(const Mask& kidney, const Mask& tumor) {
  long k = 0, t = 0, kt = 0;
  const auto a = kidney.values();
  const auto b = tumor.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    k += a[i];
    t += b[i];
    kt += a[i] && b[i];
  }
  return {static_cast<double>(kt) / k, static_cast<double>(kt) / t};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

}  // namespace

TEST_SUITE("synthgen") {
  TEST_CASE("unperturbed shapes match the ellipsoid volume") {
    Rng rng(3);
    const Mask e = gen_kidney_shape(rng, fixed_shape(64, 16, 10, 8));
    const double want_e = 4.0 / 3.0 * std::numbers::pi * 16 * 10 * 8;
    CHECK(std::abs(static_cast<double>(count(e)) - want_e) / want_e < 0.05);

    const Mask s = gen_tumor_shape(rng, fixed_shape(64, 8, 8, 8));
    const double want_s = 4.0 / 3.0 * std::numbers::pi * 512;
    CHECK(std::abs(static_cast<double>(count(s)) - want_s) / want_s < 0.05);
    CHECK(connected_components(s).count == 1);
  }

  TEST_CASE("shape validation") {
    ShapeParams p = ShapeParams::kidney_defaults(32);
    CHECK_NOTHROW(p.validate());
    p.perturb_amplitude = 0.5;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = ShapeParams::kidney_defaults(32);
    p.radius_z = {20, 30};
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
    p = ShapeParams::kidney_defaults(32);
    p.grid = 2;
    CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  }

  TEST_CASE("ratios") {
    const Dims d{12, 3, 3};
    const Mask k = line_mask(d, 1, 1, 0, 10);
    const Mask t = line_mask(d, 1, 1, 7, 5);
    CHECK(coverage_ratio(k, t) == doctest::Approx(0.3));
    CHECK(containment_ratio(k, t) == doctest::Approx(0.6));
    CHECK_THROWS_AS(coverage_ratio(Mask(d), t), std::invalid_argument);
    CHECK_THROWS_AS(containment_ratio(k, Mask(d)), std::invalid_argument);
  }

  TEST_CASE("coverage of exactly 0.3 is rejected") {
    // 10-voxel kidney, 20-voxel tumor, 3 shared voxels.
    const Dims d{20, 8, 8};
    const Mask kidney = line_mask(d, 4, 4, 0, 10);
    Mask tumor(d);
    for (int z = 7; z < 12; ++z)
      for (int y = 3; y < 5; ++y)
        for (int x = 3; x < 5; ++x) tumor(z, y, x) = 1;
    REQUIRE(count(tumor) == 20);
    ComposeLimits lim;
    lim.forced = Placement{};
    Rng rng(1);
    const auto r = try_compose(kidney, tumor, rng, lim);
    CHECK_FALSE(r);
    CHECK(r.reject_reason == "coverage");
    CHECK(r.attempts == 1);
  }

  TEST_CASE("containment of exactly 0.95 is rejected") {
    const Dims d{24, 8, 8};
    Mask kidney(d);
    for (int z = 0; z < 19; ++z)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) kidney(z, y, x) = 1;
    const Mask tumor = line_mask(d, 4, 4, 0, 20);  // 19 of 20 inside
    ComposeLimits lim;
    lim.forced = Placement{};
    Rng rng(1);
    const auto r = try_compose(kidney, tumor, rng, lim);
    CHECK_FALSE(r);
    CHECK(r.reject_reason == "containment");

    // One voxel further out gives 18/20 and passes.
    lim.forced->offset = {1, 0, 0};
    const auto ok = try_compose(kidney, tumor, rng, lim);
    REQUIRE(ok);
    CHECK(ok.sample->meta.containment_ratio == doctest::Approx(0.9));
    CHECK(ok.sample->meta.coverage_ratio == doctest::Approx(18.0 / (19 * 64)));
  }

  TEST_CASE("forced placements") {
    const Mask kidney = testutil::sphere(32, 8, 16, 16, 8);
    const Mask tumor = testutil::sphere(32, 3, 16, 16, 16);
    Rng rng(1);
    ComposeLimits lim;
    lim.forced = Placement{{}, 1.0, {0, 0, 10}};
    CHECK(try_compose(kidney, tumor, rng, lim).reject_reason == "no overlap");
    lim.forced = Placement{{}, 1.0, {0, 0, -8}};
    CHECK(try_compose(kidney, tumor, rng, lim).reject_reason == "containment");
    lim.forced = Placement{{}, 1.0, {0, 0, 0}};
    const auto r = try_compose(kidney, tumor, rng, lim);
    REQUIRE(r);
    CHECK(r.sample->input_mask == mask_union(kidney, tumor));
    CHECK(r.sample->target_mask == r.sample->tumor_mask);

    lim.target = TargetMode::kExophytic;
    const auto e = try_compose(kidney, tumor, rng, lim);
    REQUIRE(e);
    CHECK(e.sample->target_mask == mask_difference(e.sample->tumor_mask, kidney));
  }

  TEST_CASE("samples are deterministic and satisfy the ratio limits") {
    const SynthConfig cfg = SynthConfig::for_grid(32);
    CHECK(generate_sample(42, cfg).input_mask == generate_sample(42, cfg).input_mask);
    CHECK_FALSE(generate_sample(42, cfg).input_mask == generate_sample(43, cfg).input_mask);

    long proposals = 0;
    int bad = 0;
    for (int i = 0; i < 1000; ++i) {
      long p = 0;
      const SynthSample s = generate_sample(derive_seed(7, i), cfg, &p);
      proposals += p;
      const auto [cov, cont] = recount(s.kidney_mask, s.tumor_mask);
      const bool ok = cov > 0.0 && cov < 0.3 && cont < 0.95 && connected_components(s.input_mask).count == 1 &&
                      connected_components(s.kidney_mask).count == 1 &&
                      std::abs(cov - s.meta.coverage_ratio) < 1e-12 && std::abs(cont - s.meta.containment_ratio) < 1e-12;
      bad += !ok;
    }
    CHECK(bad == 0);
    CHECK(1000.0 / static_cast<double>(proposals) >= 0.05);
  }

  TEST_CASE("config json round trip") {
    SynthConfig cfg = SynthConfig::for_grid(48);
    cfg.limits.target = TargetMode::kExophytic;
    cfg.limits.scale_max = 1.2;
    const nlohmann::json j = cfg;
    const SynthConfig back = j.get<SynthConfig>();
    CHECK(nlohmann::json(back) == j);
    nlohmann::json broken = j;
    broken["limits"]["target"] = "sideways";
    CHECK_THROWS(broken.get<SynthConfig>());
  }

  TEST_CASE("dataset bytes do not depend on thread count") {
    const SynthConfig cfg = SynthConfig::for_grid(24);
    const auto a = testutil::scratch_dir("synth_a");
    const auto b = testutil::scratch_dir("synth_b");
    const int saved = num_threads();
    set_num_threads(1);
    const SynthManifest ma = generate_dataset(6, 11, a, cfg);
    set_num_threads(3);
    generate_dataset(6, 11, b, cfg);
    set_num_threads(saved);
    CHECK(ma.complete);
    CHECK(ma.samples.size() == 6);
    for (const auto& entry : std::filesystem::directory_iterator(a)) {
      const auto name = entry.path().filename();
      CHECK_MESSAGE(slurp(a / name) == slurp(b / name), name.string());
    }
    const SynthManifest loaded = load_synth_manifest(a / kSynthManifestName);
    CHECK(loaded.samples.size() == 6);
    CHECK(loaded.samples[2].meta.seed == derive_seed(11, 2));
  }

  TEST_CASE("step 2 input augmentation") {
    Rng rng(5);
    const Mask m = testutil::sphere(24, 6, 12, 12, 12);

    Step2AugConfig off;
    off.blur_probability = off.noise_probability = off.shift_probability = 0.0;
    const Volume same = augment_step2_input(m, off, rng);
    for (std::size_t i = 0; i < m.size(); ++i) REQUIRE(same[i] == static_cast<float>(m[i]));

    Step2AugConfig on;
    on.blur_probability = on.noise_probability = on.shift_probability = 1.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const Volume v = augment_step2_input(m, on, rng);
      const auto [lo, hi] = std::minmax_element(v.values().begin(), v.values().end());
      REQUIRE(*lo >= 0.0f);
      REQUIRE(*hi <= 1.0f);
    }

    Step2AugConfig blur_only = off;
    blur_only.blur_probability = 1.0;
    blur_only.blur_sigma = {2.0, 2.0};
    const Volume b = augment_step2_input(m, blur_only, rng);
    CHECK(b(12, 12, 12) >= 0.5f);
    CHECK(b(0, 0, 0) <= 0.5f);
    CHECK(b(12, 12, 12) < 1.0f);
  }
}
