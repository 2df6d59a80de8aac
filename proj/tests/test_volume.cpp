#include <doctest.h>

#include <cmath>
#include <map>
#include <queue>

#include "brute.hpp"
#include "helpers.hpp"
#include "protuseg/volume.hpp"

using namespace protuseg;

namespace {

bool same_partition(const LabelGrid& got, const std::vector<int>& want) {
  std::map<int, int> fwd, bwd;
  for (std::size_t i = 0; i < want.size(); ++i) {
    const int a = got[i], b = want[i];
    if ((a == 0) != (b == 0)) return false;
    if (a == 0) continue;
    auto [f, fnew] = fwd.emplace(a, b);
    auto [r, rnew] = bwd.emplace(b, a);
    if (f->second != b || r->second != a) return false;
  }
  return true;
}

Volume ramp(Dims d, Spacing s = {}) {
  Volume v(d, s);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  return v;
}

}  // namespace

TEST_SUITE("volume") {
  TEST_CASE("grid validates geometry and mask values") {
    CHECK_THROWS_AS(Volume(Dims{0, 1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(Volume(Dims{1, 1, 1}, Spacing{0.0, 1.0, 1.0}), std::invalid_argument);
    CHECK_THROWS_AS(Mask(Dims{1, 1, 2}, Spacing{}, std::vector<std::uint8_t>{0, 2}), std::invalid_argument);
    CHECK_THROWS_AS(Volume(Dims{2, 2, 2}, Spacing{}, std::vector<float>(7)), std::invalid_argument);
    const Volume v(Dims{2, 3, 4});
    CHECK(v.index(1, 2, 3) == 23);
    CHECK(v.index(0, 0, 1) == 1);
  }

  TEST_CASE("identity transforms are bit-exact") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
      const Mask m = testutil::random_mask(rng, {9, 11, 13}, 0.3);
      CHECK(rotate_mask(m, {0, 0, 0}) == m);
      CHECK(scale_mask(m, 1.0) == m);
      CHECK(translate_mask(m, {0, 0, 0}) == m);
    }
  }

  TEST_CASE("rotating a voxel at the centroid leaves it in place") {
    Mask m({9, 9, 9});
    m(4, 4, 4) = 1;
    CHECK(rotate_mask(m, {37.0, -12.0, 81.0}) == m);
  }

  TEST_CASE("90 degrees about z permutes indices") {
    const int n = 15, c = 7;
    Rng rng(11);
    std::vector<Mask> shapes;
    Mask bar({n, n, n});
    for (int x = 3; x <= 11; ++x) bar(c, c, x) = 1;
    shapes.push_back(bar);
    // Centrosymmetric random blobs keep the centroid on the grid center.
    for (int t = 0; t < 5; ++t) {
      Mask m({n, n, n});
      for (int i = 0; i < 40; ++i) {
        const int z = uniform_int(rng, 3, 11), y = uniform_int(rng, 3, 11), x = uniform_int(rng, 3, 11);
        m(z, y, x) = 1;
        m(2 * c - z, 2 * c - y, 2 * c - x) = 1;
      }
      shapes.push_back(m);
    }
    for (const auto& m : shapes) {
      Mask want({n, n, n});
      for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
          for (int x = 0; x < n; ++x) {
            if (m(z, y, x)) want(z, c + (x - c), c - (y - c)) = 1;
          }
      CHECK(rotate_mask(m, {90.0, 0.0, 0.0}) == want);
    }
    const Mask rotated = rotate_mask(bar, {90.0, 0.0, 0.0});
    CHECK(count(rotated) == 9);
    for (int y = 3; y <= 11; ++y) CHECK(rotated(c, y, c) == 1);
  }

  TEST_CASE("scaling a sphere follows the cube of the factor") {
    const Mask s = testutil::sphere(31, 6.0, 15, 15, 15);
    const double original = static_cast<double>(count(s));
    const double half = static_cast<double>(count(scale_mask(s, 0.5)));
    CHECK(half == doctest::Approx(original / 8.0).epsilon(0.2));
    const double big = static_cast<double>(count(scale_mask(s, 1.5)));
    CHECK(big == doctest::Approx(original * 3.375).epsilon(0.2));
    CHECK_THROWS_AS(scale_mask(s, 0.05), std::invalid_argument);
    CHECK_THROWS_AS(scale_mask(s, 11.0), std::invalid_argument);
  }

  TEST_CASE("scaling past the grid clips without error") {
    Mask bar({8, 8, 8});
    for (int x = 0; x < 8; ++x) bar(4, 4, x) = 1;
    Mask out;
    CHECK_NOTHROW(out = scale_mask(bar, 3.0));
    for (int x = 0; x < 8; ++x) CHECK(out(4, 4, x) == 1);
  }

  TEST_CASE("translation shifts and drops voxels") {
    Mask m({4, 4, 4});
    m(1, 1, 1) = 1;
    const Mask shifted = translate_mask(m, {2, 0, 0});
    CHECK(count(shifted) == 1);
    CHECK(shifted(3, 1, 1) == 1);
    Mask edge({4, 4, 4});
    edge(3, 0, 0) = 1;
    CHECK(count(translate_mask(edge, {1, 0, 0})) == 0);
  }

  TEST_CASE("set algebra") {
    Rng rng(5);
    Mask a({2, 2, 2}), b({2, 2, 2});
    a(0, 0, 0) = 1;
    b(1, 1, 1) = 1;
    CHECK(count(mask_union(a, b)) == 2);
    CHECK(count(mask_intersection(a, b)) == 0);
    CHECK(mask_union(a, Mask({2, 2, 2})) == a);
    CHECK(mask_intersection(a, a) == a);
    CHECK_THROWS_AS(mask_union(a, Mask({2, 2, 3})), std::invalid_argument);
    for (int t = 0; t < 50; ++t) {
      const Mask x = testutil::random_mask(rng, {6, 7, 8}, 0.4);
      const Mask y = testutil::random_mask(rng, {6, 7, 8}, 0.6);
      CHECK(count(mask_union(x, y)) + count(mask_intersection(x, y)) == count(x) + count(y));
      CHECK(count(mask_difference(x, y)) == count(x) - count(mask_intersection(x, y)));
    }
  }

  TEST_CASE("connected components small cases") {
    CHECK(connected_components(Mask({4, 4, 4})).count == 0);
    Mask m({3, 3, 3});
    m(1, 1, 1) = 1;
    m(1, 1, 2) = 1;
    CHECK(connected_components(m, Connectivity::k6).count == 1);
    Mask diag({3, 3, 3});
    diag(0, 0, 0) = 1;
    diag(1, 1, 1) = 1;
    CHECK(connected_components(diag, Connectivity::k6).count == 2);
    CHECK(connected_components(diag, Connectivity::k26).count == 1);
  }

  TEST_CASE("connected components match flood fill on random masks") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
      const double density = uniform(rng, 0.1, 0.6);
      const Mask m = testutil::random_mask(rng, {16, 16, 16}, density);
      for (int conn : {6, 26}) {
        const auto [want, n] = brute::flood_fill(m, conn);
        const Components got = connected_components(m, conn == 6 ? Connectivity::k6 : Connectivity::k26);
        REQUIRE(got.count == n);
        CHECK(same_partition(got.labels, want));
      }
    }
  }

  TEST_CASE("largest component") {
    Mask m({5, 5, 5});
    m(0, 0, 0) = 1;
    m(4, 4, 4) = 1;
    m(4, 4, 3) = 1;
    const Mask big = largest_component(m);
    CHECK(count(big) == 2);
    CHECK(big(4, 4, 4) == 1);
  }

  TEST_CASE("gaussian blur") {
    const Volume v = ramp({5, 6, 7});
    CHECK(gaussian_blur(v, 0.0) == v);
    const Volume constant({6, 6, 6}, {}, 2.5f);
    const Volume blurred = gaussian_blur(constant, 1.7);
    for (float x : blurred.values()) CHECK(x == doctest::Approx(2.5f).epsilon(1e-6));

    // Direct kernel evaluation.
    const double sigma = 1.0;
    const int r = static_cast<int>(std::ceil(3 * sigma));
    double sum = 0.0;
    for (int k = -r; k <= r; ++k) sum += std::exp(-k * k / (2 * sigma * sigma));
    const double center = 1.0 / sum;
    Volume impulse({15, 15, 15});
    impulse(7, 7, 7) = 1.0f;
    const Volume b = gaussian_blur(impulse, sigma);
    CHECK(b(7, 7, 7) == doctest::Approx(center * center * center).epsilon(1e-6));
    double total = 0.0;
    for (float x : b.values()) total += x;
    CHECK(std::abs(total - 1.0) < 1e-5);
    const auto taps = gaussian_kernel(sigma);
    CHECK(taps.size() == static_cast<std::size_t>(2 * r + 1));
    CHECK(taps[r] == doctest::Approx(center));
  }

  TEST_CASE("resample") {
    const Volume v = ramp({4, 5, 6});
    CHECK(resample(v, 1.0) == v);

    const Volume constant({7, 9, 5}, {0.7, 1.3, 2.0}, -0.25f);
    const Volume r = resample(constant, 1.0);
    CHECK(r.dims() == Dims{5, 12, 10});
    CHECK(r.spacing() == Spacing{1.0, 1.0, 1.0});
    for (float x : r.values()) CHECK(x == -0.25f);
    Volume back = resample(r, 0.5);
    for (float x : back.values()) CHECK(x == -0.25f);

    // Linear ramp along x, halved resolution: output i samples coordinate 2i + 0.5.
    Volume line({2, 2, 16}, {0.5, 0.5, 0.5});
    for (int z = 0; z < 2; ++z)
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 16; ++x) line(z, y, x) = 3.0f * x + 1.0f;
    const Volume half = resample(line, 1.0);
    REQUIRE(half.dims() == Dims{1, 1, 8});
    for (int i = 0; i < 8; ++i) CHECK(std::abs(half(0, 0, i) - (3.0 * (2 * i + 0.5) + 1.0)) < 1e-5);

    Mask m({2, 2, 2}, {2.0, 2.0, 2.0}, 1);
    const Mask up = resample(m, 1.0);
    CHECK(up.dims() == Dims{4, 4, 4});
    CHECK(count(up) == 64);
  }

  TEST_CASE("crop") {
    const Volume v = ramp({4, 4, 4}, {1.0, 2.0, 3.0});
    CHECK(crop<float>(v, {0, 0, 0}, v.dims()) == v);
    const Volume c = crop<float>(v, {1, 2, 1}, {2, 2, 2});
    CHECK(c.spacing() == v.spacing());
    CHECK(c(0, 0, 0) == v(1, 2, 1));
    CHECK(c(0, 0, 1) == v(1, 2, 2));
    CHECK(c(0, 1, 0) == v(1, 3, 1));
    CHECK(c(1, 1, 1) == v(2, 3, 2));
    const Volume edge = crop<float>(v, {-1, 3, 3}, {2, 2, 2});
    CHECK(edge(0, 0, 0) == 0.0f);
    CHECK(edge(1, 0, 0) == v(0, 3, 3));
    CHECK(edge(1, 1, 1) == 0.0f);
    CHECK_THROWS_AS(crop<float>(v, {4, 0, 0}, {2, 2, 2}), std::invalid_argument);
    CHECK_THROWS_AS(crop<float>(v, {0, 0, 0}, {0, 2, 2}), std::invalid_argument);
  }

  TEST_CASE("binarize and to_volume") {
    Volume v({1, 1, 3});
    v[0] = 0.49f;
    v[1] = 0.5f;
    v[2] = 0.9f;
    const Mask m = binarize(v);
    CHECK(m[0] == 0);
    CHECK(m[1] == 1);
    CHECK(to_volume(m)[2] == 1.0f);
  }
}
