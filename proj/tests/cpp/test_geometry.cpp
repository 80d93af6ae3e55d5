#include "regionbag/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "regionbag/rng.hpp"

using namespace regionbag;

namespace {

// pixel-counting oracle on unit cells; exact for integer-coordinate boxes
double pixel_count_intersection(const Box& a, const Box& b, int span) {
  double count = 0;
  for (int y = 0; y < span; ++y) {
    for (int x = 0; x < span; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const bool in_a = cx > a.x1 && cx < a.x2 && cy > a.y1 && cy < a.y2;
      const bool in_b = cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2;
      if (in_a && in_b) count += 1.0;
    }
  }
  return count;
}

Box random_int_box(Rng& rng, int span) {
  while (true) {
    const int x1 = int(rng.uniform_int(span));
    const int x2 = int(rng.uniform_int(span)) + 1;
    const int y1 = int(rng.uniform_int(span));
    const int y2 = int(rng.uniform_int(span)) + 1;
    Box b{double(std::min(x1, x2 - 1)), double(std::min(y1, y2 - 1)),
          double(std::max(x1 + 1, x2)), double(std::max(y1 + 1, y2))};
    if (b.valid()) return b;
  }
}

// independent greedy suppression: repeatedly pick the max-score unsuppressed box
std::vector<std::pair<Box, double>> nms_oracle(std::vector<std::pair<Box, double>> boxes,
                                               double thresh) {
  std::vector<bool> used(boxes.size(), false);
  std::vector<std::pair<Box, double>> kept;
  while (true) {
    int best = -1;
    for (size_t i = 0; i < boxes.size(); ++i) {
      if (used[i]) continue;
      if (best < 0 || boxes[i].second > boxes[best].second) best = int(i);
    }
    if (best < 0) break;
    used[best] = true;
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(boxes[best].first, k.first) > thresh) suppressed = true;
    if (!suppressed) kept.push_back(boxes[best]);
  }
  return kept;
}

}  // namespace

TEST_CASE("iou basic cases") {
  const Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(Box{0, 0, 1, 1}, Box{2, 2, 3, 3}) == doctest::Approx(0.0));
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 0, 3, 2}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("iof basic cases") {
  const Box a{0, 0, 10, 10};
  CHECK(iof(a, a) == doctest::Approx(1.0));
  CHECK(iof(Box{2, 2, 4, 4}, Box{0, 0, 10, 10}) == doctest::Approx(1.0));  // containment
  CHECK(iof(Box{0, 0, 10, 10}, Box{5, 0, 15, 10}) == doctest::Approx(0.5));
}

TEST_CASE("iou and iof agree with the pixel-counting oracle") {
  Rng rng(7);
  const int span = 32;
  for (int trial = 0; trial < 1000; ++trial) {
    const Box a = random_int_box(rng, span);
    const Box b = random_int_box(rng, span);
    const double inter = pixel_count_intersection(a, b, span + 2);
    const double uni = a.area() + b.area() - inter;
    CHECK(iou(a, b) == doctest::Approx(inter / uni).epsilon(1e-6));
    CHECK(iof(a, b) == doctest::Approx(inter / a.area()).epsilon(1e-6));
  }
}

TEST_CASE("iou symmetry") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Box a = random_int_box(rng, 20);
    const Box b = random_int_box(rng, 20);
    CHECK(iou(a, b) == doctest::Approx(iou(b, a)));
  }
}

TEST_CASE("nms examples") {
  const Box b{0, 0, 10, 10};
  SUBCASE("single box kept") {
    auto kept = nms({{b, 0.5}}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].first == b);
  }
  SUBCASE("identical boxes: higher score wins") {
    auto kept = nms({{b, 0.9}, {b, 0.8}}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].second == doctest::Approx(0.9));
  }
  SUBCASE("near-duplicate suppressed, distant kept") {
    const Box a{0, 0, 10, 10};
    const Box bb{1, 1, 11, 11};
    const Box c{20, 20, 30, 30};
    CHECK(iou(a, bb) == doctest::Approx(81.0 / 119.0));
    auto kept = nms({{a, 0.9}, {bb, 0.8}, {c, 0.7}}, 0.1);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].first == a);
    CHECK(kept[1].first == c);
  }
  SUBCASE("empty input") { CHECK(nms({}, 0.5).empty()); }
}

TEST_CASE("nms matches independent greedy oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::pair<Box, double>> boxes;
    const int n = int(rng.uniform_int(20)) + 1;
    for (int i = 0; i < n; ++i)
      boxes.emplace_back(random_int_box(rng, 16), rng.uniform());
    const double thresh = rng.uniform(0.05, 0.7);
    const auto got = nms(boxes, thresh);
    const auto want = nms_oracle(boxes, thresh);
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].first == want[i].first);
      CHECK(got[i].second == want[i].second);
    }
    for (size_t i = 0; i < got.size(); ++i)
      for (size_t j = i + 1; j < got.size(); ++j)
        CHECK(iou(got[i].first, got[j].first) <= thresh);
  }
}

TEST_CASE("enclosing_box") {
  const Box a{0, 0, 1, 1};
  const Box b{2, 2, 3, 3};
  CHECK(enclosing_box({a}) == a);
  CHECK(enclosing_box({a, b}) == Box{0, 0, 3, 3});
  CHECK(enclosing_box({b, b, b}) == b);
  CHECK_THROWS_AS(enclosing_box({}), std::invalid_argument);

  SUBCASE("idempotent and order-invariant") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Box> boxes;
      const int n = 1 + int(rng.uniform_int(6));
      for (int i = 0; i < n; ++i) boxes.push_back(random_int_box(rng, 30));
      const Box e = enclosing_box(boxes);
      CHECK(enclosing_box({e}) == e);
      std::vector<Box> shuffled = boxes;
      rng.shuffle(shuffled);
      CHECK(enclosing_box(shuffled) == e);
      boxes.push_back(e);
      CHECK(enclosing_box(boxes) == e);
    }
  }
}

TEST_CASE("out_of_image_fraction") {
  const ImageExtent ext{100, 100};
  CHECK(out_of_image_fraction(Box{10, 10, 20, 20}, ext) == doctest::Approx(0.0));
  CHECK(out_of_image_fraction(Box{-30, -30, -10, -10}, ext) == doctest::Approx(1.0));
  CHECK(out_of_image_fraction(Box{-5, 0, 5, 10}, ext) == doctest::Approx(0.5));
}
