#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "scanmtl/data.hpp"
#include "scanmtl/png_io.hpp"
#include "oracles.hpp"

using namespace mcx;

namespace {

Mask fill_rect(Mask m, int r0, int r1, int c0, int c1) {
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) m.at(r, c) = 1;
  return m;
}

bool same_box(const Box& a, const Box& b, double tol = 1e-12) {
  return std::abs(a.c_x - b.c_x) < tol && std::abs(a.c_y - b.c_y) < tol && std::abs(a.l - b.l) < tol &&
         std::abs(a.w - b.w) < tol;
}

}  // namespace

TEST_CASE("box geometry helpers") {
  const Box b{0.5, 0.5, 0.2, 0.4};
  CHECK(iou(b, b) == doctest::Approx(1.0));
  CHECK(iou(b, Box{0.1, 0.1, 0.05, 0.05}) == 0.0);
  CHECK(iou(Box{0.25, 0.5, 1.0, 0.5}, Box{0.5, 0.5, 1.0, 0.5}) == doctest::Approx(1.0 / 3.0));
  CHECK(is_valid_box(b));
  CHECK_FALSE(is_valid_box(Box{0.5, 0.5, 0.0, 0.2}));
  CHECK_FALSE(is_valid_box(Box{std::nan(""), 0.5, 0.1, 0.1}));
  CHECK_FALSE(is_valid_box(Box{2.0, 2.0, 0.1, 0.1}));
}

TEST_CASE("box_from_mask on a filled rectangle") {
  const Mask m = fill_rect(Mask(100, 100, 0), 20, 39, 10, 19);
  const auto boxes = box_from_mask(m);
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0].c_x == doctest::Approx(0.145).epsilon(1e-12));
  CHECK(boxes[0].c_y == doctest::Approx(0.295).epsilon(1e-12));
  CHECK(boxes[0].w == doctest::Approx(0.10).epsilon(1e-12));
  CHECK(boxes[0].l == doctest::Approx(0.20).epsilon(1e-12));
  const auto ref = oracle::components_to_boxes(m);
  REQUIRE(ref.size() == 1);
  CHECK(same_box(ref[0], boxes[0]));
  CHECK(box_from_mask(Mask(10, 10, 0)).empty());
}

TEST_CASE("box_from_mask on two disjoint blobs keeps each blob's pixels inside its own box") {
  Mask m(32, 32, 0);
  m = fill_rect(m, 2, 6, 3, 9);
  m = fill_rect(m, 20, 28, 15, 17);
  m.at(20, 18) = 1;  // non-rectangular second blob
  const auto boxes = box_from_mask(m);
  const auto ref = oracle::components_to_boxes(m);
  REQUIRE(boxes.size() == 2);
  REQUIRE(ref.size() == 2);
  for (int i = 0; i < 2; ++i) CHECK(same_box(boxes[i], ref[i]));
  const PixelBounds a = pixel_bounds(boxes[0], 32, 32);
  const PixelBounds b = pixel_bounds(boxes[1], 32, 32);
  CHECK(a.row_min == 2);
  CHECK(a.row_max == 6);
  CHECK(a.col_min == 3);
  CHECK(a.col_max == 9);
  CHECK(b.row_min == 20);
  CHECK(b.row_max == 28);
  CHECK(b.col_min == 15);
  CHECK(b.col_max == 18);
}

TEST_CASE("box_from_mask agrees with the union-find oracle on random masks") {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 200; ++t) {
    const Mask m = fixture::random_blob_mask(rng, 12 + t % 20);
    const auto got = box_from_mask(m);
    const auto ref = oracle::components_to_boxes(m);
    REQUIRE(got.size() == ref.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(same_box(got[i], ref[i]));
  }
}

TEST_CASE("rasterize then box_from_mask is the identity on separated rectangles") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    // Rectangles in disjoint vertical bands separated by at least one column.
    std::vector<Box> boxes;
    int col = 0;
    while (col < 36) {
      const int w = 1 + static_cast<int>(rng() % 5);
      const int r0 = static_cast<int>(rng() % 30);
      const int h = 1 + static_cast<int>(rng() % (40 - r0 - 1));
      boxes.push_back(box_from_pixel_bounds({r0, r0 + h - 1, col, col + w - 1}, 40, 40));
      col += w + 1 + static_cast<int>(rng() % 3);
    }
    const auto back = box_from_mask(rasterize_boxes(boxes, 40, 40));
    REQUIRE(back.size() == boxes.size());
    // Components are ordered by first pixel, so compare as sets.
    for (const Box& b : boxes) {
      CHECK(std::any_of(back.begin(), back.end(), [&](const Box& x) { return same_box(x, b); }));
    }
  }
}

TEST_CASE("analytic IoU equals pixel IoU for grid-aligned boxes") {
  std::mt19937_64 rng(3);
  const int side = 24;
  for (int t = 0; t < 100; ++t) {
    auto rand_bounds = [&] {
      int r0 = rng() % side, r1 = rng() % side, c0 = rng() % side, c1 = rng() % side;
      return PixelBounds{std::min(r0, r1), std::max(r0, r1), std::min(c0, c1), std::max(c0, c1)};
    };
    const Box a = box_from_pixel_bounds(rand_bounds(), side, side);
    const Box b = box_from_pixel_bounds(rand_bounds(), side, side);
    const Mask ma = rasterize_boxes({a}, side, side), mb = rasterize_boxes({b}, side, side);
    int inter = 0, uni = 0;
    for (std::size_t p = 0; p < ma.size(); ++p) {
      inter += ma.values[p] && mb.values[p];
      uni += ma.values[p] || mb.values[p];
    }
    CHECK(std::abs(iou(a, b) - static_cast<double>(inter) / uni) <= 2.0 / (side * side));
  }
}

TEST_CASE("generate_synthetic honors positive_fraction extremes") {
  SyntheticConfig c = fixture::small_synthetic(40, 5, 32);
  c.positive_fraction = 0.0;
  for (const Sample& s : generate_synthetic(c).samples) {
    CHECK((*s.labels.cls)[0] == 0);
    CHECK(s.labels.boxes->empty());
    CHECK(std::none_of(s.labels.mask->values.begin(), s.labels.mask->values.end(), [](auto v) { return v; }));
  }
  c.positive_fraction = 1.0;
  c.blob_count_min = c.blob_count_max = 1;
  for (const Sample& s : generate_synthetic(c).samples) {
    CHECK(s.labels.boxes->size() == 1);
    CHECK(std::count(s.labels.mask->values.begin(), s.labels.mask->values.end(), 1) > 0);
    CHECK((*s.labels.cls)[0] == 1);
  }
}

TEST_CASE("generate_synthetic positive count lies in the 3-sigma binomial band") {
  SyntheticConfig c;
  c.num_samples = 1000;
  c.positive_fraction = 0.3;
  c.rows = c.cols = 16;
  c.blob_radius_min = 0.15;
  c.blob_radius_max = 0.2;
  c.seed = 11;
  const Dataset d = generate_synthetic(c);
  const auto pos = positive_indices(d).size();
  // 300 +/- 3 * sqrt(1000 * 0.3 * 0.7) = 300 +/- 43.47
  CHECK(pos >= 257);
  CHECK(pos <= 343);
}

TEST_CASE("generate_synthetic is deterministic and self-consistent") {
  const SyntheticConfig c = fixture::small_synthetic(30, 9, 32);
  const Dataset a = generate_synthetic(c), b = generate_synthetic(c);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.samples[i].image == b.samples[i].image);
    CHECK(a.samples[i].labels == b.samples[i].labels);
  }
  SyntheticConfig inv = c;
  inv.style = SyntheticStyle::inverted;
  const Dataset d = generate_synthetic(inv);
  for (const Dataset* ds : {&a, &d}) {
    for (const Sample& s : ds->samples) {
      CHECK(labels_consistent(s.labels));
      const Mask boxes = rasterize_boxes(*s.labels.boxes, ds->rows, ds->cols);
      for (std::size_t p = 0; p < boxes.size(); ++p) {
        if (s.labels.mask->values[p]) CHECK(boxes.values[p] == 1);
      }
      // One component and one tight box per blob.
      const auto fitted = box_from_mask(*s.labels.mask);
      CHECK(fitted.size() == s.labels.boxes->size());
      for (double v : s.image.values) CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("generate_synthetic rejects bad configs") {
  SyntheticConfig c;
  c.num_samples = 0;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
  c = SyntheticConfig{};
  c.rows = 4;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
  c = SyntheticConfig{};
  c.positive_fraction = 1.5;
  CHECK_THROWS_AS(generate_synthetic(c), ConfigError);
}

TEST_CASE("derive_classification_labels") {
  Dataset d;
  d.name = "src";
  d.rows = d.cols = 8;
  d.coverage = {false, true, false};
  std::size_t expected = 0;
  for (int i = 0; i < 10; ++i) {
    Sample s;
    s.id = "x" + std::to_string(i);
    s.image = Image(8, 8, 0.1 * (i % 3));
    s.labels.boxes = std::vector<Box>{};
    if (i % 3 == 0) {
      s.labels.boxes->push_back(Box{0.5, 0.5, 0.2, 0.2});
      if (i == 6) s.labels.boxes->push_back(Box{0.2, 0.2, 0.1, 0.1});
      ++expected;
    }
    d.samples.push_back(s);
  }
  const Dataset c = derive_classification_labels(d);
  CHECK(c.coverage == TaskSet{true, false, false});
  REQUIRE(c.size() == d.size());
  std::size_t count = 0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(c.samples[i].id == d.samples[i].id);
    CHECK(c.samples[i].image == d.samples[i].image);
    CHECK_FALSE(c.samples[i].labels.boxes.has_value());
    count += (*c.samples[i].labels.cls)[0];
  }
  CHECK(count == expected);
  CHECK((*c.samples[6].labels.cls)[0] == 1);

  Dataset seg;
  seg.rows = seg.cols = 4;
  seg.coverage = {false, false, true};
  Sample s;
  s.id = "m";
  s.image = Image(4, 4);
  s.labels.mask = Mask(4, 4, 0);
  seg.samples.push_back(s);
  CHECK((*derive_classification_labels(seg).samples[0].labels.cls)[0] == 0);

  Dataset none;
  none.coverage = {true, false, false};
  CHECK_THROWS_AS(derive_classification_labels(none), DataError);
}

TEST_CASE("restrict_tasks and positivity") {
  const Dataset d = generate_synthetic(fixture::small_synthetic(12, 4, 16));
  const Dataset r = restrict_tasks(d, {true, false, true});
  CHECK(r.coverage == TaskSet{true, false, true});
  for (const Sample& s : r.samples) CHECK_FALSE(s.labels.boxes.has_value());
  CHECK(positive_indices(r) == positive_indices(d));
  CHECK(TaskSet::parse("cls,seg") == TaskSet{true, false, true});
  CHECK(TaskSet{true, true, false}.to_string() == "cls,det");
  CHECK_THROWS_AS(TaskSet::parse("cls,foo"), ConfigError);
}

TEST_CASE("save and load round trip") {
  fixture::TempDir tmp("data_rt");
  Dataset d = generate_synthetic(fixture::small_synthetic(10, 21, 32));
  save_dataset(d, tmp.path() / "set");
  const Dataset back = load_dataset(tmp.path() / "set");
  CHECK(back.coverage == TaskSet::all());
  REQUIRE(back.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(back.samples[i].id == d.samples[i].id);
    CHECK(back.samples[i].image == d.samples[i].image);
    CHECK(back.samples[i].labels == d.samples[i].labels);
  }
}

TEST_CASE("load_dataset coverage inference and errors") {
  fixture::TempDir tmp("data_err");
  Dataset d = generate_synthetic(fixture::small_synthetic(6, 3, 16));
  const auto root = tmp.path() / "set";
  save_dataset(restrict_tasks(d, {false, true, false}), root);
  const Dataset det = load_dataset(root);
  CHECK(det.coverage == TaskSet{true, true, false});
  for (std::size_t i = 0; i < det.size(); ++i) {
    CHECK(*det.samples[i].labels.boxes == *d.samples[i].labels.boxes);
    CHECK((*det.samples[i].labels.cls)[0] == (*d.samples[i].labels.cls)[0]);
  }

  CHECK_THROWS_AS(load_dataset(tmp.path() / "missing"), DataError);

  const auto bad = tmp.path() / "bad";
  save_dataset(d, bad);
  {
    std::ofstream out(bad / "boxes.csv", std::ios::app);
    out << d.samples[0].id << ",1.5,0.5,0.1,0.1\n";
  }
  CHECK_THROWS_AS(load_dataset(bad), DataError);

  const auto gray = tmp.path() / "gray";
  save_dataset(d, gray);
  png::Raster r{16, 16, 1, std::vector<std::uint8_t>(256, 128)};
  png::write(gray / "masks" / (d.samples[0].id + ".png"), r);
  CHECK_THROWS_AS(load_dataset(gray), DataError);

  // Resizing on load.
  LoadOptions opt;
  opt.image_size = std::make_pair(8, 8);
  const Dataset small = load_dataset(root, opt);
  CHECK(small.samples[0].image.rows == 8);
}

TEST_CASE("make_batch packs images") {
  const Dataset d = generate_synthetic(fixture::small_synthetic(5, 8, 16));
  const ImageBatch b = make_batch(d, {4, 1});
  CHECK(b.pixels.shape() == std::vector<int>{2, 16, 16});
  CHECK(b.ids == std::vector<std::string>{d.samples[4].id, d.samples[1].id});
  CHECK(b.pixels.at(1, 3, 5) == d.samples[1].image.at(3, 5));
}
