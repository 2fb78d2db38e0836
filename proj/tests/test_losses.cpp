#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "scanmtl/errors.hpp"
#include "scanmtl/losses.hpp"
#include "oracles.hpp"

using namespace mcx;

namespace {

Tensor tensor_of(std::vector<int> shape, std::vector<double> v) {
  Tensor t(std::move(shape));
  std::copy(v.begin(), v.end(), t.data());
  return t;
}

std::vector<Box> grid_anchors(int d) {
  std::vector<Box> a;
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) a.push_back(Box{(c + 0.5) / d, (r + 0.5) / d, 1.0 / d, 1.0 / d});
  return a;
}

Box random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return Box{u(rng), u(rng), 0.05 + 0.5 * u(rng), 0.05 + 0.5 * u(rng)};
}

}  // namespace

TEST_CASE("classification loss hand values") {
  CHECK(loss_cls(tensor_of({1, 1}, {1}), tensor_of({1, 1}, {1 - kProbEpsilon})) < 1e-6);
  CHECK(std::abs(loss_cls(tensor_of({1, 2}, {1, 0}), tensor_of({1, 2}, {0.5, 0.5})) - 1.386294) < 1e-6);
  CHECK(std::abs(loss_cls(tensor_of({1, 1}, {0}), tensor_of({1, 1}, {0.5})) - 0.693147) < 1e-6);
  // Mean over samples: a second identical row leaves the value unchanged.
  CHECK(std::abs(loss_cls(tensor_of({2, 1}, {0, 0}), tensor_of({2, 1}, {0.5, 0.5})) - 0.693147) < 1e-6);
}

TEST_CASE("segmentation loss hand values") {
  CHECK(std::abs(loss_seg(tensor_of({1, 2, 2}, {1, 0, 0, 1}), Tensor({1, 2, 2}, 0.5)) - 2.772589) < 1e-6);
  CHECK(loss_seg(tensor_of({1, 2, 2}, {1, 0, 0, 1}),
                 tensor_of({1, 2, 2}, {1 - kProbEpsilon, kProbEpsilon, kProbEpsilon, 1 - kProbEpsilon})) < 1e-6);
  CHECK(loss_seg(Tensor({2, 3, 3}, 0.0), Tensor({2, 3, 3}, kProbEpsilon)) < 1e-6);
  // Probabilities beyond the clamp count as the clamp.
  CHECK(loss_seg(Tensor({1, 2, 2}, 0.0), Tensor({1, 2, 2}, 0.0)) ==
        doctest::Approx(loss_seg(Tensor({1, 2, 2}, 0.0), Tensor({1, 2, 2}, kProbEpsilon))));
}

TEST_CASE("BCE losses agree with the scalar-loop oracle") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> m_dist(1, 4), c_dist(1, 8), s_dist(1, 8);
  for (int t = 0; t < 100; ++t) {
    const int m = m_dist(rng), c = c_dist(rng), l = s_dist(rng), w = s_dist(rng);
    Tensor y({m, c}), p({m, c}), ys({m, l, w}), ps({m, l, w});
    for (double& v : y.values()) v = u(rng) < 0.5;
    for (double& v : p.values()) v = u(rng);
    for (double& v : ys.values()) v = u(rng) < 0.5;
    for (double& v : ps.values()) v = u(rng);
    if (t % 10 == 0) p[0] = 0.0;  // exercise the clamp
    CHECK(std::abs(loss_cls(y, p) - oracle::bce(y, p)) < 1e-9);
    CHECK(std::abs(loss_seg(ys, ps) - oracle::bce(ys, ps)) < 1e-9);
    CHECK(loss_cls(y, p) >= 0.0);
    CHECK(loss_seg(ys, ps) >= 0.0);
  }
}

TEST_CASE("loss gradients with respect to predictions match finite differences") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Tensor y({3, 4}), p({3, 4});
  for (double& v : y.values()) v = u(rng) < 0.5;
  for (double& v : p.values()) v = u(rng);
  Tensor g;
  loss_cls(y, p, &g);
  for (std::size_t i = 0; i < p.size(); ++i) {
    Tensor a = p, b = p;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double num = (loss_cls(y, a) - loss_cls(y, b)) / 2e-6;
    CHECK(std::abs(num - g[i]) / std::max(std::abs(num), 1e-8) < 1e-4);
  }
  Tensor ys({2, 3, 3}), ps({2, 3, 3});
  for (double& v : ys.values()) v = u(rng) < 0.5;
  for (double& v : ps.values()) v = u(rng);
  loss_seg(ys, ps, &g);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor a = ps, b = ps;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double num = (loss_seg(ys, a) - loss_seg(ys, b)) / 2e-6;
    CHECK(std::abs(num - g[i]) / std::max(std::abs(num), 1e-8) < 1e-4);
  }

  const std::vector<std::vector<Box>> gt{{Box{0.5, 0.5, 0.2, 0.2}}, {}};
  const auto anchors = grid_anchors(2);
  std::vector<MatchMatrix> mm{match_anchors(gt[0], anchors, 0.0), match_anchors(gt[1], anchors, 0.0)};
  Tensor pred({2, 4, 4});
  for (double& v : pred.values()) v = u(rng);
  loss_det(gt, pred, mm, &g);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    Tensor a = pred, b = pred;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double num = (loss_det(gt, a, mm) - loss_det(gt, b, mm)) / 2e-6;
    CHECK(std::abs(num - g[i]) <= 1e-4 * std::max(std::abs(num), 1e-8) + 1e-9);
  }
}

TEST_CASE("logit gradient matches finite differences through a sigmoid") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  const auto sigmoid = [](const Tensor& z) {
    Tensor p(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-z[i]));
    return p;
  };
  Tensor y({3, 2, 2}), z({3, 2, 2});
  for (double& v : y.values()) v = u(rng) < 0.0;
  for (double& v : z.values()) v = u(rng);
  const Tensor g = bce_logit_grad(y, sigmoid(z));
  for (std::size_t i = 0; i < z.size(); ++i) {
    Tensor a = z, b = z;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    const double num = (loss_seg(y, sigmoid(a)) - loss_seg(y, sigmoid(b))) / 2e-6;
    CHECK(std::abs(num - g[i]) / std::max(std::abs(num), 1e-8) < 1e-5);
  }

  // Confidently wrong outputs sit past the clamp: the probability gradient
  // is gone there, the logit gradient is not.
  const Tensor truth = tensor_of({2, 1}, {1.0, 0.0});
  const Tensor wrong = tensor_of({2, 1}, {1e-12, 1.0});
  Tensor flat;
  loss_cls(truth, wrong, &flat);
  CHECK(flat[0] == 0.0);
  CHECK(flat[1] == 0.0);
  const Tensor lg = bce_logit_grad(truth, wrong);
  CHECK(lg[0] == doctest::Approx(-0.5));
  CHECK(lg[1] == doctest::Approx(0.5));
  CHECK_THROWS_AS(bce_logit_grad(Tensor({2, 1}), Tensor({1, 2})), std::invalid_argument);
}

TEST_CASE("BCE losses reject bad input") {
  CHECK_THROWS_AS(loss_cls(Tensor({2, 1}), Tensor({1, 2})), std::invalid_argument);
  CHECK_THROWS_AS(loss_cls(Tensor({1, 1}), Tensor({1, 1}, std::nan(""))), std::invalid_argument);
  CHECK_THROWS_AS(loss_seg(Tensor({1, 2, 2}), Tensor({1, 2, 3})), std::invalid_argument);
}

TEST_CASE("anchor matching examples") {
  const auto anchors = grid_anchors(2);
  const MatchMatrix self = match_anchors({anchors[3]}, anchors);
  CHECK(self.pairs() == std::vector<std::pair<int, int>>{{3, 0}});

  // Outside the unit square: no overlap with any anchor.
  const MatchMatrix none = match_anchors({Box{1.6, 1.6, 0.1, 0.1}}, anchors);
  CHECK(std::all_of(none.cells.begin(), none.cells.end(), [](auto v) { return v == 0; }));

  // Two GTs nearest to anchor 0: the better-overlapping one claims it, the
  // other falls back to its next qualifying anchor.
  const std::vector<Box> gt{Box{0.25, 0.25, 0.45, 0.45}, Box{0.45, 0.25, 0.5, 0.4}};
  const MatchMatrix mm = match_anchors(gt, anchors, 0.1);
  const auto expect = oracle::brute_force_match(gt, anchors, 0.1);
  REQUIRE(expect.size() == 2);
  CHECK(expect[0] == 0);
  for (int j = 0; j < 2; ++j) {
    for (int i = 0; i < 4; ++i) CHECK(mm.at(i, j) == (expect[j] == i));
  }
  CHECK(mm.at(0, 0) == 1);
  CHECK(mm.at(0, 1) == 0);
  CHECK(mm.at(1, 1) == 1);

  // With a high threshold the loser gets nothing.
  const MatchMatrix strict = match_anchors(gt, anchors, 0.3);
  CHECK(strict.at(0, 0) == 1);
  for (int i = 0; i < 4; ++i) CHECK(strict.at(i, 1) == 0);
  CHECK(oracle::brute_force_match(gt, anchors, 0.3) == std::vector<int>{0, -1});
}

TEST_CASE("anchor matching equals the brute-force rule on random instances") {
  std::mt19937_64 rng(77);
  for (int t = 0; t < 300; ++t) {
    const auto anchors = grid_anchors(2);
    std::vector<Box> gt;
    const int b = 1 + static_cast<int>(rng() % 3);
    for (int j = 0; j < b; ++j) gt.push_back(random_box(rng));
    const double thr = (rng() % 4) * 0.1;
    const MatchMatrix mm = match_anchors(gt, anchors, thr);
    CHECK(mm.valid());
    const auto expect = oracle::brute_force_match(gt, anchors, thr);
    REQUIRE(expect.size() == gt.size());
    for (int j = 0; j < b; ++j) {
      for (int i = 0; i < 4; ++i) CHECK(mm.at(i, j) == (expect[j] == i));
    }
  }
}

TEST_CASE("matching invariants on larger random instances") {
  std::mt19937_64 rng(78);
  const auto anchors = grid_anchors(4);
  for (int t = 0; t < 200; ++t) {
    std::vector<Box> gt;
    for (int j = 0; j < 6; ++j) gt.push_back(random_box(rng));
    const MatchMatrix mm = match_anchors(gt, anchors, 0.1);
    CHECK(mm.valid());
    for (auto [i, j] : mm.pairs()) CHECK(iou(anchors[i], gt[j]) >= 0.1);
  }
}

TEST_CASE("detection loss hand values and order invariance") {
  const auto anchors = grid_anchors(2);
  Tensor pred({1, 4, 4});
  const std::vector<std::vector<Box>> gt{{Box{0.5, 0.5, 0.2, 0.2}}};
  MatchMatrix mm(4, 1);
  mm.at(2, 0) = 1;
  for (int c = 0; c < 4; ++c) pred.at(0, 2, c) = std::vector<double>{0.5, 0.5, 0.2, 0.2}[c];
  CHECK(loss_det(gt, pred, {mm}) == 0.0);
  pred.at(0, 2, 0) = 0.6;
  CHECK(std::abs(loss_det(gt, pred, {mm}) - 0.01) < 1e-6);
  CHECK(loss_det(gt, pred, {MatchMatrix(4, 1)}) == 0.0);
  CHECK_THROWS_AS(loss_det(gt, Tensor({1, 4, 3}), {mm}), std::invalid_argument);

  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto a4 = grid_anchors(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<Box> boxes;
    for (int j = 0; j < 4; ++j) boxes.push_back(random_box(rng));
    Tensor p({1, 16, 4});
    for (double& v : p.values()) v = u(rng);
    std::vector<Box> shuffled = boxes;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const double a = loss_det({boxes}, p, {match_anchors(boxes, a4, 0.05)});
    const double b = loss_det({shuffled}, p, {match_anchors(shuffled, a4, 0.05)});
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
    CHECK(a >= 0.0);
  }
}

TEST_CASE("total loss") {
  CHECK(loss_total(0, 0, 0) == 0.0);
  CHECK(loss_total(1.0, 0.5, 0.25) == doctest::Approx(1.75));
  CHECK(loss_total(1.0, 0.5, 0.25, {1, 0, 0}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(loss_total(std::nan(""), 0, 0), DivergenceError);
  CHECK_THROWS_AS(loss_total(0, INFINITY, 0), DivergenceError);
}
