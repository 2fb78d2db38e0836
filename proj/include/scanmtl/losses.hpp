#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "scanmtl/data.hpp"
#include "scanmtl/tensor.hpp"

namespace mcx {

/// Probabilities are clamped to [eps, 1 - eps] before taking logs.
inline constexpr double kProbEpsilon = 1e-7;
inline constexpr double kDefaultMatchIou = 0.3;

/// Binary cross entropy (negative log-likelihood), summed over the C classes
/// of a sample and averaged over the M samples. y, y_hat: M x C.
/// When `grad` is non-null it receives dLoss/dy_hat (zero where clamped).
double loss_cls(const Tensor& y, const Tensor& y_hat, Tensor* grad = nullptr);

/// Per-pixel binary cross entropy summed over L x W, averaged over M.
double loss_seg(const Tensor& y, const Tensor& y_hat, Tensor* grad = nullptr);

/// Gradient of loss_cls or loss_seg with respect to the logits behind a
/// sigmoid output y_hat: (y_hat - y) / M. It stays informative where the
/// probability-space gradient vanishes, i.e. for confidently wrong outputs.
Tensor bce_logit_grad(const Tensor& y, const Tensor& y_hat);

/// K x B assignment of anchors to ground-truth boxes. Every row and every
/// column holds at most one 1.
struct MatchMatrix {
  int anchors = 0;
  int boxes = 0;
  std::vector<std::uint8_t> cells;

  MatchMatrix() = default;
  MatchMatrix(int k, int b) : anchors(k), boxes(b), cells(static_cast<std::size_t>(k) * b, 0) {}

  std::uint8_t& at(int anchor, int box) { return cells[static_cast<std::size_t>(anchor) * boxes + box]; }
  std::uint8_t at(int anchor, int box) const {
    return cells[static_cast<std::size_t>(anchor) * boxes + box];
  }
  /// (anchor, box) index pairs, ascending by anchor.
  std::vector<std::pair<int, int>> pairs() const;
  /// Both at-most-one invariants hold.
  bool valid() const;

  friend bool operator==(const MatchMatrix&, const MatchMatrix&) = default;
};

/// Greedy max-IoU matching. Ground-truth boxes are visited in descending
/// order of their best IoU over all anchors (ties: lower box index first);
/// each claims its highest-IoU unclaimed anchor (ties: lower anchor index)
/// provided that IoU is positive and >= iou_threshold.
MatchMatrix match_anchors(const std::vector<Box>& gt, const std::vector<Box>& anchors,
                          double iou_threshold = kDefaultMatchIou);

/// Sum over matched (anchor i, box j) of ||y_j - y_hat_i||^2 on
/// (c_x, c_y, l, w), averaged over the M samples. pred: M x K x 4.
double loss_det(const std::vector<std::vector<Box>>& gt, const Tensor& pred,
                const std::vector<MatchMatrix>& matches, Tensor* grad = nullptr);

struct LossWeights {
  double cls = 1.0;
  double det = 1.0;
  double seg = 1.0;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

/// Weighted sum of the three task losses; throws DivergenceError when any
/// input is non-finite.
double loss_total(double cls, double det, double seg, const LossWeights& weights = {});

}  // namespace mcx
