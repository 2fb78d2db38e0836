#include "scanmtl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "scanmtl/errors.hpp"

namespace mcx {
namespace {

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw std::invalid_argument(std::string(what) + " contains NaN or Inf");
}

// Shared by the classification and segmentation losses: both are a sum of
// per-element NLL terms within a sample, averaged over samples.
double bce_mean_over_samples(const Tensor& y, const Tensor& y_hat, Tensor* grad, const char* what) {
  require_same_shape(y, y_hat, what);
  require_finite(y, what);
  require_finite(y_hat, what);
  if (y.rank() < 1) throw std::invalid_argument(std::string(what) + ": need a batch axis");
  const int m = y.dim(0);
  if (grad) *grad = Tensor(y.shape());
  if (m == 0) return 0.0;
  const double scale = 1.0 / m;
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double t = y[i];
    const double raw = y_hat[i];
    const double p = std::clamp(raw, kProbEpsilon, 1.0 - kProbEpsilon);
    total -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    if (grad && raw > kProbEpsilon && raw < 1.0 - kProbEpsilon) {
      (*grad)[i] = scale * (-t / p + (1.0 - t) / (1.0 - p));
    }
  }
  return total * scale;
}

}  // namespace

double loss_cls(const Tensor& y, const Tensor& y_hat, Tensor* grad) {
  if (y.rank() != 2) throw std::invalid_argument("loss_cls: expected M x C labels");
  return bce_mean_over_samples(y, y_hat, grad, "loss_cls");
}

double loss_seg(const Tensor& y, const Tensor& y_hat, Tensor* grad) {
  if (y.rank() != 3) throw std::invalid_argument("loss_seg: expected M x L x W masks");
  return bce_mean_over_samples(y, y_hat, grad, "loss_seg");
}

Tensor bce_logit_grad(const Tensor& y, const Tensor& y_hat) {
  require_same_shape(y, y_hat, "bce_logit_grad");
  require_finite(y_hat, "bce_logit_grad");
  if (y.rank() < 1) throw std::invalid_argument("bce_logit_grad: need a batch axis");
  Tensor g(y.shape());
  if (y.dim(0) == 0) return g;
  const double scale = 1.0 / y.dim(0);
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = scale * (y_hat[i] - y[i]);
  return g;
}

std::vector<std::pair<int, int>> MatchMatrix::pairs() const {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < anchors; ++i) {
    for (int j = 0; j < boxes; ++j) {
      if (at(i, j)) out.emplace_back(i, j);
    }
  }
  return out;
}

bool MatchMatrix::valid() const {
  for (int i = 0; i < anchors; ++i) {
    int n = 0;
    for (int j = 0; j < boxes; ++j) n += at(i, j) ? 1 : 0;
    if (n > 1) return false;
  }
  for (int j = 0; j < boxes; ++j) {
    int n = 0;
    for (int i = 0; i < anchors; ++i) n += at(i, j) ? 1 : 0;
    if (n > 1) return false;
  }
  return true;
}

MatchMatrix match_anchors(const std::vector<Box>& gt, const std::vector<Box>& anchors,
                          double iou_threshold) {
  const int k = static_cast<int>(anchors.size());
  const int b = static_cast<int>(gt.size());
  MatchMatrix out(k, b);
  if (k == 0 || b == 0) return out;

  std::vector<double> overlap(static_cast<std::size_t>(k) * b);
  std::vector<double> best(static_cast<std::size_t>(b), 0.0);
  for (int j = 0; j < b; ++j) {
    for (int i = 0; i < k; ++i) {
      const double v = iou(gt[static_cast<std::size_t>(j)], anchors[static_cast<std::size_t>(i)]);
      overlap[static_cast<std::size_t>(i) * b + j] = v;
      best[static_cast<std::size_t>(j)] = std::max(best[static_cast<std::size_t>(j)], v);
    }
  }
  std::vector<int> order(static_cast<std::size_t>(b));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
    return best[static_cast<std::size_t>(a)] > best[static_cast<std::size_t>(c)];
  });

  std::vector<std::uint8_t> claimed(static_cast<std::size_t>(k), 0);
  for (int j : order) {
    int pick = -1;
    double pick_iou = 0.0;
    for (int i = 0; i < k; ++i) {
      if (claimed[static_cast<std::size_t>(i)]) continue;
      const double v = overlap[static_cast<std::size_t>(i) * b + j];
      if (v > pick_iou) {
        pick = i;
        pick_iou = v;
      }
    }
    if (pick >= 0 && pick_iou >= iou_threshold) {
      claimed[static_cast<std::size_t>(pick)] = 1;
      out.at(pick, j) = 1;
    }
  }
  return out;
}

double loss_det(const std::vector<std::vector<Box>>& gt, const Tensor& pred,
                const std::vector<MatchMatrix>& matches, Tensor* grad) {
  if (pred.rank() != 3 || pred.dim(2) != 4) {
    throw std::invalid_argument("loss_det: predictions must be M x K x 4, got " + pred.shape_string());
  }
  const int m = pred.dim(0);
  const int k = pred.dim(1);
  if (static_cast<int>(gt.size()) != m || static_cast<int>(matches.size()) != m) {
    throw std::invalid_argument("loss_det: batch size mismatch between gt, pred and matches");
  }
  require_finite(pred, "loss_det");
  if (grad) *grad = Tensor(pred.shape());
  if (m == 0) return 0.0;
  const double scale = 1.0 / m;
  double total = 0.0;
  for (int s = 0; s < m; ++s) {
    const MatchMatrix& mm = matches[static_cast<std::size_t>(s)];
    const auto& boxes = gt[static_cast<std::size_t>(s)];
    if (mm.anchors != k || mm.boxes != static_cast<int>(boxes.size())) {
      throw std::invalid_argument("loss_det: match matrix shape mismatch for sample " +
                                  std::to_string(s));
    }
    for (auto [i, j] : mm.pairs()) {
      const Box& t = boxes[static_cast<std::size_t>(j)];
      const double target[4] = {t.c_x, t.c_y, t.l, t.w};
      for (int c = 0; c < 4; ++c) {
        const double diff = pred.at(s, i, c) - target[c];
        total += diff * diff;
        if (grad) grad->at(s, i, c) += 2.0 * diff * scale;
      }
    }
  }
  return total * scale;
}

double loss_total(double cls, double det, double seg, const LossWeights& w) {
  for (double v : {cls, det, seg, w.cls, w.det, w.seg}) {
    if (!std::isfinite(v)) throw DivergenceError("loss_total: non-finite input");
  }
  return w.cls * cls + w.det * det + w.seg * seg;
}

}  // namespace mcx
