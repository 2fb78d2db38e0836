#pragma once

// Reference implementations used only by tests. Each one is written from
// the definition with a different algorithm than the library code.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <tuple>
#include <vector>

#include "scanmtl/data.hpp"
#include "scanmtl/pipeline.hpp"
#include "scanmtl/tensor.hpp"

namespace oracle {

using mcx::Box;
using mcx::Mask;
using mcx::Tensor;

inline double clamp_prob(double p) { return std::min(std::max(p, 1e-7), 1.0 - 1e-7); }

/// Mean over rows of summed per-element BCE; rows = first axis.
inline double bce(const Tensor& y, const Tensor& y_hat) {
  const int m = y.dim(0);
  const std::size_t per = y.size() / static_cast<std::size_t>(m);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    double row = 0.0;
    for (std::size_t k = 0; k < per; ++k) {
      const double t = y[i * per + k];
      const double p = clamp_prob(y_hat[i * per + k]);
      row += -(t * std::log(p) + (1 - t) * std::log(1 - p));
    }
    total += row;
  }
  return total / m;
}

/// Exhaustive search for the one assignment that satisfies the greedy
/// matching rule stated declaratively. Returns anchor per GT (-1 = none).
inline std::vector<int> brute_force_match(const std::vector<Box>& gt, const std::vector<Box>& anchors,
                                          double threshold) {
  const int b = static_cast<int>(gt.size());
  const int k = static_cast<int>(anchors.size());
  std::vector<double> best(b, 0.0);
  for (int j = 0; j < b; ++j) {
    for (int i = 0; i < k; ++i) best[j] = std::max(best[j], mcx::iou(gt[j], anchors[i]));
  }
  // rank[j] = position of GT j in processing order.
  std::vector<int> order(b);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    return std::make_tuple(-best[x], x) < std::make_tuple(-best[y], y);
  });

  std::vector<int> f(b, -1);
  std::optional<std::vector<int>> found;
  int count = 0;
  std::function<void(int)> rec = [&](int j) {
    if (j == b) {
      // Injective?
      for (int x = 0; x < b; ++x) {
        for (int y = x + 1; y < b; ++y) {
          if (f[x] >= 0 && f[x] == f[y]) return;
        }
      }
      // Greedy consistency for every GT, given earlier GTs' claims.
      for (int pos = 0; pos < b; ++pos) {
        const int g = order[pos];
        std::vector<bool> taken(k, false);
        for (int q = 0; q < pos; ++q) {
          if (f[order[q]] >= 0) taken[f[order[q]]] = true;
        }
        int arg = -1;
        double v = 0.0;
        for (int i = 0; i < k; ++i) {
          const double o = mcx::iou(gt[g], anchors[i]);
          if (!taken[i] && o > v) {
            v = o;
            arg = i;
          }
        }
        const int expect = (arg >= 0 && v >= threshold) ? arg : -1;
        if (f[g] != expect) return;
      }
      found = f;
      ++count;
      return;
    }
    for (int a = -1; a < k; ++a) {
      f[j] = a;
      rec(j + 1);
    }
  };
  rec(0);
  return count == 1 ? *found : std::vector<int>{};
}

/// Union-find component labelling, then a min/max scan per label.
/// Boxes are returned ordered by their component's first row-major pixel.
inline std::vector<Box> components_to_boxes(const Mask& m) {
  const int n = m.rows * m.cols;
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
  auto unite = [&](int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  };
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      if (!m.at(r, c)) continue;
      if (r + 1 < m.rows && m.at(r + 1, c)) unite(r * m.cols + c, (r + 1) * m.cols + c);
      if (c + 1 < m.cols && m.at(r, c + 1)) unite(r * m.cols + c, r * m.cols + c + 1);
    }
  }
  struct Ext {
    int r0, r1, c0, c1;
  };
  std::vector<Ext> ext;
  std::vector<int> slot(n, -1);
  for (int p = 0; p < n; ++p) {
    if (!m.values[p]) continue;
    const int root = find(p);
    const int r = p / m.cols, c = p % m.cols;
    if (slot[root] < 0) {
      slot[root] = static_cast<int>(ext.size());
      ext.push_back({r, r, c, c});
    }
    Ext& e = ext[slot[root]];
    e.r0 = std::min(e.r0, r);
    e.r1 = std::max(e.r1, r);
    e.c0 = std::min(e.c0, c);
    e.c1 = std::max(e.c1, c);
  }
  std::vector<Box> out;
  for (const Ext& e : ext) {
    Box b;
    b.c_x = (e.c0 + e.c1) / (2.0 * m.cols);
    b.c_y = (e.r0 + e.r1) / (2.0 * m.rows);
    b.w = static_cast<double>(e.c1 - e.c0 + 1) / m.cols;
    b.l = static_cast<double>(e.r1 - e.r0 + 1) / m.rows;
    out.push_back(b);
  }
  return out;
}

/// AP by exhaustive search over matchings: the chosen matching is the
/// lexicographic maximum, in rank order, of (matched, IoU, -gt index); the
/// area uses, for each true positive, the best precision at or below it.
inline double brute_force_ap(const std::vector<std::vector<Box>>& gt,
                             const std::vector<std::vector<mcx::ScoredBox>>& pred, double thr) {
  std::size_t n_gt = 0;
  for (const auto& g : gt) n_gt += g.size();
  struct P {
    double score;
    std::size_t img, idx;
  };
  std::vector<P> ranked;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (std::size_t k = 0; k < pred[i].size(); ++k) ranked.push_back({pred[i][k].score, i, k});
  }
  if (n_gt == 0) return ranked.empty() ? 1.0 : 0.0;
  std::sort(ranked.begin(), ranked.end(), [](const P& a, const P& b) {
    return std::make_tuple(-a.score, a.img, a.idx) < std::make_tuple(-b.score, b.img, b.idx);
  });
  const std::size_t np = ranked.size();
  std::vector<int> choice(np, -1), best_choice;
  std::vector<std::tuple<int, double, int>> best_key;
  std::function<void(std::size_t)> rec = [&](std::size_t r) {
    if (r == np) {
      std::vector<std::tuple<int, double, int>> key;
      for (std::size_t q = 0; q < np; ++q) {
        if (choice[q] < 0) {
          key.emplace_back(0, 0.0, 0);
        } else {
          const auto& p = ranked[q];
          key.emplace_back(1, mcx::iou(pred[p.img][p.idx].box, gt[p.img][choice[q]]), -choice[q]);
        }
      }
      if (best_choice.empty() || key > best_key) {
        best_key = key;
        best_choice = choice;
      }
      return;
    }
    choice[r] = -1;
    rec(r + 1);
    const auto& p = ranked[r];
    for (std::size_t j = 0; j < gt[p.img].size(); ++j) {
      bool used = false;
      for (std::size_t q = 0; q < r; ++q) {
        if (choice[q] == static_cast<int>(j) && ranked[q].img == p.img) used = true;
      }
      if (used || mcx::iou(pred[p.img][p.idx].box, gt[p.img][j]) < thr) continue;
      choice[r] = static_cast<int>(j);
      rec(r + 1);
      choice[r] = -1;
    }
  };
  rec(0);
  if (np == 0) return 0.0;
  // Lexicographic maximisation must not sacrifice an earlier prediction.
  std::vector<double> prec(np);
  double tp = 0;
  for (std::size_t q = 0; q < np; ++q) {
    tp += best_choice[q] >= 0;
    prec[q] = tp / static_cast<double>(q + 1);
  }
  double ap = 0.0;
  for (std::size_t q = 0; q < np; ++q) {
    if (best_choice[q] < 0) continue;
    double env = 0.0;
    for (std::size_t z = q; z < np; ++z) env = std::max(env, prec[z]);
    ap += env / static_cast<double>(n_gt);
  }
  return ap;
}

}  // namespace oracle
