#include "scanmtl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scanmtl/errors.hpp"

namespace mcx {

double accuracy(const Tensor& y, const Tensor& y_hat) {
  require_same_shape(y, y_hat, "accuracy");
  if (y.size() == 0) throw std::invalid_argument("accuracy: empty input");
  std::size_t right = 0;
  for (std::size_t i = 0; i < y.size(); ++i) right += (y[i] > 0.5) == (y_hat[i] > 0.5) ? 1 : 0;
  return static_cast<double>(right) / static_cast<double>(y.size());
}

double f1_score(const Tensor& y, const Tensor& y_hat) {
  require_same_shape(y, y_hat, "f1_score");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool t = y[i] > 0.5;
    const bool p = y_hat[i] > 0.5;
    tp += t && p;
    fp += !t && p;
    fn += t && !p;
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2 * tp / (2 * tp + fp + fn);
}

double dice(const Mask& a, const Mask& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw std::invalid_argument("dice: mask sizes differ");
  std::size_t inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const bool x = a.values[i] != 0;
    const bool y = b.values[i] != 0;
    inter += x && y;
    sa += x;
    sb += y;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

Mask binarize(const Image& probs, double threshold) {
  Mask m(probs.rows, probs.cols);
  for (std::size_t i = 0; i < probs.values.size(); ++i) m.values[i] = probs.values[i] >= threshold;
  return m;
}

Tensor binarize(const Tensor& probs, double threshold) {
  Tensor out(probs.shape());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1.0 : 0.0;
  return out;
}

double mean_average_precision(const std::vector<std::vector<Box>>& gt,
                              const std::vector<std::vector<ScoredBox>>& pred, double iou_threshold) {
  if (gt.size() != pred.size()) throw std::invalid_argument("mAP: gt and predictions cover different images");
  std::size_t n_gt = 0;
  for (const auto& g : gt) n_gt += g.size();

  struct Ref {
    std::size_t image, index;
    double score;
  };
  std::vector<Ref> ranked;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (std::size_t k = 0; k < pred[i].size(); ++k) ranked.push_back({i, k, pred[i][k].score});
  }
  if (n_gt == 0) return ranked.empty() ? 1.0 : 0.0;
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> taken(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) taken[i].assign(gt[i].size(), false);
  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (const Ref& r : ranked) {
    const Box& b = pred[r.image][r.index].box;
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t j = 0; j < gt[r.image].size(); ++j) {
      if (taken[r.image][j]) continue;
      const double v = iou(b, gt[r.image][j]);
      if (v >= iou_threshold && v > best_iou) {
        best = static_cast<int>(j);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[r.image][static_cast<std::size_t>(best)] = true;
      tp += 1;
    } else {
      fp += 1;
    }
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(n_gt));
  }
  // Precision envelope, then sum over recall increments.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i) + 1]);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

namespace {

double percentile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

Interval bootstrap_ci(std::size_t n, const std::function<double(const std::vector<std::size_t>&)>& statistic,
                      const BootstrapOptions& o) {
  if (n == 0) throw std::invalid_argument("bootstrap_ci: no samples");
  if (o.resamples < 1) throw ConfigError("bootstrap resamples must be >= 1");
  if (!(o.alpha > 0 && o.alpha < 1)) throw ConfigError("bootstrap alpha must lie in (0, 1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  const double point = statistic(idx);
  std::mt19937_64 rng(o.seed);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(o.resamples));
  for (int r = 0; r < o.resamples; ++r) {
    for (auto& i : idx) i = static_cast<std::size_t>(rng() % n);
    stats.push_back(statistic(idx));
  }
  std::sort(stats.begin(), stats.end());
  Interval out{percentile(stats, o.alpha / 2), percentile(stats, 1 - o.alpha / 2)};
  out.lo = std::min(out.lo, point);
  out.hi = std::max(out.hi, point);
  return out;
}

Interval bootstrap_ci(const std::vector<double>& values, const BootstrapOptions& o) {
  return bootstrap_ci(
      values.size(),
      [&](const std::vector<std::size_t>& idx) {
        double s = 0.0;
        for (std::size_t i : idx) s += values[i];
        return s / static_cast<double>(idx.size());
      },
      o);
}

EvalReport score_diagnoses(const std::vector<Diagnosis>& diags, const Dataset& d, TaskSet tasks,
                           const EvalOptions& o) {
  if (diags.size() != d.size()) throw std::invalid_argument("one diagnosis per sample expected");
  if (d.size() == 0) throw DataError("cannot evaluate an empty dataset");
  EvalReport rep;
  rep.dataset = d.name;
  rep.seed = o.bootstrap.seed;
  rep.samples = static_cast<int>(d.size());
  const std::size_t n = d.size();

  // Each metric draws from its own stream derived from the report seed.
  auto boot = [&](std::uint64_t salt) {
    BootstrapOptions b = o.bootstrap;
    b.seed = o.bootstrap.seed * 1000003ULL + salt;
    return b;
  };

  if (tasks.cls && d.coverage.cls) {
    rep.tasks.cls = true;
    const int c = d.num_classes;
    Tensor y({static_cast<int>(n), c});
    Tensor yh({static_cast<int>(n), c});
    std::vector<double> filter_ok(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& lab = *d.samples[i].labels.cls;
      for (int k = 0; k < c; ++k) {
        y.at(static_cast<int>(i), k) = lab.at(static_cast<std::size_t>(k));
        yh.at(static_cast<int>(i), k) = diags[i].class_probs.at(static_cast<std::size_t>(k)) >= o.inference.threshold;
      }
      filter_ok[i] = diags[i].positive == is_positive(d.samples[i].labels) ? 1.0 : 0.0;
    }
    auto rows = [&](const Tensor& t, const std::vector<std::size_t>& idx) {
      Tensor out({static_cast<int>(idx.size()), c});
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (int k = 0; k < c; ++k) out.at(static_cast<int>(r), k) = t.at(static_cast<int>(idx[r]), k);
      }
      return out;
    };
    const double fa = std::accumulate(filter_ok.begin(), filter_ok.end(), 0.0) / static_cast<double>(n);
    rep.filter_accuracy = MetricValue{fa, bootstrap_ci(filter_ok, boot(1))};
    rep.accuracy = MetricValue{accuracy(y, yh),
                               bootstrap_ci(n, [&](const auto& idx) { return accuracy(rows(y, idx), rows(yh, idx)); },
                                            boot(2))};
    rep.f1 = MetricValue{f1_score(y, yh),
                         bootstrap_ci(n, [&](const auto& idx) { return f1_score(rows(y, idx), rows(yh, idx)); },
                                      boot(3))};
  }

  if (tasks.seg && d.coverage.seg) {
    rep.tasks.seg = true;
    std::vector<double> per(n);
    std::vector<double> pos;
    for (std::size_t i = 0; i < n; ++i) {
      const Mask& truth = *d.samples[i].labels.mask;
      const Mask guess = diags[i].mask ? binarize(*diags[i].mask, o.mask_threshold) : Mask(truth.rows, truth.cols);
      per[i] = dice(truth, guess);
      if (is_positive(d.samples[i].labels)) pos.push_back(per[i]);
    }
    rep.dice = MetricValue{std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(n),
                           bootstrap_ci(per, boot(4))};
    if (!pos.empty()) {
      rep.dice_positive = MetricValue{std::accumulate(pos.begin(), pos.end(), 0.0) / static_cast<double>(pos.size()),
                                      bootstrap_ci(pos, boot(5))};
    }
  }

  if (tasks.det && d.coverage.det) {
    rep.tasks.det = true;
    std::vector<std::vector<Box>> gt(n);
    std::vector<std::vector<ScoredBox>> pr(n);
    for (std::size_t i = 0; i < n; ++i) {
      gt[i] = *d.samples[i].labels.boxes;
      pr[i] = diags[i].boxes;
    }
    auto stat = [&](const std::vector<std::size_t>& idx) {
      std::vector<std::vector<Box>> g;
      std::vector<std::vector<ScoredBox>> p;
      g.reserve(idx.size());
      p.reserve(idx.size());
      for (std::size_t i : idx) {
        g.push_back(gt[i]);
        p.push_back(pr[i]);
      }
      return mean_average_precision(g, p, o.map_iou);
    };
    rep.map = MetricValue{mean_average_precision(gt, pr, o.map_iou), bootstrap_ci(n, stat, boot(6))};
  }
  return rep;
}

EvalReport evaluate(const ModelParams& p, const Dataset& d, TaskSet tasks, const EvalOptions& o) {
  const auto diags = infer_dataset(p, d, o.inference, o.batch_size);
  return score_diagnoses(diags, d, tasks, o);
}

namespace {

std::vector<std::pair<std::string, const std::optional<MetricValue>*>> rows_of(const EvalReport& r) {
  return {{"filter_accuracy", &r.filter_accuracy}, {"accuracy", &r.accuracy}, {"f1", &r.f1},
          {"dice", &r.dice},       {"dice_positive", &r.dice_positive},       {"map", &r.map}};
}

}  // namespace

nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json metrics = nlohmann::json::object();
  for (const auto& [name, v] : rows_of(r)) {
    if (*v) metrics[name] = {{"value", (*v)->value}, {"ci_low", (*v)->ci.lo}, {"ci_high", (*v)->ci.hi}};
  }
  return {{"dataset", r.dataset},
          {"samples", r.samples},
          {"seed", r.seed},
          {"tasks", r.tasks.to_string()},
          {"metrics", metrics}};
}

std::string report_table(const EvalReport& r) {
  std::ostringstream out;
  out << "dataset: " << r.dataset << "  samples: " << r.samples << "  seed: " << r.seed << '\n';
  out << std::left << std::setw(18) << "metric" << std::right << std::setw(8) << "value" << "   95% CI\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& [name, v] : rows_of(r)) {
    if (!*v) continue;
    out << std::left << std::setw(18) << name << std::right << std::setw(8) << (*v)->value << "   ["
        << (*v)->ci.lo << ", " << (*v)->ci.hi << "]\n";
  }
  return out.str();
}

}  // namespace mcx
