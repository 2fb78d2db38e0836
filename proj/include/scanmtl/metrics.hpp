#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scanmtl/data.hpp"
#include "scanmtl/model.hpp"
#include "scanmtl/pipeline.hpp"

namespace mcx {

/// Fraction of the M*C binary decisions that agree.
double accuracy(const Tensor& y, const Tensor& y_hat);
/// Micro F1 over all M*C decisions: 2TP / (2TP + FP + FN); 1 when there is
/// nothing to find and nothing was predicted.
double f1_score(const Tensor& y, const Tensor& y_hat);
/// 2|A and B| / (|A| + |B|); both empty -> 1.
double dice(const Mask& a, const Mask& b);
/// Pixels with probability >= threshold.
Mask binarize(const Image& probs, double threshold = 0.5);
/// Thresholded M x C probabilities.
Tensor binarize(const Tensor& probs, double threshold = 0.5);

/// Single-class AP: predictions from all images ranked by descending score
/// (ties keep image order, then box order); each claims the unmatched GT of
/// its image with the highest IoU >= iou_threshold, else counts as a false
/// positive. Area under the precision envelope (all-point interpolation).
/// With no GT at all: 1 if nothing was predicted, else 0.
double mean_average_precision(const std::vector<std::vector<Box>>& gt,
                              const std::vector<std::vector<ScoredBox>>& pred,
                              double iou_threshold = 0.5);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct BootstrapOptions {
  int resamples = 1000;
  double alpha = 0.05;
  std::uint64_t seed = 0;
};

/// Percentile bootstrap interval for an arbitrary statistic of a resampled
/// index multiset of 0..n-1. The interval is widened when needed so that it
/// contains statistic(identity).
Interval bootstrap_ci(std::size_t n, const std::function<double(const std::vector<std::size_t>&)>& statistic,
                      const BootstrapOptions& options = {});
/// Interval for the mean of per-sample values.
Interval bootstrap_ci(const std::vector<double>& values, const BootstrapOptions& options = {});

struct MetricValue {
  double value = 0.0;
  Interval ci;
};

struct EvalReport {
  std::string dataset;
  std::uint64_t seed = 0;
  int samples = 0;
  TaskSet tasks;
  /// Positive/negative partition of the filter against ground truth.
  std::optional<MetricValue> filter_accuracy;
  std::optional<MetricValue> accuracy;
  std::optional<MetricValue> f1;
  /// Mean per-image DICE over every image (empty vs empty counts as 1).
  std::optional<MetricValue> dice;
  /// Mean per-image DICE over ground-truth positive images only.
  std::optional<MetricValue> dice_positive;
  std::optional<MetricValue> map;
};

struct EvalOptions {
  InferenceOptions inference;
  BootstrapOptions bootstrap;
  double mask_threshold = 0.5;
  double map_iou = 0.5;
  int batch_size = 64;
};

/// Runs the inference pipeline over the dataset and scores every metric the
/// task set and the dataset's coverage allow.
EvalReport evaluate(const ModelParams& p, const Dataset& d, TaskSet tasks, const EvalOptions& options = {});
/// Scores precomputed diagnoses (one per sample, same order).
EvalReport score_diagnoses(const std::vector<Diagnosis>& diags, const Dataset& d, TaskSet tasks,
                           const EvalOptions& options = {});

nlohmann::json report_json(const EvalReport& r);
/// Aligned text table: one row per metric with value and interval.
std::string report_table(const EvalReport& r);

}  // namespace mcx
