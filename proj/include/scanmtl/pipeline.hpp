#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "scanmtl/data.hpp"
#include "scanmtl/model.hpp"
#include "scanmtl/png_io.hpp"

namespace mcx {

inline constexpr double kDefaultFilterThreshold = 0.5;

struct FilterResult {
  std::vector<int> positive;
  std::vector<int> negative;
  Tensor class_probs;  // M x C
};

/// Sample i is positive iff max_c class_probs(i, c) >= threshold.
FilterResult partition_by_probability(const Tensor& class_probs, double threshold);

/// Runs encoder + classification head and partitions the batch.
FilterResult filter_positives(const ModelParams& p, const ImageBatch& batch,
                              double threshold = kDefaultFilterThreshold);

struct TeacherForcingConfig {
  double p = 0.9;
  /// One toss per batch (default) or one per sample slot.
  bool per_sample = false;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const TeacherForcingConfig&, const TeacherForcingConfig&) = default;
};

/// Seeded coin owned by a training loop.
class TeacherForcing {
 public:
  explicit TeacherForcing(const TeacherForcingConfig& cfg);

  /// True with probability p (force the ground-truth positives).
  bool toss();
  const TeacherForcingConfig& config() const { return cfg_; }
  long tosses() const { return tosses_; }
  long forced() const { return forced_; }

 private:
  TeacherForcingConfig cfg_;
  std::mt19937_64 rng_;
  long tosses_ = 0;
  long forced_ = 0;
};

/// Per-batch mode: one toss picks the whole ground-truth batch or the whole
/// filtered batch. Per-sample mode: each slot of the ground-truth batch is
/// kept or replaced by the filtered batch's entry in the same slot (cycled);
/// an empty filtered batch leaves the slot forced.
std::vector<std::size_t> teacher_force_select(const std::vector<std::size_t>& gt_positive,
                                              const std::vector<std::size_t>& filtered,
                                              TeacherForcing& coin);

struct ScoredBox {
  Box box;
  double score = 0.0;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

struct KeepRule {
  double min_area = 1e-4;
  double merge_iou = 0.5;
};

/// Drops boxes with l * w < min_area or no extent inside the unit square,
/// then greedily merges survivors with IoU >= merge_iou: candidates are
/// visited by descending score, then by ascending distance to their anchor's
/// reference box, then by anchor index; a candidate is kept unless it
/// overlaps an already kept box. `scores` may be empty (all scores 1).
std::vector<ScoredBox> postprocess_boxes(const Tensor& raw, const std::vector<Box>& anchors,
                                         const KeepRule& rule = {},
                                         const std::vector<double>& scores = {});

struct Diagnosis {
  std::string id;
  std::vector<double> class_probs;
  bool positive = false;
  std::vector<ScoredBox> boxes;
  /// Per-pixel probabilities, present only for positives.
  std::optional<Image> mask;

  friend bool operator==(const Diagnosis&, const Diagnosis&) = default;
};

struct InferenceOptions {
  double threshold = kDefaultFilterThreshold;
  KeepRule keep;
};

/// Encodes the batch once and feeds the cached features to the filter and,
/// for positives only, to the detection and segmentation heads. Each box is
/// scored by the sample's max class probability times its best IoU with the
/// bounding box of a connected region of the predicted mask (pixels >= 0.5),
/// so boxes the two heads agree on rank first.
std::vector<Diagnosis> infer_pipeline(const ModelParams& p, const ImageBatch& batch,
                                      const InferenceOptions& options = {},
                                      EncoderCounter* counter = nullptr);

/// Same contract, but re-encodes the positive subset for the second stage.
std::vector<Diagnosis> infer_pipeline_recompute(const ModelParams& p, const ImageBatch& batch,
                                                const InferenceOptions& options = {},
                                                EncoderCounter* counter = nullptr);

/// Runs infer_pipeline over a dataset in chunks of `batch_size`.
std::vector<Diagnosis> infer_dataset(const ModelParams& p, const Dataset& d,
                                     const InferenceOptions& options = {}, int batch_size = 64,
                                     EncoderCounter* counter = nullptr);

/// One JSON line per diagnosis (image_id, positive, class_probs, boxes with
/// scores, mask file or null); masks go to <dir>/masks/<id>.png as 8-bit
/// probabilities.
void write_diagnoses(const std::vector<Diagnosis>& diags, const std::filesystem::path& dir);

/// RGB overlay: the image in gray, mask pixels (p >= 0.5) blended toward red,
/// predicted boxes outlined in green.
png::Raster render_overlay(const Image& image, const Diagnosis& diag);

}  // namespace mcx
