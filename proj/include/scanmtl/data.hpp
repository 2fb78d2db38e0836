#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "scanmtl/errors.hpp"
#include "scanmtl/tensor.hpp"

namespace mcx {

/// Dense 2-D raster, row-major.
template <class T>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int r, int c, T fill = T{})
      : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}

  T& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return values.size(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Grayscale intensities in [0,1].
using Image = Grid<double>;
/// Binary raster, values in {0,1}.
using Mask = Grid<std::uint8_t>;

/// Axis-aligned box in normalized image coordinates.
///
/// Pixel (r, c) of an L x W image has its center at (c / W, r / L) and covers
/// half a pixel on either side, so a box fitted to columns c0..c1 has
/// c_x = (c0 + c1) / (2W) and w = (c1 - c0 + 1) / W. `l` is the vertical
/// extent (fraction of L), `w` the horizontal extent (fraction of W).
struct Box {
  double c_x = 0.0;
  double c_y = 0.0;
  double l = 0.0;
  double w = 0.0;

  double x_min() const { return c_x - w / 2.0; }
  double x_max() const { return c_x + w / 2.0; }
  double y_min() const { return c_y - l / 2.0; }
  double y_max() const { return c_y + l / 2.0; }
  double area() const { return l * w; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Finite, non-negative, and non-empty once clipped to the unit square.
bool is_valid_box(const Box& b);
/// Intersection over union of two boxes; 0 when the union is empty.
double iou(const Box& a, const Box& b);

/// Inclusive pixel extents covered by a box on an rows x cols grid.
struct PixelBounds {
  int row_min, row_max, col_min, col_max;
  bool empty() const { return row_min > row_max || col_min > col_max; }
};
PixelBounds pixel_bounds(const Box& b, int rows, int cols);
/// The tight box around an inclusive pixel rectangle.
Box box_from_pixel_bounds(const PixelBounds& p, int rows, int cols);

/// Fills every box as a solid rectangle.
Mask rasterize_boxes(const std::vector<Box>& boxes, int rows, int cols);

/// One tight box per 4-connected component of the mask, ordered by each
/// component's first pixel in row-major scan order. Empty mask -> no boxes.
std::vector<Box> box_from_mask(const Mask& mask);

struct LabelBundle {
  std::optional<std::vector<std::uint8_t>> cls;
  std::optional<std::vector<Box>> boxes;
  std::optional<Mask> mask;

  friend bool operator==(const LabelBundle&, const LabelBundle&) = default;
};

/// True when cls marks a positive whenever boxes or mask carry a finding, and
/// every stored value is binary.
bool labels_consistent(const LabelBundle& labels);
/// Any localized finding (non-empty boxes or mask), else any positive class.
bool is_positive(const LabelBundle& labels);

struct TaskSet {
  bool cls = false;
  bool det = false;
  bool seg = false;

  static TaskSet all() { return {true, true, true}; }
  bool contains(const TaskSet& other) const {
    return (cls || !other.cls) && (det || !other.det) && (seg || !other.seg);
  }
  /// e.g. "cls,det"
  std::string to_string() const;
  static TaskSet parse(const std::string& text);

  friend bool operator==(const TaskSet&, const TaskSet&) = default;
};

struct Sample {
  std::string id;
  Image image;
  LabelBundle labels;
};

struct Dataset {
  std::string name;
  int rows = 0;
  int cols = 0;
  int num_classes = 1;
  TaskSet coverage;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  /// Throws DataError if any bundle lacks a covered field.
  void validate() const;
};

/// Model input: M images of L x W packed as an M x L x W tensor.
struct ImageBatch {
  Tensor pixels;
  std::vector<std::string> ids;

  int count() const { return pixels.empty() ? 0 : pixels.dim(0); }
};

ImageBatch make_batch(const Dataset& d, const std::vector<std::size_t>& indices);
ImageBatch make_batch(const std::vector<const Sample*>& samples);

enum class SyntheticStyle {
  /// bright ellipses on a dark noisy background
  standard,
  /// darker, elongated ellipses on a brighter background; a shifted
  /// distribution used as the unseen-disease surrogate
  inverted,
};

struct SyntheticConfig {
  int rows = 64;
  int cols = 64;
  int num_samples = 100;
  double positive_fraction = 0.5;
  int blob_count_min = 1;
  int blob_count_max = 2;
  /// Ellipse semi-axis range as a fraction of the image side.
  double blob_radius_min = 0.08;
  double blob_radius_max = 0.16;
  double noise_std = 0.05;
  SyntheticStyle style = SyntheticStyle::standard;
  std::uint64_t seed = 0;
  std::string id_prefix = "s";

  void validate() const;
};

/// Jointly labeled synthetic dataset (coverage cls+det+seg, C = 1).
/// Pixel values are multiples of 1/255 so the set survives an 8-bit PNG
/// round trip unchanged.
Dataset generate_synthetic(const SyntheticConfig& config);

/// Same images, cls-only labels derived from boxes (preferred) or masks.
Dataset derive_classification_labels(const Dataset& d);

/// Copy of d with label fields outside `keep` dropped.
Dataset restrict_tasks(const Dataset& d, TaskSet keep);
/// Indices of samples for which is_positive holds.
std::vector<std::size_t> positive_indices(const Dataset& d);

struct LoadOptions {
  /// Resize to this (rows, cols) when set; otherwise the manifest size.
  std::optional<std::pair<int, int>> image_size;
};

/// Writes the on-disk layout: images/, masks/, boxes.csv, classes.csv,
/// manifest.json.
void save_dataset(const Dataset& d, const std::filesystem::path& root);
/// Reads the on-disk layout; throws DataError on any violation.
Dataset load_dataset(const std::filesystem::path& root, const LoadOptions& options = {});

}  // namespace mcx
