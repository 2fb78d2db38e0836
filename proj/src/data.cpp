#include "scanmtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scanmtl/png_io.hpp"

namespace mcx {

namespace fs = std::filesystem;
using nlohmann::json;

bool is_valid_box(const Box& b) {
  for (double v : {b.c_x, b.c_y, b.l, b.w}) {
    if (!std::isfinite(v) || v < 0.0) return false;
  }
  const double x0 = std::max(0.0, b.x_min());
  const double x1 = std::min(1.0, b.x_max());
  const double y0 = std::max(0.0, b.y_min());
  const double y1 = std::min(1.0, b.y_max());
  return x1 > x0 && y1 > y0;
}

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
  const double iy = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

PixelBounds pixel_bounds(const Box& b, int rows, int cols) {
  // A pixel belongs to the box when its center does.
  PixelBounds p{};
  p.col_min = std::max(0, static_cast<int>(std::ceil(b.x_min() * cols)));
  p.col_max = std::min(cols - 1, static_cast<int>(std::floor(b.x_max() * cols)));
  p.row_min = std::max(0, static_cast<int>(std::ceil(b.y_min() * rows)));
  p.row_max = std::min(rows - 1, static_cast<int>(std::floor(b.y_max() * rows)));
  return p;
}

Box box_from_pixel_bounds(const PixelBounds& p, int rows, int cols) {
  Box b;
  b.c_x = (p.col_min + p.col_max) / (2.0 * cols);
  b.c_y = (p.row_min + p.row_max) / (2.0 * rows);
  b.w = (p.col_max - p.col_min + 1) / static_cast<double>(cols);
  b.l = (p.row_max - p.row_min + 1) / static_cast<double>(rows);
  return b;
}

Mask rasterize_boxes(const std::vector<Box>& boxes, int rows, int cols) {
  Mask m(rows, cols, 0);
  for (const Box& b : boxes) {
    const PixelBounds p = pixel_bounds(b, rows, cols);
    for (int r = p.row_min; r <= p.row_max; ++r) {
      for (int c = p.col_min; c <= p.col_max; ++c) m.at(r, c) = 1;
    }
  }
  return m;
}

std::vector<Box> box_from_mask(const Mask& mask) {
  std::vector<Box> boxes;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<int> stack;
  for (int r0 = 0; r0 < mask.rows; ++r0) {
    for (int c0 = 0; c0 < mask.cols; ++c0) {
      const std::size_t start = static_cast<std::size_t>(r0) * mask.cols + c0;
      if (!mask.values[start] || seen[start]) continue;
      PixelBounds p{r0, r0, c0, c0};
      seen[start] = 1;
      stack.assign(1, static_cast<int>(start));
      while (!stack.empty()) {
        const int idx = stack.back();
        stack.pop_back();
        const int r = idx / mask.cols;
        const int c = idx % mask.cols;
        p.row_min = std::min(p.row_min, r);
        p.row_max = std::max(p.row_max, r);
        p.col_min = std::min(p.col_min, c);
        p.col_max = std::max(p.col_max, c);
        const int nr[4] = {r - 1, r + 1, r, r};
        const int nc[4] = {c, c, c - 1, c + 1};
        for (int k = 0; k < 4; ++k) {
          if (nr[k] < 0 || nr[k] >= mask.rows || nc[k] < 0 || nc[k] >= mask.cols) continue;
          const std::size_t n = static_cast<std::size_t>(nr[k]) * mask.cols + nc[k];
          if (mask.values[n] && !seen[n]) {
            seen[n] = 1;
            stack.push_back(static_cast<int>(n));
          }
        }
      }
      boxes.push_back(box_from_pixel_bounds(p, mask.rows, mask.cols));
    }
  }
  return boxes;
}

bool labels_consistent(const LabelBundle& labels) {
  if (labels.cls) {
    for (auto v : *labels.cls) {
      if (v > 1) return false;
    }
  }
  if (labels.mask) {
    for (auto v : labels.mask->values) {
      if (v > 1) return false;
    }
  }
  const bool has_boxes = labels.boxes && !labels.boxes->empty();
  const bool has_mask =
      labels.mask && std::any_of(labels.mask->values.begin(), labels.mask->values.end(),
                                 [](auto v) { return v != 0; });
  if ((has_boxes || has_mask) && labels.cls) {
    return std::any_of(labels.cls->begin(), labels.cls->end(), [](auto v) { return v != 0; });
  }
  return true;
}

bool is_positive(const LabelBundle& labels) {
  if (labels.boxes) return !labels.boxes->empty();
  if (labels.mask) {
    return std::any_of(labels.mask->values.begin(), labels.mask->values.end(),
                       [](auto v) { return v != 0; });
  }
  if (labels.cls) {
    return std::any_of(labels.cls->begin(), labels.cls->end(), [](auto v) { return v != 0; });
  }
  return false;
}

std::string TaskSet::to_string() const {
  std::string s;
  auto add = [&s](const char* name) {
    if (!s.empty()) s += ',';
    s += name;
  };
  if (cls) add("cls");
  if (det) add("det");
  if (seg) add("seg");
  return s;
}

TaskSet TaskSet::parse(const std::string& text) {
  TaskSet t;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "cls") t.cls = true;
    else if (item == "det") t.det = true;
    else if (item == "seg") t.seg = true;
    else if (!item.empty()) throw ConfigError("unknown task '" + item + "'");
  }
  return t;
}

void Dataset::validate() const {
  for (const Sample& s : samples) {
    if (s.image.rows != rows || s.image.cols != cols) {
      throw DataError("sample " + s.id + " has the wrong image size");
    }
    if ((coverage.cls && !s.labels.cls) || (coverage.det && !s.labels.boxes) ||
        (coverage.seg && !s.labels.mask)) {
      throw DataError("sample " + s.id + " lacks labels for " + coverage.to_string());
    }
  }
}

ImageBatch make_batch(const std::vector<const Sample*>& samples) {
  ImageBatch batch;
  if (samples.empty()) return batch;
  const int rows = samples.front()->image.rows;
  const int cols = samples.front()->image.cols;
  batch.pixels = Tensor({static_cast<int>(samples.size()), rows, cols});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Image& img = samples[i]->image;
    if (img.rows != rows || img.cols != cols) {
      throw std::invalid_argument("make_batch: mixed image sizes");
    }
    std::copy(img.values.begin(), img.values.end(), batch.pixels.row(static_cast<int>(i)).begin());
    batch.ids.push_back(samples[i]->id);
  }
  return batch;
}

ImageBatch make_batch(const Dataset& d, const std::vector<std::size_t>& indices) {
  std::vector<const Sample*> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(&d.samples.at(i));
  return make_batch(picked);
}

void SyntheticConfig::validate() const {
  if (num_samples < 1) throw ConfigError("synthetic: num_samples must be >= 1");
  if (rows < 8 || cols < 8) throw ConfigError("synthetic: image size must be >= 8x8");
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) {
    throw ConfigError("synthetic: positive_fraction must lie in [0,1]");
  }
  if (blob_count_min < 1 || blob_count_max < blob_count_min) {
    throw ConfigError("synthetic: blob_count range must satisfy 1 <= min <= max");
  }
  if (!(blob_radius_min > 0.0 && blob_radius_max >= blob_radius_min && blob_radius_max < 0.5)) {
    throw ConfigError("synthetic: blob_radius range must satisfy 0 < min <= max < 0.5");
  }
  if (!(noise_std >= 0.0)) throw ConfigError("synthetic: noise_std must be >= 0");
}

namespace {

struct Blob {
  std::vector<std::size_t> pixels;
  PixelBounds bounds;
};

bool bounds_touch(const PixelBounds& a, const PixelBounds& b) {
  // One pixel of clearance keeps components apart under 4-connectivity.
  return !(a.col_max + 1 < b.col_min || b.col_max + 1 < a.col_min ||
           a.row_max + 1 < b.row_min || b.row_max + 1 < a.row_min);
}

std::optional<Blob> place_blob(const SyntheticConfig& cfg, std::mt19937_64& rng,
                               const std::vector<Blob>& existing) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double side = std::min(cfg.rows, cfg.cols);
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double r_major =
        side * (cfg.blob_radius_min + (cfg.blob_radius_max - cfg.blob_radius_min) * unit(rng));
    double ry = r_major;
    double rx = r_major * (0.7 + 0.3 * unit(rng));
    if (cfg.style == SyntheticStyle::inverted) rx = r_major * (0.4 + 0.2 * unit(rng));
    if (unit(rng) < 0.5) std::swap(rx, ry);
    const double theta = std::numbers::pi * unit(rng);
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    const double ex = std::sqrt(rx * rx * ct * ct + ry * ry * st * st);
    const double ey = std::sqrt(rx * rx * st * st + ry * ry * ct * ct);
    const double cx_lo = ex + 1.0;
    const double cx_hi = cfg.cols - 2.0 - ex;
    const double cy_lo = ey + 1.0;
    const double cy_hi = cfg.rows - 2.0 - ey;
    if (cx_hi < cx_lo || cy_hi < cy_lo) continue;
    const double cx = cx_lo + (cx_hi - cx_lo) * unit(rng);
    const double cy = cy_lo + (cy_hi - cy_lo) * unit(rng);

    Mask own(cfg.rows, cfg.cols, 0);
    Blob blob;
    for (int r = 0; r < cfg.rows; ++r) {
      for (int c = 0; c < cfg.cols; ++c) {
        const double dx = c - cx;
        const double dy = r - cy;
        const double u = (dx * ct + dy * st) / rx;
        const double v = (-dx * st + dy * ct) / ry;
        if (u * u + v * v <= 1.0) {
          own.at(r, c) = 1;
          blob.pixels.push_back(static_cast<std::size_t>(r) * cfg.cols + c);
        }
      }
    }
    // Reject slivers that rasterize into several 4-connected pieces.
    const auto comps = box_from_mask(own);
    if (comps.size() != 1) continue;
    blob.bounds = pixel_bounds(comps.front(), cfg.rows, cfg.cols);
    const bool clash = std::any_of(existing.begin(), existing.end(), [&](const Blob& e) {
      return bounds_touch(e.bounds, blob.bounds);
    });
    if (clash) continue;
    return blob;
  }
  return std::nullopt;
}

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const bool inverted = cfg.style == SyntheticStyle::inverted;

  Dataset d;
  d.name = "synthetic";
  d.rows = cfg.rows;
  d.cols = cfg.cols;
  d.num_classes = 1;
  d.coverage = TaskSet::all();
  d.samples.reserve(static_cast<std::size_t>(cfg.num_samples));

  for (int i = 0; i < cfg.num_samples; ++i) {
    Sample s;
    std::ostringstream id;
    id << cfg.id_prefix << std::setw(6) << std::setfill('0') << i;
    s.id = id.str();

    const bool positive = unit(rng) < cfg.positive_fraction;
    const int n_blobs =
        positive ? cfg.blob_count_min +
                       static_cast<int>(unit(rng) * (cfg.blob_count_max - cfg.blob_count_min + 1))
                 : 0;

    const double base = inverted ? 0.55 + 0.1 * unit(rng) : 0.12 + 0.1 * unit(rng);
    const double tilt = 0.08 * (unit(rng) - 0.5);
    std::vector<double> canvas(static_cast<std::size_t>(cfg.rows) * cfg.cols);
    for (int r = 0; r < cfg.rows; ++r) {
      for (int c = 0; c < cfg.cols; ++c) {
        canvas[static_cast<std::size_t>(r) * cfg.cols + c] =
            base + tilt * (static_cast<double>(r) / cfg.rows - 0.5);
      }
    }

    std::vector<Blob> blobs;
    for (int b = 0; b < std::min(n_blobs, cfg.blob_count_max); ++b) {
      auto blob = place_blob(cfg, rng, blobs);
      if (!blob) continue;
      const double amp = inverted ? -(0.3 + 0.15 * unit(rng)) : 0.45 + 0.2 * unit(rng);
      for (auto p : blob->pixels) canvas[p] += amp;
      blobs.push_back(std::move(*blob));
    }

    s.image = Image(cfg.rows, cfg.cols);
    for (std::size_t p = 0; p < canvas.size(); ++p) {
      const double v = std::clamp(canvas[p] + cfg.noise_std * noise(rng), 0.0, 1.0);
      s.image.values[p] = std::lround(v * 255.0) / 255.0;
    }

    Mask mask(cfg.rows, cfg.cols, 0);
    std::vector<Box> boxes;
    for (const Blob& b : blobs) {
      for (auto p : b.pixels) mask.values[p] = 1;
      boxes.push_back(box_from_pixel_bounds(b.bounds, cfg.rows, cfg.cols));
    }
    s.labels.cls = std::vector<std::uint8_t>{static_cast<std::uint8_t>(blobs.empty() ? 0 : 1)};
    s.labels.boxes = std::move(boxes);
    s.labels.mask = std::move(mask);
    d.samples.push_back(std::move(s));
  }
  return d;
}

Dataset derive_classification_labels(const Dataset& d) {
  if (!d.coverage.det && !d.coverage.seg) {
    throw DataError("derive_classification_labels: dataset '" + d.name +
                    "' has neither boxes nor masks");
  }
  Dataset out;
  out.name = d.name + ":cls";
  out.rows = d.rows;
  out.cols = d.cols;
  out.num_classes = 1;
  out.coverage = TaskSet{true, false, false};
  out.samples.reserve(d.samples.size());
  for (const Sample& s : d.samples) {
    bool pos = false;
    if (d.coverage.det) pos = pos || (s.labels.boxes && !s.labels.boxes->empty());
    if (d.coverage.seg && s.labels.mask) {
      pos = pos || std::any_of(s.labels.mask->values.begin(), s.labels.mask->values.end(),
                               [](auto v) { return v != 0; });
    }
    Sample c;
    c.id = s.id;
    c.image = s.image;
    c.labels.cls = std::vector<std::uint8_t>{static_cast<std::uint8_t>(pos ? 1 : 0)};
    out.samples.push_back(std::move(c));
  }
  return out;
}

Dataset restrict_tasks(const Dataset& d, TaskSet keep) {
  Dataset out = d;
  out.coverage = TaskSet{d.coverage.cls && keep.cls, d.coverage.det && keep.det,
                         d.coverage.seg && keep.seg};
  for (Sample& s : out.samples) {
    if (!keep.cls) s.labels.cls.reset();
    if (!keep.det) s.labels.boxes.reset();
    if (!keep.seg) s.labels.mask.reset();
  }
  return out;
}

std::vector<std::size_t> positive_indices(const Dataset& d) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    if (is_positive(d.samples[i].labels)) idx.push_back(i);
  }
  return idx;
}

// ---------------------------------------------------------------------------
// On-disk layout

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": not a number '" + s + "'");
  }
}

Image resize_bilinear(const Image& src, int rows, int cols) {
  if (src.rows == rows && src.cols == cols) return src;
  Image out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const double sy = std::clamp((r + 0.5) * src.rows / rows - 0.5, 0.0, src.rows - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, src.rows - 1);
    const double fy = sy - y0;
    for (int c = 0; c < cols; ++c) {
      const double sx = std::clamp((c + 0.5) * src.cols / cols - 0.5, 0.0, src.cols - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, src.cols - 1);
      const double fx = sx - x0;
      out.at(r, c) = (1 - fy) * ((1 - fx) * src.at(y0, x0) + fx * src.at(y0, x1)) +
                     fy * ((1 - fx) * src.at(y1, x0) + fx * src.at(y1, x1));
    }
  }
  return out;
}

Mask resize_nearest(const Mask& src, int rows, int cols) {
  if (src.rows == rows && src.cols == cols) return src;
  Mask out(rows, cols, 0);
  for (int r = 0; r < rows; ++r) {
    const int sr = std::min(src.rows - 1, r * src.rows / rows);
    for (int c = 0; c < cols; ++c) {
      out.at(r, c) = src.at(sr, std::min(src.cols - 1, c * src.cols / cols));
    }
  }
  return out;
}

std::ifstream open_csv(const fs::path& path, const std::string& expected_prefix,
                       std::vector<std::string>& header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + " is empty");
  header = split_csv(line);
  if (header.empty() || line.rfind(expected_prefix, 0) != 0) {
    throw DataError(path.string() + ": unexpected header '" + line + "'");
  }
  return in;
}

}  // namespace

void save_dataset(const Dataset& d, const fs::path& root) {
  d.validate();
  fs::create_directories(root / "images");
  const bool has_masks = d.coverage.seg;
  if (has_masks) fs::create_directories(root / "masks");

  json manifest;
  manifest["name"] = d.name;
  manifest["image_size"] = {d.rows, d.cols};
  manifest["num_classes"] = d.num_classes;
  json ids = json::array();
  for (const Sample& s : d.samples) ids.push_back(s.id);
  manifest["samples"] = ids;
  manifest["annotations"] = {
      {"classes", d.coverage.cls ? json("classes.csv") : json(nullptr)},
      {"boxes", d.coverage.det ? json("boxes.csv") : json(nullptr)},
      {"masks", has_masks ? json("masks") : json(nullptr)},
  };

  for (const Sample& s : d.samples) {
    png::write(root / "images" / (s.id + ".png"), png::from_image(s.image));
    if (has_masks) {
      png::Raster r{s.labels.mask->rows, s.labels.mask->cols, 1, {}};
      r.bytes.reserve(s.labels.mask->size());
      for (auto v : s.labels.mask->values) r.bytes.push_back(v ? 255 : 0);
      png::write(root / "masks" / (s.id + ".png"), r);
    }
  }
  if (d.coverage.det) {
    std::ofstream out(root / "boxes.csv");
    out << "image_id,c_x,c_y,l,w\n" << std::setprecision(17);
    for (const Sample& s : d.samples) {
      for (const Box& b : *s.labels.boxes) {
        out << s.id << ',' << b.c_x << ',' << b.c_y << ',' << b.l << ',' << b.w << '\n';
      }
    }
  }
  if (d.coverage.cls) {
    std::ofstream out(root / "classes.csv");
    out << "image_id";
    for (int c = 0; c < d.num_classes; ++c) out << ",label_" << c;
    out << '\n';
    for (const Sample& s : d.samples) {
      out << s.id;
      for (auto v : *s.labels.cls) out << ',' << static_cast<int>(v);
      out << '\n';
    }
  }
  std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& root, const LoadOptions& options) {
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw DataError("missing manifest: " + manifest_path.string());
  json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  Dataset d;
  try {
    d.name = manifest.value("name", root.filename().string());
    const auto size = manifest.at("image_size");
    d.rows = size.at(0).get<int>();
    d.cols = size.at(1).get<int>();
    d.num_classes = manifest.value("num_classes", 1);
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
  if (options.image_size) std::tie(d.rows, d.cols) = *options.image_size;
  if (d.rows < 1 || d.cols < 1 || d.num_classes < 1) throw DataError("manifest: bad dimensions");

  auto annotation = [&](const char* key) -> std::optional<fs::path> {
    if (!manifest.contains("annotations")) return std::nullopt;
    const auto& a = manifest["annotations"];
    if (!a.contains(key) || a[key].is_null()) return std::nullopt;
    fs::path p = root / a[key].get<std::string>();
    if (!fs::exists(p)) return std::nullopt;
    return p;
  };
  const auto classes_path = annotation("classes");
  const auto boxes_path = annotation("boxes");
  const auto masks_path = annotation("masks");

  std::vector<std::string> ids;
  if (manifest.contains("samples")) {
    ids = manifest["samples"].get<std::vector<std::string>>();
  } else {
    if (!fs::is_directory(root / "images")) throw DataError("missing images/ directory");
    for (const auto& entry : fs::directory_iterator(root / "images")) {
      if (entry.path().extension() == ".png") ids.push_back(entry.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
  }

  d.coverage.det = boxes_path.has_value();
  d.coverage.seg = masks_path.has_value();
  d.coverage.cls = classes_path.has_value() || d.coverage.det || d.coverage.seg;

  std::map<std::string, std::size_t> index;
  d.samples.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Sample& s = d.samples[i];
    s.id = ids[i];
    index[s.id] = i;
    s.image = resize_bilinear(png::to_image(png::read_gray8(root / "images" / (s.id + ".png"))),
                              d.rows, d.cols);
    if (d.coverage.det) s.labels.boxes.emplace();
    if (masks_path) {
      const fs::path mp = *masks_path / (s.id + ".png");
      if (!fs::exists(mp)) throw DataError("missing mask " + mp.string());
      const png::Raster raw = png::read_gray8(mp);
      Mask m(raw.rows, raw.cols, 0);
      for (std::size_t p = 0; p < raw.bytes.size(); ++p) {
        if (raw.bytes[p] != 0 && raw.bytes[p] != 255) {
          throw DataError("non-binary mask " + mp.string());
        }
        m.values[p] = raw.bytes[p] ? 1 : 0;
      }
      s.labels.mask = resize_nearest(m, d.rows, d.cols);
    }
  }

  if (boxes_path) {
    std::vector<std::string> header;
    auto in = open_csv(*boxes_path, "image_id,c_x,c_y,l,w", header);
    std::string line;
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line == "\r") continue;
      const auto cells = split_csv(line);
      const std::string where = boxes_path->string() + ":" + std::to_string(line_no);
      if (cells.size() != 5) throw DataError(where + ": expected 5 fields");
      auto it = index.find(cells[0]);
      if (it == index.end()) throw DataError(where + ": unknown image '" + cells[0] + "'");
      Box b{parse_number(cells[1], where), parse_number(cells[2], where),
            parse_number(cells[3], where), parse_number(cells[4], where)};
      for (double v : {b.c_x, b.c_y, b.l, b.w}) {
        if (!(v >= 0.0 && v <= 1.0)) throw DataError(where + ": box coordinate outside [0,1]");
      }
      if (!is_valid_box(b)) throw DataError(where + ": degenerate box");
      d.samples[it->second].labels.boxes->push_back(b);
    }
  }

  if (classes_path) {
    std::vector<std::string> header;
    auto in = open_csv(*classes_path, "image_id", header);
    if (static_cast<int>(header.size()) - 1 != d.num_classes) {
      throw DataError(classes_path->string() + ": header has " +
                      std::to_string(header.size() - 1) + " labels, manifest says " +
                      std::to_string(d.num_classes));
    }
    std::string line;
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line == "\r") continue;
      const auto cells = split_csv(line);
      const std::string where = classes_path->string() + ":" + std::to_string(line_no);
      if (cells.size() != header.size()) throw DataError(where + ": wrong field count");
      auto it = index.find(cells[0]);
      if (it == index.end()) throw DataError(where + ": unknown image '" + cells[0] + "'");
      std::vector<std::uint8_t> cls;
      for (std::size_t k = 1; k < cells.size(); ++k) {
        if (cells[k] != "0" && cells[k] != "1") throw DataError(where + ": label not 0/1");
        cls.push_back(cells[k] == "1" ? 1 : 0);
      }
      d.samples[it->second].labels.cls = std::move(cls);
    }
    for (const Sample& s : d.samples) {
      if (!s.labels.cls) throw DataError(classes_path->string() + ": no row for " + s.id);
    }
  } else if (d.coverage.cls) {
    // Derivable from localization labels.
    d.num_classes = 1;
    for (Sample& s : d.samples) {
      bool pos = (s.labels.boxes && !s.labels.boxes->empty()) ||
                 (s.labels.mask && std::any_of(s.labels.mask->values.begin(),
                                               s.labels.mask->values.end(),
                                               [](auto v) { return v != 0; }));
      s.labels.cls = std::vector<std::uint8_t>{static_cast<std::uint8_t>(pos ? 1 : 0)};
    }
  }
  d.validate();
  return d;
}

}  // namespace mcx
