#include "scanmtl/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "scanmtl/errors.hpp"

namespace mcx {

FilterResult partition_by_probability(const Tensor& class_probs, double threshold) {
  if (class_probs.rank() != 2) throw std::invalid_argument("class_probs must be M x C");
  FilterResult out;
  out.class_probs = class_probs;
  for (int i = 0; i < class_probs.dim(0); ++i) {
    const auto row = class_probs.row(i);
    const double best = *std::max_element(row.begin(), row.end());
    (best >= threshold ? out.positive : out.negative).push_back(i);
  }
  return out;
}

namespace {

void require_classifier(const ModelParams& p) {
  if (p.cls.arrays.empty() || p.enc.arrays.empty()) {
    throw std::invalid_argument("filter needs encoder and classification parameters");
  }
  if (!p.enc.all_finite() || !p.cls.all_finite()) {
    throw std::invalid_argument("filter parameters contain NaN or Inf");
  }
}

}  // namespace

FilterResult filter_positives(const ModelParams& p, const ImageBatch& batch, double threshold) {
  require_classifier(p);
  return partition_by_probability(classify(p, encode(p, batch)), threshold);
}

void TeacherForcingConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("teacher_forcing.p must lie in [0, 1]");
}

TeacherForcing::TeacherForcing(const TeacherForcingConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
  cfg_.validate();
}

bool TeacherForcing::toss() {
  // 53-bit uniform in [0, 1); p = 1 always forces, p = 0 never does.
  const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
  const bool forced = u < cfg_.p;
  ++tosses_;
  if (forced) ++forced_;
  return forced;
}

std::vector<std::size_t> teacher_force_select(const std::vector<std::size_t>& gt_positive,
                                              const std::vector<std::size_t>& filtered,
                                              TeacherForcing& coin) {
  if (!coin.config().per_sample) return coin.toss() ? gt_positive : filtered;
  std::vector<std::size_t> out;
  out.reserve(gt_positive.size());
  for (std::size_t i = 0; i < gt_positive.size(); ++i) {
    const bool forced = coin.toss();
    out.push_back(forced || filtered.empty() ? gt_positive[i] : filtered[i % filtered.size()]);
  }
  return out;
}

std::vector<ScoredBox> postprocess_boxes(const Tensor& raw, const std::vector<Box>& anchors,
                                         const KeepRule& rule, const std::vector<double>& scores) {
  if (raw.rank() != 2 || raw.dim(1) != 4) {
    throw std::invalid_argument("postprocess_boxes: raw must be K x 4, got " + raw.shape_string());
  }
  const int k = raw.dim(0);
  if (static_cast<int>(anchors.size()) != k) {
    throw std::invalid_argument("postprocess_boxes: anchor count mismatch");
  }
  if (!scores.empty() && static_cast<int>(scores.size()) != k) {
    throw std::invalid_argument("postprocess_boxes: score count mismatch");
  }

  struct Candidate {
    int anchor;
    Box box;
    double score;
    double drift;
  };
  std::vector<Candidate> cands;
  for (int i = 0; i < k; ++i) {
    const Box b{raw.at(i, 0), raw.at(i, 1), raw.at(i, 2), raw.at(i, 3)};
    if (!is_valid_box(b) || b.area() < rule.min_area) continue;
    const Box& a = anchors[static_cast<std::size_t>(i)];
    const double drift = std::sqrt((b.c_x - a.c_x) * (b.c_x - a.c_x) + (b.c_y - a.c_y) * (b.c_y - a.c_y) +
                                   (b.l - a.l) * (b.l - a.l) + (b.w - a.w) * (b.w - a.w));
    cands.push_back({i, b, scores.empty() ? 1.0 : scores[static_cast<std::size_t>(i)], drift});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
    if (x.score != y.score) return x.score > y.score;
    if (x.drift != y.drift) return x.drift < y.drift;
    return x.anchor < y.anchor;
  });
  std::vector<ScoredBox> kept;
  for (const auto& c : cands) {
    const bool overlaps = std::any_of(kept.begin(), kept.end(), [&](const ScoredBox& s) {
      return iou(s.box, c.box) >= rule.merge_iou;
    });
    if (!overlaps) kept.push_back({c.box, c.score});
  }
  return kept;
}

namespace {

// Mask probability at which a pixel counts as lesion when scoring boxes.
constexpr double kScoreMaskLevel = 0.5;

/// Bounding boxes of the connected lesion regions in one predicted mask.
std::vector<Box> mask_regions(const Tensor& seg, int sample) {
  Mask m(seg.dim(1), seg.dim(2));
  const auto src = seg.row(sample);
  std::transform(src.begin(), src.end(), m.values.begin(), [](double v) { return v >= kScoreMaskLevel; });
  return box_from_mask(m);
}

std::vector<Diagnosis> assemble(const ModelParams& p, const ImageBatch& batch,
                                const InferenceOptions& opt, const FilterResult& filter,
                                const Tensor& det, const Tensor& seg) {
  const int m = batch.count();
  const auto anchors = anchor_boxes(p.arch);
  std::vector<Diagnosis> out(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    Diagnosis& d = out[static_cast<std::size_t>(i)];
    d.id = i < static_cast<int>(batch.ids.size()) ? batch.ids[static_cast<std::size_t>(i)] : "";
    const auto row = filter.class_probs.row(i);
    d.class_probs.assign(row.begin(), row.end());
  }
  const int k = p.arch.anchors;
  for (std::size_t s = 0; s < filter.positive.size(); ++s) {
    const int i = filter.positive[s];
    const int si = static_cast<int>(s);
    Diagnosis& d = out[static_cast<std::size_t>(i)];
    d.positive = true;
    const double cls_score = *std::max_element(d.class_probs.begin(), d.class_probs.end());
    const auto regions = mask_regions(seg, si);

    Tensor raw({k, 4});
    std::vector<double> scores(static_cast<std::size_t>(k));
    for (int a = 0; a < k; ++a) {
      for (int c = 0; c < 4; ++c) raw.at(a, c) = det.at(si, a, c);
      const Box b{raw.at(a, 0), raw.at(a, 1), raw.at(a, 2), raw.at(a, 3)};
      double agree = 0.0;
      for (const Box& r : regions) agree = std::max(agree, iou(b, r));
      scores[static_cast<std::size_t>(a)] = cls_score * agree;
    }
    d.boxes = postprocess_boxes(raw, anchors, opt.keep, scores);

    Image mask(seg.dim(1), seg.dim(2));
    const auto src = seg.row(si);
    std::copy(src.begin(), src.end(), mask.values.begin());
    d.mask = std::move(mask);
  }
  return out;
}

ImageBatch subset(const ImageBatch& batch, const std::vector<int>& rows) {
  ImageBatch out;
  std::vector<int> shape = batch.pixels.shape();
  shape[0] = static_cast<int>(rows.size());
  out.pixels = Tensor(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = batch.pixels.row(rows[i]);
    std::copy(src.begin(), src.end(), out.pixels.row(static_cast<int>(i)).begin());
    out.ids.push_back(batch.ids.at(static_cast<std::size_t>(rows[i])));
  }
  return out;
}

}  // namespace

std::vector<Diagnosis> infer_pipeline(const ModelParams& p, const ImageBatch& batch,
                                      const InferenceOptions& opt, EncoderCounter* counter) {
  require_classifier(p);
  const EncodedFeatures features = encode(p, batch, counter);
  const FilterResult filter = partition_by_probability(classify(p, features), opt.threshold);
  Tensor det, seg;
  if (!filter.positive.empty()) {
    const EncodedFeatures pos = features.select(filter.positive);
    det = detect(p, pos);
    seg = segment(p, pos);
  }
  return assemble(p, batch, opt, filter, det, seg);
}

std::vector<Diagnosis> infer_pipeline_recompute(const ModelParams& p, const ImageBatch& batch,
                                                const InferenceOptions& opt,
                                                EncoderCounter* counter) {
  require_classifier(p);
  const FilterResult filter =
      partition_by_probability(classify(p, encode(p, batch, counter)), opt.threshold);
  Tensor det, seg;
  if (!filter.positive.empty()) {
    const EncodedFeatures pos = encode(p, subset(batch, filter.positive), counter);
    det = detect(p, pos);
    seg = segment(p, pos);
  }
  return assemble(p, batch, opt, filter, det, seg);
}

std::vector<Diagnosis> infer_dataset(const ModelParams& p, const Dataset& d,
                                     const InferenceOptions& opt, int batch_size,
                                     EncoderCounter* counter) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<Diagnosis> out;
  out.reserve(d.size());
  for (std::size_t start = 0; start < d.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(d.size(), start + batch_size); ++i) idx.push_back(i);
    auto part = infer_pipeline(p, make_batch(d, idx), opt, counter);
    for (auto& x : part) out.push_back(std::move(x));
  }
  return out;
}

void write_diagnoses(const std::vector<Diagnosis>& diags, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "masks");
  std::ofstream out(dir / "diagnoses.jsonl", std::ios::trunc);
  if (!out) throw DataError("cannot write " + (dir / "diagnoses.jsonl").string());
  for (const auto& d : diags) {
    nlohmann::json rec;
    rec["image_id"] = d.id;
    rec["positive"] = d.positive;
    rec["class_probs"] = d.class_probs;
    rec["boxes"] = nlohmann::json::array();
    for (const auto& b : d.boxes) {
      rec["boxes"].push_back(
          {{"c_x", b.box.c_x}, {"c_y", b.box.c_y}, {"l", b.box.l}, {"w", b.box.w}, {"score", b.score}});
    }
    if (d.mask) {
      const std::string rel = "masks/" + d.id + ".png";
      png::write(dir / rel, png::from_image(*d.mask));
      rec["mask"] = rel;
    } else {
      rec["mask"] = nullptr;
    }
    out << rec.dump() << '\n';
  }
}

png::Raster render_overlay(const Image& image, const Diagnosis& diag) {
  png::Raster r;
  r.rows = image.rows;
  r.cols = image.cols;
  r.channels = 3;
  r.bytes.resize(static_cast<std::size_t>(r.rows) * r.cols * 3);
  auto put = [&](int y, int x, double red, double green, double blue) {
    const std::size_t o = (static_cast<std::size_t>(y) * r.cols + x) * 3;
    r.bytes[o] = static_cast<std::uint8_t>(std::lround(std::clamp(red, 0.0, 1.0) * 255));
    r.bytes[o + 1] = static_cast<std::uint8_t>(std::lround(std::clamp(green, 0.0, 1.0) * 255));
    r.bytes[o + 2] = static_cast<std::uint8_t>(std::lround(std::clamp(blue, 0.0, 1.0) * 255));
  };
  constexpr double kAlpha = 0.45;
  for (int y = 0; y < r.rows; ++y) {
    for (int x = 0; x < r.cols; ++x) {
      const double g = image.at(y, x);
      const bool hit = diag.mask && diag.mask->rows == r.rows && diag.mask->cols == r.cols &&
                       diag.mask->at(y, x) >= 0.5;
      if (hit) {
        put(y, x, (1 - kAlpha) * g + kAlpha, (1 - kAlpha) * g, (1 - kAlpha) * g);
      } else {
        put(y, x, g, g, g);
      }
    }
  }
  for (const auto& sb : diag.boxes) {
    const PixelBounds pb = pixel_bounds(sb.box, r.rows, r.cols);
    if (pb.empty()) continue;
    for (int x = pb.col_min; x <= pb.col_max; ++x) {
      put(pb.row_min, x, 0, 1, 0);
      put(pb.row_max, x, 0, 1, 0);
    }
    for (int y = pb.row_min; y <= pb.row_max; ++y) {
      put(y, pb.col_min, 0, 1, 0);
      put(y, pb.col_max, 0, 1, 0);
    }
  }
  return r;
}

}  // namespace mcx
