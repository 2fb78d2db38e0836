#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "scanmtl/data.hpp"
#include "scanmtl/losses.hpp"
#include "scanmtl/model.hpp"

namespace fixture {

/// 16x16 input, two encoder blocks (d = 4, K = 16), N = 4, C = 1.
inline mcx::ArchConfig tiny_arch() {
  mcx::ArchConfig a;
  a.input_rows = a.input_cols = 16;
  a.encoder_channels = {4, 4};
  a.decoder_channels = {4, 4};
  a.cls_hidden = 6;
  a.det_hidden = 5;
  a.derive();
  return a;
}

inline mcx::ImageBatch random_batch(int m, int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  mcx::ImageBatch b;
  b.pixels = mcx::Tensor({m, rows, cols});
  for (double& v : b.pixels.values()) v = u(rng);
  for (int i = 0; i < m; ++i) b.ids.push_back("r" + std::to_string(i));
  return b;
}

inline mcx::SyntheticConfig small_synthetic(int n, std::uint64_t seed, int side = 16) {
  mcx::SyntheticConfig c;
  c.rows = c.cols = side;
  c.num_samples = n;
  c.seed = seed;
  c.blob_radius_min = 0.15;
  c.blob_radius_max = 0.25;
  return c;
}

/// Random blobs grown by a random walk; may merge or touch the border.
inline mcx::Mask random_blob_mask(std::mt19937_64& rng, int side) {
  std::uniform_int_distribution<int> pos(0, side - 1), steps(1, 30), count(0, 4), dir(0, 3);
  mcx::Mask m(side, side, 0);
  const int blobs = count(rng);
  for (int b = 0; b < blobs; ++b) {
    int r = pos(rng), c = pos(rng);
    const int n = steps(rng);
    for (int s = 0; s < n; ++s) {
      m.at(r, c) = 1;
      switch (dir(rng)) {
        case 0: r = std::min(side - 1, r + 1); break;
        case 1: r = std::max(0, r - 1); break;
        case 2: c = std::min(side - 1, c + 1); break;
        default: c = std::max(0, c - 1); break;
      }
    }
  }
  return m;
}

struct GradCheck {
  double worst = 0.0;
  std::size_t checked = 0;
  std::size_t one_sided = 0;  // a ReLU flipped on one side of the probe
  std::size_t skipped = 0;    // ReLUs flipped on both sides
};

enum class Head { cls, det, seg };

/// Central differences over every parameter of every group for one head
/// loss through the full path. Probes that cross a ReLU kink fall back to the
/// one-sided difference on the base point's side, or are skipped and counted
/// when both sides cross. Relative error uses a 1e-6 floor on the
/// denominator so that vanishing gradients do not divide by zero.
inline GradCheck gradient_check(const mcx::ArchConfig& arch, std::uint64_t seed, Head head) {
  using namespace mcx;
  // Zero-initialized biases put ReLU inputs exactly on the kink wherever the
  // incoming activations are all zero; shift them off it.
  ModelParams p = init_params(arch, seed);
  std::mt19937_64 jitter(seed + 300);
  std::normal_distribution<double> offset(0.0, 0.1);
  for (Group g : kAllGroups) {
    for (auto& a : p.group(g).arrays) {
      if (a.name.ends_with(".bias")) {
        for (double& v : a.value.values()) v += offset(jitter);
      }
    }
  }
  const int m = 2;
  const ImageBatch batch = random_batch(m, arch.input_rows, arch.input_cols, seed + 100);
  std::mt19937_64 rng(seed + 200);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor y_cls({m, arch.num_classes});
  for (double& v : y_cls.values()) v = u(rng) < 0.5;
  Tensor y_seg({m, arch.input_rows, arch.input_cols});
  for (double& v : y_seg.values()) v = u(rng) < 0.5;
  std::vector<std::vector<Box>> gt(m);
  for (auto& g : gt) g.push_back(Box{0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.2 + 0.2 * u(rng), 0.2 + 0.2 * u(rng)});
  const auto anchors = anchor_boxes(arch);
  std::vector<MatchMatrix> matches;
  for (const auto& g : gt) matches.push_back(match_anchors(g, anchors, 0.05));

  const HeadSelection sel{head == Head::cls, head == Head::det, head == Head::seg};
  // Which units are active; a probe that changes this crossed a ReLU kink.
  using Pattern = std::vector<bool>;
  auto loss = [&](const ModelParams& q, ModelParams* grad, Pattern* active) {
    const ForwardPass f = forward(q, batch, sel);
    // Sigmoid heads go through the fused logit gradient, as in training.
    Tensor g;
    OutputGrads og;
    og.sigmoid_logits = true;
    double value = 0.0;
    switch (head) {
      case Head::cls:
        value = loss_cls(y_cls, *f.cls);
        if (grad) og.cls = bce_logit_grad(y_cls, *f.cls);
        break;
      case Head::det:
        value = loss_det(gt, *f.det, matches, &g);
        og.det = g;
        break;
      case Head::seg:
        value = loss_seg(y_seg, *f.seg);
        if (grad) og.seg = bce_logit_grad(y_seg, *f.seg);
        break;
    }
    if (grad) *grad = backward(q, f, og);
    active->clear();
    for (const BlockTrace* t : {&f.enc_trace, &f.cls_trace, &f.det_trace, &f.seg_trace}) {
      for (std::size_t l = 1; l < t->activations.size(); ++l) {
        for (double v : t->activations[l].values()) active->push_back(v > 0.0);
      }
    }
    return value;
  };

  ModelParams analytic;
  Pattern base, up_active, down_active;
  const double centre = loss(p, &analytic, &base);
  GradCheck out;
  // Large enough that summation noise in the loss stays well under the
  // tolerance for partials near the 1e-6 floor.
  const double h = 1e-5;
  for (Group g : kAllGroups) {
    const auto& arrays = p.group(g).arrays;
    for (std::size_t a = 0; a < arrays.size(); ++a) {
      for (std::size_t i = 0; i < arrays[a].value.size(); ++i) {
        ModelParams q = p;
        q.group(g).arrays[a].value[i] += h;
        const double up = loss(q, nullptr, &up_active);
        q.group(g).arrays[a].value[i] -= 2 * h;
        const double down = loss(q, nullptr, &down_active);
        ++out.checked;
        // The analytic gradient belongs to the linear piece holding the
        // base point, so difference only within that piece.
        const bool up_ok = up_active == base;
        const bool down_ok = down_active == base;
        double num = 0.0;
        if (up_ok && down_ok) {
          num = (up - down) / (2 * h);
        } else if (up_ok) {
          num = (up - centre) / h;
          ++out.one_sided;
        } else if (down_ok) {
          num = (centre - down) / h;
          ++out.one_sided;
        } else {
          ++out.skipped;
          continue;
        }
        const double an = analytic.group(g).arrays[a].value[i];
        const double rel = std::abs(num - an) / std::max({1e-6, std::abs(num), std::abs(an)});
        out.worst = std::max(out.worst, rel);
      }
    }
  }
  return out;
}

/// Fresh scratch directory under the system temp dir, removed on exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("mcx_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
