#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scanmtl/data.hpp"
#include "scanmtl/tensor.hpp"

namespace mcx {

enum class InitScheme {
  /// Gaussian with per-layer variance 2/fan_in (1/fan_in before a sigmoid).
  variance_scaled,
  /// Every array drawn from N(0, 1).
  standard_normal,
};

/// Shape contract shared by the encoder and the three heads.
///
/// The encoder is a chain of stride-2 3x3 conv blocks, so
/// encoded_dim == input_rows / 2^encoder_channels.size() and the last entry
/// of encoder_channels is feature_maps. The detection head emits one box per
/// encoder cell (anchors == encoded_dim^2). The segmentation head has one 2x
/// transposed-conv stage per encoder block.
struct ArchConfig {
  int input_rows = 64;  // L
  int input_cols = 64;  // W
  int feature_maps = 32;  // N
  int encoded_dim = 8;  // d
  int num_classes = 1;  // C
  int anchors = 64;  // K
  int max_gt_boxes = 4;  // B
  std::vector<int> encoder_channels{8, 16, 32};
  int encoder_extra_convs = 0;
  int cls_hidden = 32;
  int det_hidden = 32;
  std::vector<int> decoder_channels{16, 8, 8};
  InitScheme init = InitScheme::variance_scaled;

  /// Throws ConfigError naming the first inconsistent field.
  void validate() const;
  /// Fills the derived fields (feature_maps, encoded_dim, anchors) from the
  /// layer lists and input size.
  ArchConfig& derive();

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);

enum class Group { enc, cls, det, seg };
inline constexpr std::array<Group, 4> kAllGroups{Group::enc, Group::cls, Group::det, Group::seg};
const char* group_name(Group g);
Group parse_group(const std::string& name);

struct NamedArray {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

/// Ordered collection of named arrays belonging to one block.
class ParamGroup {
 public:
  std::vector<NamedArray> arrays;

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  void add(std::string name, Tensor value);
  std::size_t parameter_count() const;
  bool all_finite() const;

  friend bool operator==(const ParamGroup&, const ParamGroup&) = default;
};

/// theta = {theta_enc, theta_cls, theta_det, theta_seg}. Also used to hold
/// gradients and optimizer moments with the same layout.
struct ModelParams {
  ArchConfig arch;
  ParamGroup enc;
  ParamGroup cls;
  ParamGroup det;
  ParamGroup seg;

  ParamGroup& group(Group g);
  const ParamGroup& group(Group g) const;
  bool all_finite() const;
  /// Same layout, every value zero.
  ModelParams zeros_like() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Per-group Euclidean norm of (after - before).
std::array<double, 4> delta_norms(const ModelParams& before, const ModelParams& after);

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed);

/// X_enc, M x N x d x d.
struct EncodedFeatures {
  Tensor features;

  int count() const { return features.empty() ? 0 : features.dim(0); }
  EncodedFeatures select(const std::vector<int>& rows) const;
};

/// Counts encoder passes; the inference pipeline uses it to prove caching.
struct EncoderCounter {
  int batches = 0;
  int samples = 0;
};

EncodedFeatures encode(const ModelParams& p, const ImageBatch& batch,
                       EncoderCounter* counter = nullptr);
/// M x C, sigmoid outputs.
Tensor classify(const ModelParams& p, const EncodedFeatures& enc);
/// M x K x 4 of (c_x, c_y, l, w), ReLU outputs; anchor k sits at grid cell
/// (k / d, k % d).
Tensor detect(const ModelParams& p, const EncodedFeatures& enc);
/// M x L x W, sigmoid outputs.
Tensor segment(const ModelParams& p, const EncodedFeatures& enc);

/// Reference boxes of the K anchors: cell (r, c) has center
/// ((c + 0.5) / d, (r + 0.5) / d) and size 1/d x 1/d.
std::vector<Box> anchor_boxes(const ArchConfig& arch);

// ---------------------------------------------------------------------------
// Training path: forward with cached activations, then reverse-mode gradients.

enum class LayerKind { conv, deconv, linear, global_pool, position_bias };
enum class Activation { none, relu, sigmoid };

struct LayerSpec {
  LayerKind kind;
  std::string name;
  std::vector<int> weight_shape;  // empty for parameter-free layers
  int stride = 1;
  int pad = 0;
  Activation act = Activation::none;
};

struct BlockLayout {
  Group group;
  std::vector<LayerSpec> layers;
};

struct NetworkLayout {
  BlockLayout enc, cls, det, seg;
  const BlockLayout& block(Group g) const;
};

NetworkLayout network_layout(const ArchConfig& arch);

struct BlockTrace {
  /// activations[0] is the block input; activations[i + 1] is the
  /// post-activation output of layer i.
  std::vector<Tensor> activations;
};

struct HeadSelection {
  bool cls = false;
  bool det = false;
  bool seg = false;
};

struct ForwardPass {
  Tensor input;  // M x 1 x L x W
  BlockTrace enc_trace;
  EncodedFeatures features;
  BlockTrace cls_trace, det_trace, seg_trace;
  std::optional<Tensor> cls;  // M x C
  std::optional<Tensor> det;  // M x K x 4
  std::optional<Tensor> seg;  // M x L x W
};

ForwardPass forward(const ModelParams& p, const ImageBatch& batch, HeadSelection heads);

/// Gradients of a scalar loss with respect to the head outputs (same shapes).
struct OutputGrads {
  std::optional<Tensor> cls;
  std::optional<Tensor> det;
  std::optional<Tensor> seg;
  /// cls and seg hold gradients with respect to the logits feeding their
  /// output sigmoid, so backward skips that sigmoid.
  bool sigmoid_logits = false;
};

/// dLoss/dtheta for every group; heads without an output gradient get zeros.
/// The encoder pass is skipped (zeros) when `encoder` is false.
ModelParams backward(const ModelParams& p, const ForwardPass& fwd, const OutputGrads& grads,
                     bool encoder = true);

// ---------------------------------------------------------------------------
// Checkpoints

/// Binary file: magic, JSON header (arch + array index), float64 payload,
/// FNV-1a checksum. Writes atomically via a temporary file.
void save_params(const ModelParams& p, const std::filesystem::path& path);
/// Throws DataError on a corrupt/truncated file, ConfigError when `expected`
/// is given and the stored arch differs (message names the field).
ModelParams load_params(const std::filesystem::path& path,
                        const std::optional<ArchConfig>& expected = std::nullopt);

}  // namespace mcx
