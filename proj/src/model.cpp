#include "scanmtl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scanmtl/errors.hpp"
#include "scanmtl/ops.hpp"

namespace mcx {

using nlohmann::json;

// ---------------------------------------------------------------------------
// ArchConfig

ArchConfig& ArchConfig::derive() {
  if (!encoder_channels.empty()) {
    feature_maps = encoder_channels.back();
    encoded_dim = input_rows >> encoder_channels.size();
    anchors = encoded_dim * encoded_dim;
  }
  return *this;
}

void ArchConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("arch: " + msg); };
  if (input_rows < 1 || input_cols < 1) fail("input_size must be positive");
  if (input_rows != input_cols) fail("input_size must be square (L == W)");
  if (encoder_channels.empty()) fail("encoder_channels must not be empty");
  for (int c : encoder_channels) {
    if (c < 1) fail("encoder_channels entries must be positive");
  }
  const int factor = 1 << encoder_channels.size();
  if (input_rows % factor != 0 || input_rows / factor != encoded_dim) {
    fail("encoded_dim " + std::to_string(encoded_dim) + " is not reachable from input size " +
         std::to_string(input_rows) + " through " + std::to_string(encoder_channels.size()) +
         " stride-2 blocks");
  }
  if (encoded_dim < 1) fail("encoded_dim must be positive");
  if (feature_maps != encoder_channels.back()) {
    fail("feature_maps must equal the last encoder channel count");
  }
  if (anchors != encoded_dim * encoded_dim) fail("anchors must equal encoded_dim^2");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (max_gt_boxes < 1) fail("max_gt_boxes must be >= 1");
  if (encoder_extra_convs < 0) fail("encoder_extra_convs must be >= 0");
  if (cls_hidden < 1 || det_hidden < 1) fail("head widths must be positive");
  if (decoder_channels.size() != encoder_channels.size()) {
    fail("decoder_channels needs one entry per encoder block");
  }
  for (int c : decoder_channels) {
    if (c < 1) fail("decoder_channels entries must be positive");
  }
}

void to_json(json& j, const ArchConfig& a) {
  j = json{{"input_size", {a.input_rows, a.input_cols}},
           {"feature_maps", a.feature_maps},
           {"encoded_dim", a.encoded_dim},
           {"num_classes", a.num_classes},
           {"anchors", a.anchors},
           {"max_gt_boxes", a.max_gt_boxes},
           {"encoder_channels", a.encoder_channels},
           {"encoder_extra_convs", a.encoder_extra_convs},
           {"cls_hidden", a.cls_hidden},
           {"det_hidden", a.det_hidden},
           {"decoder_channels", a.decoder_channels},
           {"init", a.init == InitScheme::variance_scaled ? "variance_scaled" : "standard_normal"}};
}

void from_json(const json& j, ArchConfig& a) {
  const ArchConfig defaults;
  a = defaults;
  if (j.contains("input_size")) {
    a.input_rows = j.at("input_size").at(0).get<int>();
    a.input_cols = j.at("input_size").at(1).get<int>();
  }
  a.encoder_channels = j.value("encoder_channels", defaults.encoder_channels);
  a.decoder_channels = j.value("decoder_channels", defaults.decoder_channels);
  a.derive();
  a.feature_maps = j.value("feature_maps", a.feature_maps);
  a.encoded_dim = j.value("encoded_dim", a.encoded_dim);
  a.anchors = j.value("anchors", a.anchors);
  a.num_classes = j.value("num_classes", defaults.num_classes);
  a.max_gt_boxes = j.value("max_gt_boxes", defaults.max_gt_boxes);
  a.encoder_extra_convs = j.value("encoder_extra_convs", defaults.encoder_extra_convs);
  a.cls_hidden = j.value("cls_hidden", defaults.cls_hidden);
  a.det_hidden = j.value("det_hidden", defaults.det_hidden);
  const std::string init = j.value("init", std::string("variance_scaled"));
  if (init == "variance_scaled") {
    a.init = InitScheme::variance_scaled;
  } else if (init == "standard_normal") {
    a.init = InitScheme::standard_normal;
  } else {
    throw ConfigError("arch: unknown init scheme '" + init + "'");
  }
}

// ---------------------------------------------------------------------------
// Parameter containers

const char* group_name(Group g) {
  switch (g) {
    case Group::enc: return "enc";
    case Group::cls: return "cls";
    case Group::det: return "det";
    case Group::seg: return "seg";
  }
  return "?";
}

Group parse_group(const std::string& name) {
  for (Group g : kAllGroups) {
    if (name == group_name(g)) return g;
  }
  throw ConfigError("unknown parameter group '" + name + "'");
}

Tensor& ParamGroup::get(const std::string& name) {
  for (auto& a : arrays) {
    if (a.name == name) return a.value;
  }
  throw std::out_of_range("no parameter array named " + name);
}

const Tensor& ParamGroup::get(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a.value;
  }
  throw std::out_of_range("no parameter array named " + name);
}

bool ParamGroup::contains(const std::string& name) const {
  return std::any_of(arrays.begin(), arrays.end(), [&](const auto& a) { return a.name == name; });
}

void ParamGroup::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter array " + name);
  arrays.push_back({std::move(name), std::move(value)});
}

std::size_t ParamGroup::parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : arrays) n += a.value.size();
  return n;
}

bool ParamGroup::all_finite() const {
  return std::all_of(arrays.begin(), arrays.end(), [](const auto& a) { return a.value.all_finite(); });
}

ParamGroup& ModelParams::group(Group g) {
  switch (g) {
    case Group::enc: return enc;
    case Group::cls: return cls;
    case Group::det: return det;
    case Group::seg: return seg;
  }
  return enc;
}

const ParamGroup& ModelParams::group(Group g) const {
  return const_cast<ModelParams*>(this)->group(g);
}

bool ModelParams::all_finite() const {
  return enc.all_finite() && cls.all_finite() && det.all_finite() && seg.all_finite();
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  for (Group g : kAllGroups) {
    for (auto& a : z.group(g).arrays) a.value.fill(0.0);
  }
  return z;
}

std::array<double, 4> delta_norms(const ModelParams& before, const ModelParams& after) {
  std::array<double, 4> out{};
  for (std::size_t gi = 0; gi < kAllGroups.size(); ++gi) {
    const auto& a = before.group(kAllGroups[gi]).arrays;
    const auto& b = after.group(kAllGroups[gi]).arrays;
    if (a.size() != b.size()) throw std::invalid_argument("delta_norms: layout mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = l2_distance(a[i].value, b[i].value);
      acc += d * d;
    }
    out[gi] = std::sqrt(acc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout

const BlockLayout& NetworkLayout::block(Group g) const {
  switch (g) {
    case Group::enc: return enc;
    case Group::cls: return cls;
    case Group::det: return det;
    case Group::seg: return seg;
  }
  return enc;
}

NetworkLayout network_layout(const ArchConfig& arch) {
  arch.validate();
  NetworkLayout net;
  net.enc.group = Group::enc;
  int in = 1;
  for (std::size_t b = 0; b < arch.encoder_channels.size(); ++b) {
    const int ch = arch.encoder_channels[b];
    const std::string base = "enc.block" + std::to_string(b);
    net.enc.layers.push_back({LayerKind::conv, base + ".down", {ch, in, 3, 3}, 2, 1, Activation::relu});
    for (int e = 0; e < arch.encoder_extra_convs; ++e) {
      net.enc.layers.push_back(
          {LayerKind::conv, base + ".conv" + std::to_string(e), {ch, ch, 3, 3}, 1, 1, Activation::relu});
    }
    in = ch;
  }

  net.cls.group = Group::cls;
  net.cls.layers.push_back({LayerKind::global_pool, "cls.pool", {}, 1, 0, Activation::none});
  net.cls.layers.push_back(
      {LayerKind::linear, "cls.feats", {arch.feature_maps, arch.cls_hidden}, 1, 0, Activation::relu});
  net.cls.layers.push_back(
      {LayerKind::linear, "cls.dec", {arch.cls_hidden, arch.num_classes}, 1, 0, Activation::sigmoid});

  net.det.group = Group::det;
  net.det.layers.push_back(
      {LayerKind::conv, "det.conv", {arch.det_hidden, arch.feature_maps, 3, 3}, 1, 1, Activation::relu});
  net.det.layers.push_back({LayerKind::conv, "det.out", {4, arch.det_hidden, 1, 1}, 1, 0, Activation::none});
  net.det.layers.push_back({LayerKind::position_bias, "det.anchor",
                            {4, arch.encoded_dim, arch.encoded_dim}, 1, 0, Activation::relu});

  net.seg.group = Group::seg;
  in = arch.feature_maps;
  for (std::size_t s = 0; s < arch.decoder_channels.size(); ++s) {
    const int ch = arch.decoder_channels[s];
    net.seg.layers.push_back(
        {LayerKind::deconv, "seg.up" + std::to_string(s), {in, ch, 4, 4}, 2, 1, Activation::relu});
    in = ch;
  }
  net.seg.layers.push_back({LayerKind::conv, "seg.out", {1, in, 3, 3}, 1, 1, Activation::sigmoid});
  return net;
}

namespace {

int output_width(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv: return l.weight_shape[0];
    case LayerKind::deconv: return l.weight_shape[1];
    case LayerKind::linear: return l.weight_shape[1];
    default: return 0;
  }
}

double fan_in(const LayerSpec& l) {
  const auto& s = l.weight_shape;
  switch (l.kind) {
    case LayerKind::conv: return static_cast<double>(s[1]) * s[2] * s[3];
    case LayerKind::deconv: return static_cast<double>(s[0]) * s[2] * s[3] / (l.stride * l.stride);
    case LayerKind::linear: return s[0];
    default: return 1.0;
  }
}

}  // namespace

std::vector<Box> anchor_boxes(const ArchConfig& arch) {
  const int d = arch.encoded_dim;
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(d) * d);
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < d; ++c) {
      out.push_back(Box{(c + 0.5) / d, (r + 0.5) / d, 1.0 / d, 1.0 / d});
    }
  }
  return out;
}

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  const NetworkLayout net = network_layout(arch);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const bool literal = arch.init == InitScheme::standard_normal;

  ModelParams p;
  p.arch = arch;
  for (Group g : kAllGroups) {
    ParamGroup& group = p.group(g);
    for (const LayerSpec& l : net.block(g).layers) {
      if (l.kind == LayerKind::global_pool) continue;
      if (l.kind == LayerKind::position_bias) {
        Tensor bias(l.weight_shape);
        if (literal) {
          for (double& v : bias.values()) v = normal(rng);
        } else {
          // Start every anchor at its reference geometry.
          const auto anchors = anchor_boxes(arch);
          const std::size_t k = anchors.size();
          for (std::size_t a = 0; a < k; ++a) {
            bias[0 * k + a] = anchors[a].c_x;
            bias[1 * k + a] = anchors[a].c_y;
            bias[2 * k + a] = anchors[a].l;
            bias[3 * k + a] = anchors[a].w;
          }
        }
        group.add(l.name + ".bias", std::move(bias));
        continue;
      }
      Tensor w(l.weight_shape);
      double gain = l.act == Activation::relu ? 2.0 : 1.0;
      if (l.name == "det.out") gain = 0.01;
      const double std_dev = literal ? 1.0 : std::sqrt(gain / fan_in(l));
      for (double& v : w.values()) v = std_dev * normal(rng);
      Tensor b({output_width(l)});
      if (literal) {
        for (double& v : b.values()) v = normal(rng);
      }
      group.add(l.name + ".weight", std::move(w));
      group.add(l.name + ".bias", std::move(b));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

Tensor apply_layer(const LayerSpec& l, const ParamGroup& g, const Tensor& x) {
  switch (l.kind) {
    case LayerKind::conv:
      return ops::conv2d(x, g.get(l.name + ".weight"), g.get(l.name + ".bias"), l.stride, l.pad);
    case LayerKind::deconv:
      return ops::conv_transpose2d(x, g.get(l.name + ".weight"), g.get(l.name + ".bias"), l.stride,
                                   l.pad);
    case LayerKind::linear:
      return ops::linear(x, g.get(l.name + ".weight"), g.get(l.name + ".bias"));
    case LayerKind::global_pool:
      return ops::global_avg_pool(x);
    case LayerKind::position_bias:
      return ops::add_position_bias(x, g.get(l.name + ".bias"));
  }
  return x;
}

void apply_activation(Activation a, Tensor& y) {
  if (a == Activation::relu) ops::relu_inplace(y);
  if (a == Activation::sigmoid) ops::sigmoid_inplace(y);
}

Tensor run_block(const BlockLayout& block, const ParamGroup& g, Tensor x, BlockTrace* trace) {
  if (trace) {
    trace->activations.clear();
    trace->activations.push_back(x);
  }
  for (const LayerSpec& l : block.layers) {
    Tensor y = apply_layer(l, g, x);
    apply_activation(l.act, y);
    if (trace) trace->activations.push_back(y);
    x = std::move(y);
  }
  return x;
}

// Returns dLoss/d(block input) when need_dx, else an empty tensor. With
// dy_preact, dy is already taken before the last layer's activation.
Tensor backprop_block(const BlockLayout& block, const ParamGroup& g, const BlockTrace& trace,
                      Tensor dy, ParamGroup& grads, bool need_dx, bool dy_preact = false) {
  const int last = static_cast<int>(block.layers.size()) - 1;
  for (int i = last; i >= 0; --i) {
    const LayerSpec& l = block.layers[static_cast<std::size_t>(i)];
    const Tensor& x = trace.activations[static_cast<std::size_t>(i)];
    const Tensor& y = trace.activations[static_cast<std::size_t>(i) + 1];
    const bool skip_act = dy_preact && i == last;
    if (l.act == Activation::relu && !skip_act) ops::relu_backward_inplace(y, dy);
    if (l.act == Activation::sigmoid && !skip_act) ops::sigmoid_backward_inplace(y, dy);
    const bool want_dx = i > 0 || need_dx;
    Tensor dx;
    switch (l.kind) {
      case LayerKind::conv:
        ops::conv2d_backward(x, g.get(l.name + ".weight"), dy, l.stride, l.pad,
                             want_dx ? &dx : nullptr, grads.get(l.name + ".weight"),
                             grads.get(l.name + ".bias"));
        break;
      case LayerKind::deconv:
        ops::conv_transpose2d_backward(x, g.get(l.name + ".weight"), dy, l.stride, l.pad,
                                       want_dx ? &dx : nullptr, grads.get(l.name + ".weight"),
                                       grads.get(l.name + ".bias"));
        break;
      case LayerKind::linear:
        ops::linear_backward(x, g.get(l.name + ".weight"), dy, want_dx ? &dx : nullptr,
                             grads.get(l.name + ".weight"), grads.get(l.name + ".bias"));
        break;
      case LayerKind::global_pool:
        if (want_dx) dx = ops::global_avg_pool_backward(dy, x.shape());
        break;
      case LayerKind::position_bias:
        ops::add_position_bias_backward(dy, grads.get(l.name + ".bias"));
        if (want_dx) dx = std::move(dy);
        break;
    }
    dy = std::move(dx);
  }
  return dy;
}

void require_features(const ModelParams& p, const EncodedFeatures& enc) {
  const auto& f = enc.features;
  if (f.rank() != 4 || f.dim(1) != p.arch.feature_maps || f.dim(2) != p.arch.encoded_dim ||
      f.dim(3) != p.arch.encoded_dim) {
    throw std::invalid_argument("encoded features " + f.shape_string() +
                                " do not match the architecture");
  }
}

Tensor input_tensor(const ModelParams& p, const ImageBatch& batch) {
  const Tensor& px = batch.pixels;
  if (px.rank() != 3 || px.dim(1) != p.arch.input_rows || px.dim(2) != p.arch.input_cols) {
    throw std::invalid_argument("image batch " + px.shape_string() + " does not match input size " +
                                std::to_string(p.arch.input_rows) + "x" +
                                std::to_string(p.arch.input_cols));
  }
  if (px.dim(0) < 1) throw std::invalid_argument("image batch is empty");
  return px.reshaped({px.dim(0), 1, px.dim(1), px.dim(2)});
}

// [M,4,d,d] -> [M,K,4]
Tensor grid_to_boxes(const Tensor& grid) {
  const int m = grid.dim(0);
  const int k = grid.dim(2) * grid.dim(3);
  Tensor out({m, k, 4});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < 4; ++j) {
      for (int a = 0; a < k; ++a) {
        out.at(i, a, j) = grid[(static_cast<std::size_t>(i) * 4 + j) * k + a];
      }
    }
  }
  return out;
}

Tensor boxes_to_grid(const Tensor& boxes, int d) {
  const int m = boxes.dim(0);
  const int k = boxes.dim(1);
  Tensor grid({m, 4, d, d});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < 4; ++j) {
      for (int a = 0; a < k; ++a) {
        grid[(static_cast<std::size_t>(i) * 4 + j) * k + a] = boxes.at(i, a, j);
      }
    }
  }
  return grid;
}

}  // namespace

EncodedFeatures EncodedFeatures::select(const std::vector<int>& rows) const {
  std::vector<int> shape = features.shape();
  shape[0] = static_cast<int>(rows.size());
  EncodedFeatures out{Tensor(shape)};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = features.row(rows[i]);
    std::copy(src.begin(), src.end(), out.features.row(static_cast<int>(i)).begin());
  }
  return out;
}

EncodedFeatures encode(const ModelParams& p, const ImageBatch& batch, EncoderCounter* counter) {
  const NetworkLayout net = network_layout(p.arch);
  Tensor x = input_tensor(p, batch);
  if (counter) {
    counter->batches += 1;
    counter->samples += x.dim(0);
  }
  return EncodedFeatures{run_block(net.enc, p.enc, std::move(x), nullptr)};
}

Tensor classify(const ModelParams& p, const EncodedFeatures& enc) {
  require_features(p, enc);
  const NetworkLayout net = network_layout(p.arch);
  return run_block(net.cls, p.cls, enc.features, nullptr);
}

Tensor detect(const ModelParams& p, const EncodedFeatures& enc) {
  require_features(p, enc);
  const NetworkLayout net = network_layout(p.arch);
  return grid_to_boxes(run_block(net.det, p.det, enc.features, nullptr));
}

Tensor segment(const ModelParams& p, const EncodedFeatures& enc) {
  require_features(p, enc);
  const NetworkLayout net = network_layout(p.arch);
  Tensor y = run_block(net.seg, p.seg, enc.features, nullptr);
  return y.reshaped({y.dim(0), y.dim(2), y.dim(3)});
}

ForwardPass forward(const ModelParams& p, const ImageBatch& batch, HeadSelection heads) {
  const NetworkLayout net = network_layout(p.arch);
  ForwardPass f;
  f.input = input_tensor(p, batch);
  f.features.features = run_block(net.enc, p.enc, f.input, &f.enc_trace);
  if (heads.cls) f.cls = run_block(net.cls, p.cls, f.features.features, &f.cls_trace);
  if (heads.det) {
    f.det = grid_to_boxes(run_block(net.det, p.det, f.features.features, &f.det_trace));
  }
  if (heads.seg) {
    Tensor y = run_block(net.seg, p.seg, f.features.features, &f.seg_trace);
    f.seg = y.reshaped({y.dim(0), y.dim(2), y.dim(3)});
  }
  return f;
}

ModelParams backward(const ModelParams& p, const ForwardPass& f, const OutputGrads& grads,
                     bool encoder) {
  const NetworkLayout net = network_layout(p.arch);
  ModelParams g = p.zeros_like();
  Tensor d_features(f.features.features.shape());
  bool any = false;
  auto accumulate = [&](const Tensor& d) {
    for (std::size_t i = 0; i < d.size(); ++i) d_features[i] += d[i];
    any = true;
  };
  if (grads.cls) {
    if (!f.cls) throw std::logic_error("backward: classification head was not run");
    require_same_shape(*grads.cls, *f.cls, "cls gradient");
    accumulate(backprop_block(net.cls, p.cls, f.cls_trace, *grads.cls, g.cls, encoder, grads.sigmoid_logits));
  }
  if (grads.det) {
    if (!f.det) throw std::logic_error("backward: detection head was not run");
    require_same_shape(*grads.det, *f.det, "det gradient");
    accumulate(backprop_block(net.det, p.det, f.det_trace,
                              boxes_to_grid(*grads.det, p.arch.encoded_dim), g.det, encoder));
  }
  if (grads.seg) {
    if (!f.seg) throw std::logic_error("backward: segmentation head was not run");
    require_same_shape(*grads.seg, *f.seg, "seg gradient");
    const Tensor& s = *grads.seg;
    accumulate(backprop_block(net.seg, p.seg, f.seg_trace,
                              s.reshaped({s.dim(0), 1, s.dim(1), s.dim(2)}), g.seg, encoder,
                              grads.sigmoid_logits));
  }
  if (encoder && any) {
    backprop_block(net.enc, p.enc, f.enc_trace, std::move(d_features), g.enc, false);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'C', 'X', 'C', 'K', 'P', 'T', '1'};

std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

void compare_arch(const ArchConfig& file, const ArchConfig& want) {
  json jf = file;
  json jw = want;
  for (auto it = jw.begin(); it != jw.end(); ++it) {
    if (!jf.contains(it.key()) || jf[it.key()] != it.value()) {
      throw ConfigError("checkpoint arch mismatch: " + it.key() + " is " +
                        (jf.contains(it.key()) ? jf[it.key()].dump() : "missing") +
                        " in file, expected " + it.value().dump());
    }
  }
}

}  // namespace

void save_params(const ModelParams& p, const std::filesystem::path& path) {
  json header;
  header["format"] = "scanmtl-checkpoint";
  header["version"] = 1;
  header["arch"] = p.arch;
  json index = json::array();
  std::string payload;
  for (Group g : kAllGroups) {
    for (const auto& a : p.group(g).arrays) {
      index.push_back({{"group", group_name(g)}, {"name", a.name}, {"shape", a.value.shape()}});
      payload.append(reinterpret_cast<const char*>(a.value.data()), a.value.size() * sizeof(double));
    }
  }
  header["arrays"] = index;
  const std::string head = header.dump();
  const std::uint64_t head_len = head.size();
  std::uint64_t sum = fnv1a(head.data(), head.size());
  sum = fnv1a(payload.data(), payload.size(), sum);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&sum), sizeof(sum));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelParams load_params(const std::filesystem::path& path, const std::optional<ArchConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string() + ": ";
  if (bytes.size() < sizeof(kMagic) + 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError(where + "not a checkpoint or truncated");
  }
  std::uint64_t head_len = 0;
  std::memcpy(&head_len, bytes.data() + sizeof(kMagic), sizeof(head_len));
  const std::size_t head_off = sizeof(kMagic) + sizeof(head_len);
  if (head_len > bytes.size() - head_off - sizeof(std::uint64_t)) {
    throw DataError(where + "truncated header");
  }
  json header;
  try {
    header = json::parse(bytes.substr(head_off, head_len));
  } catch (const json::exception& e) {
    throw DataError(where + "corrupt header: " + e.what());
  }

  ModelParams p;
  std::size_t payload_bytes = 0;
  try {
    p.arch = header.at("arch").get<ArchConfig>();
    for (const auto& entry : header.at("arrays")) {
      payload_bytes += element_count(entry.at("shape").get<std::vector<int>>()) * sizeof(double);
    }
  } catch (const json::exception& e) {
    throw DataError(where + "corrupt header: " + e.what());
  }
  const std::size_t payload_off = head_off + head_len;
  if (bytes.size() != payload_off + payload_bytes + sizeof(std::uint64_t)) {
    throw DataError(where + "truncated or oversized payload");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + payload_off + payload_bytes, sizeof(stored));
  std::uint64_t sum = fnv1a(bytes.data() + head_off, head_len);
  sum = fnv1a(bytes.data() + payload_off, payload_bytes, sum);
  if (sum != stored) throw DataError(where + "checksum mismatch");

  std::size_t off = payload_off;
  for (const auto& entry : header.at("arrays")) {
    Tensor t(entry.at("shape").get<std::vector<int>>());
    std::memcpy(t.data(), bytes.data() + off, t.size() * sizeof(double));
    off += t.size() * sizeof(double);
    p.group(parse_group(entry.at("group").get<std::string>()))
        .add(entry.at("name").get<std::string>(), std::move(t));
  }
  if (expected) compare_arch(p.arch, *expected);
  ModelParams reference;
  try {
    reference = init_params(p.arch, 0);
  } catch (const ConfigError& e) {
    throw DataError(where + e.what());
  }
  for (Group g : kAllGroups) {
    const auto& got = p.group(g).arrays;
    const auto& want = reference.group(g).arrays;
    bool ok = got.size() == want.size();
    for (std::size_t i = 0; ok && i < got.size(); ++i) {
      ok = got[i].name == want[i].name && got[i].value.shape() == want[i].value.shape();
    }
    if (!ok) throw DataError(where + "array layout does not match arch for group " + group_name(g));
  }
  return p;
}

}  // namespace mcx
