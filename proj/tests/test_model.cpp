#include <doctest.h>

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "scanmtl/model.hpp"

using namespace mcx;

namespace {

ArchConfig arch_for(int side, std::vector<int> enc) {
  ArchConfig a;
  a.input_rows = a.input_cols = side;
  a.decoder_channels.assign(enc.size(), 4);
  a.encoder_channels = std::move(enc);
  a.derive();
  return a;
}

ImageBatch pick_rows(const ImageBatch& b, const std::vector<int>& rows) {
  ImageBatch out;
  const int l = b.pixels.dim(1), w = b.pixels.dim(2);
  out.pixels = Tensor({static_cast<int>(rows.size()), l, w});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(b.pixels.row(rows[i]).begin(), b.pixels.row(rows[i]).end(), out.pixels.row(static_cast<int>(i)).begin());
    out.ids.push_back(b.ids[rows[i]]);
  }
  return out;
}

bool rows_equal(const Tensor& a, int i, const Tensor& b, int j) {
  const auto ra = a.row(i), rb = b.row(j);
  return std::equal(ra.begin(), ra.end(), rb.begin(), rb.end());
}

}  // namespace

TEST_CASE("encoder output shape is M x N x d x d") {
  const ArchConfig a = arch_for(32, {4, 8, 8});
  CHECK(a.feature_maps == 8);
  CHECK(a.encoded_dim == 4);
  const ModelParams p = init_params(a, 1);
  const EncodedFeatures f = encode(p, fixture::random_batch(2, 32, 32, 1));
  CHECK(f.features.shape() == std::vector<int>{2, 8, 4, 4});
}

TEST_CASE("head shapes and ranges over a config sweep") {
  for (int side : {8, 16, 24, 32, 48, 64}) {
    for (std::vector<int> enc : {std::vector<int>{4}, std::vector<int>{4, 6}, std::vector<int>{3, 5, 7}}) {
      if (side % (1 << enc.size()) != 0) continue;
      ArchConfig a = arch_for(side, enc);
      a.num_classes = 3;
      REQUIRE_NOTHROW(a.validate());
      const ModelParams p = init_params(a, 2);
      const auto f = encode(p, fixture::random_batch(3, side, side, 2));
      const Tensor c = classify(p, f), d = detect(p, f), s = segment(p, f);
      CHECK(c.shape() == std::vector<int>{3, 3});
      CHECK(d.shape() == std::vector<int>{3, a.anchors, 4});
      CHECK(s.shape() == std::vector<int>{3, side, side});
      for (double v : c.values()) CHECK((v > 0.0 && v < 1.0));
      for (double v : d.values()) CHECK(v >= 0.0);
      for (double v : s.values()) CHECK((v > 0.0 && v < 1.0));
    }
  }
}

TEST_CASE("batch rows are independent") {
  const ArchConfig a = fixture::tiny_arch();
  const ModelParams p = init_params(a, 4);
  const ImageBatch b = fixture::random_batch(3, 16, 16, 9);
  const auto full = forward(p, b, {true, true, true});
  const ImageBatch perm = pick_rows(b, {2, 0, 0});
  const auto other = forward(p, perm, {true, true, true});
  for (const auto& [src, dst] : {std::pair{2, 0}, std::pair{0, 1}, std::pair{0, 2}}) {
    CHECK(rows_equal(full.features.features, src, other.features.features, dst));
    CHECK(rows_equal(*full.cls, src, *other.cls, dst));
    CHECK(rows_equal(*full.det, src, *other.det, dst));
    CHECK(rows_equal(*full.seg, src, *other.seg, dst));
  }
  // Inference calls agree bitwise with the training forward.
  const auto f = encode(p, b);
  CHECK(f.features == full.features.features);
  CHECK(classify(p, f) == *full.cls);
  CHECK(detect(p, f) == *full.det);
  CHECK(segment(p, f) == *full.seg);
}

TEST_CASE("encoder is locally Lipschitz in a single pixel") {
  const ArchConfig a;
  const ModelParams p = init_params(a, 5);
  ImageBatch b = fixture::random_batch(1, 64, 64, 5);
  const Tensor base = encode(p, b).features;
  b.pixels.at(0, 31, 17) += 1e-3;
  const double change = l2_distance(base, encode(p, b).features);
  CHECK(change > 0.0);
  // Measured at about 2.5e-4 for this seed; one pixel cannot move the
  // features by more than a small multiple of the perturbation.
  CHECK(change < 1e-2);
}

TEST_CASE("anchor geometry is fixed by the arch") {
  const ArchConfig a = fixture::tiny_arch();
  const auto anchors = anchor_boxes(a);
  REQUIRE(anchors.size() == 16);
  // k = r * d + c
  CHECK(anchors[6].c_x == doctest::Approx(2.5 / 4));
  CHECK(anchors[6].c_y == doctest::Approx(1.5 / 4));
  CHECK(anchors[6].w == doctest::Approx(0.25));
  CHECK(anchors[6].l == doctest::Approx(0.25));
  CHECK(anchor_boxes(init_params(a, 9).arch) == anchors);
}

TEST_CASE("gradients match central differences for every head") {
  const ArchConfig a = fixture::tiny_arch();
  for (auto head : {fixture::Head::cls, fixture::Head::det, fixture::Head::seg}) {
    const auto gc = fixture::gradient_check(a, 17, head);
    CHECK(gc.checked > 500);
    CHECK(gc.worst < 1e-3);
    CHECK(gc.skipped * 100 < gc.checked);
  }
}

TEST_CASE("backward skips the encoder on request and zeroes idle heads") {
  const ArchConfig a = fixture::tiny_arch();
  const ModelParams p = init_params(a, 3);
  const auto f = forward(p, fixture::random_batch(2, 16, 16, 3), {true, false, false});
  OutputGrads og;
  og.cls = Tensor({2, 1}, 1.0);
  const ModelParams g = backward(p, f, og, false);
  const ModelParams z = p.zeros_like();
  CHECK(g.enc == z.enc);
  CHECK(g.det == z.det);
  CHECK(g.seg == z.seg);
  CHECK_FALSE(g.cls == z.cls);
}

TEST_CASE("init is deterministic and scheme-dependent") {
  ArchConfig a = fixture::tiny_arch();
  CHECK(init_params(a, 1) == init_params(a, 1));
  CHECK_FALSE(init_params(a, 1) == init_params(a, 2));
  a.init = InitScheme::standard_normal;
  const ModelParams n = init_params(a, 1);
  CHECK(n.all_finite());
  CHECK_FALSE(n == init_params(fixture::tiny_arch(), 1));
}

TEST_CASE("delta_norms per group") {
  const ModelParams p = init_params(fixture::tiny_arch(), 1);
  ModelParams q = p;
  q.seg.arrays[0].value[0] += 3.0;
  q.seg.arrays[0].value[1] -= 4.0;
  const auto d = delta_norms(p, q);
  CHECK(d[0] == 0.0);
  CHECK(d[1] == 0.0);
  CHECK(d[2] == 0.0);
  CHECK(d[3] == doctest::Approx(5.0));
}

TEST_CASE("arch validation and JSON round trip") {
  ArchConfig a = fixture::tiny_arch();
  nlohmann::json j = a;
  CHECK(j.get<ArchConfig>() == a);
  ArchConfig bad = a;
  bad.encoded_dim = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = a;
  bad.input_cols = 32;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = a;
  bad.decoder_channels = {4};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = a;
  bad.num_classes = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(parse_group("det") == Group::det);
  CHECK_THROWS_AS(parse_group("head"), ConfigError);
}

TEST_CASE("checkpoint round trip and corruption") {
  fixture::TempDir tmp("ckpt");
  const ModelParams p = init_params(fixture::tiny_arch(), 8);
  const auto path = tmp.path() / "m.ckpt";
  save_params(p, path);
  const ModelParams back = load_params(path);
  CHECK(back == p);
  CHECK(load_params(path, p.arch) == p);

  ArchConfig other = p.arch;
  other.num_classes = 2;
  try {
    load_params(path, other);
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("num_classes") != std::string::npos);
  }

  const auto size = std::filesystem::file_size(path);
  std::filesystem::copy_file(path, tmp.path() / "t.ckpt");
  std::filesystem::resize_file(tmp.path() / "t.ckpt", size - 17);
  CHECK_THROWS_AS(load_params(tmp.path() / "t.ckpt"), DataError);

  std::filesystem::copy_file(path, tmp.path() / "f.ckpt");
  {
    std::fstream f(tmp.path() / "f.ckpt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(size / 2));
    const char c = static_cast<char>(f.get());
    f.seekp(static_cast<std::streamoff>(size / 2));
    f.put(static_cast<char>(~c));
  }
  CHECK_THROWS_AS(load_params(tmp.path() / "f.ckpt"), DataError);
  CHECK_THROWS_AS(load_params(tmp.path() / "none.ckpt"), DataError);
}
