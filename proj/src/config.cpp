#include "scanmtl/config.hpp"

#include <fstream>

#include "scanmtl/errors.hpp"

namespace mcx {

using nlohmann::json;

namespace {

constexpr const char* kPhaseNames[] = {"cls", "det", "seg", "mtl", "transfer"};

TrainConfig& phase(RunConfig& c, const std::string& name) {
  if (name == "cls") return c.cls;
  if (name == "det") return c.det;
  if (name == "seg") return c.seg;
  if (name == "mtl") return c.mtl;
  return c.transfer;
}

const TrainConfig& phase(const RunConfig& c, const std::string& name) {
  return phase(const_cast<RunConfig&>(c), name);
}

SyntheticConfig split(int n, std::uint64_t seed, const std::string& prefix,
                      SyntheticStyle style = SyntheticStyle::standard) {
  SyntheticConfig s;
  s.num_samples = n;
  s.seed = seed;
  s.id_prefix = prefix;
  s.style = style;
  return s;
}

}  // namespace

RunConfig::RunConfig() {
  splits = {{"train", split(2000, 1, "train")},
            {"test", split(500, 2, "test")},
            {"new_train", split(100, 101, "newtrain", SyntheticStyle::inverted)},
            {"new_test", split(50, 102, "newtest", SyntheticStyle::inverted)}};
  for (TrainConfig* t : {&cls, &det, &seg, &mtl, &transfer}) {
    t->learning_rate = 2e-3;
    t->batch_size = 16;
  }
  cls.n_steps = 600;
  det.n_steps = 800;
  det.filter_steps = 100;
  seg.n_steps = 800;
  seg.filter_steps = 100;
  mtl.n_steps = 2000;
  transfer.n_steps = 300;
  for (TrainConfig* t : {&cls, &mtl, &transfer}) t->filter_steps = 0;
}

void RunConfig::validate() const {
  arch.validate();
  for (const auto& s : splits) {
    if (s.name.empty()) throw ConfigError("split names must not be empty");
    s.synthetic.validate();
  }
  for (const char* n : kPhaseNames) {
    try {
      phase(*this, n).validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("phases.") + n + ": " + e.what());
    }
  }
  if (transfer_classes < 1) throw ConfigError("transfer.classes must be >= 1");
  if (!(transfer_options.feats_lr_scale >= 0)) throw ConfigError("transfer.feats_lr_scale must be >= 0");
  if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
  if (eval.bootstrap.resamples < 1) throw ConfigError("eval.resamples must be >= 1");
  if (!(eval.bootstrap.alpha > 0 && eval.bootstrap.alpha < 1)) throw ConfigError("eval.alpha must lie in (0, 1)");
  const auto& inf = eval.inference;
  if (!(inf.threshold >= 0 && inf.threshold <= 1)) throw ConfigError("inference.threshold must lie in [0, 1]");
  if (!(inf.keep.min_area >= 0)) throw ConfigError("inference.min_area must be >= 0");
  if (!(inf.keep.merge_iou >= 0 && inf.keep.merge_iou <= 1)) {
    throw ConfigError("inference.merge_iou must lie in [0, 1]");
  }
}

void to_json(json& j, const SyntheticConfig& c) {
  j = json{{"image_size", {c.rows, c.cols}},
           {"num_samples", c.num_samples},
           {"positive_fraction", c.positive_fraction},
           {"blob_count", {c.blob_count_min, c.blob_count_max}},
           {"blob_radius", {c.blob_radius_min, c.blob_radius_max}},
           {"noise_std", c.noise_std},
           {"style", c.style == SyntheticStyle::standard ? "standard" : "inverted"},
           {"seed", c.seed},
           {"id_prefix", c.id_prefix}};
}

void from_json(const json& j, SyntheticConfig& c) {
  const SyntheticConfig d = c;
  if (j.contains("image_size")) {
    c.rows = j.at("image_size").at(0).get<int>();
    c.cols = j.at("image_size").at(1).get<int>();
  }
  c.num_samples = j.value("num_samples", d.num_samples);
  c.positive_fraction = j.value("positive_fraction", d.positive_fraction);
  if (j.contains("blob_count")) {
    c.blob_count_min = j.at("blob_count").at(0).get<int>();
    c.blob_count_max = j.at("blob_count").at(1).get<int>();
  }
  if (j.contains("blob_radius")) {
    c.blob_radius_min = j.at("blob_radius").at(0).get<double>();
    c.blob_radius_max = j.at("blob_radius").at(1).get<double>();
  }
  c.noise_std = j.value("noise_std", d.noise_std);
  const std::string style = j.value("style", std::string(d.style == SyntheticStyle::standard ? "standard" : "inverted"));
  if (style == "standard") {
    c.style = SyntheticStyle::standard;
  } else if (style == "inverted") {
    c.style = SyntheticStyle::inverted;
  } else {
    throw ConfigError("unknown synthetic style '" + style + "'");
  }
  c.seed = j.value("seed", d.seed);
  c.id_prefix = j.value("id_prefix", d.id_prefix);
}

void to_json(json& j, const RunConfig& c) {
  json splits = json::object();
  for (const auto& s : c.splits) splits[s.name] = s.synthetic;
  json phases = json::object();
  for (const char* n : kPhaseNames) phases[n] = phase(c, n);
  const auto& inf = c.eval.inference;
  j = json{{"seed", c.seed},
           {"arch", c.arch},
           {"splits", splits},
           {"phases", phases},
           {"mtl_mode", mtl_mode_name(c.mtl_mode)},
           {"transfer",
            {{"classes", c.transfer_classes},
             {"freeze_feats", c.transfer_options.freeze_feats},
             {"feats_lr_scale", c.transfer_options.feats_lr_scale}}},
           {"inference",
            {{"threshold", inf.threshold}, {"min_area", inf.keep.min_area}, {"merge_iou", inf.keep.merge_iou}}},
           {"eval",
            {{"resamples", c.eval.bootstrap.resamples},
             {"alpha", c.eval.bootstrap.alpha},
             {"seed", c.eval.bootstrap.seed},
             {"batch_size", c.eval.batch_size},
             {"mask_threshold", c.eval.mask_threshold},
             {"map_iou", c.eval.map_iou}}}};
}

void from_json(const json& j, RunConfig& c) {
  c = RunConfig{};
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  c.seed = j.value("seed", c.seed);
  if (j.contains("arch")) c.arch = j.at("arch").get<ArchConfig>();

  if (j.contains("splits")) {
    std::vector<SplitSpec> defaults = c.splits;
    c.splits.clear();
    for (const auto& [name, body] : j.at("splits").items()) {
      SyntheticConfig s;
      for (const auto& d : defaults) {
        if (d.name == name) s = d.synthetic;
      }
      if (s.id_prefix == SyntheticConfig{}.id_prefix) s.id_prefix = name;
      body.get_to(s);
      c.splits.push_back({name, s});
    }
  }
  for (auto& s : c.splits) {
    // Images follow the model input unless the split says otherwise.
    if (!(j.contains("splits") && j["splits"].contains(s.name) && j["splits"][s.name].contains("image_size"))) {
      s.synthetic.rows = c.arch.input_rows;
      s.synthetic.cols = c.arch.input_cols;
    }
  }

  const json shared = j.value("train", json::object());
  const json phases = j.value("phases", json::object());
  for (const char* n : kPhaseNames) {
    json merged = phase(c, n);
    merged.merge_patch(shared);
    if (phases.contains(n)) merged.merge_patch(phases.at(n));
    phase(c, n) = merged.get<TrainConfig>();
  }
  c.mtl_mode = parse_mtl_mode(j.value("mtl_mode", std::string(mtl_mode_name(c.mtl_mode))));
  if (j.contains("transfer")) {
    const json& t = j.at("transfer");
    c.transfer_classes = t.value("classes", c.transfer_classes);
    c.transfer_options.freeze_feats = t.value("freeze_feats", c.transfer_options.freeze_feats);
    c.transfer_options.feats_lr_scale = t.value("feats_lr_scale", c.transfer_options.feats_lr_scale);
  }
  if (j.contains("inference")) {
    const json& t = j.at("inference");
    auto& inf = c.eval.inference;
    inf.threshold = t.value("threshold", inf.threshold);
    inf.keep.min_area = t.value("min_area", inf.keep.min_area);
    inf.keep.merge_iou = t.value("merge_iou", inf.keep.merge_iou);
  }
  if (j.contains("eval")) {
    const json& t = j.at("eval");
    c.eval.bootstrap.resamples = t.value("resamples", c.eval.bootstrap.resamples);
    c.eval.bootstrap.alpha = t.value("alpha", c.eval.bootstrap.alpha);
    c.eval.bootstrap.seed = t.value("seed", c.eval.bootstrap.seed);
    c.eval.batch_size = t.value("batch_size", c.eval.batch_size);
    c.eval.mask_threshold = t.value("mask_threshold", c.eval.mask_threshold);
    c.eval.map_iou = t.value("map_iou", c.eval.map_iou);
  }
  // Filter thresholds used while training follow the inference threshold
  // unless a phase overrides them.
  for (const char* n : kPhaseNames) {
    const bool explicit_threshold = (phases.contains(n) && phases.at(n).contains("filter_threshold")) ||
                                    shared.contains("filter_threshold");
    if (!explicit_threshold) phase(c, n).filter_threshold = c.eval.inference.threshold;
  }
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_json(const json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace mcx
