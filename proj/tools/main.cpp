// scanmtl command-line driver.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "scanmtl/commands.hpp"
#include "scanmtl/errors.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "JSON run configuration (defaults when omitted)");
  sub->add_option("--set", c.overrides, "Override a config key, e.g. phases.mtl.n_steps=0")
      ->type_name("KEY=VALUE");
}

// Applies "a.b.c=value" edits; value is parsed as JSON, falling back to a
// plain string.
json apply_overrides(json j, const std::vector<std::string>& edits) {
  for (const auto& e : edits) {
    const auto eq = e.find('=');
    if (eq == std::string::npos || eq == 0) throw mcx::ConfigError("override '" + e + "' is not KEY=VALUE");
    std::string pointer = "/" + e.substr(0, eq);
    for (auto& ch : pointer) {
      if (ch == '.') ch = '/';
    }
    json value;
    try {
      value = json::parse(e.substr(eq + 1));
    } catch (const json::exception&) {
      value = e.substr(eq + 1);
    }
    try {
      j[json::json_pointer(pointer)] = value;
    } catch (const json::exception& ex) {
      throw mcx::ConfigError("override '" + e + "': " + ex.what());
    }
  }
  return j;
}

mcx::RunConfig resolve(const Common& c, const std::vector<std::string>& extra = {}) {
  json j = json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw mcx::ConfigError("cannot read config " + c.config);
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw mcx::ConfigError("config " + c.config + " is not valid JSON: " + e.what());
    }
  }
  std::vector<std::string> edits = c.overrides;
  edits.insert(edits.end(), extra.begin(), extra.end());
  return mcx::run_config_from_json(apply_overrides(std::move(j), edits));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shared-encoder classification, detection and segmentation on grayscale scans"};
  app.require_subcommand(1);

  Common common;
  std::string data, det_data, seg_data, test_data, in, out, checkpoint, mode, tasks = "cls,det,seg";
  bool freeze_feats = false;
  int classes = 0;
  int limit = -1;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic dataset splits");
  add_common(gen, common);
  gen->add_option("-o,--out", out, "Output directory")->required();

  std::vector<std::pair<CLI::App*, mcx::cmd::Pretrain>> pre;
  for (auto [name, which] : {std::pair{"pretrain-cls", mcx::cmd::Pretrain::cls},
                             std::pair{"pretrain-det", mcx::cmd::Pretrain::det},
                             std::pair{"pretrain-seg", mcx::cmd::Pretrain::seg}}) {
    auto* s = app.add_subcommand(name, "Pre-training phase");
    add_common(s, common);
    s->add_option("-d,--data", data, "Dataset directory")->required();
    s->add_option("-i,--in", in, "Input checkpoint (fresh init when omitted)");
    s->add_option("-o,--out", out, "Output checkpoint")->required();
    pre.emplace_back(s, which);
  }

  auto* mtl = app.add_subcommand("train-mtl", "Multi-task training");
  add_common(mtl, common);
  mtl->add_option("-d,--data", data, "Dataset directory for both tasks");
  mtl->add_option("--det-data", det_data, "Detection dataset (defaults to --data)");
  mtl->add_option("--seg-data", seg_data, "Segmentation dataset (defaults to --data)");
  mtl->add_option("-i,--in", in, "Input checkpoint")->required();
  mtl->add_option("-o,--out", out, "Output checkpoint")->required();
  mtl->add_option("--mode", mode, "alternating | joint (config default when omitted)")->check(CLI::IsMember({"alternating", "joint"}));

  auto* ft = app.add_subcommand("finetune", "Transfer the classifier to a new disease");
  add_common(ft, common);
  ft->add_option("-d,--data", data, "New-disease training set")->required();
  ft->add_option("-t,--test", test_data, "New-disease test set")->required();
  ft->add_option("-i,--in", in, "Input checkpoint")->required();
  ft->add_option("-o,--out", out, "Output checkpoint")->required();
  auto* freeze_flag = ft->add_flag("--freeze-feats,!--no-freeze-feats", freeze_feats,
                                   "Freeze encoder and feature layers (config default when omitted)");
  ft->add_option("--classes", classes, "New class count (config default when omitted)");

  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a dataset");
  add_common(ev, common);
  ev->add_option("-k,--checkpoint", checkpoint, "Checkpoint")->required();
  ev->add_option("-d,--data", data, "Dataset directory")->required();
  ev->add_option("--tasks", tasks, "Subset of cls,det,seg");
  ev->add_option("-o,--out", out, "Report directory")->required();

  auto* rd = app.add_subcommand("render", "Write overlay images");
  add_common(rd, common);
  rd->add_option("-k,--checkpoint", checkpoint, "Checkpoint")->required();
  rd->add_option("-d,--data", data, "Dataset directory")->required();
  rd->add_option("-o,--out", out, "Output directory")->required();
  rd->add_option("--limit", limit, "Render only the first N samples");

  auto* proto = app.add_subcommand("run-protocol", "Run every phase in order");
  add_common(proto, common);
  proto->add_option("-d,--data", data, "Directory written by gen-data")->required();
  proto->add_option("-o,--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (gen->parsed()) {
      mcx::cmd::gen_data(resolve(common), out);
    }
    for (auto [s, which] : pre) {
      if (!s->parsed()) continue;
      std::optional<fs::path> input;
      if (!in.empty()) input = in;
      const auto rep = mcx::cmd::pretrain(resolve(common), which, data, input, out);
      std::cout << mcx::report_json(rep).dump() << '\n';
    }
    if (mtl->parsed()) {
      if (det_data.empty()) det_data = data;
      if (seg_data.empty()) seg_data = data;
      if (det_data.empty() || seg_data.empty()) throw mcx::ConfigError("train-mtl needs --data or --det-data/--seg-data");
      std::vector<std::string> extra;
      if (!mode.empty()) extra.push_back("mtl_mode=\"" + mode + "\"");
      const auto cfg = resolve(common, extra);
      const auto rep = mcx::cmd::train_mtl(cfg, det_data, seg_data, in, out);
      std::cout << mcx::report_json(rep).dump() << '\n';
    }
    if (ft->parsed()) {
      std::vector<std::string> extra;
      if (freeze_flag->count() > 0) extra.push_back(std::string("transfer.freeze_feats=") + (freeze_feats ? "true" : "false"));
      if (classes > 0) extra.push_back("transfer.classes=" + std::to_string(classes));
      const auto res = mcx::cmd::finetune(resolve(common, extra), data, test_data, in, out);
      std::cout << "before\n" << mcx::report_table(res.before) << "after\n" << mcx::report_table(res.after);
    }
    if (ev->parsed()) {
      const auto rep = mcx::cmd::evaluate(resolve(common), checkpoint, data, mcx::TaskSet::parse(tasks), out);
      std::cout << mcx::report_table(rep);
    }
    if (rd->parsed()) {
      mcx::cmd::render(resolve(common), checkpoint, data, out, limit);
    }
    if (proto->parsed()) {
      const auto res = mcx::cmd::protocol(resolve(common), data, out);
      for (const auto& r : res.reports) std::cout << mcx::report_json(r).dump() << '\n';
    }
  } catch (const mcx::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const mcx::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const mcx::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
