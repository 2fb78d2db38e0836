#include "scanmtl/protocol.hpp"

#include <nlohmann/json.hpp>

#include "scanmtl/transfer.hpp"

namespace mcx {

ProtocolData ProtocolData::from_joint(const Dataset& d, std::optional<Dataset> new_disease) {
  ProtocolData out;
  out.cls = restrict_tasks(d, {true, false, false});
  out.det = restrict_tasks(d, {true, true, false});
  out.seg = restrict_tasks(d, {true, false, true});
  out.new_disease = std::move(new_disease);
  return out;
}

ProtocolResult run_protocol(const ProtocolData& data, const RunConfig& cfg,
                            const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  std::optional<StepLog> log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::filesystem::remove(*out_dir / "steps.jsonl");
    log.emplace(*out_dir / "steps.jsonl");
    save_json(nlohmann::json(cfg), *out_dir / "config.json");
  }
  StepLog* lg = log ? &*log : nullptr;

  ProtocolResult res;
  res.params = init_params(cfg.arch, cfg.seed);
  auto handoff = [&](const PhaseReport& rep) {
    res.reports.push_back(rep);
    if (!out_dir) return;
    const auto path = *out_dir / ("phase_" + rep.name + ".ckpt");
    save_params(res.params, path);
    res.params = load_params(path);
  };

  handoff(pretrain_classifier(res.params, data.cls, cfg.cls, lg));
  handoff(pretrain_detection(res.params, data.det, cfg.det, lg));
  handoff(pretrain_segmentation(res.params, data.seg, cfg.seg, lg));
  if (cfg.mtl_mode == MtlMode::alternating) {
    handoff(train_mtl_alternating(res.params, data.det, data.seg, cfg.mtl, lg));
  } else {
    handoff(train_mtl_joint(res.params, with_boxes_from_masks(data.seg), cfg.mtl, lg));
  }
  if (data.new_disease) {
    TransferResult t = finetune_new_disease(res.params, *data.new_disease, cfg.transfer_classes, cfg.transfer,
                                            cfg.transfer_options, lg);
    res.params = std::move(t.params);
    handoff(t.report);
  }

  if (out_dir) {
    nlohmann::json reports = nlohmann::json::array();
    for (const auto& r : res.reports) reports.push_back(report_json(r));
    save_json(reports, *out_dir / "reports.json");
  }
  return res;
}

}  // namespace mcx
