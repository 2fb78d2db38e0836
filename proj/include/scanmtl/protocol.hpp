#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "scanmtl/config.hpp"
#include "scanmtl/data.hpp"
#include "scanmtl/model.hpp"
#include "scanmtl/training.hpp"

namespace mcx {

struct ProtocolData {
  Dataset cls;
  Dataset det;
  Dataset seg;
  /// Transfer phase runs only when present.
  std::optional<Dataset> new_disease;

  /// cls/det/seg views of one jointly labeled dataset.
  static ProtocolData from_joint(const Dataset& d, std::optional<Dataset> new_disease = std::nullopt);
};

struct ProtocolResult {
  ModelParams params;
  std::vector<PhaseReport> reports;
};

/// Runs cls, det, seg, mtl and (when data is given) transfer pre-training in
/// that order, starting from init_params(cfg.arch, cfg.seed). With an output
/// directory, each phase ends by writing phase_<name>.ckpt and the next phase
/// starts from that file; steps.jsonl and reports.json are written there too.
ProtocolResult run_protocol(const ProtocolData& data, const RunConfig& cfg,
                            const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace mcx
