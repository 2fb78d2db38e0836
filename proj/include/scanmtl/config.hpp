#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scanmtl/data.hpp"
#include "scanmtl/metrics.hpp"
#include "scanmtl/model.hpp"
#include "scanmtl/training.hpp"
#include "scanmtl/transfer.hpp"

namespace mcx {

/// One generated dataset split, written to <out>/<name>.
struct SplitSpec {
  std::string name;
  SyntheticConfig synthetic;
};

/// Everything a run needs. Loaded from one JSON file; absent keys take the
/// defaults below, and the fully expanded form is what gets written next to
/// every output.
///
/// Layout:
///   seed, arch{...}, splits{name: {...}},
///   train{...}              shared TrainConfig defaults
///   phases{cls|det|seg|mtl|transfer: {...}}  per-phase overrides of train
///   mtl_mode, transfer{classes, freeze_feats, feats_lr_scale},
///   inference{threshold, min_area, merge_iou},
///   eval{resamples, alpha, seed, batch_size, mask_threshold, map_iou}
struct RunConfig {
  /// Seed for init_params.
  std::uint64_t seed = 0;
  ArchConfig arch;
  std::vector<SplitSpec> splits;
  TrainConfig cls, det, seg, mtl, transfer;
  MtlMode mtl_mode = MtlMode::alternating;
  int transfer_classes = 1;
  TransferOptions transfer_options;
  EvalOptions eval;

  RunConfig();
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Throws ConfigError for unreadable or invalid files.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig run_config_from_json(const nlohmann::json& j);
void save_json(const nlohmann::json& j, const std::filesystem::path& path);

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

}  // namespace mcx
