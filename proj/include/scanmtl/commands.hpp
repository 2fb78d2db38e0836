#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>

#include "scanmtl/config.hpp"
#include "scanmtl/metrics.hpp"
#include "scanmtl/protocol.hpp"

namespace mcx::cmd {

namespace fs = std::filesystem;

/// Writes one dataset directory per configured split under `out`.
void gen_data(const RunConfig& cfg, const fs::path& out);

enum class Pretrain { cls, det, seg };
Pretrain parse_pretrain(const std::string& name);

/// Starts from `in` when given, else from init_params(cfg.arch, cfg.seed).
/// Writes `out`, <stem>.steps.jsonl, <stem>.report.json, <stem>.config.json.
PhaseReport pretrain(const RunConfig& cfg, Pretrain which, const fs::path& data,
                     const std::optional<fs::path>& in, const fs::path& out);

/// Alternating mode reads det and seg views of the given directories; joint
/// mode reads `seg_data` (boxes fitted from masks when absent).
PhaseReport train_mtl(const RunConfig& cfg, const fs::path& det_data, const fs::path& seg_data,
                      const fs::path& in, const fs::path& out);

struct FinetuneOutcome {
  PhaseReport report;
  EvalReport before;
  EvalReport after;
};

/// Reports before (fresh output layer) and after fine-tuning are evaluated on
/// `test_data` and written as <stem>.before.json / <stem>.after.json.
FinetuneOutcome finetune(const RunConfig& cfg, const fs::path& train_data, const fs::path& test_data,
                         const fs::path& in, const fs::path& out);

/// Writes report.json and report.txt into `out`.
EvalReport evaluate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, TaskSet tasks,
                    const fs::path& out);

/// Overlay PNGs plus diagnoses.jsonl for the first `limit` samples (all when
/// limit < 0).
void render(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out,
            int limit = -1);

/// The five-phase protocol over <data>/train and, when present,
/// <data>/new_train.
ProtocolResult protocol(const RunConfig& cfg, const fs::path& data, const fs::path& out);

/// Loads a dataset resized to the configured input size.
Dataset load_split(const RunConfig& cfg, const fs::path& dir);

}  // namespace mcx::cmd
