#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scanmtl/data.hpp"
#include "scanmtl/losses.hpp"
#include "scanmtl/model.hpp"
#include "scanmtl/pipeline.hpp"

namespace mcx {

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// SGD only.
  double momentum = 0.0;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

/// Parameter groups excluded from updates.
struct FreezeSpec {
  std::array<bool, 4> groups{};  // indexed like kAllGroups

  static FreezeSpec none() { return {}; }
  static FreezeSpec all_but(std::initializer_list<Group> trainable);
  bool frozen(Group g) const { return groups[static_cast<std::size_t>(g)]; }
  FreezeSpec& freeze(Group g) {
    groups[static_cast<std::size_t>(g)] = true;
    return *this;
  }
  /// Union of both specs.
  FreezeSpec operator|(const FreezeSpec& o) const;
  /// e.g. "enc,cls"; empty string for none.
  std::string to_string() const;
  static FreezeSpec parse(const std::string& text);

  friend bool operator==(const FreezeSpec&, const FreezeSpec&) = default;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 16;
  /// Main step budget of a phase (Algorithm 1's n_steps for MTL).
  int n_steps = 100;
  /// Classifier sub-phase budget inside the detection/segmentation phases.
  int filter_steps = 100;
  OptimizerConfig optimizer;
  TeacherForcingConfig teacher_forcing;
  LossWeights loss_weights;
  std::uint64_t seed = 0;
  /// Always frozen, on top of what a phase freezes itself.
  FreezeSpec freeze;
  /// Arrays whose name starts with one of these prefixes are frozen.
  std::vector<std::string> freeze_arrays;
  /// Learning-rate multipliers by array-name prefix (first match wins).
  std::vector<std::pair<std::string, double>> lr_scales;
  double match_iou = kDefaultMatchIou;
  double filter_threshold = kDefaultFilterThreshold;
  /// Adds a classification step after each det/seg pair in alternating MTL.
  bool mtl_cls_step = false;

  /// Throws ConfigError. A zero learning rate is accepted (a no-op update).
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Adam or SGD state, laid out like the model parameters.
class Optimizer {
 public:
  Optimizer(const ModelParams& layout, const TrainConfig& cfg);

  /// Applies one update to every array not frozen; frozen arrays and their
  /// moments are left untouched.
  void step(ModelParams& params, const ModelParams& grads, const FreezeSpec& freeze);
  long steps() const { return t_; }

 private:
  double scale_for(const std::string& name) const;
  bool array_frozen(const std::string& name) const;

  TrainConfig cfg_;
  ModelParams m_;
  ModelParams v_;
  long t_ = 0;
};

/// Shuffled epochs over a fixed index pool; reshuffles when exhausted.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> pool, std::uint64_t seed);
  std::vector<std::size_t> next(int batch_size);
  std::size_t pool_size() const { return pool_.size(); }

 private:
  void reshuffle();

  std::vector<std::size_t> pool_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

/// Images plus whichever label tensors the active losses need.
struct TrainingBatch {
  ImageBatch images;
  Tensor cls;  // M x C
  std::vector<std::vector<Box>> boxes;
  Tensor masks;  // M x L x W
};

/// Throws DataError when a requested label field is missing. At most
/// max_gt_boxes boxes per sample are kept (in stored order).
TrainingBatch make_training_batch(const Dataset& d, const std::vector<std::size_t>& indices,
                                  TaskSet needed, int max_gt_boxes);

struct StepMetrics {
  TaskSet active;
  double cls = 0.0;
  double det = 0.0;
  double seg = 0.0;
  double total = 0.0;
};

/// One optimizer update on the weighted sum of the active losses. Losses are
/// measured before the update. Throws DivergenceError on a non-finite loss.
StepMetrics train_step(ModelParams& params, Optimizer& opt, const TrainingBatch& batch,
                       TaskSet active, const TrainConfig& cfg, const FreezeSpec& freeze);

/// Line-delimited step log: {"phase", "step", "loss", "value"} per record.
class StepLog {
 public:
  StepLog() = default;
  explicit StepLog(const std::filesystem::path& path);

  void record(const std::string& phase, int step, const std::string& loss, double value,
              const StepMetrics* parts = nullptr);
  const std::vector<std::string>& losses() const { return loss_names_; }

 private:
  std::optional<std::ofstream> out_;
  std::vector<std::string> loss_names_;
};

struct SubstepDelta {
  std::string task;  // "det", "seg" or "cls"
  std::array<double, 4> deltas{};
};

struct PhaseReport {
  std::string name;
  int steps = 0;
  /// Mean of the last (up to 20) recorded values per task; absent when the
  /// task was never active.
  std::optional<double> final_cls, final_det, final_seg;
  double wall_seconds = 0.0;
  std::array<double, 4> deltas{};
  /// Alternating MTL only.
  std::vector<std::string> step_order;
  std::vector<SubstepDelta> substeps;
  long teacher_tosses = 0;
  long teacher_forced = 0;
  /// Filter batches that came out empty and were replaced by ground truth.
  long empty_filter_batches = 0;
};

/// Wall time is left out so reports are reproducible byte for byte.
nlohmann::json report_json(const PhaseReport& r);

/// enc + cls on cls labels.
PhaseReport pretrain_classifier(ModelParams& params, const Dataset& d_cls, const TrainConfig& cfg,
                                StepLog* log = nullptr);
/// (a) enc + cls on labels derived from d_det for cfg.filter_steps;
/// (b) enc + det on teacher-forced positive batches for cfg.n_steps.
PhaseReport pretrain_detection(ModelParams& params, const Dataset& d_det, const TrainConfig& cfg,
                               StepLog* log = nullptr);
/// Mirror of pretrain_detection for the segmentation head.
PhaseReport pretrain_segmentation(ModelParams& params, const Dataset& d_seg, const TrainConfig& cfg,
                                  StepLog* log = nullptr);
/// cfg.n_steps iterations of: det step (seg frozen), seg step (det frozen),
/// each on a teacher-forced batch; classification stays frozen unless
/// cfg.mtl_cls_step adds a third step.
PhaseReport train_mtl_alternating(ModelParams& params, const Dataset& d_det, const Dataset& d_seg,
                                  const TrainConfig& cfg, StepLog* log = nullptr);
/// cfg.n_steps steps on the weighted sum of all three losses over batches of
/// the joint dataset; every group trains. Boxes are fitted from masks when
/// the dataset lacks them.
PhaseReport train_mtl_joint(ModelParams& params, const Dataset& d_joint, const TrainConfig& cfg,
                            StepLog* log = nullptr);

/// Adds box labels fitted from masks when absent.
Dataset with_boxes_from_masks(const Dataset& d);

enum class MtlMode { alternating, joint };
MtlMode parse_mtl_mode(const std::string& s);
const char* mtl_mode_name(MtlMode m);

}  // namespace mcx
