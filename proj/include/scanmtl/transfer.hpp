#pragma once

#include <cstdint>

#include "scanmtl/data.hpp"
#include "scanmtl/model.hpp"
#include "scanmtl/training.hpp"

namespace mcx {

/// The classification head split at its output layer.
struct ClsFactorization {
  /// Every cls array except the output layer's.
  ParamGroup feats;
  /// cls.dec.weight (hidden x C) and cls.dec.bias (C).
  ParamGroup dec;

  int num_classes() const;
};

/// Throws ConfigError when the head has no output layer.
ClsFactorization factorize_cls_params(const ModelParams& p);
/// Rebuilds the cls group as feats followed by dec; arch.num_classes follows
/// the decoder's width.
ModelParams recombine_cls_params(const ModelParams& p, const ClsFactorization& f);
/// Fresh output layer for `num_classes` outputs, drawn as init_params would.
ModelParams reinit_cls_decoder(const ModelParams& p, int num_classes, std::uint64_t seed);

struct TransferOptions {
  /// Freeze the encoder and the feature layers; only the new output layer
  /// trains. Off by default: the whole classification path is fine-tuned
  /// from its transferred weights, with a fresh output layer.
  bool freeze_feats = false;
  /// Learning-rate multiplier for encoder and feature layers when unfrozen.
  double feats_lr_scale = 1.0;
};

struct TransferResult {
  ModelParams params;
  PhaseReport report;
};

/// Re-initializes the output layer for num_classes and trains the
/// classification path on d_new for cfg.n_steps steps. Detection and
/// segmentation parameters never change.
TransferResult finetune_new_disease(const ModelParams& p, const Dataset& d_new, int num_classes,
                                    const TrainConfig& cfg, const TransferOptions& options = {},
                                    StepLog* log = nullptr);

}  // namespace mcx
