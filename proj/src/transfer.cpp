#include "scanmtl/transfer.hpp"

#include <chrono>

#include "scanmtl/errors.hpp"

namespace mcx {

namespace {

constexpr const char* kDecPrefix = "cls.dec.";

bool is_dec(const std::string& name) { return name.starts_with(kDecPrefix); }

}  // namespace

int ClsFactorization::num_classes() const { return dec.get("cls.dec.weight").dim(1); }

ClsFactorization factorize_cls_params(const ModelParams& p) {
  if (!p.cls.contains("cls.dec.weight") || !p.cls.contains("cls.dec.bias")) {
    throw ConfigError("classification head has no output layer (cls.dec)");
  }
  ClsFactorization f;
  for (const auto& a : p.cls.arrays) (is_dec(a.name) ? f.dec : f.feats).add(a.name, a.value);
  return f;
}

ModelParams recombine_cls_params(const ModelParams& p, const ClsFactorization& f) {
  const Tensor& w = f.dec.get("cls.dec.weight");
  const Tensor& b = f.dec.get("cls.dec.bias");
  if (w.rank() != 2 || b.rank() != 1 || b.dim(0) != w.dim(1)) {
    throw ConfigError("decoder arrays have inconsistent shapes");
  }
  ModelParams out = p;
  out.cls = ParamGroup{};
  for (const auto& a : f.feats.arrays) out.cls.add(a.name, a.value);
  for (const auto& a : f.dec.arrays) out.cls.add(a.name, a.value);
  out.arch.num_classes = w.dim(1);
  return out;
}

ModelParams reinit_cls_decoder(const ModelParams& p, int num_classes, std::uint64_t seed) {
  if (num_classes < 1) throw ConfigError("new class count must be >= 1");
  ArchConfig arch = p.arch;
  arch.num_classes = num_classes;
  const ModelParams fresh = init_params(arch, seed);
  ClsFactorization f = factorize_cls_params(p);
  f.dec = factorize_cls_params(fresh).dec;
  return recombine_cls_params(p, f);
}

TransferResult finetune_new_disease(const ModelParams& p, const Dataset& d_new, int num_classes,
                                    const TrainConfig& cfg_in, const TransferOptions& options, StepLog* log) {
  if (num_classes < 1) throw ConfigError("new class count must be >= 1");
  if (d_new.size() == 0) throw DataError("fine-tuning dataset is empty");
  if (!d_new.coverage.cls) throw DataError("fine-tuning dataset '" + d_new.name + "' has no class labels");
  if (d_new.num_classes != num_classes) {
    throw DataError("fine-tuning dataset has " + std::to_string(d_new.num_classes) + " classes, expected " +
                    std::to_string(num_classes));
  }
  const auto start = std::chrono::steady_clock::now();

  TrainConfig cfg = cfg_in;
  cfg.freeze = cfg.freeze | FreezeSpec::all_but({Group::enc, Group::cls});
  if (options.freeze_feats) {
    cfg.freeze.freeze(Group::enc);
    cfg.freeze_arrays.push_back("cls.feats.");
  } else {
    cfg.lr_scales.insert(cfg.lr_scales.begin(), {{"enc.", options.feats_lr_scale},
                                                 {"cls.feats.", options.feats_lr_scale}});
  }
  cfg.validate();

  TransferResult out{reinit_cls_decoder(p, num_classes, cfg.seed), {}};
  const ModelParams before = out.params;
  PhaseReport& rep = out.report;
  rep.name = "transfer";

  Optimizer opt(out.params, cfg);
  std::vector<std::size_t> pool(d_new.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  BatchSampler sampler(pool, cfg.seed ^ 0x7452414E53464552ULL);
  const TaskSet cls_only{true, false, false};
  std::vector<double> recent;
  for (int i = 0; i < cfg.n_steps; ++i) {
    const auto batch = make_training_batch(d_new, sampler.next(cfg.batch_size), cls_only, out.params.arch.max_gt_boxes);
    const StepMetrics m = train_step(out.params, opt, batch, cls_only, cfg, FreezeSpec::none());
    if (log) log->record(rep.name, i, "cls", m.cls);
    recent.push_back(m.cls);
    if (recent.size() > 20) recent.erase(recent.begin());
  }
  rep.steps = cfg.n_steps;
  if (!recent.empty()) {
    double s = 0.0;
    for (double v : recent) s += v;
    rep.final_cls = s / static_cast<double>(recent.size());
  }
  rep.deltas = delta_norms(before, out.params);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace mcx
