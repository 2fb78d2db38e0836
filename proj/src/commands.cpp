#include "scanmtl/commands.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "scanmtl/errors.hpp"
#include "scanmtl/pipeline.hpp"
#include "scanmtl/png_io.hpp"

namespace mcx::cmd {

using nlohmann::json;

namespace {

fs::path sibling(const fs::path& out, const std::string& suffix) {
  return out.parent_path() / (out.stem().string() + suffix);
}

void write_phase_outputs(const RunConfig& cfg, const ModelParams& p, const PhaseReport& rep, const fs::path& out) {
  save_params(p, out);
  save_json(report_json(rep), sibling(out, ".report.json"));
  save_json(json(cfg), sibling(out, ".config.json"));
}

StepLog fresh_log(const fs::path& out) {
  const fs::path path = sibling(out, ".steps.jsonl");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  fs::remove(path);
  return StepLog(path);
}

ModelParams start_params(const RunConfig& cfg, const std::optional<fs::path>& in) {
  return in ? load_params(*in, cfg.arch) : init_params(cfg.arch, cfg.seed);
}

}  // namespace

Dataset load_split(const RunConfig& cfg, const fs::path& dir) {
  LoadOptions opt;
  opt.image_size = std::make_pair(cfg.arch.input_rows, cfg.arch.input_cols);
  return load_dataset(dir, opt);
}

void gen_data(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  for (const auto& s : cfg.splits) {
    Dataset d = generate_synthetic(s.synthetic);
    d.name = s.name;
    save_dataset(d, out / s.name);
  }
  save_json(json(cfg), out / "config.json");
}

Pretrain parse_pretrain(const std::string& name) {
  if (name == "cls") return Pretrain::cls;
  if (name == "det") return Pretrain::det;
  if (name == "seg") return Pretrain::seg;
  throw ConfigError("unknown pre-training phase '" + name + "'");
}

PhaseReport pretrain(const RunConfig& cfg, Pretrain which, const fs::path& data,
                     const std::optional<fs::path>& in, const fs::path& out) {
  cfg.validate();
  const Dataset d = load_split(cfg, data);
  ModelParams p = start_params(cfg, in);
  StepLog log = fresh_log(out);
  PhaseReport rep;
  switch (which) {
    case Pretrain::cls:
      rep = pretrain_classifier(p, d.coverage.cls ? restrict_tasks(d, {true, false, false})
                                                  : derive_classification_labels(d),
                                cfg.cls, &log);
      break;
    case Pretrain::det:
      rep = pretrain_detection(p, restrict_tasks(d, {true, true, false}), cfg.det, &log);
      break;
    case Pretrain::seg:
      rep = pretrain_segmentation(p, restrict_tasks(d, {true, false, true}), cfg.seg, &log);
      break;
  }
  write_phase_outputs(cfg, p, rep, out);
  return rep;
}

PhaseReport train_mtl(const RunConfig& cfg, const fs::path& det_data, const fs::path& seg_data,
                      const fs::path& in, const fs::path& out) {
  cfg.validate();
  ModelParams p = load_params(in, cfg.arch);
  StepLog log = fresh_log(out);
  PhaseReport rep;
  if (cfg.mtl_mode == MtlMode::alternating) {
    const Dataset dd = load_split(cfg, det_data);
    const Dataset ds = seg_data == det_data ? dd : load_split(cfg, seg_data);
    rep = train_mtl_alternating(p, restrict_tasks(dd, {true, true, false}), restrict_tasks(ds, {true, false, true}),
                                cfg.mtl, &log);
  } else {
    const Dataset ds = load_split(cfg, seg_data);
    rep = train_mtl_joint(p, with_boxes_from_masks(restrict_tasks(ds, {true, false, true})), cfg.mtl, &log);
  }
  write_phase_outputs(cfg, p, rep, out);
  return rep;
}

FinetuneOutcome finetune(const RunConfig& cfg, const fs::path& train_data, const fs::path& test_data,
                         const fs::path& in, const fs::path& out) {
  cfg.validate();
  const ModelParams base = load_params(in);
  const Dataset train = restrict_tasks(load_split(cfg, train_data), {true, false, false});
  const Dataset test = load_split(cfg, test_data);
  const TaskSet cls_only{true, false, false};
  StepLog log = fresh_log(out);

  FinetuneOutcome res;
  const ModelParams fresh = reinit_cls_decoder(base, cfg.transfer_classes, cfg.transfer.seed);
  res.before = evaluate(fresh, test, cls_only, cfg.eval);
  TransferResult t =
      finetune_new_disease(base, train, cfg.transfer_classes, cfg.transfer, cfg.transfer_options, &log);
  res.after = evaluate(t.params, test, cls_only, cfg.eval);
  res.report = t.report;
  write_phase_outputs(cfg, t.params, t.report, out);
  save_json(report_json(res.before), sibling(out, ".before.json"));
  save_json(report_json(res.after), sibling(out, ".after.json"));
  return res;
}

EvalReport evaluate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, TaskSet tasks,
                    const fs::path& out) {
  cfg.validate();
  const ModelParams p = load_params(checkpoint);
  const Dataset d = load_split(cfg, data);
  const EvalReport rep = mcx::evaluate(p, d, tasks, cfg.eval);
  fs::create_directories(out);
  save_json(report_json(rep), out / "report.json");
  std::ofstream txt(out / "report.txt", std::ios::trunc);
  txt << report_table(rep);
  save_json(json(cfg), out / "config.json");
  return rep;
}

void render(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out,
            int limit) {
  cfg.validate();
  const ModelParams p = load_params(checkpoint);
  Dataset d = load_split(cfg, data);
  if (limit >= 0 && static_cast<std::size_t>(limit) < d.size()) d.samples.resize(static_cast<std::size_t>(limit));
  const auto diags = infer_dataset(p, d, cfg.eval.inference, cfg.eval.batch_size);
  fs::create_directories(out / "overlays");
  for (std::size_t i = 0; i < diags.size(); ++i) {
    png::write(out / "overlays" / (d.samples[i].id + ".png"), render_overlay(d.samples[i].image, diags[i]));
  }
  write_diagnoses(diags, out);
  save_json(json(cfg), out / "config.json");
}

ProtocolResult protocol(const RunConfig& cfg, const fs::path& data, const fs::path& out) {
  cfg.validate();
  const Dataset train = load_split(cfg, data / "train");
  std::optional<Dataset> fresh;
  if (fs::exists(data / "new_train" / "manifest.json")) {
    fresh = restrict_tasks(load_split(cfg, data / "new_train"), {true, false, false});
  }
  return run_protocol(ProtocolData::from_joint(train, std::move(fresh)), cfg, out);
}

}  // namespace mcx::cmd
