#include "scanmtl/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scanmtl/errors.hpp"

namespace mcx {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

FreezeSpec FreezeSpec::all_but(std::initializer_list<Group> trainable) {
  FreezeSpec f;
  f.groups.fill(true);
  for (Group g : trainable) f.groups[static_cast<std::size_t>(g)] = false;
  return f;
}

FreezeSpec FreezeSpec::operator|(const FreezeSpec& o) const {
  FreezeSpec f;
  for (std::size_t i = 0; i < groups.size(); ++i) f.groups[i] = groups[i] || o.groups[i];
  return f;
}

std::string FreezeSpec::to_string() const {
  std::string out;
  for (Group g : kAllGroups) {
    if (!frozen(g)) continue;
    if (!out.empty()) out += ',';
    out += group_name(g);
  }
  return out;
}

FreezeSpec FreezeSpec::parse(const std::string& text) {
  FreezeSpec f;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) f.freeze(parse_group(item));
  }
  return f;
}

void TrainConfig::validate() const {
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
    throw ConfigError("learning_rate must be finite and >= 0");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (n_steps < 0) throw ConfigError("n_steps must be >= 0");
  if (filter_steps < 0) throw ConfigError("filter_steps must be >= 0");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(optimizer.epsilon > 0)) throw ConfigError("optimizer.epsilon must be > 0");
  if (!(optimizer.momentum >= 0 && optimizer.momentum < 1)) {
    throw ConfigError("optimizer.momentum must lie in [0, 1)");
  }
  teacher_forcing.validate();
  for (double w : {loss_weights.cls, loss_weights.det, loss_weights.seg}) {
    if (!std::isfinite(w) || w < 0) throw ConfigError("loss weights must be finite and >= 0");
  }
  for (const auto& [prefix, s] : lr_scales) {
    if (!std::isfinite(s) || s < 0) throw ConfigError("lr scale for '" + prefix + "' must be >= 0");
  }
  if (!(match_iou >= 0 && match_iou <= 1)) throw ConfigError("match_iou must lie in [0, 1]");
  if (!(filter_threshold >= 0 && filter_threshold <= 1)) {
    throw ConfigError("filter_threshold must lie in [0, 1]");
  }
}

void to_json(json& j, const TrainConfig& c) {
  json scales = json::array();
  for (const auto& [prefix, s] : c.lr_scales) scales.push_back({prefix, s});
  j = json{{"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"n_steps", c.n_steps},
           {"filter_steps", c.filter_steps},
           {"optimizer",
            {{"kind", c.optimizer.kind == OptimizerKind::adam ? "adam" : "sgd"},
             {"beta1", c.optimizer.beta1},
             {"beta2", c.optimizer.beta2},
             {"epsilon", c.optimizer.epsilon},
             {"momentum", c.optimizer.momentum}}},
           {"teacher_forcing",
            {{"p", c.teacher_forcing.p},
             {"granularity", c.teacher_forcing.per_sample ? "sample" : "batch"},
             {"seed", c.teacher_forcing.seed}}},
           {"loss_weights", {c.loss_weights.cls, c.loss_weights.det, c.loss_weights.seg}},
           {"seed", c.seed},
           {"freeze", c.freeze.to_string()},
           {"freeze_arrays", c.freeze_arrays},
           {"lr_scales", scales},
           {"match_iou", c.match_iou},
           {"filter_threshold", c.filter_threshold},
           {"mtl_cls_step", c.mtl_cls_step}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c = d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.n_steps = j.value("n_steps", d.n_steps);
  c.filter_steps = j.value("filter_steps", d.filter_steps);
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    const std::string kind = o.value("kind", std::string("adam"));
    if (kind == "adam") {
      c.optimizer.kind = OptimizerKind::adam;
    } else if (kind == "sgd") {
      c.optimizer.kind = OptimizerKind::sgd;
    } else {
      throw ConfigError("unknown optimizer kind '" + kind + "'");
    }
    c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
    c.optimizer.epsilon = o.value("epsilon", d.optimizer.epsilon);
    c.optimizer.momentum = o.value("momentum", d.optimizer.momentum);
  }
  if (j.contains("teacher_forcing")) {
    const json& t = j.at("teacher_forcing");
    c.teacher_forcing.p = t.value("p", d.teacher_forcing.p);
    const std::string gran = t.value("granularity", std::string("batch"));
    if (gran != "batch" && gran != "sample") {
      throw ConfigError("teacher_forcing.granularity must be 'batch' or 'sample'");
    }
    c.teacher_forcing.per_sample = gran == "sample";
    c.teacher_forcing.seed = t.value("seed", d.teacher_forcing.seed);
  }
  if (j.contains("loss_weights")) {
    const json& w = j.at("loss_weights");
    if (!w.is_array() || w.size() != 3) throw ConfigError("loss_weights must be [cls, det, seg]");
    c.loss_weights = {w[0].get<double>(), w[1].get<double>(), w[2].get<double>()};
  }
  c.seed = j.value("seed", d.seed);
  c.freeze = FreezeSpec::parse(j.value("freeze", std::string()));
  c.freeze_arrays = j.value("freeze_arrays", d.freeze_arrays);
  if (j.contains("lr_scales")) {
    for (const auto& e : j.at("lr_scales")) {
      c.lr_scales.emplace_back(e.at(0).get<std::string>(), e.at(1).get<double>());
    }
  }
  c.match_iou = j.value("match_iou", d.match_iou);
  c.filter_threshold = j.value("filter_threshold", d.filter_threshold);
  c.mtl_cls_step = j.value("mtl_cls_step", d.mtl_cls_step);
}

// ---------------------------------------------------------------------------
// Optimizer

Optimizer::Optimizer(const ModelParams& layout, const TrainConfig& cfg)
    : cfg_(cfg), m_(layout.zeros_like()), v_(layout.zeros_like()) {
  cfg_.validate();
}

double Optimizer::scale_for(const std::string& name) const {
  for (const auto& [prefix, s] : cfg_.lr_scales) {
    if (name.starts_with(prefix)) return s;
  }
  return 1.0;
}

bool Optimizer::array_frozen(const std::string& name) const {
  return std::any_of(cfg_.freeze_arrays.begin(), cfg_.freeze_arrays.end(),
                     [&](const std::string& prefix) { return name.starts_with(prefix); });
}

void Optimizer::step(ModelParams& params, const ModelParams& grads, const FreezeSpec& freeze) {
  ++t_;
  const auto& o = cfg_.optimizer;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(t_));
  for (Group g : kAllGroups) {
    if (freeze.frozen(g) || cfg_.freeze.frozen(g)) continue;
    auto& pa = params.group(g).arrays;
    const auto& ga = grads.group(g).arrays;
    auto& ma = m_.group(g).arrays;
    auto& va = v_.group(g).arrays;
    if (pa.size() != ga.size() || pa.size() != ma.size()) {
      throw std::invalid_argument("optimizer: parameter layout changed");
    }
    for (std::size_t a = 0; a < pa.size(); ++a) {
      if (array_frozen(pa[a].name)) continue;
      const double lr = cfg_.learning_rate * scale_for(pa[a].name);
      Tensor& p = pa[a].value;
      const Tensor& gr = ga[a].value;
      Tensor& m = ma[a].value;
      Tensor& v = va[a].value;
      if (o.kind == OptimizerKind::adam) {
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gr[i];
          v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gr[i] * gr[i];
          p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + o.epsilon);
        }
      } else {
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = o.momentum * m[i] + gr[i];
          p[i] -= lr * m[i];
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Batching

BatchSampler::BatchSampler(std::vector<std::size_t> pool, std::uint64_t seed)
    : pool_(std::move(pool)), rng_(seed) {
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_ = pool_;
  // Fisher-Yates with explicit draws so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = order_.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng_() % i);
    std::swap(order_[i - 1], order_[j]);
  }
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next(int batch_size) {
  if (pool_.empty()) throw DataError("cannot sample a batch from an empty pool");
  std::vector<std::size_t> out;
  const std::size_t n = std::min(static_cast<std::size_t>(batch_size), pool_.size());
  while (out.size() < n) {
    if (cursor_ == order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

TrainingBatch make_training_batch(const Dataset& d, const std::vector<std::size_t>& indices,
                                  TaskSet needed, int max_gt_boxes) {
  TrainingBatch b;
  b.images = make_batch(d, indices);
  const int m = static_cast<int>(indices.size());
  if (needed.cls) b.cls = Tensor({m, d.num_classes});
  if (needed.seg) b.masks = Tensor({m, d.rows, d.cols});
  for (int i = 0; i < m; ++i) {
    const Sample& s = d.samples.at(indices[static_cast<std::size_t>(i)]);
    if (needed.cls) {
      if (!s.labels.cls || static_cast<int>(s.labels.cls->size()) != d.num_classes) {
        throw DataError("sample " + s.id + " lacks a classification label");
      }
      for (int c = 0; c < d.num_classes; ++c) b.cls.at(i, c) = (*s.labels.cls)[static_cast<std::size_t>(c)];
    }
    if (needed.det) {
      if (!s.labels.boxes) throw DataError("sample " + s.id + " lacks box labels");
      auto boxes = *s.labels.boxes;
      if (static_cast<int>(boxes.size()) > max_gt_boxes) boxes.resize(static_cast<std::size_t>(max_gt_boxes));
      b.boxes.push_back(std::move(boxes));
    }
    if (needed.seg) {
      if (!s.labels.mask) throw DataError("sample " + s.id + " lacks a mask");
      const Mask& mk = *s.labels.mask;
      auto dst = b.masks.row(i);
      for (std::size_t k = 0; k < mk.values.size(); ++k) dst[k] = mk.values[k];
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Step

StepMetrics train_step(ModelParams& params, Optimizer& opt, const TrainingBatch& batch,
                       TaskSet active, const TrainConfig& cfg, const FreezeSpec& freeze) {
  const LossWeights& w = cfg.loss_weights;
  ForwardPass f = forward(params, batch.images, {active.cls, active.det, active.seg});
  for (const auto* head : {&f.cls, &f.det, &f.seg}) {
    if (*head && !(*head)->all_finite()) throw DivergenceError("model outputs became non-finite");
  }
  StepMetrics out;
  out.active = active;
  // Sigmoid heads take the fused logit gradient, so a saturated wrong output
  // still learns.
  OutputGrads og;
  og.sigmoid_logits = true;
  if (active.cls) {
    out.cls = loss_cls(batch.cls, *f.cls);
    if (w.cls != 0.0) {
      Tensor g = bce_logit_grad(batch.cls, *f.cls);
      for (double& x : g.values()) x *= w.cls;
      og.cls = std::move(g);
    }
  }
  if (active.det) {
    const auto anchors = anchor_boxes(params.arch);
    std::vector<MatchMatrix> matches;
    matches.reserve(batch.boxes.size());
    for (const auto& gt : batch.boxes) matches.push_back(match_anchors(gt, anchors, cfg.match_iou));
    Tensor g;
    out.det = loss_det(batch.boxes, *f.det, matches, &g);
    if (w.det != 0.0) {
      for (double& x : g.values()) x *= w.det;
      og.det = std::move(g);
    }
  }
  if (active.seg) {
    out.seg = loss_seg(batch.masks, *f.seg);
    if (w.seg != 0.0) {
      Tensor g = bce_logit_grad(batch.masks, *f.seg);
      for (double& x : g.values()) x *= w.seg;
      og.seg = std::move(g);
    }
  }
  try {
    out.total = loss_total(active.cls ? out.cls : 0.0, active.det ? out.det : 0.0,
                           active.seg ? out.seg : 0.0, w);
  } catch (const DivergenceError&) {
    std::ostringstream msg;
    msg << "non-finite loss (cls=" << out.cls << ", det=" << out.det << ", seg=" << out.seg << ")";
    throw DivergenceError(msg.str());
  }
  const FreezeSpec eff = freeze | cfg.freeze;
  const ModelParams grads = backward(params, f, og, !eff.frozen(Group::enc));
  opt.step(params, grads, eff);
  if (!params.all_finite()) throw DivergenceError("parameters became non-finite after an update");
  return out;
}

// ---------------------------------------------------------------------------
// Logging and reports

StepLog::StepLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.emplace(path, std::ios::app);
  if (!*out_) throw DataError("cannot open step log " + path.string());
}

void StepLog::record(const std::string& phase, int step, const std::string& loss, double value,
                     const StepMetrics* parts) {
  loss_names_.push_back(loss);
  if (!out_) return;
  json rec{{"phase", phase}, {"step", step}, {"loss", loss}, {"value", value}};
  if (parts) {
    if (parts->active.cls) rec["cls"] = parts->cls;
    if (parts->active.det) rec["det"] = parts->det;
    if (parts->active.seg) rec["seg"] = parts->seg;
  }
  *out_ << rec.dump() << '\n';
  out_->flush();
}

json report_json(const PhaseReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json deltas;
  for (std::size_t i = 0; i < kAllGroups.size(); ++i) deltas[group_name(kAllGroups[i])] = r.deltas[i];
  json j{{"phase", r.name},
         {"steps", r.steps},
         {"final_losses", {{"cls", opt(r.final_cls)}, {"det", opt(r.final_det)}, {"seg", opt(r.final_seg)}}},
         {"delta_norms", deltas},
         {"teacher_forcing",
          {{"tosses", r.teacher_tosses},
           {"forced", r.teacher_forced},
           {"empty_filter_batches", r.empty_filter_batches}}}};
  if (!r.step_order.empty()) {
    std::string order;
    for (const auto& s : r.step_order) order += s.substr(0, 1);
    j["step_order"] = order;
  }
  return j;
}

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<std::size_t> all_indices(const Dataset& d) {
  std::vector<std::size_t> v(d.size());
  std::iota(v.begin(), v.end(), 0);
  return v;
}

class LossTracker {
 public:
  void add(const StepMetrics& m) {
    if (m.active.cls) push(cls_, m.cls);
    if (m.active.det) push(det_, m.det);
    if (m.active.seg) push(seg_, m.seg);
  }
  void fill(PhaseReport& r) const {
    r.final_cls = mean(cls_);
    r.final_det = mean(det_);
    r.final_seg = mean(seg_);
  }

 private:
  static void push(std::deque<double>& q, double v) {
    q.push_back(v);
    if (q.size() > 20) q.pop_front();
  }
  static std::optional<double> mean(const std::deque<double>& q) {
    if (q.empty()) return std::nullopt;
    return std::accumulate(q.begin(), q.end(), 0.0) / static_cast<double>(q.size());
  }
  std::deque<double> cls_, det_, seg_;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void log_step(StepLog* log, const std::string& phase, int step, const StepMetrics& m) {
  if (!log) return;
  const int n = int(m.active.cls) + int(m.active.det) + int(m.active.seg);
  if (n != 1) {
    log->record(phase, step, "total", m.total, &m);
  } else if (m.active.cls) {
    log->record(phase, step, "cls", m.cls);
  } else if (m.active.det) {
    log->record(phase, step, "det", m.det);
  } else {
    log->record(phase, step, "seg", m.seg);
  }
}

void require_labels(const Dataset& d, TaskSet need, const char* who) {
  if (!d.coverage.contains(need)) {
    throw DataError(std::string(who) + ": dataset '" + d.name + "' covers {" + d.coverage.to_string() +
                    "}, needs {" + need.to_string() + "}");
  }
}

// Runs `steps` classifier updates (enc + cls) on d_cls.
void classifier_steps(ModelParams& params, Optimizer& opt, const Dataset& d_cls, const TrainConfig& cfg,
                      int steps, std::uint64_t salt, const std::string& phase, int& step_no,
                      LossTracker& tracker, StepLog* log) {
  if (steps == 0) return;
  BatchSampler sampler(all_indices(d_cls), derive_seed(cfg.seed, salt));
  const FreezeSpec freeze = FreezeSpec::all_but({Group::enc, Group::cls});
  const TaskSet cls_only{true, false, false};
  for (int i = 0; i < steps; ++i) {
    const auto idx = sampler.next(cfg.batch_size);
    const auto batch = make_training_batch(d_cls, idx, cls_only, params.arch.max_gt_boxes);
    const StepMetrics m = train_step(params, opt, batch, cls_only, cfg, freeze);
    tracker.add(m);
    log_step(log, phase, step_no++, m);
  }
}

// Produces head-training batches: ground-truth positives with probability p,
// otherwise whatever the current filter lets through from a mixed batch.
class ForcedBatches {
 public:
  ForcedBatches(const Dataset& d, const TrainConfig& cfg, std::uint64_t salt)
      : d_(d),
        cfg_(cfg),
        positives_(positive_indices(d), derive_seed(cfg.seed, salt)),
        mixed_(all_indices(d), derive_seed(cfg.seed, salt + 1)),
        coin_([&] {
          TeacherForcingConfig tf = cfg.teacher_forcing;
          tf.seed = derive_seed(tf.seed, salt + 2);
          return tf;
        }()) {
    if (positives_.pool_size() == 0) {
      throw DataError("dataset '" + d.name + "' has no positive samples");
    }
  }

  std::vector<std::size_t> next(const ModelParams& params) {
    const auto gt = positives_.next(cfg_.batch_size);
    const auto mixed = mixed_.next(cfg_.batch_size);
    const FilterResult fr = filter_positives(params, make_batch(d_, mixed), cfg_.filter_threshold);
    std::vector<std::size_t> filtered;
    for (int i : fr.positive) filtered.push_back(mixed[static_cast<std::size_t>(i)]);
    auto chosen = teacher_force_select(gt, filtered, coin_);
    if (chosen.empty()) {
      ++empty_;
      chosen = gt;
    }
    return chosen;
  }

  void fill(PhaseReport& r) const {
    r.teacher_tosses += coin_.tosses();
    r.teacher_forced += coin_.forced();
    r.empty_filter_batches += empty_;
  }

 private:
  const Dataset& d_;
  const TrainConfig& cfg_;
  BatchSampler positives_;
  BatchSampler mixed_;
  TeacherForcing coin_;
  long empty_ = 0;
};

PhaseReport pretrain_head(ModelParams& params, const Dataset& d, const TrainConfig& cfg, StepLog* log,
                          Group head, const std::string& name) {
  cfg.validate();
  const bool det = head == Group::det;
  const TaskSet need{false, det, !det};
  require_labels(d, need, det ? "pretrain_detection" : "pretrain_segmentation");
  const Stopwatch clock;
  const ModelParams before = params;
  PhaseReport rep;
  rep.name = name;
  LossTracker tracker;
  int step_no = 0;

  Optimizer cls_opt(params, cfg);
  const Dataset d_cls = derive_classification_labels(d);
  classifier_steps(params, cls_opt, d_cls, cfg, cfg.filter_steps, det ? 10 : 20, name, step_no, tracker,
                   log);

  Optimizer head_opt(params, cfg);
  ForcedBatches source(d, cfg, det ? 30 : 40);
  const FreezeSpec freeze = FreezeSpec::all_but({Group::enc, head});
  for (int i = 0; i < cfg.n_steps; ++i) {
    const auto idx = source.next(params);
    const auto batch = make_training_batch(d, idx, need, params.arch.max_gt_boxes);
    const StepMetrics m = train_step(params, head_opt, batch, need, cfg, freeze);
    tracker.add(m);
    log_step(log, name, step_no++, m);
  }
  source.fill(rep);
  rep.steps = step_no;
  tracker.fill(rep);
  rep.deltas = delta_norms(before, params);
  rep.wall_seconds = clock.seconds();
  return rep;
}

}  // namespace

PhaseReport pretrain_classifier(ModelParams& params, const Dataset& d_cls, const TrainConfig& cfg,
                                StepLog* log) {
  cfg.validate();
  require_labels(d_cls, {true, false, false}, "pretrain_classifier");
  const Stopwatch clock;
  const ModelParams before = params;
  PhaseReport rep;
  rep.name = "cls";
  LossTracker tracker;
  int step_no = 0;
  Optimizer opt(params, cfg);
  classifier_steps(params, opt, d_cls, cfg, cfg.n_steps, 0, rep.name, step_no, tracker, log);
  rep.steps = step_no;
  tracker.fill(rep);
  rep.deltas = delta_norms(before, params);
  rep.wall_seconds = clock.seconds();
  return rep;
}

PhaseReport pretrain_detection(ModelParams& params, const Dataset& d_det, const TrainConfig& cfg,
                               StepLog* log) {
  return pretrain_head(params, d_det, cfg, log, Group::det, "det");
}

PhaseReport pretrain_segmentation(ModelParams& params, const Dataset& d_seg, const TrainConfig& cfg,
                                  StepLog* log) {
  return pretrain_head(params, d_seg, cfg, log, Group::seg, "seg");
}

PhaseReport train_mtl_alternating(ModelParams& params, const Dataset& d_det, const Dataset& d_seg,
                                  const TrainConfig& cfg, StepLog* log) {
  cfg.validate();
  const TaskSet det_task{false, true, false};
  const TaskSet seg_task{false, false, true};
  require_labels(d_det, det_task, "train_mtl_alternating");
  require_labels(d_seg, seg_task, "train_mtl_alternating");
  const Stopwatch clock;
  const ModelParams before = params;
  PhaseReport rep;
  rep.name = "mtl";
  LossTracker tracker;
  if (cfg.n_steps == 0) {
    rep.deltas = delta_norms(before, params);
    return rep;
  }

  Optimizer opt(params, cfg);
  ForcedBatches det_source(d_det, cfg, 50);
  ForcedBatches seg_source(d_seg, cfg, 60);
  std::optional<Dataset> d_cls;
  std::optional<BatchSampler> cls_sampler;
  if (cfg.mtl_cls_step) {
    d_cls = derive_classification_labels(d_det);
    cls_sampler.emplace(all_indices(*d_cls), derive_seed(cfg.seed, 70));
  }
  const FreezeSpec det_freeze = FreezeSpec::all_but({Group::enc, Group::det});
  const FreezeSpec seg_freeze = FreezeSpec::all_but({Group::enc, Group::seg});
  const FreezeSpec cls_freeze = FreezeSpec::all_but({Group::enc, Group::cls});
  const int b = params.arch.max_gt_boxes;
  int step_no = 0;

  auto run = [&](const std::string& task, const Dataset& d, const std::vector<std::size_t>& idx,
                 TaskSet active, const FreezeSpec& freeze) {
    const ModelParams prev = params;
    const StepMetrics m = train_step(params, opt, make_training_batch(d, idx, active, b), active, cfg, freeze);
    rep.substeps.push_back({task, delta_norms(prev, params)});
    rep.step_order.push_back(task);
    tracker.add(m);
    log_step(log, rep.name, step_no++, m);
  };

  for (int i = 0; i < cfg.n_steps; ++i) {
    run("det", d_det, det_source.next(params), det_task, det_freeze);
    run("seg", d_seg, seg_source.next(params), seg_task, seg_freeze);
    if (cfg.mtl_cls_step) {
      run("cls", *d_cls, cls_sampler->next(cfg.batch_size), {true, false, false}, cls_freeze);
    }
  }
  det_source.fill(rep);
  seg_source.fill(rep);
  rep.steps = step_no;
  tracker.fill(rep);
  rep.deltas = delta_norms(before, params);
  rep.wall_seconds = clock.seconds();
  return rep;
}

Dataset with_boxes_from_masks(const Dataset& d) {
  if (d.coverage.det) return d;
  if (!d.coverage.seg) throw DataError("dataset '" + d.name + "' has neither boxes nor masks");
  Dataset out = d;
  for (auto& s : out.samples) s.labels.boxes = box_from_mask(*s.labels.mask);
  out.coverage.det = true;
  return out;
}

PhaseReport train_mtl_joint(ModelParams& params, const Dataset& d_joint_in, const TrainConfig& cfg,
                            StepLog* log) {
  cfg.validate();
  const Dataset d_joint = with_boxes_from_masks(d_joint_in);
  const TaskSet all = TaskSet::all();
  require_labels(d_joint, all, "train_mtl_joint");
  const Stopwatch clock;
  const ModelParams before = params;
  PhaseReport rep;
  rep.name = "mtl";
  LossTracker tracker;
  Optimizer opt(params, cfg);
  // Same stream as pretrain_classifier, so (1,0,0) weights replay it exactly.
  BatchSampler sampler(all_indices(d_joint), derive_seed(cfg.seed, 0));
  for (int i = 0; i < cfg.n_steps; ++i) {
    const auto idx = sampler.next(cfg.batch_size);
    const auto batch = make_training_batch(d_joint, idx, all, params.arch.max_gt_boxes);
    const StepMetrics m = train_step(params, opt, batch, all, cfg, FreezeSpec::none());
    tracker.add(m);
    log_step(log, rep.name, i, m);
  }
  rep.steps = cfg.n_steps;
  tracker.fill(rep);
  rep.deltas = delta_norms(before, params);
  rep.wall_seconds = clock.seconds();
  return rep;
}

MtlMode parse_mtl_mode(const std::string& s) {
  if (s == "alternating") return MtlMode::alternating;
  if (s == "joint") return MtlMode::joint;
  throw ConfigError("mode must be 'alternating' or 'joint', got '" + s + "'");
}

const char* mtl_mode_name(MtlMode m) { return m == MtlMode::alternating ? "alternating" : "joint"; }

}  // namespace mcx
