#include "odeflow/distill.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "odeflow/error.hpp"
#include "odeflow/parallel.hpp"
#include "odeflow/stats.hpp"

namespace odeflow {

// ---- checkpoint schedule --------------------------------------------------------

std::vector<double> layer_distances(std::span<const Tensor> hidden, bool cls_only,
                                    std::size_t tokens) {
  if (hidden.size() < 2) throw ContractError("layer_distances needs at least two hidden states");
  std::vector<double> d;
  for (std::size_t l = 1; l < hidden.size(); ++l) {
    const Tensor& a = hidden[l];
    const Tensor& b = hidden[l - 1];
    if (!a.same_shape(b)) throw ShapeError("hidden states differ in shape");
    const std::size_t per_sample = tokens == 0 ? a.rows() : tokens;
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      if (cls_only && r % per_sample != 0) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < a.cols(); ++j) {
        const double diff = a.at(r, j) - b.at(r, j);
        s += diff * diff;
      }
      total += std::sqrt(s);
      ++count;
    }
    d.push_back(total / static_cast<double>(count));
  }
  return d;
}

CheckpointSchedule schedule_from_distances(std::span<const double> distances, int steps,
                                           double temperature) {
  const int L = static_cast<int>(distances.size());
  if (L < 1) throw ContractError("checkpoint_schedule needs at least one teacher layer");
  if (steps < L) {
    throw ContractError("checkpoint_schedule: " + std::to_string(steps) +
                        " steps cannot hold " + std::to_string(L) + " distinct checkpoints");
  }
  if (!(temperature > 0.0)) throw ContractError("checkpoint_schedule: temperature must be positive");
  CheckpointSchedule s;
  const double mx = *std::max_element(distances.begin(), distances.end());
  double z = 0.0;
  for (double d : distances) {
    s.fractions.push_back(std::exp((d - mx) / temperature));
    z += s.fractions.back();
  }
  double acc = 0.0;
  for (double& f : s.fractions) {
    f /= z;
    acc += f;
    s.cumulative.push_back(acc);
  }
  s.cumulative.back() = 1.0;

  s.step_indices.resize(static_cast<std::size_t>(L));
  int prev = 0;
  for (int l = 0; l < L; ++l) {
    const int rounded = static_cast<int>(std::floor(s.cumulative[static_cast<std::size_t>(l)] * steps + 0.5));
    prev = std::max(rounded, prev + 1);
    s.step_indices[static_cast<std::size_t>(l)] = prev;
  }
  s.step_indices.back() = steps;
  for (int l = L - 2; l >= 0; --l) {
    auto& cur = s.step_indices[static_cast<std::size_t>(l)];
    cur = std::min(cur, s.step_indices[static_cast<std::size_t>(l) + 1] - 1);
  }
  return s;
}

CheckpointSchedule checkpoint_schedule(std::span<const Tensor> hidden, int steps,
                                       double temperature) {
  const auto d = layer_distances(hidden);
  return schedule_from_distances(d, steps, temperature);
}

// ---- loss -----------------------------------------------------------------------

int jasmin_stride(int steps) { return std::max(1, (steps + 11) / 12); }

StudentRollout rollout(Tape& tape, OdeViT& student, Var x0, std::size_t batch) {
  StudentRollout r;
  r.batch = batch;
  r.tokens = x0.value().rows() / batch;
  const int N = student.config.steps;
  const double dt = student.config.horizon / N;
  const int stride = jasmin_stride(N);
  const BlockVars w = bind(tape, student.block);
  const TokenLayout layout{batch, r.tokens, student.block.heads};
  r.states.push_back(x0);
  Var x = x0;
  for (int n = 0; n < N; ++n) {
    Var maps;
    Var f = psi(x, w, layout, n % stride == 0 ? &maps : nullptr);
    if (maps.valid()) r.maps.push_back(maps);
    x = add(x, scale(f, dt));
    r.states.push_back(x);
  }
  return r;
}

namespace {

std::vector<std::size_t> cls_rows(std::size_t batch, std::size_t tokens) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * tokens;
  return rows;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  Tensor out({rows.size(), x.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.data() + rows[i] * x.cols(), x.cols(), out.data() + i * x.cols());
  }
  return out;
}

}  // namespace

DistillLoss distill_loss(Tape& tape, const StudentRollout& student,
                         std::span<const Tensor> teacher_hidden, const CheckpointSchedule& sched,
                         const DistillConfig& cfg, Var logits, std::span<const int> labels) {
  if (cfg.w_mse < 0.0 || cfg.w_jasmin < 0.0 || cfg.w_ce < 0.0) {
    throw ContractError("distill_loss: weights must be non-negative");
  }
  const std::size_t L = sched.step_indices.size();
  if (teacher_hidden.size() != L + 1) {
    throw ContractError("distill_loss: schedule has " + std::to_string(L) + " checkpoints but " +
                        std::to_string(teacher_hidden.size()) + " teacher states were given");
  }
  if (cfg.w_ce > 0.0 && (labels.size() != student.batch || !logits.valid())) {
    throw ContractError("distill_loss: cross-entropy weight set but labels or logits missing");
  }
  DistillLoss out;
  Var total = tape.constant(Tensor::scalar(0.0));
  const auto rows = cls_rows(student.batch, student.tokens);

  Var mse_sum = tape.constant(Tensor::scalar(0.0));
  for (std::size_t l = 0; l < L; ++l) {
    const int step = sched.step_indices[l];
    if (step < 1 || static_cast<std::size_t>(step) >= student.states.size()) {
      throw ContractError("distill_loss: checkpoint step " + std::to_string(step) +
                          " outside the student trajectory");
    }
    Var s = student.states[static_cast<std::size_t>(step)];
    Var term;
    if (cfg.match_cls_only) {
      term = mse(select_rows(s, rows), tape.constant(gather_rows(teacher_hidden[l + 1], rows)));
    } else {
      term = mse(s, tape.constant(teacher_hidden[l + 1]));
    }
    out.parts.mse.push_back(term.value().item());
    mse_sum = add(mse_sum, term);
  }
  if (cfg.w_mse > 0.0) total = add(total, scale(mse_sum, cfg.w_mse));

  if (!student.maps.empty()) {
    Var jas = tape.constant(Tensor::scalar(0.0));
    for (Var m : student.maps) jas = add(jas, jasmin_loss(m, cfg.jasmin_k));
    jas = scale(jas, 1.0 / static_cast<double>(student.batch));
    out.parts.jasmin = jas.value().item();
    if (cfg.w_jasmin > 0.0) total = add(total, scale(jas, cfg.w_jasmin));
  }

  if (logits.valid() && labels.size() == student.batch) {
    Var ce = cross_entropy(logits, labels);
    out.parts.ce = ce.value().item();
    if (cfg.w_ce > 0.0) total = add(total, scale(ce, cfg.w_ce));
  }
  out.parts.total = total.value().item();
  out.total = total;
  return out;
}

std::vector<double> checkpoint_bounds(const BlockParams& block, const CheckpointSchedule& sched,
                                      double radius, double lipschitz) {
  const HeadNorms norms = head_spectral_norms(block);
  std::vector<double> out;
  for (int step : sched.step_indices) {
    out.push_back(bound_closed_form({radius, lipschitz, step, static_cast<int>(block.head_dim()),
                                     norms.value, norms.key_query}));
  }
  return out;
}

bool early_stop_check(std::span<const std::vector<double>> history,
                      std::span<const std::vector<double>> bounds, int patience) {
  if (patience < 1) throw ContractError("early_stop_check: patience must be >= 1");
  if (history.size() != bounds.size()) throw ContractError("early_stop_check: history/bounds length differ");
  const auto p = static_cast<std::size_t>(patience);
  if (history.size() < p) return false;
  for (std::size_t e = history.size() - p; e < history.size(); ++e) {
    if (history[e].empty() || history[e].size() != bounds[e].size()) return false;
    for (std::size_t l = 0; l < history[e].size(); ++l) {
      if (!(history[e][l] < bounds[e][l])) return false;
    }
  }
  return true;
}

// ---- contraction analysis ---------------------------------------------------------

ContractionTable contraction_analysis(std::span<const ContractionRecord> records, int n_bins) {
  if (records.empty()) throw ContractError("contraction_analysis needs at least one record");
  if (n_bins < 1) throw ContractError("contraction_analysis needs at least one bin");
  double max_d = 0.0;
  for (const auto& r : records) max_d = std::max(max_d, r.distance);
  const double width = max_d > 0.0 ? max_d / n_bins : 1.0;
  ContractionTable t;
  t.bins.resize(static_cast<std::size_t>(n_bins));
  for (int b = 0; b < n_bins; ++b) {
    t.bins[static_cast<std::size_t>(b)].lo = b * width;
    t.bins[static_cast<std::size_t>(b)].hi = (b + 1) * width;
  }
  for (const auto& r : records) {
    auto b = static_cast<std::size_t>(std::min<double>(n_bins - 1, std::floor(r.distance / width)));
    ContractionBin& bin = t.bins[b];
    ++bin.count;
    bin.agreement_rate += r.agrees;
    bin.teacher_accuracy += r.teacher_correct;
    bin.student_accuracy += r.student_correct;
  }
  std::vector<double> centers, rates;
  bool leading = true;
  for (ContractionBin& bin : t.bins) {
    if (bin.count == 0) continue;
    const double n = static_cast<double>(bin.count);
    bin.agreement_rate /= n;
    bin.teacher_accuracy /= n;
    bin.student_accuracy /= n;
    centers.push_back(0.5 * (bin.lo + bin.hi));
    rates.push_back(bin.agreement_rate);
    if (leading && bin.agreement_rate >= 0.95) {
      t.threshold = bin.hi;
    } else {
      leading = false;
    }
  }
  t.spearman = spearman(centers, rates);
  return t;
}

std::string contraction_csv(std::span<const ContractionRecord> records) {
  std::ostringstream os;
  os.precision(17);
  os << "sample_id,distance,teacher_correct,student_correct,agrees\n";
  for (const auto& r : records) {
    os << r.sample_id << ',' << r.distance << ',' << int(r.teacher_correct) << ','
       << int(r.student_correct) << ',' << int(r.agrees) << '\n';
  }
  return os.str();
}

// ---- logging --------------------------------------------------------------------

std::string to_jsonl(const EpochLog& e) {
  nlohmann::ordered_json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["loss_total"] = e.loss_total;
  j["loss_mse"] = e.loss_mse;
  j["loss_jasmin"] = e.loss_jasmin;
  j["loss_ce"] = e.loss_ce;
  j["bound"] = e.bound;
  j["early_stop_armed"] = e.early_stop_armed;
  j["acc_eval"] = e.acc_eval;
  return j.dump();
}

// ---- batched evaluation -----------------------------------------------------------

namespace {

constexpr std::size_t kEvalBatch = 64;

struct Batch {
  Tensor patches;
  std::vector<int> labels;
  std::size_t size = 0;
};

Batch make_batch(const PatchEmbedder& e, const DatasetSplit& split, std::span<const std::size_t> idx) {
  std::vector<const Tensor*> images;
  Batch b;
  for (std::size_t i : idx) {
    images.push_back(&split.images[i].pixels);
    b.labels.push_back(split.images[i].label);
  }
  b.patches = batch_patches(e, images);
  b.size = idx.size();
  return b;
}

EmbedderVars bind_embedder_constant(Tape& t, const PatchEmbedder& e) {
  EmbedderVars v{t.constant(e.proj.value), t.constant(e.proj_bias.value), t.constant(e.cls.value),
                 t.constant(e.pos.value), Var()};
  if (e.registers > 0) v.registers = t.constant(e.register_tokens.value);
  return v;
}

void guard_state(const Tensor& x, int step) {
  for (double v : x.values()) {
    if (!std::isfinite(v) || std::abs(v) > kDivergenceLimit) {
      throw DivergenceError(step, "student state diverged at step " + std::to_string(step));
    }
  }
}

template <class Fn>
Predictions predict(const DatasetSplit& split, const PatchEmbedder& e, std::size_t tokens, Fn&& final_state) {
  Predictions out;
  out.cls.resize(split.size());
  const std::size_t chunks = (split.size() + kEvalBatch - 1) / kEvalBatch;
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = c * kEvalBatch; i < std::min(split.size(), (c + 1) * kEvalBatch); ++i) {
      idx.push_back(i);
    }
    const Batch b = make_batch(e, split, idx);
    const Tensor x = final_state(b);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto row = x.row(k * tokens);
      out.cls[idx[k]].assign(row.begin(), row.end());
    }
  });
  return out;
}

}  // namespace

std::vector<Tensor> teacher_hidden_batch(const TeacherViT& teacher, const Tensor& patches,
                                         std::size_t batch) {
  Tape t;
  Var x = embed(bind_embedder_constant(t, teacher.embedder), t.constant(patches), batch);
  const TokenLayout layout{batch, teacher.embedder.tokens(), teacher.config.heads};
  std::vector<Tensor> hidden{x.value()};
  for (const BlockParams& b : teacher.layers) {
    x = teacher_block(x, bind_constant(t, b), layout);
    hidden.push_back(x.value());
  }
  return hidden;
}

Tensor student_final_batch(const OdeViT& student, const Tensor& patches, std::size_t batch,
                           int steps, double horizon) {
  if (steps < 1 || !(horizon > 0.0)) throw ContractError("student solve needs N >= 1 and T > 0");
  Tensor x;
  {
    Tape t;
    x = embed(bind_embedder_constant(t, student.embedder), t.constant(patches), batch).value();
  }
  const TokenLayout layout{batch, student.embedder.tokens(), student.block.heads};
  const double dt = horizon / steps;
  for (int n = 0; n < steps; ++n) {
    Tape t;
    Tensor f = psi(t.constant(x), bind_constant(t, student.block), layout).value();
    x.matrix() += dt * f.matrix();
    guard_state(x, n + 1);
  }
  return x;
}

Predictions predict_teacher(const TeacherViT& teacher, const DatasetSplit& split) {
  Predictions p = predict(split, teacher.embedder, teacher.embedder.tokens(), [&](const Batch& b) {
    return teacher_hidden_batch(teacher, b.patches, b.size).back();
  });
  for (const auto& cls : p.cls) p.labels.push_back(argmax(teacher.head.logits(cls)));
  return p;
}

Predictions predict_student(const OdeViT& student, const DatasetSplit& split, int steps,
                            double horizon) {
  Predictions p = predict(split, student.embedder, student.embedder.tokens(), [&](const Batch& b) {
    return student_final_batch(student, b.patches, b.size, steps, horizon);
  });
  for (const auto& cls : p.cls) p.labels.push_back(argmax(student.head.logits(cls)));
  return p;
}

double accuracy(std::span<const int> predictions, const DatasetSplit& split) {
  if (predictions.size() != split.size() || split.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < split.size(); ++i) hits += predictions[i] == split.images[i].label;
  return static_cast<double>(hits) / static_cast<double>(split.size());
}

std::vector<ContractionRecord> contraction_records(const TeacherViT& teacher, const OdeViT& student,
                                                   const DatasetSplit& split) {
  const Predictions tp = predict_teacher(teacher, split);
  const Predictions sp = predict_student(student, split, student.config.steps, student.config.horizon);
  std::vector<ContractionRecord> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    ContractionRecord r;
    r.sample_id = i;
    double s = 0.0;
    for (std::size_t j = 0; j < tp.cls[i].size(); ++j) {
      const double d = sp.cls[i][j] - tp.cls[i][j];
      s += d * d;
    }
    r.distance = std::sqrt(s);
    r.teacher_correct = tp.labels[i] == split.images[i].label;
    r.student_correct = sp.labels[i] == split.images[i].label;
    r.agrees = tp.labels[i] == sp.labels[i];
    out.push_back(r);
  }
  return out;
}

// ---- training ---------------------------------------------------------------------

namespace {

std::vector<Tensor> snapshot(const std::vector<Parameter*>& params) {
  std::vector<Tensor> out;
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

void restore(const std::vector<Parameter*>& params, const std::vector<Tensor>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

// Shared minibatch loop. step(batch) records the loss on a fresh tape and
// returns it; the loop runs backward, the optimizer step and divergence checks.
template <class Step>
double run_epoch(const DatasetSplit& train, const PatchEmbedder& e, const TrainConfig& cfg,
                 int epoch, AdamW& opt, const std::vector<Tensor>& last_good, Step&& step) {
  const auto plan = batches(train, cfg.batch_size, cfg.seed, epoch);
  double total = 0.0;
  std::size_t seen = 0;
  for (std::size_t b = 0; b < plan.size(); ++b) {
    const double at = epoch + static_cast<double>(b) / static_cast<double>(plan.size());
    const double lr = lr_at(at, cfg.epochs, cfg.warmup_frac, cfg.cycles, cfg.optim.lr);
    const Batch batch = make_batch(e, train, plan[b]);
    Tape tape;
    const Var loss = step(tape, batch);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      restore(opt.params(), last_good);
      throw DivergenceError(epoch, "non-finite training loss in epoch " + std::to_string(epoch));
    }
    opt.zero_grad();
    tape.backward(loss);
    opt.step(lr);
    total += value * static_cast<double>(batch.size);
    seen += batch.size;
  }
  return total / static_cast<double>(seen);
}

}  // namespace

TrainResult train_teacher(TeacherViT& teacher, const DatasetSplit& train, const DatasetSplit* eval,
                          const TrainConfig& cfg, const EpochHook& hook) {
  TrainResult result;
  AdamW opt(teacher.parameters(), cfg.optim);
  const TokenLayout base{0, teacher.embedder.tokens(), teacher.config.heads};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto last_good = snapshot(opt.params());
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr_at(epoch, cfg.epochs, cfg.warmup_frac, cfg.cycles, cfg.optim.lr);
    log.loss_total = run_epoch(train, teacher.embedder, cfg, epoch, opt, last_good,
                               [&](Tape& t, const Batch& b) {
                                 TokenLayout layout = base;
                                 layout.batch = b.size;
                                 Var x = embed(bind(t, teacher.embedder), t.constant(b.patches), b.size);
                                 for (BlockParams& layer : teacher.layers) {
                                   x = teacher_block(x, bind(t, layer), layout);
                                 }
                                 Var cls = select_rows(x, cls_rows(b.size, layout.tokens));
                                 return cross_entropy(head_logits(t, teacher.head, cls), b.labels);
                               });
    log.loss_ce = log.loss_total;
    if (eval && (cfg.eval_each_epoch || epoch + 1 == cfg.epochs)) {
      log.acc_eval = accuracy(predict_teacher(teacher, *eval).labels, *eval);
    }
    result.log.push_back(log);
    if (hook) hook(log);
  }
  result.epochs_run = cfg.epochs;
  return result;
}

TrainResult train_free(OdeViT& model, const DatasetSplit& train, const DatasetSplit* eval,
                       const TrainConfig& cfg, const EpochHook& hook) {
  TrainResult result;
  AdamW opt(model.parameters(), cfg.optim);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto last_good = snapshot(opt.params());
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr_at(epoch, cfg.epochs, cfg.warmup_frac, cfg.cycles, cfg.optim.lr);
    log.loss_total = run_epoch(train, model.embedder, cfg, epoch, opt, last_good,
                               [&](Tape& t, const Batch& b) {
                                 Var x0 = embed(bind(t, model.embedder), t.constant(b.patches), b.size);
                                 const StudentRollout r = rollout(t, model, x0, b.size);
                                 Var cls = select_rows(r.states.back(), cls_rows(b.size, r.tokens));
                                 return cross_entropy(head_logits(t, model.head, cls), b.labels);
                               });
    log.loss_ce = log.loss_total;
    if (eval && (cfg.eval_each_epoch || epoch + 1 == cfg.epochs)) {
      log.acc_eval = accuracy(
          predict_student(model, *eval, model.config.steps, model.config.horizon).labels, *eval);
    }
    result.log.push_back(log);
    if (hook) hook(log);
  }
  result.epochs_run = cfg.epochs;
  return result;
}

TrainResult train_distill(OdeViT& student, const TeacherViT& teacher, const DatasetSplit& train,
                          const DatasetSplit* eval, const DistillConfig& cfg,
                          const EpochHook& hook) {
  if (student.config.dim != teacher.config.dim ||
      student.embedder.tokens() != teacher.embedder.tokens() ||
      student.head.classes() != teacher.head.classes()) {
    throw ContractError("train_distill: student and teacher shapes differ");
  }
  if (cfg.early_stop.patience < 1 || cfg.early_stop.window < 1) {
    throw ContractError("train_distill: patience and window must be >= 1");
  }
  const TrainConfig& tc = cfg.train;
  student.embedder = teacher.embedder;
  student.head = teacher.head;
  student.embedder.set_trainable(!cfg.freeze_embedder);
  student.head.set_trainable(!cfg.freeze_head);
  student.block.set_trainable(true);

  TrainResult result;
  {
    // Schedule from the mean consecutive-layer distance over the training set.
    const std::size_t L = teacher.layers.size();
    std::vector<double> dist(L, 0.0);
    const auto plan = batches(train, kEvalBatch, std::nullopt);
    for (const auto& idx : plan) {
      const Batch b = make_batch(teacher.embedder, train, idx);
      const auto hidden = teacher_hidden_batch(teacher, b.patches, b.size);
      const auto d = layer_distances(hidden, cfg.cls_only_distance, teacher.embedder.tokens());
      for (std::size_t l = 0; l < L; ++l) dist[l] += d[l] * static_cast<double>(b.size);
    }
    for (double& d : dist) d /= static_cast<double>(train.size());
    result.schedule = schedule_from_distances(dist, student.config.steps, cfg.temperature);
  }
  const CheckpointSchedule& sched = result.schedule;
  const std::size_t L = sched.step_indices.size();
  result.first_below_bound.assign(L, -1);

  AdamW opt(student.parameters(), tc.optim);
  std::vector<std::vector<double>> epoch_mse, history, bound_history;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto last_good = snapshot(opt.params());
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr_at(epoch, tc.epochs, tc.warmup_frac, tc.cycles, tc.optim.lr);
    std::vector<double> mse_acc(L, 0.0);
    double jas_acc = 0.0, ce_acc = 0.0;
    std::size_t seen = 0;
    log.loss_total = run_epoch(
        train, student.embedder, tc, epoch, opt, last_good, [&](Tape& t, const Batch& b) {
          const auto hidden = teacher_hidden_batch(teacher, b.patches, b.size);
          Var x0 = embed(bind(t, student.embedder), t.constant(b.patches), b.size);
          const StudentRollout r = rollout(t, student, x0, b.size);
          Var logits;
          if (cfg.w_ce > 0.0) {
            logits = head_logits(t, student.head,
                                 select_rows(r.states.back(), cls_rows(b.size, r.tokens)));
          }
          DistillLoss loss = distill_loss(t, r, hidden, sched, cfg, logits, b.labels);
          const double n = static_cast<double>(b.size);
          for (std::size_t l = 0; l < L; ++l) mse_acc[l] += loss.parts.mse[l] * n;
          jas_acc += loss.parts.jasmin * n;
          ce_acc += loss.parts.ce * n;
          seen += b.size;
          return loss.total;
        });
    for (double& m : mse_acc) m /= static_cast<double>(seen);
    log.loss_mse = mse_acc;
    log.loss_jasmin = jas_acc / static_cast<double>(seen);
    log.loss_ce = ce_acc / static_cast<double>(seen);
    log.bound = checkpoint_bounds(student.block, sched, cfg.radius, cfg.lipschitz_assumed);

    epoch_mse.push_back(mse_acc);
    std::vector<double> running(L, 0.0);
    const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(cfg.early_stop.window),
                                                epoch_mse.size());
    for (std::size_t k = epoch_mse.size() - w; k < epoch_mse.size(); ++k)
      for (std::size_t l = 0; l < L; ++l) running[l] += epoch_mse[k][l] / static_cast<double>(w);
    history.push_back(running);
    bound_history.push_back(log.bound);
    log.early_stop_armed = true;
    for (std::size_t l = 0; l < L; ++l) {
      if (running[l] < log.bound[l]) {
        if (result.first_below_bound[l] < 0) result.first_below_bound[l] = epoch;
      } else {
        log.early_stop_armed = false;
      }
    }
    if (eval && (tc.eval_each_epoch || epoch + 1 == tc.epochs)) {
      log.acc_eval = accuracy(
          predict_student(student, *eval, student.config.steps, student.config.horizon).labels,
          *eval);
    }
    result.log.push_back(log);
    result.epochs_run = epoch + 1;
    if (hook) hook(log);
    if (cfg.early_stop.enabled &&
        early_stop_check(history, bound_history, cfg.early_stop.patience)) {
      result.early_stopped = true;
      break;
    }
  }
  const DatasetSplit& analysis_split = eval ? *eval : train;
  result.records = contraction_records(teacher, student, analysis_split);
  return result;
}

}  // namespace odeflow
