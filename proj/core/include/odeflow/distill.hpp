#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "odeflow/autodiff.hpp"
#include "odeflow/data.hpp"
#include "odeflow/models.hpp"
#include "odeflow/optim.hpp"
#include "odeflow/stability.hpp"

namespace odeflow {

// ---- checkpoint schedule --------------------------------------------------------

/// Where each teacher layer's output is matched on the student trajectory.
struct CheckpointSchedule {
  std::vector<double> fractions;   // softmax of consecutive-layer distances, sums to 1
  std::vector<double> cumulative;  // prefix sums, last == 1
  std::vector<int> step_indices;   // strictly increasing, last == N
};

/// d_l = mean over token rows of |hidden[l] - hidden[l-1]|_2, l = 1..L. States
/// may stack several samples of `tokens` rows each (0 means one sample); with
/// cls_only only each sample's row 0 counts.
std::vector<double> layer_distances(std::span<const Tensor> hidden, bool cls_only = false,
                                    std::size_t tokens = 0);

CheckpointSchedule schedule_from_distances(std::span<const double> distances, int steps,
                                           double temperature = 1.0);
CheckpointSchedule checkpoint_schedule(std::span<const Tensor> hidden, int steps,
                                       double temperature = 1.0);

// ---- configuration ---------------------------------------------------------------

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 64;
  AdamWConfig optim{};
  double warmup_frac = 0.10;
  int cycles = 10;
  std::uint64_t seed = 0;
  bool eval_each_epoch = true;
};

struct EarlyStopConfig {
  bool enabled = false;
  int patience = 10;
  int window = 1;  // epochs averaged into the running MSE
};

struct DistillConfig {
  double w_mse = 1.0;
  double w_jasmin = 0.1;
  double w_ce = 0.0;
  bool match_cls_only = true;
  std::size_t jasmin_k = 2;
  double temperature = 1.0;
  bool cls_only_distance = false;
  double radius = 10.0;
  double lipschitz_assumed = 0.5;
  bool freeze_embedder = true;
  bool freeze_head = true;
  EarlyStopConfig early_stop{};
  TrainConfig train{};
};

// ---- loss -----------------------------------------------------------------------

/// Batched student solve on a tape: every state plus attention maps sampled
/// every ceil(N/12) steps.
struct StudentRollout {
  std::vector<Var> states;  // N+1 states, each [B*T, D]
  std::vector<Var> maps;    // each [B*H, T, T]
  std::size_t batch = 0;
  std::size_t tokens = 0;
};

int jasmin_stride(int steps);

StudentRollout rollout(Tape& tape, OdeViT& student, Var x0, std::size_t batch);

struct LossParts {
  std::vector<double> mse;  // per checkpoint
  double jasmin = 0.0;
  double ce = 0.0;
  double total = 0.0;
};

struct DistillLoss {
  Var total;
  LossParts parts;
};

/// w_mse * sum_l MSE(student at step_indices[l], teacher hidden[l+1])
///   + w_jasmin * jasmin / batch + w_ce * CE(logits, labels).
/// `teacher_hidden` holds L+1 constant [B*T, D] states. JaSMin is averaged
/// over the batch. Labels are required when w_ce > 0.
DistillLoss distill_loss(Tape& tape, const StudentRollout& student,
                         std::span<const Tensor> teacher_hidden, const CheckpointSchedule& sched,
                         const DistillConfig& cfg, Var logits = {},
                         std::span<const int> labels = {});

/// Per-checkpoint closed-form bound with N replaced by the checkpoint's step.
std::vector<double> checkpoint_bounds(const BlockParams& block, const CheckpointSchedule& sched,
                                      double radius, double lipschitz);

/// True once every checkpoint's running-average MSE has been strictly below
/// its bound for the last `patience` epochs. history[e][l] and bounds[e][l].
bool early_stop_check(std::span<const std::vector<double>> history,
                      std::span<const std::vector<double>> bounds, int patience);

// ---- contraction analysis ---------------------------------------------------------

struct ContractionRecord {
  std::size_t sample_id = 0;
  double distance = 0.0;
  bool teacher_correct = false;
  bool student_correct = false;
  bool agrees = false;
};

struct ContractionBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double agreement_rate = 0.0;
  double teacher_accuracy = 0.0;
  double student_accuracy = 0.0;
};

struct ContractionTable {
  std::vector<ContractionBin> bins;
  /// Upper edge of the last bin in the leading run of non-empty bins whose
  /// agreement rate is >= 0.95 (0 if the first bin already falls short).
  double threshold = 0.0;
  /// Spearman correlation of bin centre vs agreement rate over non-empty bins.
  double spearman = 0.0;
};

ContractionTable contraction_analysis(std::span<const ContractionRecord> records, int n_bins);

std::string contraction_csv(std::span<const ContractionRecord> records);

// ---- training ---------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  std::vector<double> loss_mse;
  double loss_jasmin = 0.0;
  double loss_ce = 0.0;
  std::vector<double> bound;
  bool early_stop_armed = false;
  double acc_eval = 0.0;
};

/// One JSON object per line with keys epoch, lr, loss_total, loss_mse, loss_jasmin,
/// loss_ce, bound, early_stop_armed, acc_eval.
std::string to_jsonl(const EpochLog& e);

struct TrainResult {
  std::vector<EpochLog> log;
  int epochs_run = 0;
  bool early_stopped = false;
  /// Per checkpoint: first epoch whose running MSE fell below its bound (-1 if never).
  std::vector<int> first_below_bound;
  CheckpointSchedule schedule;
  std::vector<ContractionRecord> records;
};

using EpochHook = std::function<void(const EpochLog&)>;

TrainResult train_teacher(TeacherViT& teacher, const DatasetSplit& train, const DatasetSplit* eval,
                          const TrainConfig& cfg, const EpochHook& hook = {});

/// Cross-entropy training of embedder, block and head from scratch.
TrainResult train_free(OdeViT& model, const DatasetSplit& train, const DatasetSplit* eval,
                       const TrainConfig& cfg, const EpochHook& hook = {});

/// Trajectory distillation of the student block against the teacher's hidden
/// states. The student's embedder and head are overwritten with copies of
/// the teacher's before training.
TrainResult train_distill(OdeViT& student, const TeacherViT& teacher, const DatasetSplit& train,
                          const DatasetSplit* eval, const DistillConfig& cfg,
                          const EpochHook& hook = {});

// ---- batched evaluation -----------------------------------------------------------

/// L+1 hidden states of a batch, each [B*T, D].
std::vector<Tensor> teacher_hidden_batch(const TeacherViT& teacher, const Tensor& patches,
                                         std::size_t batch);
/// Final student state of a batch, [B*T, D].
Tensor student_final_batch(const OdeViT& student, const Tensor& patches, std::size_t batch,
                           int steps, double horizon);

struct Predictions {
  std::vector<int> labels;
  std::vector<std::vector<double>> cls;  // final CLS per sample
};

Predictions predict_teacher(const TeacherViT& teacher, const DatasetSplit& split);
Predictions predict_student(const OdeViT& student, const DatasetSplit& split, int steps,
                            double horizon);
double accuracy(std::span<const int> predictions, const DatasetSplit& split);

std::vector<ContractionRecord> contraction_records(const TeacherViT& teacher, const OdeViT& student,
                                                   const DatasetSplit& split);

}  // namespace odeflow
