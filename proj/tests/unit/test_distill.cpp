#include <doctest.h>

#include <cmath>
#include <random>

#include <json.hpp>

#include "oracles.hpp"
#include "odeflow/distill.hpp"
#include "odeflow/error.hpp"

using namespace odeflow;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.channels = 3;
  c.patch = 8;
  c.dim = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 2;
  c.teacher_layers = 2;
  c.steps = 4;
  return c;
}

DistillConfig quick_distill(int epochs) {
  DistillConfig d;
  d.train.epochs = epochs;
  d.train.batch_size = 8;
  d.train.optim.lr = 3e-3;
  d.train.cycles = 1;
  d.train.seed = 5;
  return d;
}

std::vector<int> steps_of(std::vector<double> d, int n) {
  return schedule_from_distances(d, n).step_indices;
}

}  // namespace

TEST_SUITE("distill") {

TEST_CASE("schedule examples") {
  CHECK(steps_of({1, 1, 1, 1}, 24) == std::vector<int>{6, 12, 18, 24});
  CHECK(steps_of({1, 2, 1}, 24) == std::vector<int>{5, 19, 24});
  CHECK(steps_of({3.7}, 24) == std::vector<int>{24});
  CHECK(steps_of({1, 1, 1}, 3) == std::vector<int>{1, 2, 3});
  CHECK_THROWS_AS(steps_of({1, 1, 1, 1}, 3), ContractError);
  CHECK_THROWS_AS(steps_of({}, 3), ContractError);
}

TEST_CASE("schedule fractions are a softmax") {
  const auto s = schedule_from_distances(std::vector<double>{1, 2, 1}, 24);
  const double z = 2 * std::exp(1.0) + std::exp(2.0);
  CHECK(s.fractions[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
  CHECK(s.fractions[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-14));
  CHECK(s.cumulative.back() == 1.0);
}

TEST_CASE("schedules of random teachers are valid") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  std::uniform_int_distribution<int> layers(1, 12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> d(static_cast<std::size_t>(layers(rng)));
    for (double& v : d) v = u(rng);
    const int n = static_cast<int>(d.size()) + trial % 30;
    const auto s = schedule_from_distances(d, n);
    double total = 0.0;
    for (double f : s.fractions) total += f;
    CHECK(std::abs(total - 1.0) < 1e-9);
    CHECK(s.step_indices.back() == n);
    CHECK(s.step_indices.front() >= 1);
    for (std::size_t l = 1; l < s.step_indices.size(); ++l) CHECK(s.step_indices[l] > s.step_indices[l - 1]);
  }
}

TEST_CASE("layer distances") {
  std::vector<Tensor> hidden = {Tensor::matrix({{0, 0}, {0, 0}, {0, 0}, {0, 0}}),
                                Tensor::matrix({{3, 4}, {0, 0}, {6, 8}, {0, 1}})};
  CHECK(layer_distances(hidden)[0] == doctest::Approx((5.0 + 0 + 10 + 1) / 4));
  CHECK(layer_distances(hidden, true, 2)[0] == doctest::Approx(7.5));
  CHECK(layer_distances(hidden, true)[0] == doctest::Approx(5.0));
  CHECK_THROWS_AS(layer_distances(std::span<const Tensor>(hidden.data(), 1)), ContractError);
}

TEST_CASE("distill loss matches loop oracles") {
  ModelConfig c = tiny_config();
  c.steps = 6;
  OdeViT m(c, 3);
  const std::size_t B = 2, T = m.embedder.tokens();
  const Tensor patches = oracle::random_tensor({B * (T - 1), m.embedder.patch_dim()}, 4);
  std::vector<Tensor> teacher;
  for (int l = 0; l < 3; ++l) teacher.push_back(oracle::random_tensor({B * T, 8}, 10 + l));
  const auto sched = schedule_from_distances(std::vector<double>{1, 2}, c.steps);

  Tape t;
  Var x0 = embed(bind(t, m.embedder), t.constant(patches), B);
  const StudentRollout r = rollout(t, m, x0, B);
  REQUIRE(r.states.size() == 7);
  CHECK(jasmin_stride(6) == 1);
  CHECK(jasmin_stride(24) == 2);
  CHECK(jasmin_stride(25) == 3);
  CHECK(r.maps.size() == 6);
  DistillConfig cfg;
  const DistillLoss loss = distill_loss(t, r, teacher, sched, cfg);

  // Replay every sample with the loop oracles.
  double jas = 0.0;
  std::vector<double> mse(2, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    oracle::Mat x(T);
    for (std::size_t i = 0; i < T; ++i) {
      auto row = x0.value().row(b * T + i);
      x[i].assign(row.begin(), row.end());
    }
    for (int n = 0; n <= c.steps; ++n) {
      for (std::size_t l = 0; l < 2; ++l) {
        if (sched.step_indices[l] != n) continue;
        for (std::size_t j = 0; j < 8; ++j) {
          const double d = x[0][j] - teacher[l + 1].at(b * T, j);
          mse[l] += d * d / (8.0 * B);
        }
      }
      if (n == c.steps) break;
      const auto xn = oracle::center_normalize(x, m.block.gamma_attn.value.values(),
                                               m.block.beta_attn.value.values());
      jas += oracle::jasmin(oracle::attention_maps(xn, m.block), 2);
      const auto f = oracle::psi(x, m.block);
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < 8; ++j) x[i][j] += f[i][j] / c.steps;
    }
  }
  jas /= B;
  REQUIRE(loss.parts.mse.size() == 2);
  CHECK(std::abs(loss.parts.mse[0] - mse[0]) < 1e-10);
  CHECK(std::abs(loss.parts.mse[1] - mse[1]) < 1e-10);
  CHECK(std::abs(loss.parts.jasmin - jas) < 1e-10);
  CHECK(loss.parts.total == doctest::Approx(mse[0] + mse[1] + 0.1 * jas).epsilon(1e-12));
}

TEST_CASE("distill loss weights and contracts") {
  ModelConfig c = tiny_config();
  OdeViT m(c, 5);
  const std::size_t B = 2, T = m.embedder.tokens();
  const Tensor patches = oracle::random_tensor({B * (T - 1), m.embedder.patch_dim()}, 6);
  std::vector<Tensor> teacher(3, oracle::random_tensor({B * T, 8}, 7));
  const auto sched = schedule_from_distances(std::vector<double>{1, 1}, c.steps);
  Tape t;
  const StudentRollout r = rollout(t, m, embed(bind(t, m.embedder), t.constant(patches), B), B);
  Var logits = head_logits(t, m.head, select_rows(r.states.back(), {0, T}));
  const std::vector<int> labels = {1, 0};

  DistillConfig only_mse;
  only_mse.w_jasmin = 0.0;
  const DistillLoss a = distill_loss(t, r, teacher, sched, only_mse);
  CHECK(a.parts.total == doctest::Approx(a.parts.mse[0] + a.parts.mse[1]).epsilon(1e-14));
  CHECK(a.parts.jasmin > 0.0);

  DistillConfig with_ce = only_mse;
  with_ce.w_ce = 0.5;
  const DistillLoss b = distill_loss(t, r, teacher, sched, with_ce, logits, labels);
  CHECK(b.parts.ce > 0.0);
  CHECK(b.parts.total == doctest::Approx(a.parts.total + 0.5 * b.parts.ce).epsilon(1e-14));
  CHECK_THROWS_AS(distill_loss(t, r, teacher, sched, with_ce), ContractError);

  DistillConfig negative;
  negative.w_mse = -1.0;
  CHECK_THROWS_AS(distill_loss(t, r, teacher, sched, negative), ContractError);
  CHECK_THROWS_AS(distill_loss(t, r, std::span<const Tensor>(teacher.data(), 2), sched, only_mse),
                  ContractError);
}

TEST_CASE("distill loss gradients match finite differences") {
  ModelConfig c = tiny_config();
  c.steps = 3;
  OdeViT m(c, 9);
  const std::size_t B = 2, T = m.embedder.tokens();
  const Tensor patches = oracle::random_tensor({B * (T - 1), m.embedder.patch_dim()}, 10);
  std::vector<Tensor> teacher;
  for (int l = 0; l < 3; ++l) teacher.push_back(oracle::random_tensor({B * T, 8}, 11 + l));
  const auto sched = schedule_from_distances(std::vector<double>{1, 1}, c.steps);
  DistillConfig cfg;
  cfg.w_jasmin = 0.5;
  auto value = [&](const Tensor& wq) {
    OdeViT copy = m;
    copy.block.w_q.value = wq;
    Tape t;
    const StudentRollout r =
        rollout(t, copy, embed(bind(t, copy.embedder), t.constant(patches), B), B);
    return distill_loss(t, r, teacher, sched, cfg).total.value().item();
  };
  Tape t;
  const StudentRollout r = rollout(t, m, embed(bind(t, m.embedder), t.constant(patches), B), B);
  m.block.w_q.zero_grad();
  t.backward(distill_loss(t, r, teacher, sched, cfg).total);
  const auto fd = oracle::fd_gradient(value, m.block.w_q.value);
  CHECK(oracle::relative_error(m.block.w_q.grad.values(), fd) < 1e-5);
}

TEST_CASE("scripted early stop fires at e + patience - 1") {
  const int patience = 10;
  for (int e : {0, 3, 12}) {
    std::vector<std::vector<double>> history, bounds;
    int fired = -1;
    for (int epoch = 0; epoch < 40; ++epoch) {
      const double mse = epoch < e ? 2.0 : 0.5;
      history.push_back({mse, mse * 0.5});
      bounds.push_back({1.0, 1.0});
      if (fired < 0 && early_stop_check(history, bounds, patience)) fired = epoch;
    }
    CAPTURE(e);
    CHECK(fired == e + patience - 1);
  }
  // One checkpoint above its bound keeps the stop disarmed.
  std::vector<std::vector<double>> h(12, {0.5, 1.5}), b(12, {1.0, 1.0});
  CHECK_FALSE(early_stop_check(h, b, 10));
  // Equality is not strictly below.
  std::vector<std::vector<double>> eq(12, {1.0}), one(12, {1.0});
  CHECK_FALSE(early_stop_check(eq, one, 3));
  CHECK_THROWS_AS(early_stop_check(eq, one, 0), ContractError);
}

TEST_CASE("checkpoint bounds shrink with the step index") {
  BlockParams p(8, 2, 2);
  spectral_init(p, 1.0, 3);
  const auto sched = schedule_from_distances(std::vector<double>{1, 1, 1, 1}, 24);
  const auto b = checkpoint_bounds(p, sched, 10.0, 0.5);
  REQUIRE(b.size() == 4);
  for (std::size_t l = 1; l < 4; ++l) CHECK(b[l] < b[l - 1]);
  const HeadNorms n = head_spectral_norms(p);
  CHECK(b[3] == doctest::Approx(bound_closed_form({10.0, 0.5, 24, 4, n.value, n.key_query})));
}

TEST_CASE("contraction analysis") {
  std::vector<ContractionRecord> recs;
  for (std::size_t i = 0; i < 10; ++i) {
    ContractionRecord r;
    r.sample_id = i;
    r.distance = static_cast<double>(i);
    r.agrees = i < 5;
    r.teacher_correct = true;
    r.student_correct = i < 5;
    recs.push_back(r);
  }
  const auto t = contraction_analysis(recs, 2);
  REQUIRE(t.bins.size() == 2);
  CHECK(t.bins[0].count == 5);
  CHECK(t.bins[0].agreement_rate == 1.0);
  CHECK(t.bins[1].agreement_rate == 0.0);
  CHECK(t.bins[1].teacher_accuracy == 1.0);
  CHECK(t.threshold == doctest::Approx(4.5));
  CHECK(t.spearman == doctest::Approx(-1.0));

  for (auto& r : recs) r.agrees = true;
  const auto all = contraction_analysis(recs, 5);
  CHECK(all.threshold == doctest::Approx(9.0));
  CHECK(all.spearman == 0.0);

  recs[0].agrees = false;
  CHECK(contraction_analysis(recs, 5).threshold == 0.0);

  CHECK_THROWS_AS(contraction_analysis(std::span<const ContractionRecord>(), 3), ContractError);
  const std::string csv = contraction_csv(std::span(recs.data(), 2));
  CHECK(csv == "sample_id,distance,teacher_correct,student_correct,agrees\n0,0,1,1,0\n1,1,1,1,1\n");
}

TEST_CASE("epoch log jsonl") {
  EpochLog e;
  e.epoch = 3;
  e.loss_mse = {0.5, 0.25};
  e.bound = {1.0, 2.0};
  const std::string line = to_jsonl(e);
  CHECK(line.find('\n') == std::string::npos);
  const auto j = nlohmann::json::parse(line);
  for (const char* k : {"epoch", "lr", "loss_total", "loss_mse", "loss_jasmin", "loss_ce", "bound",
                        "early_stop_armed", "acc_eval"})
    CHECK(j.contains(k));
  CHECK(j["loss_mse"][1] == 0.25);
}

TEST_CASE("free training fits a tiny set") {
  const DatasetSplit train = gen_synthetic(16, 2, 16, 1);
  ModelConfig c = tiny_config();
  OdeViT m(c, 2);
  m.embedder.pixel_stats = train.stats;
  TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 8;
  tc.optim.lr = 1e-2;
  tc.cycles = 1;
  tc.seed = 3;
  const TrainResult r = train_free(m, train, &train, tc);
  REQUIRE(r.log.size() == 30);
  CHECK(r.epochs_run == 30);
  CHECK(r.log.back().loss_total < 0.5 * r.log.front().loss_total);
  CHECK(r.log.back().acc_eval >= 0.9);
}

TEST_CASE("distillation keeps frozen modules bit identical") {
  const DatasetSplit train = gen_synthetic(16, 2, 16, 4);
  ModelConfig c = tiny_config();
  TeacherViT teacher(c, 5);
  teacher.embedder.pixel_stats = train.stats;
  OdeViT student(c, 6);
  const OdeViT before = student;
  DistillConfig cfg = quick_distill(2);
  const TrainResult r = train_distill(student, teacher, train, &train, cfg);
  CHECK(r.epochs_run == 2);
  CHECK(r.log.size() == 2);
  CHECK(r.records.size() == 16);
  CHECK(r.schedule.step_indices.back() == c.steps);
  CHECK(r.first_below_bound.size() == 2);
  CHECK(student.embedder.proj.value == teacher.embedder.proj.value);
  CHECK(student.embedder.pos.value == teacher.embedder.pos.value);
  CHECK(student.head.weight.value == teacher.head.weight.value);
  CHECK(student.block.w_q.value != before.block.w_q.value);
  for (const auto& e : r.log) CHECK(e.loss_mse.size() == 2);

  OdeViT unfrozen(c, 6);
  DistillConfig open = cfg;
  open.freeze_head = false;
  open.w_ce = 1.0;
  train_distill(unfrozen, teacher, train, &train, open);
  CHECK(unfrozen.head.weight.value != teacher.head.weight.value);
}

TEST_CASE("distillation logs are reproducible") {
  const DatasetSplit train = gen_synthetic(16, 2, 16, 7);
  ModelConfig c = tiny_config();
  TeacherViT teacher(c, 8);
  auto run = [&] {
    OdeViT s(c, 9);
    std::string out;
    train_distill(s, teacher, train, nullptr, quick_distill(2),
                  [&](const EpochLog& e) { out += to_jsonl(e) + "\n"; });
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("early stop halts training once every checkpoint is under its bound") {
  const DatasetSplit train = gen_synthetic(16, 2, 16, 10);
  ModelConfig c = tiny_config();
  // A zero teacher leaves every hidden state at the embedding, and a student
  // with zero output projections reproduces that exactly: MSE 0, bound > 0.
  TeacherViT teacher(c, 11);
  for (BlockParams& b : teacher.layers)
    for (Parameter* w : b.projections()) w->value.fill(0.0);
  OdeViT student(c, 12);
  student.block.w_o.value.fill(0.0);
  student.block.w2.value.fill(0.0);
  DistillConfig cfg = quick_distill(20);
  cfg.w_jasmin = 0.0;
  cfg.early_stop.enabled = true;
  cfg.early_stop.patience = 3;
  const TrainResult r = train_distill(student, teacher, train, nullptr, cfg);
  CHECK(r.early_stopped);
  CHECK(r.epochs_run == 3);
  REQUIRE(r.log.size() == 3);
  for (const auto& e : r.log) {
    CHECK(e.early_stop_armed);
    for (std::size_t l = 0; l < e.loss_mse.size(); ++l) {
      CHECK(e.loss_mse[l] == 0.0);
      CHECK(e.bound[l] > 0.0);
    }
  }
  CHECK(r.first_below_bound == std::vector<int>{0, 0});

  cfg.early_stop.enabled = false;
  OdeViT again(c, 12);
  again.block.w_o.value.fill(0.0);
  again.block.w2.value.fill(0.0);
  CHECK(train_distill(again, teacher, train, nullptr, cfg).epochs_run == 20);
}

TEST_CASE("distillation rejects mismatched models") {
  const DatasetSplit train = gen_synthetic(8, 2, 16, 1);
  ModelConfig c = tiny_config();
  TeacherViT teacher(c, 1);
  ModelConfig wide = c;
  wide.dim = 16;
  OdeViT student(wide, 2);
  CHECK_THROWS_AS(train_distill(student, teacher, train, nullptr, quick_distill(1)), ContractError);
  OdeViT ok(c, 2);
  DistillConfig bad = quick_distill(1);
  bad.early_stop.patience = 0;
  CHECK_THROWS_AS(train_distill(ok, teacher, train, nullptr, bad), ContractError);
}

TEST_CASE("batched evaluation agrees with single-image forwards") {
  const DatasetSplit split = gen_synthetic(70, 2, 16, 13);
  ModelConfig c = tiny_config();
  TeacherViT teacher(c, 14);
  OdeViT student(c, 15);
  teacher.embedder.pixel_stats = split.stats;
  student.embedder.pixel_stats = split.stats;
  const Predictions tp = predict_teacher(teacher, split);
  const Predictions sp = predict_student(student, split, c.steps, c.horizon);
  REQUIRE(tp.labels.size() == 70);
  for (std::size_t i : {0, 1, 63, 64, 69}) {
    const TeacherOutput to = teacher_forward(split.images[i].pixels, teacher);
    const OdeOutput so = odevit_forward(split.images[i].pixels, student, false);
    for (std::size_t j = 0; j < 8; ++j) {
      CHECK(std::abs(tp.cls[i][j] - to.hidden.back().at(0, j)) < 1e-12);
      CHECK(std::abs(sp.cls[i][j] - so.traj.final().at(0, j)) < 1e-12);
    }
    CHECK(tp.labels[i] == argmax(to.logits));
  }
  const auto recs = contraction_records(teacher, student, split);
  CHECK(recs.size() == 70);
  std::vector<int> truth;
  for (const auto& im : split.images) truth.push_back(im.label);
  CHECK(accuracy(truth, split) == 1.0);
}

}  // TEST_SUITE
