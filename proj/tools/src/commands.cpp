#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "odeflow/container.hpp"
#include "odeflow/data.hpp"
#include "odeflow/distill.hpp"
#include "odeflow/dynamics.hpp"
#include "odeflow/error.hpp"
#include "odeflow/fields.hpp"
#include "odeflow/integrator.hpp"
#include "odeflow/models.hpp"
#include "odeflow/stability.hpp"

namespace odeflow::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError("config: no " + what + " path given");
  if (!fs::exists(path)) throw MissingFileError(what + " not found: " + path);
}

RunConfig resolve(const RunArgs& a) {
  RunConfig c = load_config(a.config);
  if (a.out) c.out_dir = *a.out;
  if (a.seed) c.seed = *a.seed;
  if (a.teacher) c.teacher = *a.teacher;
  return c;
}

fs::path out_path(const RunConfig& c, const std::string& name) {
  fs::create_directories(c.out_dir);
  return fs::path(c.out_dir) / name;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const fs::path& dir, const std::string& command, const std::string& hash,
                    std::uint64_t seed, const std::vector<fs::path>& artifacts) {
  ordered_json j;
  j["command"] = command;
  j["config_hash"] = hash;
  j["seed"] = seed;
  ordered_json list = ordered_json::array();
  for (const auto& p : artifacts) list.push_back(p.string());
  j["artifacts"] = list;
  j["created_utc"] = utc_now();
  write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

void write_manifest(const RunConfig& c, const std::string& command, const std::vector<fs::path>& artifacts) {
  write_manifest(c.out_dir, command, config_hash(c), c.seed, artifacts);
}

DatasetSplit load_split(const std::string& path, const ModelConfig& m, SplitTag tag, const std::string& what) {
  require_file(path, what);
  DatasetSplit s = load_cifar10_binary(path, m.image_size, m.num_classes);
  s.tag = tag;
  s.num_classes = m.num_classes;
  if (s.size() == 0) throw ConfigError(what + " is empty: " + path);
  return s;
}

struct Splits {
  DatasetSplit train;
  DatasetSplit eval;
  bool has_eval = false;
};

Splits load_splits(const RunConfig& c) {
  Splits s;
  s.train = load_split(c.data.train, c.model, SplitTag::Train, "training data");
  if (!c.data.eval.empty()) {
    s.eval = load_split(c.data.eval, c.model, SplitTag::Eval, "eval data");
    s.eval.stats = s.train.stats;
    s.has_eval = true;
  }
  return s;
}

EpochHook progress(const std::string& name, bool quiet) {
  if (quiet) return {};
  return [name](const EpochLog& e) {
    std::fprintf(stderr, "%s epoch %d  loss %.5f  eval acc %.4f\n", name.c_str(), e.epoch, e.loss_total,
                 e.acc_eval);
  };
}

std::string jsonl(const TrainResult& r) {
  std::string out;
  for (const EpochLog& e : r.log) out += to_jsonl(e) + "\n";
  return out;
}

OdeViT load_checkpoint(const std::string& path) {
  require_file(path, "checkpoint");
  return load_student(path);
}

const Tensor& eval_image(const DatasetSplit& eval, std::size_t index) {
  if (index >= eval.size()) {
    throw ConfigError("image index " + std::to_string(index) + " out of range (eval has " +
                      std::to_string(eval.size()) + " samples)");
  }
  return eval.images[index].pixels;
}

double agreement_rate(std::span<const int> a, std::span<const int> b) {
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
  return a.empty() ? 0.0 : static_cast<double>(same) / static_cast<double>(a.size());
}

std::string fmt_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string encode_pgm(std::size_t width, std::size_t height, const std::vector<unsigned char>& pixels) {
  if (pixels.size() != width * height) throw ContractError("encode_pgm: pixel count does not match size");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

int cmd_gen_data(const GenDataArgs& a) {
  const DatasetSplit train = gen_synthetic(a.n, a.classes, a.size, a.seed, SplitTag::Train);
  const DatasetSplit eval = gen_synthetic(a.eval_n, a.classes, a.size, a.seed + 1, SplitTag::Eval);
  fs::create_directories(a.out);
  const fs::path tp = fs::path(a.out) / "train.bin";
  const fs::path ep = fs::path(a.out) / "eval.bin";
  save_cifar10_binary(tp, train);
  save_cifar10_binary(ep, eval);

  ordered_json args = {{"n", a.n}, {"eval_n", a.eval_n}, {"classes", a.classes}, {"size", a.size}, {"seed", a.seed}};
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : args.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  write_manifest(a.out, "gen-data", buf, a.seed, {tp, ep});
  std::printf("wrote %zu training and %zu eval images to %s\n", train.size(), eval.size(), a.out.c_str());
  return 0;
}

int cmd_train_teacher(const RunArgs& a) {
  const RunConfig c = resolve(a);
  const Splits s = load_splits(c);
  TeacherViT teacher(c.model, c.seed);
  teacher.embedder.pixel_stats = s.train.stats;
  TrainConfig tc = c.train;
  tc.seed = c.seed + 1;
  const TrainResult r = train_teacher(teacher, s.train, s.has_eval ? &s.eval : nullptr, tc, progress("teacher", a.quiet));

  const fs::path ckpt = out_path(c, "teacher.ckpt");
  const fs::path log = out_path(c, "train_log.jsonl");
  save_teacher(ckpt, teacher);
  write_file_atomic(log, jsonl(r));
  write_manifest(c, "train-teacher", {ckpt, log});
  if (s.has_eval) {
    std::printf("teacher eval accuracy %.4f\n", accuracy(predict_teacher(teacher, s.eval).labels, s.eval));
  }
  return 0;
}

int cmd_train_ode(const RunArgs& a) {
  const RunConfig c = resolve(a);
  const Splits s = load_splits(c);
  OdeViT model(c.model, c.seed);
  model.embedder.pixel_stats = s.train.stats;
  TrainConfig tc = c.train;
  tc.seed = c.seed + 1;
  const TrainResult r = train_free(model, s.train, s.has_eval ? &s.eval : nullptr, tc, progress("ode", a.quiet));

  const fs::path ckpt = out_path(c, "student.ckpt");
  const fs::path log = out_path(c, "train_log.jsonl");
  save_student(ckpt, model);
  write_file_atomic(log, jsonl(r));
  write_manifest(c, "train-ode", {ckpt, log});
  if (s.has_eval) {
    const auto p = predict_student(model, s.eval, model.config.steps, model.config.horizon);
    std::printf("ode eval accuracy %.4f\n", accuracy(p.labels, s.eval));
  }
  return 0;
}

int cmd_distill(const RunArgs& a) {
  const RunConfig c = resolve(a);
  require_file(c.teacher, "teacher checkpoint");
  const TeacherViT teacher = load_teacher(c.teacher);
  const Splits s = load_splits(c);
  OdeViT student(c.model, c.seed);
  DistillConfig dc = c.distill;
  dc.train.seed = c.seed + 1;
  const TrainResult r =
      train_distill(student, teacher, s.train, s.has_eval ? &s.eval : nullptr, dc, progress("distill", a.quiet));

  const fs::path ckpt = out_path(c, "student.ckpt");
  const fs::path log = out_path(c, "train_log.jsonl");
  const fs::path csv = out_path(c, "contraction.csv");
  save_student(ckpt, student);
  write_file_atomic(log, jsonl(r));
  write_file_atomic(csv, contraction_csv(r.records));
  write_manifest(c, "distill", {ckpt, log, csv});
  std::printf("distilled %d epochs%s\n", r.epochs_run, r.early_stopped ? " (early stop)" : "");
  if (s.has_eval) {
    const auto sp = predict_student(student, s.eval, student.config.steps, student.config.horizon);
    const auto tp = predict_teacher(teacher, s.eval);
    std::printf("student eval accuracy %.4f, agreement with teacher %.4f\n", accuracy(sp.labels, s.eval),
                agreement_rate(sp.labels, tp.labels));
  }
  return 0;
}

int cmd_analyze(const RunArgs& a) {
  const RunConfig c = resolve(a);
  const OdeViT m = load_checkpoint(a.checkpoint);
  DatasetSplit eval = load_split(c.data.eval, m.config, SplitTag::Eval, "eval data");
  const AnalyzeConfig& ac = c.analyze;
  const std::size_t index = a.image.value_or(ac.image);
  const BlockField field(m.block);
  const int n = m.config.steps;
  const double horizon = m.config.horizon;
  const Tensor x0 = patchify(eval_image(eval, index), m.embedder);

  StabilityReport rep;
  rep.lipschitz_local = local_lipschitz(field, x0, ac.eps, ac.lipschitz_samples, c.seed);
  const int ref = ac.reference_factor * n;
  rep.cn_sup = estimate_cn_sup(field, euler_integrate(field, x0, ref, horizon));
  rep.bound_prop1 = bound_prop1(rep.lipschitz_local, rep.cn_sup, n);
  const HeadNorms norms = head_spectral_norms(m.block);
  BoundInputs bi;
  bi.radius = c.distill.radius;
  bi.lipschitz = c.distill.lipschitz_assumed;
  bi.steps = n;
  bi.head_dim = static_cast<int>(m.config.dim / m.config.heads);
  bi.norm_wv = norms.value;
  bi.norm_wkq = norms.key_query;
  rep.bound_closed_form = bound_closed_form(bi);
  rep.err_empirical = empirical_err(field, x0, n, ref, horizon);
  const LyapunovEstimate ly = lyapunov_max(field, x0, ac.lyapunov_steps, ac.lyapunov_horizon, 1, c.seed);
  rep.lambda_max = ly.lambda_max;
  rep.lyapunov_time = ly.lyapunov_time;

  const std::size_t count = std::min(ac.max_samples, eval.size());
  std::vector<SampleLyapunov> samples(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Tensor xi = patchify(eval.images[i].pixels, m.embedder);
    samples[i].label = eval.images[i].label;
    samples[i].prediction = argmax(odevit_forward(eval.images[i].pixels, m, false).logits);
    samples[i].lambda = lyapunov_max(field, xi, ac.lyapunov_steps, ac.lyapunov_horizon, 1, c.seed + i).lambda_max;
  }
  std::vector<std::string> warnings;
  const auto rows = per_class_lyapunov(samples, m.config.num_classes, &warnings);
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::string csv = "label,count,mean_lambda,accuracy\n";
  for (const auto& r : rows) {
    csv += std::to_string(r.label) + "," + std::to_string(r.count) + "," + fmt_real(r.mean_lambda) + "," +
           fmt_real(r.accuracy) + "\n";
  }

  const fs::path json = out_path(c, "stability.json");
  const fs::path table = out_path(c, "lyapunov_per_class.csv");
  write_file_atomic(json, to_json(rep) + "\n");
  write_file_atomic(table, csv);
  write_manifest(c, "analyze", {json, table});
  std::printf("%s\n", to_json(rep).c_str());
  return 0;
}

int cmd_sweep(const RunArgs& a) {
  const RunConfig c = resolve(a);
  const OdeViT m = load_checkpoint(a.checkpoint);
  const DatasetSplit eval = load_split(c.data.eval, m.config, SplitTag::Eval, "eval data");
  if (a.steps.empty() && a.horizons.empty()) throw ConfigError("sweep needs --steps and/or --horizons");
  for (int s : a.steps)
    if (s < 1) throw ConfigError("--steps entries must be positive");
  for (double h : a.horizons)
    if (!(h > 0.0)) throw ConfigError("--horizons entries must be positive");

  const auto reference = predict_student(m, eval, m.config.steps, m.config.horizon).labels;
  std::string csv = "steps,horizon,accuracy,agreement_vs_reference,status\n";
  auto row = [&](int steps, double horizon) {
    std::string line = std::to_string(steps) + "," + fmt_real(horizon) + ",";
    try {
      const auto p = predict_student(m, eval, steps, horizon).labels;
      line += fmt_real(accuracy(p, eval)) + "," + fmt_real(agreement_rate(p, reference)) + ",ok";
    } catch (const DivergenceError& e) {
      line += ",,diverged at step " + std::to_string(e.step());
    }
    csv += line + "\n";
  };
  for (int s : a.steps) row(s, m.config.horizon);
  for (double h : a.horizons) row(m.config.steps, h);

  const fs::path out = out_path(c, "sweep.csv");
  write_file_atomic(out, csv);
  write_manifest(c, "sweep", {out});
  std::printf("%s", csv.c_str());
  return 0;
}

int cmd_export_attn(const RunArgs& a) {
  const RunConfig c = resolve(a);
  const OdeViT m = load_checkpoint(a.checkpoint);
  const DatasetSplit eval = load_split(c.data.eval, m.config, SplitTag::Eval, "eval data");
  if (a.scale < 1) throw ConfigError("--scale must be positive");
  const Tensor& image = eval_image(eval, a.image.value_or(c.analyze.image));
  const OdeOutput out = odevit_forward(image, m, false);
  const HeadMaps maps = attention_maps(out.traj.final(), m.block);

  const std::size_t grid = m.config.image_size / m.config.patch;
  const std::size_t side = grid * static_cast<std::size_t>(a.scale);
  std::vector<fs::path> written;
  for (std::size_t h = 0; h < maps.heads(); ++h) {
    const Tensor p = maps.head(h);
    // CLS row restricted to the patch columns; registers are not part of the grid.
    std::vector<double> row(grid * grid);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = p.at(0, k + 1);
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double span = *hi - *lo;
    std::vector<unsigned char> px(side * side);
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double v = row[(y / a.scale) * grid + x / a.scale];
        const double u = span > 0.0 ? (v - *lo) / span : 0.0;
        px[y * side + x] = static_cast<unsigned char>(std::lround(255.0 * u));
      }
    }
    const fs::path path = out_path(c, "attn_head" + std::to_string(h) + ".pgm");
    write_file_atomic(path, encode_pgm(side, side, px));
    written.push_back(path);
  }
  write_manifest(c, "export-attn", written);
  std::printf("wrote %zu attention maps to %s\n", written.size(), c.out_dir.c_str());
  return 0;
}

int cmd_export_traj(const RunArgs& a) {
  const RunConfig c = resolve(a);
  const OdeViT m = load_checkpoint(a.checkpoint);
  const DatasetSplit eval = load_split(c.data.eval, m.config, SplitTag::Eval, "eval data");
  const Tensor& image = eval_image(eval, a.image.value_or(c.analyze.image));
  const OdeOutput out = odevit_forward(image, m, true);
  std::ostringstream os;
  write_trajectory_csv(os, out.traj);
  const fs::path path = out_path(c, "trajectory.csv");
  write_file_atomic(path, os.str());
  write_manifest(c, "export-traj", {path});
  std::printf("wrote %d steps to %s\n", out.traj.steps, path.string().c_str());
  return 0;
}

}  // namespace odeflow::cli
