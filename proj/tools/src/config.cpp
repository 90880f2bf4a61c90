#include "config.hpp"

#include <cstdio>
#include <limits>
#include <set>

#include <json.hpp>

#include "odeflow/container.hpp"

namespace odeflow::cli {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

/// 1-based line of the first occurrence of "key" in the source, 0 if absent.
std::size_t line_of_key(const std::string& text, const std::string& key) {
  const std::size_t pos = text.find('"' + key + '"');
  if (pos == std::string::npos) return 0;
  std::size_t line = 1;
  for (std::size_t i = 0; i < pos; ++i) line += text[i] == '\n' ? 1 : 0;
  return line;
}

/// Walks one JSON object, remembering which keys were consumed so that
/// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& obj, std::string path, const std::string& text)
      : obj_(obj), path_(std::move(path)), text_(text) {
    if (!obj_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  Section child(const std::string& key) {
    seen_.insert(key);
    return Section(obj_.at(key), qualify(key), text_);
  }

  void read(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }

  void read(const std::string& key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
    }
  }

  void read(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }

  void read(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }

  void read(const std::string& key, std::size_t& out, std::size_t lo) {
    std::uint64_t v = out;
    read(key, v);
    if (v < lo) fail(key, "must be at least " + std::to_string(lo));
    out = static_cast<std::size_t>(v);
  }

  void read(const std::string& key, int& out, int lo) {
    std::uint64_t v = static_cast<std::uint64_t>(std::max(out, 0));
    const bool present = has(key);
    read(key, v);
    if (!present) return;
    if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) fail(key, "is too large");
    if (static_cast<int>(v) < lo) fail(key, "must be at least " + std::to_string(lo));
    out = static_cast<int>(v);
  }

  /// Reads a real and checks lo <= value (strictly when `open`).
  void read(const std::string& key, double& out, double lo, bool open) {
    read(key, out);
    if (open ? !(out > lo) : !(out >= lo)) {
      fail(key, std::string("must be ") + (open ? "greater than " : "at least ") + std::to_string(lo));
    }
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) fail(it.key(), "unknown key");
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    const std::size_t line = line_of_key(text_, key);
    std::string msg = "config";
    if (line) msg += " line " + std::to_string(line);
    msg += ": '" + qualify(key) + "' " + what;
    throw ConfigError(msg);
  }

 private:
  const json* take(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& obj_;
  std::string path_;
  const std::string& text_;
  std::set<std::string> seen_;
};

void read_model(Section s, ModelConfig& m) {
  s.read("image_size", m.image_size, 1);
  s.read("channels", m.channels, 1);
  s.read("patch", m.patch, 1);
  s.read("dim", m.dim, 1);
  s.read("heads", m.heads, 1);
  s.read("mlp_ratio", m.mlp_ratio, 1);
  s.read("registers", m.registers, 0);
  s.read("num_classes", m.num_classes, 2);
  s.read("teacher_layers", m.teacher_layers, 2);
  s.read("steps", m.steps, 1);
  s.read("horizon", m.horizon, 0.0, true);
  s.finish();
  if (m.image_size % m.patch != 0) s.fail("patch", "must divide image_size");
  if (m.dim % m.heads != 0) s.fail("heads", "must divide dim");
  if (m.num_classes > 10) s.fail("num_classes", "must be at most 10");
  if (m.channels != 3) s.fail("channels", "must be 3 (RGB)");
}

void read_train(Section s, TrainConfig& t) {
  s.read("epochs", t.epochs, 1);
  s.read("batch_size", t.batch_size, 1);
  s.read("lr", t.optim.lr, 0.0, true);
  s.read("weight_decay", t.optim.weight_decay, 0.0, false);
  s.read("warmup_frac", t.warmup_frac, 0.0, false);
  s.read("cycles", t.cycles, 1);
  s.read("eval_each_epoch", t.eval_each_epoch);
  s.finish();
  if (t.warmup_frac >= 1.0) s.fail("warmup_frac", "must be below 1");
}

void read_distill(Section s, DistillConfig& d) {
  s.read("w_mse", d.w_mse, 0.0, false);
  s.read("w_jasmin", d.w_jasmin, 0.0, false);
  s.read("w_ce", d.w_ce, 0.0, false);
  s.read("match_cls_only", d.match_cls_only);
  s.read("jasmin_k", d.jasmin_k, 2);
  s.read("temperature", d.temperature, 0.0, true);
  s.read("cls_only_distance", d.cls_only_distance);
  s.read("radius", d.radius, 0.0, true);
  s.read("lipschitz_assumed", d.lipschitz_assumed, 0.0, true);
  s.read("freeze_embedder", d.freeze_embedder);
  s.read("freeze_head", d.freeze_head);
  if (s.has("early_stop")) {
    Section e = s.child("early_stop");
    e.read("enabled", d.early_stop.enabled);
    e.read("patience", d.early_stop.patience, 1);
    e.read("window", d.early_stop.window, 1);
    e.finish();
  }
  s.finish();
}

void read_analyze(Section s, AnalyzeConfig& a) {
  s.read("image", a.image, 0);
  s.read("eps", a.eps, 0.0, true);
  s.read("lipschitz_samples", a.lipschitz_samples, 1);
  s.read("reference_factor", a.reference_factor, 8);
  s.read("lyapunov_steps", a.lyapunov_steps, 1);
  s.read("lyapunov_horizon", a.lyapunov_horizon, 0.0, true);
  s.read("max_samples", a.max_samples, 1);
  s.finish();
}

ordered_json to_ordered(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  const ModelConfig& m = c.model;
  j["model"] = {{"image_size", m.image_size}, {"channels", m.channels},   {"patch", m.patch},
                {"dim", m.dim},               {"heads", m.heads},         {"mlp_ratio", m.mlp_ratio},
                {"registers", m.registers},   {"num_classes", m.num_classes},
                {"teacher_layers", m.teacher_layers},                      {"steps", m.steps},
                {"horizon", m.horizon}};
  j["data"] = {{"train", c.data.train}, {"eval", c.data.eval}};
  const TrainConfig& t = c.train;
  j["train"] = {{"epochs", t.epochs},           {"batch_size", t.batch_size},
                {"lr", t.optim.lr},             {"weight_decay", t.optim.weight_decay},
                {"warmup_frac", t.warmup_frac}, {"cycles", t.cycles},
                {"eval_each_epoch", t.eval_each_epoch}};
  const DistillConfig& d = c.distill;
  j["distill"] = {{"w_mse", d.w_mse},
                  {"w_jasmin", d.w_jasmin},
                  {"w_ce", d.w_ce},
                  {"match_cls_only", d.match_cls_only},
                  {"jasmin_k", d.jasmin_k},
                  {"temperature", d.temperature},
                  {"cls_only_distance", d.cls_only_distance},
                  {"radius", d.radius},
                  {"lipschitz_assumed", d.lipschitz_assumed},
                  {"freeze_embedder", d.freeze_embedder},
                  {"freeze_head", d.freeze_head},
                  {"early_stop",
                   {{"enabled", d.early_stop.enabled},
                    {"patience", d.early_stop.patience},
                    {"window", d.early_stop.window}}}};
  const AnalyzeConfig& a = c.analyze;
  j["analyze"] = {{"image", a.image},
                  {"eps", a.eps},
                  {"lipschitz_samples", a.lipschitz_samples},
                  {"reference_factor", a.reference_factor},
                  {"lyapunov_steps", a.lyapunov_steps},
                  {"lyapunov_horizon", a.lyapunov_horizon},
                  {"max_samples", a.max_samples}};
  j["teacher"] = c.teacher;
  j["out_dir"] = c.out_dir;
  return j;
}

}  // namespace

RunConfig default_config() {
  RunConfig c;
  c.train.epochs = 20;
  c.train.optim.lr = 3e-3;
  c.train.cycles = 1;
  c.distill.train = c.train;
  return c;
}

RunConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < e.byte && i < text.size(); ++i) line += text[i] == '\n' ? 1 : 0;
    throw ConfigError("config line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
  }
  RunConfig c = default_config();
  Section s(root, "", text);
  s.read("seed", c.seed);
  if (s.has("model")) read_model(s.child("model"), c.model);
  if (s.has("data")) {
    Section d = s.child("data");
    d.read("train", c.data.train);
    d.read("eval", c.data.eval);
    d.finish();
  }
  if (s.has("train")) read_train(s.child("train"), c.train);
  // Distillation shares the optimisation schedule; its own section only adds loss settings.
  c.distill.train = c.train;
  if (s.has("distill")) read_distill(s.child("distill"), c.distill);
  if (s.has("analyze")) read_analyze(s.child("analyze"), c.analyze);
  s.read("teacher", c.teacher);
  s.read("out_dir", c.out_dir);
  s.finish();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingFileError("config file not found: " + path.string());
  return parse_config(read_file(path));
}

std::string dump_config(const RunConfig& cfg) { return to_ordered(cfg).dump(2) + "\n"; }

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : to_ordered(cfg).dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace odeflow::cli
