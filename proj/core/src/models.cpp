#include "odeflow/models.hpp"

#include <cmath>
#include <random>

#include "odeflow/error.hpp"

namespace odeflow {

namespace {

void trunc_normal(Tensor& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (double& v : t.values()) {
    double s = normal(rng);
    while (std::abs(s) > 2.0 * stddev) s = normal(rng);
    v = s;
  }
}

}  // namespace

// ---- embedder -----------------------------------------------------------------

PatchEmbedder::PatchEmbedder(const ModelConfig& cfg, std::uint64_t seed)
    : patch(cfg.patch),
      channels(cfg.channels),
      height(cfg.image_size),
      width(cfg.image_size),
      dim(cfg.dim),
      registers(cfg.registers) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ShapeError("image size " + std::to_string(height) + " not divisible by patch " +
                     std::to_string(patch));
  }
  std::mt19937_64 rng(seed);
  proj = Parameter("proj", Tensor({patch_dim(), dim}));
  proj_bias = Parameter("proj_bias", Tensor({dim}));
  cls = Parameter("cls", Tensor({dim}));
  pos = Parameter("pos", Tensor({patches() + 1, dim}));
  register_tokens = Parameter("registers", Tensor({registers, dim}));
  trunc_normal(proj.value, 0.02, rng);
  trunc_normal(cls.value, 0.02, rng);
  trunc_normal(pos.value, 0.02, rng);
  trunc_normal(register_tokens.value, 0.02, rng);
  pixel_stats.mean.assign(channels, 0.0);
  pixel_stats.std.assign(channels, 1.0);
}

std::vector<Parameter*> PatchEmbedder::parameters() {
  std::vector<Parameter*> out{&proj, &proj_bias, &cls, &pos};
  if (registers > 0) out.push_back(&register_tokens);
  return out;
}

void PatchEmbedder::set_trainable(bool trainable) {
  for (Parameter* p : parameters()) p->trainable = trainable;
}

Tensor extract_patches(const Tensor& image, std::size_t S) {
  if (image.rank() != 3) throw ShapeError("image must be [H, W, C], got " + shape_string(image.shape()));
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (S == 0 || H % S != 0 || W % S != 0) {
    throw ShapeError("image " + shape_string(image.shape()) + " not divisible into " +
                     std::to_string(S) + "x" + std::to_string(S) + " patches");
  }
  const std::size_t gh = H / S, gw = W / S;
  Tensor out({gh * gw, S * S * C});
  double* dst = out.data();
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t dy = 0; dy < S; ++dy) {
        const double* src = image.data() + ((py * S + dy) * W + px * S) * C;
        dst = std::copy(src, src + S * C, dst);
      }
  return out;
}

Tensor batch_patches(const PatchEmbedder& e, std::span<const Tensor* const> images) {
  const std::size_t M = e.patches(), P = e.patch_dim();
  Tensor out({images.size() * M, P});
  for (std::size_t b = 0; b < images.size(); ++b) {
    Tensor p = extract_patches(*images[b], e.patch);
    if (p.rows() != M || p.cols() != P) {
      throw ShapeError("image " + shape_string(images[b]->shape()) + " does not match embedder");
    }
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const std::size_t c = i % e.channels;
      p[i] = (p[i] - e.pixel_stats.mean[c]) / e.pixel_stats.std[c];
    }
    std::copy(p.data(), p.data() + p.numel(), out.data() + b * M * P);
  }
  return out;
}

EmbedderVars bind(Tape& t, PatchEmbedder& e) {
  EmbedderVars v{t.parameter(e.proj), t.parameter(e.proj_bias), t.parameter(e.cls),
                 t.parameter(e.pos), Var()};
  if (e.registers > 0) v.registers = t.parameter(e.register_tokens);
  return v;
}

Var embed(const EmbedderVars& v, Var patches, std::size_t batch) {
  Var projected = add_rowvec(matmul(patches, v.proj), v.proj_bias);
  return assemble_tokens(projected, v.cls, v.registers, v.pos, batch);
}

Tensor patchify(const Tensor& image, const PatchEmbedder& e) {
  const Tensor* images[] = {&image};
  Tensor patches = batch_patches(e, images);
  Tape t;
  EmbedderVars v{t.constant(e.proj.value), t.constant(e.proj_bias.value),
                 t.constant(e.cls.value), t.constant(e.pos.value), Var()};
  if (e.registers > 0) v.registers = t.constant(e.register_tokens.value);
  return embed(v, t.constant(std::move(patches)), 1).value();
}

// ---- head ---------------------------------------------------------------------

LinearHead::LinearHead(std::size_t dim, int classes, std::uint64_t seed) {
  if (classes < 1) throw ContractError("head needs at least one class");
  std::mt19937_64 rng(seed);
  weight = Parameter("weight", Tensor({dim, static_cast<std::size_t>(classes)}));
  bias = Parameter("bias", Tensor({static_cast<std::size_t>(classes)}));
  trunc_normal(weight.value, 0.02, rng);
}

std::vector<double> LinearHead::logits(std::span<const double> cls) const {
  const std::size_t D = weight.value.dim(0);
  if (cls.size() != D) throw ShapeError("head expects a CLS vector of length " + std::to_string(D));
  const std::size_t K = bias.value.numel();
  std::vector<double> out(bias.value.values().begin(), bias.value.values().end());
  for (std::size_t j = 0; j < D; ++j)
    for (std::size_t k = 0; k < K; ++k) out[k] += cls[j] * weight.value[j * K + k];
  return out;
}

void LinearHead::set_trainable(bool trainable) {
  weight.trainable = trainable;
  bias.trainable = trainable;
}

Var head_logits(Tape& t, LinearHead& h, Var cls_rows) {
  return add_rowvec(matmul(cls_rows, t.parameter(h.weight)), t.parameter(h.bias));
}

// ---- teacher ------------------------------------------------------------------

TeacherViT::TeacherViT(const ModelConfig& cfg, std::uint64_t seed)
    : config(cfg), embedder(cfg, seed), head(cfg.dim, cfg.num_classes, seed + 1) {
  if (cfg.teacher_layers < 2) throw ContractError("teacher needs at least two layers");
  std::mt19937_64 rng(seed + 2);
  for (std::size_t l = 0; l < cfg.teacher_layers; ++l) {
    BlockParams b(cfg.dim, cfg.heads, cfg.mlp_ratio);
    for (Parameter* w : b.projections()) trunc_normal(w->value, 0.02, rng);
    layers.push_back(std::move(b));
  }
}

std::vector<Parameter*> TeacherViT::parameters() {
  std::vector<Parameter*> out = embedder.parameters();
  for (BlockParams& b : layers)
    for (Parameter* p : b.parameters()) out.push_back(p);
  for (Parameter* p : head.parameters()) out.push_back(p);
  return out;
}

Var teacher_block(Var x, const BlockVars& w, const TokenLayout& layout) {
  Var mid = add(x, attn_subflow(x, w, layout, NormKind::Layer));
  return add(mid, mlp_subflow(mid, w, NormKind::Layer));
}

TeacherOutput teacher_forward(const Tensor& image, const TeacherViT& t) {
  TeacherOutput out;
  Tape tape;
  Tensor x0 = patchify(image, t.embedder);
  const TokenLayout layout{1, x0.rows(), t.config.heads};
  Var x = tape.constant(x0);
  out.hidden.push_back(std::move(x0));
  for (const BlockParams& b : t.layers) {
    x = teacher_block(x, bind_constant(tape, b), layout);
    out.hidden.push_back(x.value());
  }
  out.logits = t.head.logits(out.hidden.back().row(0));
  return out;
}

// ---- student ------------------------------------------------------------------

OdeViT::OdeViT(const ModelConfig& cfg, std::uint64_t seed)
    : config(cfg),
      embedder(cfg, seed),
      block(cfg.dim, cfg.heads, cfg.mlp_ratio),
      head(cfg.dim, cfg.num_classes, seed + 1) {
  spectral_init(block, 1.0, seed + 2);
}

std::vector<Parameter*> OdeViT::parameters() {
  std::vector<Parameter*> out = embedder.parameters();
  for (Parameter* p : block.parameters()) out.push_back(p);
  for (Parameter* p : head.parameters()) out.push_back(p);
  return out;
}

OdeOutput odevit_forward(const Tensor& image, const OdeViT& m, int steps, double horizon,
                         bool record) {
  const BlockField field(m.block);
  OdeOutput out{euler_integrate(field, patchify(image, m.embedder), steps, horizon, record), {}};
  out.logits = m.head.logits(out.traj.final().row(0));
  return out;
}

OdeOutput odevit_forward(const Tensor& image, const OdeViT& m, bool record) {
  return odevit_forward(image, m, m.config.steps, m.config.horizon, record);
}

bool agreement(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("agreement: class counts differ");
  return argmax(a) == argmax(b);
}

// ---- checkpoints --------------------------------------------------------------

namespace {

void put_config(Container& c, const ModelConfig& cfg) {
  c.header.dim = static_cast<std::uint32_t>(cfg.dim);
  c.header.heads = static_cast<std::uint32_t>(cfg.heads);
  c.header.patches = static_cast<std::uint32_t>((cfg.image_size / cfg.patch) * (cfg.image_size / cfg.patch));
  c.header.mlp_ratio = static_cast<std::uint32_t>(cfg.mlp_ratio);
  c.put("meta.image_size", {static_cast<double>(cfg.image_size)});
  c.put("meta.channels", {static_cast<double>(cfg.channels)});
  c.put("meta.patch", {static_cast<double>(cfg.patch)});
  c.put("meta.registers", {static_cast<double>(cfg.registers)});
  c.put("meta.num_classes", {static_cast<double>(cfg.num_classes)});
  c.put("meta.teacher_layers", {static_cast<double>(cfg.teacher_layers)});
  c.put("meta.steps", {static_cast<double>(cfg.steps)});
  c.put("meta.horizon", {cfg.horizon});
}

ModelConfig get_config(const Container& c) {
  ModelConfig cfg;
  cfg.dim = c.header.dim;
  cfg.heads = c.header.heads;
  cfg.mlp_ratio = c.header.mlp_ratio;
  cfg.image_size = static_cast<std::size_t>(c.scalar("meta.image_size"));
  cfg.channels = static_cast<std::size_t>(c.scalar("meta.channels"));
  cfg.patch = static_cast<std::size_t>(c.scalar("meta.patch"));
  cfg.registers = static_cast<std::size_t>(c.scalar("meta.registers"));
  cfg.num_classes = static_cast<int>(c.scalar("meta.num_classes"));
  cfg.teacher_layers = static_cast<std::size_t>(c.scalar("meta.teacher_layers"));
  cfg.steps = static_cast<int>(c.scalar("meta.steps"));
  cfg.horizon = c.scalar("meta.horizon");
  if (cfg.patch == 0 || cfg.image_size % cfg.patch != 0 ||
      c.header.patches != (cfg.image_size / cfg.patch) * (cfg.image_size / cfg.patch)) {
    throw FormatError("checkpoint patch grid is inconsistent with its header");
  }
  return cfg;
}

void put_embedder(Container& c, const PatchEmbedder& e) {
  c.put("embed.proj", e.proj.value);
  c.put("embed.proj_bias", e.proj_bias.value);
  c.put("embed.cls", e.cls.value);
  c.put("embed.pos", e.pos.value);
  c.put("embed.registers", e.register_tokens.value);
  c.put("embed.pixel_mean", e.pixel_stats.mean);
  c.put("embed.pixel_std", e.pixel_stats.std);
}

void get_embedder(const Container& c, PatchEmbedder& e) {
  e.proj.value = c.tensor("embed.proj", e.proj.value.shape());
  e.proj_bias.value = c.tensor("embed.proj_bias", e.proj_bias.value.shape());
  e.cls.value = c.tensor("embed.cls", e.cls.value.shape());
  e.pos.value = c.tensor("embed.pos", e.pos.value.shape());
  e.register_tokens.value = c.tensor("embed.registers", e.register_tokens.value.shape());
  e.pixel_stats.mean = c.get("embed.pixel_mean").values;
  e.pixel_stats.std = c.get("embed.pixel_std").values;
  if (e.pixel_stats.mean.size() != e.channels || e.pixel_stats.std.size() != e.channels) {
    throw FormatError("pixel statistics do not match channel count");
  }
}

void put_head(Container& c, const LinearHead& h) {
  c.put("head.weight", h.weight.value);
  c.put("head.bias", h.bias.value);
}

void get_head(const Container& c, LinearHead& h) {
  h.weight.value = c.tensor("head.weight", h.weight.value.shape());
  h.bias.value = c.tensor("head.bias", h.bias.value.shape());
}

}  // namespace

Container teacher_container(const TeacherViT& t) {
  Container c;
  c.header.kind = ContainerKind::Teacher;
  put_config(c, t.config);
  put_embedder(c, t.embedder);
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    put_block(c, "layer" + std::to_string(l) + ".", t.layers[l]);
  }
  put_head(c, t.head);
  return c;
}

TeacherViT teacher_from_container(const Container& c) {
  if (c.header.kind != ContainerKind::Teacher) throw FormatError("checkpoint is not a teacher");
  TeacherViT t(get_config(c), 0);
  get_embedder(c, t.embedder);
  for (std::size_t l = 0; l < t.layers.size(); ++l) {
    get_block(c, "layer" + std::to_string(l) + ".", t.layers[l]);
  }
  get_head(c, t.head);
  return t;
}

Container student_container(const OdeViT& m) {
  Container c;
  c.header.kind = ContainerKind::Student;
  put_config(c, m.config);
  put_embedder(c, m.embedder);
  put_block(c, "block.", m.block);
  put_head(c, m.head);
  return c;
}

OdeViT student_from_container(const Container& c) {
  if (c.header.kind != ContainerKind::Student) throw FormatError("checkpoint is not an ODE student");
  OdeViT m(get_config(c), 0);
  get_embedder(c, m.embedder);
  get_block(c, "block.", m.block);
  get_head(c, m.head);
  return m;
}

void save_teacher(const std::filesystem::path& path, const TeacherViT& t) {
  save_container(path, teacher_container(t));
}

TeacherViT load_teacher(const std::filesystem::path& path) {
  return teacher_from_container(load_container(path));
}

void save_student(const std::filesystem::path& path, const OdeViT& m) {
  save_container(path, student_container(m));
}

OdeViT load_student(const std::filesystem::path& path) {
  return student_from_container(load_container(path));
}

}  // namespace odeflow
