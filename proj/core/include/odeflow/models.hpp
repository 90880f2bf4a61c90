#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "odeflow/autodiff.hpp"
#include "odeflow/container.hpp"
#include "odeflow/data.hpp"
#include "odeflow/dynamics.hpp"
#include "odeflow/integrator.hpp"

namespace odeflow {

/// Architecture knobs shared by teacher and student.
struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t registers = 0;
  int num_classes = 4;
  std::size_t teacher_layers = 4;
  int steps = kDefaultSteps;
  double horizon = kDefaultHorizon;
};

/// Stride-S patch projection, CLS token, learned positions and register tokens.
/// Pixels are standardized with the stored per-channel statistics first.
struct PatchEmbedder {
  std::size_t patch = 8;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t dim = 64;
  std::size_t registers = 0;

  Parameter proj;       // [S*S*C, D]
  Parameter proj_bias;  // [D]
  Parameter cls;        // [D]
  Parameter pos;        // [M+1, D]; registers get no positional embedding
  Parameter register_tokens;  // [R, D]
  ChannelStats pixel_stats;

  PatchEmbedder() = default;
  PatchEmbedder(const ModelConfig& cfg, std::uint64_t seed);

  std::size_t patches() const noexcept { return (height / patch) * (width / patch); }
  std::size_t tokens() const noexcept { return patches() + 1 + registers; }
  std::size_t patch_dim() const noexcept { return patch * patch * channels; }

  std::vector<Parameter*> parameters();
  void set_trainable(bool trainable);
};

/// Non-overlapping S x S patches of an [H, W, C] image as rows of an
/// [M, S*S*C] matrix, patch grid row-major and (dy, dx, c) inside a patch.
Tensor extract_patches(const Tensor& image, std::size_t patch);

/// Standardized patches of a batch, stacked as [B*M, S*S*C].
Tensor batch_patches(const PatchEmbedder& e, std::span<const Tensor* const> images);

struct EmbedderVars {
  Var proj, proj_bias, cls, pos, registers;
};
EmbedderVars bind(Tape& t, PatchEmbedder& e);
Var embed(const EmbedderVars& v, Var patches, std::size_t batch);

/// TokenState for one image: CLS row 0, then M patches, then registers.
Tensor patchify(const Tensor& image, const PatchEmbedder& e);

struct LinearHead {
  Parameter weight;  // [D, classes]
  Parameter bias;    // [classes]

  LinearHead() = default;
  LinearHead(std::size_t dim, int classes, std::uint64_t seed);

  int classes() const { return static_cast<int>(bias.value.numel()); }
  std::vector<double> logits(std::span<const double> cls) const;
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
  void set_trainable(bool trainable);
};

Var head_logits(Tape& t, LinearHead& h, Var cls_rows);

/// Discrete ViT with independent LayerNorm pre-norm residual blocks.
struct TeacherViT {
  ModelConfig config;
  PatchEmbedder embedder;
  std::vector<BlockParams> layers;
  LinearHead head;

  TeacherViT() = default;
  TeacherViT(const ModelConfig& cfg, std::uint64_t seed);

  std::vector<Parameter*> parameters();
};

/// ODE student: one shared block integrated for `steps` Euler steps.
struct OdeViT {
  ModelConfig config;
  PatchEmbedder embedder;
  BlockParams block;
  LinearHead head;

  OdeViT() = default;
  /// Block is spectrally initialized at unit norm.
  OdeViT(const ModelConfig& cfg, std::uint64_t seed);

  std::vector<Parameter*> parameters();
};

struct TeacherOutput {
  std::vector<Tensor> hidden;  // L+1 token states
  std::vector<double> logits;
};

TeacherOutput teacher_forward(const Tensor& image, const TeacherViT& t);

/// One teacher block as a residual map on a tape.
Var teacher_block(Var x, const BlockVars& w, const TokenLayout& layout);

struct OdeOutput {
  Trajectory traj;
  std::vector<double> logits;
};

OdeOutput odevit_forward(const Tensor& image, const OdeViT& m, bool record = true);
OdeOutput odevit_forward(const Tensor& image, const OdeViT& m, int steps, double horizon,
                         bool record);

/// argmax(a) == argmax(b), ties to the lowest index.
bool agreement(std::span<const double> a, std::span<const double> b);

Container teacher_container(const TeacherViT& t);
TeacherViT teacher_from_container(const Container& c);
Container student_container(const OdeViT& m);
OdeViT student_from_container(const Container& c);

void save_teacher(const std::filesystem::path& path, const TeacherViT& t);
TeacherViT load_teacher(const std::filesystem::path& path);
void save_student(const std::filesystem::path& path, const OdeViT& m);
OdeViT load_student(const std::filesystem::path& path);

}  // namespace odeflow
