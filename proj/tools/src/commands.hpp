#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "config.hpp"

namespace odeflow::cli {

struct GenDataArgs {
  std::size_t n = 2000;
  std::size_t eval_n = 500;
  int classes = 4;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  std::string out = "data";
};

/// Options shared by the config-driven commands. Flags override the file.
struct RunArgs {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> teacher;
  std::string checkpoint;
  std::optional<std::size_t> image;
  std::vector<int> steps;
  std::vector<double> horizons;
  int scale = 8;
  bool quiet = false;
};

int cmd_gen_data(const GenDataArgs& a);
int cmd_train_teacher(const RunArgs& a);
int cmd_train_ode(const RunArgs& a);
int cmd_distill(const RunArgs& a);
int cmd_analyze(const RunArgs& a);
int cmd_sweep(const RunArgs& a);
int cmd_export_attn(const RunArgs& a);
int cmd_export_traj(const RunArgs& a);

/// PGM (P5) bytes of an 8-bit grayscale image, row-major.
std::string encode_pgm(std::size_t width, std::size_t height, const std::vector<unsigned char>& pixels);

}  // namespace odeflow::cli
