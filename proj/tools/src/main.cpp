#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "commands.hpp"
#include "config.hpp"
#include "odeflow/error.hpp"
#include "odeflow/parallel.hpp"

using namespace odeflow;
using namespace odeflow::cli;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitDivergence = 4;

void add_run_options(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("-c,--config", a.config, "JSON run config")->required();
  cmd->add_option("-o,--out", a.out, "Output directory (overrides out_dir)");
  cmd->add_option("--seed", a.seed, "Seed (overrides seed)");
  cmd->add_flag("-q,--quiet", a.quiet, "No per-epoch progress on stderr");
}

void add_checkpoint_option(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("--checkpoint", a.checkpoint, "ODE model checkpoint")->required();
}

void add_image_option(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("--image", a.image, "Eval sample index (overrides analyze.image)");
}

}  // namespace

int main(int argc, char** argv) {
  retain_heap_memory();

  CLI::App app{"odeflow: continuous-depth vision transformers as autonomous ODEs"};
  app.require_subcommand(1);
  app.footer("Config keys and defaults (absent keys take these values; unknown keys are rejected):\n" +
             dump_config(default_config()) +
             "\nExit codes: 0 ok, 1 other failure, 2 invalid config, 3 missing file, 4 numerical divergence.\n"
             "ODEFLOW_THREADS caps the number of worker threads.");

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write synthetic train/eval splits in CIFAR-10 binary layout");
  g->add_option("--n", gen.n, "Training images")->capture_default_str();
  g->add_option("--eval-n", gen.eval_n, "Eval images")->capture_default_str();
  g->add_option("--classes", gen.classes, "Number of classes (2..10)")->capture_default_str();
  g->add_option("--size", gen.size, "Image side, 16 or 32")->capture_default_str();
  g->add_option("--seed", gen.seed, "Seed (eval uses seed + 1)")->capture_default_str();
  g->add_option("-o,--out", gen.out, "Output directory")->capture_default_str();

  RunArgs run;
  auto* tt = app.add_subcommand("train-teacher", "Train the discrete ViT teacher with cross entropy");
  add_run_options(tt, run);
  auto* to = app.add_subcommand("train-ode", "Train the ODE model directly with cross entropy");
  add_run_options(to, run);
  auto* di = app.add_subcommand("distill", "Distill a teacher checkpoint into the ODE model");
  add_run_options(di, run);
  di->add_option("--teacher", run.teacher, "Teacher checkpoint (overrides teacher)");
  auto* an = app.add_subcommand("analyze", "Stability report and per-class Lyapunov table");
  add_run_options(an, run);
  add_checkpoint_option(an, run);
  add_image_option(an, run);
  auto* sw = app.add_subcommand("sweep", "Accuracy and agreement across step counts and horizons");
  add_run_options(sw, run);
  add_checkpoint_option(sw, run);
  sw->add_option("--steps", run.steps, "Step counts at the trained horizon")->delimiter(',');
  sw->add_option("--horizons", run.horizons, "Horizons at the trained step count")->delimiter(',');
  auto* ea = app.add_subcommand("export-attn", "CLS attention maps of the final state, one PGM per head");
  add_run_options(ea, run);
  add_checkpoint_option(ea, run);
  add_image_option(ea, run);
  ea->add_option("--scale", run.scale, "Pixels per patch in the output image")->capture_default_str();
  auto* et = app.add_subcommand("export-traj", "Token trajectory of one image as CSV");
  add_run_options(et, run);
  add_checkpoint_option(et, run);
  add_image_option(et, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*tt) return cmd_train_teacher(run);
    if (*to) return cmd_train_ode(run);
    if (*di) return cmd_distill(run);
    if (*an) return cmd_analyze(run);
    if (*sw) return cmd_sweep(run);
    if (*ea) return cmd_export_attn(run);
    if (*et) return cmd_export_traj(run);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: invalid settings: %s\n", e.what());
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: invalid settings: %s\n", e.what());
    return kExitConfig;
  } catch (const MissingFileError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitMissing;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
