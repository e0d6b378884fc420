#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "copeft/checkpoint.hpp"
#include "copeft/eval.hpp"
#include "copeft/scenes.hpp"

namespace copeft {

struct TrainOptions {
  AdamOptions adam;
  std::size_t batch = 2;
  std::size_t epochs = 20;
  LossOptions loss{3.0, 0.1};
};

struct TrainStats {
  std::size_t steps = 0;                 // optimizer steps taken
  std::vector<double> epoch_loss;        // mean per-frame loss of each epoch
  std::set<std::size_t> frames_touched;  // dataset indices that produced a gradient
};

// Trains the trainable entries of `model` on the listed frames of `ds`. Each
// epoch visits the frames in a seeded shuffle; a batch is the per-frame
// gradients summed in visit order and divided by the number of frames in it.
// Encoder features are computed once when no encoder weight is trainable.
TrainStats train(Model& model, const Dataset& ds, std::span<const std::size_t> frames, const TrainOptions& opt,
                 std::uint64_t seed, std::ostream* log = nullptr);

// ceil(rate * n); rate must lie in (0, 1].
std::size_t budget_size(std::size_t n, double rate);
// First budget_size(n, rate) indices of a seeded shuffle of 0..n-1.
std::vector<std::size_t> select_frames(std::size_t n, double rate, std::uint64_t seed);

// Fresh base model with every weight trained on all of `ds`.
Model train_base(const ModelConfig& cfg, const Dataset& ds, const TrainOptions& opt, std::uint64_t seed,
                 std::ostream* log = nullptr);

struct AdaptOutcome {
  Model model;
  FreezeMask mask;
  TrainStats stats;
  std::vector<std::size_t> frames;  // the budgeted subset
};

// Layers `method` on `base`, freezes everything outside its mask and trains on
// the budgeted subset of `ds`. "none" takes no step; "scratch" starts from
// fresh weights. Throws if a frozen weight changed.
AdaptOutcome adapt(const Model& base, const Dataset& ds, const MethodConfig& method, double rate,
                   std::uint64_t seed, const TrainOptions& opt, std::ostream* log = nullptr);

struct ExperimentConfig {
  std::string train_a;
  std::string train_b;
  std::string test_b;
  std::vector<std::string> methods{"none", "scratch", "decoder_only", "ssf", "adapter", "copeft"};
  double rate = 0.1;
  std::vector<std::uint64_t> seeds{0};
  ModelConfig model;
  TrainOptions adapt_opt;          // epochs 20
  TrainOptions base_opt{{0.0005}, 2, 30};
  std::uint64_t base_seed = 0;
  std::string out_dir;
  std::string base_checkpoint;     // reused when it exists, written otherwise
  bool record_wall_clock = true;   // off -> seconds column is 0

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Runs every method x seed cell. Writes <out>/base.cpft (unless a cached base
// was given), <out>/reports/<cell>.json, <out>/deltas/<cell>.cpft and
// <out>/table.csv. Returns the reports in methods-major order.
std::vector<MetricsReport> run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

// File-name-safe form of a method label plus seed.
std::string cell_name(const std::string& method_label, std::uint64_t seed);

// CSV with header method,seed,params_trainable,params_total,ratio,AP50,AP70,seconds.
std::string emit_table(std::span<const MetricsReport> reports);

void write_report(const MetricsReport& r, const std::filesystem::path& path);
MetricsReport read_report(const std::filesystem::path& path);
// Every *.json report in `dir`, ordered by file name.
std::vector<MetricsReport> read_reports(const std::filesystem::path& dir);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace copeft
