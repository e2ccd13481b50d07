#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "ilcot/net.hpp"
#include "ilcot/seq.hpp"

namespace ilcot {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-15;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int steps = 10000;
  int batch_size = 8;
  double lambda_ce = 1.0;
  double time_shift = 4.0;
  double text_only_fraction = 0.1;
  std::uint64_t seed = 0;
  int checkpoint_every = 2000;
  ModelConfig model;

  // Throws UsageError naming the first violated constraint.
  void check() const;
};

struct AdamState {
  std::vector<Mat<float>> m, v;
  long step = 0;
};

struct StepInfo {
  double grad_norm = 0.0;  // before clipping
  double applied_norm = 0.0;
};

// Clips the global gradient norm, then applies one bias-corrected AdamW
// update. Throws NonFiniteGradient and leaves params untouched in that case.
StepInfo optimizer_step(Params<float>& params, const Params<float>& grads, AdamState& state, const TrainConfig& cfg);

struct LogRow {
  int step = 0;
  LossBreakdown loss;
};

struct TrainResult {
  Params<float> params;
  std::vector<LogRow> log;
  double seconds = 0.0;
};

// Batch `step` of a run: record indices drawn with replacement, converted to
// the text-only variant for a fraction of batches.
std::vector<InterleavedSequence> training_batch(const std::vector<Record>& records, const TrainConfig& cfg, int step);

// Logs the loss of each batch before its update. Writes metrics.csv,
// periodic checkpoints and model.bin into out_dir when it is non-empty.
TrainResult train(const TrainConfig& cfg, const std::vector<Record>& records, const std::filesystem::path& out_dir,
                  const std::function<void(const LogRow&)>& on_step = {});

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& log);

}  // namespace ilcot
