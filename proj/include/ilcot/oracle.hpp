#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ilcot/infer.hpp"
#include "ilcot/metrics.hpp"
#include "ilcot/net.hpp"
#include "ilcot/world.hpp"

namespace ilcot {

struct OracleItem {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Brute-force reference checks. The behavioural items need a trained model.
std::vector<OracleItem> static_oracles();
std::vector<OracleItem> trained_oracles(const Params<float>& params, std::uint64_t data_seed, const SampleConfig& sample);

// Largest relative error |a - f| / max(|a| + |f|, 1e-8) between analytic and
// central-difference gradients, over every parameter of a random model.
struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};
GradCheck gradient_check(const ModelConfig& cfg, std::uint64_t seed, double eps = 1e-4);

// Two-sided tail mass P(X < lo) + P(X > hi) for X ~ Binomial(n, p).
double binomial_outside(int n, double p, int lo, int hi);

// Held-out tasks: ids whose hash puts them in the test split, walked upwards
// from 0. With a kind the task is generated for that kind directly;
// otherwise it is the dataset record for that id (revision variants skipped).
std::vector<EvalTask> held_out_tasks(std::uint64_t data_seed, std::size_t count, std::optional<TaskKind> kind = std::nullopt);

struct RevisionTrial {
  bool followed = false;  // final object painted in the revised colour
  bool well_formed = false;
};
// Runs the original instruction, revises after the mask step, and checks
// that the final image shows the revised colour on the new object.
RevisionTrial revision_trial(const Params<float>& params, std::uint64_t task_seed, const SampleConfig& sample,
                             std::uint64_t run_seed);

}  // namespace ilcot
