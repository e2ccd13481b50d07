#include "ilcot/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ilcot/error.hpp"
#include "ilcot/rng.hpp"
#include "ilcot/world.hpp"

namespace ilcot {

void TrainConfig::check() const {
  auto fail = [](const char* what) { throw Error(Errc::UsageError, what); };
  if (!(lr > 0)) fail("lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(eps > 0)) fail("eps must be positive");
  if (!(weight_decay >= 0)) fail("weight_decay must be nonnegative");
  if (!(grad_clip > 0)) fail("grad_clip must be positive");
  if (steps < 0) fail("steps must be nonnegative");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(lambda_ce >= 0)) fail("lambda_ce must be nonnegative");
  if (!(time_shift > 0)) fail("time_shift must be positive");
  if (!(text_only_fraction >= 0 && text_only_fraction <= 1)) fail("text_only_fraction must lie in [0, 1]");
  if (checkpoint_every < 0) fail("checkpoint_every must be nonnegative");
}

StepInfo optimizer_step(Params<float>& params, const Params<float>& grads, AdamState& state, const TrainConfig& cfg) {
  if (grads.tensors.size() != params.tensors.size()) throw Error(Errc::ShapeMismatch, "gradient set does not match params");
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.tensors.size(); ++i) {
    const auto& g = grads.tensors[i];
    if (g.rows() != params.tensors[i].rows() || g.cols() != params.tensors[i].cols())
      throw Error(Errc::ShapeMismatch, "gradient shape for " + params.layout.specs[i].name);
    if (!g.allFinite()) throw Error(Errc::NonFiniteGradient, "non-finite gradient in " + params.layout.specs[i].name);
    sq += g.template cast<double>().squaredNorm();
  }
  StepInfo info;
  info.grad_norm = std::sqrt(sq);
  if (!std::isfinite(info.grad_norm)) throw Error(Errc::NonFiniteGradient, "gradient norm overflow");
  const double scale = info.grad_norm > cfg.grad_clip ? cfg.grad_clip / info.grad_norm : 1.0;
  info.applied_norm = info.grad_norm * scale;

  if (state.m.size() != params.tensors.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& t : params.tensors) {
      state.m.push_back(Mat<float>::Zero(t.rows(), t.cols()));
      state.v.push_back(Mat<float>::Zero(t.rows(), t.cols()));
    }
    state.step = 0;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float s = static_cast<float>(scale);
  const float step_size = static_cast<float>(cfg.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(cfg.eps);
  const float decay = static_cast<float>(cfg.lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto p = params.tensors[i].array();
    auto m = state.m[i].array();
    auto v = state.v[i].array();
    const auto g = grads.tensors[i].array() * s;
    if (decay != 0.f) p -= decay * p;
    m = b1 * m + (1.f - b1) * g;
    v = b2 * v + (1.f - b2) * g * g;
    p -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
  }
  return info;
}

std::vector<InterleavedSequence> training_batch(const std::vector<Record>& records, const TrainConfig& cfg, int step) {
  if (records.empty()) throw Error(Errc::DataError, "training set is empty");
  Rng rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(step), 0xba7cULL}));
  const bool text_only = rng.uniform() < cfg.text_only_fraction;
  std::vector<InterleavedSequence> batch;
  batch.reserve(static_cast<std::size_t>(cfg.batch_size));
  for (int b = 0; b < cfg.batch_size; ++b) {
    const Record& r = records[rng.below(records.size())];
    if (!r.seq.well_formed) throw Error(Errc::DataError, "record " + std::to_string(r.id) + " is not well formed");
    // Revision examples only make sense as interleaved chains.
    if (text_only && r.variant != "revised")
      batch.push_back(to_text_only(r.seq));
    else
      batch.push_back(r.seq);
  }
  return batch;
}

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  os << "step,ce,mse,total\n";
  char buf[128];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g\n", row.step, row.loss.ce, row.loss.mse, row.loss.total);
    os << buf;
  }
  if (!os) throw Error(Errc::IoError, "write failed for " + path.string());
}

TrainResult train(const TrainConfig& cfg, const std::vector<Record>& records, const std::filesystem::path& out_dir,
                  const std::function<void(const LogRow&)>& on_step) {
  cfg.check();
  if (records.empty()) throw Error(Errc::DataError, "training set is empty");
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error(Errc::IoError, "cannot create " + out_dir.string());
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  res.params = Params<float>::init(cfg.model, derive_seed({cfg.seed, 0x1417ULL}));
  AdamState state;
  Params<float> grads;
  LossOptions opts;
  opts.lambda_ce = cfg.lambda_ce;
  opts.time_shift = cfg.time_shift;
  res.log.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = training_batch(records, cfg, step);
    const auto lb = gradients<float>(res.params, batch, derive_seed({cfg.seed, static_cast<std::uint64_t>(step), 2}), opts, grads);
    res.log.push_back({step, lb});
    if (on_step) on_step(res.log.back());
    optimizer_step(res.params, grads, state, cfg);
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps)
      save_checkpoint(out_dir / ("step" + std::to_string(step + 1) + ".bin"), res.params);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "model.bin", res.params);
    write_log_csv(out_dir / "metrics.csv", res.log);
  }
  return res;
}

}  // namespace ilcot
