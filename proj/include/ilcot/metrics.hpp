#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ilcot/image.hpp"
#include "ilcot/infer.hpp"
#include "ilcot/net.hpp"
#include "ilcot/seq.hpp"

namespace ilcot {

double l1(std::span<const float> a, std::span<const float> b);
// 10 log10(1 / MSE), 100 dB when MSE < 1e-10.
double psnr(std::span<const float> a, std::span<const float> b);
inline constexpr double kPsnrCap = 100.0;
// Mean SSIM over valid 7x7 Gaussian windows (sigma 1.5), per channel, then
// averaged over channels.
double ssim(const GridImage& a, const GridImage& b);
// Cosine similarity of projected patch statistics; not comparable to CLIP or
// DINO scores.
double embed_sim(const GridImage& a, const GridImage& b);
// The 144 centred patch statistics embed_sim projects.
std::vector<double> patch_features(const GridImage& img);

inline double l1(const GridImage& a, const GridImage& b) { return l1(a.span(), b.span()); }
inline double psnr(const GridImage& a, const GridImage& b) { return psnr(a.span(), b.span()); }

struct EvalTask {
  std::uint64_t id = 0;
  std::string kind;
  InterleavedSequence gt;
};

struct TaskScore {
  std::uint64_t id = 0;
  std::string kind;
  int width = 1;
  double l1 = 0, psnr = 0, ssim = 0, embed_sim = 0;
  bool well_formed = false;
  int vis_segments = 0;
};

struct Aggregate {
  int width = 1;
  std::string kind;  // "all" for the whole split
  std::size_t n = 0;
  double l1 = 0, l1_se = 0, psnr = 0, ssim = 0, embed_sim = 0, wellformed_rate = 0;
};

struct MetricReport {
  static constexpr int kSchemaVersion = 1;
  std::string mode;    // interleaved | text_only
  std::string reward;  // oracle | heuristic
  std::vector<TaskScore> tasks;
  std::vector<Aggregate> aggregates;

  std::string to_json() const;
  std::string table() const;
};

struct EvalOptions {
  SampleConfig sample;
  std::string reward = "oracle";
  std::uint64_t seed = 0;
  bool text_only = false;
  bool parallel = false;
};

// Final image of a generated chain: the Final segment if present, else the
// input (an unfinished edit changes nothing).
const GridImage& final_image(const InterleavedSequence& seq);

TaskScore score_task(const EvalTask& task, const InterleavedSequence& generated, int width);
std::vector<Aggregate> aggregate(const std::vector<TaskScore>& scores);

MetricReport evaluate(const Params<float>& params, const std::vector<EvalTask>& tasks, const std::vector<int>& widths,
                      const EvalOptions& opts);

}  // namespace ilcot
