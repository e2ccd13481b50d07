#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ilcot/error.hpp"
#include "ilcot/image.hpp"
#include "ilcot/net.hpp"
#include "ilcot/seq.hpp"

namespace ilcot {

struct SampleConfig {
  int euler_steps = 20;
  int max_text_len = 16;
  int max_segments = 8;

  void check() const;
};

// z <- z + v(z, t) / K for t = j / K, j = 0..K-1.
template <typename F>
Latent euler_integrate(Latent z, int steps, F&& velocity) {
  if (steps < 1) throw Error(Errc::UsageError, "euler_steps must be at least 1");
  // Accumulated in double.
  std::array<double, kGridValues> acc;
  for (int i = 0; i < kGridValues; ++i) acc[i] = z[i];
  for (int j = 0; j < steps; ++j) {
    const double t = static_cast<double>(j) / steps;
    const Latent v = velocity(static_cast<const Latent&>(z), t);
    for (int i = 0; i < kGridValues; ++i) {
      acc[i] += static_cast<double>(v[i]) / steps;
      z[i] = static_cast<float>(acc[i]);
    }
  }
  return z;
}

struct TraceRow {
  int segment = 0;    // chain index the event belongs to
  std::string event;  // token | branch | select
  std::string value;
  double score = 0.0;
};

struct Trace {
  std::vector<TraceRow> rows;
  void write_csv(const std::filesystem::path& path) const;
};

// A visual continuation that has not been committed yet.
struct Candidate {
  VisSeg seg;
  double out_of_range = 0.0;  // fraction of values clamped on unpatchify
  std::uint64_t seed = 0;
};

// Decoding state over a committed stream with its KV cache. Single owner.
class Session {
 public:
  // Commits BOS, the instruction and the input image.
  Session(const Params<float>& params, const GridImage& input, std::vector<Token> instruction, std::uint64_t seed);

  // Fresh session replaying a committed stream: `partial.chain` may end in an
  // open text segment; `at_vis_start` marks a committed VIS_START after it.
  static Session rebuild(const Params<float>& params, const InterleavedSequence& partial, bool at_vis_start,
                         std::uint64_t seed);

  // Greedy grammar-constrained decoding up to VIS_START or EOS; returns the
  // tokens emitted (terminator included).
  std::vector<Token> decode_text(const SampleConfig& cfg, Trace* trace = nullptr);

  // Euler sample from noise seeded by `branch_seed`; does not commit.
  Candidate propose_visual(const SampleConfig& cfg, std::uint64_t branch_seed) const;
  // Commits a clean image block followed by VIS_END.
  void commit_visual(const VisSeg& seg);
  // propose_visual with the plain-decoding branch seed, then commit.
  Candidate sample_visual(const SampleConfig& cfg);

  // Appends SEP . instruction to the open text segment.
  void revise(const std::vector<Token>& instruction);

  // Seed of branch i at the current visual step.
  std::uint64_t branch_seed(int branch) const;

  const InterleavedSequence& sequence() const { return seq_; }
  // Chain so far as a closed sequence (open empty text dropped).
  InterleavedSequence snapshot() const;
  bool at_vis_start() const { return at_vis_start_; }
  bool finished() const { return finished_; }
  int visual_step() const { return count_vis(seq_); }
  std::uint64_t seed() const { return seed_; }
  const KvCache<float>& cache() const { return cache_; }
  // Pending kind of the visual segment after VIS_START.
  std::optional<VisKind> pending_kind() const;
  // Text logits predicting the next token.
  const Mat<float>& next_logits() const { return next_logits_; }
  const Params<float>& params() const { return *params_; }

 private:
  Session(const Params<float>& params, std::uint64_t seed);
  void commit_token(Token t);
  void commit_image(const GridImage& img, EmbedKind kind);
  TextSeg& open_text();

  const Params<float>* params_;
  std::uint64_t seed_;
  KvCache<float> cache_;
  InterleavedSequence seq_;
  Mat<float> next_logits_;
  bool at_vis_start_ = false;
  bool finished_ = false;
};

// Grammar mask used by decode_text: returns the chosen token.
Token choose_token(const Mat<float>& logits, const TextSeg& open, const InterleavedSequence& seq, const SampleConfig& cfg);

struct SearchConfig;

struct RunResult {
  InterleavedSequence seq;
  std::optional<Errc> error;  // NonTermination when max_segments was hit
};

// Alternates decode_text and visual sampling (through MMDC when `search` is
// set) until EOS or max_segments visual segments.
RunResult run(const Params<float>& params, const GridImage& input, const std::vector<Token>& instruction,
              const SampleConfig& cfg, const SearchConfig* search, std::uint64_t seed, Trace* trace = nullptr);
// Continues an existing session to completion.
RunResult run_session(Session& s, const SampleConfig& cfg, const SearchConfig* search, Trace* trace = nullptr);

}  // namespace ilcot
