#pragma once

#include <memory>
#include <string_view>
#include <vector>

#include "ilcot/infer.hpp"

namespace ilcot {

// Scores a candidate visual step in [0,1]. Implementations are pure.
class RewardModel {
 public:
  virtual ~RewardModel() = default;
  virtual double score(const Candidate& cand, const TextSeg& preceding, const InterleavedSequence& history) const = 0;
  virtual std::string_view name() const = 0;
};

// 1 - mean |candidate - ground truth| against the ground-truth segment of the
// same kind at the same visual step (falling back to the first one of that kind).
class OracleReward : public RewardModel {
 public:
  explicit OracleReward(InterleavedSequence ground_truth);
  double score(const Candidate& cand, const TextSeg& preceding, const InterleavedSequence& history) const override;
  std::string_view name() const override { return "oracle"; }

 private:
  InterleavedSequence gt_;
};

// Mask: 0.5 binariness + 0.5 largest-component fraction.
// Content/Final: agreement with the reference outside the last mask, times
// the in-range fraction. The reference is the gray canvas for content and
// the input image for the final result.
class HeuristicReward : public RewardModel {
 public:
  double score(const Candidate& cand, const TextSeg& preceding, const InterleavedSequence& history) const override;
  std::string_view name() const override { return "heuristic"; }
};

double oracle_score(const GridImage& candidate, const GridImage& gt);
double binariness(const GridImage& img);
// Mass of the largest 4-connected component of pixels > 0.5 over all such
// pixels; 0 for an empty mask.
double largest_component_fraction(const GridImage& img);

struct SearchConfig {
  int width = 5;
  std::shared_ptr<const RewardModel> reward;
  bool parallel = false;

  void check() const;
};

struct BranchNode {
  int index = 0;  // 1-based branch number used for seed derivation
  std::uint64_t seed = 0;
  Candidate cand;
  double score = 0.0;
};

// N candidates with seeds derive(session seed, k, i), i = 1..N, each scored.
std::vector<BranchNode> expand(const Session& s, const SearchConfig& search, const SampleConfig& cfg);
// Argmax score, lowest position on ties. Throws EmptyCandidates.
std::size_t select(const std::vector<BranchNode>& nodes);
// expand, select, commit the winner; returns it.
BranchNode mmdc_step(Session& s, const SearchConfig& search, const SampleConfig& cfg, Trace* trace = nullptr);

}  // namespace ilcot
