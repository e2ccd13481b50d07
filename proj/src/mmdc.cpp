#include "ilcot/mmdc.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <thread>

#include "ilcot/world.hpp"

namespace ilcot {

double oracle_score(const GridImage& candidate, const GridImage& gt) {
  double sum = 0.0;
  for (int i = 0; i < kGridValues; ++i) sum += std::abs(static_cast<double>(candidate.values[i]) - gt.values[i]);
  return std::clamp(1.0 - sum / kGridValues, 0.0, 1.0);
}

OracleReward::OracleReward(InterleavedSequence ground_truth) : gt_(std::move(ground_truth)) {}

double OracleReward::score(const Candidate& cand, const TextSeg&, const InterleavedSequence& history) const {
  std::vector<const VisSeg*> vis;
  for (const auto& seg : gt_.chain)
    if (const auto* v = std::get_if<VisSeg>(&seg)) vis.push_back(v);
  if (vis.empty()) throw Error(Errc::MissingGroundTruth, "ground-truth chain has no visual segments");
  const auto k = static_cast<std::size_t>(count_vis(history));
  const VisSeg* ref = nullptr;
  if (k < vis.size() && vis[k]->kind == cand.seg.kind) {
    ref = vis[k];
  } else {
    for (const VisSeg* v : vis)
      if (v->kind == cand.seg.kind) {
        ref = v;
        break;
      }
  }
  if (!ref) return 0.0;
  return oracle_score(cand.seg.image, ref->image);
}

double binariness(const GridImage& img) {
  double acc = 0.0;
  for (float v : img.values) acc += static_cast<double>(v) * (1.0 - v);
  return std::clamp(1.0 - 4.0 * acc / kGridValues, 0.0, 1.0);
}

double largest_component_fraction(const GridImage& img) {
  std::array<int, kGridH * kGridW> label{};
  int total = 0, best = 0, next = 0;
  std::vector<int> stack;
  for (int start = 0; start < kGridH * kGridW; ++start) {
    if (label[start] || !img.on(start / kGridW, start % kGridW)) continue;
    int size = 0;
    label[start] = ++next;
    stack.assign(1, start);
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      ++size;
      const int r = cur / kGridW, c = cur % kGridW;
      const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= kGridH || n[1] < 0 || n[1] >= kGridW) continue;
        const int idx = n[0] * kGridW + n[1];
        if (label[idx] || !img.on(n[0], n[1])) continue;
        label[idx] = next;
        stack.push_back(idx);
      }
    }
    total += size;
    best = std::max(best, size);
  }
  return total ? static_cast<double>(best) / total : 0.0;
}

double HeuristicReward::score(const Candidate& cand, const TextSeg&, const InterleavedSequence& history) const {
  const GridImage& img = cand.seg.image;
  if (cand.seg.kind == VisKind::Mask) return 0.5 * binariness(img) + 0.5 * largest_component_fraction(img);

  const GridImage* mask = nullptr;
  for (const auto& seg : history.chain)
    if (const auto* v = std::get_if<VisSeg>(&seg); v && v->kind == VisKind::Mask) mask = &v->image;
  const GridImage ref = cand.seg.kind == VisKind::Content ? GridImage::constant(kCanvasGray) : history.input;
  double diff = 0.0;
  int n = 0;
  for (int r = 0; r < kGridH; ++r)
    for (int c = 0; c < kGridW; ++c) {
      if (mask && mask->on(r, c)) continue;
      for (int ch = 0; ch < kChannels; ++ch) diff += std::abs(static_cast<double>(img.at(r, c, ch)) - ref.at(r, c, ch));
      n += kChannels;
    }
  const double keep = n ? 1.0 - diff / n : 1.0;
  return std::clamp(keep * (1.0 - cand.out_of_range), 0.0, 1.0);
}

void SearchConfig::check() const {
  if (width < 1) throw Error(Errc::UsageError, "search width must be at least 1");
  if (!reward) throw Error(Errc::UsageError, "search needs a reward model");
}

std::vector<BranchNode> expand(const Session& s, const SearchConfig& search, const SampleConfig& cfg) {
  search.check();
  const auto& open = std::get<TextSeg>(s.sequence().chain.back());
  std::vector<BranchNode> nodes(static_cast<std::size_t>(search.width));
  auto work = [&](std::size_t i) {
    BranchNode& n = nodes[i];
    n.index = static_cast<int>(i) + 1;
    n.seed = s.branch_seed(n.index);
    n.cand = s.propose_visual(cfg, n.seed);
    n.score = search.reward->score(n.cand, open, s.sequence());
  };
  if (search.parallel && nodes.size() > 1) {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i)
      pool.emplace_back([&, i] {
        try {
          work(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t i = 0; i < nodes.size(); ++i) work(i);
  }
  return nodes;
}

std::size_t select(const std::vector<BranchNode>& nodes) {
  if (nodes.empty()) throw Error(Errc::EmptyCandidates, "nothing to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < nodes.size(); ++i)
    if (nodes[i].score > nodes[best].score) best = i;
  return best;
}

BranchNode mmdc_step(Session& s, const SearchConfig& search, const SampleConfig& cfg, Trace* trace) {
  auto nodes = expand(s, search, cfg);
  const std::size_t best = select(nodes);
  const int seg = static_cast<int>(s.sequence().chain.size());
  if (trace) {
    for (const auto& n : nodes)
      trace->rows.push_back({seg, "branch", std::to_string(n.index), n.score});
    trace->rows.push_back({seg, "select", std::to_string(nodes[best].index), nodes[best].score});
  }
  s.commit_visual(nodes[best].cand.seg);
  return std::move(nodes[best]);
}

}  // namespace ilcot
