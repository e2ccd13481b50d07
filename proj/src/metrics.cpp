#include "ilcot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "ilcot/error.hpp"
#include "ilcot/mmdc.hpp"
#include "ilcot/rng.hpp"
#include "ilcot/world.hpp"
#include "json.hpp"

namespace ilcot {

namespace {

void same_shape(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw Error(Errc::ShapeMismatch, "images differ in size");
}

constexpr int kWin = 7;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWin * kWin> gaussian_window() {
  std::array<double, kWin * kWin> w{};
  double sum = 0;
  for (int y = 0; y < kWin; ++y)
    for (int x = 0; x < kWin; ++x) {
      const double dy = y - kWin / 2, dx = x - kWin / 2;
      w[y * kWin + x] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
      sum += w[y * kWin + x];
    }
  for (auto& v : w) v /= sum;
  return w;
}

constexpr int kFeatureDim = kNumPatches * kChannels * 3;
constexpr int kEmbedDim = 64;

// Rows orthonormal, drawn once from a fixed seed.
const std::vector<std::array<double, kFeatureDim>>& projection() {
  static const auto rows = [] {
    Rng rng(0xe3bedULL);
    std::vector<std::array<double, kFeatureDim>> out;
    while (static_cast<int>(out.size()) < kEmbedDim) {
      std::array<double, kFeatureDim> v;
      for (auto& x : v) x = rng.normal();
      for (const auto& u : out) {
        double dot = 0;
        for (int i = 0; i < kFeatureDim; ++i) dot += u[i] * v[i];
        for (int i = 0; i < kFeatureDim; ++i) v[i] -= dot * u[i];
      }
      double norm = 0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-8) continue;
      for (auto& x : v) x /= norm;
      out.push_back(v);
    }
    return out;
  }();
  return rows;
}

}  // namespace

double l1(std::span<const float> a, std::span<const float> b) {
  same_shape(a, b);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
  return s / static_cast<double>(a.size());
}

double psnr(std::span<const float> a, std::span<const float> b) {
  same_shape(a, b);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  const double mse = s / static_cast<double>(a.size());
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const GridImage& a, const GridImage& b) {
  static const auto w = gaussian_window();
  double total = 0;
  int count = 0;
  for (int ch = 0; ch < kChannels; ++ch) {
    double chan = 0;
    int windows = 0;
    for (int r0 = 0; r0 + kWin <= kGridH; ++r0)
      for (int c0 = 0; c0 + kWin <= kGridW; ++c0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int y = 0; y < kWin; ++y)
          for (int x = 0; x < kWin; ++x) {
            const double wt = w[y * kWin + x];
            const double va = a.at(r0 + y, c0 + x, ch), vb = b.at(r0 + y, c0 + x, ch);
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        chan += ((2 * ma * mb + kC1) * (2 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
        ++windows;
      }
    total += chan / windows;
    ++count;
  }
  return total / count;
}

std::vector<double> patch_features(const GridImage& img) {
  std::array<double, kChannels> global{};
  for (int r = 0; r < kGridH; ++r)
    for (int c = 0; c < kGridW; ++c)
      for (int ch = 0; ch < kChannels; ++ch) global[ch] += img.at(r, c, ch);
  for (auto& g : global) g /= kGridH * kGridW;

  std::vector<double> f;
  f.reserve(kFeatureDim);
  for (int pr = 0; pr < kPatchesPerSide; ++pr)
    for (int pc = 0; pc < kPatchesPerSide; ++pc)
      for (int ch = 0; ch < kChannels; ++ch) {
        double mean = 0, gx = 0, gy = 0;
        for (int y = 0; y < kPatchSize; ++y)
          for (int x = 0; x < kPatchSize; ++x) {
            const int r = pr * kPatchSize + y, c = pc * kPatchSize + x;
            mean += img.at(r, c, ch);
            if (x + 1 < kPatchSize) gx += img.at(r, c + 1, ch) - img.at(r, c, ch);
            if (y + 1 < kPatchSize) gy += img.at(r + 1, c, ch) - img.at(r, c, ch);
          }
        const double edges = kPatchSize * (kPatchSize - 1);
        f.push_back(mean / (kPatchSize * kPatchSize) - global[ch]);
        f.push_back(gx / edges);
        f.push_back(gy / edges);
      }
  return f;
}

double embed_sim(const GridImage& a, const GridImage& b) {
  const auto fa = patch_features(a), fb = patch_features(b);
  const auto& P = projection();
  double dot = 0, na = 0, nb = 0;
  for (const auto& row : P) {
    double pa = 0, pb = 0;
    for (int i = 0; i < kFeatureDim; ++i) {
      pa += row[i] * fa[i];
      pb += row[i] * fb[i];
    }
    dot += pa * pb;
    na += pa * pa;
    nb += pb * pb;
  }
  constexpr double tiny = 1e-24;
  if (na < tiny && nb < tiny) return 1.0;
  if (na < tiny || nb < tiny) return 0.0;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

const GridImage& final_image(const InterleavedSequence& seq) {
  const VisSeg* v = last_vis(seq);
  if (v && v->kind == VisKind::Final) return v->image;
  return seq.input;
}

TaskScore score_task(const EvalTask& task, const InterleavedSequence& generated, int width) {
  const GridImage& gt = final_image(task.gt);
  const GridImage& out = final_image(generated);
  TaskScore s;
  s.id = task.id;
  s.kind = task.kind;
  s.width = width;
  s.l1 = l1(out, gt);
  s.psnr = psnr(out, gt);
  s.ssim = ssim(out, gt);
  s.embed_sim = embed_sim(out, gt);
  s.well_formed = generated.well_formed;
  s.vis_segments = count_vis(generated);
  return s;
}

std::vector<Aggregate> aggregate(const std::vector<TaskScore>& scores) {
  std::map<std::pair<int, std::string>, std::vector<const TaskScore*>> groups;
  for (const auto& s : scores) {
    groups[{s.width, "all"}].push_back(&s);
    groups[{s.width, s.kind}].push_back(&s);
  }
  std::vector<Aggregate> out;
  for (const auto& [key, members] : groups) {
    Aggregate a;
    a.width = key.first;
    a.kind = key.second;
    a.n = members.size();
    for (const auto* m : members) {
      a.l1 += m->l1;
      a.psnr += m->psnr;
      a.ssim += m->ssim;
      a.embed_sim += m->embed_sim;
      a.wellformed_rate += m->well_formed ? 1.0 : 0.0;
    }
    const double n = static_cast<double>(a.n);
    a.l1 /= n;
    a.psnr /= n;
    a.ssim /= n;
    a.embed_sim /= n;
    a.wellformed_rate /= n;
    if (a.n > 1) {
      double var = 0;
      for (const auto* m : members) var += (m->l1 - a.l1) * (m->l1 - a.l1);
      a.l1_se = std::sqrt(var / (n - 1) / n);
    }
    out.push_back(a);
  }
  return out;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["psnr_cap_db"] = kPsnrCap;
  j["embed_sim_note"] = "random-projection patch statistics; not comparable to CLIP-I or DINO";
  j["mode"] = mode;
  j["reward"] = reward;
  auto aggs = nlohmann::ordered_json::array();
  for (const auto& a : aggregates)
    aggs.push_back({{"width", a.width},
                    {"kind", a.kind},
                    {"n", a.n},
                    {"l1", a.l1},
                    {"l1_se", a.l1_se},
                    {"psnr", a.psnr},
                    {"ssim", a.ssim},
                    {"embed_sim", a.embed_sim},
                    {"chain_wellformed_rate", a.wellformed_rate}});
  j["aggregates"] = aggs;
  auto ts = nlohmann::ordered_json::array();
  for (const auto& t : tasks)
    ts.push_back({{"id", t.id},
                  {"kind", t.kind},
                  {"width", t.width},
                  {"l1", t.l1},
                  {"psnr", t.psnr},
                  {"ssim", t.ssim},
                  {"embed_sim", t.embed_sim},
                  {"well_formed", t.well_formed},
                  {"vis_segments", t.vis_segments}});
  j["tasks"] = ts;
  return j.dump(2);
}

std::string MetricReport::table() const {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "mode=%s reward=%s (psnr capped at %.0f dB)\n", mode.c_str(), reward.c_str(), kPsnrCap);
  out += buf;
  std::snprintf(buf, sizeof buf, "%5s  %-10s %5s  %8s %8s %8s %7s %9s %6s\n", "width", "kind", "n", "l1", "l1_se", "psnr",
                "ssim", "embed_sim", "wf");
  out += buf;
  for (const auto& a : aggregates) {
    std::snprintf(buf, sizeof buf, "%5d  %-10s %5zu  %8.4f %8.4f %8.2f %7.4f %9.4f %6.3f\n", a.width, a.kind.c_str(), a.n,
                  a.l1, a.l1_se, a.psnr, a.ssim, a.embed_sim, a.wellformed_rate);
    out += buf;
  }
  return out;
}

MetricReport evaluate(const Params<float>& params, const std::vector<EvalTask>& tasks, const std::vector<int>& widths,
                      const EvalOptions& opts) {
  if (tasks.empty()) throw Error(Errc::DataError, "evaluation split is empty");
  if (opts.reward != "oracle" && opts.reward != "heuristic")
    throw Error(Errc::UsageError, "reward must be oracle or heuristic");
  MetricReport rep;
  rep.mode = opts.text_only ? "text_only" : "interleaved";
  rep.reward = opts.reward;
  const auto heuristic = std::make_shared<HeuristicReward>();
  for (int width : widths) {
    if (width < 1) throw Error(Errc::UsageError, "search widths must be at least 1");
    for (const auto& task : tasks) {
      const InterleavedSequence gt = opts.text_only ? to_text_only(task.gt) : task.gt;
      SearchConfig search;
      search.width = width;
      search.parallel = opts.parallel;
      if (opts.reward == "oracle")
        search.reward = std::make_shared<OracleReward>(gt);
      else
        search.reward = heuristic;
      const auto res = run(params, gt.input, gt.instruction, opts.sample, &search, derive_seed({opts.seed, task.id}));
      rep.tasks.push_back(score_task(task, res.seq, width));
    }
  }
  rep.aggregates = aggregate(rep.tasks);
  return rep;
}

}  // namespace ilcot
