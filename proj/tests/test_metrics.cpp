#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "ilcot/metrics.hpp"

using namespace ilcot;

namespace {

GridImage noise(Rng& rng) {
  GridImage g;
  for (auto& v : g.values) v = static_cast<float>(rng.uniform());
  return g;
}

// Two-pass windowed SSIM with its own window construction.
double ssim_reference(const GridImage& a, const GridImage& b) {
  double w[7][7], wsum = 0;
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) {
      w[y][x] = std::exp(-((y - 3) * (y - 3) + (x - 3) * (x - 3)) / (2 * 1.5 * 1.5));
      wsum += w[y][x];
    }
  double acc = 0;
  for (int ch = 0; ch < 3; ++ch)
    for (int r0 = 0; r0 < 10; ++r0)
      for (int c0 = 0; c0 < 10; ++c0) {
        double ma = 0, mb = 0;
        for (int y = 0; y < 7; ++y)
          for (int x = 0; x < 7; ++x) {
            ma += w[y][x] / wsum * a.at(r0 + y, c0 + x, ch);
            mb += w[y][x] / wsum * b.at(r0 + y, c0 + x, ch);
          }
        double va = 0, vb = 0, cv = 0;
        for (int y = 0; y < 7; ++y)
          for (int x = 0; x < 7; ++x) {
            const double da = a.at(r0 + y, c0 + x, ch) - ma, db = b.at(r0 + y, c0 + x, ch) - mb;
            va += w[y][x] / wsum * da * da;
            vb += w[y][x] / wsum * db * db;
            cv += w[y][x] / wsum * da * db;
          }
        acc += (2 * ma * mb + 1e-4) * (2 * cv + 9e-4) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
      }
  return acc / 300;
}

}  // namespace

TEST_CASE("l1 and psnr examples") {
  const GridImage a = GridImage::constant(0.2f), b = GridImage::constant(0.7f);
  CHECK(l1(a, a) == 0.0);
  CHECK(l1(a, b) == doctest::Approx(0.5));
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(psnr(a, b) == doctest::Approx(10 * std::log10(1 / 0.25)));
  CHECK(psnr(GridImage::constant(0.f), GridImage::constant(1.f)) == doctest::Approx(0.0));
}

TEST_CASE("ssim examples") {
  Rng rng(1);
  const GridImage a = noise(rng);
  CHECK(ssim(a, a) == doctest::Approx(1.0));
  // Constant images: only the luminance term survives.
  const double c1 = 1e-4, m1 = 0.2, m2 = 0.8;
  CHECK(ssim(GridImage::constant(0.2f), GridImage::constant(0.8f)) ==
        doctest::Approx((2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1)).epsilon(1e-6));
}

TEST_CASE("metric symmetry and windowed reference on 1000 pairs") {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    GridImage a = noise(rng), b = noise(rng);
    if (i % 3 == 0) b = quantized(render(gen_task(i, TaskKind::Remove).scene));
    CHECK(std::abs(ssim(a, b) - ssim_reference(a, b)) < 1e-6);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK(l1(a, b) == l1(b, a));
    CHECK(psnr(a, b) == psnr(b, a));
    CHECK(embed_sim(a, b) == doctest::Approx(embed_sim(b, a)).epsilon(1e-12));
  }
}

TEST_CASE("embed_sim identity, antipode and degenerate cases") {
  Rng rng(3);
  const GridImage a = noise(rng);
  GridImage inv = a;
  for (auto& v : inv.values) v = 1.f - v;
  CHECK(embed_sim(a, a) == doctest::Approx(1.0));
  CHECK(embed_sim(a, inv) == doctest::Approx(-1.0));
  CHECK(patch_features(a).size() == 144);
  const GridImage flat = GridImage::constant(0.3f);
  CHECK(embed_sim(flat, GridImage::constant(0.9f)) == 1.0);
  CHECK(embed_sim(flat, a) == 0.0);
  for (int i = 0; i < 100; ++i) {
    const double s = embed_sim(noise(rng), noise(rng));
    CHECK(s >= -1.0 - 1e-12);
    CHECK(s <= 1.0 + 1e-12);
  }
}

TEST_CASE("ground truth scores perfectly against itself") {
  for (std::uint64_t s = 0; s < 12; ++s) {
    const auto gt = gen_task(s, kAllTaskKinds[s % kNumTaskKinds]).gt_chain;
    const TaskScore sc = score_task({s, "x", gt}, gt, 1);
    CHECK(sc.l1 == 0.0);
    CHECK(sc.ssim == doctest::Approx(1.0));
    CHECK(sc.psnr == kPsnrCap);
    CHECK(sc.well_formed);
  }
  InterleavedSequence unfinished = gen_task(1, TaskKind::Remove).gt_chain;
  unfinished.chain.resize(2);
  unfinished.well_formed = false;
  CHECK(final_image(unfinished) == unfinished.input);
}

TEST_CASE("aggregates and report") {
  std::vector<TaskScore> scores;
  for (int i = 0; i < 4; ++i) {
    TaskScore s;
    s.id = i;
    s.kind = i < 2 ? "remove" : "add";
    s.l1 = 0.1 * (i + 1);
    s.well_formed = i != 3;
    scores.push_back(s);
  }
  const auto agg = aggregate(scores);
  const auto all = std::find_if(agg.begin(), agg.end(), [](const Aggregate& a) { return a.kind == "all"; });
  REQUIRE(all != agg.end());
  CHECK(all->n == 4);
  CHECK(all->l1 == doctest::Approx(0.25));
  CHECK(all->wellformed_rate == doctest::Approx(0.75));
  // Sample standard deviation over sqrt(n).
  const double sd = std::sqrt((0.15 * 0.15 * 2 + 0.05 * 0.05 * 2) / 3);
  CHECK(all->l1_se == doctest::Approx(sd / 2));
  CHECK(agg.size() == 3);
}

TEST_CASE("evaluate is deterministic and well shaped") {
  const auto p = testing::random_model(4);
  std::vector<EvalTask> tasks;
  for (std::uint64_t s = 0; s < 3; ++s) tasks.push_back({s, "replace", gen_task(s, TaskKind::Replace).gt_chain});
  EvalOptions o;
  o.sample.euler_steps = 2;
  o.sample.max_segments = 4;
  const MetricReport a = evaluate(p, tasks, {1, 2}, o), b = evaluate(p, tasks, {1, 2}, o);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.tasks.size() == 6);
  const auto j = nlohmann::json::parse(a.to_json());
  CHECK(j["schema_version"] == MetricReport::kSchemaVersion);
  CHECK(j["mode"] == "interleaved");
  CHECK(j["reward"] == "oracle");
  CHECK(j["tasks"].size() == 6);
  CHECK(!a.table().empty());
  o.text_only = true;
  const MetricReport t = evaluate(p, tasks, {1}, o);
  CHECK(t.mode == "text_only");
  for (const auto& s : t.tasks) CHECK(s.vis_segments <= o.sample.max_segments);
}
