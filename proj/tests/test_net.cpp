#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "ilcot/error.hpp"
#include "ilcot/net.hpp"
#include "ilcot/oracle.hpp"
#include "ilcot/rng.hpp"
#include "ilcot/world.hpp"

using namespace ilcot;

namespace {

double max_abs(const Mat<float>& a) { return a.cwiseAbs().maxCoeff(); }

std::vector<InterleavedSequence> small_batch() {
  return {gen_task(1, TaskKind::Replace).gt_chain, gen_task(2, TaskKind::Recolor).gt_chain,
          gen_task(3, TaskKind::Remove).gt_chain};
}

}  // namespace

TEST_CASE("parameter count at the default size") {
  // Closed form: embeddings, L blocks of 12d^2 + 13d, final norm and heads.
  auto expect = [](long d, long L) {
    return d * (kVocabSize + kPatchDim + 1 + kMaxPositions + kNumPatches + kNumEmbedKinds + 1) + d * d +
           L * (12 * d * d + 13 * d) + 2 * d + (d + 1) * (kVocabSize + kPatchDim);
  };
  ModelConfig small;
  small.d = 64;
  CHECK(Params<float>::init(small, 0).count() == 186480);
  CHECK(expect(64, 3) == 186480);
  const auto p = Params<float>::init(ModelConfig{}, 0);
  CHECK(p.count() == expect(160, 3));
  CHECK(p.count() == 1034352);
  CHECK(p.all_finite());
  CHECK(max_abs(p[p.layout.text_head]) == 0.0);
  CHECK(max_abs(p[p.layout.vel_head]) == 0.0);
  CHECK(p.layout.specs[p.layout.kind_emb].rows == kNumEmbedKinds);
}

TEST_CASE("interpolate endpoints and midpoint") {
  const std::vector<double> z0 = {1.0, -2.0, 0.5}, z1 = {-1.0, 4.0, 0.5};
  CHECK(interpolate<double>(z0, z1, 1.0) == z0);
  CHECK(interpolate<double>(z0, z1, 0.0) == z1);
  const auto mid = interpolate<double>(z0, z1, 0.5);
  CHECK(mid[0] == doctest::Approx(0.0));
  CHECK(mid[1] == doctest::Approx(1.0));
  CHECK(mid[2] == doctest::Approx(0.5));
  CHECK_THROWS_AS(interpolate<double>(z0, std::vector<double>{1.0}, 0.5), Error);
  CHECK_THROWS_AS(interpolate<double>(z0, z1, 1.5), Error);
  CHECK_THROWS_AS(interpolate<double>(z0, z1, -0.1), Error);
}

TEST_CASE("velocity target is the time derivative of the path") {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> z0(8), z1(8);
    for (auto& v : z0) v = rng.normal();
    for (auto& v : z1) v = rng.normal();
    const double t = 0.05 + 0.9 * rng.uniform(), h = 1e-4;
    const auto a = interpolate<double>(z0, z1, t + h), b = interpolate<double>(z0, z1, t - h);
    for (int i = 0; i < 8; ++i) CHECK((a[i] - b[i]) / (2 * h) == doctest::Approx(z0[i] - z1[i]).epsilon(1e-6));
  }
}

TEST_CASE("shift_time") {
  CHECK(shift_time(0.5, 1.0) == doctest::Approx(0.5));
  CHECK(shift_time(0.5, 4.0) == doctest::Approx(0.8));
  CHECK(shift_time(0.0, 4.0) == 0.0);
  CHECK(shift_time(1.0, 4.0) == doctest::Approx(1.0));
  double prev = -1;
  for (int i = 0; i <= 100; ++i) {
    const double s = shift_time(i / 100.0, 4.0);
    CHECK(s >= prev);
    CHECK(s >= i / 100.0 - 1e-12);
    prev = s;
  }
}

TEST_CASE("flow sample draws") {
  const auto seq = gen_task(5, TaskKind::Replace).gt_chain;
  const FlowSample a = draw_flow_sample(seq, 9, 4.0), b = draw_flow_sample(seq, 9, 4.0);
  CHECK(a.segment == b.segment);
  CHECK(a.t == b.t);
  CHECK(a.z1 == b.z1);
  CHECK(std::holds_alternative<VisSeg>(seq.chain[a.segment]));
  for (int i = 0; i < kGridValues; ++i) {
    CHECK(a.target[i] == doctest::Approx(a.z0[i] - a.z1[i]));
    CHECK(a.zt[i] == doctest::Approx(a.t * a.z0[i] + (1 - a.t) * a.z1[i]).epsilon(1e-5));
  }
  std::array<int, 3> hits{};
  for (std::uint64_t s = 0; s < 300; ++s) ++hits[(draw_flow_sample(seq, s, 4.0).segment - 1) / 2];
  for (int h : hits) CHECK(h > 60);
}

TEST_CASE("zero heads give uniform logits and zero velocity") {
  const auto p = Params<double>::init(ModelConfig{}, 3);
  const auto batch = small_batch();
  std::vector<FlowSample> samples;
  double expected_mse = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    samples.push_back(draw_flow_sample(batch[b], b, 4.0));
    double s = 0.0;
    for (float v : samples.back().target) s += static_cast<double>(v) * v;
    expected_mse += s / kGridValues;
  }
  expected_mse /= static_cast<double>(batch.size());
  const LossBreakdown l = loss_with_samples<double>(p, batch, samples, {}, nullptr);
  CHECK(l.ce == doctest::Approx(std::log(64.0)).epsilon(1e-12));
  CHECK(l.mse == doctest::Approx(expected_mse).epsilon(1e-9));
  CHECK(l.total == doctest::Approx(l.ce + l.mse));
}

TEST_CASE("causality: later segments do not change earlier logits") {
  const auto p = testing::random_model(6).cast<double>();
  InterleavedSequence a = gen_task(8, TaskKind::Replace).gt_chain;
  InterleavedSequence b = a;
  // Blocked products of different sizes round differently, hence the 1e-12.
  // Swap the tail: replace the last text and image with those of another task.
  const auto other = gen_task(9, TaskKind::Recolor).gt_chain;
  b.chain.back() = other.chain.back();
  std::get<TextSeg>(b.chain[b.chain.size() - 2]) = std::get<TextSeg>(other.chain[0]);
  REQUIRE(validate(b));
  const FlatStream fa = flatten(a), fb = flatten(b);
  const int cut = fa.images.back().start - static_cast<int>(std::get<TextSeg>(a.chain[a.chain.size() - 2]).tokens.size()) - 1;
  std::vector<int> rows;
  for (int i = 0; i < cut; ++i) rows.push_back(i);
  Graph<double> ga(p, build_slots(a, fa), rows, {}), gb(p, build_slots(b, fb), rows, {});
  CHECK((ga.logits() - gb.logits()).cwiseAbs().maxCoeff() < 1e-12);
  // The changed segment does change later rows.
  Graph<double> la(p, build_slots(a, fa), {fa.images.back().start + 3}, {});
  Graph<double> lb(p, build_slots(b, fb), {fb.images.back().start + 3}, {});
  CHECK((la.logits() - lb.logits()).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("noised side block is invisible to the clean stream") {
  const auto p = testing::random_model(7).cast<double>();
  const auto seq = gen_task(10, TaskKind::Remove).gt_chain;
  const FlatStream fs = flatten(seq);
  auto slots = build_slots(seq, fs);
  std::vector<int> rows;
  for (int i = 0; i < static_cast<int>(slots.size()); ++i) rows.push_back(i);
  Graph<double> clean(p, slots, rows, {});
  const FlowSample s = draw_flow_sample(seq, 1, 4.0);
  const auto span = std::find_if(fs.images.begin(), fs.images.end(), [&](const ImageSpan& x) { return x.segment == s.segment; });
  REQUIRE(span != fs.images.end());
  const int first = append_noised_block(slots, *span, s.zt, static_cast<float>(s.t));
  CHECK(first == static_cast<int>(fs.tokens.size()));
  CHECK(slots[first].position == span->start);
  Graph<double> noised(p, slots, rows, {});
  CHECK((clean.logits() - noised.logits()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("analytic gradients match finite differences") {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  const GradCheck g = gradient_check(cfg, 11);
  INFO("worst tensor " << g.worst_tensor);
  CHECK(g.checked == Params<double>::zeros(cfg).count());
  CHECK(g.max_rel_error < 1e-3);
}

TEST_CASE("velocity head gets no gradient without the flow term") {
  const auto p = testing::random_model(12);
  Params<float> g;
  LossOptions opts;
  opts.flow = false;
  const auto batch = small_batch();
  const LossBreakdown l = gradients<float>(p, batch, 1, opts, g);
  CHECK(l.mse == 0.0);
  CHECK(max_abs(g[p.layout.vel_head]) == 0.0);
  CHECK(max_abs(g[p.layout.vel_head_b]) == 0.0);
  CHECK(max_abs(g[p.layout.text_head]) > 0.0);
  CHECK(max_abs(g[p.layout.time_w]) == 0.0);
}

TEST_CASE("text head gradient scales with lambda") {
  const auto p = testing::random_model(13).cast<double>();
  const auto batch = small_batch();
  Params<double> g1, g2;
  LossOptions o1, o2;
  o2.lambda_ce = 2.0;
  const auto l1 = gradients<double>(p, batch, 5, o1, g1);
  const auto l2 = gradients<double>(p, batch, 5, o2, g2);
  CHECK(l2.ce == l1.ce);
  CHECK(l2.mse == l1.mse);
  CHECK(l2.total == doctest::Approx(2 * l1.ce + l1.mse));
  const double diff = (g2[p.layout.text_head] - 2.0 * g1[p.layout.text_head]).cwiseAbs().maxCoeff();
  CHECK(diff < 1e-12 * (1 + g1[p.layout.text_head].cwiseAbs().maxCoeff()));
  CHECK((g2[p.layout.vel_head] - g1[p.layout.vel_head]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("loss and gradients are deterministic") {
  const auto p = testing::random_model(14);
  const auto batch = small_batch();
  Params<float> g1, g2;
  const auto a = gradients<float>(p, batch, 3, {}, g1);
  const auto b = gradients<float>(p, batch, 3, {}, g2);
  CHECK(a.total == b.total);
  for (std::size_t i = 0; i < g1.tensors.size(); ++i) CHECK(g1.tensors[i] == g2.tensors[i]);
  CHECK(loss<float>(p, batch, 3).total == a.total);
}

TEST_CASE("empty batch and context overflow") {
  const auto p = testing::random_model(15);
  CHECK_THROWS_AS(loss<float>(p, std::span<const InterleavedSequence>{}, 0), Error);
  InterleavedSequence long_seq = gen_task(1, TaskKind::Remove).gt_chain;
  for (int i = 0; i < 200; ++i) long_seq.instruction.push_back(tok::FirstWord);
  REQUIRE(validate(long_seq));
  const std::vector<InterleavedSequence> batch = {long_seq};
  try {
    loss<float>(p, batch, 0);
    FAIL("expected ContextOverflow");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ContextOverflow);
  }
}

TEST_CASE("cached decoding matches the full forward pass") {
  const auto p = testing::random_model(16);
  const auto seq = gen_task(17, TaskKind::Replace).gt_chain;
  const FlatStream fs = flatten(seq);
  const auto slots = build_slots(seq, fs);
  std::vector<int> rows;
  for (int i = 0; i < static_cast<int>(slots.size()); ++i) rows.push_back(i);
  Graph<float> full(p, slots, rows, {});

  // Feed text one slot at a time and each image as one block.
  KvCache<float> cache(p.config);
  Mat<float> logits(static_cast<Eigen::Index>(slots.size()), p.config.vocab);
  std::size_t i = 0;
  while (i < slots.size()) {
    std::size_t n = 1;
    if (slots[i].token == kPatchSlot) n = kNumPatches;
    const Mat<float> h = run_chunk<float>(p, cache, std::span<const Slot>(slots.data() + i, n), true);
    logits.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) = text_head(p, h);
    i += n;
  }
  CHECK(cache.length == static_cast<int>(slots.size()));
  CHECK((logits - full.logits()).cwiseAbs().maxCoeff() < 1e-5);

  KvCache<float> small(p.config);
  small.length = kMaxPositions;
  CHECK_THROWS_AS(run_chunk<float>(p, small, std::span<const Slot>(slots.data(), 1), true), Error);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto p = testing::random_model(18);
  const auto dir = testing::temp_dir("ckpt");
  save_checkpoint(dir / "m.bin", p);
  const auto q = load_checkpoint(dir / "m.bin");
  CHECK(q.config == p.config);
  REQUIRE(q.tensors.size() == p.tensors.size());
  for (std::size_t i = 0; i < p.tensors.size(); ++i) CHECK(q.tensors[i] == p.tensors[i]);

  std::filesystem::resize_file(dir / "m.bin", std::filesystem::file_size(dir / "m.bin") - 4);
  CHECK_THROWS_AS(load_checkpoint(dir / "m.bin"), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), Error);
}
