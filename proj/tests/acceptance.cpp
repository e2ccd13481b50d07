// Acceptance run: one PASS/FAIL line per criterion. Needs a trained baseline;
// it is trained into --baseline when no cached model is found there.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "ilcot/config.hpp"
#include "ilcot/error.hpp"
#include "ilcot/infer.hpp"
#include "ilcot/metrics.hpp"
#include "ilcot/mmdc.hpp"
#include "ilcot/oracle.hpp"
#include "ilcot/rng.hpp"
#include "ilcot/train.hpp"
#include "ilcot/world.hpp"

using namespace ilcot;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void report(int n, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s  %2d %s: %s\n", pass ? "PASS" : "FAIL", n, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

const std::array<double, kNumTaskKinds> kUniform = {1, 1, 1, 1, 1, 1};

Params<float> random_model(std::uint64_t seed, int d, int layers, int heads) {
  ModelConfig cfg;
  cfg.d = d;
  cfg.layers = layers;
  cfg.heads = heads;
  auto p = Params<float>::init(cfg, seed);
  Rng rng(seed ^ 0x5151);
  for (auto& t : p.tensors)
    for (Eigen::Index i = 0; i < t.size(); ++i)
      if (t.data()[i] == 0.f) t.data()[i] = static_cast<float>(0.3 * rng.normal());
  return p;
}

Token random_word(Rng& rng) { return static_cast<Token>(tok::FirstWord + rng.below(kVocabSize - tok::FirstWord)); }

InterleavedSequence random_sequence(Rng& rng) {
  InterleavedSequence s;
  for (auto& v : s.input.values) v = dequantize(static_cast<std::uint8_t>(rng.below(256)));
  const int plen = static_cast<int>(rng.below(6));
  for (int i = 0; i < plen; ++i) s.instruction.push_back(random_word(rng));
  const int steps = 1 + static_cast<int>(rng.below(3));
  for (int k = 0; k < steps; ++k) {
    const Token kw = k + 1 == steps ? tok::FinalKw : (rng.below(2) ? tok::MaskKw : tok::ObjectKw);
    TextSeg t;
    const int n = static_cast<int>(rng.below(5));
    for (int i = 0; i < n; ++i) t.tokens.push_back(random_word(rng));
    t.tokens.insert(t.tokens.begin() + static_cast<long>(rng.below(t.tokens.size() + 1)), kw);
    VisSeg v{GridImage{}, kind_for_keyword(kw)};
    for (auto& x : v.image.values) x = dequantize(static_cast<std::uint8_t>(rng.below(256)));
    s.chain.emplace_back(t);
    s.chain.emplace_back(v);
  }
  validate(s);
  return s;
}

// Mean and standard error of paired differences b - a.
std::pair<double, double> paired(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double mean = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += b[i] - a[i];
  mean /= n;
  double var = 0;
  for (std::size_t i = 0; i < a.size(); ++i) var += (b[i] - a[i] - mean) * (b[i] - a[i] - mean);
  return {mean, std::sqrt(var / (n - 1) / n)};
}

std::vector<double> l1_of(const MetricReport& r, int width) {
  std::vector<double> out;
  for (const auto& t : r.tasks)
    if (t.width == width) out.push_back(t.l1);
  return out;
}

const Aggregate& overall(const MetricReport& r, int width) {
  for (const auto& a : r.aggregates)
    if (a.kind == "all" && a.width == width) return a;
  throw Error(Errc::DataError, "no aggregate for width " + std::to_string(width));
}

// ---------------------------------------------------------------------------

void c1_gradients() {
  const auto t0 = Clock::now();
  ModelConfig cfg;
  cfg.d = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  const GradCheck g = gradient_check(cfg, 11, 1e-4);
  const double secs = since(t0);
  report(1, "gradient correctness", g.max_rel_error < 1e-3 && secs < 60,
         fmt("max rel error %.3e over %zu parameters (worst %s), %.1f s", g.max_rel_error, g.checked, g.worst_tensor.c_str(), secs));
}

void c2_loss_at_init() {
  const auto p = Params<double>::init(ModelConfig{}, 0);
  std::vector<InterleavedSequence> batch;
  for (std::uint64_t s = 0; s < 8; ++s) batch.push_back(gen_task(100 + s, kAllTaskKinds[s % kNumTaskKinds]).gt_chain);
  std::vector<FlowSample> samples;
  long double expected = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    samples.push_back(draw_flow_sample(batch[b], derive_seed({7, b}), 4.0));
    long double sq = 0;
    for (int i = 0; i < kGridValues; ++i) {
      const long double d = static_cast<long double>(samples[b].z0[i]) - samples[b].z1[i];
      sq += d * d;
    }
    expected += sq / kGridValues;
  }
  expected /= batch.size();
  const LossBreakdown l = loss_with_samples<double>(p, batch, samples, {}, nullptr);
  const double dce = std::abs(l.ce - std::log(64.0)), dmse = std::abs(l.mse - static_cast<double>(expected));
  const double dtot = std::abs(l.total - (l.ce + l.mse));
  report(2, "loss at init", dce < 1e-6 && dmse < 1e-6 && dtot < 1e-12,
         fmt("ce %.9f (ln 64 %.9f), mse %.9f (direct %.9f), total - (ce + mse) = %.1e", l.ce, std::log(64.0), l.mse,
             static_cast<double>(expected), l.total - (l.ce + l.mse)));
}

void c3_flow() {
  Rng rng(3);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Latent z0, z1;
    for (auto& v : z0) v = static_cast<float>(rng.uniform() * 2 - 1);
    for (auto& v : z1) v = static_cast<float>(rng.normal());
    for (int k : {1, 5, 20}) {
      const Latent out = euler_integrate(z1, k, [&](const Latent&, double) {
        Latent v;
        for (int i = 0; i < kGridValues; ++i) v[i] = z0[i] - z1[i];
        return v;
      });
      for (int i = 0; i < kGridValues; ++i) worst = std::max(worst, static_cast<double>(std::abs(out[i] - z0[i])));
    }
  }
  report(3, "flow exactness", worst < 1e-6, fmt("max |z - z0| %.2e over 100 draws, K in {1, 5, 20}", worst));
}

void c4_round_trips(const fs::path& scratch) {
  Rng rng(4);
  int tok_bad = 0, rec_bad = 0, ckpt_bad = 0;
  std::vector<Record> recs;
  std::string jsonl;
  for (int i = 0; i < 10000; ++i) {
    std::vector<Token> words;
    const int n = static_cast<int>(rng.below(12));
    for (int k = 0; k < n; ++k) words.push_back(static_cast<Token>(rng.below(kVocabSize)));
    if (tokenize(detokenize(words)) != words) ++tok_bad;

    Record r;
    r.id = rng.next();
    r.task_kind = std::string(task_kind_name(kAllTaskKinds[rng.below(kNumTaskKinds)]));
    r.seq = random_sequence(rng);
    const std::string line = serialize(r);
    const Record back = deserialize(line);
    if (!(back == r) || serialize(back) != line) ++rec_bad;
    recs.push_back(r);
    jsonl += line + '\n';
  }
  {
    std::ofstream(scratch / "roundtrip.jsonl", std::ios::binary) << jsonl;
    const auto back = read_records(scratch / "roundtrip.jsonl");
    if (back != recs) ++rec_bad;
  }
  for (int i = 0; i < 10000; ++i) {
    const auto p = random_model(rng.next(), 8, 1, 2);
    save_checkpoint(scratch / "rt.bin", p);
    const auto q = load_checkpoint(scratch / "rt.bin");
    bool same = q.config == p.config && q.tensors.size() == p.tensors.size();
    for (std::size_t t = 0; same && t < p.tensors.size(); ++t)
      same = std::memcmp(q.tensors[t].data(), p.tensors[t].data(), sizeof(float) * p.tensors[t].size()) == 0;
    ckpt_bad += !same;
  }
  report(4, "round trips", tok_bad == 0 && rec_bad == 0 && ckpt_bad == 0,
         fmt("10000 each: tokenizer %d, records %d, checkpoints %d mismatches", tok_bad, rec_bad, ckpt_bad));
}

void c5_cache() {
  const auto p = random_model(5, 32, 2, 4);
  double worst = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto seq = s % 5 == 4 ? gen_revision_task(s).gt_chain : gen_task(s, kAllTaskKinds[s % kNumTaskKinds]).gt_chain;
    const FlatStream f = flatten(seq);
    const auto slots = build_slots(seq, f);
    std::vector<int> rows;
    for (int i = 0; i < static_cast<int>(slots.size()); ++i) rows.push_back(i);
    Graph<float> full(p, slots, rows, {});
    KvCache<float> cache(p.config);
    std::size_t i = 0;
    while (i < slots.size()) {
      const std::size_t n = slots[i].token == kPatchSlot ? kNumPatches : 1;
      const Mat<float> h = run_chunk<float>(p, cache, std::span<const Slot>(slots.data() + i, n), true);
      const Mat<float> l = text_head(p, h);
      worst = std::max(worst, static_cast<double>((l - full.logits().middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)))
                                                      .cwiseAbs()
                                                      .maxCoeff()));
      i += n;
    }
  }

  // Revise mid-chain and continue, against a fresh session over the same stream.
  SampleConfig cfg;
  cfg.euler_steps = 3;
  cfg.max_segments = 5;
  int mismatched = 0, runs = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto task = gen_revision_task(s);
    Session a(p, task.gt_chain.input, task.instruction, s);
    a.decode_text(cfg);
    if (a.finished()) continue;
    a.sample_visual(cfg);
    a.revise(tokenize("REPLACE RED SQUARE WITH BLUE DISC"));
    Session b = Session::rebuild(p, a.sequence(), false, s);
    const RunResult ra = run_session(a, cfg, nullptr), rb = run_session(b, cfg, nullptr);
    mismatched += !(ra.seq == rb.seq) || ra.error != rb.error;
    ++runs;
  }
  report(5, "KV-cache consistency", worst < 1e-5 && mismatched == 0 && runs > 0,
         fmt("max logit gap %.2e over 100 streams; revise-and-continue %d/%d identical", worst, runs - mismatched, runs));
}

void c6_mmdc() {
  const auto p = random_model(6, 32, 2, 4);
  SampleConfig cfg;
  cfg.euler_steps = 3;
  cfg.max_segments = 4;
  int width1_bad = 0, max_bad = 0, order_bad = 0, steps = 0;
  for (std::uint64_t s = 0; s < 12; ++s) {
    const auto task = gen_task(s, kAllTaskKinds[s % kNumTaskKinds]);
    SearchConfig one;
    one.width = 1;
    one.reward = std::make_shared<HeuristicReward>();
    const RunResult plain = run(p, task.gt_chain.input, task.instruction, cfg, nullptr, s);
    const RunResult w1 = run(p, task.gt_chain.input, task.instruction, cfg, &one, s);
    width1_bad += !(plain.seq == w1.seq);

    SearchConfig serial;
    serial.width = 4;
    serial.reward = s % 2 ? std::shared_ptr<const RewardModel>(std::make_shared<OracleReward>(task.gt_chain))
                          : std::make_shared<HeuristicReward>();
    SearchConfig par = serial;
    par.parallel = true;
    Trace ts, tp;
    const RunResult rs = run(p, task.gt_chain.input, task.instruction, cfg, &serial, s, &ts);
    const RunResult rp = run(p, task.gt_chain.input, task.instruction, cfg, &par, s, &tp);
    bool same = rs.seq == rp.seq && ts.rows.size() == tp.rows.size();
    for (std::size_t i = 0; same && i < ts.rows.size(); ++i)
      same = ts.rows[i].event == tp.rows[i].event && ts.rows[i].value == tp.rows[i].value && ts.rows[i].score == tp.rows[i].score;
    order_bad += !same;

    double best = -1;
    for (const auto& row : ts.rows) {
      if (row.event == "branch") best = std::max(best, row.score);
      if (row.event == "select") {
        max_bad += row.score != best;
        ++steps;
        best = -1;
      }
    }
  }
  report(6, "MMDC correctness", width1_bad == 0 && max_bad == 0 && order_bad == 0 && steps > 0,
         fmt("width-1 vs plain %d mismatches; %d/%d commits at the max score; serial vs parallel %d mismatches", width1_bad,
             steps - max_bad, steps, order_bad));
}

struct Baseline {
  Params<float> params;
  double train_seconds = 0;
};

Baseline load_or_train(const fs::path& dir) {
  TrainConfig cfg;
  const bool cached = fs::exists(dir / "model.bin") && fs::exists(dir / "train_meta.json");
  if (cached) {
    std::ifstream in(dir / "train_meta.json");
    const auto meta = nlohmann::json::parse(in);
    Settings s;
    for (const auto& [k, v] : meta["config"].items()) s[k] = v.get<std::string>();
    TrainConfig used;
    apply_settings(used, s);
    if (to_settings(used) == to_settings(cfg) && meta["examples"] == 8000) {
      std::fprintf(stderr, "using cached baseline in %s\n", dir.string().c_str());
      return {load_checkpoint(dir / "model.bin"), meta["seconds"].get<double>()};
    }
    std::fprintf(stderr, "cached baseline was trained with other settings; retraining\n");
  }
  fs::create_directories(dir);
  const Dataset ds = gen_dataset(8000, 0, kUniform);
  std::vector<Record> train_set;
  for (const auto& r : ds.records)
    if (split_of(r.id) == Split::Train) train_set.push_back(r);
  std::fprintf(stderr, "training baseline: %zu records, %d steps, batch %d\n", train_set.size(), cfg.steps, cfg.batch_size);
  TrainResult res = train(cfg, train_set, dir, [](const LogRow& r) {
    if (r.step % 1000 == 0) std::fprintf(stderr, "  step %5d  ce %.4f  mse %.4f\n", r.step, r.loss.ce, r.loss.mse);
  });
  nlohmann::ordered_json meta;
  meta["seconds"] = res.seconds;
  meta["examples"] = 8000;
  meta["train_records"] = train_set.size();
  for (const auto& [k, v] : to_settings(cfg)) meta["config"][k] = v;
  std::ofstream(dir / "train_meta.json") << meta.dump(2) << '\n';
  return {std::move(res.params), res.seconds};
}

void c7_width(const Params<float>& params) {
  const auto t0 = Clock::now();
  const auto tasks = held_out_tasks(0, 120);
  EvalOptions o;
  o.reward = "oracle";
  const MetricReport r = evaluate(params, tasks, {1, 3, 5}, o);
  const double secs = since(t0);
  const auto a = l1_of(r, 1), b = l1_of(r, 3), c = l1_of(r, 5);
  const auto [d13, se13] = paired(a, b);
  const auto [d35, se35] = paired(b, c);
  const bool pass = d13 <= se13 && d35 <= se35 && secs < 900;
  report(7, "search width trend", pass,
         fmt("L1 N=1 %.4f, N=3 %.4f, N=5 %.4f over %zu tasks; steps %+.4f (se %.4f), %+.4f (se %.4f); %.0f s",
             overall(r, 1).l1, overall(r, 3).l1, overall(r, 5).l1, tasks.size(), d13, se13, d35, se35, secs));
}

void c8_learning(const Baseline& base) {
  const auto tasks = held_out_tasks(0, 400);
  EvalOptions o;
  const MetricReport r = evaluate(base.params, tasks, {1}, o);
  const Aggregate& all = overall(r, 1);
  const bool pass = base.train_seconds < 1800 && all.l1 < 0.08 && all.wellformed_rate >= 0.99;
  report(8, "end-to-end learning", pass,
         fmt("train %.0f s; held-out L1 %.4f (se %.4f) over %zu tasks; well-formed %.3f; psnr %.2f ssim %.3f",
             base.train_seconds, all.l1, all.l1_se, all.n, all.wellformed_rate, all.psnr, all.ssim));
}

void c9_text_only(const Params<float>& params) {
  const auto tasks = held_out_tasks(0, 100, TaskKind::Replace);
  EvalOptions o;
  const MetricReport inter = evaluate(params, tasks, {1}, o);
  o.text_only = true;
  const MetricReport text = evaluate(params, tasks, {1}, o);
  const auto [d, se] = paired(l1_of(text, 1), l1_of(inter, 1));
  report(9, "interleaved vs text-only", d <= se,
         fmt("Replace L1 interleaved %.4f, text-only %.4f over %zu tasks; difference %+.4f (se %.4f)", overall(inter, 1).l1,
             overall(text, 1).l1, tasks.size(), d, se));
}

double ssim_reference(const GridImage& a, const GridImage& b) {
  long double w[7][7], wsum = 0;
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) {
      w[y][x] = std::exp(-static_cast<long double>((y - 3) * (y - 3) + (x - 3) * (x - 3)) / 4.5L);
      wsum += w[y][x];
    }
  long double acc = 0;
  for (int ch = 0; ch < 3; ++ch)
    for (int r0 = 0; r0 + 7 <= 16; ++r0)
      for (int c0 = 0; c0 + 7 <= 16; ++c0) {
        long double ma = 0, mb = 0;
        for (int y = 0; y < 7; ++y)
          for (int x = 0; x < 7; ++x) {
            ma += w[y][x] / wsum * a.at(r0 + y, c0 + x, ch);
            mb += w[y][x] / wsum * b.at(r0 + y, c0 + x, ch);
          }
        long double va = 0, vb = 0, cv = 0;
        for (int y = 0; y < 7; ++y)
          for (int x = 0; x < 7; ++x) {
            const long double da = a.at(r0 + y, c0 + x, ch) - ma, db = b.at(r0 + y, c0 + x, ch) - mb;
            va += w[y][x] / wsum * da * da;
            vb += w[y][x] / wsum * db * db;
            cv += w[y][x] / wsum * da * db;
          }
        acc += (2 * ma * mb + 1e-4L) * (2 * cv + 9e-4L) / ((ma * ma + mb * mb + 1e-4L) * (va + vb + 9e-4L));
      }
  return static_cast<double>(acc / 300);
}

double psnr_reference(const GridImage& a, const GridImage& b) {
  long double sq = 0;
  for (int i = 0; i < kGridValues; ++i) {
    const long double d = static_cast<long double>(a.values[i]) - b.values[i];
    sq += d * d;
  }
  const long double mse = sq / kGridValues;
  if (mse < 1e-10L) return kPsnrCap;
  return static_cast<double>(10 * std::log10(1 / mse));
}

void c10_metrics() {
  Rng rng(10);
  double ssim_gap = 0, psnr_gap = 0;
  for (int i = 0; i < 1000; ++i) {
    GridImage a, b;
    for (auto& v : a.values) v = static_cast<float>(rng.uniform());
    if (i % 2) {
      b = quantized(render(gen_task(static_cast<std::uint64_t>(i), kAllTaskKinds[i % kNumTaskKinds]).edited));
    } else {
      for (auto& v : b.values) v = static_cast<float>(rng.uniform());
    }
    ssim_gap = std::max(ssim_gap, std::abs(ssim(a, b) - ssim_reference(a, b)));
    psnr_gap = std::max(psnr_gap, std::abs(psnr(a, b) - psnr_reference(a, b)));
  }
  GridImage x;
  for (auto& v : x.values) v = static_cast<float>(rng.uniform());
  const GridImage black = GridImage::constant(0.f), white = GridImage::constant(1.f);
  const bool trivial = ssim(x, x) == 1.0 && psnr(x, x) == kPsnrCap && l1(x, x) == 0.0 && psnr(black, white) == 0.0 &&
                       l1(black, white) == 1.0 && std::abs(embed_sim(x, x) - 1.0) < 1e-12;
  report(10, "metrics oracle", ssim_gap < 1e-6 && psnr_gap < 1e-6 && trivial,
         fmt("max gap ssim %.2e, psnr %.2e over 1000 pairs; trivial cases %s", ssim_gap, psnr_gap, trivial ? "exact" : "violated"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string baseline_dir = "baseline";
  app.add_option("--baseline", baseline_dir, "directory holding (or receiving) the baseline model");
  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path scratch = fs::temp_directory_path() / "ilcot_acceptance";
    fs::create_directories(scratch);
    c1_gradients();
    c2_loss_at_init();
    c3_flow();
    c4_round_trips(scratch);
    c5_cache();
    c6_mmdc();
    const Baseline base = load_or_train(baseline_dir);
    c7_width(base.params);
    c8_learning(base);
    c9_text_only(base.params);
    c10_metrics();
  } catch (const Error& e) {
    std::printf("FAIL  aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed\n", failures);
  return failures ? 1 : 0;
}
