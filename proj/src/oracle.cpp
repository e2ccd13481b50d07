#include "ilcot/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ilcot/error.hpp"
#include "ilcot/mmdc.hpp"
#include "ilcot/rng.hpp"
#include "ilcot/train.hpp"

namespace ilcot {

namespace {

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[200];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

const std::array<double, kNumTaskKinds> kUniformMix = {1, 1, 1, 1, 1, 1};

double log_binom_pmf(int n, int k, double p) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) + (n - k) * std::log1p(-p);
}

int nearest_palette(Rgb px) {
  int best = 0;
  double bd = 1e9;
  for (int c = 0; c < kNumColors; ++c) {
    const Rgb p = palette(c);
    const double d = std::abs(px.r - p.r) + std::abs(px.g - p.g) + std::abs(px.b - p.b);
    if (d < bd) {
      bd = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

double binomial_outside(int n, double p, int lo, int hi) {
  double s = 0;
  for (int k = 0; k <= n; ++k)
    if (k < lo || k > hi) s += std::exp(log_binom_pmf(n, k, p));
  return s;
}

GradCheck gradient_check(const ModelConfig& cfg, std::uint64_t seed, double eps) {
  auto params = Params<double>::init(cfg, seed);
  // Non-zero heads so every trunk parameter receives gradient.
  Rng rng(derive_seed({seed, 0x4eadULL}));
  for (int idx : {params.layout.text_head, params.layout.text_head_b, params.layout.vel_head, params.layout.vel_head_b})
    for (Eigen::Index i = 0; i < params[idx].size(); ++i) params[idx].data()[i] = 0.3 * rng.normal();

  std::vector<InterleavedSequence> batch = {gen_task(seed, TaskKind::Recolor).gt_chain,
                                            gen_task(seed + 1, TaskKind::Remove).gt_chain};
  std::vector<FlowSample> samples;
  for (std::size_t b = 0; b < batch.size(); ++b)
    samples.push_back(draw_flow_sample(batch[b], derive_seed({seed, b}), 4.0));
  LossOptions opts;
  Params<double> grads = Params<double>::zeros(cfg);
  loss_with_samples<double>(params, batch, samples, opts, &grads);

  GradCheck out;
  for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
    auto& t = params.tensors[ti];
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + eps;
      const double up = loss_with_samples<double>(params, batch, samples, opts, nullptr).total;
      t.data()[i] = orig - eps;
      const double down = loss_with_samples<double>(params, batch, samples, opts, nullptr).total;
      t.data()[i] = orig;
      const double fd = (up - down) / (2 * eps);
      const double an = grads.tensors[ti].data()[i];
      const double rel = std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), 1e-8);
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst_tensor = params.layout.specs[ti].name;
      }
      ++out.checked;
    }
  }
  return out;
}

std::vector<EvalTask> held_out_tasks(std::uint64_t data_seed, std::size_t count, std::optional<TaskKind> kind) {
  std::vector<EvalTask> out;
  for (std::uint64_t id = 0; out.size() < count; ++id) {
    if (split_of(id) != Split::Test) continue;
    TaskInstance t = kind ? gen_task(derive_seed({data_seed, id, 1}), *kind) : dataset_task(data_seed, id, kUniformMix);
    if (revised_color(t.gt_chain)) continue;
    out.push_back({id, std::string(task_kind_name(t.kind)), std::move(t.gt_chain)});
  }
  return out;
}

RevisionTrial revision_trial(const Params<float>& params, std::uint64_t task_seed, const SampleConfig& sample,
                             std::uint64_t run_seed) {
  const TaskInstance t = gen_revision_task(task_seed);
  const auto& text2 = std::get<TextSeg>(t.gt_chain.chain[2]).tokens;
  const auto kw = std::find(text2.begin(), text2.end(), tok::ObjectKw);
  const std::vector<Token> revised(text2.begin() + 1, kw);
  std::size_t idx = 0;
  while (t.scene.objects[idx] == t.edited.objects[idx]) ++idx;
  const Object& target = t.edited.objects[idx];

  RevisionTrial out;
  Session s(params, t.gt_chain.input, t.gt_chain.instruction, run_seed);
  s.decode_text(sample);
  if (s.finished()) return out;
  s.sample_visual(sample);
  if (s.finished()) return out;
  s.revise(revised);
  const RunResult res = run_session(s, sample, nullptr);
  out.well_formed = res.seq.well_formed;
  if (!res.seq.well_formed) return out;
  const GridImage& fin = final_image(res.seq);
  int on = 0, hit = 0;
  for (int r = 0; r < kGridH; ++r)
    for (int c = 0; c < kGridW; ++c) {
      if (!target.covers(r, c)) continue;
      ++on;
      if (nearest_palette(fin.pixel(r, c)) == target.color) ++hit;
    }
  out.followed = on > 0 && 2 * hit >= on;
  return out;
}

std::vector<OracleItem> static_oracles() {
  std::vector<OracleItem> items;

  {
    // Disc support by enumerating every grid cell against the disc equation.
    Object o{Shape::Disc, 1, 1, 1, 5};
    Scene s{0, {o}};
    const int h = o.size / 2;
    int brute = 0;
    for (int r = 0; r < kGridH; ++r)
      for (int c = 0; c < kGridW; ++c) {
        const int dr = r - o.center_row(), dc = c - o.center_col();
        if (dr * dr + dc * dc <= h * h + h) ++brute;
      }
    double sum = 0;
    const GridImage m = gt_mask(s, o);
    for (int r = 0; r < kGridH; ++r)
      for (int c = 0; c < kGridW; ++c) sum += m.at(r, c, 0);
    items.push_back({"disc5_mask_sum", sum == brute, fmt("mask sum %.0f, enumeration %.0f", sum, brute)});
  }

  {
    const double miss = kNumTaskKinds * binomial_outside(1000, 1.0 / 6, 120, 213);
    const auto ds = gen_dataset(1000, 0, kUniformMix);
    const auto [lo, hi] = std::minmax_element(ds.manifest.kind_counts.begin(), ds.manifest.kind_counts.end());
    const bool ok = miss <= 1e-3 && *lo >= 120 && *hi <= 213;
    items.push_back({"kind_counts_n1000", ok,
                     fmt("family miss probability %.2e for [120,213]; observed min %.0f max %.0f", miss,
                         static_cast<double>(*lo), static_cast<double>(*hi))});
  }

  {
    const double u = 0.5, s = 4.0;
    const double ref = s * u / (1.0 + (s - 1.0) * u);
    const double got = shift_time(u, s);
    items.push_back({"shift_time_0.5_4", std::abs(got - 0.8) < 1e-15 && std::abs(ref - 0.8) < 1e-15,
                     fmt("shift_time %.17g, direct %.17g", got, ref)});
  }

  {
    int bad = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      const TaskInstance t = gen_task(seed, TaskKind::Replace);
      const auto& mask = std::get<VisSeg>(t.gt_chain.chain[1]).image;
      if (compose_final(render(t.scene), mask, t.fill, TaskKind::Replace) != render(t.edited)) ++bad;
    }
    items.push_back({"replace_composition_1000", bad == 0, fmt("%.0f mismatches", bad)});
  }

  {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    const GradCheck g = gradient_check(cfg, 11);
    items.push_back({"gradient_fd_d16_l1", g.max_rel_error < 1e-3,
                     fmt("max rel error %.3e over %.0f parameters", g.max_rel_error, static_cast<double>(g.checked)) +
                         " (worst " + g.worst_tensor + ")"});
  }

  {
    // E[1 - |U - m|] = 1/2 for U ~ U(0,1) and binary m.
    Rng rng(77);
    const TaskInstance t = gen_task(3, TaskKind::Remove);
    const GridImage& mask = std::get<VisSeg>(t.gt_chain.chain[1]).image;
    double sum = 0, sq = 0;
    const int draws = 1000;
    for (int i = 0; i < draws; ++i) {
      GridImage noise;
      for (auto& v : noise.values) v = static_cast<float>(rng.uniform());
      const double sc = oracle_score(noise, mask);
      sum += sc;
      sq += sc * sc;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sq / draws - mean * mean) / (draws - 1));
    items.push_back({"oracle_reward_uniform_noise", std::abs(mean - 0.5) < 4 * se + 1e-12,
                     fmt("mean %.5f, expectation 0.5, se %.2e", mean, se)});
  }

  {
    // Moment recursion in long double: m_t = (1-b1^t) g, v_t = (1-b2^t) g^2.
    TrainConfig cfg;
    ModelConfig mc;
    mc.d = 4;
    mc.layers = 0;
    mc.heads = 1;
    auto p = Params<float>::zeros(mc);
    auto g = Params<float>::zeros(mc);
    for (auto& t : g.tensors) t.setConstant(1e-4f);
    AdamState st;
    long double m = 0, v = 0, ref_pos = 0, worst = 0;
    const long double gr = 1e-4L * std::min<long double>(1, cfg.grad_clip / (1e-4L * std::sqrt(static_cast<long double>(g.count()))));
    for (int step = 1; step <= 200; ++step) {
      optimizer_step(p, g, st, cfg);
      m = cfg.beta1 * m + (1 - cfg.beta1) * gr;
      v = cfg.beta2 * v + (1 - cfg.beta2) * gr * gr;
      const long double mh = m / (1 - std::pow(static_cast<long double>(cfg.beta1), step));
      const long double vh = v / (1 - std::pow(static_cast<long double>(cfg.beta2), step));
      ref_pos -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
      worst = std::max(worst, std::abs(static_cast<long double>(p[0](0, 0)) - ref_pos));
    }
    const double per_step = -static_cast<double>(p[0](0, 0)) / 200;
    items.push_back({"adam_constant_gradient", worst < 1e-5 && std::abs(per_step - cfg.lr) < 1e-3 * cfg.lr,
                     fmt("update per step %.9g (lr %.9g), max deviation %.2e", per_step, cfg.lr, static_cast<double>(worst))});
  }

  {
    const double a = 0.2, b = 0.8, c1 = 1e-4;
    const double ref = (2 * a * b + c1) / (a * a + b * b + c1);
    const double got = ssim(GridImage::constant(static_cast<float>(a)), GridImage::constant(static_cast<float>(b)));
    items.push_back({"ssim_constant_0.2_0.8", std::abs(got - ref) < 1e-6, fmt("ssim %.12f, closed form %.12f", got, ref)});
  }
  return items;
}

std::vector<OracleItem> trained_oracles(const Params<float>& params, std::uint64_t data_seed, const SampleConfig& sample) {
  std::vector<OracleItem> items;
  {
    int hits = 0;
    const auto tasks = held_out_tasks(data_seed, 100, TaskKind::Replace);
    for (const auto& t : tasks) {
      Session s(params, t.gt.input, t.gt.instruction, derive_seed({data_seed, t.id}));
      const auto text = s.decode_text(sample);
      if (std::find(text.begin(), text.end(), tok::MaskKw) != text.end()) ++hits;
    }
    const double rate = static_cast<double>(hits) / tasks.size();
    items.push_back({"replace_first_text_mask_kw", rate >= 0.95, fmt("%.3f of 100 held-out Replace tasks (need 0.95)", rate)});
  }
  {
    int hits = 0;
    const auto tasks = held_out_tasks(data_seed, 100, TaskKind::Recolor);
    for (const auto& t : tasks) {
      const auto res = run(params, t.gt.input, t.gt.instruction, sample, nullptr, derive_seed({data_seed, t.id}));
      if (res.seq.well_formed && count_vis(res.seq) == 1) ++hits;
    }
    const double rate = static_cast<double>(hits) / tasks.size();
    items.push_back({"recolor_single_visual", rate >= 0.90, fmt("%.3f of 100 held-out Recolor tasks (need 0.90)", rate)});
  }
  {
    int hits = 0, n = 0;
    for (std::uint64_t id = 0; n < 100; ++id) {
      if (split_of(id) != Split::Test) continue;
      ++n;
      if (revision_trial(params, derive_seed({data_seed, id, 0x7e5ULL}), sample, derive_seed({data_seed, id})).followed) ++hits;
    }
    const double rate = hits / 100.0;
    items.push_back({"revision_followed", rate >= 0.80, fmt("%.3f of 100 held-out revision trials (need 0.80)", rate)});
  }
  {
    EvalOptions opts;
    opts.sample = sample;
    opts.seed = data_seed;
    const auto rep = evaluate(params, held_out_tasks(data_seed, 200), {1}, opts);
    const Aggregate* all = nullptr;
    for (const auto& a : rep.aggregates)
      if (a.kind == "all") all = &a;
    items.push_back({"heldout_final_l1", all->l1 < 0.08 && all->wellformed_rate >= 0.99,
                     fmt("mean final L1 %.4f (need < 0.08), well-formed %.3f (need 0.99)", all->l1, all->wellformed_rate)});
  }
  return items;
}

}  // namespace ilcot
