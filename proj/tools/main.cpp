// ilcot command-line entry point.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ilcot/config.hpp"
#include "ilcot/error.hpp"
#include "ilcot/infer.hpp"
#include "ilcot/metrics.hpp"
#include "ilcot/mmdc.hpp"
#include "ilcot/oracle.hpp"
#include "ilcot/rng.hpp"
#include "ilcot/train.hpp"
#include "ilcot/world.hpp"
#include "json.hpp"

using namespace ilcot;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool deterministic = false;
};

std::array<double, kNumTaskKinds> parse_mix(const std::string& s) {
  std::array<double, kNumTaskKinds> mix{};
  std::stringstream ss(s);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= kNumTaskKinds) throw Error(Errc::UsageError, "mix takes six comma-separated weights");
    try {
      mix[i++] = std::stod(item);
    } catch (const std::exception&) {
      throw Error(Errc::UsageError, "bad mix weight '" + item + "'");
    }
  }
  if (i != kNumTaskKinds) throw Error(Errc::UsageError, "mix takes six comma-separated weights");
  return mix;
}

std::vector<Record> load_split(const std::filesystem::path& dir, Split::Name split) {
  std::vector<Record> out;
  for (auto& r : read_records(dir / "dataset.jsonl"))
    if (split_of(r.id) == split) out.push_back(std::move(r));
  return out;
}

// Input, instruction and optional ground truth for edit/step.
struct EditSource {
  GridImage input;
  std::vector<Token> instruction;
  std::optional<InterleavedSequence> gt;
  std::string task_kind = "unknown";
};

EditSource load_source(const std::string& image, const std::string& instruction, const std::string& record,
                       std::int64_t record_id) {
  EditSource src;
  if (!record.empty()) {
    for (auto& r : read_records(record))
      if (record_id < 0 || r.id == static_cast<std::uint64_t>(record_id)) {
        src.input = r.seq.input;
        src.instruction = r.seq.instruction;
        src.task_kind = r.task_kind;
        src.gt = std::move(r.seq);
        break;
      }
    if (!src.gt) throw Error(Errc::DataError, "record id not found in " + record);
  } else {
    if (image.empty()) throw Error(Errc::UsageError, "give --image and --instruction, or --record");
    src.input = read_ppm(image);
  }
  if (!instruction.empty()) src.instruction = tokenize(instruction);
  if (src.instruction.empty()) throw Error(Errc::UsageError, "empty instruction");
  return src;
}

std::shared_ptr<const RewardModel> make_reward(const std::string& name, const std::optional<InterleavedSequence>& gt) {
  if (name == "heuristic") return std::make_shared<HeuristicReward>();
  if (name == "oracle") {
    if (!gt) throw Error(Errc::MissingGroundTruth, "oracle reward needs --record with a ground-truth chain");
    return std::make_shared<OracleReward>(*gt);
  }
  throw Error(Errc::UsageError, "reward must be oracle or heuristic");
}

void write_chain(const std::filesystem::path& dir, const InterleavedSequence& seq, const std::string& task_kind) {
  std::filesystem::create_directories(dir);
  write_ppm(dir / "input.ppm", seq.input);
  int k = 0;
  for (std::size_t i = 0; i < seq.chain.size(); ++i)
    if (const auto* v = std::get_if<VisSeg>(&seq.chain[i])) {
      char name[64];
      std::snprintf(name, sizeof name, "seg%02zu_%s.ppm", i, std::string(vis_kind_name(v->kind)).c_str());
      write_ppm(dir / name, v->image);
      ++k;
    }
  std::ofstream txt(dir / "chain.txt");
  txt << "instruction: " << detokenize(seq.instruction) << '\n';
  for (std::size_t i = 0; i < seq.chain.size(); ++i) {
    if (const auto* t = std::get_if<TextSeg>(&seq.chain[i]))
      txt << i << " text: " << detokenize(t->tokens) << '\n';
    else
      txt << i << " vis: " << vis_kind_name(std::get<VisSeg>(seq.chain[i]).kind) << '\n';
  }
  txt << "well_formed: " << (seq.well_formed ? "true" : "false") << '\n';
  if (seq.well_formed) {
    Record rec;
    rec.id = 0;
    rec.task_kind = task_kind;
    rec.variant = "generated";
    rec.seq = seq;
    std::ofstream out(dir / "chain.jsonl", std::ios::binary);
    out << serialize(rec) << '\n';
  }
}

char palette_letter(Rgb px) {
  static const char letters[] = "KWRGBYCM";
  for (int c = 0; c < kNumColors; ++c) {
    const Rgb p = palette(c);
    if (std::abs(px.r - p.r) + std::abs(px.g - p.g) + std::abs(px.b - p.b) < 0.3f) return letters[c];
  }
  if (std::abs(px.r - kCanvasGray) + std::abs(px.g - kCanvasGray) + std::abs(px.b - kCanvasGray) < 0.15f) return '.';
  return '?';
}

void print_grid(std::ostream& os, const GridImage& img, bool color) {
  for (int r = 0; r < kGridH; ++r) {
    for (int c = 0; c < kGridW; ++c) {
      const Rgb px = img.pixel(r, c);
      if (color) {
        auto b = [](float v) { return static_cast<int>(quantize(v)); };
        os << "\x1b[48;2;" << b(px.r) << ';' << b(px.g) << ';' << b(px.b) << "m  ";
      } else {
        os << palette_letter(px) << ' ';
      }
    }
    if (color) os << "\x1b[0m";
    os << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interleaved text-image chain-of-thought editing kit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "global seed")->default_val(0);
  app.add_flag("--deterministic", g.deterministic, "serial branch evaluation");

  auto* vocab = app.add_subcommand("vocab", "print the token table");

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::size_t gen_n = 8000;
  std::string gen_mix = "1,1,1,1,1,1", gen_out;
  int gen_ppm = 0;
  gen->add_option("-n,--n", gen_n, "number of records")->default_val(8000);
  gen->add_option("--mix", gen_mix, "weights for remove,replace,add,recolor,resize,bg_change");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--ppm", gen_ppm, "export the images of the first N records as PPM")->default_val(0);

  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_data, tr_out, tr_config;
  std::vector<std::string> tr_set;
  tr->add_option("--data", tr_data, "dataset directory from gen")->required();
  tr->add_option("--out", tr_out, "run directory")->required();
  tr->add_option("--config", tr_config, "key=value config file");
  tr->add_option("--set", tr_set, "override: key=value (repeatable)");

  auto* ed = app.add_subcommand("edit", "run one edit");
  std::string ed_ckpt, ed_image, ed_instr, ed_record, ed_out, ed_reward = "heuristic", ed_trace, ed_revise;
  std::int64_t ed_id = -1;
  int ed_width = 1, ed_revise_at = -1;
  SampleConfig ed_sample;
  ed->add_option("--checkpoint", ed_ckpt, "model checkpoint")->required();
  ed->add_option("--image", ed_image, "input PPM (16x16)");
  ed->add_option("--instruction", ed_instr, "instruction words");
  ed->add_option("--record", ed_record, "dataset JSONL to take the input from");
  ed->add_option("--id", ed_id, "record id within --record");
  ed->add_option("--width", ed_width, "MMDC search width")->default_val(1);
  ed->add_option("--reward", ed_reward, "oracle|heuristic")->default_val("heuristic");
  ed->add_option("--euler-steps", ed_sample.euler_steps, "Euler steps per image")->default_val(20);
  ed->add_option("--max-text-len", ed_sample.max_text_len)->default_val(16);
  ed->add_option("--max-segments", ed_sample.max_segments)->default_val(8);
  ed->add_option("--out", ed_out, "output directory")->required();
  ed->add_option("--trace", ed_trace, "CSV trace file");
  ed->add_option("--revise-at", ed_revise_at, "insert --revise after this many visual segments");
  ed->add_option("--revise", ed_revise, "revised instruction words");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_json, ev_widths = "1,3,5", ev_mode = "interleaved", ev_reward = "oracle";
  std::size_t ev_limit = 0;
  SampleConfig ev_sample;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train|val|test")->default_val("test");
  ev->add_option("--widths", ev_widths, "comma-separated search widths")->default_val("1,3,5");
  ev->add_option("--reward", ev_reward, "oracle|heuristic")->default_val("oracle");
  ev->add_option("--mode", ev_mode, "interleaved|text_only")->default_val("interleaved");
  ev->add_option("--limit", ev_limit, "evaluate at most N tasks")->default_val(0);
  ev->add_option("--euler-steps", ev_sample.euler_steps)->default_val(20);
  ev->add_option("--json", ev_json, "write the JSON report here");

  auto* st = app.add_subcommand("step", "interactive step-by-step editing");
  std::string st_ckpt, st_image, st_instr, st_record;
  std::int64_t st_id = -1;
  bool st_plain = false;
  SampleConfig st_sample;
  st->add_option("--checkpoint", st_ckpt)->required();
  st->add_option("--image", st_image);
  st->add_option("--instruction", st_instr);
  st->add_option("--record", st_record);
  st->add_option("--id", st_id);
  st->add_option("--euler-steps", st_sample.euler_steps)->default_val(20);
  st->add_flag("--plain", st_plain, "letters instead of terminal colours");

  auto* oc = app.add_subcommand("oracle-check", "recompute the reference checks");
  std::string oc_ckpt;
  std::uint64_t oc_data_seed = 0;
  oc->add_option("--checkpoint", oc_ckpt, "also run the trained-model checks");
  oc->add_option("--data-seed", oc_data_seed, "dataset seed for held-out tasks")->default_val(0);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: UsageError: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*vocab) {
      const auto& v = vocabulary();
      for (int i = 0; i < kVocabSize; ++i) std::cout << i << '\t' << v[i] << '\n';
    } else if (*gen) {
      const Dataset ds = gen_dataset(gen_n, g.seed, parse_mix(gen_mix));
      write_dataset(ds, gen_out);
      for (int i = 0; i < gen_ppm && i < static_cast<int>(ds.records.size()); ++i)
        write_chain(std::filesystem::path(gen_out) / "ppm" / std::to_string(i), ds.records[i].seq, ds.records[i].task_kind);
      std::cout << "wrote " << ds.records.size() << " records to " << gen_out << '\n';
    } else if (*tr) {
      TrainConfig cfg;
      cfg.seed = g.seed;
      if (!tr_config.empty()) apply_settings(cfg, read_settings(tr_config));
      Settings overrides;
      for (const auto& kv : tr_set) {
        const auto s = parse_settings(kv);
        overrides.insert(s.begin(), s.end());
      }
      apply_settings(cfg, overrides);
      const auto records = load_split(tr_data, Split::Train);
      const auto res = train(cfg, records, tr_out, [&](const LogRow& r) {
        if (r.step % 500 == 0)
          std::fprintf(stderr, "step %d ce %.4f mse %.4f total %.4f\n", r.step, r.loss.ce, r.loss.mse, r.loss.total);
      });
      nlohmann::ordered_json meta;
      meta["seconds"] = res.seconds;
      meta["train_records"] = records.size();
      for (const auto& [k, v] : to_settings(cfg)) meta["config"][k] = v;
      std::ofstream(std::filesystem::path(tr_out) / "train_meta.json") << meta.dump(2) << '\n';
      std::cout << "trained " << cfg.steps << " steps in " << res.seconds << " s; checkpoint " << tr_out << "/model.bin\n";
    } else if (*ed) {
      const auto params = load_checkpoint(ed_ckpt);
      const EditSource src = load_source(ed_image, ed_instr, ed_record, ed_id);
      SearchConfig search;
      search.width = ed_width;
      search.parallel = !g.deterministic;
      search.reward = make_reward(ed_reward, src.gt);
      Trace trace;
      Trace* tp = ed_trace.empty() ? nullptr : &trace;
      RunResult res;
      if (ed_revise_at >= 0) {
        // Run to the revision point, then continue from a fresh session built
        // over the concatenated stream.
        Session s(params, src.input, src.instruction, g.seed);
        while (!s.finished() && s.visual_step() < ed_revise_at) {
          s.decode_text(ed_sample, tp);
          if (!s.finished()) mmdc_step(s, search, ed_sample, tp);
        }
        if (s.finished()) throw Error(Errc::UsageError, "chain ended before --revise-at");
        InterleavedSequence partial = s.sequence();
        auto& open = std::get<TextSeg>(partial.chain.back());
        open.tokens.push_back(tok::Sep);
        for (Token t : tokenize(ed_revise)) open.tokens.push_back(t);
        Session fresh = Session::rebuild(params, partial, false, g.seed);
        res = run_session(fresh, ed_sample, &search, tp);
      } else {
        res = run(params, src.input, src.instruction, ed_sample, &search, g.seed, tp);
      }
      write_chain(ed_out, res.seq, src.task_kind);
      if (tp) trace.write_csv(ed_trace);
      if (res.error) throw Error(*res.error, "chain written to " + ed_out + " for inspection");
      std::cout << "wrote " << ed_out << '\n';
    } else if (*ev) {
      const auto params = load_checkpoint(ev_ckpt);
      Split::Name split = Split::Test;
      if (ev_split == "train") split = Split::Train;
      else if (ev_split == "val") split = Split::Val;
      else if (ev_split != "test") throw Error(Errc::UsageError, "split must be train, val or test");
      std::vector<EvalTask> tasks;
      for (auto& r : load_split(ev_data, split)) {
        if (r.variant == "revised") continue;
        tasks.push_back({r.id, r.task_kind, std::move(r.seq)});
        if (ev_limit && tasks.size() >= ev_limit) break;
      }
      std::vector<int> widths;
      std::stringstream ss(ev_widths);
      for (std::string w; std::getline(ss, w, ',');) widths.push_back(std::stoi(w));
      EvalOptions opts;
      opts.sample = ev_sample;
      opts.reward = ev_reward;
      opts.seed = g.seed;
      opts.parallel = !g.deterministic;
      if (ev_mode != "interleaved" && ev_mode != "text_only") throw Error(Errc::UsageError, "mode must be interleaved or text_only");
      opts.text_only = ev_mode == "text_only";
      const auto rep = evaluate(params, tasks, widths, opts);
      std::cout << rep.table();
      if (!ev_json.empty()) std::ofstream(ev_json) << rep.to_json() << '\n';
    } else if (*st) {
      const auto params = load_checkpoint(st_ckpt);
      const EditSource src = load_source(st_image, st_instr, st_record, st_id);
      Session s(params, src.input, src.instruction, g.seed);
      std::cout << "input:\n";
      print_grid(std::cout, src.input, !st_plain);
      while (!s.finished()) {
        if (s.visual_step() >= st_sample.max_segments) throw Error(Errc::NonTermination, "max segments reached");
        const auto text = s.decode_text(st_sample);
        std::cout << "text: " << detokenize(text) << '\n';
        if (s.finished()) break;
        const Candidate c = s.sample_visual(st_sample);
        std::cout << vis_kind_name(c.seg.kind) << ":\n";
        print_grid(std::cout, c.seg.image, !st_plain);
        if (count_vis(s.sequence()) > 0 && std::get<VisSeg>(s.sequence().chain[s.sequence().chain.size() - 2]).kind == VisKind::Final)
          continue;
        std::cout << "revise (empty to continue, q to stop)> " << std::flush;
        std::string line;
        if (!std::getline(std::cin, line) || line == "q") break;
        if (!line.empty()) s.revise(tokenize(line));
      }
      std::cout << (s.finished() ? "done\n" : "stopped\n");
    } else if (*oc) {
      auto items = static_oracles();
      if (!oc_ckpt.empty()) {
        const auto params = load_checkpoint(oc_ckpt);
        const auto more = trained_oracles(params, oc_data_seed, SampleConfig{});
        items.insert(items.end(), more.begin(), more.end());
      }
      bool ok = true;
      for (const auto& it : items) {
        std::cout << (it.pass ? "PASS " : "FAIL ") << it.name << ": " << it.detail << '\n';
        ok = ok && it.pass;
      }
      return ok ? 0 : 3;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: DataError: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
