#include "ilcot/infer.hpp"

#include <cstdio>
#include <fstream>

#include "ilcot/mmdc.hpp"
#include "ilcot/rng.hpp"

namespace ilcot {

void SampleConfig::check() const {
  if (euler_steps < 1) throw Error(Errc::UsageError, "euler_steps must be at least 1");
  if (max_text_len < 2) throw Error(Errc::UsageError, "max_text_len must be at least 2");
  if (max_segments < 1) throw Error(Errc::UsageError, "max_segments must be at least 1");
}

void Trace::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error(Errc::IoError, "cannot write " + path.string());
  os << "segment,event,value,score\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.score);
    os << r.segment << ',' << r.event << ',' << r.value << ',' << buf << '\n';
  }
}

namespace {

void check_instruction(const std::vector<Token>& instruction) {
  for (Token t : instruction)
    if (t < tok::FirstWord || t >= kVocabSize)
      throw Error(Errc::MalformedSequence, "instructions may only contain vocabulary words");
}

// Tokens the model produced itself, i.e. excluding SEP-injected spans.
int generated_length(const TextSeg& s) {
  int n = 0;
  bool injected = false;
  for (Token t : s.tokens) {
    if (t == tok::Sep) injected = true;
    if (is_role_keyword(t)) injected = false;
    if (!injected) ++n;
  }
  return n;
}

bool has_keyword(const TextSeg& s) {
  for (Token t : s.tokens)
    if (is_role_keyword(t)) return true;
  return false;
}

}  // namespace

Token choose_token(const Mat<float>& logits, const TextSeg& open, const InterleavedSequence& seq, const SampleConfig& cfg) {
  // The final image closes the chain.
  if (open.tokens.empty() && seq.chain.size() >= 2) {
    const auto* prev = std::get_if<VisSeg>(&seq.chain[seq.chain.size() - 2]);
    if (prev && prev->kind == VisKind::Final) return tok::Eos;
  }
  const bool kw = has_keyword(open);
  const int n = generated_length(open);
  std::array<bool, kVocabSize> allowed{};
  if (!kw && n >= cfg.max_text_len - 1) {
    for (Token t : {tok::MaskKw, tok::ObjectKw, tok::FinalKw}) allowed[t] = true;
  } else if (kw && n >= cfg.max_text_len) {
    allowed[tok::VisStart] = true;
  } else {
    for (int t = tok::FirstWord; t < kVocabSize; ++t) allowed[t] = true;
    if (kw)
      allowed[tok::VisStart] = true;
    else
      for (Token t : {tok::MaskKw, tok::ObjectKw, tok::FinalKw}) allowed[t] = true;
  }
  int best = -1;
  for (int t = 0; t < kVocabSize; ++t) {
    if (!allowed[t]) continue;
    if (best < 0 || logits(0, t) > logits(0, best)) best = t;
  }
  return static_cast<Token>(best);
}

Session::Session(const Params<float>& params, std::uint64_t seed) : params_(&params), seed_(seed), cache_(params.config) {}

Session::Session(const Params<float>& params, const GridImage& input, std::vector<Token> instruction, std::uint64_t seed)
    : Session(params, seed) {
  check_instruction(instruction);
  seq_.input = input;
  seq_.instruction = std::move(instruction);
  commit_token(tok::Bos);
  for (Token t : seq_.instruction) commit_token(t);
  commit_image(seq_.input, EmbedKind::Input);
  seq_.chain.emplace_back(TextSeg{});
}

Session Session::rebuild(const Params<float>& params, const InterleavedSequence& partial, bool at_vis_start,
                         std::uint64_t seed) {
  Session s(params, partial.input, partial.instruction, seed);
  s.seq_.chain.clear();
  for (std::size_t i = 0; i < partial.chain.size(); ++i) {
    if (const auto* text = std::get_if<TextSeg>(&partial.chain[i])) {
      if (s.at_vis_start_) throw Error(Errc::MalformedSequence, "two text segments in a row");
      for (Token t : text->tokens) s.commit_token(t);
      s.seq_.chain.push_back(*text);
      const bool open = i + 1 == partial.chain.size();
      if (!open || at_vis_start) {
        s.commit_token(tok::VisStart);
        s.at_vis_start_ = true;
      }
    } else {
      const auto& vis = std::get<VisSeg>(partial.chain[i]);
      if (!s.at_vis_start_ || s.pending_kind() != vis.kind)
        throw Error(Errc::MalformedSequence, "visual segment " + std::to_string(i) + " does not follow a matching text segment");
      s.commit_visual(vis);
      s.seq_.chain.pop_back();
    }
  }
  if (s.seq_.chain.empty() || std::holds_alternative<VisSeg>(s.seq_.chain.back())) {
    if (at_vis_start) throw Error(Errc::MalformedSequence, "VIS_START needs an open text segment");
    s.seq_.chain.emplace_back(TextSeg{});
  }
  return s;
}

void Session::commit_token(Token t) {
  Slot s;
  s.token = t;
  s.position = cache_.length;
  s.group = cache_.length;
  s.limit = cache_.length;
  const Mat<float> hidden = run_chunk<float>(*params_, cache_, std::span<const Slot>(&s, 1), true);
  next_logits_ = text_head(*params_, hidden);
}

void Session::commit_image(const GridImage& img, EmbedKind kind) {
  const Latent z = patchify(img);
  std::vector<Slot> block(kNumPatches);
  for (int p = 0; p < kNumPatches; ++p) {
    auto& s = block[p];
    s.position = cache_.length + p;
    s.patch = p;
    s.kind = kind;
    s.group = cache_.length;
    s.limit = cache_.length;
    std::copy_n(z.begin() + p * kPatchDim, kPatchDim, s.latent.begin());
  }
  const Mat<float> hidden = run_chunk<float>(*params_, cache_, block, true);
  next_logits_ = text_head<float>(*params_, hidden.bottomRows(1));
}

TextSeg& Session::open_text() { return std::get<TextSeg>(seq_.chain.back()); }

std::optional<VisKind> Session::pending_kind() const {
  if (!at_vis_start_) return std::nullopt;
  const auto kw = role_keyword(std::get<TextSeg>(seq_.chain.back()));
  if (!kw) return std::nullopt;
  return kind_for_keyword(*kw);
}

std::vector<Token> Session::decode_text(const SampleConfig& cfg, Trace* trace) {
  if (finished_) throw Error(Errc::MalformedSequence, "session already ended");
  if (at_vis_start_) throw Error(Errc::MalformedSequence, "a visual segment is pending");
  std::vector<Token> out;
  for (;;) {
    const Token t = choose_token(next_logits_, open_text(), seq_, cfg);
    if (trace)
      trace->rows.push_back({static_cast<int>(seq_.chain.size()) - 1, "token", std::string(vocabulary()[t]),
                             static_cast<double>(next_logits_(0, t))});
    out.push_back(t);
    commit_token(t);
    if (t == tok::VisStart) {
      at_vis_start_ = true;
      return out;
    }
    if (t == tok::Eos) {
      if (open_text().tokens.empty()) seq_.chain.pop_back();
      finished_ = true;
      validate(seq_);
      return out;
    }
    open_text().tokens.push_back(t);
  }
}

Candidate Session::propose_visual(const SampleConfig& cfg, std::uint64_t branch_seed) const {
  const auto kind = pending_kind();
  if (!kind) throw Error(Errc::MalformedSequence, "no VIS_START pending");
  cfg.check();
  std::vector<Slot> block(kNumPatches);
  const EmbedKind ek = embed_kind(*kind);
  for (int p = 0; p < kNumPatches; ++p) {
    auto& s = block[p];
    s.position = cache_.length + p;
    s.patch = p;
    s.kind = ek;
    s.group = cache_.length;
    s.limit = cache_.length;
  }
  Rng rng(branch_seed);
  Latent z1;
  for (auto& v : z1) v = static_cast<float>(rng.normal());
  const Latent z = euler_integrate(z1, cfg.euler_steps, [&](const Latent& zt, double t) {
    for (int p = 0; p < kNumPatches; ++p) {
      block[p].time = static_cast<float>(t);
      std::copy_n(zt.begin() + p * kPatchDim, kPatchDim, block[p].latent.begin());
    }
    const Mat<float> hidden = run_chunk<float>(*params_, cache_, std::span<const Slot>(block));
    const Mat<float> vel = velocity_head(*params_, hidden);
    Latent v;
    std::copy_n(vel.data(), kGridValues, v.begin());
    return v;
  });
  Candidate c;
  c.seed = branch_seed;
  c.seg.kind = *kind;
  c.seg.image = unpatchify(z, &c.out_of_range);
  return c;
}

void Session::commit_visual(const VisSeg& seg) {
  const auto kind = pending_kind();
  if (!kind || *kind != seg.kind) throw Error(Errc::MalformedSequence, "visual segment kind does not match its text");
  commit_image(seg.image, embed_kind(seg.kind));
  commit_token(tok::VisEnd);
  at_vis_start_ = false;
  seq_.chain.emplace_back(seg);
  seq_.chain.emplace_back(TextSeg{});
}

std::uint64_t Session::branch_seed(int branch) const {
  return derive_seed({seed_, static_cast<std::uint64_t>(visual_step()), static_cast<std::uint64_t>(branch)});
}

Candidate Session::sample_visual(const SampleConfig& cfg) {
  Candidate c = propose_visual(cfg, branch_seed(1));
  commit_visual(c.seg);
  return c;
}

void Session::revise(const std::vector<Token>& instruction) {
  if (finished_ || at_vis_start_) throw Error(Errc::MalformedSequence, "revision needs an open text segment");
  if (visual_step() < 1) throw Error(Errc::MalformedSequence, "revision needs at least one committed visual segment");
  check_instruction(instruction);
  commit_token(tok::Sep);
  open_text().tokens.push_back(tok::Sep);
  for (Token t : instruction) {
    commit_token(t);
    open_text().tokens.push_back(t);
  }
}

InterleavedSequence Session::snapshot() const {
  InterleavedSequence out = seq_;
  if (!out.chain.empty()) {
    if (const auto* t = std::get_if<TextSeg>(&out.chain.back()); t && t->tokens.empty()) out.chain.pop_back();
  }
  if (finished_)
    validate(out);
  else
    out.well_formed = false;
  return out;
}

RunResult run_session(Session& s, const SampleConfig& cfg, const SearchConfig* search, Trace* trace) {
  cfg.check();
  RunResult res;
  try {
    while (!s.finished()) {
      if (!s.at_vis_start()) {
        if (s.visual_step() >= cfg.max_segments) {
          res.error = Errc::NonTermination;
          break;
        }
        s.decode_text(cfg, trace);
        if (s.finished()) break;
      }
      if (search)
        mmdc_step(s, *search, cfg, trace);
      else
        s.sample_visual(cfg);
    }
  } catch (const Error& e) {
    if (e.code() != Errc::ContextOverflow) throw;
    res.error = Errc::ContextOverflow;
  }
  res.seq = s.snapshot();
  return res;
}

RunResult run(const Params<float>& params, const GridImage& input, const std::vector<Token>& instruction,
              const SampleConfig& cfg, const SearchConfig* search, std::uint64_t seed, Trace* trace) {
  Session s(params, input, instruction, seed);
  return run_session(s, cfg, search, trace);
}

}  // namespace ilcot
