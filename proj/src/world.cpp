#include "ilcot/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ilcot/error.hpp"
#include "ilcot/rng.hpp"
#include "json.hpp"

namespace ilcot {

namespace {

constexpr std::array<Rgb, kNumColors> kPalette = {{
    {0.f, 0.f, 0.f},  // BLACK
    {1.f, 1.f, 1.f},  // WHITE
    {1.f, 0.f, 0.f},  // RED
    {0.f, 1.f, 0.f},  // GREEN
    {0.f, 0.f, 1.f},  // BLUE
    {1.f, 1.f, 0.f},  // YELLOW
    {0.f, 1.f, 1.f},  // CYAN
    {1.f, 0.f, 1.f},  // MAGENTA
}};

constexpr std::array<int, 3> kSizes = {3, 5, 7};

Token row_token(int row) { return static_cast<Token>(token_of("R0") + row); }
Token col_token(int col) { return static_cast<Token>(token_of("C0") + col); }

bool boxes_overlap(const Object& a, const Object& b) {
  const int reach = a.size / 2 + b.size / 2;
  return std::abs(a.center_row() - b.center_row()) <= reach && std::abs(a.center_col() - b.center_col()) <= reach;
}

bool fits(const Object& obj, const std::vector<Object>& others, const Object* skip = nullptr) {
  const int h = obj.size / 2;
  if (obj.center_row() - h < 0 || obj.center_row() + h >= kGridH) return false;
  if (obj.center_col() - h < 0 || obj.center_col() + h >= kGridW) return false;
  for (const auto& o : others) {
    if (skip && &o == skip) continue;
    if (boxes_overlap(obj, o)) return false;
  }
  return true;
}

bool pair_taken(const std::vector<Object>& objs, int color, Shape shape, const Object* skip = nullptr) {
  for (const auto& o : objs)
    if (&o != skip && o.color == color && o.shape == shape) return true;
  return false;
}

Shape random_shape(Rng& rng) { return static_cast<Shape>(rng.below(3)); }
int random_size(Rng& rng) { return kSizes[rng.below(kSizes.size())]; }

Scene random_scene(Rng& rng, int min_objects, int max_objects) {
  for (;;) {
    Scene s;
    s.background = static_cast<int>(rng.below(kNumColors));
    const int want = min_objects + static_cast<int>(rng.below(max_objects - min_objects + 1));
    for (int attempt = 0; attempt < 64 && static_cast<int>(s.objects.size()) < want; ++attempt) {
      Object o;
      o.shape = random_shape(rng);
      o.color = static_cast<int>(rng.below(kNumColors));
      o.size = random_size(rng);
      o.row = static_cast<int>(rng.below(4));
      o.col = static_cast<int>(rng.below(4));
      if (o.color == s.background || pair_taken(s.objects, o.color, o.shape) || !fits(o, s.objects)) continue;
      s.objects.push_back(o);
    }
    if (static_cast<int>(s.objects.size()) == want) return s;
  }
}

GridImage union_mask(const GridImage& a, const GridImage& b) {
  GridImage out;
  for (int i = 0; i < kGridValues; ++i) out.values[i] = std::max(a.values[i], b.values[i]);
  return out;
}

std::vector<Token> cat(std::initializer_list<std::vector<Token>> parts) {
  std::vector<Token> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<Token> where(const Object& o) { return {row_token(o.row), col_token(o.col)}; }
std::vector<Token> what(const Object& o) { return {color_token(o.color), shape_token(o.shape)}; }

void push_step(InterleavedSequence& seq, std::vector<Token> text, const GridImage& img, VisKind kind) {
  seq.chain.emplace_back(TextSeg{std::move(text)});
  seq.chain.emplace_back(VisSeg{img, kind});
}

struct Draft {
  Scene scene, edited;
  std::vector<Token> instruction;
  std::vector<std::pair<std::vector<Token>, std::optional<VisKind>>> steps;  // text + optional image kind
  GridImage mask;
  EditFill fill;
  std::optional<GridImage> content;
};

// Fills a task for one kind; returns false when the sampled scene cannot host
// the edit and must be redrawn.
bool draft_task(Rng& rng, TaskKind kind, Draft& d) {
  const Token kMask = tok::MaskKw, kObj = tok::ObjectKw, kFinal = tok::FinalKw;
  const Token kBg = token_of("BACKGROUND");
  switch (kind) {
    case TaskKind::Remove: {
      d.scene = random_scene(rng, 1, 3);
      const auto target = d.scene.objects[rng.below(d.scene.objects.size())];
      d.edited = d.scene;
      std::erase(d.edited.objects, target);
      d.instruction = cat({{token_of("REMOVE")}, what(target)});
      d.mask = support_mask(target);
      d.fill = {std::nullopt, palette(d.scene.background)};
      d.steps.push_back({cat({{kMask, token_of("REMOVE")}, what(target), where(target)}), VisKind::Mask});
      d.steps.push_back({{kFinal, kBg, color_token(d.scene.background)}, VisKind::Final});
      return true;
    }
    case TaskKind::Replace: {
      d.scene = random_scene(rng, 1, 3);
      const std::size_t idx = rng.below(d.scene.objects.size());
      const auto target = d.scene.objects[idx];
      Object repl = target;
      repl.shape = random_shape(rng);
      repl.color = static_cast<int>(rng.below(kNumColors));
      if (repl.color == d.scene.background) return false;
      if (pair_taken(d.scene.objects, repl.color, repl.shape, &d.scene.objects[idx])) return false;
      if (support_mask(repl) == support_mask(target) && repl.color == target.color) return false;
      d.edited = d.scene;
      d.edited.objects[idx] = repl;
      d.instruction = cat({{token_of("REPLACE")}, what(target), {token_of("WITH")}, what(repl)});
      d.mask = union_mask(support_mask(target), support_mask(repl));
      d.content = render_content(repl);
      d.fill = {d.content, palette(d.scene.background)};
      d.steps.push_back({cat({{kMask, token_of("REPLACE")}, what(target), where(target)}), VisKind::Mask});
      d.steps.push_back({cat({{kObj}, what(repl), {size_token(repl.size)}, where(repl)}), VisKind::Content});
      d.steps.push_back({{kFinal, kBg, color_token(d.scene.background)}, VisKind::Final});
      return true;
    }
    case TaskKind::Add: {
      d.scene = random_scene(rng, 1, 2);
      Object o;
      o.shape = random_shape(rng);
      o.color = static_cast<int>(rng.below(kNumColors));
      o.size = random_size(rng);
      o.row = static_cast<int>(rng.below(4));
      o.col = static_cast<int>(rng.below(4));
      if (o.color == d.scene.background || pair_taken(d.scene.objects, o.color, o.shape)) return false;
      if (!fits(o, d.scene.objects)) return false;
      d.edited = d.scene;
      d.edited.objects.push_back(o);
      d.instruction = cat({{token_of("ADD"), size_token(o.size)}, what(o), {token_of("AT")}, where(o)});
      d.mask = support_mask(o);
      d.fill = {std::nullopt, palette(o.color)};
      d.steps.push_back({cat({{kMask, token_of("ADD"), size_token(o.size)}, what(o), where(o)}), VisKind::Mask});
      d.steps.push_back({cat({{kFinal}, what(o)}), VisKind::Final});
      return true;
    }
    case TaskKind::Recolor: {
      d.scene = random_scene(rng, 1, 3);
      const std::size_t idx = rng.below(d.scene.objects.size());
      const auto target = d.scene.objects[idx];
      const int color = static_cast<int>(rng.below(kNumColors));
      if (color == target.color || color == d.scene.background) return false;
      if (pair_taken(d.scene.objects, color, target.shape, &d.scene.objects[idx])) return false;
      d.edited = d.scene;
      d.edited.objects[idx].color = color;
      d.instruction = cat({{token_of("RECOLOR")}, what(target), {token_of("TO"), color_token(color)}});
      d.mask = support_mask(target);
      d.fill = {std::nullopt, palette(color)};
      d.steps.push_back(
          {cat({{kFinal, token_of("RECOLOR")}, what(target), where(target), {token_of("TO"), color_token(color)}}),
           VisKind::Final});
      return true;
    }
    case TaskKind::Resize: {
      d.scene = random_scene(rng, 1, 3);
      const std::size_t idx = rng.below(d.scene.objects.size());
      const auto target = d.scene.objects[idx];
      Object resized = target;
      resized.size = random_size(rng);
      if (resized.size == target.size) return false;
      if (!fits(resized, d.scene.objects, &d.scene.objects[idx])) return false;
      if (support_mask(resized) == support_mask(target)) return false;
      d.edited = d.scene;
      d.edited.objects[idx] = resized;
      d.instruction = cat({{token_of("RESIZE")}, what(target), {token_of("TO"), size_token(resized.size)}});
      d.mask = union_mask(support_mask(target), support_mask(resized));
      d.content = render_content(resized);
      d.fill = {d.content, palette(d.scene.background)};
      d.steps.push_back({cat({{kMask, token_of("RESIZE")}, what(target), where(target)}), VisKind::Mask});
      d.steps.push_back({cat({{kFinal}, what(target), {size_token(resized.size)}}), VisKind::Final});
      return true;
    }
    case TaskKind::BgChange: {
      d.scene = random_scene(rng, 1, 3);
      const int bg = static_cast<int>(rng.below(kNumColors));
      if (bg == d.scene.background) return false;
      for (const auto& o : d.scene.objects)
        if (o.color == bg) return false;
      d.edited = d.scene;
      d.edited.background = bg;
      d.instruction = {token_of("CHANGE"), kBg, token_of("TO"), color_token(bg)};
      GridImage objects;
      for (const auto& o : d.scene.objects) objects = union_mask(objects, support_mask(o));
      for (auto& v : objects.values) v = 1.f - v;
      d.mask = objects;
      d.fill = {std::nullopt, palette(bg)};
      d.steps.push_back({{kMask, kBg, color_token(d.scene.background)}, VisKind::Mask});
      d.steps.push_back({{kFinal, kBg, color_token(bg)}, VisKind::Final});
      return true;
    }
  }
  return false;
}

TaskInstance assemble(const Draft& d, TaskKind kind) {
  TaskInstance t;
  t.scene = d.scene;
  t.edited = d.edited;
  t.kind = kind;
  t.instruction = d.instruction;
  t.edit_mask = d.mask;
  t.fill = d.fill;
  t.gt_chain.input = render(d.scene);
  t.gt_chain.instruction = d.instruction;
  const GridImage final_img = render(d.edited);
  for (const auto& [text, vis] : d.steps) {
    const GridImage& img = *vis == VisKind::Mask ? d.mask : *vis == VisKind::Content ? *d.content : final_img;
    push_step(t.gt_chain, text, img, *vis);
  }
  validate(t.gt_chain);
  return t;
}

}  // namespace

Rgb palette(int color) { return kPalette.at(static_cast<std::size_t>(color)); }
Token color_token(int color) { return static_cast<Token>(token_of("BLACK") + color); }

Token shape_token(Shape s) { return static_cast<Token>(token_of("SQUARE") + static_cast<int>(s)); }

Token size_token(int size) {
  switch (size) {
    case 3: return token_of("SMALL");
    case 5: return token_of("MEDIUM");
    default: return token_of("LARGE");
  }
}

bool Object::covers(int r, int c) const {
  const int dr = r - center_row(), dc = c - center_col(), h = size / 2;
  if (std::abs(dr) > h || std::abs(dc) > h) return false;
  switch (shape) {
    case Shape::Square: return true;
    case Shape::Disc: return dr * dr + dc * dc <= h * h + h;
    case Shape::Plus: {
      const int arm = size == 7 ? 1 : 0;
      return std::abs(dr) <= arm || std::abs(dc) <= arm;
    }
  }
  return false;
}

bool scene_valid(const Scene& s) {
  if (s.objects.size() > 3 || s.background < 0 || s.background >= kNumColors) return false;
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    if (o.color < 0 || o.color >= kNumColors || o.color == s.background) return false;
    if (o.size != 3 && o.size != 5 && o.size != 7) return false;
    if (o.row < 0 || o.row > 3 || o.col < 0 || o.col > 3) return false;
    if (!fits(o, {})) return false;
    for (std::size_t j = i + 1; j < s.objects.size(); ++j) {
      if (boxes_overlap(o, s.objects[j])) return false;
      if (o.color == s.objects[j].color && o.shape == s.objects[j].shape) return false;
    }
  }
  return true;
}

GridImage render(const Scene& s) {
  GridImage img = GridImage::filled(palette(s.background));
  for (const auto& o : s.objects)
    for (int r = 0; r < kGridH; ++r)
      for (int c = 0; c < kGridW; ++c)
        if (o.covers(r, c)) img.set_pixel(r, c, palette(o.color));
  return img;
}

GridImage support_mask(const Object& obj) {
  GridImage m;
  for (int r = 0; r < kGridH; ++r)
    for (int c = 0; c < kGridW; ++c)
      if (obj.covers(r, c)) m.set_pixel(r, c, {1.f, 1.f, 1.f});
  return m;
}

GridImage gt_mask(const Scene& s, const Object& obj) {
  if (std::find(s.objects.begin(), s.objects.end(), obj) == s.objects.end())
    throw Error(Errc::ObjectNotInScene, "object is not part of the scene");
  return support_mask(obj);
}

GridImage render_content(const Object& obj) {
  GridImage img = GridImage::constant(kCanvasGray);
  for (int r = 0; r < kGridH; ++r)
    for (int c = 0; c < kGridW; ++c)
      if (obj.covers(r, c)) img.set_pixel(r, c, palette(obj.color));
  return img;
}

std::string_view task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::Remove: return "remove";
    case TaskKind::Replace: return "replace";
    case TaskKind::Add: return "add";
    case TaskKind::Recolor: return "recolor";
    case TaskKind::Resize: return "resize";
    case TaskKind::BgChange: return "bg_change";
  }
  return "?";
}

std::optional<TaskKind> task_kind_from_name(std::string_view name) {
  for (TaskKind k : kAllTaskKinds)
    if (task_kind_name(k) == name) return k;
  return std::nullopt;
}

GridImage compose_final(const GridImage& input, const GridImage& mask, const EditFill& fill, TaskKind kind) {
  if (!mask.is_mask()) throw Error(Errc::InvalidMask, "mask must be binary with equal channels");
  if ((kind == TaskKind::Replace || kind == TaskKind::Resize) && !fill.content)
    throw Error(Errc::ShapeMismatch, std::string(task_kind_name(kind)) + " composition needs a content image");
  GridImage out = input;
  for (int r = 0; r < kGridH; ++r)
    for (int c = 0; c < kGridW; ++c) {
      if (!mask.on(r, c)) continue;
      Rgb px = fill.color;
      if (fill.content) {
        const Rgb cp = fill.content->pixel(r, c);
        if (!(cp.r == kCanvasGray && cp.g == kCanvasGray && cp.b == kCanvasGray)) px = cp;
      }
      out.set_pixel(r, c, px);
    }
  return out;
}

TaskInstance gen_task(std::uint64_t seed, TaskKind kind) {
  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(kind), 0x7a5cULL}));
  for (;;) {
    Draft d;
    if (draft_task(rng, kind, d)) return assemble(d, kind);
  }
}

TaskInstance gen_revision_task(std::uint64_t seed) {
  TaskInstance t = gen_task(seed, TaskKind::Replace);
  Rng rng(derive_seed({seed, 0x4e71ULL}));
  // The replaced object is the one that differs between the two scenes.
  std::size_t idx = 0;
  while (t.scene.objects[idx] == t.edited.objects[idx]) ++idx;
  Object repl = t.edited.objects[idx];
  const Object target = t.scene.objects[idx];
  std::vector<int> options;
  for (int c = 0; c < kNumColors; ++c) {
    if (c == repl.color || c == t.scene.background) continue;
    if (pair_taken(t.edited.objects, c, repl.shape, &t.edited.objects[idx])) continue;
    Object cand = repl;
    cand.color = c;
    if (support_mask(cand) == support_mask(target) && c == target.color) continue;
    options.push_back(c);
  }
  repl.color = options[rng.below(options.size())];
  t.edited.objects[idx] = repl;
  t.fill.content = render_content(repl);

  const std::vector<Token> revised = cat({{token_of("REPLACE")}, what(target), {token_of("WITH")}, what(repl)});
  auto& text2 = std::get<TextSeg>(t.gt_chain.chain[2]);
  text2.tokens = cat({{tok::Sep}, revised, {tok::ObjectKw}, what(repl), {size_token(repl.size)}, where(repl)});
  std::get<VisSeg>(t.gt_chain.chain[3]).image = render_content(repl);
  std::get<VisSeg>(t.gt_chain.chain[5]).image = render(t.edited);
  validate(t.gt_chain);
  return t;
}

std::optional<int> revised_color(const InterleavedSequence& seq) {
  for (const auto& seg : seq.chain) {
    const auto* text = std::get_if<TextSeg>(&seg);
    if (!text) continue;
    const auto& toks = text->tokens;
    auto sep = std::find(toks.begin(), toks.end(), tok::Sep);
    if (sep == toks.end()) continue;
    auto with = std::find(sep, toks.end(), token_of("WITH"));
    if (with == toks.end() || with + 1 == toks.end()) return std::nullopt;
    const int c = static_cast<int>(*(with + 1)) - token_of("BLACK");
    if (c >= 0 && c < kNumColors) return c;
  }
  return std::nullopt;
}

InterleavedSequence to_text_only(const InterleavedSequence& seq) {
  InterleavedSequence out;
  out.input = seq.input;
  out.instruction.push_back(token_of("TEXTMODE"));
  out.instruction.insert(out.instruction.end(), seq.instruction.begin(), seq.instruction.end());
  TextSeg reasoning{{tok::FinalKw}};
  for (const auto& seg : seq.chain) {
    const auto* text = std::get_if<TextSeg>(&seg);
    if (!text) continue;
    bool injected = false;
    for (Token t : text->tokens) {
      if (t == tok::Sep) injected = true;
      if (is_role_keyword(t)) {
        injected = false;
        continue;
      }
      if (!injected) reasoning.tokens.push_back(t);
    }
  }
  out.chain.emplace_back(std::move(reasoning));
  if (const VisSeg* fin = last_vis(seq)) out.chain.emplace_back(VisSeg{fin->image, VisKind::Final});
  validate(out);
  return out;
}

bool is_text_only(const InterleavedSequence& seq) {
  return !seq.instruction.empty() && seq.instruction.front() == token_of("TEXTMODE");
}

Split::Name split_of(std::uint64_t id) {
  const std::uint64_t h = splitmix64(id ^ 0x5eed5b117ULL) % 100;
  if (h < 90) return Split::Train;
  if (h < 95) return Split::Val;
  return Split::Test;
}

std::string_view split_name(Split::Name s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

TaskInstance dataset_task(std::uint64_t seed, std::uint64_t id, const std::array<double, kNumTaskKinds>& mix) {
  Rng rng(derive_seed({seed, id, 0xd5ULL}));
  double total = 0;
  for (double w : mix) total += w;
  double pick = rng.uniform() * total;
  TaskKind kind = kAllTaskKinds.back();
  for (int k = 0; k < kNumTaskKinds; ++k) {
    if (mix[k] <= 0) continue;
    if (pick < mix[k]) {
      kind = kAllTaskKinds[k];
      break;
    }
    pick -= mix[k];
  }
  const std::uint64_t task_seed = derive_seed({seed, id, 1});
  if (kind == TaskKind::Replace && rng.uniform() < kRevisionFraction) return gen_revision_task(task_seed);
  return gen_task(task_seed, kind);
}

Dataset gen_dataset(std::size_t n, std::uint64_t seed, const std::array<double, kNumTaskKinds>& mix) {
  double total = 0;
  for (double w : mix) {
    if (!(w >= 0) || !std::isfinite(w)) throw Error(Errc::InvalidMix, "weights must be finite and nonnegative");
    total += w;
  }
  if (!(total > 0)) throw Error(Errc::InvalidMix, "weights must sum to a positive value");
  Dataset ds;
  ds.manifest.seed = seed;
  ds.manifest.n = n;
  ds.manifest.mix = mix;
  ds.records.reserve(n);
  for (std::uint64_t id = 0; id < n; ++id) {
    TaskInstance t = dataset_task(seed, id, mix);
    Record rec;
    rec.id = id;
    rec.task_kind = std::string(task_kind_name(t.kind));
    rec.variant = revised_color(t.gt_chain) ? "revised" : "interleaved";
    rec.seq = std::move(t.gt_chain);
    ds.manifest.ids[split_of(id)].push_back(id);
    ++ds.manifest.kind_counts[static_cast<int>(t.kind)];
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

namespace {

nlohmann::ordered_json id_ranges(const std::vector<std::uint64_t>& ids) {
  auto out = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ids.size();) {
    std::size_t j = i;
    while (j + 1 < ids.size() && ids[j + 1] == ids[j] + 1) ++j;
    out.push_back({ids[i], ids[j]});
    i = j + 1;
  }
  return out;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "dataset.jsonl", std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + (dir / "dataset.jsonl").string());
    for (const auto& r : ds.records) out << serialize(r) << '\n';
  }
  nlohmann::ordered_json m;
  m["seed"] = ds.manifest.seed;
  m["n"] = ds.manifest.n;
  auto mix = nlohmann::ordered_json::object();
  auto counts = nlohmann::ordered_json::object();
  for (int k = 0; k < kNumTaskKinds; ++k) {
    mix[std::string(task_kind_name(kAllTaskKinds[k]))] = ds.manifest.mix[k];
    counts[std::string(task_kind_name(kAllTaskKinds[k]))] = ds.manifest.kind_counts[k];
  }
  m["mix"] = mix;
  m["kind_counts"] = counts;
  auto splits = nlohmann::ordered_json::object();
  for (auto s : {Split::Train, Split::Val, Split::Test}) {
    splits[std::string(split_name(s))] = {{"count", ds.manifest.ids[s].size()}, {"ranges", id_ranges(ds.manifest.ids[s])}};
  }
  m["splits"] = splits;
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw Error(Errc::IoError, "cannot write " + (dir / "manifest.json").string());
  out << m.dump(2) << '\n';
}

std::vector<Record> read_records(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot read " + jsonl.string());
  std::vector<Record> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    out.push_back(deserialize(line, line_no));
  }
  return out;
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot read " + path.string());
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n = j.at("n").get<std::size_t>();
    for (int k = 0; k < kNumTaskKinds; ++k) {
      const std::string name(task_kind_name(kAllTaskKinds[k]));
      m.mix[k] = j.at("mix").at(name).get<double>();
      m.kind_counts[k] = j.at("kind_counts").at(name).get<std::size_t>();
    }
    for (auto s : {Split::Train, Split::Val, Split::Test})
      for (const auto& range : j.at("splits").at(std::string(split_name(s))).at("ranges"))
        for (auto id = range.at(0).get<std::uint64_t>(); id <= range.at(1).get<std::uint64_t>(); ++id)
          m.ids[s].push_back(id);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace ilcot
