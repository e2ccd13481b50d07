#include "ilcot/seq.hpp"

#include <cctype>
#include <sstream>

#include "ilcot/error.hpp"
#include "json.hpp"

namespace ilcot {

const std::array<std::string_view, kVocabSize>& vocabulary() {
  static constexpr std::array<std::string_view, kVocabSize> kWords = {
      "PAD",     "BOS",     "EOS",     "VIS_START", "VIS_END", "SEP",    "MASK_KW", "OBJECT_KW",
      "FINAL_KW", "REMOVE", "REPLACE", "ADD",       "RECOLOR", "RESIZE", "CHANGE",  "SQUARE",
      "DISC",    "PLUS",    "BLACK",   "WHITE",     "RED",     "GREEN",  "BLUE",    "YELLOW",
      "CYAN",    "MAGENTA", "R0",      "R1",        "R2",      "R3",     "C0",      "C1",
      "C2",      "C3",      "SMALL",   "MEDIUM",    "LARGE",   "WITH",   "TO",      "AT",
      "BACKGROUND", "TEXTMODE", "THE",  "A",         "AND",     "OF",     "IN",      "ON",
      "LEFT",    "RIGHT",   "TOP",     "BOTTOM",    "CENTER",  "OBJECT", "IMAGE",   "REGION",
      "NEW",     "OLD",     "THEN",    "KEEP",      "FILL",    "EDIT",   "ORANGE",  "GRAY",
  };
  return kWords;
}

Token token_of(std::string_view word) {
  const auto& words = vocabulary();
  for (int i = 0; i < kVocabSize; ++i)
    if (words[i] == word) return static_cast<Token>(i);
  throw Error(Errc::UnknownWord, "'" + std::string(word) + "'");
}

std::vector<Token> tokenize(std::string_view words) {
  std::vector<Token> out;
  std::size_t pos = 0, index = 0;
  while (pos < words.size()) {
    while (pos < words.size() && std::isspace(static_cast<unsigned char>(words[pos]))) ++pos;
    if (pos >= words.size()) break;
    std::size_t end = pos;
    while (end < words.size() && !std::isspace(static_cast<unsigned char>(words[end]))) ++end;
    const auto word = words.substr(pos, end - pos);
    try {
      out.push_back(token_of(word));
    } catch (const Error&) {
      throw Error(Errc::UnknownWord, "position " + std::to_string(index) + ": '" + std::string(word) + "'");
    }
    ++index;
    pos = end;
  }
  return out;
}

std::string detokenize(const std::vector<Token>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= kVocabSize) throw Error(Errc::UnknownWord, "token id " + std::to_string(tokens[i]));
    if (i) out += ' ';
    out += vocabulary()[tokens[i]];
  }
  return out;
}

std::string_view vis_kind_name(VisKind k) {
  switch (k) {
    case VisKind::Mask: return "mask";
    case VisKind::Content: return "content";
    case VisKind::Final: return "final";
  }
  return "?";
}

std::optional<VisKind> vis_kind_from_name(std::string_view name) {
  if (name == "mask") return VisKind::Mask;
  if (name == "content") return VisKind::Content;
  if (name == "final") return VisKind::Final;
  return std::nullopt;
}

bool is_role_keyword(Token t) { return t == tok::MaskKw || t == tok::ObjectKw || t == tok::FinalKw; }

VisKind kind_for_keyword(Token t) {
  switch (t) {
    case tok::MaskKw: return VisKind::Mask;
    case tok::ObjectKw: return VisKind::Content;
    default: return VisKind::Final;
  }
}

Token keyword_for_kind(VisKind k) {
  switch (k) {
    case VisKind::Mask: return tok::MaskKw;
    case VisKind::Content: return tok::ObjectKw;
    case VisKind::Final: return tok::FinalKw;
  }
  return tok::FinalKw;
}

std::optional<Token> role_keyword(const TextSeg& s) {
  std::optional<Token> found;
  for (Token t : s.tokens) {
    if (!is_role_keyword(t)) continue;
    if (found) return std::nullopt;
    found = t;
  }
  return found;
}

std::optional<std::string> grammar_violation(const InterleavedSequence& seq) {
  for (Token t : seq.instruction) {
    if (t >= kVocabSize) return "instruction token out of range";
    if (t < tok::FirstWord) return "instruction contains special token " + std::string(vocabulary()[t]);
  }
  if (seq.chain.empty()) return "empty chain";
  for (std::size_t i = 0; i < seq.chain.size(); ++i) {
    const bool want_text = i % 2 == 0;
    if (want_text != std::holds_alternative<TextSeg>(seq.chain[i]))
      return "segment " + std::to_string(i) + " breaks text/visual alternation";
    if (want_text) {
      const auto& text = std::get<TextSeg>(seq.chain[i]);
      for (Token t : text.tokens) {
        if (t >= kVocabSize) return "token out of range in segment " + std::to_string(i);
        if (t < tok::FirstWord && t != tok::Sep && !is_role_keyword(t))
          return "segment " + std::to_string(i) + " contains special token " + std::string(vocabulary()[t]);
      }
      if (!role_keyword(text)) return "segment " + std::to_string(i) + " lacks exactly one role keyword";
    } else {
      const auto& text = std::get<TextSeg>(seq.chain[i - 1]);
      const auto& vis = std::get<VisSeg>(seq.chain[i]);
      if (kind_for_keyword(*role_keyword(text)) != vis.kind)
        return "segment " + std::to_string(i) + " kind disagrees with its keyword";
      const bool last = i + 1 == seq.chain.size();
      if (vis.kind == VisKind::Final && !last) return "final image before the end of the chain";
      if (last && vis.kind != VisKind::Final) return "chain does not end with a final image";
    }
  }
  if (std::holds_alternative<TextSeg>(seq.chain.back())) return "chain ends with text";
  return std::nullopt;
}

bool validate(InterleavedSequence& seq) {
  seq.well_formed = !grammar_violation(seq).has_value();
  return seq.well_formed;
}

int count_vis(const InterleavedSequence& seq) {
  int n = 0;
  for (const auto& s : seq.chain) n += std::holds_alternative<VisSeg>(s);
  return n;
}

const VisSeg* last_vis(const InterleavedSequence& seq) {
  for (auto it = seq.chain.rbegin(); it != seq.chain.rend(); ++it)
    if (const auto* v = std::get_if<VisSeg>(&*it)) return v;
  return nullptr;
}

FlatStream flatten(const InterleavedSequence& seq) {
  if (auto why = grammar_violation(seq)) throw Error(Errc::MalformedSequence, *why);
  FlatStream fs;
  auto push_image = [&](int segment, std::optional<VisKind> kind) {
    fs.images.push_back({static_cast<int>(fs.tokens.size()), segment, kind});
    fs.tokens.insert(fs.tokens.end(), kNumPatches, kPatchSlot);
  };
  fs.tokens.push_back(tok::Bos);
  for (Token t : seq.instruction) fs.tokens.push_back(t);
  push_image(-1, std::nullopt);
  for (std::size_t i = 0; i < seq.chain.size(); ++i) {
    if (const auto* text = std::get_if<TextSeg>(&seq.chain[i])) {
      bool injected = false;
      for (Token t : text->tokens) {
        if (t == tok::Sep) injected = true;
        if (is_role_keyword(t)) injected = false;
        if (!injected) fs.text_targets.push_back(static_cast<int>(fs.tokens.size()));
        fs.tokens.push_back(t);
      }
      fs.text_targets.push_back(static_cast<int>(fs.tokens.size()));
      fs.tokens.push_back(tok::VisStart);
    } else {
      push_image(static_cast<int>(i), std::get<VisSeg>(seq.chain[i]).kind);
      fs.tokens.push_back(tok::VisEnd);
    }
  }
  fs.text_targets.push_back(static_cast<int>(fs.tokens.size()));
  fs.tokens.push_back(tok::Eos);
  return fs;
}

namespace {

constexpr std::string_view kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}

using ojson = nlohmann::ordered_json;

ojson image_json(const GridImage& img) {
  ojson j;
  j["height"] = kGridH;
  j["width"] = kGridW;
  j["channels"] = kChannels;
  j["data"] = base64_encode(to_bytes(img));
  return j;
}

[[noreturn]] void parse_fail(std::size_t line_no, const std::string& why) {
  throw Error(Errc::ParseError, "line " + std::to_string(line_no) + ": " + why);
}

GridImage image_from_json(const ojson& j, std::size_t line_no) {
  if (!j.is_object()) parse_fail(line_no, "image is not an object");
  if (j.value("height", 0) != kGridH || j.value("width", 0) != kGridW || j.value("channels", 0) != kChannels)
    parse_fail(line_no, "image dims must be 16x16x3");
  if (!j.contains("data") || !j["data"].is_string()) parse_fail(line_no, "image lacks data");
  std::vector<std::uint8_t> bytes;
  try {
    bytes = base64_decode(j["data"].get<std::string>());
  } catch (const Error& e) {
    parse_fail(line_no, e.detail());
  }
  if (bytes.size() != static_cast<size_t>(kGridValues))
    parse_fail(line_no, "image payload has " + std::to_string(bytes.size()) + " bytes");
  return from_bytes(bytes);
}

std::vector<Token> tokens_from_json(const ojson& j, std::size_t line_no) {
  if (!j.is_array()) parse_fail(line_no, "token list is not an array");
  std::vector<Token> out;
  for (const auto& v : j) {
    if (!v.is_number_unsigned() || v.get<unsigned>() >= static_cast<unsigned>(kVocabSize))
      parse_fail(line_no, "token id out of range");
    out.push_back(static_cast<Token>(v.get<unsigned>()));
  }
  return out;
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += kB64[v & 63];
  }
  if (const std::size_t rest = bytes.size() - i; rest == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += kB64[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error(Errc::ParseError, "base64 length " + std::to_string(text.size()) + " is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=') {
        if (i + 4 != text.size() || k < 2) throw Error(Errc::ParseError, "misplaced base64 padding");
        v[k] = 0;
        ++pad;
      } else {
        if (pad) throw Error(Errc::ParseError, "data after base64 padding");
        v[k] = b64_value(c);
        if (v[k] < 0) throw Error(Errc::ParseError, "invalid base64 character");
      }
    }
    const std::uint32_t w = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(w >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>(w >> 8));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(w));
  }
  return out;
}

std::string serialize(const Record& rec) {
  if (auto why = grammar_violation(rec.seq)) throw Error(Errc::MalformedSequence, *why);
  ojson j;
  j["id"] = rec.id;
  j["task_kind"] = rec.task_kind;
  j["variant"] = rec.variant;
  j["instruction"] = rec.seq.instruction;
  j["input"] = image_json(rec.seq.input);
  ojson chain = ojson::array();
  for (const auto& seg : rec.seq.chain) {
    ojson s;
    if (const auto* text = std::get_if<TextSeg>(&seg)) {
      s["type"] = "text";
      s["tokens"] = text->tokens;
    } else {
      const auto& vis = std::get<VisSeg>(seg);
      s["type"] = "vis";
      s["kind"] = vis_kind_name(vis.kind);
      s["image"] = image_json(vis.image);
    }
    chain.push_back(std::move(s));
  }
  j["chain"] = std::move(chain);
  return j.dump();
}

Record deserialize(std::string_view line, std::size_t line_no) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const nlohmann::json::exception& e) {
    parse_fail(line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) parse_fail(line_no, "record is not an object");
  for (const char* key : {"id", "task_kind", "instruction", "input", "chain"})
    if (!j.contains(key)) parse_fail(line_no, std::string("missing field '") + key + "'");
  Record rec;
  if (!j["id"].is_number_unsigned()) parse_fail(line_no, "id is not an unsigned integer");
  rec.id = j["id"].get<std::uint64_t>();
  if (!j["task_kind"].is_string()) parse_fail(line_no, "task_kind is not a string");
  rec.task_kind = j["task_kind"].get<std::string>();
  if (j.contains("variant")) {
    if (!j["variant"].is_string()) parse_fail(line_no, "variant is not a string");
    rec.variant = j["variant"].get<std::string>();
  }
  rec.seq.instruction = tokens_from_json(j["instruction"], line_no);
  rec.seq.input = image_from_json(j["input"], line_no);
  if (!j["chain"].is_array()) parse_fail(line_no, "chain is not an array");
  for (const auto& s : j["chain"]) {
    const auto type = s.value("type", std::string{});
    if (type == "text") {
      if (!s.contains("tokens")) parse_fail(line_no, "text segment lacks tokens");
      rec.seq.chain.emplace_back(TextSeg{tokens_from_json(s["tokens"], line_no)});
    } else if (type == "vis") {
      const auto kind = vis_kind_from_name(s.value("kind", std::string{}));
      if (!kind) parse_fail(line_no, "unknown visual kind");
      if (!s.contains("image")) parse_fail(line_no, "visual segment lacks image");
      rec.seq.chain.emplace_back(VisSeg{image_from_json(s["image"], line_no), *kind});
    } else {
      parse_fail(line_no, "unknown segment type '" + type + "'");
    }
  }
  if (auto why = grammar_violation(rec.seq)) parse_fail(line_no, "malformed chain: " + *why);
  rec.seq.well_formed = true;
  return rec;
}

}  // namespace ilcot
