#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ilcot/image.hpp"

namespace ilcot {

using Token = std::uint8_t;

inline constexpr int kVocabSize = 64;

namespace tok {
inline constexpr Token Pad = 0;
inline constexpr Token Bos = 1;
inline constexpr Token Eos = 2;
inline constexpr Token VisStart = 3;
inline constexpr Token VisEnd = 4;
inline constexpr Token Sep = 5;
inline constexpr Token MaskKw = 6;
inline constexpr Token ObjectKw = 7;
inline constexpr Token FinalKw = 8;
inline constexpr Token FirstWord = 9;
}  // namespace tok

// The published vocabulary, indexed by token id.
const std::array<std::string_view, kVocabSize>& vocabulary();

// Id of a vocabulary word; throws UnknownWord.
Token token_of(std::string_view word);

std::vector<Token> tokenize(std::string_view words);
std::string detokenize(const std::vector<Token>& tokens);

enum class VisKind : std::uint8_t { Mask, Content, Final };

std::string_view vis_kind_name(VisKind k);
std::optional<VisKind> vis_kind_from_name(std::string_view name);
bool is_role_keyword(Token t);
VisKind kind_for_keyword(Token t);
Token keyword_for_kind(VisKind k);

struct TextSeg {
  std::vector<Token> tokens;
  friend bool operator==(const TextSeg&, const TextSeg&) = default;
};

struct VisSeg {
  GridImage image;
  VisKind kind = VisKind::Final;
  friend bool operator==(const VisSeg&, const VisSeg&) = default;
};

using Segment = std::variant<TextSeg, VisSeg>;

// The single role keyword of a text segment, if it has exactly one.
std::optional<Token> role_keyword(const TextSeg& s);

struct InterleavedSequence {
  GridImage input;
  std::vector<Token> instruction;
  std::vector<Segment> chain;
  bool well_formed = false;

  friend bool operator==(const InterleavedSequence&, const InterleavedSequence&) = default;
};

// Reason the sequence violates the chain grammar, or nullopt when well formed.
std::optional<std::string> grammar_violation(const InterleavedSequence& seq);
// Recomputes seq.well_formed and returns it.
bool validate(InterleavedSequence& seq);

int count_vis(const InterleavedSequence& seq);
// Last visual segment of the chain, if any.
const VisSeg* last_vis(const InterleavedSequence& seq);

// Marker used in FlatStream::tokens for image patch slots.
inline constexpr int kPatchSlot = -1;

struct ImageSpan {
  int start = 0;   // stream index of the first patch slot
  int segment = -1;  // chain index, or -1 for the input image
  std::optional<VisKind> kind;  // nullopt for the input image
};

struct FlatStream {
  std::vector<int> tokens;
  // Indices t whose token is a text target: chain text, VIS_START and EOS.
  // The prediction for t is read from position t - 1.
  std::vector<int> text_targets;
  std::vector<ImageSpan> images;
};

// BOS . P . [I patches] . per segment (tokens | VIS_START [patches] VIS_END) . EOS
// Tokens in a text segment from a SEP up to its role keyword are user-injected
// instructions and are not text targets. Throws MalformedSequence.
FlatStream flatten(const InterleavedSequence& seq);

// One JSON-lines dataset record.
struct Record {
  std::uint64_t id = 0;
  std::string task_kind;
  std::string variant = "interleaved";
  InterleavedSequence seq;

  friend bool operator==(const Record&, const Record&) = default;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Throws ParseError on malformed or truncated input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

// One line, no trailing newline. Throws MalformedSequence for ill-formed input.
std::string serialize(const Record& rec);
// Throws ParseError(line, reason); `line` is used for the message only.
Record deserialize(std::string_view line, std::size_t line_no = 0);

}  // namespace ilcot
