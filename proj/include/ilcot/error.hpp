#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ilcot {

enum class Errc {
  UnknownWord,
  MalformedSequence,
  ParseError,
  ShapeMismatch,
  InvalidMask,
  ObjectNotInScene,
  InvalidMix,
  TOutOfRange,
  ContextOverflow,
  EmptyBatch,
  NonFiniteGradient,
  DataError,
  IoError,
  CheckpointVersionMismatch,
  EmptyCandidates,
  MissingGroundTruth,
  NonTermination,
  UsageError,
};

std::string_view errc_name(Errc code);

// Process exit code for a failure of this category: 2 usage, 3 data, 4 numeric.
int exit_code_for(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(errc_name(code)) + ": " + detail), code_(code), detail_(detail) {}

  Errc code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

}  // namespace ilcot
