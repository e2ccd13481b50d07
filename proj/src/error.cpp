#include "ilcot/error.hpp"

namespace ilcot {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::UnknownWord: return "UnknownWord";
    case Errc::MalformedSequence: return "MalformedSequence";
    case Errc::ParseError: return "ParseError";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::InvalidMask: return "InvalidMask";
    case Errc::ObjectNotInScene: return "ObjectNotInScene";
    case Errc::InvalidMix: return "InvalidMix";
    case Errc::TOutOfRange: return "TOutOfRange";
    case Errc::ContextOverflow: return "ContextOverflow";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::DataError: return "DataError";
    case Errc::IoError: return "IoError";
    case Errc::CheckpointVersionMismatch: return "CheckpointVersionMismatch";
    case Errc::EmptyCandidates: return "EmptyCandidates";
    case Errc::MissingGroundTruth: return "MissingGroundTruth";
    case Errc::NonTermination: return "NonTermination";
    case Errc::UsageError: return "UsageError";
  }
  return "Unknown";
}

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::UsageError:
    case Errc::UnknownWord:
      return 2;
    case Errc::NonFiniteGradient:
    case Errc::TOutOfRange:
      return 4;
    default:
      return 3;
  }
}

}  // namespace ilcot
