#include "fewvlm/error.hpp"

namespace fewvlm {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kInvalidId: return "InvalidId";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNonFiniteValue: return "NonFiniteValue";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kMissingField: return "MissingField";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kSequenceTooLong: return "SequenceTooLong";
    case ErrorCode::kFeatureDimMismatch: return "FeatureDimMismatch";
    case ErrorCode::kEmptyTarget: return "EmptyTarget";
    case ErrorCode::kTooShort: return "TooShort";
    case ErrorCode::kEmptyCorpus: return "EmptyCorpus";
    case ErrorCode::kPlaceholderMismatch: return "PlaceholderMismatch";
    case ErrorCode::kIndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::kDatasetTooSmall: return "DatasetTooSmall";
    case ErrorCode::kMalformedEpisode: return "MalformedEpisode";
    case ErrorCode::kEmptyAnswers: return "EmptyAnswers";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kEmptyReferences: return "EmptyReferences";
    case ErrorCode::kTooManyObjects: return "TooManyObjects";
    case ErrorCode::kUnknownId: return "UnknownId";
  }
  return "Unknown";
}

}  // namespace fewvlm
