#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fewvlm {

enum class ErrorCode {
  kInvalidArgument,
  kInvalidId,
  kBadMagic,
  kShapeMismatch,
  kNonFiniteValue,
  kParseError,
  kMissingField,
  kIoError,
  kSequenceTooLong,
  kFeatureDimMismatch,
  kEmptyTarget,
  kTooShort,
  kEmptyCorpus,
  kPlaceholderMismatch,
  kIndexOutOfRange,
  kDatasetTooSmall,
  kMalformedEpisode,
  kEmptyAnswers,
  kLengthMismatch,
  kEmptyReferences,
  kTooManyObjects,
  kUnknownId,
};

std::string_view error_code_name(ErrorCode code);

// Every failure surfaced by the library carries one of the codes above so
// callers (and the CLI's JSON error channel) can dispatch on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace fewvlm
