#pragma once

#include <stdexcept>
#include <string>

namespace gazeneck {

// Base for every error raised by the library. Each subclass names one failure
// kind so callers can catch narrowly.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define GAZENECK_ERROR(Name)              \
  class Name : public Error {             \
   public:                                \
    using Error::Error;                   \
  }

GAZENECK_ERROR(DegenerateInput);
GAZENECK_ERROR(InvalidFov);
GAZENECK_ERROR(LimitExceeded);
GAZENECK_ERROR(OutOfArea);
GAZENECK_ERROR(ConfigInfeasible);
GAZENECK_ERROR(ConfigError);
GAZENECK_ERROR(IoError);
GAZENECK_ERROR(TooFewEpisodes);
GAZENECK_ERROR(OracleFailure);
GAZENECK_ERROR(ShapeMismatch);
GAZENECK_ERROR(IndexOutOfRange);
GAZENECK_ERROR(EmptyBuffer);
GAZENECK_ERROR(ModelMismatch);
GAZENECK_ERROR(MissingCheckpoint);
GAZENECK_ERROR(PortInUse);
GAZENECK_ERROR(ProtocolError);

#undef GAZENECK_ERROR

// Raised by the dataset reader; carries the byte offset where the mismatch
// was detected.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace gazeneck
