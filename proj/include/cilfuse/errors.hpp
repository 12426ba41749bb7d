#pragma once

#include <stdexcept>
#include <string>

namespace cilfuse {

// Every library failure derives from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define CILFUSE_DEFINE_ERROR(Name)      \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  };

CILFUSE_DEFINE_ERROR(DimensionError)
CILFUSE_DEFINE_ERROR(DomainError)
CILFUSE_DEFINE_ERROR(IndexError)
CILFUSE_DEFINE_ERROR(NumericError)
CILFUSE_DEFINE_ERROR(SpecError)
CILFUSE_DEFINE_ERROR(GenerationError)
CILFUSE_DEFINE_ERROR(DegenerateError)
CILFUSE_DEFINE_ERROR(LookupError)
CILFUSE_DEFINE_ERROR(TrainingError)
CILFUSE_DEFINE_ERROR(MapError)
CILFUSE_DEFINE_ERROR(FormatError)
CILFUSE_DEFINE_ERROR(ConfigError)
CILFUSE_DEFINE_ERROR(ReportError)

#undef CILFUSE_DEFINE_ERROR

}  // namespace cilfuse
