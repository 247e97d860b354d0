#pragma once

#include <stdexcept>
#include <string>

namespace microbia {

// Base for every error the library raises. Callers that only care about
// "something went wrong" catch this; the subclasses identify the category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MICROBIA_DEFINE_ERROR(Name)         \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  };

MICROBIA_DEFINE_ERROR(DimensionError)      // shape / rank mismatch
MICROBIA_DEFINE_ERROR(ParameterError)      // invalid argument value
MICROBIA_DEFINE_ERROR(NumericError)        // NaN / Inf surfaced by an op
MICROBIA_DEFINE_ERROR(LabelError)          // label outside the active scheme
MICROBIA_DEFINE_ERROR(DataError)           // malformed or empty data
MICROBIA_DEFINE_ERROR(IngestionError)      // manifest / image file problems
MICROBIA_DEFINE_ERROR(SplitError)          // stratification preconditions
MICROBIA_DEFINE_ERROR(GenerationError)     // synthetic generator gave up
MICROBIA_DEFINE_ERROR(NormalizationError)  // zero-variance channel
MICROBIA_DEFINE_ERROR(StateError)          // stale trace, wrong mode
MICROBIA_DEFINE_ERROR(CheckpointError)     // unreadable or mismatched checkpoint
MICROBIA_DEFINE_ERROR(SchemeError)         // 7-class vs 4-class confusion
MICROBIA_DEFINE_ERROR(DivergenceError)     // NaN loss during training
MICROBIA_DEFINE_ERROR(ConfigError)         // experiment / train config

#undef MICROBIA_DEFINE_ERROR

}  // namespace microbia
