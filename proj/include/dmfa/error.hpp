#pragma once

#include <stdexcept>
#include <string>

namespace dmfa {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DMFA_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  };

DMFA_DEFINE_ERROR(FormatError)
DMFA_DEFINE_ERROR(WrongKindError)
DMFA_DEFINE_ERROR(ShapeError)
DMFA_DEFINE_ERROR(InvalidValueError)
DMFA_DEFINE_ERROR(NumericalError)
DMFA_DEFINE_ERROR(IndexError)
DMFA_DEFINE_ERROR(EmptyObservedError)
DMFA_DEFINE_ERROR(EmptyMaskError)
DMFA_DEFINE_ERROR(ConfigError)

#undef DMFA_DEFINE_ERROR

/// Raised when a training loss or gradient stops being finite.
class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

}  // namespace dmfa
