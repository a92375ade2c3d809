#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dlr {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DLR_DEFINE_ERROR(Name)                  \
  class Name : public Error {                   \
   public:                                      \
    explicit Name(const std::string& what_arg)  \
        : Error(#Name ": " + what_arg) {}       \
  }

DLR_DEFINE_ERROR(DegenerateNorm);
DLR_DEFINE_ERROR(NonFinite);
DLR_DEFINE_ERROR(ShapeMismatch);
DLR_DEFINE_ERROR(NotScalar);
DLR_DEFINE_ERROR(StepOutOfRange);
DLR_DEFINE_ERROR(SizeMismatch);
DLR_DEFINE_ERROR(PositionOutOfRange);
DLR_DEFINE_ERROR(EmptyInput);
DLR_DEFINE_ERROR(OovWord);
DLR_DEFINE_ERROR(GroupTooSmall);
DLR_DEFINE_ERROR(SnapshotMissing);
DLR_DEFINE_ERROR(NoForwardYet);
DLR_DEFINE_ERROR(ConfigError);
DLR_DEFINE_ERROR(IoError);
DLR_DEFINE_ERROR(TaskNotFound);
DLR_DEFINE_ERROR(CheckpointError);

#undef DLR_DEFINE_ERROR

// Raised by the trajectory parser. Carries the offending token position.
class FormatError : public Error {
 public:
  FormatError(std::size_t position, std::string reason)
      : Error("FormatError(" + reason + ") at token " + std::to_string(position)),
        position_(position),
        reason_(std::move(reason)) {}

  std::size_t position() const { return position_; }
  const std::string& reason() const { return reason_; }

 private:
  std::size_t position_;
  std::string reason_;
};

}  // namespace dlr
