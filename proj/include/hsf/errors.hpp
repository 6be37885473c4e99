#pragma once

#include <stdexcept>
#include <string>

namespace hsf {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define HSF_DECLARE_ERROR(Name)            \
  class Name : public Error {              \
  public:                                  \
    using Error::Error;                    \
  }

HSF_DECLARE_ERROR(NotFound);
HSF_DECLARE_ERROR(FormatError);
HSF_DECLARE_ERROR(LabelRangeError);
HSF_DECLARE_ERROR(RangeError);
HSF_DECLARE_ERROR(SizeError);
HSF_DECLARE_ERROR(ConfigError);
HSF_DECLARE_ERROR(ContractError);
HSF_DECLARE_ERROR(DegenerateInput);
HSF_DECLARE_ERROR(AlignmentError);
HSF_DECLARE_ERROR(IoError);

#undef HSF_DECLARE_ERROR

}  // namespace hsf
