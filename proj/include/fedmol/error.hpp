#pragma once

#include <stdexcept>
#include <string>

namespace fedmol {

enum class ErrorKind {
    // molgraph
    UnknownAtom,
    UnmatchedRingBond,
    UnbalancedParenthesis,
    EmptyInput,
    KekulizationFailure,
    EmptySampleSet,
    // diffusion
    InvalidStepCount,
    StepOutOfRange,
    DegenerateDenominator,
    NonFiniteLogits,
    // models
    ShapeMismatch,
    NonFiniteLoss,
    NonFiniteGuidance,
    // federation / wire
    EmptyUpdateSet,
    AllZeroWeights,
    KeyMismatch,
    CollaboratorFailure,
    BadMagic,
    UnsupportedVersion,
    TruncatedPayload,
    DuplicateTensorName,
    // data
    MissingColumn,
    UnreadableFile,
    EmptyDataset,
    DatasetTooSmall,
    ZeroVariance,
    // harness
    DegenerateMean,
    MetricKeyMismatch,
    // anything that does not fit a documented kind
    Internal,
};

const char* error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

} // namespace fedmol
