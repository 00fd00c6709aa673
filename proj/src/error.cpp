#include "fedmol/error.hpp"

namespace fedmol {

const char* error_kind_name(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::UnknownAtom: return "UnknownAtom";
    case ErrorKind::UnmatchedRingBond: return "UnmatchedRingBond";
    case ErrorKind::UnbalancedParenthesis: return "UnbalancedParenthesis";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::KekulizationFailure: return "KekulizationFailure";
    case ErrorKind::EmptySampleSet: return "EmptySampleSet";
    case ErrorKind::InvalidStepCount: return "InvalidStepCount";
    case ErrorKind::StepOutOfRange: return "StepOutOfRange";
    case ErrorKind::DegenerateDenominator: return "DegenerateDenominator";
    case ErrorKind::NonFiniteLogits: return "NonFiniteLogits";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::NonFiniteGuidance: return "NonFiniteGuidance";
    case ErrorKind::EmptyUpdateSet: return "EmptyUpdateSet";
    case ErrorKind::AllZeroWeights: return "AllZeroWeights";
    case ErrorKind::KeyMismatch: return "KeyMismatch";
    case ErrorKind::CollaboratorFailure: return "CollaboratorFailure";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ErrorKind::DuplicateTensorName: return "DuplicateTensorName";
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::UnreadableFile: return "UnreadableFile";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::DatasetTooSmall: return "DatasetTooSmall";
    case ErrorKind::ZeroVariance: return "ZeroVariance";
    case ErrorKind::DegenerateMean: return "DegenerateMean";
    case ErrorKind::MetricKeyMismatch: return "MetricKeyMismatch";
    case ErrorKind::Internal: return "Internal";
    }
    return "Unknown";
}

} // namespace fedmol
