#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace voxcell {

enum class ErrorKind {
    InvalidArgument,
    MalformedFile,
    UnknownElement,
    NonP1Symmetry,
    EmptyDataset,
    DegenerateCell,
    CellTooLarge,
    LabelOutOfRange,
    ShapeMismatch,
    BatchTooSmall,
    NonFiniteLoss,
    NonPositiveAlpha,
    UntrainedModel,
    EmptyTruth,
    Io,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::MalformedFile: return "MalformedFile";
        case ErrorKind::UnknownElement: return "UnknownElement";
        case ErrorKind::NonP1Symmetry: return "NonP1Symmetry";
        case ErrorKind::EmptyDataset: return "EmptyDataset";
        case ErrorKind::DegenerateCell: return "DegenerateCell";
        case ErrorKind::CellTooLarge: return "CellTooLarge";
        case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::BatchTooSmall: return "BatchTooSmall";
        case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorKind::NonPositiveAlpha: return "NonPositiveAlpha";
        case ErrorKind::UntrainedModel: return "UntrainedModel";
        case ErrorKind::EmptyTruth: return "EmptyTruth";
        case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the kinds above so
/// callers (and the CLI exit-code mapping) can branch without parsing text.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace voxcell
