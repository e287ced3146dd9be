#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace histocase {

enum class ErrorKind {
    InvalidArgument,
    MissingColumn,
    DuplicateImageId,
    UnknownLabel,
    MalformedRecord,
    UnreadablePath,
    TooFewPatients,
    InvalidFoldFile,
    DecodeFailure,
    ChannelMismatch,
    EmptyCell,
    InfeasibleK,
    NotMultiple,
    PatientMissingMagnification,
    RetryCapExceeded,
    ShapeMismatch,
    NonFiniteActivation,
    NonFiniteGradient,
    InvalidConfig,
    CheckpointFormat,
    EmptyInput,
    InconsistentTruth,
    MissingArtifact,
    LeakageDetected,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Every failure surfaced by the library carries a machine-readable kind.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), detail_(message) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& detail() const noexcept { return detail_; }

    // Returns a copy with `context` prepended to the detail (e.g. "fold 2, epoch 3").
    Error with_context(const std::string& context) const { return Error(kind_, context + ": " + detail_); }

private:
    ErrorKind kind_;
    std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace histocase
