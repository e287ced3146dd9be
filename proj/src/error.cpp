#include "histocase/error.hpp"

namespace histocase {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::MissingColumn: return "MissingColumn";
        case ErrorKind::DuplicateImageId: return "DuplicateImageId";
        case ErrorKind::UnknownLabel: return "UnknownLabel";
        case ErrorKind::MalformedRecord: return "MalformedRecord";
        case ErrorKind::UnreadablePath: return "UnreadablePath";
        case ErrorKind::TooFewPatients: return "TooFewPatients";
        case ErrorKind::InvalidFoldFile: return "InvalidFoldFile";
        case ErrorKind::DecodeFailure: return "DecodeFailure";
        case ErrorKind::ChannelMismatch: return "ChannelMismatch";
        case ErrorKind::EmptyCell: return "EmptyCell";
        case ErrorKind::InfeasibleK: return "InfeasibleK";
        case ErrorKind::NotMultiple: return "NotMultiple";
        case ErrorKind::PatientMissingMagnification: return "PatientMissingMagnification";
        case ErrorKind::RetryCapExceeded: return "RetryCapExceeded";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
        case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorKind::InvalidConfig: return "InvalidConfig";
        case ErrorKind::CheckpointFormat: return "CheckpointFormat";
        case ErrorKind::EmptyInput: return "EmptyInput";
        case ErrorKind::InconsistentTruth: return "InconsistentTruth";
        case ErrorKind::MissingArtifact: return "MissingArtifact";
        case ErrorKind::LeakageDetected: return "LeakageDetected";
    }
    return "Unknown";
}

}  // namespace histocase
