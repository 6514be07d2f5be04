#include "ecgx/error.hpp"

namespace ecgx {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::UnknownLead: return "UnknownLead";
        case ErrorCode::IncompleteLeadSet: return "IncompleteLeadSet";
        case ErrorCode::BadRate: return "BadRate";
        case ErrorCode::NonPositiveGain: return "NonPositiveGain";
        case ErrorCode::InvalidOptions: return "InvalidOptions";
        case ErrorCode::UnknownFormat: return "UnknownFormat";
        case ErrorCode::MalformedCsv: return "MalformedCsv";
        case ErrorCode::UnsupportedDtype: return "UnsupportedDtype";
        case ErrorCode::AmbiguousShape: return "AmbiguousShape";
        case ErrorCode::BadHeader: return "BadHeader";
        case ErrorCode::UnsupportedWfdbFormat: return "UnsupportedWfdbFormat";
        case ErrorCode::HeaderMismatch: return "HeaderMismatch";
        case ErrorCode::UnsupportedTransferSyntax: return "UnsupportedTransferSyntax";
        case ErrorCode::MissingWaveform: return "MissingWaveform";
        case ErrorCode::UnsupportedBits: return "UnsupportedBits";
        case ErrorCode::UnsupportedMatVersion: return "UnsupportedMatVersion";
        case ErrorCode::NoNumericVariable: return "NoNumericVariable";
        case ErrorCode::MissingRate: return "MissingRate";
        case ErrorCode::UnknownLeadElement: return "UnknownLeadElement";
        case ErrorCode::MalformedNumbers: return "MalformedNumbers";
        case ErrorCode::MalformedXml: return "MalformedXml";
        case ErrorCode::MalformedJson: return "MalformedJson";
        case ErrorCode::TruncatedInput: return "TruncatedInput";
        case ErrorCode::UnsupportedCombination: return "UnsupportedCombination";
        case ErrorCode::NoBeatsFound: return "NoBeatsFound";
        case ErrorCode::TooFewBeats: return "TooFewBeats";
        case ErrorCode::BadLength: return "BadLength";
        case ErrorCode::NonPositiveTau: return "NonPositiveTau";
        case ErrorCode::EmptyBatch: return "EmptyBatch";
        case ErrorCode::OddDim: return "OddDim";
        case ErrorCode::DimMismatch: return "DimMismatch";
        case ErrorCode::NonFiniteEvaluation: return "NonFiniteEvaluation";
        case ErrorCode::ClassTooSmall: return "ClassTooSmall";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::DivergedImmediately: return "DivergedImmediately";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::UnsupportedAtDeskScale: return "UnsupportedAtDeskScale";
        case ErrorCode::Cancelled: return "Cancelled";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::TooFew: return "TooFew";
        case ErrorCode::OpsetTooHigh: return "OpsetTooHigh";
        case ErrorCode::MissingField: return "MissingField";
        case ErrorCode::BadHash: return "BadHash";
        case ErrorCode::Unreachable: return "Unreachable";
        case ErrorCode::AuthFailed: return "AuthFailed";
        case ErrorCode::ProtocolError: return "ProtocolError";
        case ErrorCode::HashMismatch: return "HashMismatch";
        case ErrorCode::Conflict: return "Conflict";
        case ErrorCode::CorruptPayload: return "CorruptPayload";
        case ErrorCode::NotFound: return "NotFound";
        case ErrorCode::BadRequest: return "BadRequest";
        case ErrorCode::PayloadTooLarge: return "PayloadTooLarge";
        case ErrorCode::NotReady: return "NotReady";
        case ErrorCode::NotExecutable: return "NotExecutable";
        case ErrorCode::RegistryUnavailable: return "RegistryUnavailable";
        case ErrorCode::Internal: return "Internal";
    }
    return "Internal";
}

}  // namespace ecgx
