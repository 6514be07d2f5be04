#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ecgx {

// Closed set of failure codes. The service echoes these names verbatim in
// error bodies, so renaming one is a wire-format change.
enum class ErrorCode {
    // core-signal
    UnknownLead,
    IncompleteLeadSet,
    BadRate,
    NonPositiveGain,
    InvalidOptions,
    // formats
    UnknownFormat,
    MalformedCsv,
    UnsupportedDtype,
    AmbiguousShape,
    BadHeader,
    UnsupportedWfdbFormat,
    HeaderMismatch,
    UnsupportedTransferSyntax,
    MissingWaveform,
    UnsupportedBits,
    UnsupportedMatVersion,
    NoNumericVariable,
    MissingRate,
    UnknownLeadElement,
    MalformedNumbers,
    MalformedXml,
    MalformedJson,
    TruncatedInput,
    UnsupportedCombination,
    // analysis
    NoBeatsFound,
    TooFewBeats,
    // moa-router
    BadLength,
    NonPositiveTau,
    EmptyBatch,
    OddDim,
    DimMismatch,
    NonFiniteEvaluation,
    // finetune
    ClassTooSmall,
    ShapeMismatch,
    DivergedImmediately,
    NonFiniteLoss,
    UnsupportedAtDeskScale,
    Cancelled,
    // metrics
    LengthMismatch,
    TooFew,
    // exchange
    OpsetTooHigh,
    MissingField,
    BadHash,
    Unreachable,
    AuthFailed,
    ProtocolError,
    HashMismatch,
    Conflict,
    CorruptPayload,
    // service
    NotFound,
    BadRequest,
    PayloadTooLarge,
    NotReady,
    NotExecutable,
    RegistryUnavailable,
    Internal,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace ecgx
