#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ecgx/error.hpp"
#include "ecgx/finetune.hpp"
#include "ecgx/matrix.hpp"

namespace ecgx::exchange {

inline constexpr int kMaxOpset = 20;

enum class ModelKind { linear_head, mlp, external_onnx };

std::string_view to_string(ModelKind kind) noexcept;

struct InputSpec {
    int leads = 12;
    int samples = 1000;
    double rate_hz = 100.0;
    std::string unit = "mV";
    friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

struct ModelManifest {
    std::string name;
    std::string version;
    ModelKind kind = ModelKind::linear_head;
    std::vector<std::string> labels;
    InputSpec input_spec;
    std::optional<int> opset;  // external_onnx only
    std::string preprocessing = "ecgx-normalize-v1";
    std::string sha256;
    std::string created_at;  // ISO 8601 UTC

    friend bool operator==(const ModelManifest&, const ModelManifest&) = default;
};

/// Parses and checks a manifest document.
/// Errors: MalformedJson, MissingField, OpsetTooHigh, BadHash, InvalidOptions.
ModelManifest validate_manifest(std::string_view json);
void validate_manifest(const ModelManifest& m);
std::string manifest_to_json(const ModelManifest& m);

std::string sha256_hex(std::string_view bytes);
std::string utc_timestamp();

/// Payload file name "<name>-<version>.<ext>" and its sidecar "<stem>.manifest.json".
std::string payload_filename(const ModelManifest& m);
std::string manifest_filename(const ModelManifest& m);

/// Fully connected network: ReLU between layers, softmax or sigmoid output.
struct Mlp {
    std::vector<Matrix> weights;  // layer l: out_l x in_l
    std::vector<std::vector<double>> biases;
    std::vector<std::string> class_names;
    bool multilabel = false;

    friend bool operator==(const Mlp&, const Mlp&) = default;
};

using NativeModel = std::variant<finetune::LinearHead, Mlp>;

ModelKind kind_of(const NativeModel& m);
const std::vector<std::string>& class_names(const NativeModel& m);
std::size_t input_dim(const NativeModel& m);
Matrix predict(const NativeModel& m, const Matrix& embeddings);

/// "ECGXMDL1", u32 little-endian header length, JSON header (kind, dims,
/// class names, activation), then every weight matrix and bias vector as
/// row-major little-endian float64.
std::string save_model(const NativeModel& m);

/// Inverse of save_model. With a manifest, also checks kind and labels.
/// Errors: CorruptPayload.
NativeModel load_model(std::string_view payload, const ModelManifest* manifest = nullptr);

enum class EntryState { remote_only, cached, local_only, publishing };

std::string_view to_string(EntryState s) noexcept;

struct RegistryEntry {
    ModelManifest manifest;
    std::string remote_path;
    std::optional<std::filesystem::path> local_path;
    EntryState state = EntryState::remote_only;
};

struct ServerConfig {
    std::string url;  // http://host:port/collection/
    std::string user;
    std::string password;
    std::chrono::milliseconds timeout{5000};
};

struct Listing {
    std::vector<RegistryEntry> entries;
    std::vector<std::string> warnings;
};

/// Depth-1 PROPFIND of the collection; payloads without a valid sidecar
/// manifest become warnings. Errors: Unreachable, AuthFailed, ProtocolError.
Listing list_remote(const ServerConfig& server);

struct SyncFailure {
    std::string model;
    ErrorCode code;
    std::string message;
};

struct SyncSummary {
    std::vector<std::string> downloaded;  // payload file names
    std::vector<std::string> up_to_date;
    std::vector<SyncFailure> failures;
    std::vector<std::string> warnings;
};

/// Downloads entries missing from the cache or whose cached payload no longer
/// matches the manifest hash. Never deletes; a failed download leaves the
/// previous cached copy untouched. Errors: Unreachable, AuthFailed, ProtocolError.
SyncSummary sync(const ServerConfig& server, const std::filesystem::path& cache_dir);

/// PUT payload, then PUT manifest; returns the remote payload path.
/// Errors: HashMismatch (checked before any request), Conflict, AuthFailed,
/// Unreachable, ProtocolError.
std::string publish(const ServerConfig& server, std::string_view payload, const ModelManifest& manifest);

/// Valid entries of a local model directory (cache or locally trained).
/// Entries whose payload hash does not match are reported as warnings.
Listing list_local(const std::filesystem::path& dir, EntryState state);

/// Writes payload and manifest into `dir` under the directory lock.
/// Errors: HashMismatch, Conflict (same name and version already stored).
std::filesystem::path store_local(const std::filesystem::path& dir, std::string_view payload,
                                  const ModelManifest& manifest);

/// Reads a stored payload and verifies its hash. Errors: NotFound, HashMismatch.
std::string read_payload(const std::filesystem::path& dir, const ModelManifest& manifest);

}  // namespace ecgx::exchange
