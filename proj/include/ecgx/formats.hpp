#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ecgx/analysis.hpp"
#include "ecgx/signal.hpp"

namespace ecgx::formats {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline ByteView as_bytes(std::string_view s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}
inline std::string to_string_bytes(ByteView b) { return {b.begin(), b.end()}; }

enum class DetectedBy { extension, magic_bytes };

struct FormatDescriptor {
    SourceFormat format;
    DetectedBy detected_by;
};

/// Magic bytes win over the file extension when both are available.
FormatDescriptor detect_format(ByteView bytes, std::string_view filename_hint);

/// Format-level knobs that are not carried inside every file.
struct ParseOptions {
    /// Sampling rate for formats that do not store one (csv, npy, npz, mat).
    std::optional<double> rate_hz;
};

/// Rate assumed for rate-less formats; parsers flag it in metadata["warning"].
inline constexpr double kDefaultRateHz = 500.0;

RawRecording parse_csv(ByteView bytes, const ParseOptions& opts = {});
RawRecording parse_npy(ByteView bytes, const ParseOptions& opts = {});
RawRecording parse_npz(ByteView bytes, const ParseOptions& opts = {});
RawRecording parse_wfdb(ByteView header_bytes, ByteView dat_bytes);
RawRecording parse_dicom(ByteView bytes);
RawRecording parse_mat(ByteView bytes, const ParseOptions& opts = {});
RawRecording parse_xml(ByteView bytes);
RawRecording parse_json(ByteView bytes);

/// Dispatches on `format`. WFDB needs both files and is rejected here; use
/// read_recording with a path instead.
RawRecording parse(ByteView bytes, SourceFormat format, const ParseOptions& opts = {});

/// Reads a file from disk, detecting the format unless one is given. For
/// WFDB either the .hea or the .dat path may be passed.
RawRecording read_recording(const std::filesystem::path& path,
                            std::optional<SourceFormat> format = std::nullopt,
                            const ParseOptions& opts = {});

std::optional<SourceFormat> format_from_name(std::string_view name);

// ---------------------------------------------------------------- export

enum class ExportWhat { raw, standard, median_beats, aligned, fiducials };
enum class ExportFormat { csv, npy, json };

std::optional<ExportWhat> export_what_from_name(std::string_view name);
std::optional<ExportFormat> export_format_from_name(std::string_view name);

struct ExportRequest {
    ExportWhat what;
    ExportFormat format;
};

/// Any lead-by-sample view that can be written out.
struct LeadTable {
    std::vector<std::string> lead_names;
    Matrix samples;
    double rate_hz = 0.0;
};

LeadTable table_of(const StandardEcg& ecg);
LeadTable table_of(const RawRecording& rec);
LeadTable table_of(const analysis::MedianBeat& beat);
LeadTable table_of(const analysis::AlignedEcg& aligned);

using ExportPayload = std::variant<LeadTable, analysis::FiducialMap>;

Bytes export_table(const LeadTable& table, ExportFormat format);
Bytes export_fiducials(const analysis::FiducialMap& fid, ExportFormat format);

/// Checks the request/payload pairing (fiducials only as csv/json, every
/// other view as a lead table) and serializes.
Bytes export_view(const ExportPayload& payload, const ExportRequest& req);

/// Low-level NPY writer: v1.0, little-endian float64, C order.
Bytes write_npy(const Matrix& m);

/// Parses the fiducial JSON document written by export_fiducials.
analysis::FiducialMap parse_fiducials_json(ByteView bytes);

}  // namespace ecgx::formats
