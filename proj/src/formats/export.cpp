#include <charconv>
#include <sstream>

#include "json.hpp"

#include "formats/byte_reader.hpp"
#include "formats/common.hpp"

namespace ecgx::formats {

namespace {

std::vector<std::string> canonical_names() { return {kCanonicalLeads.begin(), kCanonicalLeads.end()}; }

// Shortest text that parses back to the same double.
void append_number(std::string& out, double v) {
    char buf[32];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, end);
}

Bytes to_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

void append_rate_comment(std::string& out, double rate_hz) {
    out += "# rate_hz=";
    append_number(out, rate_hz);
    out += '\n';
}

}  // namespace

std::optional<ExportWhat> export_what_from_name(std::string_view name) {
    if (name == "raw") return ExportWhat::raw;
    if (name == "standard") return ExportWhat::standard;
    if (name == "median_beats" || name == "median") return ExportWhat::median_beats;
    if (name == "aligned") return ExportWhat::aligned;
    if (name == "fiducials") return ExportWhat::fiducials;
    return std::nullopt;
}

std::optional<ExportFormat> export_format_from_name(std::string_view name) {
    if (name == "csv") return ExportFormat::csv;
    if (name == "npy") return ExportFormat::npy;
    if (name == "json") return ExportFormat::json;
    return std::nullopt;
}

LeadTable table_of(const StandardEcg& ecg) { return {canonical_names(), ecg.samples(), StandardEcg::rate_hz()}; }
LeadTable table_of(const RawRecording& rec) { return {rec.lead_names, rec.samples, rec.sampling_rate_hz}; }
LeadTable table_of(const analysis::MedianBeat& beat) { return {canonical_names(), beat.samples, kStandardRateHz}; }
LeadTable table_of(const analysis::AlignedEcg& aligned) {
    return {canonical_names(), aligned.samples, kStandardRateHz};
}

Bytes write_npy(const Matrix& m) {
    std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(m.rows()) + ", " +
                         std::to_string(m.cols()) + "), }";
    // magic (6) + version (2) + length (2) + header, padded with spaces to 64 bytes
    const std::size_t unpadded = 10 + header.size() + 1;
    header.append((64 - unpadded % 64) % 64, ' ');
    header += '\n';
    std::string out = "\x93NUMPY";
    out += '\x01';
    out += '\x00';
    out += static_cast<char>(header.size() & 0xFF);
    out += static_cast<char>((header.size() >> 8) & 0xFF);
    out += header;
    for (double v : m.data()) detail::append_f64(out, v);
    return to_bytes(out);
}

Bytes export_table(const LeadTable& table, ExportFormat format) {
    if (table.lead_names.size() != table.samples.rows())
        fail(ErrorCode::InvalidOptions, "lead names do not match the sample rows");
    switch (format) {
        case ExportFormat::npy: return write_npy(table.samples);
        case ExportFormat::json: {
            nlohmann::json doc;
            doc["leads"] = table.lead_names;
            doc["rate_hz"] = table.rate_hz;
            auto& rows = doc["samples"] = nlohmann::json::array();
            for (std::size_t r = 0; r < table.samples.rows(); ++r) rows.push_back(table.samples.row_copy(r));
            return to_bytes(doc.dump());
        }
        case ExportFormat::csv: break;
    }
    std::string out;
    append_rate_comment(out, table.rate_hz);
    for (std::size_t i = 0; i < table.lead_names.size(); ++i) {
        if (i) out += ',';
        out += table.lead_names[i];
    }
    out += '\n';
    for (std::size_t c = 0; c < table.samples.cols(); ++c) {
        for (std::size_t r = 0; r < table.samples.rows(); ++r) {
            if (r) out += ',';
            append_number(out, table.samples(r, c));
        }
        out += '\n';
    }
    return to_bytes(out);
}

Bytes export_fiducials(const analysis::FiducialMap& fid, ExportFormat format) {
    if (format == ExportFormat::npy) fail(ErrorCode::UnsupportedCombination, "fiducials cannot be exported as npy");
    if (format == ExportFormat::json) {
        nlohmann::json doc;
        doc["rate_hz"] = fid.rate_hz;
        doc["r_peaks"] = fid.r_peaks;
        doc["qrs_onsets"] = fid.qrs_onsets;
        doc["qrs_offsets"] = fid.qrs_offsets;
        return to_bytes(doc.dump());
    }
    const bool bounds = !fid.qrs_onsets.empty();
    std::string out;
    append_rate_comment(out, fid.rate_hz);
    out += bounds ? "beat,r_peak,qrs_onset,qrs_offset\n" : "beat,r_peak\n";
    for (std::size_t i = 0; i < fid.r_peaks.size(); ++i) {
        out += std::to_string(i) + ',' + std::to_string(fid.r_peaks[i]);
        if (bounds) out += ',' + std::to_string(fid.qrs_onsets[i]) + ',' + std::to_string(fid.qrs_offsets[i]);
        out += '\n';
    }
    return to_bytes(out);
}

Bytes export_view(const ExportPayload& payload, const ExportRequest& req) {
    const bool wants_fiducials = req.what == ExportWhat::fiducials;
    if (const auto* fid = std::get_if<analysis::FiducialMap>(&payload)) {
        if (!wants_fiducials) fail(ErrorCode::UnsupportedCombination, "payload holds fiducials, not a lead table");
        return export_fiducials(*fid, req.format);
    }
    if (wants_fiducials) fail(ErrorCode::UnsupportedCombination, "fiducials requested for a lead table payload");
    return export_table(std::get<LeadTable>(payload), req.format);
}

analysis::FiducialMap parse_fiducials_json(ByteView bytes) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::MalformedJson, e.what());
    }
    return detail::guarded(ErrorCode::MalformedJson, "fiducials", [&] {
        analysis::FiducialMap fid;
        fid.rate_hz = doc.at("rate_hz").get<double>();
        fid.r_peaks = doc.at("r_peaks").get<std::vector<std::size_t>>();
        fid.qrs_onsets = doc.value("qrs_onsets", std::vector<std::size_t>{});
        fid.qrs_offsets = doc.value("qrs_offsets", std::vector<std::size_t>{});
        return fid;
    });
}

}  // namespace ecgx::formats
