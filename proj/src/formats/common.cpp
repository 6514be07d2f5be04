#include "formats/common.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>

namespace ecgx::formats::detail {

std::vector<std::string> positional_lead_names(std::size_t n_leads) {
    std::vector<std::string> names;
    if (n_leads == 8) {
        names.assign(kEightLeadSet.begin(), kEightLeadSet.end());
    } else if (n_leads == 12 || n_leads == 15) {
        names.assign(kCanonicalLeads.begin(), kCanonicalLeads.end());
        if (n_leads == 15) names.insert(names.end(), {"VX", "VY", "VZ"});
    } else {
        for (std::size_t i = 0; i < n_leads; ++i) names.push_back("ch" + std::to_string(i));
    }
    return names;
}

bool is_lead_count(std::size_t n) { return n == 8 || n == 12 || n == 15; }

Matrix orient_leads_first(const Matrix& m) {
    if (is_lead_count(m.rows())) return m;
    if (is_lead_count(m.cols())) return m.transposed();
    fail(ErrorCode::AmbiguousShape, "neither axis has 8, 12 or 15 leads (shape " + std::to_string(m.rows()) +
                                        "x" + std::to_string(m.cols()) + ")");
}

void apply_rate(RawRecording& rec, const ParseOptions& opts, std::optional<double> from_file) {
    if (opts.rate_hz) {
        rec.sampling_rate_hz = *opts.rate_hz;
    } else if (from_file) {
        rec.sampling_rate_hz = *from_file;
    } else {
        rec.sampling_rate_hz = kDefaultRateHz;
        rec.metadata["warning"] = "sampling rate not stored in file; assumed 500 Hz";
    }
    if (!(rec.sampling_rate_hz > 0.0) || !std::isfinite(rec.sampling_rate_hz))
        fail(ErrorCode::BadRate, "sampling rate must be positive");
}

RawRecording positional_recording(Matrix leads_first, bool integer_samples, SourceFormat fmt,
                                  const ParseOptions& opts) {
    RawRecording rec;
    rec.lead_names = positional_lead_names(leads_first.rows());
    rec.samples = std::move(leads_first);
    rec.source_format = fmt;
    rec.metadata[std::string(kUnitsKey)] = integer_samples ? "adu" : "mV";
    apply_rate(rec, opts);
    return rec;
}

void set_lead_gains(RawRecording& rec, const std::vector<double>& gains,
                    const std::vector<double>& baselines) {
    for (double g : gains)
        if (!(g > 0.0) || !std::isfinite(g)) fail(ErrorCode::NonPositiveGain, "channel gain must be positive");
    const bool uniform =
        !gains.empty() && std::all_of(gains.begin(), gains.end(), [&](double g) { return g == gains.front(); });
    std::string header_baselines;
    for (std::size_t r = 0; r < rec.samples.rows(); ++r) {
        const double b = baselines.empty() ? 0.0 : baselines[r];
        const double scale = uniform ? 1.0 : 1.0 / gains[r];
        for (double& v : rec.samples.row(r)) v = (v - b) * scale;
        char buf[32];
        const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, b);
        header_baselines += (r ? "," : "") + std::string(buf, end);
    }
    rec.baseline.clear();
    rec.metadata["adc_baseline"] = header_baselines;
    if (uniform) {
        rec.adc_gain = gains.front();
        rec.metadata[std::string(kUnitsKey)] = "adu";
    } else {
        rec.adc_gain = 1.0;
        rec.metadata[std::string(kUnitsKey)] = "mV";
        rec.metadata["mixed_gains"] = "converted to mV at load";
    }
}

bool parse_double(std::string_view text, double& out) {
    text = std::string_view(text.data(), text.size());
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
    while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
    if (!text.empty() && text.front() == '+') text.remove_prefix(1);
    if (text.empty()) return false;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    return ec == std::errc() && ptr == text.data() + text.size();
}

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && (std::isspace(static_cast<unsigned char>(s[e - 1])) || s[e - 1] == '\0')) --e;
    return std::string(s.substr(b, e - b));
}

}  // namespace ecgx::formats::detail

namespace ecgx::formats {

namespace {

std::string lower_ext(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext;
}

Bytes read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::NotFound, "cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

bool starts_with(ByteView b, std::string_view prefix, std::size_t offset = 0) {
    if (b.size() < offset + prefix.size()) return false;
    return std::equal(prefix.begin(), prefix.end(), b.begin() + static_cast<std::ptrdiff_t>(offset),
                      [](char c, std::uint8_t u) { return static_cast<std::uint8_t>(c) == u; });
}

}  // namespace

std::optional<SourceFormat> format_from_name(std::string_view name) {
    std::string n(name);
    for (char& c : n) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!n.empty() && n.front() == '.') n.erase(0, 1);
    if (n == "csv") return SourceFormat::csv;
    if (n == "npy") return SourceFormat::npy;
    if (n == "npz") return SourceFormat::npz;
    if (n == "wfdb" || n == "dat" || n == "hea") return SourceFormat::wfdb;
    if (n == "dicom" || n == "dcm") return SourceFormat::dicom;
    if (n == "mat") return SourceFormat::mat;
    if (n == "xml") return SourceFormat::xml;
    if (n == "json") return SourceFormat::json;
    return std::nullopt;
}

FormatDescriptor detect_format(ByteView bytes, std::string_view filename_hint) {
    if (bytes.empty()) fail(ErrorCode::UnknownFormat, "empty input");
    if (starts_with(bytes, "\x93NUMPY")) return {SourceFormat::npy, DetectedBy::magic_bytes};
    if (starts_with(bytes, "PK\x03\x04")) return {SourceFormat::npz, DetectedBy::magic_bytes};
    if (starts_with(bytes, "DICM", 128)) return {SourceFormat::dicom, DetectedBy::magic_bytes};
    if (starts_with(bytes, "MATLAB ")) return {SourceFormat::mat, DetectedBy::magic_bytes};

    const std::filesystem::path hint(filename_hint);
    const std::string ext = lower_ext(hint);
    // WFDB sample files are arbitrary binary; never sniff text markers in them.
    if (ext == ".hea" || ext == ".dat") return {SourceFormat::wfdb, DetectedBy::extension};

    std::size_t i = starts_with(bytes, "\xEF\xBB\xBF") ? 3 : 0;
    while (i < bytes.size() && std::isspace(bytes[i])) ++i;
    if (i < bytes.size() && bytes[i] == '<') return {SourceFormat::xml, DetectedBy::magic_bytes};
    if (i < bytes.size() && bytes[i] == '{') return {SourceFormat::json, DetectedBy::magic_bytes};

    if (auto f = format_from_name(ext); f && !ext.empty()) return {*f, DetectedBy::extension};
    fail(ErrorCode::UnknownFormat, "cannot determine format of '" + std::string(filename_hint) + "'");
}

RawRecording parse(ByteView bytes, SourceFormat format, const ParseOptions& opts) {
    switch (format) {
        case SourceFormat::csv: return parse_csv(bytes, opts);
        case SourceFormat::npy: return parse_npy(bytes, opts);
        case SourceFormat::npz: return parse_npz(bytes, opts);
        case SourceFormat::dicom: return parse_dicom(bytes);
        case SourceFormat::mat: return parse_mat(bytes, opts);
        case SourceFormat::xml: return parse_xml(bytes);
        case SourceFormat::json: return parse_json(bytes);
        case SourceFormat::wfdb: break;
    }
    fail(ErrorCode::UnsupportedCombination, "WFDB records need both the .hea and .dat files");
}

RawRecording read_recording(const std::filesystem::path& path, std::optional<SourceFormat> format,
                            const ParseOptions& opts) {
    const Bytes bytes = read_all(path);
    const SourceFormat fmt = format ? *format : detect_format(bytes, path.filename().string()).format;
    if (fmt != SourceFormat::wfdb) return parse(bytes, fmt, opts);

    auto header_path = path;
    header_path.replace_extension(".hea");
    const Bytes header = lower_ext(path) == ".hea" ? bytes : read_all(header_path);
    // The sample file is named by the first signal line of the header.
    std::string text(header.begin(), header.end());
    std::filesystem::path dat_path = header_path;
    dat_path.replace_extension(".dat");
    std::size_t line_start = 0;
    int data_lines = 0;
    while (line_start < text.size()) {
        std::size_t end = text.find('\n', line_start);
        if (end == std::string::npos) end = text.size();
        const std::string line = detail::trim(std::string_view(text).substr(line_start, end - line_start));
        line_start = end + 1;
        if (line.empty() || line.front() == '#') continue;
        if (++data_lines == 2) {
            const std::string file = line.substr(0, line.find_first_of(" \t"));
            dat_path = header_path.parent_path() / file;
            break;
        }
    }
    return parse_wfdb(header, read_all(dat_path));
}

}  // namespace ecgx::formats
