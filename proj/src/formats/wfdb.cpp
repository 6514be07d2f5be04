#include <sstream>

#include "formats/byte_reader.hpp"
#include "formats/common.hpp"

namespace ecgx::formats {

namespace {

struct SignalSpec {
    std::string file;
    double gain = 200.0;  // WFDB default when unspecified
    double baseline = 0.0;
    std::string units = "mV";
    std::string description;
};

double number_or(const std::string& text, double fallback, const char* what) {
    if (text.empty()) return fallback;
    double v = 0;
    if (!detail::parse_double(text, v)) fail(ErrorCode::BadHeader, std::string("bad ") + what + " '" + text + "'");
    return v;
}

SignalSpec parse_signal_line(const std::string& line, int index) {
    std::istringstream in(line);
    std::vector<std::string> tok;
    std::string t;
    while (in >> t) tok.push_back(t);
    if (tok.size() < 2) fail(ErrorCode::BadHeader, "signal line " + std::to_string(index) + " is incomplete");

    SignalSpec s;
    s.file = tok[0];
    if (tok[1] != "16")
        fail(ErrorCode::UnsupportedWfdbFormat, "signal " + std::to_string(index) + " uses format '" + tok[1] +
                                                   "'; only format 16 is supported");
    bool explicit_baseline = false;
    if (tok.size() > 2) {
        // gain[(baseline)][/units]
        std::string spec = tok[2];
        if (const auto slash = spec.find('/'); slash != std::string::npos) {
            s.units = spec.substr(slash + 1);
            spec.erase(slash);
        }
        if (const auto open = spec.find('('); open != std::string::npos) {
            const auto close = spec.find(')', open);
            if (close == std::string::npos) fail(ErrorCode::BadHeader, "unterminated baseline in '" + tok[2] + "'");
            s.baseline = number_or(spec.substr(open + 1, close - open - 1), 0.0, "baseline");
            explicit_baseline = true;
            spec.erase(open);
        }
        s.gain = number_or(spec, 200.0, "gain");
        if (s.gain == 0.0) s.gain = 200.0;
    }
    if (!explicit_baseline && tok.size() > 4) s.baseline = number_or(tok[4], 0.0, "ADC zero");
    for (std::size_t i = 8; i < tok.size(); ++i) s.description += (i > 8 ? " " : "") + tok[i];
    if (s.description.empty()) s.description = "sig" + std::to_string(index);

    if (s.units == "uV") s.gain *= 1000.0;
    else if (s.units == "V") s.gain /= 1000.0;
    else if (s.units != "mV") fail(ErrorCode::BadHeader, "unsupported physical unit '" + s.units + "'");
    return s;
}

}  // namespace

RawRecording parse_wfdb(ByteView header_bytes, ByteView dat_bytes) {
    std::vector<std::string> lines;
    {
        std::istringstream in(std::string(header_bytes.begin(), header_bytes.end()));
        std::string line;
        while (std::getline(in, line)) {
            line = detail::trim(line);
            if (!line.empty() && line.front() != '#') lines.push_back(line);
        }
    }
    if (lines.empty()) fail(ErrorCode::BadHeader, "empty WFDB header");

    std::istringstream rec_line(lines.front());
    std::string name, n_sig_text, fs_text, n_samp_text;
    rec_line >> name >> n_sig_text >> fs_text >> n_samp_text;
    if (name.find('/') != std::string::npos)
        fail(ErrorCode::UnsupportedWfdbFormat, "multi-segment records are not supported");
    const double n_sig_d = number_or(n_sig_text, -1, "signal count");
    if (n_sig_d < 1 || n_sig_d > 64 || n_sig_d != static_cast<double>(static_cast<int>(n_sig_d)))
        fail(ErrorCode::BadHeader, "bad signal count '" + n_sig_text + "'");
    const auto n_sig = static_cast<std::size_t>(n_sig_d);
    // "500/1000(0)" style counter frequencies follow the sampling rate.
    const double fs = number_or(fs_text.substr(0, fs_text.find_first_of("/(")), 250.0, "sampling frequency");
    if (!(fs > 0.0)) fail(ErrorCode::BadRate, "sampling frequency must be positive");

    if (lines.size() < n_sig + 1)
        fail(ErrorCode::HeaderMismatch, "header declares " + std::to_string(n_sig) + " signals but lists " +
                                            std::to_string(lines.size() - 1));
    std::vector<SignalSpec> specs;
    for (std::size_t i = 0; i < n_sig; ++i) {
        specs.push_back(parse_signal_line(lines[i + 1], static_cast<int>(i)));
        if (specs.back().file != specs.front().file)
            fail(ErrorCode::UnsupportedWfdbFormat, "signals spread over several sample files");
    }

    const std::size_t frame = 2 * n_sig;
    std::size_t n_samples = 0;
    if (!n_samp_text.empty()) {
        const double ns = number_or(n_samp_text, 0, "sample count");
        if (ns < 0) fail(ErrorCode::BadHeader, "negative sample count");
        n_samples = static_cast<std::size_t>(ns);
        if (n_samples * frame != dat_bytes.size())
            fail(ErrorCode::HeaderMismatch, "header expects " + std::to_string(n_samples * frame) +
                                                " data bytes, file has " + std::to_string(dat_bytes.size()));
    } else {
        if (dat_bytes.size() % frame != 0) fail(ErrorCode::HeaderMismatch, "data length is not a whole number of frames");
        n_samples = dat_bytes.size() / frame;
    }
    if (n_samples == 0) fail(ErrorCode::HeaderMismatch, "record holds no samples");

    RawRecording rec;
    rec.source_format = SourceFormat::wfdb;
    rec.sampling_rate_hz = fs;
    rec.samples = Matrix(n_sig, n_samples);
    for (std::size_t t = 0; t < n_samples; ++t)
        for (std::size_t s = 0; s < n_sig; ++s)
            rec.samples(s, t) = detail::read_i16(dat_bytes.data() + t * frame + 2 * s);
    std::vector<double> gains;
    std::vector<double> baselines;
    for (const auto& s : specs) {
        rec.lead_names.push_back(s.description);
        gains.push_back(s.gain);
        baselines.push_back(s.baseline);
    }
    detail::set_lead_gains(rec, gains, baselines);
    rec.metadata["record_name"] = name;
    return rec;
}

}  // namespace ecgx::formats
