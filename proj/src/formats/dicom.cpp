#include <map>
#include <memory>

#include "formats/byte_reader.hpp"
#include "formats/common.hpp"

namespace ecgx::formats {

namespace {

using detail::ByteReader;

constexpr std::uint32_t tag(std::uint16_t group, std::uint16_t element) {
    return (static_cast<std::uint32_t>(group) << 16) | element;
}

constexpr std::uint32_t kItem = tag(0xFFFE, 0xE000);
constexpr std::uint32_t kItemEnd = tag(0xFFFE, 0xE00D);
constexpr std::uint32_t kSequenceEnd = tag(0xFFFE, 0xE0DD);
constexpr std::uint32_t kUndefined = 0xFFFFFFFF;
constexpr int kMaxDepth = 16;

struct Dataset;

struct Element {
    std::string vr;
    ByteView value;
    std::vector<Dataset> items;
};

struct Dataset {
    std::map<std::uint32_t, Element> elements;

    const Element* find(std::uint32_t t) const {
        auto it = elements.find(t);
        return it == elements.end() ? nullptr : &it->second;
    }
};

bool long_length_vr(const std::string& vr) {
    static const char* const kLong[] = {"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "SV", "UC", "UN", "UR", "UT", "UV"};
    for (const char* v : kLong)
        if (vr == v) return true;
    return false;
}

std::uint32_t read_tag(ByteReader& rd) {
    const std::uint16_t g = rd.u16();
    const std::uint16_t e = rd.u16();
    return tag(g, e);
}

Dataset parse_dataset(ByteReader& rd, std::size_t end, bool until_item_end, int depth);

std::vector<Dataset> parse_sequence(ByteReader& rd, std::uint32_t length, int depth) {
    if (depth > kMaxDepth) fail(ErrorCode::BadHeader, "DICOM sequences nested too deeply");
    std::vector<Dataset> items;
    const bool undefined = length == kUndefined;
    const std::size_t end = undefined ? rd.size() : rd.pos() + length;
    if (end > rd.size()) rd.truncated();
    while (rd.pos() < end) {
        const std::uint32_t t = read_tag(rd);
        const std::uint32_t len = rd.u32();
        if (t == kSequenceEnd) {
            if (!undefined) fail(ErrorCode::BadHeader, "sequence delimiter inside a defined-length sequence");
            return items;
        }
        if (t != kItem) fail(ErrorCode::BadHeader, "expected a sequence item");
        if (len == kUndefined) {
            items.push_back(parse_dataset(rd, rd.size(), true, depth + 1));
        } else {
            const std::size_t item_end = rd.pos() + len;
            if (item_end > end) rd.truncated();
            items.push_back(parse_dataset(rd, item_end, false, depth + 1));
        }
    }
    if (undefined) rd.truncated();
    return items;
}

Dataset parse_dataset(ByteReader& rd, std::size_t end, bool until_item_end, int depth) {
    Dataset ds;
    while (rd.pos() < end) {
        const std::uint32_t t = read_tag(rd);
        if ((t >> 16) == 0xFFFE) {
            const std::uint32_t len = rd.u32();
            if (t == kItemEnd && until_item_end && len == 0) return ds;
            fail(ErrorCode::BadHeader, "unexpected delimiter in dataset");
        }
        std::string vr = rd.take_string(2);
        if (!std::isupper(static_cast<unsigned char>(vr[0])) || !std::isupper(static_cast<unsigned char>(vr[1])))
            fail(ErrorCode::UnsupportedTransferSyntax, "dataset is not explicit VR little endian");
        std::uint32_t len = 0;
        if (long_length_vr(vr)) {
            rd.skip(2);
            len = rd.u32();
        } else {
            len = rd.u16();
        }
        Element el;
        el.vr = vr;
        if (vr == "SQ") {
            el.items = parse_sequence(rd, len, depth);
        } else if (len == kUndefined) {
            fail(ErrorCode::UnsupportedTransferSyntax, "encapsulated (undefined length) values are not supported");
        } else {
            el.value = rd.take(len);
        }
        ds.elements[t] = std::move(el);
    }
    if (until_item_end) rd.truncated();
    return ds;
}

std::string text_value(const Element* el) {
    if (el == nullptr) return {};
    return detail::trim(std::string_view(reinterpret_cast<const char*>(el->value.data()), el->value.size()));
}

std::optional<double> number_value(const Element* el) {
    if (el == nullptr) return std::nullopt;
    if (el->vr == "US" && el->value.size() >= 2) return el->value[0] | (el->value[1] << 8);
    if (el->vr == "UL" && el->value.size() >= 4)
        return static_cast<double>(static_cast<std::uint32_t>(detail::read_i32(el->value.data())));
    if (el->vr == "FD" && el->value.size() >= 8) return detail::read_f64(el->value.data());
    std::string text = text_value(el);
    // multi-valued strings: take the first value
    text = text.substr(0, text.find('\\'));
    double v = 0;
    if (!detail::parse_double(text, v)) fail(ErrorCode::BadHeader, "non-numeric value '" + text + "'");
    return v;
}

std::string code_of(const Element* seq, std::uint32_t which) {
    if (seq == nullptr || seq->items.empty()) return {};
    return text_value(seq->items.front().find(which));
}

}  // namespace

RawRecording parse_dicom(ByteView bytes) {
    ByteReader rd(bytes, ErrorCode::TruncatedInput, "dicom");
    rd.skip(128);
    if (rd.take_string(4) != "DICM") fail(ErrorCode::BadHeader, "missing DICM preamble marker");

    std::string transfer_syntax;
    while (rd.remaining() >= 4) {
        const std::size_t start = rd.pos();
        const std::uint32_t t = read_tag(rd);
        if ((t >> 16) != 0x0002) {
            rd.seek(start);
            break;
        }
        const std::string vr = rd.take_string(2);
        std::uint32_t len = 0;
        if (long_length_vr(vr)) {
            rd.skip(2);
            len = rd.u32();
        } else {
            len = rd.u16();
        }
        const auto value = rd.take(len);
        if (t == tag(0x0002, 0x0010)) transfer_syntax = detail::trim(std::string(value.begin(), value.end()));
    }
    if (transfer_syntax != "1.2.840.10008.1.2.1")
        fail(ErrorCode::UnsupportedTransferSyntax,
             "transfer syntax '" + transfer_syntax + "' is not explicit VR little endian");

    const Dataset ds = parse_dataset(rd, rd.size(), false, 0);
    const Element* waveforms = ds.find(tag(0x5400, 0x0100));
    if (waveforms == nullptr || waveforms->items.empty()) fail(ErrorCode::MissingWaveform, "no waveform sequence");
    const Dataset& wf = waveforms->items.front();

    const auto channels = number_value(wf.find(tag(0x003A, 0x0005)));
    const auto samples = number_value(wf.find(tag(0x003A, 0x0010)));
    const auto rate = number_value(wf.find(tag(0x003A, 0x001A)));
    const Element* data = wf.find(tag(0x5400, 0x1010));
    if (!channels || !samples || !rate || data == nullptr)
        fail(ErrorCode::MissingWaveform, "waveform item lacks channel count, sample count, rate or data");
    const auto bits = number_value(wf.find(tag(0x5400, 0x1004)));
    const std::string interpretation = text_value(wf.find(tag(0x5400, 0x1006)));
    if (bits.value_or(0) != 16 || interpretation != "SS")
        fail(ErrorCode::UnsupportedBits, "only 16-bit signed (SS) waveform samples are supported");

    const auto n_ch = static_cast<std::size_t>(*channels);
    const auto n_s = static_cast<std::size_t>(*samples);
    if (n_ch == 0 || n_s == 0) fail(ErrorCode::MissingWaveform, "empty waveform");
    if (data->value.size() / 2 / n_ch < n_s) fail(ErrorCode::TruncatedInput, "waveform data shorter than declared");
    if (!(*rate > 0.0)) fail(ErrorCode::BadRate, "sampling frequency must be positive");

    RawRecording rec;
    rec.source_format = SourceFormat::dicom;
    rec.sampling_rate_hz = *rate;
    rec.samples = Matrix(n_ch, n_s);
    for (std::size_t t = 0; t < n_s; ++t)
        for (std::size_t c = 0; c < n_ch; ++c)
            rec.samples(c, t) = detail::read_i16(data->value.data() + 2 * (t * n_ch + c));

    const Element* defs = wf.find(tag(0x003A, 0x0200));
    std::vector<double> gains;
    std::vector<double> baselines;
    for (std::size_t c = 0; c < n_ch; ++c) {
        const Dataset* def = (defs != nullptr && c < defs->items.size()) ? &defs->items[c] : nullptr;
        std::string name;
        double sensitivity = 1.0, correction = 1.0, offset = 0.0, unit_factor = 1.0;
        if (def != nullptr) {
            name = code_of(def->find(tag(0x003A, 0x0208)), tag(0x0008, 0x0104));
            if (name.empty()) name = text_value(def->find(tag(0x003A, 0x0203)));
            sensitivity = number_value(def->find(tag(0x003A, 0x0210))).value_or(1.0);
            correction = number_value(def->find(tag(0x003A, 0x0212))).value_or(1.0);
            offset = number_value(def->find(tag(0x003A, 0x0213))).value_or(0.0);
            const std::string unit = code_of(def->find(tag(0x003A, 0x0211)), tag(0x0008, 0x0100));
            if (unit == "uV") unit_factor = 1e-3;
            else if (unit == "V") unit_factor = 1e3;
            else if (!unit.empty() && unit != "mV") fail(ErrorCode::BadHeader, "unsupported channel unit '" + unit + "'");
        }
        if (name.empty()) name = "ch" + std::to_string(c);
        const double mv_per_adu = sensitivity * correction * unit_factor;
        if (!(mv_per_adu > 0.0)) fail(ErrorCode::NonPositiveGain, "channel sensitivity must be positive");
        const double gain = 1.0 / mv_per_adu;
        rec.lead_names.push_back(name);
        gains.push_back(gain);
        // physical = adu * mv_per_adu + offset, i.e. baseline (adu) = -offset * gain
        baselines.push_back(offset == 0.0 ? 0.0 : -offset * unit_factor * gain);
    }
    detail::set_lead_gains(rec, gains, baselines);
    return rec;
}

}  // namespace ecgx::formats
