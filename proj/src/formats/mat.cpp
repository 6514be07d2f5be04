#include <cctype>

#include "formats/byte_reader.hpp"
#include "formats/common.hpp"

namespace ecgx::formats {

namespace {

using detail::ByteReader;

enum : std::uint32_t {
    miINT8 = 1, miUINT8, miINT16, miUINT16, miINT32, miUINT32, miSINGLE,
    miDOUBLE = 9, miINT64 = 12, miUINT64, miMATRIX, miCOMPRESSED,
};

enum : std::uint32_t { mxDOUBLE_CLASS = 6, mxUINT64_CLASS = 15 };

struct Variable {
    std::string name;
    std::vector<std::size_t> dims;
    std::vector<double> values;  // column-major
    bool integer = false;
};

struct Tagged {
    std::uint32_t type = 0;
    ByteView data;
};

Tagged next_tagged(ByteReader& rd) {
    const std::uint32_t first = rd.u32();
    Tagged t;
    if ((first >> 16) != 0) {
        // small data element: 4 bytes of payload packed into the tag
        t.type = first & 0xFFFF;
        const std::size_t n = first >> 16;
        if (n > 4) fail(ErrorCode::BadHeader, "bad small MAT element");
        t.data = rd.take(4).first(n);
        return t;
    }
    t.type = first;
    const std::size_t n = rd.u32();
    t.data = rd.take(n);
    const std::size_t pad = (8 - n % 8) % 8;
    rd.skip(std::min(pad, rd.remaining()));
    return t;
}

std::vector<double> decode_numeric(const Tagged& t) {
    std::size_t width = 0;
    switch (t.type) {
        case miINT8: case miUINT8: width = 1; break;
        case miINT16: case miUINT16: width = 2; break;
        case miINT32: case miUINT32: case miSINGLE: width = 4; break;
        case miDOUBLE: case miINT64: case miUINT64: width = 8; break;
        default: fail(ErrorCode::BadHeader, "unexpected MAT data type " + std::to_string(t.type));
    }
    const std::size_t n = t.data.size() / width;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* p = t.data.data() + i * width;
        std::uint64_t u = 0;
        for (std::size_t b = 0; b < width; ++b) u |= static_cast<std::uint64_t>(p[b]) << (8 * b);
        switch (t.type) {
            case miINT8: out[i] = static_cast<std::int8_t>(u); break;
            case miUINT8: out[i] = static_cast<double>(u); break;
            case miINT16: out[i] = static_cast<std::int16_t>(u); break;
            case miUINT16: out[i] = static_cast<double>(u); break;
            case miINT32: out[i] = static_cast<std::int32_t>(u); break;
            case miUINT32: out[i] = static_cast<double>(u); break;
            case miSINGLE: out[i] = detail::read_f32(p); break;
            case miDOUBLE: out[i] = detail::read_f64(p); break;
            case miINT64: out[i] = static_cast<double>(static_cast<std::int64_t>(u)); break;
            default: out[i] = static_cast<double>(u); break;
        }
    }
    return out;
}

std::optional<Variable> parse_matrix(ByteView body) {
    ByteReader rd(body, ErrorCode::TruncatedInput, "mat matrix");
    const Tagged flags = next_tagged(rd);
    if (flags.type != miUINT32 || flags.data.size() < 8) fail(ErrorCode::BadHeader, "bad array flags");
    const std::uint32_t word = static_cast<std::uint32_t>(detail::read_i32(flags.data.data()));
    const std::uint32_t cls = word & 0xFF;
    const bool complex = (word & 0x0800) != 0;

    const Tagged dims = next_tagged(rd);
    if (dims.type != miINT32) fail(ErrorCode::BadHeader, "bad dimensions element");
    Variable v;
    for (std::size_t i = 0; i + 4 <= dims.data.size(); i += 4) {
        const auto d = detail::read_i32(dims.data.data() + i);
        if (d < 0) fail(ErrorCode::BadHeader, "negative dimension");
        v.dims.push_back(static_cast<std::size_t>(d));
    }
    const Tagged name = next_tagged(rd);
    v.name.assign(name.data.begin(), name.data.end());

    if (cls < mxDOUBLE_CLASS || cls > mxUINT64_CLASS || complex) return std::nullopt;
    v.integer = cls != mxDOUBLE_CLASS && cls != mxDOUBLE_CLASS + 1;
    v.values = decode_numeric(next_tagged(rd));
    std::size_t expected = 1;
    for (auto d : v.dims) expected *= d;
    if (v.values.size() != expected) fail(ErrorCode::TruncatedInput, "variable '" + v.name + "' data size mismatch");
    return v;
}

bool is_rate_name(std::string name) {
    for (char& c : name) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return name == "fs" || name == "freq" || name == "sampling_rate" || name == "sampling_frequency" ||
           name == "rate_hz" || name == "sfreq";
}

}  // namespace

RawRecording parse_mat(ByteView bytes, const ParseOptions& opts) {
    ByteReader rd(bytes, ErrorCode::TruncatedInput, "mat");
    const std::string text = rd.take_string(116);
    if (text.rfind("MATLAB", 0) != 0) fail(ErrorCode::BadHeader, "missing MATLAB header text");
    rd.skip(8);
    const std::uint16_t version = rd.u16();
    const std::string endian = rd.take_string(2);
    if (version == 0x0200 || text.find("MATLAB 7.3") == 0)
        fail(ErrorCode::UnsupportedMatVersion, "MAT v7.3 (HDF5) files are not supported");
    if (endian != "IM") fail(ErrorCode::UnsupportedMatVersion, "big-endian MAT files are not supported");
    if (version != 0x0100) fail(ErrorCode::UnsupportedMatVersion, "unknown MAT version " + std::to_string(version));

    std::vector<Variable> vars;
    while (rd.remaining() >= 8) {
        const Tagged el = next_tagged(rd);
        if (el.type == miCOMPRESSED)
            fail(ErrorCode::UnsupportedMatVersion, "compressed (v7) MAT variables are not supported");
        if (el.type != miMATRIX) continue;
        if (auto v = parse_matrix(el.data)) vars.push_back(std::move(*v));
    }

    std::optional<double> rate;
    const Variable* signal = nullptr;
    for (const auto& v : vars) {
        if (v.values.size() == 1 && is_rate_name(v.name)) rate = v.values.front();
        if (signal == nullptr && v.dims.size() == 2 && v.dims[0] > 1 && v.dims[1] > 1) signal = &v;
    }
    if (signal == nullptr) fail(ErrorCode::NoNumericVariable, "no 2-D numeric variable in MAT file");

    const std::size_t rows = signal->dims[0];
    const std::size_t cols = signal->dims[1];
    Matrix m(rows, cols);
    for (std::size_t c = 0; c < cols; ++c)
        for (std::size_t r = 0; r < rows; ++r) m(r, c) = signal->values[c * rows + r];

    RawRecording rec;
    Matrix leads = detail::orient_leads_first(m);
    rec.lead_names = detail::positional_lead_names(leads.rows());
    rec.samples = std::move(leads);
    rec.source_format = SourceFormat::mat;
    rec.metadata[std::string(kUnitsKey)] = signal->integer ? "adu" : "mV";
    rec.metadata["variable"] = signal->name;
    detail::apply_rate(rec, opts, rate);
    return rec;
}

}  // namespace ecgx::formats
