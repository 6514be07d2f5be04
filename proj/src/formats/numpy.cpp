#include <cctype>
#include <regex>

#include <zlib.h>

#include "formats/byte_reader.hpp"
#include "formats/common.hpp"

namespace ecgx::formats {

namespace {

using detail::ByteReader;

struct NpyArray {
    Matrix values;  // 2-D in C order
    bool integer = false;
};

std::string header_value(const std::string& header, const std::string& key) {
    const auto k = header.find("'" + key + "'");
    if (k == std::string::npos) fail(ErrorCode::BadHeader, "NPY header lacks '" + key + "'");
    const auto colon = header.find(':', k);
    if (colon == std::string::npos) fail(ErrorCode::BadHeader, "NPY header malformed near '" + key + "'");
    return detail::trim(std::string_view(header).substr(colon + 1));
}

NpyArray decode_npy(ByteView bytes) {
    ByteReader rd(bytes, ErrorCode::TruncatedInput, "npy");
    if (rd.take_string(6) != "\x93NUMPY") fail(ErrorCode::BadHeader, "missing NPY magic");
    const int major = rd.u8();
    rd.u8();
    std::size_t header_len = 0;
    if (major == 1) header_len = rd.u16();
    else if (major == 2 || major == 3) header_len = rd.u32();
    else fail(ErrorCode::BadHeader, "unsupported NPY version " + std::to_string(major));
    const std::string header = rd.take_string(header_len);

    std::string descr = header_value(header, "descr");
    if (descr.size() < 2 || (descr[0] != '\'' && descr[0] != '"')) fail(ErrorCode::BadHeader, "bad descr");
    descr = descr.substr(1, descr.find(descr[0], 1) - 1);

    const std::string fortran = header_value(header, "fortran_order");
    bool fortran_order = false;
    if (fortran.rfind("True", 0) == 0) fortran_order = true;
    else if (fortran.rfind("False", 0) != 0) fail(ErrorCode::BadHeader, "bad fortran_order");

    const std::string shape_text = header_value(header, "shape");
    if (shape_text.empty() || shape_text.front() != '(') fail(ErrorCode::BadHeader, "bad shape");
    const auto close = shape_text.find(')');
    if (close == std::string::npos) fail(ErrorCode::BadHeader, "bad shape");
    std::vector<std::size_t> shape;
    {
        static const std::regex number(R"(\d+)");
        const std::string inner = shape_text.substr(1, close - 1);
        for (auto it = std::sregex_iterator(inner.begin(), inner.end(), number); it != std::sregex_iterator(); ++it)
            shape.push_back(std::stoull(it->str()));
    }

    std::size_t item = 0;
    bool integer = true;
    if (descr == "<f8") { item = 8; integer = false; }
    else if (descr == "<f4") { item = 4; integer = false; }
    else if (descr == "<i2") item = 2;
    else if (descr == "<i4") item = 4;
    else fail(ErrorCode::UnsupportedDtype, "dtype '" + descr + "' is not one of <f8, <f4, <i2, <i4");

    if (shape.size() != 2) fail(ErrorCode::AmbiguousShape, "expected a 2-D array, got " + std::to_string(shape.size()) + "-D");
    const std::size_t rows = shape[0];
    const std::size_t cols = shape[1];
    if (rows == 0 || cols == 0 || rows > (std::size_t{1} << 31) / cols)
        fail(ErrorCode::AmbiguousShape, "empty or oversized array");
    const auto data = rd.take(rows * cols * item);

    NpyArray out{Matrix(rows, cols), integer};
    for (std::size_t i = 0; i < rows * cols; ++i) {
        const std::uint8_t* p = data.data() + i * item;
        double v = 0;
        if (descr == "<f8") v = detail::read_f64(p);
        else if (descr == "<f4") v = detail::read_f32(p);
        else if (descr == "<i2") v = detail::read_i16(p);
        else v = detail::read_i32(p);
        const std::size_t r = fortran_order ? i % rows : i / cols;
        const std::size_t c = fortran_order ? i / rows : i % cols;
        out.values(r, c) = v;
    }
    return out;
}

struct ZipEntry {
    std::string name;
    std::uint16_t method = 0;
    std::uint32_t crc = 0;
    std::uint64_t compressed = 0;
    std::uint64_t uncompressed = 0;
    std::uint64_t local_offset = 0;
};

std::vector<ZipEntry> zip_directory(ByteView bytes) {
    constexpr std::size_t kEocdSize = 22;
    if (bytes.size() < kEocdSize) fail(ErrorCode::TruncatedInput, "zip archive too short");
    std::size_t eocd = std::string::npos;
    const std::size_t lowest = bytes.size() > kEocdSize + 0xFFFF ? bytes.size() - kEocdSize - 0xFFFF : 0;
    for (std::size_t p = bytes.size() - kEocdSize + 1; p-- > lowest;) {
        if (bytes[p] == 0x50 && bytes[p + 1] == 0x4b && bytes[p + 2] == 0x05 && bytes[p + 3] == 0x06) {
            eocd = p;
            break;
        }
    }
    if (eocd == std::string::npos) fail(ErrorCode::TruncatedInput, "zip end-of-directory record not found");

    ByteReader rd(bytes, ErrorCode::TruncatedInput, "npz");
    rd.seek(eocd + 10);
    const std::size_t count = rd.u16();
    rd.u32();
    const std::size_t cd_offset = rd.u32();

    std::vector<ZipEntry> entries;
    rd.seek(cd_offset);
    for (std::size_t i = 0; i < count; ++i) {
        if (rd.u32() != 0x02014b50) fail(ErrorCode::BadHeader, "corrupt zip central directory");
        ZipEntry e;
        rd.skip(6);
        e.method = rd.u16();
        rd.skip(4);
        e.crc = rd.u32();
        e.compressed = rd.u32();
        e.uncompressed = rd.u32();
        const std::size_t name_len = rd.u16();
        const std::size_t extra_len = rd.u16();
        const std::size_t comment_len = rd.u16();
        rd.skip(8);
        e.local_offset = rd.u32();
        e.name = rd.take_string(name_len);
        ByteReader extra(rd.take(extra_len), ErrorCode::BadHeader, "zip extra field");
        while (extra.remaining() >= 4) {
            const auto id = extra.u16();
            const std::size_t len = extra.u16();
            ByteReader field(extra.take(len), ErrorCode::BadHeader, "zip64 field");
            if (id != 0x0001) continue;
            if (e.uncompressed == 0xFFFFFFFF) e.uncompressed = field.u64();
            if (e.compressed == 0xFFFFFFFF) e.compressed = field.u64();
            if (e.local_offset == 0xFFFFFFFF) e.local_offset = field.u64();
        }
        rd.skip(comment_len);
        entries.push_back(std::move(e));
    }
    return entries;
}

Bytes zip_extract(ByteView bytes, const ZipEntry& e) {
    ByteReader rd(bytes, ErrorCode::TruncatedInput, "npz");
    rd.seek(e.local_offset);
    if (rd.u32() != 0x04034b50) fail(ErrorCode::BadHeader, "corrupt zip local header");
    rd.skip(22);
    const std::size_t name_len = rd.u16();
    const std::size_t extra_len = rd.u16();
    rd.skip(name_len + extra_len);
    const auto data = rd.take(e.compressed);
    // deflate cannot expand more than ~1032:1; anything larger is a corrupt size field
    if (e.uncompressed > (std::uint64_t{1} << 31) || (e.method == 8 && e.uncompressed > 1032 * e.compressed + 64))
        fail(ErrorCode::BadHeader, "implausible zip entry size");

    Bytes out;
    if (e.method == 0) {
        out.assign(data.begin(), data.end());
    } else if (e.method == 8) {
        out.resize(e.uncompressed);
        z_stream zs{};
        if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) fail(ErrorCode::BadHeader, "zlib init failed");
        zs.next_in = const_cast<Bytef*>(data.data());
        zs.avail_in = static_cast<uInt>(data.size());
        zs.next_out = out.data();
        zs.avail_out = static_cast<uInt>(out.size());
        const int rc = inflate(&zs, Z_FINISH);
        const auto produced = zs.total_out;
        inflateEnd(&zs);
        if (rc != Z_STREAM_END || produced != e.uncompressed)
            fail(ErrorCode::TruncatedInput, "deflate stream of '" + e.name + "' is incomplete");
    } else {
        fail(ErrorCode::BadHeader, "zip compression method " + std::to_string(e.method) + " unsupported");
    }
    if (out.size() != e.uncompressed) fail(ErrorCode::TruncatedInput, "zip entry size mismatch");
    if (crc32(0L, out.data(), static_cast<uInt>(out.size())) != e.crc)
        fail(ErrorCode::BadHeader, "CRC mismatch in '" + e.name + "'");
    return out;
}

}  // namespace

RawRecording parse_npy(ByteView bytes, const ParseOptions& opts) {
    auto arr = decode_npy(bytes);
    return detail::positional_recording(detail::orient_leads_first(arr.values), arr.integer, SourceFormat::npy, opts);
}

RawRecording parse_npz(ByteView bytes, const ParseOptions& opts) {
    const auto entries = zip_directory(bytes);
    // Prefer the conventional array names, then the first 2-D array that fits.
    const ZipEntry* chosen = nullptr;
    for (const char* preferred : {"ecg.npy", "signal.npy", "data.npy", "x.npy", "arr_0.npy"}) {
        for (const auto& e : entries)
            if (e.name == preferred) chosen = &e;
        if (chosen) break;
    }
    std::optional<Error> first_error;
    const auto try_entry = [&](const ZipEntry& e) -> std::optional<RawRecording> {
        try {
            auto rec = parse_npy(zip_extract(bytes, e), opts);
            rec.source_format = SourceFormat::npz;
            rec.metadata["npz_key"] = e.name.substr(0, e.name.size() - 4);
            return rec;
        } catch (const Error& err) {
            if (!first_error) first_error = err;
            return std::nullopt;
        }
    };
    if (chosen) {
        if (auto rec = try_entry(*chosen)) return *rec;
        throw *first_error;
    }
    for (const auto& e : entries) {
        if (e.name.size() < 4 || e.name.substr(e.name.size() - 4) != ".npy") continue;
        if (auto rec = try_entry(e)) return *rec;
    }
    if (first_error) throw *first_error;
    fail(ErrorCode::AmbiguousShape, "archive holds no .npy arrays");
}

}  // namespace ecgx::formats
