#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include "json.hpp"

#include "formats/common.hpp"

namespace ecgx::formats {

namespace {

using detail::parse_double;
using detail::trim;

std::vector<std::string> split(const std::string& line, char delim) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, delim)) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == delim) cells.emplace_back();
    return cells;
}

bool all_lead_names(const std::vector<std::string>& cells) {
    for (const auto& c : cells)
        if (!canonical_lead_index(c) && !is_auxiliary_lead(c)) return false;
    return !cells.empty();
}

std::string text_of(ByteView bytes) {
    std::string text(bytes.begin(), bytes.end());
    if (text.rfind("\xEF\xBB\xBF", 0) == 0) text.erase(0, 3);
    return text;
}

}  // namespace

RawRecording parse_csv(ByteView bytes, const ParseOptions& opts) {
    const std::string text = text_of(bytes);
    std::vector<std::string> lines;
    std::optional<double> file_rate;
    {
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '#') {
                // "# key=value" comments carry metadata; rate_hz is the one we read.
                const auto eq = line.find('=');
                if (eq != std::string::npos && trim(line.substr(1, eq - 1)) == "rate_hz") {
                    double r = 0;
                    if (!parse_double(line.substr(eq + 1), r))
                        fail(ErrorCode::MalformedCsv, "bad rate_hz comment");
                    file_rate = r;
                }
                continue;
            }
            lines.push_back(line);
        }
    }
    if (lines.empty()) fail(ErrorCode::MalformedCsv, "no data rows");

    char delim = ',';
    if (lines.front().find(';') != std::string::npos) delim = ';';
    else if (lines.front().find(',') == std::string::npos && lines.front().find('\t') != std::string::npos)
        delim = '\t';

    std::vector<std::string> header;
    {
        auto first = split(lines.front(), delim);
        double dummy = 0;
        const bool numeric = std::all_of(first.begin(), first.end(),
                                         [&](const std::string& c) { return parse_double(c, dummy); });
        if (!numeric) {
            header = std::move(first);
            lines.erase(lines.begin());
        }
    }
    if (lines.empty()) fail(ErrorCode::MalformedCsv, "header without data rows");

    const std::size_t n_cols = split(lines.front(), delim).size();
    Matrix by_row(lines.size(), n_cols);
    for (std::size_t r = 0; r < lines.size(); ++r) {
        const auto cells = split(lines[r], delim);
        if (cells.size() != n_cols)
            fail(ErrorCode::MalformedCsv, "row " + std::to_string(r + 1) + " has " +
                                              std::to_string(cells.size()) + " cells, expected " +
                                              std::to_string(n_cols));
        for (std::size_t c = 0; c < n_cols; ++c)
            if (!parse_double(cells[c], by_row(r, c)))
                fail(ErrorCode::MalformedCsv, "non-numeric cell '" + cells[c] + "' in row " + std::to_string(r + 1));
    }

    RawRecording rec;
    rec.source_format = SourceFormat::csv;
    if (!header.empty()) {
        if (header.size() != n_cols) fail(ErrorCode::MalformedCsv, "header width differs from data width");
        if (all_lead_names(header)) {
            rec.lead_names = header;
        } else if (!detail::is_lead_count(n_cols)) {
            fail(ErrorCode::MalformedCsv, "header names are not leads and column count is not 8, 12 or 15");
        } else {
            rec.lead_names = detail::positional_lead_names(n_cols);
        }
        rec.samples = by_row.transposed();
    } else {
        if (!detail::is_lead_count(n_cols) && !detail::is_lead_count(lines.size()))
            fail(ErrorCode::MalformedCsv, "headerless CSV needs 8, 12 or 15 columns");
        rec.samples = detail::is_lead_count(n_cols) ? by_row.transposed() : by_row;
        rec.lead_names = detail::positional_lead_names(rec.samples.rows());
    }
    rec.metadata[std::string(kUnitsKey)] = "mV";
    detail::apply_rate(rec, opts, file_rate);
    return rec;
}

RawRecording parse_xml(ByteView bytes) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        std::istringstream in(text_of(bytes));
        pt::read_xml(in, tree, pt::xml_parser::trim_whitespace);
    } catch (const pt::xml_parser_error& e) {
        fail(ErrorCode::MalformedXml, e.what());
    }
    const pt::ptree* root = nullptr;
    for (const auto& [name, child] : tree) {
        if (name == "<xmlcomment>" || name == "<xmldecl>") continue;
        root = &child;
        break;
    }
    if (root == nullptr) fail(ErrorCode::MalformedXml, "document has no root element");

    RawRecording rec;
    rec.source_format = SourceFormat::xml;
    const auto attr = [](const pt::ptree& node, const char* key) -> std::optional<std::string> {
        if (auto v = node.get_optional<std::string>(std::string("<xmlattr>.") + key)) return trim(*v);
        return std::nullopt;
    };
    const auto rate_text = attr(*root, "rate");
    if (!rate_text) fail(ErrorCode::MissingRate, "root element has no rate attribute");
    if (!parse_double(*rate_text, rec.sampling_rate_hz) || !(rec.sampling_rate_hz > 0.0))
        fail(ErrorCode::BadRate, "rate attribute is not a positive number");
    if (auto g = attr(*root, "gain")) {
        double gain = 0;
        if (!parse_double(*g, gain)) fail(ErrorCode::MalformedNumbers, "gain attribute is not a number");
        if (!(gain > 0.0)) fail(ErrorCode::NonPositiveGain, "gain must be positive");
        rec.adc_gain = gain;
        rec.metadata[std::string(kUnitsKey)] = "adu";
    } else {
        rec.metadata[std::string(kUnitsKey)] = "mV";
    }

    std::vector<std::vector<double>> rows;
    for (const auto& [tag, node] : *root) {
        if (tag == "<xmlattr>" || tag == "<xmlcomment>") continue;
        std::string name = tag;
        if (auto n = attr(node, "name")) name = *n;
        else if (auto l = attr(node, "lead")) name = *l;
        if (!canonical_lead_index(name) && !is_auxiliary_lead(name))
            fail(ErrorCode::UnknownLeadElement, "element '" + name + "' is not a lead");
        std::string data = node.get_value<std::string>();
        for (char& c : data)
            if (c == ',' || c == ';') c = ' ';
        std::istringstream in(data);
        std::vector<double> values;
        std::string token;
        while (in >> token) {
            double v = 0;
            if (!parse_double(token, v)) fail(ErrorCode::MalformedNumbers, "lead " + name + ": bad number '" + token + "'");
            values.push_back(v);
        }
        if (values.empty()) fail(ErrorCode::MalformedNumbers, "lead " + name + " has no samples");
        if (!rows.empty() && values.size() != rows.front().size())
            fail(ErrorCode::MalformedNumbers, "lead " + name + " length differs from the other leads");
        rec.lead_names.push_back(name);
        rows.push_back(std::move(values));
    }
    if (rows.empty()) fail(ErrorCode::MalformedNumbers, "no lead elements");
    rec.samples = from_rows(rows);
    return rec;
}

RawRecording parse_json(ByteView bytes) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::MalformedJson, e.what());
    }
    return detail::guarded(ErrorCode::MalformedJson, "json recording", [&] {
        if (!doc.is_object() || !doc.contains("leads") || !doc.contains("samples") || !doc.contains("rate_hz"))
            fail(ErrorCode::MalformedJson, "expected keys leads, rate_hz, samples");
        RawRecording rec;
        rec.source_format = SourceFormat::json;
        rec.lead_names = doc.at("leads").get<std::vector<std::string>>();
        const auto rows = doc.at("samples").get<std::vector<std::vector<double>>>();
        if (rows.size() != rec.lead_names.size() || rows.empty())
            fail(ErrorCode::MalformedJson, "samples must hold one row per lead");
        for (const auto& r : rows)
            if (r.size() != rows.front().size()) fail(ErrorCode::MalformedJson, "ragged sample rows");
        rec.samples = from_rows(rows);
        rec.sampling_rate_hz = doc.at("rate_hz").get<double>();
        if (!(rec.sampling_rate_hz > 0.0)) fail(ErrorCode::BadRate, "rate_hz must be positive");
        if (doc.contains("adc_gain") && !doc["adc_gain"].is_null()) {
            rec.adc_gain = doc["adc_gain"].get<double>();
            rec.metadata[std::string(kUnitsKey)] = "adu";
        } else {
            rec.metadata[std::string(kUnitsKey)] = "mV";
        }
        return rec;
    });
}

}  // namespace ecgx::formats
