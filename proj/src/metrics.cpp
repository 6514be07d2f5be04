#include "ecgx/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "ecgx/error.hpp"

#ifndef ECGX_LABELMAP_DIR
#define ECGX_LABELMAP_DIR "data/labelmaps"
#endif

namespace ecgx::metrics {

namespace {

double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

std::string strip(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string icd_key(std::string_view code) {
    std::string out;
    for (char c : code)
        if (c != '.' && !std::isspace(static_cast<unsigned char>(c)))
            out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    return out;
}

Vocab parse_vocab(std::string_view s, std::size_t line) {
    if (s == "icd10") return Vocab::icd10;
    if (s == "physionet") return Vocab::physionet;
    if (s == "edms") return Vocab::edms;
    if (s == "ptbxl") return Vocab::ptbxl;
    fail(ErrorCode::InvalidOptions, "label map line " + std::to_string(line) + ": unknown vocabulary '" +
                                        std::string(s) + "'");
}

// Length of the match, 0 when the rule does not apply.
std::size_t match_length(const LabelRule& rule, std::string_view code) {
    if (rule.vocab == Vocab::icd10) {
        const std::string key = icd_key(code);
        const std::string prefix = icd_key(rule.code);
        return key.starts_with(prefix) ? prefix.size() : 0;
    }
    return code == rule.code ? rule.code.size() : 0;
}

bool in_sections(const std::string& section, const std::vector<std::string>& sections) {
    return sections.empty() || std::find(sections.begin(), sections.end(), section) != sections.end();
}

}  // namespace

F1Report f1_scores(const std::vector<LabelSet>& truth, const std::vector<LabelSet>& pred,
                   const std::vector<std::string>& classes) {
    if (truth.size() != pred.size())
        fail(ErrorCode::LengthMismatch, "truth has " + std::to_string(truth.size()) + " samples, predictions " +
                                            std::to_string(pred.size()));
    std::map<std::string, std::size_t> index;
    for (std::size_t c = 0; c < classes.size(); ++c)
        if (!index.emplace(classes[c], c).second) fail(ErrorCode::InvalidOptions, "duplicate class " + classes[c]);

    auto indicator = [&](const LabelSet& labels) {
        std::vector<bool> on(classes.size(), false);
        for (const auto& l : labels) {
            const auto it = index.find(l);
            if (it == index.end()) fail(ErrorCode::InvalidOptions, "label '" + l + "' is not a known class");
            on[it->second] = true;
        }
        return on;
    };

    F1Report rep;
    rep.per_class.resize(classes.size());
    for (std::size_t c = 0; c < classes.size(); ++c) rep.per_class[c].name = classes[c];
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto t = indicator(truth[i]);
        const auto p = indicator(pred[i]);
        for (std::size_t c = 0; c < classes.size(); ++c) {
            auto& s = rep.per_class[c];
            if (t[c] && p[c]) ++s.tp;
            else if (!t[c] && p[c]) ++s.fp;
            else if (t[c] && !p[c]) ++s.fn;
            else ++s.tn;
        }
    }
    double weighted_sum = 0.0;
    std::size_t total_support = 0;
    for (auto& s : rep.per_class) {
        s.support = s.tp + s.fn;
        s.precision = ratio(s.tp, s.tp + s.fp);
        s.recall = ratio(s.tp, s.tp + s.fn);
        s.f1 = ratio(2 * s.tp, 2 * s.tp + s.fp + s.fn);
        rep.macro += s.f1;
        weighted_sum += s.f1 * static_cast<double>(s.support);
        total_support += s.support;
    }
    if (!classes.empty()) rep.macro /= static_cast<double>(classes.size());
    rep.weighted = total_support == 0 ? 0.0 : weighted_sum / static_cast<double>(total_support);
    return rep;
}

F1Report f1_scores(const std::vector<std::string>& truth, const std::vector<std::string>& pred,
                   const std::vector<std::string>& classes) {
    auto wrap = [](const std::vector<std::string>& v) {
        std::vector<LabelSet> out;
        out.reserve(v.size());
        for (const auto& s : v) out.push_back({s});
        return out;
    };
    return f1_scores(wrap(truth), wrap(pred), classes);
}

double quantile(std::span<const double> values, double q) {
    if (values.empty()) fail(ErrorCode::TooFew, "quantile of an empty list");
    if (!(q >= 0.0 && q <= 1.0)) fail(ErrorCode::InvalidOptions, "quantile level must lie in [0, 1]");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

AggregateStats aggregate(std::span<const double> values) {
    if (values.size() < 2) fail(ErrorCode::TooFew, "aggregate needs at least 2 values");
    for (double v : values)
        if (!std::isfinite(v)) fail(ErrorCode::InvalidOptions, "aggregate values must be finite");
    const double n = static_cast<double>(values.size());
    AggregateStats s;
    s.average = std::accumulate(values.begin(), values.end(), 0.0) / n;
    s.median = quantile(values, 0.5);
    s.iqr = quantile(values, 0.75) - quantile(values, 0.25);
    double ss = 0.0;
    for (double v : values) ss += (v - s.average) * (v - s.average);
    const double sd = std::sqrt(ss / (n - 1.0));
    s.cv = s.average == 0.0 ? (sd == 0.0 ? 0.0 : INFINITY) : sd / s.average;
    return s;
}

LabelMap LabelMap::parse(std::string_view text, std::string name) {
    LabelMap m;
    m.name_ = std::move(name);
    std::string section = "default";
    std::istringstream in{std::string(text)};
    std::string raw;
    std::size_t line_no = 0;
    std::map<std::tuple<std::string, Vocab, std::string>, std::string> seen;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = strip(raw.substr(0, raw.find('#')));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                fail(ErrorCode::InvalidOptions, "label map line " + std::to_string(line_no) + ": bad section header");
            section = strip(std::string_view(line).substr(1, line.size() - 2));
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(strip(f));
        if (fields.size() != 3 || fields[1].empty() || fields[2].empty())
            fail(ErrorCode::InvalidOptions,
                 "label map line " + std::to_string(line_no) + ": expected 'vocab, code, class'");
        LabelRule r{parse_vocab(fields[0], line_no), section, fields[1], fields[2]};
        const auto key = std::make_tuple(section, r.vocab, r.vocab == Vocab::icd10 ? icd_key(r.code) : r.code);
        const auto [it, inserted] = seen.emplace(key, r.target);
        if (!inserted && it->second != r.target)
            fail(ErrorCode::InvalidOptions, "label map line " + std::to_string(line_no) + ": code " + r.code +
                                                " already maps to " + it->second);
        if (inserted) m.rules_.push_back(std::move(r));
    }
    return m;
}

LabelMap LabelMap::load(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) fail(ErrorCode::InvalidOptions, "cannot open label map " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), file.stem().string());
}

std::vector<std::string> LabelMap::sections() const {
    std::vector<std::string> out;
    for (const auto& r : rules_)
        if (std::find(out.begin(), out.end(), r.section) == out.end()) out.push_back(r.section);
    return out;
}

std::vector<std::string> LabelMap::targets(const std::vector<std::string>& sections) const {
    std::set<std::string> out;
    for (const auto& r : rules_)
        if (in_sections(r.section, sections)) out.insert(r.target);
    return {out.begin(), out.end()};
}

LabelSet LabelMap::map_code(std::string_view code, const std::vector<std::string>& sections) const {
    std::map<std::string, std::pair<std::size_t, const LabelRule*>> best;
    for (const auto& r : rules_) {
        if (!in_sections(r.section, sections)) continue;
        const std::size_t len = match_length(r, code);
        if (len == 0) continue;
        auto& slot = best[r.section];
        if (len > slot.first) slot = {len, &r};
    }
    std::set<std::string> out;
    for (const auto& [section, hit] : best) out.insert(hit.second->target);
    if (out.empty()) {
        const auto t = targets(sections);
        if (std::binary_search(t.begin(), t.end(), std::string(code))) out.insert(std::string(code));
    }
    return {out.begin(), out.end()};
}

std::vector<LabelSet> map_labels(const std::vector<LabelSet>& codes, const LabelMap& map,
                                 const std::vector<std::string>& sections) {
    std::vector<LabelSet> out;
    out.reserve(codes.size());
    for (const auto& sample : codes) {
        std::set<std::string> classes;
        for (const auto& c : sample)
            for (auto& t : map.map_code(c, sections)) classes.insert(std::move(t));
        out.emplace_back(classes.begin(), classes.end());
    }
    return out;
}

std::filesystem::path labelmap_path(std::string_view name_or_path) {
    if (name_or_path == "icd10" || name_or_path == "physionet" || name_or_path == "edms") {
        const char* env = std::getenv("ECGX_LABELMAP_DIR");
        const std::filesystem::path dir = env && *env ? env : ECGX_LABELMAP_DIR;
        return dir / (std::string(name_or_path) + ".txt");
    }
    return std::filesystem::path(name_or_path);
}

DatasetEvaluation evaluate_dataset(const std::vector<LabelSet>& truth, const Matrix& probs,
                                   const std::vector<std::string>& classes, double threshold) {
    if (probs.rows() != truth.size())
        fail(ErrorCode::LengthMismatch, std::to_string(truth.size()) + " truth rows but " +
                                            std::to_string(probs.rows()) + " probability rows");
    if (probs.cols() != classes.size() && !(probs.rows() == 0))
        fail(ErrorCode::LengthMismatch, std::to_string(classes.size()) + " classes but " +
                                            std::to_string(probs.cols()) + " probability columns");
    DatasetEvaluation ev;
    ev.predictions.resize(truth.size());
    for (std::size_t r = 0; r < probs.rows(); ++r)
        for (std::size_t c = 0; c < classes.size(); ++c)
            if (probs(r, c) >= threshold) ev.predictions[r].push_back(classes[c]);
    ev.f1 = f1_scores(truth, ev.predictions, classes);
    return ev;
}

}  // namespace ecgx::metrics
