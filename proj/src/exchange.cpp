#include "ecgx/exchange.hpp"

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <openssl/evp.h>

#include "httplib.h"
#include "json.hpp"

namespace ecgx::exchange {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'E', 'C', 'G', 'X', 'M', 'D', 'L', '1'};
constexpr const char* kManifestSuffix = ".manifest.json";

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool safe_component(std::string_view s) {
    if (s.empty() || s == "." || s == "..") return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    });
}

ModelKind parse_kind(const std::string& s) {
    if (s == "linear_head") return ModelKind::linear_head;
    if (s == "mlp") return ModelKind::mlp;
    if (s == "external_onnx") return ModelKind::external_onnx;
    fail(ErrorCode::InvalidOptions, "unknown model kind '" + s + "'");
}

const json& require(const json& doc, const char* key) {
    auto it = doc.find(key);
    if (it == doc.end() || it->is_null()) fail(ErrorCode::MissingField, std::string("manifest lacks '") + key + "'");
    return *it;
}

std::string require_string(const json& doc, const char* key) {
    const json& v = require(doc, key);
    if (!v.is_string()) fail(ErrorCode::InvalidOptions, std::string("manifest field '") + key + "' must be a string");
    return v.get<std::string>();
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorCode::NotFound, "cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// write to a sibling temp file and rename, so readers never see a partial file
void write_atomic(const fs::path& p, std::string_view bytes) {
    fs::path tmp = p;
    tmp += ".part";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::Internal, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(ErrorCode::Internal, "short write to " + tmp.string());
    }
    fs::rename(tmp, p);
}

// Process-wide mutex per directory plus flock for other processes.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) {
        fs::create_directories(dir);
        const std::string key = fs::weakly_canonical(dir).string();
        {
            static std::mutex registry_mutex;
            static std::map<std::string, std::unique_ptr<std::mutex>> registry;
            std::lock_guard g(registry_mutex);
            auto& slot = registry[key];
            if (!slot) slot = std::make_unique<std::mutex>();
            mutex_ = slot.get();
        }
        mutex_->lock();
        fd_ = ::open((dir / ".lock").c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
        if (fd_ >= 0) ::flock(fd_, LOCK_EX);
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
        }
        mutex_->unlock();
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::mutex* mutex_ = nullptr;
    int fd_ = -1;
};

// ---- little-endian float64 blocks ----

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
    const auto bits = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

struct Layer {
    const Matrix* w;
    const std::vector<double>* b;
};

std::vector<Layer> layers_of(const NativeModel& m) {
    std::vector<Layer> out;
    if (auto* h = std::get_if<finetune::LinearHead>(&m)) {
        out.push_back({&h->weights, &h->bias});
    } else {
        const auto& mlp = std::get<Mlp>(m);
        for (std::size_t l = 0; l < mlp.weights.size(); ++l) out.push_back({&mlp.weights[l], &mlp.biases[l]});
    }
    return out;
}

void check_mlp(const Mlp& m) {
    if (m.weights.empty() || m.weights.size() != m.biases.size())
        fail(ErrorCode::ShapeMismatch, "mlp needs one bias per weight matrix");
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        if (m.weights[l].rows() == 0 || m.weights[l].cols() == 0 || m.biases[l].size() != m.weights[l].rows())
            fail(ErrorCode::ShapeMismatch, "mlp layer " + std::to_string(l) + " has inconsistent shape");
        if (l > 0 && m.weights[l].cols() != m.weights[l - 1].rows())
            fail(ErrorCode::ShapeMismatch, "mlp layer " + std::to_string(l) + " input does not match previous output");
    }
    if (m.weights.back().rows() != m.class_names.size())
        fail(ErrorCode::ShapeMismatch, "mlp output width differs from class count");
}

// ---- WebDAV over httplib ----

struct Endpoint {
    std::string origin;  // scheme://host:port
    std::string base;    // collection path with trailing slash
};

Endpoint parse_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) fail(ErrorCode::InvalidOptions, "registry url needs a scheme: " + url);
    const std::string scheme = url.substr(0, scheme_end);
    if (scheme != "http") fail(ErrorCode::Unreachable, "only http registries are supported: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    Endpoint ep;
    ep.origin = url.substr(0, path_start);
    ep.base = path_start == std::string::npos ? "/" : url.substr(path_start);
    if (ep.base.back() != '/') ep.base.push_back('/');
    return ep;
}

std::string percent_decode(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%' && i + 2 < s.size() && std::isxdigit(static_cast<unsigned char>(s[i + 1])) &&
            std::isxdigit(static_cast<unsigned char>(s[i + 2]))) {
            out.push_back(static_cast<char>(std::stoi(std::string(s.substr(i + 1, 2)), nullptr, 16)));
            i += 2;
        } else {
            out.push_back(s[i]);
        }
    }
    return out;
}

class Dav {
public:
    explicit Dav(const ServerConfig& cfg) : ep_(parse_url(cfg.url)), client_(ep_.origin) {
        if (!cfg.user.empty() || !cfg.password.empty()) client_.set_basic_auth(cfg.user, cfg.password);
        const auto sec = std::chrono::duration_cast<std::chrono::seconds>(cfg.timeout);
        const auto usec = std::chrono::duration_cast<std::chrono::microseconds>(cfg.timeout - sec);
        client_.set_connection_timeout(sec.count(), usec.count());
        client_.set_read_timeout(sec.count(), usec.count());
        client_.set_write_timeout(sec.count(), usec.count());
        client_.set_keep_alive(true);
        client_.set_tcp_nodelay(true);
    }

    const std::string& base() const { return ep_.base; }
    std::string path_of(const std::string& file) const { return ep_.base + file; }

    httplib::Response send(const std::string& method, const std::string& path, std::string body = {},
                           httplib::Headers headers = {}) {
        httplib::Request req;
        req.method = method;
        req.path = path;
        req.headers = std::move(headers);
        req.body = std::move(body);
        if (!req.body.empty() && !req.has_header("Content-Type"))
            req.headers.emplace("Content-Type", "application/octet-stream");
        auto res = client_.send(req);
        if (!res)
            fail(ErrorCode::Unreachable,
                 method + " " + ep_.origin + path + " failed: " + httplib::to_string(res.error()));
        if (res->status == 401) fail(ErrorCode::AuthFailed, method + " " + path + " rejected credentials");
        return *res;
    }

    // file names directly inside the collection
    std::vector<std::string> list() {
        static const std::string body =
            R"(<?xml version="1.0" encoding="utf-8"?><D:propfind xmlns:D="DAV:"><D:prop><D:resourcetype/>)"
            R"(<D:getcontentlength/></D:prop></D:propfind>)";
        auto res = send("PROPFIND", ep_.base, body, {{"Depth", "1"}, {"Content-Type", "application/xml"}});
        if (res.status != 207)
            fail(ErrorCode::ProtocolError, "PROPFIND " + ep_.base + " returned " + std::to_string(res.status));
        return parse_multistatus(res.body);
    }

private:
    static std::string_view local_name(std::string_view tag) {
        auto p = tag.find(':');
        return p == std::string_view::npos ? tag : tag.substr(p + 1);
    }

    static bool has_descendant(const boost::property_tree::ptree& t, std::string_view name) {
        for (const auto& [tag, child] : t) {
            if (local_name(tag) == name || has_descendant(child, name)) return true;
        }
        return false;
    }

    static std::string find_text(const boost::property_tree::ptree& t, std::string_view name) {
        for (const auto& [tag, child] : t) {
            if (local_name(tag) == name) return child.get_value<std::string>();
            if (auto s = find_text(child, name); !s.empty()) return s;
        }
        return {};
    }

    void collect(const boost::property_tree::ptree& t, std::vector<std::string>& out) const {
        for (const auto& [tag, child] : t) {
            if (local_name(tag) != "response") {
                collect(child, out);
                continue;
            }
            std::string href = percent_decode(find_text(child, "href"));
            if (href.empty() || href.back() == '/' || has_descendant(child, "collection")) continue;
            if (auto p = href.find("://"); p != std::string::npos) {
                auto slash = href.find('/', p + 3);
                href = slash == std::string::npos ? "/" : href.substr(slash);
            }
            if (href.rfind(ep_.base, 0) != 0) continue;
            std::string file = href.substr(ep_.base.size());
            if (file.empty() || file.find('/') != std::string::npos) continue;
            out.push_back(std::move(file));
        }
    }

    std::vector<std::string> parse_multistatus(const std::string& body) const {
        boost::property_tree::ptree tree;
        try {
            std::istringstream in(body);
            boost::property_tree::read_xml(in, tree);
        } catch (const std::exception& e) {
            fail(ErrorCode::ProtocolError, std::string("unreadable multistatus body: ") + e.what());
        }
        std::vector<std::string> files;
        collect(tree, files);
        std::sort(files.begin(), files.end());
        files.erase(std::unique(files.begin(), files.end()), files.end());
        return files;
    }

    Endpoint ep_;
    httplib::Client client_;
};

}  // namespace

std::string_view to_string(ModelKind kind) noexcept {
    switch (kind) {
        case ModelKind::linear_head: return "linear_head";
        case ModelKind::mlp: return "mlp";
        case ModelKind::external_onnx: return "external_onnx";
    }
    return "?";
}

std::string_view to_string(EntryState s) noexcept {
    switch (s) {
        case EntryState::remote_only: return "remote_only";
        case EntryState::cached: return "cached";
        case EntryState::local_only: return "local_only";
        case EntryState::publishing: return "publishing";
    }
    return "?";
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        fail(ErrorCode::Internal, "sha256 digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xF]);
    }
    return out;
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void validate_manifest(const ModelManifest& m) {
    if (m.name.empty()) fail(ErrorCode::MissingField, "manifest lacks 'name'");
    if (m.version.empty()) fail(ErrorCode::MissingField, "manifest lacks 'version'");
    if (m.labels.empty()) fail(ErrorCode::MissingField, "manifest has no labels");
    if (m.created_at.empty()) fail(ErrorCode::MissingField, "manifest lacks 'created_at'");
    if (!safe_component(m.name) || !safe_component(m.version))
        fail(ErrorCode::InvalidOptions, "name and version may only use letters, digits, '.', '_' and '-'");
    if (m.sha256.size() != 64 ||
        !std::all_of(m.sha256.begin(), m.sha256.end(), [](char c) { return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'); }))
        fail(ErrorCode::BadHash, "sha256 must be 64 lowercase hex characters, got '" + m.sha256 + "'");
    if (m.opset) {
        if (*m.opset > kMaxOpset)
            fail(ErrorCode::OpsetTooHigh, "opset " + std::to_string(*m.opset) + " exceeds " + std::to_string(kMaxOpset));
        if (*m.opset < 1) fail(ErrorCode::InvalidOptions, "opset must be positive");
        if (m.kind != ModelKind::external_onnx) fail(ErrorCode::InvalidOptions, "opset only applies to external_onnx");
    }
    const InputSpec expected;
    if (!(m.input_spec == expected))
        fail(ErrorCode::InvalidOptions, "input_spec must be 12 leads x 1000 samples at 100 Hz in mV");
    std::set<std::string> seen;
    for (const auto& l : m.labels) {
        if (l.empty()) fail(ErrorCode::InvalidOptions, "empty label in manifest");
        if (!seen.insert(l).second) fail(ErrorCode::InvalidOptions, "duplicate label '" + l + "'");
    }
}

ModelManifest validate_manifest(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedJson, std::string("manifest: ") + e.what());
    }
    if (!doc.is_object()) fail(ErrorCode::MalformedJson, "manifest must be a JSON object");

    ModelManifest m;
    m.name = require_string(doc, "name");
    m.version = require_string(doc, "version");
    m.kind = parse_kind(require_string(doc, "kind"));
    const json& labels = require(doc, "labels");
    if (!labels.is_array()) fail(ErrorCode::InvalidOptions, "labels must be an array");
    for (const auto& l : labels) {
        if (!l.is_string()) fail(ErrorCode::InvalidOptions, "labels must be strings");
        m.labels.push_back(l.get<std::string>());
    }
    const json& spec = require(doc, "input_spec");
    if (!spec.is_object()) fail(ErrorCode::InvalidOptions, "input_spec must be an object");
    try {
        m.input_spec.leads = require(spec, "leads").get<int>();
        m.input_spec.samples = require(spec, "samples").get<int>();
        m.input_spec.rate_hz = require(spec, "rate_hz").get<double>();
        m.input_spec.unit = require(spec, "unit").get<std::string>();
        if (auto it = doc.find("opset"); it != doc.end() && !it->is_null()) {
            if (!it->is_number_integer()) fail(ErrorCode::InvalidOptions, "opset must be an integer");
            m.opset = it->get<int>();
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::InvalidOptions, std::string("manifest: ") + e.what());
    }
    m.preprocessing = require_string(doc, "preprocessing");
    m.sha256 = require_string(doc, "sha256");
    m.created_at = require_string(doc, "created_at");
    validate_manifest(m);
    return m;
}

std::string manifest_to_json(const ModelManifest& m) {
    json doc = {
        {"name", m.name},
        {"version", m.version},
        {"kind", std::string(to_string(m.kind))},
        {"labels", m.labels},
        {"input_spec",
         {{"leads", m.input_spec.leads},
          {"samples", m.input_spec.samples},
          {"rate_hz", m.input_spec.rate_hz},
          {"unit", m.input_spec.unit}}},
        {"preprocessing", m.preprocessing},
        {"sha256", m.sha256},
        {"created_at", m.created_at},
    };
    if (m.opset) doc["opset"] = *m.opset;
    return doc.dump(2) + "\n";
}

std::string payload_filename(const ModelManifest& m) {
    return m.name + "-" + m.version + (m.kind == ModelKind::external_onnx ? ".onnx" : ".ecgxmdl");
}

std::string manifest_filename(const ModelManifest& m) { return m.name + "-" + m.version + kManifestSuffix; }

// ---- native models ----

ModelKind kind_of(const NativeModel& m) {
    return std::holds_alternative<finetune::LinearHead>(m) ? ModelKind::linear_head : ModelKind::mlp;
}

const std::vector<std::string>& class_names(const NativeModel& m) {
    return std::visit([](const auto& x) -> const std::vector<std::string>& { return x.class_names; }, m);
}

std::size_t input_dim(const NativeModel& m) {
    if (auto* h = std::get_if<finetune::LinearHead>(&m)) return h->dim();
    const auto& mlp = std::get<Mlp>(m);
    return mlp.weights.empty() ? 0 : mlp.weights.front().cols();
}

Matrix predict(const NativeModel& model, const Matrix& x) {
    if (auto* h = std::get_if<finetune::LinearHead>(&model)) return finetune::predict(*h, x);
    const auto& m = std::get<Mlp>(model);
    check_mlp(m);
    if (x.cols() != m.weights.front().cols())
        fail(ErrorCode::ShapeMismatch, "embedding width " + std::to_string(x.cols()) + " but model expects " +
                                           std::to_string(m.weights.front().cols()));
    Matrix out(x.rows(), m.class_names.size());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        std::vector<double> a = x.row_copy(i);
        for (std::size_t l = 0; l < m.weights.size(); ++l) {
            const Matrix& w = m.weights[l];
            std::vector<double> z(w.rows());
            for (std::size_t r = 0; r < w.rows(); ++r) {
                double s = m.biases[l][r];
                for (std::size_t c = 0; c < w.cols(); ++c) s += w(r, c) * a[c];
                z[r] = (l + 1 < m.weights.size()) ? std::max(0.0, s) : s;
            }
            a = std::move(z);
        }
        if (m.multilabel) {
            for (std::size_t c = 0; c < a.size(); ++c) out(i, c) = 1.0 / (1.0 + std::exp(-a[c]));
        } else {
            const double mx = *std::max_element(a.begin(), a.end());
            double sum = 0.0;
            for (double& v : a) sum += (v = std::exp(v - mx));
            for (std::size_t c = 0; c < a.size(); ++c) out(i, c) = a[c] / sum;
        }
    }
    return out;
}

std::string save_model(const NativeModel& m) {
    bool multilabel = false;
    if (auto* h = std::get_if<finetune::LinearHead>(&m)) {
        h->validate();
        multilabel = h->multilabel;
    } else {
        check_mlp(std::get<Mlp>(m));
        multilabel = std::get<Mlp>(m).multilabel;
    }
    const auto layers = layers_of(m);
    json header = {
        {"format", 1},
        {"kind", std::string(to_string(kind_of(m)))},
        {"activation", multilabel ? "sigmoid" : "softmax"},
        {"class_names", class_names(m)},
        {"layers", json::array()},
    };
    for (const auto& l : layers) header["layers"].push_back({l.w->rows(), l.w->cols()});
    const std::string h = header.dump();

    std::string out(kMagic, sizeof kMagic);
    put_u32(out, static_cast<std::uint32_t>(h.size()));
    out += h;
    for (const auto& l : layers) {
        for (double v : l.w->data()) put_f64(out, v);
        for (double v : *l.b) put_f64(out, v);
    }
    return out;
}

NativeModel load_model(std::string_view payload, const ModelManifest* manifest) {
    auto corrupt = [](const std::string& why) -> void { fail(ErrorCode::CorruptPayload, "model payload: " + why); };
    const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
    if (payload.size() < 12 || std::memcmp(payload.data(), kMagic, sizeof kMagic) != 0) corrupt("bad magic");
    std::uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
    if (payload.size() - 12 < hlen) corrupt("truncated header");

    json header;
    try {
        header = json::parse(payload.substr(12, hlen));
    } catch (const json::exception& e) {
        corrupt(std::string("unreadable header: ") + e.what());
    }

    std::string kind, activation;
    std::vector<std::string> names;
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    try {
        if (header.at("format").get<int>() != 1) corrupt("unsupported format version");
        kind = header.at("kind").get<std::string>();
        activation = header.at("activation").get<std::string>();
        names = header.at("class_names").get<std::vector<std::string>>();
        for (const auto& d : header.at("layers")) dims.emplace_back(d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>());
    } catch (const json::exception& e) {
        corrupt(std::string("bad header: ") + e.what());
    }
    if (activation != "softmax" && activation != "sigmoid") corrupt("unknown activation '" + activation + "'");
    if (kind != "linear_head" && kind != "mlp") corrupt("unsupported kind '" + kind + "'");
    if (dims.empty() || (kind == "linear_head" && dims.size() != 1)) corrupt("wrong layer count");

    std::size_t expected = 0;
    for (const auto& [r, c] : dims) {
        if (r == 0 || c == 0 || r > (1u << 20) || c > (1u << 20)) corrupt("implausible layer shape");
        expected += (r * c + r) * 8;
    }
    const std::size_t body = payload.size() - 12 - hlen;
    if (body < expected) corrupt("truncated weights");
    if (body > expected) corrupt("trailing bytes after weights");

    const unsigned char* p = bytes + 12 + hlen;
    std::vector<Matrix> ws;
    std::vector<std::vector<double>> bs;
    for (const auto& [r, c] : dims) {
        Matrix w(r, c);
        for (double& v : w.data()) v = get_f64(p), p += 8;
        std::vector<double> b(r);
        for (double& v : b) v = get_f64(p), p += 8;
        ws.push_back(std::move(w));
        bs.push_back(std::move(b));
    }

    NativeModel model;
    try {
        if (kind == "linear_head") {
            finetune::LinearHead h{std::move(ws[0]), std::move(bs[0]), names, activation == "sigmoid"};
            h.validate();
            model = std::move(h);
        } else {
            Mlp m{std::move(ws), std::move(bs), names, activation == "sigmoid"};
            check_mlp(m);
            model = std::move(m);
        }
    } catch (const Error& e) {
        corrupt(e.what());
    }
    if (manifest) {
        if (manifest->kind != kind_of(model)) corrupt("manifest kind differs from payload kind");
        if (manifest->labels != class_names(model)) corrupt("manifest labels differ from payload class names");
    }
    return model;
}

// ---- registry ----

Listing list_remote(const ServerConfig& server) {
    Dav dav(server);
    const auto files = dav.list();
    const std::set<std::string> present(files.begin(), files.end());

    auto stem_of = [](const std::string& f) {
        const auto dot = f.rfind('.');
        return dot == std::string::npos ? f : f.substr(0, dot);
    };
    std::set<std::string> payload_stems;
    for (const auto& f : files)
        if (!ends_with(f, kManifestSuffix) && f.front() != '.') payload_stems.insert(stem_of(f));

    Listing out;
    for (const auto& f : files) {
        if (f.front() == '.') continue;
        if (ends_with(f, kManifestSuffix)) {
            if (!payload_stems.count(f.substr(0, f.size() - std::strlen(kManifestSuffix))))
                out.warnings.push_back(f + ": manifest without payload");
            continue;
        }
        const std::string mf = stem_of(f) + kManifestSuffix;
        if (!present.count(mf)) {
            out.warnings.push_back(f + ": no manifest");
            continue;
        }
        auto res = dav.send("GET", dav.path_of(mf));
        if (res.status != 200) {
            out.warnings.push_back(mf + ": GET returned " + std::to_string(res.status));
            continue;
        }
        try {
            ModelManifest m = validate_manifest(res.body);
            if (payload_filename(m) != f) {
                out.warnings.push_back(f + ": manifest describes " + payload_filename(m));
                continue;
            }
            out.entries.push_back({std::move(m), dav.path_of(f), std::nullopt, EntryState::remote_only});
        } catch (const Error& e) {
            out.warnings.push_back(mf + ": " + std::string(to_string(e.code())) + ": " + e.what());
        }
    }
    return out;
}

SyncSummary sync(const ServerConfig& server, const fs::path& cache_dir) {
    DirLock lock(cache_dir);
    Listing remote = list_remote(server);
    Dav dav(server);

    SyncSummary out;
    out.warnings = std::move(remote.warnings);
    for (const auto& e : remote.entries) {
        const std::string file = payload_filename(e.manifest);
        const fs::path local = cache_dir / file;
        const fs::path mpath = cache_dir / manifest_filename(e.manifest);
        const std::string mjson = manifest_to_json(e.manifest);

        std::error_code ec;
        if (fs::is_regular_file(local, ec) && sha256_hex(read_file(local)) == e.manifest.sha256) {
            if (!fs::exists(mpath) || read_file(mpath) != mjson) write_atomic(mpath, mjson);
            out.up_to_date.push_back(file);
            continue;
        }
        auto res = dav.send("GET", e.remote_path);
        if (res.status != 200) {
            out.failures.push_back({file, ErrorCode::ProtocolError, "GET returned " + std::to_string(res.status)});
            continue;
        }
        const std::string got = sha256_hex(res.body);
        if (got != e.manifest.sha256) {
            out.failures.push_back(
                {file, ErrorCode::HashMismatch, "downloaded sha256 " + got + " but manifest says " + e.manifest.sha256});
            continue;
        }
        write_atomic(local, res.body);
        write_atomic(mpath, mjson);
        out.downloaded.push_back(file);
    }
    return out;
}

std::string publish(const ServerConfig& server, std::string_view payload, const ModelManifest& manifest) {
    validate_manifest(manifest);
    const std::string got = sha256_hex(payload);
    if (got != manifest.sha256)
        fail(ErrorCode::HashMismatch, "payload sha256 " + got + " differs from manifest " + manifest.sha256);

    Dav dav(server);
    const std::string ppath = dav.path_of(payload_filename(manifest));
    const std::string mpath = dav.path_of(manifest_filename(manifest));
    for (const auto& p : {ppath, mpath}) {
        auto res = dav.send("GET", p);
        if (res.status == 200)
            fail(ErrorCode::Conflict, manifest.name + " " + manifest.version + " already exists at " + p);
        if (res.status != 404) fail(ErrorCode::ProtocolError, "GET " + p + " returned " + std::to_string(res.status));
    }
    auto put = [&](const std::string& path, std::string body, const char* type) {
        auto res = dav.send("PUT", path, std::move(body), {{"Content-Type", type}});
        if (res.status != 200 && res.status != 201 && res.status != 204)
            fail(ErrorCode::ProtocolError, "PUT " + path + " returned " + std::to_string(res.status));
    };
    put(ppath, std::string(payload), "application/octet-stream");
    put(mpath, manifest_to_json(manifest), "application/json");
    return ppath;
}

Listing list_local(const fs::path& dir, EntryState state) {
    Listing out;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return out;
    std::vector<fs::path> manifests;
    for (const auto& de : fs::directory_iterator(dir, ec)) {
        if (de.is_regular_file() && ends_with(de.path().filename().string(), kManifestSuffix))
            manifests.push_back(de.path());
    }
    std::sort(manifests.begin(), manifests.end());
    for (const auto& mp : manifests) {
        try {
            ModelManifest m = validate_manifest(read_file(mp));
            const fs::path payload = dir / payload_filename(m);
            if (!fs::is_regular_file(payload)) {
                out.warnings.push_back(mp.filename().string() + ": payload missing");
                continue;
            }
            if (sha256_hex(read_file(payload)) != m.sha256) {
                out.warnings.push_back(payload.filename().string() + ": hash differs from manifest");
                continue;
            }
            out.entries.push_back({std::move(m), {}, payload, state});
        } catch (const Error& e) {
            out.warnings.push_back(mp.filename().string() + ": " + e.what());
        }
    }
    return out;
}

fs::path store_local(const fs::path& dir, std::string_view payload, const ModelManifest& manifest) {
    validate_manifest(manifest);
    if (sha256_hex(payload) != manifest.sha256) fail(ErrorCode::HashMismatch, "payload does not match manifest hash");
    DirLock lock(dir);
    const fs::path p = dir / payload_filename(manifest);
    const fs::path mp = dir / manifest_filename(manifest);
    if (fs::exists(p) || fs::exists(mp))
        fail(ErrorCode::Conflict, manifest.name + " " + manifest.version + " already stored");
    write_atomic(p, payload);
    write_atomic(mp, manifest_to_json(manifest));
    return p;
}

std::string read_payload(const fs::path& dir, const ModelManifest& manifest) {
    const fs::path p = dir / payload_filename(manifest);
    if (!fs::is_regular_file(p)) fail(ErrorCode::NotFound, "no stored payload " + p.filename().string());
    std::string bytes = read_file(p);
    if (sha256_hex(bytes) != manifest.sha256)
        fail(ErrorCode::HashMismatch, p.filename().string() + " no longer matches its manifest hash");
    return bytes;
}

}  // namespace ecgx::exchange
