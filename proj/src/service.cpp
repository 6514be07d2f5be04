#include "ecgx/service.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "ecgx/analysis.hpp"
#include "ecgx/formats.hpp"
#include "ecgx/signal.hpp"
#include "httplib.h"
#include "json.hpp"

namespace ecgx::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kModelVersion = "1";
constexpr const char* kPreprocessingTag = "ecgx-normalize-v1;median-beat-512";

std::string random_id() {
    static std::mutex m;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard g(m);
    char buf[33];
    std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(rng()),
                  static_cast<unsigned long long>(rng()));
    return buf;
}

bool valid_id(const std::string& id) {
    return id.size() == 32 && std::all_of(id.begin(), id.end(), [](char c) {
               return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
           });
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorCode::NotFound, "cannot read " + p.filename().string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_atomic(const fs::path& p, std::string_view bytes) {
    fs::path tmp = p;
    tmp += ".part";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(ErrorCode::Internal, "cannot write " + tmp.string());
    }
    fs::rename(tmp, p);
}

json rows_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return rows;
}

json lead_names_json() {
    json names = json::array();
    for (auto n : kCanonicalLeads) names.push_back(std::string(n));
    return names;
}

const char* env(const char* name) {
    const char* v = std::getenv(name);
    return (v && *v) ? v : nullptr;
}

std::size_t parse_count(const std::string& s, const char* what) {
    std::size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != s.size() || v < 0) fail(ErrorCode::InvalidOptions, std::string(what) + " must be a non-negative integer");
    return static_cast<std::size_t>(v);
}

}  // namespace

// ---------------------------------------------------------------- config

ServiceConfig ServiceConfig::load(const std::optional<fs::path>& file) {
    ServiceConfig cfg;
    std::string url, user, pass;
    if (file) {
        json doc;
        try {
            doc = json::parse(read_file(*file));
        } catch (const json::exception& e) {
            fail(ErrorCode::MalformedJson, "config file: " + std::string(e.what()));
        }
        if (!doc.is_object()) fail(ErrorCode::MalformedJson, "config file must hold a JSON object");
        try {
            for (const auto& [k, v] : doc.items()) {
                if (k == "data_dir") cfg.data_dir = v.get<std::string>();
                else if (k == "host") cfg.host = v.get<std::string>();
                else if (k == "port") cfg.port = v.get<int>();
                else if (k == "exchange_url") url = v.get<std::string>();
                else if (k == "exchange_user") user = v.get<std::string>();
                else if (k == "exchange_pass") pass = v.get<std::string>();
                else if (k == "max_upload_mb") cfg.max_upload_mb = v.get<std::size_t>();
                else if (k == "workers") cfg.workers = v.get<std::size_t>();
                else fail(ErrorCode::InvalidOptions, "unknown config key '" + k + "'");
            }
        } catch (const json::exception& e) {
            fail(ErrorCode::InvalidOptions, "config file: " + std::string(e.what()));
        }
    }
    if (auto v = env("DATA_DIR")) cfg.data_dir = v;
    if (auto v = env("PORT")) cfg.port = static_cast<int>(parse_count(v, "PORT"));
    if (auto v = env("EXCHANGE_URL")) url = v;
    if (auto v = env("EXCHANGE_USER")) user = v;
    if (auto v = env("EXCHANGE_PASS")) pass = v;
    if (auto v = env("MAX_UPLOAD_MB")) cfg.max_upload_mb = parse_count(v, "MAX_UPLOAD_MB");
    if (auto v = env("WORKERS")) cfg.workers = parse_count(v, "WORKERS");
    if (cfg.port < 0 || cfg.port > 65535) fail(ErrorCode::InvalidOptions, "port out of range");
    if (cfg.max_upload_mb == 0) fail(ErrorCode::InvalidOptions, "MAX_UPLOAD_MB must be positive");
    if (!url.empty()) cfg.exchange = exchange::ServerConfig{url, user, pass};
    return cfg;
}

std::size_t ServiceConfig::worker_count() const {
    if (workers > 0) return workers;
    return std::max(1u, std::thread::hardware_concurrency());
}

// ---------------------------------------------------------------- jobs

std::string_view to_string(JobState s) noexcept {
    switch (s) {
        case JobState::queued: return "queued";
        case JobState::running: return "running";
        case JobState::succeeded: return "succeeded";
        case JobState::failed: return "failed";
        case JobState::cancelled: return "cancelled";
    }
    return "?";
}

std::optional<JobState> job_state_from_name(std::string_view name) {
    for (auto s : {JobState::queued, JobState::running, JobState::succeeded, JobState::failed, JobState::cancelled})
        if (to_string(s) == name) return s;
    return std::nullopt;
}

bool is_terminal(JobState s) noexcept {
    return s == JobState::succeeded || s == JobState::failed || s == JobState::cancelled;
}

bool transition_allowed(JobState from, JobState to) noexcept {
    if (from == JobState::queued) return to == JobState::running || to == JobState::cancelled || to == JobState::failed;
    if (from == JobState::running) return is_terminal(to);
    return false;
}

std::string job_to_json(const JobRecord& job, bool with_report) {
    json doc = {
        {"id", job.id},
        {"state", std::string(to_string(job.state))},
        {"model_name", job.model_name},
        {"progress", {{"epochs_done", job.progress}, {"max_epochs", job.config.max_epochs}}},
        {"config", json::parse(finetune::config_to_json(job.config))},
        {"error", job.error.empty() ? json(nullptr) : json(job.error)},
        {"interrupted", job.interrupted},
        {"revision", job.revision},
        {"created_at", job.created_at},
        {"updated_at", job.updated_at},
    };
    if (with_report && job.report) doc["report"] = json::parse(finetune::report_to_json(*job.report));
    return doc.dump();
}

JobRecord job_from_json(std::string_view text) {
    JobRecord r;
    try {
        const json doc = json::parse(text);
        r.id = doc.at("id").get<std::string>();
        auto state = job_state_from_name(doc.at("state").get<std::string>());
        if (!state) fail(ErrorCode::MalformedJson, "job record has an unknown state");
        r.state = *state;
        r.model_name = doc.at("model_name").get<std::string>();
        r.progress = doc.at("progress").at("epochs_done").get<std::size_t>();
        r.config = finetune::config_from_json(doc.at("config").dump());
        if (!doc.at("error").is_null()) r.error = doc.at("error").get<std::string>();
        r.interrupted = doc.at("interrupted").get<bool>();
        r.revision = doc.at("revision").get<std::uint64_t>();
        r.created_at = doc.at("created_at").get<std::string>();
        r.updated_at = doc.at("updated_at").get<std::string>();
        if (doc.contains("report")) r.report = finetune::report_from_json(doc["report"].dump());
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedJson, std::string("job record: ") + e.what());
    }
    return r;
}

JobStore::JobStore(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    std::vector<fs::path> files;
    for (const auto& de : fs::directory_iterator(dir_))
        if (de.is_regular_file() && de.path().extension() == ".json") files.push_back(de.path());
    for (const auto& file : files) {
        JobRecord r;
        try {
            r = job_from_json(read_file(file));
        } catch (const Error&) {
            continue;  // unreadable records are skipped, not deleted
        }
        if (!is_terminal(r.state)) {
            r.state = JobState::failed;
            r.interrupted = true;
            r.error = "Internal: interrupted by a service restart";
            r.updated_at = exchange::utc_timestamp();
            ++r.revision;
            persist(r);
        }
        const std::string id = r.id;
        jobs_[id] = std::make_shared<const JobRecord>(std::move(r));
    }
}

void JobStore::persist(const JobRecord& r) const { write_atomic(dir_ / (r.id + ".json"), job_to_json(r, true)); }

JobRecord JobStore::create(const finetune::FineTuneConfig& cfg, const std::string& model_name) {
    JobRecord r;
    r.id = random_id();
    r.config = cfg;
    r.model_name = model_name;
    r.created_at = r.updated_at = exchange::utc_timestamp();
    std::unique_lock g(mutex_);
    persist(r);
    jobs_[r.id] = std::make_shared<const JobRecord>(r);
    return r;
}

std::shared_ptr<const JobRecord> JobStore::get(const std::string& id) const {
    std::shared_lock g(mutex_);
    auto it = jobs_.find(id);
    return it == jobs_.end() ? nullptr : it->second;
}

std::vector<std::shared_ptr<const JobRecord>> JobStore::list() const {
    std::shared_lock g(mutex_);
    std::vector<std::shared_ptr<const JobRecord>> out;
    for (const auto& [id, r] : jobs_) out.push_back(r);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        return std::tie(a->created_at, a->id) < std::tie(b->created_at, b->id);
    });
    return out;
}

std::shared_ptr<const JobRecord> JobStore::transition(const std::string& id, JobState to, std::string error,
                                                      std::optional<finetune::TrainingReport> report) {
    std::unique_lock g(mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) fail(ErrorCode::NotFound, "no job " + id);
    const JobRecord& cur = *it->second;
    if (!transition_allowed(cur.state, to))
        fail(ErrorCode::Conflict, "job " + id + " cannot go from " + std::string(to_string(cur.state)) + " to " +
                                      std::string(to_string(to)));
    auto next = std::make_shared<JobRecord>(cur);
    next->state = to;
    if (!error.empty()) next->error = std::move(error);
    if (report) next->report = std::move(report);
    next->updated_at = exchange::utc_timestamp();
    ++next->revision;
    persist(*next);
    it->second = next;
    return next;
}

void JobStore::set_progress(const std::string& id, std::size_t epochs) {
    std::unique_lock g(mutex_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) fail(ErrorCode::NotFound, "no job " + id);
    if (epochs <= it->second->progress) return;
    auto next = std::make_shared<JobRecord>(*it->second);
    next->progress = epochs;
    next->updated_at = exchange::utc_timestamp();
    ++next->revision;
    persist(*next);
    it->second = next;
}

bool JobStore::name_reserved(const std::string& model_name) const {
    std::shared_lock g(mutex_);
    return std::any_of(jobs_.begin(), jobs_.end(), [&](const auto& kv) {
        const auto& r = *kv.second;
        return r.model_name == model_name && (r.state == JobState::queued || r.state == JobState::running);
    });
}

// ---------------------------------------------------------------- helpers

std::string_view probability_bucket(double p) noexcept {
    if (p < 0.3) return "low";
    if (p >= 0.7) return "high";
    return "mid";
}

int http_status_for(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::NotFound: return 404;
        case ErrorCode::PayloadTooLarge: return 413;
        case ErrorCode::Conflict:
        case ErrorCode::NotReady: return 409;
        case ErrorCode::NoBeatsFound:
        case ErrorCode::TooFewBeats:
        case ErrorCode::NotExecutable:
        case ErrorCode::ShapeMismatch:
        case ErrorCode::CorruptPayload:
        case ErrorCode::HashMismatch: return 422;
        case ErrorCode::RegistryUnavailable:
        case ErrorCode::Unreachable:
        case ErrorCode::AuthFailed:
        case ErrorCode::ProtocolError: return 502;
        case ErrorCode::Internal:
        case ErrorCode::NonFiniteLoss:
        case ErrorCode::NonFiniteEvaluation:
        case ErrorCode::DivergedImmediately:
        case ErrorCode::Cancelled: return 500;
        default: return 400;
    }
}

// ---------------------------------------------------------------- service

namespace {

struct StoredRecording {
    std::string id;
    StandardEcg ecg;
    std::string filename;
    std::string format;
    std::vector<std::string> warnings;
    std::vector<std::string> labels;
    std::string created_at;
};

json recording_meta(const StoredRecording& r) {
    return {{"id", r.id},         {"filename", r.filename}, {"format", r.format},
            {"warnings", r.warnings}, {"labels", r.labels},   {"created_at", r.created_at}};
}

struct Task {
    std::string job_id;
    std::vector<std::string> recording_ids;  // embedded by the worker
    Matrix embeddings;                       // used when recording_ids is empty
    std::vector<metrics::LabelSet> labels;
};

std::vector<std::string> labels_from_json(const json& v) {
    if (v.is_string()) return {v.get<std::string>()};
    if (!v.is_array() || v.empty()) fail(ErrorCode::BadRequest, "labels must be a string or a non-empty array");
    std::vector<std::string> out;
    for (const auto& s : v) {
        if (!s.is_string() || s.get<std::string>().empty()) fail(ErrorCode::BadRequest, "labels must be non-empty strings");
        out.push_back(s.get<std::string>());
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

}  // namespace

struct Service::Impl {
    Service& owner;
    ServiceConfig& cfg;
    fs::path recordings_dir, models_dir, cache_dir;

    httplib::Server server;
    std::thread server_thread;
    int bound_port = -1;

    std::mutex queue_mutex;
    std::condition_variable queue_cv;
    std::deque<Task> queue;
    std::vector<std::thread> workers;
    std::atomic<bool> stopping{false};

    std::mutex flags_mutex;
    std::map<std::string, std::shared_ptr<std::atomic<bool>>> cancel_flags;

    std::mutex submit_mutex;  // name reservation check and job creation

    std::mutex rec_mutex;
    std::map<std::string, std::shared_ptr<const StoredRecording>> recordings;
    std::map<std::pair<std::string, std::string>, std::string> views;

    Impl(Service& s, ServiceConfig& c)
        : owner(s), cfg(c), recordings_dir(c.data_dir / "recordings"), models_dir(c.data_dir / "models"),
          cache_dir(c.data_dir / "registry-cache") {
        fs::create_directories(recordings_dir);
        fs::create_directories(models_dir);
        fs::create_directories(cache_dir);
        routes();
        for (std::size_t i = 0; i < cfg.worker_count(); ++i) workers.emplace_back([this] { worker_loop(); });
    }

    // ---- responses

    static void send_json(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void send_error(httplib::Response& res, int status, ErrorCode code, const std::string& message,
                           json extra = json::object()) {
        extra["error"] = {{"code", std::string(to_string(code))}, {"message", message}};
        send_json(res, status, extra);
    }

    template <class F>
    httplib::Server::Handler guard(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const Error& e) {
                send_error(res, http_status_for(e.code()), e.code(), e.what());
            } catch (const json::exception& e) {
                send_error(res, 400, ErrorCode::MalformedJson, e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, ErrorCode::Internal, e.what());
            }
        };
    }

    static json body_json(const httplib::Request& req) {
        json doc;
        try {
            doc = json::parse(req.body);
        } catch (const json::exception& e) {
            fail(ErrorCode::MalformedJson, std::string("request body: ") + e.what());
        }
        if (!doc.is_object()) fail(ErrorCode::MalformedJson, "request body must be a JSON object");
        return doc;
    }

    // ---- recordings

    std::shared_ptr<const StoredRecording> load_recording(const std::string& id) {
        if (!valid_id(id)) fail(ErrorCode::NotFound, "no recording " + id);
        {
            std::lock_guard g(rec_mutex);
            if (auto it = recordings.find(id); it != recordings.end()) return it->second;
        }
        const fs::path meta = recordings_dir / (id + ".json");
        const fs::path npy = recordings_dir / (id + ".npy");
        if (!fs::exists(meta) || !fs::exists(npy)) fail(ErrorCode::NotFound, "no recording " + id);
        auto rec = std::make_shared<StoredRecording>();
        const json doc = json::parse(read_file(meta));
        rec->id = id;
        rec->filename = doc.value("filename", "");
        rec->format = doc.value("format", "");
        rec->warnings = doc.value("warnings", std::vector<std::string>{});
        rec->labels = doc.value("labels", std::vector<std::string>{});
        rec->created_at = doc.value("created_at", "");
        const std::string bytes = read_file(npy);
        formats::ParseOptions po;
        po.rate_hz = kStandardRateHz;
        rec->ecg = StandardEcg(formats::parse_npy(formats::as_bytes(bytes), po).samples);
        std::lock_guard g(rec_mutex);
        return recordings.emplace(id, std::move(rec)).first->second;
    }

    void post_recording(const httplib::Request& req, httplib::Response& res) {
        if (!req.is_multipart_form_data() || !req.has_file("file"))
            fail(ErrorCode::BadRequest, "expected multipart/form-data with a 'file' part");
        const auto file = req.get_file_value("file");
        formats::ParseOptions po;
        if (req.has_file("rate_hz")) {
            try {
                po.rate_hz = std::stod(req.get_file_value("rate_hz").content);
            } catch (const std::exception&) {
                fail(ErrorCode::BadRequest, "rate_hz must be a number");
            }
        }
        std::optional<SourceFormat> fmt;
        if (req.has_file("format")) {
            fmt = formats::format_from_name(req.get_file_value("format").content);
            if (!fmt) fail(ErrorCode::UnknownFormat, "unknown format hint '" + req.get_file_value("format").content + "'");
        } else {
            fmt = formats::detect_format(formats::as_bytes(file.content), file.filename).format;
        }
        std::vector<std::string> labels;
        if (req.has_file("labels")) {
            const std::string text = req.get_file_value("labels").content;
            json v;
            try {
                v = json::parse(text);
            } catch (const json::exception&) {
                v = text;
            }
            labels = labels_from_json(v);
        }

        RawRecording raw;
        if (*fmt == SourceFormat::wfdb) {
            if (!req.has_file("header"))
                fail(ErrorCode::BadRequest, "WFDB uploads need the signal as 'file' and the .hea as 'header'");
            raw = formats::parse_wfdb(formats::as_bytes(req.get_file_value("header").content), formats::as_bytes(file.content));
        } else {
            raw = formats::parse(formats::as_bytes(file.content), *fmt, po);
        }
        StoredRecording rec;
        rec.ecg = normalize(raw);
        rec.id = random_id();
        rec.filename = file.filename;
        rec.format = std::string(to_string(*fmt));
        if (auto it = raw.metadata.find("warning"); it != raw.metadata.end()) rec.warnings.push_back(it->second);
        rec.labels = std::move(labels);
        rec.created_at = exchange::utc_timestamp();

        const auto npy = formats::write_npy(rec.ecg.samples());
        write_atomic(recordings_dir / (rec.id + ".npy"), std::string_view(reinterpret_cast<const char*>(npy.data()), npy.size()));
        const json meta = recording_meta(rec);
        write_atomic(recordings_dir / (rec.id + ".json"), meta.dump());
        {
            std::lock_guard g(rec_mutex);
            recordings[rec.id] = std::make_shared<const StoredRecording>(rec);
        }
        send_json(res, 201, meta);
    }

    std::string compute_view(const StoredRecording& rec, const std::string& view) {
        json doc = {{"id", rec.id}, {"view", view}, {"unit", "mV"}, {"leads", lead_names_json()}};
        if (view == "raw") {
            doc["rate_hz"] = kStandardRateHz;
            doc["samples"] = rows_json(rec.ecg.samples());
            return doc.dump();
        }
        const auto fid = analysis::detect_rpeaks(rec.ecg);
        if (view == "fiducials") {
            doc["lead"] = "II";
            doc["rate_hz"] = fid.rate_hz;
            doc["r_peaks"] = fid.r_peaks;
            doc["qrs_onsets"] = fid.qrs_onsets;
            doc["qrs_offsets"] = fid.qrs_offsets;
        } else if (view == "qrs") {
            const double window_ms = 600.0;
            const auto windows = analysis::extract_qrs_windows(rec.ecg, fid, window_ms);
            if (windows.empty()) fail(ErrorCode::TooFewBeats, "no QRS window fits inside the recording");
            doc["rate_hz"] = kStandardRateHz;
            doc["window_ms"] = window_ms;
            doc["r_peaks"] = fid.r_peaks;
            json beats = json::array();
            for (const auto& w : windows) beats.push_back(rows_json(w));
            doc["beats"] = std::move(beats);
        } else if (view == "median") {
            const auto beat = analysis::median_beat(rec.ecg, fid);
            doc["rate_hz"] = kStandardRateHz;
            doc["r_position"] = beat.r_position;
            doc["samples"] = rows_json(beat.samples);
        } else {
            const auto aligned = analysis::rlign_transform(rec.ecg, fid);
            doc["rate_hz"] = kStandardRateHz;
            doc["template_rpeaks"] = aligned.template_rpeaks;
            doc["beats_used"] = aligned.beats_used;
            doc["samples"] = rows_json(aligned.samples);
        }
        return doc.dump();
    }

    void get_view(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1], view = req.matches[2];
        static const std::set<std::string> views_known = {"raw", "qrs", "median", "aligned", "fiducials"};
        if (!views_known.count(view)) fail(ErrorCode::NotFound, "unknown view '" + view + "'");
        const auto rec = load_recording(id);
        {
            std::lock_guard g(rec_mutex);
            if (auto it = views.find({id, view}); it != views.end()) {
                res.set_content(it->second, "application/json");
                return;
            }
        }
        std::string body = compute_view(*rec, view);
        {
            std::lock_guard g(rec_mutex);
            views[{id, view}] = body;
        }
        res.set_content(body, "application/json");
    }

    void delete_recording(const std::string& id, httplib::Response& res) {
        load_recording(id);
        std::lock_guard g(rec_mutex);
        recordings.erase(id);
        for (auto it = views.begin(); it != views.end();) it = it->first.first == id ? views.erase(it) : std::next(it);
        fs::remove(recordings_dir / (id + ".npy"));
        fs::remove(recordings_dir / (id + ".json"));
        res.status = 204;
    }

    // ---- fine-tuning

    std::vector<exchange::RegistryEntry> local_models() {
        auto local = exchange::list_local(models_dir, exchange::EntryState::local_only).entries;
        auto cached = exchange::list_local(cache_dir, exchange::EntryState::cached).entries;
        local.insert(local.end(), cached.begin(), cached.end());
        return local;
    }

    void post_finetune(const httplib::Request& req, httplib::Response& res) {
        const json doc = body_json(req);
        if (!doc.contains("name") || !doc["name"].is_string())
            fail(ErrorCode::BadRequest, "'name' (custom model name) is required");
        const std::string name = doc["name"].get<std::string>();
        if (name.empty() || !std::all_of(name.begin(), name.end(), [](char c) {
                return std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
            }))
            fail(ErrorCode::InvalidOptions, "model names may only use letters, digits, '.', '_' and '-'");

        finetune::FineTuneConfig cfg;
        if (doc.contains("config")) {
            if (!doc["config"].is_object()) fail(ErrorCode::InvalidOptions, "'config' must be an object");
            cfg = finetune::config_from_json(doc["config"].dump());
        }
        if (doc.contains("model")) {
            if (!doc["model"].is_string()) fail(ErrorCode::BadRequest, "'model' must be a string");
            cfg.base_model = doc["model"].get<std::string>();
        }
        if (cfg.base_model != finetune::kDefaultBaseModel)
            fail(ErrorCode::InvalidOptions, "unknown base model '" + cfg.base_model + "'; available: " +
                                                finetune::kDefaultBaseModel);
        if (cfg.method == finetune::TrainingMethod::full)
            fail(ErrorCode::UnsupportedAtDeskScale, "only head fine-tuning is available");

        Task task;
        const bool has_rec = doc.contains("recordings"), has_data = doc.contains("dataset");
        if (has_rec == has_data) fail(ErrorCode::BadRequest, "give exactly one of 'recordings' or 'dataset'");
        if (has_rec) {
            if (!doc["recordings"].is_array()) fail(ErrorCode::BadRequest, "'recordings' must be an array");
            for (const auto& item : doc["recordings"]) {
                std::string id;
                std::vector<std::string> labels;
                if (item.is_string()) {
                    id = item.get<std::string>();
                    labels = load_recording(id)->labels;
                    if (labels.empty()) fail(ErrorCode::BadRequest, "recording " + id + " has no stored labels");
                } else if (item.is_object() && item.contains("id") && item["id"].is_string()) {
                    id = item["id"].get<std::string>();
                    load_recording(id);
                    labels = item.contains("labels") ? labels_from_json(item["labels"]) : load_recording(id)->labels;
                    if (labels.empty()) fail(ErrorCode::BadRequest, "recording " + id + " has no labels");
                } else {
                    fail(ErrorCode::BadRequest, "recording entries must be ids or {id, labels} objects");
                }
                task.recording_ids.push_back(id);
                task.labels.push_back(std::move(labels));
            }
        } else {
            const json& ds = doc["dataset"];
            if (!ds.is_object() || !ds.contains("embeddings") || !ds.contains("labels") || !ds["embeddings"].is_array() ||
                !ds["labels"].is_array())
                fail(ErrorCode::BadRequest, "'dataset' needs 'embeddings' and 'labels' arrays");
            const json& emb = ds["embeddings"];
            if (emb.size() != ds["labels"].size())
                fail(ErrorCode::LengthMismatch, "dataset has " + std::to_string(emb.size()) + " embeddings but " +
                                                    std::to_string(ds["labels"].size()) + " label sets");
            const std::size_t dim = emb.empty() || !emb[0].is_array() ? 0 : emb[0].size();
            if (dim == 0) fail(ErrorCode::BadRequest, "embeddings must be non-empty arrays");
            task.embeddings = Matrix(emb.size(), dim);
            for (std::size_t i = 0; i < emb.size(); ++i) {
                if (!emb[i].is_array() || emb[i].size() != dim)
                    fail(ErrorCode::BadRequest, "embedding rows must all have length " + std::to_string(dim));
                for (std::size_t j = 0; j < dim; ++j) {
                    if (!emb[i][j].is_number()) fail(ErrorCode::BadRequest, "embeddings must be numbers");
                    task.embeddings(i, j) = emb[i][j].get<double>();
                }
                task.labels.push_back(labels_from_json(ds["labels"][i]));
            }
        }
        validate_labels(task.labels);

        std::lock_guard g(submit_mutex);
        if (owner.jobs().name_reserved(name))
            fail(ErrorCode::Conflict, "a job is already producing model '" + name + "'");
        for (const auto& e : local_models())
            if (e.manifest.name == name) fail(ErrorCode::Conflict, "model '" + name + "' already exists");
        const JobRecord job = owner.jobs().create(cfg, name);
        task.job_id = job.id;
        {
            std::lock_guard fg(flags_mutex);
            cancel_flags[job.id] = std::make_shared<std::atomic<bool>>(false);
        }
        {
            std::lock_guard qg(queue_mutex);
            queue.push_back(std::move(task));
        }
        queue_cv.notify_one();
        send_json(res, 202, {{"job_id", job.id}, {"state", "queued"}});
    }

    static void validate_labels(const std::vector<metrics::LabelSet>& labels) {
        if (labels.size() < 10)
            fail(ErrorCode::ClassTooSmall, "fine-tuning needs at least 10 labelled samples, got " +
                                               std::to_string(labels.size()));
        std::map<std::string, std::size_t> counts;
        for (const auto& ls : labels)
            for (const auto& l : ls) ++counts[l];
        if (counts.size() < 2) fail(ErrorCode::ClassTooSmall, "labels must cover at least 2 classes");
        for (const auto& [c, n] : counts)
            if (n < 2) fail(ErrorCode::ClassTooSmall, "class '" + c + "' has only " + std::to_string(n) + " sample");
    }

    void worker_loop() {
        for (;;) {
            Task task;
            {
                std::unique_lock g(queue_mutex);
                queue_cv.wait(g, [&] { return stopping || !queue.empty(); });
                if (stopping) return;
                task = std::move(queue.front());
                queue.pop_front();
            }
            run_task(task);
        }
    }

    std::shared_ptr<std::atomic<bool>> flag_for(const std::string& id) {
        std::lock_guard g(flags_mutex);
        auto& f = cancel_flags[id];
        if (!f) f = std::make_shared<std::atomic<bool>>(false);
        return f;
    }

    void finish(const std::string& id, JobState to, std::string error = {},
                std::optional<finetune::TrainingReport> report = std::nullopt) {
        try {
            owner.jobs().transition(id, to, std::move(error), std::move(report));
        } catch (const Error&) {
        }
    }

    void run_task(Task& task) {
        const auto flag = flag_for(task.job_id);
        try {
            owner.jobs().transition(task.job_id, JobState::running);
        } catch (const Error&) {
            return;  // cancelled while queued
        }
        const auto job = owner.jobs().get(task.job_id);
        try {
            Matrix x = std::move(task.embeddings);
            if (!task.recording_ids.empty()) {
                x = Matrix(task.recording_ids.size(), finetune::kEmbeddingDim);
                for (std::size_t i = 0; i < task.recording_ids.size(); ++i)
                    x.set_row(i, finetune::embed(load_recording(task.recording_ids[i])->ecg));
            }
            finetune::TrainHooks hooks;
            hooks.on_epoch = [&](std::size_t e) { owner.jobs().set_progress(task.job_id, e); };
            hooks.cancel = flag.get();
            auto result = finetune::train_head(x, task.labels, job->config, hooks);

            exchange::ModelManifest m;
            m.name = job->model_name;
            m.version = kModelVersion;
            m.kind = exchange::ModelKind::linear_head;
            m.labels = result.head.class_names;
            m.preprocessing = kPreprocessingTag;
            m.created_at = exchange::utc_timestamp();
            const std::string payload = exchange::save_model(result.head);
            m.sha256 = exchange::sha256_hex(payload);
            exchange::store_local(models_dir, payload, m);

            owner.jobs().set_progress(task.job_id, result.report.train_loss_per_epoch.size());
            finish(task.job_id, JobState::succeeded, {}, std::move(result.report));
        } catch (const Error& e) {
            if (stopping) return;  // abandoned by shutdown
            if (e.code() == ErrorCode::Cancelled) {
                finish(task.job_id, JobState::cancelled, "Cancelled: " + std::string(e.what()));
            } else {
                finish(task.job_id, JobState::failed, std::string(to_string(e.code())) + ": " + e.what());
            }
        } catch (const std::exception& e) {
            if (stopping) return;
            finish(task.job_id, JobState::failed, std::string("Internal: ") + e.what());
        }
    }

    void cancel_job(const std::string& id, httplib::Response& res) {
        auto job = owner.jobs().get(id);
        if (!job) fail(ErrorCode::NotFound, "no job " + id);
        if (is_terminal(job->state))
            fail(ErrorCode::Conflict, "job " + id + " already " + std::string(to_string(job->state)));
        flag_for(id)->store(true);
        if (job->state == JobState::queued) {
            try {
                job = owner.jobs().transition(id, JobState::cancelled, "Cancelled: cancelled while queued");
            } catch (const Error&) {
                job = owner.jobs().get(id);  // a worker picked it up first; the flag stops it
            }
        }
        res.status = 202;
        res.set_content(job_to_json(*job), "application/json");
    }

    // ---- models and prediction

    json entry_json(const exchange::RegistryEntry& e) {
        const auto& m = e.manifest;
        json doc = {{"name", m.name},
                    {"version", m.version},
                    {"kind", std::string(to_string(m.kind))},
                    {"labels", m.labels},
                    {"sha256", m.sha256},
                    {"created_at", m.created_at},
                    {"preprocessing", m.preprocessing},
                    {"state", std::string(to_string(e.state))},
                    {"opset", m.opset ? json(*m.opset) : json(nullptr)}};
        return doc;
    }

    void get_models(httplib::Response& res) {
        std::map<std::pair<std::string, std::string>, json> merged;
        json warnings = json::array();
        for (const auto& e : exchange::list_local(models_dir, exchange::EntryState::local_only).entries)
            merged[{e.manifest.name, e.manifest.version}] = entry_json(e);
        auto cached = exchange::list_local(cache_dir, exchange::EntryState::cached);
        for (const auto& w : cached.warnings) warnings.push_back(w);
        for (const auto& e : cached.entries) merged.emplace(std::pair{e.manifest.name, e.manifest.version}, entry_json(e));
        bool degraded = false;
        json registry_error = nullptr;
        if (cfg.exchange) {
            try {
                auto remote = exchange::list_remote(*cfg.exchange);
                for (const auto& w : remote.warnings) warnings.push_back(w);
                for (const auto& e : remote.entries) {
                    auto key = std::pair{e.manifest.name, e.manifest.version};
                    auto it = merged.find(key);
                    if (it == merged.end()) {
                        merged.emplace(key, entry_json(e));
                    } else if ((*it).second["sha256"] != e.manifest.sha256) {
                        (*it).second["update_available"] = true;
                    }
                }
            } catch (const Error& e) {
                degraded = true;
                registry_error = {{"code", std::string(to_string(e.code()))}, {"message", e.what()}};
            }
        }
        json models = json::array();
        for (auto& [k, v] : merged) models.push_back(std::move(v));
        send_json(res, 200,
                  {{"models", models},
                   {"degraded", degraded},
                   {"registry", cfg.exchange ? json(cfg.exchange->url) : json(nullptr)},
                   {"registry_error", registry_error},
                   {"warnings", warnings}});
    }

    void sync_models(httplib::Response& res) {
        auto cached = [&] {
            json models = json::array();
            for (const auto& e : exchange::list_local(cache_dir, exchange::EntryState::cached).entries)
                models.push_back(entry_json(e));
            return models;
        };
        if (!cfg.exchange) {
            send_error(res, 502, ErrorCode::RegistryUnavailable, "no registry configured (EXCHANGE_URL)",
                       {{"models", cached()}, {"degraded", true}});
            return;
        }
        try {
            const auto s = exchange::sync(*cfg.exchange, cache_dir);
            json failures = json::array();
            for (const auto& f : s.failures)
                failures.push_back({{"model", f.model}, {"code", std::string(to_string(f.code))}, {"message", f.message}});
            send_json(res, 200,
                      {{"downloaded", s.downloaded},
                       {"up_to_date", s.up_to_date},
                       {"failures", failures},
                       {"warnings", s.warnings},
                       {"models", cached()}});
        } catch (const Error& e) {
            send_error(res, 502, ErrorCode::RegistryUnavailable,
                       std::string(to_string(e.code())) + ": " + e.what(),
                       {{"models", cached()}, {"degraded", true}, {"cause", std::string(to_string(e.code()))}});
        }
    }

    void predict(const httplib::Request& req, httplib::Response& res) {
        const json doc = body_json(req);
        if (!doc.contains("model") || !doc["model"].is_string()) fail(ErrorCode::BadRequest, "'model' is required");
        if (!doc.contains("recordings") || !doc["recordings"].is_array() || doc["recordings"].empty())
            fail(ErrorCode::BadRequest, "'recordings' must be a non-empty array of ids");
        const std::string name = doc["model"].get<std::string>();
        const std::optional<std::string> version =
            doc.contains("version") ? std::optional(doc["version"].get<std::string>()) : std::nullopt;

        std::optional<exchange::RegistryEntry> chosen;
        for (const auto& e : local_models()) {
            if (e.manifest.name != name || (version && e.manifest.version != *version)) continue;
            if (!chosen || std::tie(e.manifest.created_at, e.manifest.version) >
                               std::tie(chosen->manifest.created_at, chosen->manifest.version))
                chosen = e;
        }
        if (!chosen) fail(ErrorCode::NotFound, "model '" + name + "' is not available locally");
        if (chosen->manifest.kind == exchange::ModelKind::external_onnx)
            fail(ErrorCode::NotExecutable, "model '" + name +
                                               "' is an external ONNX graph; it is listed and served but cannot be "
                                               "executed without an external runtime");
        const fs::path dir = chosen->state == exchange::EntryState::local_only ? models_dir : cache_dir;
        const auto model = exchange::load_model(exchange::read_payload(dir, chosen->manifest), &chosen->manifest);
        if (exchange::input_dim(model) != finetune::kEmbeddingDim)
            fail(ErrorCode::ShapeMismatch, "model expects " + std::to_string(exchange::input_dim(model)) +
                                               "-dim inputs, recordings embed to " +
                                               std::to_string(finetune::kEmbeddingDim));

        std::vector<std::string> ids;
        for (const auto& v : doc["recordings"]) {
            if (!v.is_string()) fail(ErrorCode::BadRequest, "recording ids must be strings");
            ids.push_back(v.get<std::string>());
        }
        Matrix x(ids.size(), finetune::kEmbeddingDim);
        for (std::size_t i = 0; i < ids.size(); ++i) x.set_row(i, finetune::embed(load_recording(ids[i])->ecg));
        const Matrix p = exchange::predict(model, x);

        json rows = json::array();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            json probs = json::array(), buckets = json::array();
            for (double v : p.row(i)) {
                probs.push_back(v);
                buckets.push_back(std::string(probability_bucket(v)));
            }
            rows.push_back({{"recording", ids[i]}, {"probabilities", probs}, {"buckets", buckets}});
        }
        send_json(res, 200,
                  {{"model", name},
                   {"version", chosen->manifest.version},
                   {"classes", exchange::class_names(model)},
                   {"multilabel", std::visit([](const auto& m) { return m.multilabel; }, model)},
                   {"rows", rows},
                   {"buckets", {{"low", "p < 0.3"}, {"mid", "0.3 <= p < 0.7"}, {"high", "p >= 0.7"}}}});
    }

    // ---- routing

    void routes() {
        server.new_task_queue = [] { return new httplib::ThreadPool(32); };
        server.set_payload_max_length(cfg.max_upload_mb * 1024 * 1024);
        server.set_keep_alive_max_count(20);
        server.set_tcp_nodelay(true);

        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
            ErrorCode code = ErrorCode::BadRequest;
            if (res.status == 404) code = ErrorCode::NotFound;
            else if (res.status == 413) code = ErrorCode::PayloadTooLarge;
            else if (res.status >= 500) code = ErrorCode::Internal;
            send_error(res, res.status, code, httplib::status_message(res.status));
            return httplib::Server::HandlerResponse::Handled;
        });
        server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
            send_error(res, 500, ErrorCode::Internal, "unhandled exception");
        });

        const std::string api = "/api/v1";
        const std::string id_re = "([^/]+)";
        server.Get(api + "/health", guard([](const auto&, auto& res) { send_json(res, 200, {{"status", "ok"}}); }));

        server.Post(api + "/recordings", guard([this](const auto& req, auto& res) { post_recording(req, res); }));
        server.Get(api + "/recordings", guard([this](const auto&, auto& res) {
                       json list = json::array();
                       std::vector<fs::path> metas;
                       for (const auto& de : fs::directory_iterator(recordings_dir))
                           if (de.path().extension() == ".json") metas.push_back(de.path());
                       std::sort(metas.begin(), metas.end());
                       for (const auto& p : metas) list.push_back(json::parse(read_file(p)));
                       send_json(res, 200, {{"recordings", list}});
                   }));
        server.Get(api + "/recordings/" + id_re, guard([this](const auto& req, auto& res) {
                       send_json(res, 200, recording_meta(*load_recording(req.matches[1])));
                   }));
        server.Delete(api + "/recordings/" + id_re,
                      guard([this](const auto& req, auto& res) { delete_recording(req.matches[1], res); }));
        server.Get(api + "/recordings/" + id_re + "/views/" + id_re,
                   guard([this](const auto& req, auto& res) { get_view(req, res); }));

        server.Post(api + "/finetune", guard([this](const auto& req, auto& res) { post_finetune(req, res); }));
        server.Get(api + "/finetune", guard([this](const auto&, auto& res) {
                       json list = json::array();
                       for (const auto& j : owner.jobs().list()) list.push_back(json::parse(job_to_json(*j)));
                       send_json(res, 200, {{"jobs", list}});
                   }));
        server.Get(api + "/finetune/" + id_re + "/status", guard([this](const auto& req, auto& res) {
                       auto job = owner.jobs().get(req.matches[1]);
                       if (!job) fail(ErrorCode::NotFound, "no job " + std::string(req.matches[1]));
                       res.set_content(job_to_json(*job), "application/json");
                   }));
        server.Get(api + "/finetune/" + id_re + "/report", guard([this](const auto& req, auto& res) {
                       auto job = owner.jobs().get(req.matches[1]);
                       if (!job) fail(ErrorCode::NotFound, "no job " + std::string(req.matches[1]));
                       if (job->state != JobState::succeeded || !job->report)
                           fail(ErrorCode::NotReady,
                                "job is " + std::string(to_string(job->state)) + "; the report exists once it succeeds");
                       res.set_content(finetune::report_to_json(*job->report), "application/json");
                   }));
        server.Post(api + "/finetune/" + id_re + "/cancel",
                    guard([this](const auto& req, auto& res) { cancel_job(req.matches[1], res); }));

        server.Post(api + "/predict", guard([this](const auto& req, auto& res) { predict(req, res); }));
        server.Get(api + "/models", guard([this](const auto&, auto& res) { get_models(res); }));
        server.Post(api + "/models/sync", guard([this](const auto&, auto& res) { sync_models(res); }));
    }

    void shutdown() {
        stopping = true;
        {
            std::lock_guard g(flags_mutex);
            for (auto& [id, f] : cancel_flags) f->store(true);
        }
        queue_cv.notify_all();
        server.stop();
        if (server_thread.joinable()) server_thread.join();
        for (auto& w : workers)
            if (w.joinable()) w.join();
        workers.clear();
    }
};

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    fs::create_directories(cfg_.data_dir);
    jobs_ = std::make_unique<JobStore>(cfg_.data_dir / "jobs");
    impl_ = std::make_unique<Impl>(*this, cfg_);
}

Service::~Service() { stop(); }

int Service::start() {
    if (cfg_.port == 0) {
        impl_->bound_port = impl_->server.bind_to_any_port(cfg_.host);
    } else if (impl_->server.bind_to_port(cfg_.host, cfg_.port)) {
        impl_->bound_port = cfg_.port;
    }
    if (impl_->bound_port <= 0)
        fail(ErrorCode::Internal, "cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
    impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return impl_->bound_port;
}

void Service::run() {
    start();
    if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

void Service::stop() {
    if (impl_) impl_->shutdown();
}

}  // namespace ecgx::service
