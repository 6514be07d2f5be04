#include <pthread.h>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "ecgx/analysis.hpp"
#include "ecgx/error.hpp"
#include "ecgx/exchange.hpp"
#include "ecgx/finetune.hpp"
#include "ecgx/formats.hpp"
#include "ecgx/metrics.hpp"
#include "ecgx/service.hpp"
#include "ecgx/signal.hpp"
#include "json.hpp"

using namespace ecgx;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kFailed = 2;

// Raised for bad flag values found after CLI11 has accepted the command line.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) fail(ErrorCode::NotFound, "cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, std::string_view bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::Internal, "cannot write " + p.string());
}

json parse_json_file(const fs::path& p) {
    try {
        return json::parse(read_file(p));
    } catch (const json::exception& e) {
        fail(ErrorCode::MalformedJson, p.string() + ": " + e.what());
    }
}

// Input options shared by every command that reads recordings.
struct InputFlags {
    std::string format;
    double rate_hz = 0.0;
    bool no_baseline = false;
    bool no_clip = false;

    void add_to(CLI::App& cmd, bool normalization = true) {
        cmd.add_option("--format", format, "Input format: csv, npy, npz, wfdb, dicom, mat, xml, json");
        cmd.add_option("--rate", rate_hz, "Sampling rate in Hz for formats that do not store one")
            ->check(CLI::PositiveNumber);
        if (normalization) {
            cmd.add_flag("--no-baseline", no_baseline, "Skip baseline wander removal");
            cmd.add_flag("--no-clip", no_clip, "Skip quantile clipping");
        }
    }

    /// Resolves the format up front so a file nobody can identify is a usage error.
    SourceFormat format_for(const fs::path& in) const {
        if (!format.empty()) {
            auto f = formats::format_from_name(format);
            if (!f) throw UsageError("unknown --format '" + format + "'");
            return *f;
        }
        const std::string bytes = read_file(in);
        try {
            return formats::detect_format(formats::as_bytes(bytes), in.filename().string()).format;
        } catch (const Error& e) {
            throw UsageError(std::string(e.what()) + "; pass --format");
        }
    }

    NormalizationOptions normalization() const {
        NormalizationOptions o;
        o.enable_baseline_removal = !no_baseline;
        o.enable_clipping = !no_clip;
        return o;
    }

    RawRecording read(const fs::path& in) const {
        formats::ParseOptions po;
        if (rate_hz > 0) po.rate_hz = rate_hz;
        return formats::read_recording(in, format_for(in), po);
    }

    StandardEcg standard(const fs::path& in) const { return normalize(read(in), normalization()); }
};

formats::ExportFormat output_format(const std::string& to, const fs::path& out) {
    std::string name = to;
    if (name.empty()) {
        name = out.extension().string();
        if (!name.empty()) name.erase(0, 1);
    }
    auto f = formats::export_format_from_name(name);
    if (!f) throw UsageError("cannot tell the output format from '" + out.string() + "'; pass --to csv|npy|json");
    return *f;
}

void emit(const fs::path& out, const formats::Bytes& bytes) {
    if (out.empty() || out == "-") {
        std::cout.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        std::cout.flush();
    } else {
        write_file(out, formats::to_string_bytes(bytes));
    }
}

// ---------------------------------------------------------------- convert

struct ConvertCmd {
    fs::path in, out;
    std::string to;
    InputFlags input;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("convert", "Parse, normalize to 12 x 1000 at 100 Hz in mV, and export");
        cmd->add_option("--in", in, "Input recording (for WFDB the .hea or .dat file)")->required();
        cmd->add_option("--out", out, "Output file")->required();
        cmd->add_option("--to", to, "Output format: csv, npy, json (default: from --out extension)");
        input.add_to(*cmd);
        cmd->callback([this] { run(); });
    }

    void run() const {
        const auto fmt = output_format(to, out);
        const StandardEcg ecg = input.standard(in);
        emit(out, formats::export_view(formats::table_of(ecg), {formats::ExportWhat::standard, fmt}));
    }
};

// ---------------------------------------------------------------- analyze

struct AnalyzeCmd {
    fs::path in, out;
    std::string view = "median";
    std::string to;
    double bpm = 60.0;
    InputFlags input;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("analyze", "Detect beats and export an analysis view");
        cmd->add_option("--in", in, "Input recording")->required();
        cmd->add_option("--view", view, "raw, standard, median, aligned or fiducials")
            ->check(CLI::IsMember({"raw", "standard", "median", "aligned", "fiducials"}))
            ->capture_default_str();
        cmd->add_option("--out", out, "Output file (default: stdout)");
        cmd->add_option("--to", to, "Output format: csv, npy, json (default: from --out, else json)");
        cmd->add_option("--bpm", bpm, "Target heart rate for the aligned view")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        input.add_to(*cmd);
        cmd->callback([this] { run(); });
    }

    void run() const {
        const auto fmt = out.empty() && to.empty() ? formats::ExportFormat::json : output_format(to, out);
        const auto what = *formats::export_what_from_name(view);
        if (what == formats::ExportWhat::fiducials && fmt == formats::ExportFormat::npy)
            throw UsageError("fiducials export as csv or json");
        if (what == formats::ExportWhat::raw) {
            emit(out, formats::export_view(formats::table_of(input.read(in)), {what, fmt}));
            return;
        }
        const StandardEcg ecg = input.standard(in);
        formats::ExportPayload payload = formats::table_of(ecg);
        if (what != formats::ExportWhat::standard) {
            const auto fid = analysis::detect_rpeaks(ecg);
            if (what == formats::ExportWhat::fiducials) payload = fid;
            if (what == formats::ExportWhat::median_beats) payload = formats::table_of(analysis::median_beat(ecg, fid));
            if (what == formats::ExportWhat::aligned) payload = formats::table_of(analysis::rlign_transform(ecg, fid, bpm));
        }
        emit(out, formats::export_view(payload, {what, fmt}));
    }
};

// ---------------------------------------------------------------- finetune

constexpr const char* kEmbeddingSuffix = ".embedding.json";

bool is_embedding_file(const std::string& name) {
    return name.size() > std::string_view(kEmbeddingSuffix).size() &&
           name.ends_with(kEmbeddingSuffix);
}

std::vector<double> embedding_of(const fs::path& file, const InputFlags& input) {
    if (is_embedding_file(file.filename().string())) {
        const json doc = parse_json_file(file);
        if (!doc.is_array()) fail(ErrorCode::MalformedJson, file.string() + ": expected an array of numbers");
        std::vector<double> v;
        for (const auto& x : doc) {
            if (!x.is_number()) fail(ErrorCode::MalformedJson, file.string() + ": expected an array of numbers");
            v.push_back(x.get<double>());
        }
        return v;
    }
    return finetune::embed(input.standard(file));
}

std::map<std::string, metrics::LabelSet> read_label_file(const fs::path& file) {
    const json doc = parse_json_file(file);
    if (!doc.is_object()) fail(ErrorCode::MalformedJson, file.string() + ": expected an object of name -> [classes]");
    std::map<std::string, metrics::LabelSet> out;
    for (const auto& [name, classes] : doc.items()) {
        if (!classes.is_array()) fail(ErrorCode::MalformedJson, file.string() + ": '" + name + "' is not an array");
        metrics::LabelSet set;
        for (const auto& c : classes) {
            if (!c.is_string()) fail(ErrorCode::MalformedJson, file.string() + ": '" + name + "' has a non-string class");
            set.push_back(c.get<std::string>());
        }
        out[name] = std::move(set);
    }
    return out;
}

struct FinetuneCmd {
    fs::path data, labels, out, config_file;
    std::string model;
    std::string version = "1";
    std::optional<std::size_t> epochs, batch_size, seed;
    std::optional<double> gamma, lr;
    InputFlags input;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("finetune", "Train a classification head and write model plus manifest");
        cmd->add_option("--data", data, "Directory with recordings or *.embedding.json vectors")->required();
        cmd->add_option("--labels", labels, "JSON object: file name -> array of classes")->required();
        cmd->add_option("--model", model, "Name of the new model")->required();
        cmd->add_option("--out", out, "Directory receiving the payload and manifest")->required();
        cmd->add_option("--version", version, "Version of the new model")->capture_default_str();
        cmd->add_option("--config", config_file, "JSON training configuration");
        cmd->add_option("--epochs", epochs, "Maximum number of epochs");
        cmd->add_option("--batch-size", batch_size, "Mini-batch size");
        cmd->add_option("--gamma", gamma, "Per-epoch learning-rate decay factor, in (0, 1]");
        cmd->add_option("--lr", lr, "Learning rate (default: learning-rate finder)");
        cmd->add_option("--seed", seed, "Seed for splitting and shuffling");
        input.add_to(*cmd);
        cmd->callback([this] { run(); });
    }

    finetune::FineTuneConfig config() const {
        try {
            finetune::FineTuneConfig cfg;
            if (!config_file.empty()) cfg = finetune::config_from_json(read_file(config_file));
            if (epochs) cfg.max_epochs = *epochs;
            if (batch_size) cfg.batch_size = *batch_size;
            if (gamma) cfg.gamma = *gamma;
            if (lr) cfg.lr = *lr;
            if (seed) cfg.seed = *seed;
            cfg.validate();
            return cfg;
        } catch (const Error& e) {
            throw UsageError(std::string(to_string(e.code())) + ": " + e.what());
        }
    }

    void run() const {
        const auto cfg = config();
        exchange::ModelManifest m;
        m.name = model;
        m.version = version;
        m.labels = {"placeholder"};
        m.sha256 = std::string(64, '0');
        m.created_at = exchange::utc_timestamp();
        try {
            exchange::validate_manifest(m);
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
        if (cfg.method == finetune::TrainingMethod::full)
            fail(ErrorCode::UnsupportedAtDeskScale, "full fine-tuning needs the foundation model weights");

        const auto label_map = read_label_file(labels);
        if (label_map.empty()) fail(ErrorCode::TooFew, "label file lists no samples");
        std::vector<std::vector<double>> rows;
        std::vector<metrics::LabelSet> sample_labels;
        for (const auto& [name, classes] : label_map) {
            const fs::path file = data / name;
            if (!fs::exists(file)) fail(ErrorCode::NotFound, "no file " + file.string());
            rows.push_back(embedding_of(file, input));
            sample_labels.push_back(classes);
            if (rows.back().size() != rows.front().size())
                fail(ErrorCode::ShapeMismatch, name + " has " + std::to_string(rows.back().size()) +
                                                   " dimensions, expected " + std::to_string(rows.front().size()));
        }
        Matrix x(rows.size(), rows.front().size());
        for (std::size_t i = 0; i < rows.size(); ++i) x.set_row(i, rows[i]);

        finetune::TrainHooks hooks;
        hooks.on_epoch = [](std::size_t e) { std::cerr << "epoch " << e << "\n"; };
        const auto result = finetune::train_head(x, sample_labels, cfg, hooks);

        m.labels = result.head.class_names;
        m.preprocessing = "ecgx-normalize-v1;median-beat-512";
        m.created_at = exchange::utc_timestamp();
        const std::string payload = exchange::save_model(result.head);
        m.sha256 = exchange::sha256_hex(payload);
        const auto path = exchange::store_local(out, payload, m);
        std::cerr << "wrote " << path.string() << "\n";
        std::cout << json::parse(finetune::report_to_json(result.report)).dump(2) << "\n";
    }
};

// ---------------------------------------------------------------- predict

struct PredictCmd {
    fs::path model;
    std::vector<fs::path> inputs;
    InputFlags input;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("predict", "Score recordings with a native model");
        cmd->add_option("--model", model, "Model payload (.ecgxmdl); a sidecar manifest is checked when present")
            ->required();
        cmd->add_option("--in", inputs, "Input recordings or *.embedding.json vectors")->required();
        input.add_to(*cmd);
        cmd->callback([this] { run(); });
    }

    void run() const {
        const std::string payload = read_file(model);
        fs::path sidecar = model;
        sidecar.replace_extension(".manifest.json");
        std::optional<exchange::ModelManifest> manifest;
        if (fs::exists(sidecar)) {
            manifest = exchange::validate_manifest(read_file(sidecar));
            if (exchange::sha256_hex(payload) != manifest->sha256)
                fail(ErrorCode::HashMismatch, model.string() + " does not match " + sidecar.string());
        }
        const auto net = exchange::load_model(payload, manifest ? &*manifest : nullptr);

        Matrix x(inputs.size(), exchange::input_dim(net));
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            const auto e = embedding_of(inputs[i], input);
            if (e.size() != x.cols())
                fail(ErrorCode::ShapeMismatch, inputs[i].string() + " gives " + std::to_string(e.size()) +
                                                   " features, the model takes " + std::to_string(x.cols()));
            x.set_row(i, e);
        }
        const Matrix probs = exchange::predict(net, x);
        json rows = json::array();
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            json p = json::array(), b = json::array();
            for (std::size_t k = 0; k < probs.cols(); ++k) {
                p.push_back(probs(i, k));
                b.push_back(service::probability_bucket(probs(i, k)));
            }
            rows.push_back({{"recording", inputs[i].filename().string()}, {"probabilities", p}, {"buckets", b}});
        }
        json doc = {{"model", manifest ? manifest->name : model.stem().string()},
                    {"classes", exchange::class_names(net)},
                    {"multilabel", exchange::kind_of(net) == exchange::ModelKind::linear_head
                                       ? std::get<finetune::LinearHead>(net).multilabel
                                       : std::get<exchange::Mlp>(net).multilabel},
                    {"rows", rows}};
        std::cout << doc.dump(2) << "\n";
    }
};

// ---------------------------------------------------------------- eval

std::vector<double> read_values(const fs::path& file) {
    std::string text = read_file(file);
    for (char& c : text)
        if (c == ',' || c == ';') c = ' ';
    std::istringstream in(text);
    std::vector<double> v;
    std::string tok;
    while (in >> tok) {
        if (tok.front() == '#') {
            std::getline(in, tok);
            continue;
        }
        try {
            std::size_t used = 0;
            v.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            fail(ErrorCode::MalformedNumbers, file.string() + ": '" + tok + "' is not a number");
        }
    }
    return v;
}

json aggregate_json(const metrics::AggregateStats& a) {
    return {{"average", a.average}, {"median", a.median}, {"iqr", a.iqr}, {"cv", a.cv}};
}

struct EvalCmd {
    fs::path truth, pred, values;
    std::string labelmap;
    std::vector<std::string> sections;
    double threshold = 0.5;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("eval", "Score predictions, or aggregate a column of per-task scores");
        auto* t = cmd->add_option("--truth", truth, "JSON object: recording -> array of true codes or classes");
        auto* p = cmd->add_option("--pred", pred,
                                  "Predictions: output of 'predict', or recording -> array of classes");
        auto* v = cmd->add_option("--values", values, "Text file of per-task scores to aggregate");
        t->needs(p);
        p->needs(t);
        v->excludes(t)->excludes(p);
        cmd->add_option("--labelmap", labelmap, "Map true codes first: icd10, physionet, edms or a map file");
        cmd->add_option("--section", sections, "Label map sections to use (default: all)");
        cmd->add_option("--threshold", threshold, "Probability threshold for a positive class")
            ->check(CLI::Range(0.0, 1.0))
            ->capture_default_str();
        cmd->callback([this, cmd] {
            if (values.empty() && truth.empty()) throw CLI::RequiredError("--truth/--pred or --values");
            (void)cmd;
            run();
        });
    }

    void run() const {
        if (!values.empty()) {
            const auto v = read_values(values);
            json doc = aggregate_json(metrics::aggregate(v));
            doc["n"] = v.size();
            std::cout << doc.dump(2) << "\n";
            return;
        }
        std::optional<metrics::LabelMap> map;
        if (!labelmap.empty()) {
            try {
                map = metrics::LabelMap::load(metrics::labelmap_path(labelmap));
            } catch (const Error& e) {
                throw UsageError(std::string("--labelmap: ") + e.what());
            }
        }
        const auto truth_map = read_label_file(truth);
        const json pdoc = parse_json_file(pred);

        std::vector<std::string> names;
        std::vector<metrics::LabelSet> truth_sets;
        auto truth_of = [&](const std::string& name) {
            auto it = truth_map.find(name);
            if (it == truth_map.end()) fail(ErrorCode::NotFound, "no truth for '" + name + "'");
            return it->second;
        };

        metrics::F1Report f1;
        std::vector<std::string> classes;
        if (pdoc.is_object() && pdoc.contains("rows") && pdoc.contains("classes")) {
            classes = pdoc["classes"].get<std::vector<std::string>>();
            const auto& rows = pdoc["rows"];
            if (rows.size() != truth_map.size())
                fail(ErrorCode::LengthMismatch, std::to_string(rows.size()) + " predictions for " +
                                                    std::to_string(truth_map.size()) + " truth entries");
            Matrix probs(rows.size(), classes.size());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const auto p = rows[i].at("probabilities").get<std::vector<double>>();
                if (p.size() != classes.size())
                    fail(ErrorCode::LengthMismatch, "row " + std::to_string(i) + " has the wrong number of classes");
                probs.set_row(i, p);
                truth_sets.push_back(truth_of(rows[i].at("recording").get<std::string>()));
            }
            if (map) truth_sets = metrics::map_labels(truth_sets, *map, sections);
            f1 = metrics::evaluate_dataset(truth_sets, probs, classes, threshold).f1;
        } else {
            const auto pred_map = read_label_file(pred);
            if (pred_map.size() != truth_map.size())
                fail(ErrorCode::LengthMismatch, std::to_string(pred_map.size()) + " predictions for " +
                                                    std::to_string(truth_map.size()) + " truth entries");
            std::vector<metrics::LabelSet> pred_sets;
            for (const auto& [name, set] : pred_map) {
                truth_sets.push_back(truth_of(name));
                pred_sets.push_back(set);
            }
            if (map) truth_sets = metrics::map_labels(truth_sets, *map, sections);
            std::set<std::string> all;
            for (const auto* sets : {&truth_sets, &pred_sets})
                for (const auto& s : *sets) all.insert(s.begin(), s.end());
            classes.assign(all.begin(), all.end());
            f1 = metrics::f1_scores(truth_sets, pred_sets, classes);
        }

        json per_class = json::array();
        std::vector<double> class_f1;
        for (const auto& c : f1.per_class) {
            per_class.push_back({{"name", c.name},
                                 {"support", c.support},
                                 {"precision", c.precision},
                                 {"recall", c.recall},
                                 {"f1", c.f1}});
            class_f1.push_back(c.f1);
        }
        json doc = {{"n_samples", truth_sets.size()},
                    {"classes", classes},
                    {"weighted_f1", f1.weighted},
                    {"macro_f1", f1.macro},
                    {"per_class", per_class}};
        if (!class_f1.empty()) doc["per_class_aggregate"] = aggregate_json(metrics::aggregate(class_f1));
        std::cout << doc.dump(2) << "\n";
    }
};

// ---------------------------------------------------------------- sync

json summary_json(const exchange::SyncSummary& s) {
    json failures = json::array();
    for (const auto& f : s.failures)
        failures.push_back({{"model", f.model}, {"code", to_string(f.code)}, {"message", f.message}});
    return {{"downloaded", s.downloaded}, {"up_to_date", s.up_to_date}, {"failures", failures}, {"warnings", s.warnings}};
}

struct SyncCmd {
    std::string url, user;
    fs::path cache = "registry-cache";
    bool list_only = false;
    int timeout_ms = 5000;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("sync", "Mirror the model exchange into a local cache");
        cmd->add_option("--url", url, "Collection URL, e.g. http://host:8000/models/")->required()->envname("EXCHANGE_URL");
        cmd->add_option("--user", user, "User name")->envname("EXCHANGE_USER");
        cmd->add_option("--cache", cache, "Cache directory")->capture_default_str();
        cmd->add_flag("--list", list_only, "Only list the remote models");
        cmd->add_option("--timeout-ms", timeout_ms, "Request timeout")->check(CLI::PositiveNumber)->capture_default_str();
        cmd->footer("The password is read from EXCHANGE_PASS.");
        cmd->callback([this] { run(); });
    }

    void run() const {
        exchange::ServerConfig server;
        server.url = url;
        server.user = user;
        if (const char* p = std::getenv("EXCHANGE_PASS")) server.password = p;
        server.timeout = std::chrono::milliseconds(timeout_ms);
        if (list_only) {
            const auto listing = exchange::list_remote(server);
            json models = json::array();
            for (const auto& e : listing.entries)
                models.push_back(json::parse(exchange::manifest_to_json(e.manifest)));
            std::cout << json({{"models", models}, {"warnings", listing.warnings}}).dump(2) << "\n";
            return;
        }
        const auto summary = exchange::sync(server, cache);
        std::cout << summary_json(summary).dump(2) << "\n";
        if (!summary.failures.empty()) fail(summary.failures.front().code, "some models failed to sync");
    }
};

// ---------------------------------------------------------------- serve

struct ServeCmd {
    std::optional<fs::path> config;
    std::optional<fs::path> data_dir;
    std::optional<std::string> host;
    std::optional<int> port;
    std::optional<std::size_t> workers;

    void add(CLI::App& app) {
        auto* cmd = app.add_subcommand("serve", "Run the HTTP service");
        cmd->add_option("--config", config, "JSON service configuration");
        cmd->add_option("--data-dir", data_dir, "Storage directory");
        cmd->add_option("--host", host, "Listen address");
        cmd->add_option("--port", port, "Listen port")->check(CLI::Range(0, 65535));
        cmd->add_option("--workers", workers, "Fine-tuning worker threads");
        cmd->footer("Environment: DATA_DIR, PORT, WORKERS, MAX_UPLOAD_MB, EXCHANGE_URL, EXCHANGE_USER, EXCHANGE_PASS.");
        cmd->callback([this] { run(); });
    }

    void run() const {
        service::ServiceConfig cfg;
        try {
            cfg = service::ServiceConfig::load(config);
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
        if (data_dir) cfg.data_dir = *data_dir;
        if (host) cfg.host = *host;
        if (port) cfg.port = *port;
        if (workers) cfg.workers = *workers;
        // signals go to a waiter thread; stop() is not async-signal-safe
        sigset_t set;
        sigemptyset(&set);
        sigaddset(&set, SIGINT);
        sigaddset(&set, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set, nullptr);

        service::Service svc(cfg);
        const int port = svc.start();
        std::cerr << "serving " << cfg.data_dir.string() << " on " << cfg.host << ":" << port << "\n";
        int sig = 0;
        sigwait(&set, &sig);
        std::cerr << "stopping\n";
        svc.stop();
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ECG analysis and fine-tuning toolkit", "ecgx"};
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all", "Help for every command");

    ConvertCmd convert;
    AnalyzeCmd analyze;
    FinetuneCmd finetune_cmd;
    PredictCmd predict;
    EvalCmd eval;
    SyncCmd sync;
    ServeCmd serve;
    convert.add(app);
    analyze.add(app);
    finetune_cmd.add(app);
    predict.add(app);
    eval.add(app);
    sync.add(app);
    serve.add(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const Error& e) {
        std::cerr << to_string(e.code()) << ": " << e.what() << "\n";
        return kFailed;
    } catch (const std::exception& e) {
        std::cerr << "Internal: " << e.what() << "\n";
        return kFailed;
    }
    return kOk;
}
