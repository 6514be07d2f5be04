#include <doctest.h>

#include <fcntl.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "ecgx/analysis.hpp"
#include "ecgx/exchange.hpp"
#include "ecgx/finetune.hpp"
#include "ecgx/formats.hpp"
#include "ecgx/metrics.hpp"
#include "httplib.h"
#include "json.hpp"
#include "support/blobs.hpp"
#include "support/dav_server.hpp"
#include "support/published.hpp"
#include "support/synthetic.hpp"
#include "support/temp_dir.hpp"

using namespace ecgx;
using nlohmann::json;
namespace fs = std::filesystem;
using namespace std::chrono_literals;

namespace {

const fs::path kCli = ECGX_CLI_PATH;
const fs::path kGolden = ECGX_GOLDEN_DIR;
const fs::path kFixtures = ECGX_FIXTURE_DIR;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, std::string_view s) { std::ofstream(p, std::ios::binary) << s; }

struct Run {
    int rc = -1;
    std::string out, err;
};

std::string quote(const std::string& s) {
    std::string q = "'";
    for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return q + "'";
}

Run run(const std::vector<std::string>& args, const std::string& env = {}) {
    static testing::TempDir scratch;
    static int counter = 0;
    const auto out = scratch.path / ("out" + std::to_string(counter));
    const auto err = scratch.path / ("err" + std::to_string(counter++));
    std::string cmd = env + " " + quote(kCli.string());
    for (const auto& a : args) cmd += " " + quote(a);
    cmd += " >" + quote(out.string()) + " 2>" + quote(err.string());
    const int status = std::system(cmd.c_str());
    Run r;
    r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

// Blob embeddings written as *.embedding.json with a label file.
void write_blob_fixture(const fs::path& dir, std::size_t n, std::size_t classes, std::uint64_t seed) {
    const auto b = testing::make_blobs(n, classes, 16, 3.0, seed);
    json labels = json::object();
    for (std::size_t i = 0; i < n; ++i) {
        const std::string name = "s" + std::to_string(i) + ".embedding.json";
        auto row = b.x.row(i);
        spit(dir / name, json(std::vector<double>(row.begin(), row.end())).dump());
        labels[name] = b.labels[i];
    }
    spit(dir / "labels.json", labels.dump());
}

int free_port() {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in a{};
    a.sin_family = AF_INET;
    a.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    ::bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof a);
    socklen_t len = sizeof a;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len);
    ::close(fd);
    return ntohs(a.sin_port);
}

}  // namespace

TEST_CASE("--help output matches the golden files and exits 0") {
    const std::vector<std::string> commands = {"", "convert", "analyze", "finetune", "predict", "eval", "sync", "serve"};
    for (const auto& c : commands) {
        CAPTURE(c);
        std::vector<std::string> args;
        if (!c.empty()) args.push_back(c);
        args.push_back("--help");
        const Run r = run(args);
        CHECK(r.rc == 0);
        const fs::path golden = kGolden / ((c.empty() ? std::string("ecgx") : c) + ".txt");
        REQUIRE(fs::exists(golden));
        CHECK(r.out == slurp(golden));
    }
}

TEST_CASE("usage errors exit 1") {
    CHECK(run({}).rc == 1);
    CHECK(run({"frobnicate"}).rc == 1);
    CHECK(run({"convert", "--in", "x.npy"}).rc == 1);  // --out missing
    CHECK(run({"analyze", "--in", "x.npy", "--view", "spectrum"}).rc == 1);
    CHECK(run({"eval"}).rc == 1);
    CHECK(run({"eval", "--truth", "a.json"}).rc == 1);
}

TEST_CASE("convert") {
    testing::TempDir dir;
    const auto out = dir.path / "a.npy";

    SUBCASE("WFDB pair to the standard npy") {
        const Run r = run({"convert", "--in", (kFixtures / "wfdb_12lead.hea").string(), "--out", out.string()});
        REQUIRE(r.rc == 0);
        const StandardEcg expected = normalize(formats::read_recording(kFixtures / "wfdb_12lead.dat"));
        CHECK(slurp(out) == formats::to_string_bytes(formats::write_npy(expected.samples())));
        const auto back = formats::read_recording(out, SourceFormat::npy, {.rate_hz = 100.0});
        CHECK(back.samples.rows() == 12);
        CHECK(back.samples.cols() == 1000);

        // a second run gives identical bytes
        const auto out2 = dir.path / "b.npy";
        REQUIRE(run({"convert", "--in", (kFixtures / "wfdb_12lead.dat").string(), "--out", out2.string()}).rc == 0);
        CHECK(slurp(out2) == slurp(out));
    }
    SUBCASE("normalization toggles") {
        const auto in = (kFixtures / "ecg_f8_12x5000.npy").string();
        REQUIRE(run({"convert", "--in", in, "--out", out.string(), "--rate", "500", "--no-baseline", "--no-clip"}).rc == 0);
        NormalizationOptions o;
        o.enable_baseline_removal = false;
        o.enable_clipping = false;
        const auto expected = normalize(formats::read_recording(in, std::nullopt, {.rate_hz = 500.0}), o);
        CHECK(slurp(out) == formats::to_string_bytes(formats::write_npy(expected.samples())));
    }
    SUBCASE("csv output by --to") {
        const auto csv = dir.path / "a.out";
        REQUIRE(run({"convert", "--in", (kFixtures / "wfdb_12lead.hea").string(), "--out", csv.string(), "--to", "csv"})
                    .rc == 0);
        CHECK(slurp(csv).rfind("# rate_hz=100\nI,II,III", 0) == 0);
    }
    SUBCASE("unknown extension without --format") {
        const auto odd = dir.path / "trace.bin";
        spit(odd, "1,2,3\n4,5,6\n");
        const Run r = run({"convert", "--in", odd.string(), "--out", out.string()});
        CHECK(r.rc == 1);
        CHECK(r.err.find("--format") != std::string::npos);
        CHECK(run({"convert", "--in", odd.string(), "--out", out.string(), "--format", "nope"}).rc == 1);
    }
    SUBCASE("output format cannot be inferred") {
        CHECK(run({"convert", "--in", (kFixtures / "wfdb_12lead.hea").string(), "--out", (dir.path / "x").string()}).rc ==
              1);
    }
    SUBCASE("operation errors exit 2 with the code on stderr") {
        const Run bad = run({"convert", "--in", (kFixtures / "bad_dtype_u1.npy").string(), "--out", out.string()});
        CHECK(bad.rc == 2);
        CHECK(bad.err.rfind("UnsupportedDtype", 0) == 0);
        const auto broken = dir.path / "broken.csv";
        spit(broken, "I,II\n1,2,3\n");
        const Run csv = run({"convert", "--in", broken.string(), "--out", out.string()});
        CHECK(csv.rc == 2);
        CHECK(csv.err.rfind("MalformedCsv", 0) == 0);
        CHECK(run({"convert", "--in", (dir.path / "missing.npy").string(), "--out", out.string()}).rc == 2);
        CHECK_FALSE(fs::exists(out));
    }
}

TEST_CASE("analyze") {
    testing::TempDir dir;
    const auto in = dir.path / "rhythm.npy";
    const StandardEcg ecg = testing::synthetic_rhythm(60.0, 0.5);
    spit(in, formats::to_string_bytes(formats::write_npy(ecg.samples())));

    const Run med = run({"analyze", "--in", in.string(), "--rate", "100"});
    REQUIRE(med.rc == 0);
    const json m = json::parse(med.out);
    const StandardEcg standard = normalize(testing::as_recording(ecg.samples(), 100.0));
    const auto fid = analysis::detect_rpeaks(standard);
    const auto expected = formats::export_view(formats::table_of(analysis::median_beat(standard, fid)),
                                               {formats::ExportWhat::median_beats, formats::ExportFormat::json});
    CHECK(med.out == formats::to_string_bytes(expected));
    CHECK_FALSE(m.empty());

    const Run f = run({"analyze", "--in", in.string(), "--rate", "100", "--view", "fiducials"});
    REQUIRE(f.rc == 0);
    CHECK(json::parse(f.out)["r_peaks"].size() == fid.r_peaks.size());

    const auto aligned = dir.path / "aligned.npy";
    REQUIRE(run({"analyze", "--in", in.string(), "--rate", "100", "--view", "aligned", "--out", aligned.string()}).rc == 0);
    CHECK(formats::read_recording(aligned, std::nullopt, {.rate_hz = 100.0}).samples.cols() == 1000);

    CHECK(run({"analyze", "--in", in.string(), "--view", "fiducials", "--out", (dir.path / "f.npy").string()}).rc == 1);

    const auto flat = dir.path / "flat.npy";
    spit(flat, formats::to_string_bytes(formats::write_npy(Matrix(12, 1000, 0.0))));
    const Run nb = run({"analyze", "--in", flat.string(), "--rate", "100"});
    CHECK(nb.rc == 2);
    CHECK(nb.err.rfind("NoBeatsFound", 0) == 0);
}

TEST_CASE("finetune and predict on a blob fixture") {
    testing::TempDir dir;
    const auto data = dir.path / "data";
    const auto models = dir.path / "models";
    fs::create_directories(data);
    write_blob_fixture(data, 90, 3, 4);
    const std::string labels = (data / "labels.json").string();

    const Run r = run({"finetune", "--data", data.string(), "--labels", labels, "--model", "blobby", "--out",
                       models.string(), "--lr", "0.05", "--epochs", "20", "--seed", "3"});
    REQUIRE(r.rc == 0);
    const json report = json::parse(r.out);
    for (const char* k : {"n_samples", "label_distribution", "base_model", "train_loss_per_epoch", "eval_f1"})
        CHECK(report.contains(k));
    CHECK(report.size() == finetune::kReportKeys.size());
    CHECK(report["n_samples"] == 90);
    CHECK(report["eval_f1"]["weighted"].get<double>() >= 0.95);
    CHECK(r.err.find("epoch 1\n") != std::string::npos);

    const auto payload = models / "blobby-1.ecgxmdl";
    const auto manifest_file = models / "blobby-1.manifest.json";
    REQUIRE(fs::exists(payload));
    REQUIRE(fs::exists(manifest_file));
    const auto manifest = exchange::validate_manifest(slurp(manifest_file));
    CHECK(manifest.sha256 == exchange::sha256_hex(slurp(payload)));
    CHECK(manifest.labels == std::vector<std::string>{"class0", "class1", "class2"});

    // same flags, same report
    const Run again = run({"finetune", "--data", data.string(), "--labels", labels, "--model", "blobby", "--version", "2",
                           "--out", models.string(), "--lr", "0.05", "--epochs", "20", "--seed", "3"});
    REQUIRE(again.rc == 0);
    CHECK(again.out == r.out);

    const Run one = run({"finetune", "--data", data.string(), "--labels", labels, "--model", "single", "--out",
                         models.string(), "--epochs", "1", "--lr", "0.01"});
    REQUIRE(one.rc == 0);
    CHECK(json::parse(one.out)["train_loss_per_epoch"].size() == 1);
    CHECK(json::parse(one.out)["val_loss_per_epoch"].size() == 1);

    CHECK(run({"finetune", "--data", data.string(), "--labels", labels, "--model", "g", "--out", models.string(),
               "--gamma", "0"})
              .rc == 1);
    CHECK(run({"finetune", "--data", data.string(), "--labels", labels, "--model", "../evil", "--out", models.string()})
              .rc == 1);

    SUBCASE("a single class is an operation error") {
        json one_class = json::object();
        for (int i = 0; i < 12; ++i) one_class["s" + std::to_string(i) + ".embedding.json"] = {"MI"};
        spit(dir.path / "one.json", one_class.dump());
        const Run bad = run({"finetune", "--data", data.string(), "--labels", (dir.path / "one.json").string(),
                             "--model", "x", "--out", models.string()});
        CHECK(bad.rc == 2);
        CHECK(bad.err.rfind("ClassTooSmall", 0) == 0);
    }
    SUBCASE("a listed file that does not exist") {
        spit(dir.path / "ghost.json", R"({"ghost.npy": ["A"]})");
        CHECK(run({"finetune", "--data", data.string(), "--labels", (dir.path / "ghost.json").string(), "--model", "x",
                   "--out", models.string()})
                  .rc == 2);
    }
    SUBCASE("predict") {
        const std::vector<std::string> inputs = {(data / "s0.embedding.json").string(), (data / "s1.embedding.json").string(),
                                                 (data / "s2.embedding.json").string()};
        std::vector<std::string> args = {"predict", "--model", payload.string(), "--in"};
        args.insert(args.end(), inputs.begin(), inputs.end());
        const Run p = run(args);
        REQUIRE(p.rc == 0);
        const json doc = json::parse(p.out);
        CHECK(doc["model"] == "blobby");
        REQUIRE(doc["rows"].size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            const auto probs = doc["rows"][i]["probabilities"].get<std::vector<double>>();
            double sum = 0;
            for (double v : probs) sum += v;
            CHECK(std::abs(sum - 1.0) <= 1e-9);
            const auto argmax = std::max_element(probs.begin(), probs.end()) - probs.begin();
            CHECK(doc["classes"][argmax] == "class" + std::to_string(i));
        }

        // a tampered payload fails the sidecar hash
        auto bytes = slurp(payload);
        bytes[bytes.size() - 1] ^= 1;
        spit(payload, bytes);
        const Run t = run({"predict", "--model", payload.string(), "--in", inputs[0]});
        CHECK(t.rc == 2);
        CHECK(t.err.rfind("HashMismatch", 0) == 0);

        // a recording cannot be scored by a 16-dim head
        const auto rec = dir.path / "r.npy";
        spit(rec, formats::to_string_bytes(formats::write_npy(testing::synthetic_rhythm(70.0).samples())));
        const auto good = models / "blobby-2.ecgxmdl";
        const Run s = run({"predict", "--model", good.string(), "--in", rec.string(), "--rate", "100"});
        CHECK(s.rc == 2);
        CHECK(s.err.rfind("ShapeMismatch", 0) == 0);
    }
}

TEST_CASE("eval: scores and published aggregates") {
    testing::TempDir dir;
    const auto truth = dir.path / "truth.json";
    const auto pred = dir.path / "pred.json";

    SUBCASE("perfect predictions") {
        spit(truth, R"({"a": ["MI"], "b": ["NORM"], "c": ["MI", "CD"], "d": ["NORM"]})");
        spit(pred, R"({"a": ["MI"], "b": ["NORM"], "c": ["CD", "MI"], "d": ["NORM"]})");
        const Run r = run({"eval", "--truth", truth.string(), "--pred", pred.string()});
        REQUIRE(r.rc == 0);
        const json doc = json::parse(r.out);
        CHECK(doc["weighted_f1"] == 1.0);
        CHECK(doc["macro_f1"] == 1.0);
        CHECK(doc["classes"] == json::array({"CD", "MI", "NORM"}));
    }
    SUBCASE("probability rows with a label map") {
        spit(truth, R"({"r1": ["I21.0"], "r2": ["I44.7"], "r3": ["I21.1", "I44.7"]})");
        spit(pred, R"({"classes": ["CD", "MI"], "rows": [
            {"recording": "r1", "probabilities": [0.1, 0.9]},
            {"recording": "r2", "probabilities": [0.8, 0.3]},
            {"recording": "r3", "probabilities": [0.6, 0.4]}]})");
        const Run r = run({"eval", "--truth", truth.string(), "--pred", pred.string(), "--labelmap", "icd10", "--section",
                           "superclass"});
        REQUIRE(r.rc == 0);
        const json doc = json::parse(r.out);
        // truth after mapping: {MI}, {CD}, {MI, CD}; predictions at 0.5: {MI}, {CD}, {CD}
        const auto expected = metrics::f1_scores(std::vector<metrics::LabelSet>{{"MI"}, {"CD"}, {"CD", "MI"}},
                                                 std::vector<metrics::LabelSet>{{"MI"}, {"CD"}, {"CD"}}, {"CD", "MI"});
        CHECK(doc["weighted_f1"].get<double>() == doctest::Approx(expected.weighted).epsilon(1e-12));
        CHECK(doc["macro_f1"].get<double>() == doctest::Approx(expected.macro).epsilon(1e-12));
        CHECK(doc["per_class"][0]["name"] == "CD");
        CHECK(doc["per_class"][0]["support"] == 2);

        CHECK(run({"eval", "--truth", truth.string(), "--pred", pred.string(), "--labelmap", "klingon"}).rc == 1);
    }
    SUBCASE("mismatched lengths") {
        spit(truth, R"({"a": ["MI"], "b": ["NORM"]})");
        spit(pred, R"({"a": ["MI"]})");
        const Run r = run({"eval", "--truth", truth.string(), "--pred", pred.string()});
        CHECK(r.rc == 2);
        CHECK(r.err.rfind("LengthMismatch", 0) == 0);
    }
    SUBCASE("published weighted-F1 columns aggregate to the printed rows") {
        for (const auto& col : testing::kWeightedF1Columns) {
            CAPTURE(col.model);
            std::string text = "# " + std::string(col.model) + "\n";
            for (double v : col.values) text += std::to_string(v) + "\n";
            const auto file = dir.path / "column.txt";
            spit(file, text);
            const Run r = run({"eval", "--values", file.string()});
            REQUIRE(r.rc == 0);
            const json doc = json::parse(r.out);
            CHECK(doc["n"] == 9);
            CHECK(std::abs(doc["average"].get<double>() - col.aggregates[0]) <= testing::kAggregateTolerance);
            CHECK(std::abs(doc["median"].get<double>() - col.aggregates[1]) <= testing::kAggregateTolerance);
            CHECK(std::abs(doc["iqr"].get<double>() - col.aggregates[2]) <= testing::kAggregateTolerance);
            CHECK(std::abs(doc["cv"].get<double>() - col.aggregates[3]) <= testing::kAggregateTolerance);
        }
        spit(dir.path / "bad.txt", "0.5 abc\n");
        CHECK(run({"eval", "--values", (dir.path / "bad.txt").string()}).rc == 2);
        CHECK(run({"eval", "--values", (dir.path / "bad.txt").string(), "--truth", truth.string()}).rc == 1);
    }
}

TEST_CASE("sync against a WebDAV server") {
    testing::DavServer dav;
    testing::TempDir dir;
    finetune::LinearHead head;
    head.weights = Matrix(2, 4, 0.5);
    head.bias = {0.0, 1.0};
    head.class_names = {"A", "B"};
    const std::string payload = exchange::save_model(head);
    exchange::ModelManifest m;
    m.name = "tiny";
    m.version = "1";
    m.labels = head.class_names;
    m.sha256 = exchange::sha256_hex(payload);
    m.created_at = "2026-01-01T00:00:00Z";
    exchange::publish({dav.url(), "alice", "secret"}, payload, m);

    const std::string env = "EXCHANGE_PASS=secret";
    const auto cache = dir.path / "cache";
    const Run listed = run({"sync", "--url", dav.url(), "--user", "alice", "--list"}, env);
    REQUIRE(listed.rc == 0);
    CHECK(json::parse(listed.out)["models"][0]["name"] == "tiny");

    const Run s = run({"sync", "--url", dav.url(), "--user", "alice", "--cache", cache.string()}, env);
    REQUIRE(s.rc == 0);
    CHECK(json::parse(s.out)["downloaded"] == json::array({"tiny-1.ecgxmdl"}));
    CHECK(slurp(cache / "tiny-1.ecgxmdl") == payload);
    const Run again = run({"sync", "--url", dav.url(), "--user", "alice", "--cache", cache.string()}, env);
    CHECK(json::parse(again.out)["downloaded"].empty());

    const Run denied = run({"sync", "--url", dav.url(), "--user", "alice", "--cache", cache.string()}, "EXCHANGE_PASS=nope");
    CHECK(denied.rc == 2);
    CHECK(denied.err.rfind("AuthFailed", 0) == 0);
    dav.stop();
    const Run offline = run({"sync", "--url", dav.url(), "--user", "alice", "--cache", cache.string()}, env);
    CHECK(offline.rc == 2);
    CHECK(offline.err.rfind("Unreachable", 0) == 0);
}

TEST_CASE("serve answers health and stops on SIGTERM") {
    testing::TempDir dir;
    const int port = free_port();
    const std::string data = (dir.path / "data").string();
    const std::string p = std::to_string(port);
    const pid_t pid = ::fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
        const int devnull = ::open("/dev/null", O_WRONLY);
        ::dup2(devnull, 2);
        ::execl(kCli.c_str(), "ecgx", "serve", "--data-dir", data.c_str(), "--port", p.c_str(), "--workers", "1",
                static_cast<char*>(nullptr));
        ::_exit(127);
    }
    httplib::Client c("127.0.0.1", port);
    httplib::Result r;
    for (int i = 0; i < 200 && !(r = c.Get("/api/v1/health")); ++i) std::this_thread::sleep_for(25ms);
    REQUIRE(r);
    CHECK(r->status == 200);
    ::kill(pid, SIGTERM);
    int status = 0;
    ::waitpid(pid, &status, 0);
    CHECK(WIFEXITED(status));
    CHECK(WEXITSTATUS(status) == 0);
    CHECK(fs::exists(dir.path / "data" / "jobs"));

    testing::TempDir cfgdir;
    spit(cfgdir.path / "bad.json", R"({"colour": 1})");
    CHECK(run({"serve", "--config", (cfgdir.path / "bad.json").string()}).rc == 1);
}
