#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <functional>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "ecgx/exchange.hpp"
#include "json.hpp"
#include "support/dav_server.hpp"
#include "support/temp_dir.hpp"

using namespace ecgx;
using namespace ecgx::exchange;
namespace fs = std::filesystem;

namespace {

finetune::LinearHead random_head(std::vector<std::string> classes, std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    finetune::LinearHead h;
    h.weights = Matrix(classes.size(), dim);
    for (double& v : h.weights.data()) v = nd(rng);
    h.bias.resize(classes.size());
    for (double& v : h.bias) v = nd(rng);
    h.class_names = std::move(classes);
    return h;
}

Mlp random_mlp(std::vector<std::size_t> widths, std::vector<std::string> classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Mlp m;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        Matrix w(widths[l + 1], widths[l]);
        for (double& v : w.data()) v = nd(rng);
        std::vector<double> b(widths[l + 1]);
        for (double& v : b) v = nd(rng);
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    m.class_names = std::move(classes);
    return m;
}

ModelManifest manifest_for(const std::string& name, const std::string& version, const NativeModel& model,
                           const std::string& payload) {
    ModelManifest m;
    m.name = name;
    m.version = version;
    m.kind = kind_of(model);
    m.labels = class_names(model);
    m.sha256 = sha256_hex(payload);
    m.created_at = "2026-01-01T00:00:00Z";
    return m;
}

struct Published {
    ModelManifest manifest;
    std::string payload;
};

Published make_model(const std::string& name, const std::string& version, std::uint64_t seed) {
    NativeModel model = random_head({"CD", "HYP", "MI", "NORM", "STTC"}, 16, seed);
    std::string payload = save_model(model);
    return {manifest_for(name, version, model, payload), payload};
}

ServerConfig config_for(const testing::DavServer& s, std::string user = "alice", std::string pass = "secret") {
    return {s.url(), std::move(user), std::move(pass), std::chrono::milliseconds(3000)};
}

using testing::TempDir;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json manifest_json() {
    ModelManifest m;
    m.name = "cardx-ptbxl";
    m.version = "1.0";
    m.kind = ModelKind::external_onnx;
    m.labels = {"CD", "HYP", "MI", "NORM", "STTC"};
    m.opset = 17;
    m.sha256 = std::string(64, 'a');
    m.created_at = "2026-01-01T00:00:00Z";
    return nlohmann::json::parse(manifest_to_json(m));
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an ecgx::Error");
    return ErrorCode::Internal;
}

}  // namespace

TEST_CASE("sha256 matches the FIPS 180-2 test vectors") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST_CASE("validate_manifest: opset boundary, hash format and required fields") {
    auto doc = manifest_json();
    doc["opset"] = 20;
    CHECK(validate_manifest(doc.dump()).opset == 20);
    doc["opset"] = 21;
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::OpsetTooHigh);
    doc["opset"] = 1000;
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::OpsetTooHigh);

    doc = manifest_json();
    doc["sha256"] = std::string(63, 'a');
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::BadHash);
    doc["sha256"] = std::string(65, 'a');
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::BadHash);
    doc["sha256"] = std::string(64, 'A');
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::BadHash);
    doc["sha256"] = std::string(63, 'a') + "g";
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::BadHash);

    for (const char* key : {"name", "version", "kind", "labels", "input_spec", "preprocessing", "sha256", "created_at"}) {
        CAPTURE(key);
        doc = manifest_json();
        doc.erase(key);
        CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::MissingField);
    }
    doc = manifest_json();
    doc["labels"] = nlohmann::json::array();
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::MissingField);

    // opset is optional
    doc = manifest_json();
    doc.erase("opset");
    CHECK_FALSE(validate_manifest(doc.dump()).opset.has_value());

    CHECK(code_of([] { validate_manifest(std::string_view("{not json")); }) == ErrorCode::MalformedJson);
    CHECK(code_of([] { validate_manifest(std::string_view("[1,2]")); }) == ErrorCode::MalformedJson);

    doc = manifest_json();
    doc["kind"] = "linear_head";  // opset belongs to ONNX payloads only
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::InvalidOptions);
    doc = manifest_json();
    doc["kind"] = "tensorflow";
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::InvalidOptions);
    doc = manifest_json();
    doc["input_spec"]["samples"] = 5000;
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::InvalidOptions);
    doc = manifest_json();
    doc["name"] = "../escape";
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::InvalidOptions);
    doc = manifest_json();
    doc["labels"] = {"MI", "MI"};
    CHECK(code_of([&] { validate_manifest(doc.dump()); }) == ErrorCode::InvalidOptions);
}

TEST_CASE("manifest JSON round-trips") {
    const ModelManifest m = validate_manifest(manifest_json().dump());
    CHECK(validate_manifest(manifest_to_json(m)) == m);
    CHECK(payload_filename(m) == "cardx-ptbxl-1.0.onnx");
    CHECK(manifest_filename(m) == "cardx-ptbxl-1.0.manifest.json");
    const auto p = make_model("head", "2", 1);
    CHECK(payload_filename(p.manifest) == "head-2.ecgxmdl");
    CHECK(validate_manifest(manifest_to_json(p.manifest)) == p.manifest);
}

TEST_CASE("native payload layout is bit-exact") {
    finetune::LinearHead h;
    h.weights = Matrix(2, 1);
    h.weights(0, 0) = 1.0;
    h.weights(1, 0) = -2.0;
    h.bias = {0.5, 0.0};
    h.class_names = {"a", "b"};
    const std::string p = save_model(h);
    REQUIRE(p.size() > 12);
    CHECK(p.substr(0, 8) == "ECGXMDL1");
    const auto* b = reinterpret_cast<const unsigned char*>(p.data());
    const std::uint32_t hlen = b[8] | (b[9] << 8) | (b[10] << 16) | (static_cast<std::uint32_t>(b[11]) << 24);
    REQUIRE(p.size() == 12 + hlen + 4 * 8);
    const auto header = nlohmann::json::parse(p.substr(12, hlen));
    CHECK(header["kind"] == "linear_head");
    CHECK(header["activation"] == "softmax");
    CHECK(header["class_names"] == nlohmann::json({"a", "b"}));
    CHECK(header["layers"] == nlohmann::json::array({{2, 1}}));
    // 1.0, -2.0, 0.5, 0.0 as little-endian IEEE-754 binary64
    const std::string expected("\x00\x00\x00\x00\x00\x00\xF0\x3F"
                               "\x00\x00\x00\x00\x00\x00\x00\xC0"
                               "\x00\x00\x00\x00\x00\x00\xE0\x3F"
                               "\x00\x00\x00\x00\x00\x00\x00\x00",
                               32);
    CHECK(p.substr(12 + hlen) == expected);
}

TEST_CASE("save_model/load_model round-trip: head and mlp") {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> nd;
    Matrix x(100, 16);
    for (double& v : x.data()) v = nd(rng);

    SUBCASE("linear head") {
        for (bool multilabel : {false, true}) {
            auto h = random_head({"CD", "HYP", "MI"}, 16, 7);
            h.multilabel = multilabel;
            h.weights(0, 0) = -0.0;
            h.weights(1, 1) = 4.9e-324;  // denormal
            h.bias[2] = 1e308;
            const NativeModel m = h;
            const auto back = load_model(save_model(m));
            REQUIRE(std::holds_alternative<finetune::LinearHead>(back));
            CHECK(std::get<finetune::LinearHead>(back) == h);
            CHECK(std::signbit(std::get<finetune::LinearHead>(back).weights(0, 0)));
            CHECK(predict(back, x) == predict(m, x));
            CHECK(save_model(back) == save_model(m));
        }
    }
    SUBCASE("mlp") {
        const NativeModel m = random_mlp({16, 8, 4, 3}, {"x", "y", "z"}, 3);
        const auto back = load_model(save_model(m));
        REQUIRE(std::holds_alternative<Mlp>(back));
        CHECK(std::get<Mlp>(back) == std::get<Mlp>(m));
        const Matrix p = predict(back, x);
        CHECK(p == predict(m, x));
        for (std::size_t i = 0; i < p.rows(); ++i) {
            double s = 0;
            for (double v : p.row(i)) s += v;
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
        CHECK(input_dim(back) == 16);
    }
}

TEST_CASE("mlp forward pass matches a hand computation") {
    Mlp m;
    m.weights = {Matrix(2, 2), Matrix(2, 2)};
    m.weights[0](0, 0) = 1;
    m.weights[0](0, 1) = -1;
    m.weights[0](1, 0) = 2;
    m.weights[0](1, 1) = 1;
    m.weights[1](0, 0) = 1;
    m.weights[1](1, 1) = 1;
    m.biases = {{0, -10}, {0, 0}};
    m.class_names = {"p", "q"};
    Matrix x(1, 2);
    x(0, 0) = 3;
    x(0, 1) = 1;
    // hidden = relu([2, -3]) = [2, 0]; softmax([2, 0])
    const Matrix p = predict(NativeModel{m}, x);
    CHECK(p(0, 0) == doctest::Approx(std::exp(2.0) / (std::exp(2.0) + 1.0)).epsilon(1e-14));
    m.multilabel = true;
    const Matrix q = predict(NativeModel{m}, x);
    CHECK(q(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-14));
    CHECK(q(0, 1) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("load_model rejects corrupt payloads") {
    const NativeModel m = random_head({"CD", "HYP", "MI"}, 16, 11);
    const std::string p = save_model(m);
    for (std::size_t len = 0; len < p.size(); len += (len < 64 ? 1 : 37)) {
        CAPTURE(len);
        CHECK(code_of([&] { load_model(p.substr(0, len)); }) == ErrorCode::CorruptPayload);
    }
    CHECK(code_of([&] { load_model(p.substr(0, p.size() - 1)); }) == ErrorCode::CorruptPayload);
    CHECK(code_of([&] { load_model(p + "x"); }) == ErrorCode::CorruptPayload);
    std::string bad_magic = p;
    bad_magic[0] = 'X';
    CHECK(code_of([&] { load_model(bad_magic); }) == ErrorCode::CorruptPayload);

    auto manifest = manifest_for("m", "1", m, p);
    CHECK_NOTHROW(load_model(p, &manifest));
    manifest.labels = {"CD", "MI", "HYP"};
    CHECK(code_of([&] { load_model(p, &manifest); }) == ErrorCode::CorruptPayload);
    manifest.labels = {"CD", "HYP", "MI"};
    manifest.kind = ModelKind::mlp;
    CHECK(code_of([&] { load_model(p, &manifest); }) == ErrorCode::CorruptPayload);
}

TEST_CASE("list_remote pairs payloads with manifests") {
    testing::DavServer server;
    const auto cfg = config_for(server);

    SUBCASE("empty collection") { CHECK(list_remote(cfg).entries.empty()); }

    SUBCASE("two valid models and one without manifest") {
        for (const auto& [name, seed] : {std::pair{"alpha", 1}, std::pair{"beta", 2}}) {
            const auto m = make_model(name, "1.0", seed);
            server.put(payload_filename(m.manifest), m.payload);
            server.put(manifest_filename(m.manifest), manifest_to_json(m.manifest));
        }
        server.put("orphan-1.0.ecgxmdl", make_model("orphan", "1.0", 3).payload);
        const auto listing = list_remote(cfg);
        REQUIRE(listing.entries.size() == 2);
        CHECK(listing.entries[0].manifest.name == "alpha");
        CHECK(listing.entries[1].manifest.name == "beta");
        CHECK(listing.entries[0].remote_path == "/models/alpha-1.0.ecgxmdl");
        CHECK(listing.entries[0].state == EntryState::remote_only);
        CHECK_FALSE(listing.entries[0].local_path.has_value());
        REQUIRE(listing.warnings.size() == 1);
        CHECK(listing.warnings[0].find("orphan") != std::string::npos);
        CHECK(server.count("PROPFIND") == 1);
    }

    SUBCASE("invalid manifests are warnings, not entries") {
        auto m = make_model("onnx", "1.0", 4);
        auto doc = nlohmann::json::parse(manifest_to_json(m.manifest));
        doc["kind"] = "external_onnx";
        doc["opset"] = 21;
        server.put("onnx-1.0.onnx", "graph bytes");
        server.put("onnx-1.0.manifest.json", doc.dump());
        server.put("stray-1.0.manifest.json", manifest_to_json(make_model("stray", "1.0", 5).manifest));
        const auto listing = list_remote(cfg);
        CHECK(listing.entries.empty());
        REQUIRE(listing.warnings.size() == 2);
        CHECK(listing.warnings[0].find("OpsetTooHigh") != std::string::npos);
        CHECK(listing.warnings[1].find("without payload") != std::string::npos);
    }

    SUBCASE("status mapping") {
        CHECK(code_of([&] { list_remote(config_for(server, "alice", "wrong")); }) == ErrorCode::AuthFailed);
        server.force_listing_status(200);
        CHECK(code_of([&] { list_remote(cfg); }) == ErrorCode::ProtocolError);
        server.force_listing_status(500);
        CHECK(code_of([&] { list_remote(cfg); }) == ErrorCode::ProtocolError);
        server.force_listing_status(std::nullopt);
        server.stop();
        CHECK(code_of([&] { list_remote(cfg); }) == ErrorCode::Unreachable);
    }
}

TEST_CASE("publish writes payload then manifest and refuses duplicates") {
    testing::DavServer server;
    const auto cfg = config_for(server);
    const auto m = make_model("cardx-head", "1.0", 21);

    const std::string path = publish(cfg, m.payload, m.manifest);
    CHECK(path == "/models/cardx-head-1.0.ecgxmdl");
    CHECK(server.get("cardx-head-1.0.ecgxmdl") == m.payload);
    CHECK(server.get("cardx-head-1.0.manifest.json") == manifest_to_json(m.manifest));
    std::vector<std::string> puts;
    for (const auto& l : server.log())
        if (l.rfind("PUT ", 0) == 0) puts.push_back(l);
    CHECK(puts == std::vector<std::string>{"PUT /models/cardx-head-1.0.ecgxmdl", "PUT /models/cardx-head-1.0.manifest.json"});

    CHECK(code_of([&] { publish(cfg, m.payload, m.manifest); }) == ErrorCode::Conflict);
    // a new version of the same name is fine
    auto v2 = make_model("cardx-head", "1.1", 22);
    CHECK_NOTHROW(publish(cfg, v2.payload, v2.manifest));

    auto other = make_model("other", "1.0", 23);
    CHECK(code_of([&] { publish(config_for(server, "mallory", "secret"), other.payload, other.manifest); }) ==
          ErrorCode::AuthFailed);
    CHECK_FALSE(server.get("other-1.0.ecgxmdl").has_value());
}

TEST_CASE("publish rejects a hash mismatch before any request") {
    testing::DavServer server;
    auto m = make_model("x", "1", 31);
    const auto before = server.log().size();
    CHECK(code_of([&] { publish(config_for(server), m.payload + "!", m.manifest); }) == ErrorCode::HashMismatch);
    m.manifest.opset = 21;
    CHECK(code_of([&] { publish(config_for(server), m.payload, m.manifest); }) == ErrorCode::OpsetTooHigh);
    CHECK(server.log().size() == before);
    CHECK(server.names().empty());
}

TEST_CASE("publish, list, sync round-trip is byte-identical and idempotent") {
    testing::DavServer server;
    TempDir cache;
    const auto cfg = config_for(server);
    std::vector<Published> models = {make_model("alpha", "1.0", 41), make_model("beta", "2.3", 42)};
    for (const auto& m : models) publish(cfg, m.payload, m.manifest);

    const auto listing = list_remote(cfg);
    REQUIRE(listing.entries.size() == 2);
    CHECK(listing.warnings.empty());

    const auto first = sync(cfg, cache.path);
    CHECK(first.downloaded.size() == 2);
    CHECK(first.failures.empty());
    for (const auto& m : models) {
        CHECK(slurp(cache.path / payload_filename(m.manifest)) == m.payload);
        CHECK(validate_manifest(slurp(cache.path / manifest_filename(m.manifest))) == m.manifest);
        CHECK(read_payload(cache.path, m.manifest) == m.payload);
        const auto loaded = load_model(read_payload(cache.path, m.manifest), &m.manifest);
        CHECK(save_model(loaded) == m.payload);
    }

    const auto gets_before = server.count("GET");
    const auto second = sync(cfg, cache.path);
    CHECK(second.downloaded.empty());
    CHECK(second.up_to_date.size() == 2);
    // only the two manifests are fetched again, no payloads
    CHECK(server.count("GET") - gets_before == 2);

    const auto local = list_local(cache.path, EntryState::cached);
    REQUIRE(local.entries.size() == 2);
    CHECK(local.warnings.empty());
    for (const auto& e : local.entries) {
        CHECK(e.state == EntryState::cached);
        REQUIRE(e.local_path.has_value());
        CHECK(sha256_hex(slurp(*e.local_path)) == e.manifest.sha256);
    }
}

TEST_CASE("sync detects tampered payloads and keeps the cached copy") {
    testing::DavServer server;
    TempDir cache;
    const auto cfg = config_for(server);
    const auto m = make_model("alpha", "1.0", 51);
    publish(cfg, m.payload, m.manifest);

    SUBCASE("fresh cache: nothing is written") {
        std::string bad = m.payload;
        bad[bad.size() / 2] ^= 0x01;
        server.put("alpha-1.0.ecgxmdl", bad);
        const auto s = sync(cfg, cache.path);
        CHECK(s.downloaded.empty());
        REQUIRE(s.failures.size() == 1);
        CHECK(s.failures[0].code == ErrorCode::HashMismatch);
        CHECK_FALSE(fs::exists(cache.path / "alpha-1.0.ecgxmdl"));
        CHECK_FALSE(fs::exists(cache.path / "alpha-1.0.manifest.json"));
    }

    SUBCASE("warm cache: the previous payload survives") {
        REQUIRE(sync(cfg, cache.path).downloaded.size() == 1);
        // the remote now advertises a new hash, but the bytes served were altered in transit
        const auto updated = make_model("alpha", "1.0", 52);
        std::string bad = updated.payload;
        bad[20] ^= 0x40;
        server.put("alpha-1.0.ecgxmdl", bad);
        server.put("alpha-1.0.manifest.json", manifest_to_json(updated.manifest));
        const auto s = sync(cfg, cache.path);
        REQUIRE(s.failures.size() == 1);
        CHECK(s.failures[0].code == ErrorCode::HashMismatch);
        CHECK(slurp(cache.path / "alpha-1.0.ecgxmdl") == m.payload);
        CHECK(validate_manifest(slurp(cache.path / "alpha-1.0.manifest.json")) == m.manifest);
        CHECK(list_local(cache.path, EntryState::cached).entries.size() == 1);

        // once the correct bytes are served the entry updates
        server.put("alpha-1.0.ecgxmdl", updated.payload);
        const auto fixed = sync(cfg, cache.path);
        CHECK(fixed.downloaded.size() == 1);
        CHECK(slurp(cache.path / "alpha-1.0.ecgxmdl") == updated.payload);
    }

    SUBCASE("a locally corrupted cache entry is re-downloaded") {
        REQUIRE(sync(cfg, cache.path).downloaded.size() == 1);
        {
            std::ofstream out(cache.path / "alpha-1.0.ecgxmdl", std::ios::binary | std::ios::trunc);
            out << "garbage";
        }
        CHECK(code_of([&] { read_payload(cache.path, m.manifest); }) == ErrorCode::HashMismatch);
        CHECK(list_local(cache.path, EntryState::cached).entries.empty());
        CHECK(list_local(cache.path, EntryState::cached).warnings.size() == 1);
        const auto s = sync(cfg, cache.path);
        CHECK(s.downloaded.size() == 1);
        CHECK(read_payload(cache.path, m.manifest) == m.payload);
    }
}

TEST_CASE("offline registry: sync fails, cached entries stay listable") {
    testing::DavServer server;
    TempDir cache;
    const auto cfg = config_for(server);
    const auto m = make_model("alpha", "1.0", 61);
    publish(cfg, m.payload, m.manifest);
    REQUIRE(sync(cfg, cache.path).downloaded.size() == 1);
    server.stop();
    CHECK(code_of([&] { sync(cfg, cache.path); }) == ErrorCode::Unreachable);
    const auto local = list_local(cache.path, EntryState::cached);
    REQUIRE(local.entries.size() == 1);
    CHECK(local.entries[0].manifest == m.manifest);
    CHECK(code_of([&] { sync({"http://127.0.0.1:1/models/", "a", "b", std::chrono::milliseconds(500)}, cache.path); }) ==
          ErrorCode::Unreachable);
    CHECK(code_of([&] { list_remote({"https://example.invalid/models/", "", "", std::chrono::milliseconds(500)}); }) ==
          ErrorCode::Unreachable);
}

TEST_CASE("property: the cache only grows and every cached entry matches its hash") {
    testing::DavServer server;
    TempDir cache;
    const auto cfg = config_for(server);
    std::mt19937_64 rng(2024);
    std::set<std::string> seen;
    for (int round = 0; round < 12; ++round) {
        const int action = static_cast<int>(rng() % 3);
        if (action == 0) {
            auto m = make_model("m" + std::to_string(round), "1", rng());
            publish(cfg, m.payload, m.manifest);
        } else if (action == 1 && !server.names().empty()) {
            // tamper with a random remote payload
            auto names = server.names();
            const auto& victim = names[rng() % names.size()];
            if (victim.find(".manifest.json") == std::string::npos) {
                auto bytes = *server.get(victim);
                bytes[bytes.size() - 1] ^= 0x10;
                server.put(victim, bytes);
            }
        }
        sync(cfg, cache.path);
        std::set<std::string> now;
        for (const auto& de : fs::directory_iterator(cache.path)) now.insert(de.path().filename().string());
        CHECK(std::includes(now.begin(), now.end(), seen.begin(), seen.end()));
        seen = now;
        const auto local = list_local(cache.path, EntryState::cached);
        CHECK(local.warnings.empty());
        for (const auto& e : local.entries) CHECK(sha256_hex(slurp(*e.local_path)) == e.manifest.sha256);
    }
}

TEST_CASE("concurrent syncs on one cache download each model once") {
    testing::DavServer server;
    TempDir cache;
    const auto cfg = config_for(server);
    for (int i = 0; i < 5; ++i) {
        auto m = make_model("c" + std::to_string(i), "1", 70 + i);
        publish(cfg, m.payload, m.manifest);
    }
    std::atomic<std::size_t> downloads{0}, failures{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
        threads.emplace_back([&] {
            try {
                const auto s = sync(cfg, cache.path);
                downloads += s.downloaded.size();
                failures += s.failures.size();
            } catch (...) {
                ++failures;
            }
        });
    }
    for (auto& t : threads) t.join();
    CHECK(downloads == 5);
    CHECK(failures == 0);
    CHECK(list_local(cache.path, EntryState::cached).entries.size() == 5);
}

TEST_CASE("store_local and read_payload") {
    TempDir dir;
    const auto m = make_model("local", "0.1", 81);
    const auto p = store_local(dir.path, m.payload, m.manifest);
    CHECK(p.filename() == "local-0.1.ecgxmdl");
    CHECK(read_payload(dir.path, m.manifest) == m.payload);
    CHECK(code_of([&] { store_local(dir.path, m.payload, m.manifest); }) == ErrorCode::Conflict);
    CHECK(code_of([&] { store_local(dir.path, m.payload + "x", m.manifest); }) == ErrorCode::HashMismatch);
    const auto other = make_model("absent", "1", 82);
    CHECK(code_of([&] { read_payload(dir.path, other.manifest); }) == ErrorCode::NotFound);
    const auto listing = list_local(dir.path, EntryState::local_only);
    REQUIRE(listing.entries.size() == 1);
    CHECK(listing.entries[0].state == EntryState::local_only);
    CHECK(list_local(dir.path / "missing", EntryState::cached).entries.empty());
}
