#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "ecgx/exchange.hpp"
#include "ecgx/finetune.hpp"

namespace ecgx::service {

struct ServiceConfig {
    std::filesystem::path data_dir = "ecgx-data";
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::optional<exchange::ServerConfig> exchange;
    std::size_t max_upload_mb = 64;
    std::size_t workers = 0;  // 0: available parallelism

    /// JSON file (keys data_dir, host, port, exchange_url, exchange_user,
    /// exchange_pass, max_upload_mb, workers), then DATA_DIR, PORT,
    /// EXCHANGE_URL, EXCHANGE_USER, EXCHANGE_PASS, MAX_UPLOAD_MB and WORKERS
    /// from the environment. Errors: MalformedJson, InvalidOptions.
    static ServiceConfig load(const std::optional<std::filesystem::path>& file = std::nullopt);

    std::size_t worker_count() const;
};

enum class JobState { queued, running, succeeded, failed, cancelled };

std::string_view to_string(JobState s) noexcept;
std::optional<JobState> job_state_from_name(std::string_view name);
bool is_terminal(JobState s) noexcept;
/// queued -> running | cancelled | failed, running -> succeeded | failed | cancelled.
bool transition_allowed(JobState from, JobState to) noexcept;

struct JobRecord {
    std::string id;
    JobState state = JobState::queued;
    finetune::FineTuneConfig config;
    std::string model_name;
    std::size_t progress = 0;  // epochs completed
    std::optional<finetune::TrainingReport> report;
    std::string error;
    bool interrupted = false;  // failed by a restart while queued or running
    std::uint64_t revision = 0;
    std::string created_at;
    std::string updated_at;
};

std::string job_to_json(const JobRecord& job, bool with_report = false);
JobRecord job_from_json(std::string_view json);

/// Serialized single-writer store of job records, persisted as one JSON file
/// per job. Readers get immutable snapshots.
class JobStore {
public:
    /// Loads existing records; queued or running ones become failed with the
    /// interrupted marker.
    explicit JobStore(std::filesystem::path dir);

    JobRecord create(const finetune::FineTuneConfig& cfg, const std::string& model_name);
    std::shared_ptr<const JobRecord> get(const std::string& id) const;
    std::vector<std::shared_ptr<const JobRecord>> list() const;

    /// Errors: NotFound, Conflict (transition not allowed).
    std::shared_ptr<const JobRecord> transition(const std::string& id, JobState to, std::string error = {},
                                                std::optional<finetune::TrainingReport> report = std::nullopt);
    /// Ignores values below the current progress. Errors: NotFound.
    void set_progress(const std::string& id, std::size_t epochs);

    /// Model names held by jobs that may still produce a model.
    bool name_reserved(const std::string& model_name) const;

private:
    void persist(const JobRecord& r) const;

    std::filesystem::path dir_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::shared_ptr<const JobRecord>> jobs_;
};

/// Probability bucket used for colour coding: low < 0.3 <= mid < 0.7 <= high.
std::string_view probability_bucket(double p) noexcept;

/// HTTP status paired with an error code.
int http_status_for(ErrorCode code) noexcept;

class Service {
public:
    explicit Service(ServiceConfig cfg);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    /// Blocks serving on the calling thread.
    void run();
    /// Stops the listener and the workers. Running jobs are abandoned
    /// without a terminal transition, as a crash would leave them.
    void stop();

    const ServiceConfig& config() const { return cfg_; }
    JobStore& jobs() { return *jobs_; }

private:
    struct Impl;
    ServiceConfig cfg_;
    std::unique_ptr<JobStore> jobs_;
    std::unique_ptr<Impl> impl_;
};

}  // namespace ecgx::service
