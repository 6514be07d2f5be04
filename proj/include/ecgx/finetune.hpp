#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecgx/matrix.hpp"
#include "ecgx/metrics.hpp"
#include "ecgx/signal.hpp"

namespace ecgx::finetune {

inline constexpr std::size_t kEmbeddingDim = 512;
/// Name reported for the built-in deterministic encoder.
inline constexpr const char* kDefaultBaseModel = "median-beat-512";

/// Median beat per lead, flattened, linearly resampled to `dim` values and
/// standardized (zero vector when constant).
std::vector<double> embed(const StandardEcg& ecg, std::size_t dim = kEmbeddingDim);

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

/// Per-class shuffle and cut; each class keeps at least one sample on each
/// side. Both index lists come back sorted.
Split stratified_split(const std::vector<std::string>& labels, double val_fraction, std::uint64_t seed);

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// One AdamW update in place with decoupled weight decay; `t` counts from 1.
/// An empty state is initialized to zeros.
void adamw_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                const AdamHyper& hyper, std::size_t t);

double exponential_lr(double lr0, double gamma, std::size_t epoch);

enum class TrainingMethod { head, full };
enum class LrSelection { steepest, minimum };

struct FineTuneConfig {
    std::size_t max_epochs = 50;
    std::size_t batch_size = 64;
    double gamma = 0.9;
    std::optional<double> lr;  // absent: run the LR finder
    AdamHyper adam;
    double grad_clip_value = 2.0;
    std::size_t patience = 10;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
    TrainingMethod method = TrainingMethod::head;
    LrSelection lr_selection = LrSelection::steepest;
    std::string base_model = kDefaultBaseModel;

    void validate() const;
};

struct LinearHead {
    Matrix weights;  // n_classes x d
    std::vector<double> bias;
    std::vector<std::string> class_names;
    bool multilabel = false;  // sigmoid per class instead of softmax

    std::size_t dim() const noexcept { return weights.cols(); }
    void validate() const;
    friend bool operator==(const LinearHead&, const LinearHead&) = default;
};

/// Probability rows: softmax(Wx + b), or per-class sigmoid for multi-label heads.
Matrix predict(const LinearHead& head, const Matrix& embeddings);

struct LossAndGrad {
    double loss = 0.0;
    Matrix grad_w;
    std::vector<double> grad_b;
};

/// Sample-weighted mean cross-entropy (binary cross-entropy averaged over
/// classes for multi-label heads) and its analytic gradient.
LossAndGrad head_loss(const LinearHead& head, const Matrix& x, const Matrix& targets,
                      std::span<const double> sample_weights, bool with_grad = true);

struct LrFinderOptions {
    double lr_min = 1e-6;
    double lr_max = 1.0;
    std::size_t steps = 100;
    double smoothing = 0.9;
    double divergence_factor = 4.0;
    LrSelection selection = LrSelection::steepest;
};

struct LrFinderResult {
    double lr = 0.0;           // suggestion: picked point / 10, clamped
    double picked_lr = 0.0;    // steepest-slope or minimum-loss point
    std::vector<double> lrs;
    std::vector<double> smoothed_losses;
};

/// Generic sweep: `step(lr)` performs one update at `lr` and returns the loss
/// measured before it.
LrFinderResult lr_sweep(const std::function<double(double lr)>& step, const LrFinderOptions& opts = {});

/// Sweep with AdamW mini-batch updates on a copy of `head`.
LrFinderResult lr_finder(const LinearHead& head, const Matrix& x, const Matrix& targets,
                         std::span<const double> sample_weights, const FineTuneConfig& cfg,
                         const LrFinderOptions& opts = {});

struct TrainingReport {
    std::size_t n_samples = 0;
    std::map<std::string, std::size_t> label_distribution;
    std::string base_model;
    std::vector<double> train_loss_per_epoch;
    std::vector<double> val_loss_per_epoch;
    metrics::F1Report eval_f1;
    std::size_t best_epoch = 0;
    double lr_used = 0.0;
};

struct TrainHooks {
    std::function<void(std::size_t epochs_done)> on_epoch;
    const std::atomic<bool>* cancel = nullptr;  // checked between epochs
};

struct FineTuneResult {
    LinearHead head;
    TrainingReport report;
};

/// Trains a linear head on fixed embeddings. Single-label when every sample
/// has exactly one label, one-vs-rest sigmoid otherwise.
FineTuneResult train_head(const Matrix& embeddings, const std::vector<metrics::LabelSet>& labels,
                          const FineTuneConfig& cfg = {}, const TrainHooks& hooks = {});

/// Top-level keys of the serialized report.
inline constexpr std::array<const char*, 8> kReportKeys = {
    "n_samples", "label_distribution", "base_model", "train_loss_per_epoch",
    "val_loss_per_epoch", "eval_f1", "best_epoch", "lr_used"};

std::string report_to_json(const TrainingReport& report);
/// Errors: MalformedJson, MissingField.
TrainingReport report_from_json(std::string_view json);

/// Unknown keys are rejected; absent keys keep `base`'s values.
/// Errors: MalformedJson, InvalidOptions.
FineTuneConfig config_from_json(std::string_view json, FineTuneConfig base = {});
std::string config_to_json(const FineTuneConfig& cfg);

/// Inverse-frequency class weights n / (C * count_c) and the resulting
/// per-sample weights used by train_head.
std::vector<double> class_weights(const Matrix& targets);
std::vector<double> sample_weights(const Matrix& targets, std::span<const double> class_weight);

/// One-hot / multi-hot targets in `classes` order.
Matrix encode_targets(const std::vector<metrics::LabelSet>& labels, const std::vector<std::string>& classes);

}  // namespace ecgx::finetune
