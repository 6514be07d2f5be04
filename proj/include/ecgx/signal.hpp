#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecgx/matrix.hpp"

namespace ecgx {

enum class SourceFormat { csv, npy, npz, wfdb, dicom, mat, xml, json };

std::string_view to_string(SourceFormat f) noexcept;

inline constexpr std::size_t kLeadCount = 12;
inline constexpr double kStandardRateHz = 100.0;
inline constexpr std::size_t kStandardSamples = 1000;

/// Canonical lead order of every StandardEcg.
inline constexpr std::array<std::string_view, kLeadCount> kCanonicalLeads = {
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"};

/// Leads from which the remaining four limb leads can be derived.
inline constexpr std::array<std::string_view, 8> kEightLeadSet = {
    "I", "II", "V1", "V2", "V3", "V4", "V5", "V6"};

/// Multi-lead recording as parsed, before any normalization.
struct RawRecording {
    std::vector<std::string> lead_names;
    Matrix samples;  // [n_leads x n_samples], source units
    double sampling_rate_hz = 0.0;
    std::optional<double> adc_gain;  // units per mV
    std::vector<double> baseline;    // per lead, empty means zero
    SourceFormat source_format = SourceFormat::npy;
    std::map<std::string, std::string> metadata;

    std::size_t n_leads() const noexcept { return samples.rows(); }
    std::size_t n_samples() const noexcept { return samples.cols(); }

    /// Throws InvalidOptions when the structural invariants are broken.
    void validate() const;
};

/// Metadata key a parser sets to "adu" when the samples are raw converter
/// counts, so a missing gain falls back to the 1000 adu/mV default.
inline constexpr std::string_view kUnitsKey = "units";

/// 12 x 1000 millivolt matrix at 100 Hz in canonical lead order.
class StandardEcg {
public:
    StandardEcg() : samples_(kLeadCount, kStandardSamples) {}
    explicit StandardEcg(Matrix samples);

    const Matrix& samples() const noexcept { return samples_; }
    std::span<const double> lead(std::size_t index) const { return samples_.row(index); }
    std::span<const double> lead(std::string_view name) const;
    static constexpr double rate_hz() noexcept { return kStandardRateHz; }

    friend bool operator==(const StandardEcg&, const StandardEcg&) = default;

private:
    Matrix samples_;
};

struct NormalizationOptions {
    double target_rate_hz = kStandardRateHz;
    std::size_t target_samples = kStandardSamples;
    double adc_gain_target = 1000.0;
    double baseline_window_ms = 200.0;
    double clip_low_quantile = 0.01;
    double clip_high_quantile = 0.99;
    bool enable_baseline_removal = true;
    bool enable_clipping = true;

    void validate() const;
};

/// Index of `name` in the canonical order, accepting case variants, a
/// leading "Lead" word and the Frank leads as unmapped extras. Returns
/// nullopt for names outside the vocabulary.
std::optional<std::size_t> canonical_lead_index(std::string_view name);

/// True if `name` is a known lead that the pipeline drops (Frank X/Y/Z).
bool is_auxiliary_lead(std::string_view name);

RawRecording canonicalize_leads(const RawRecording& rec);

std::vector<double> resample_fft(std::span<const double> signal, double from_hz, double to_hz);

Matrix fit_duration(const Matrix& signal, std::size_t target_samples);

Matrix scale_to_mv(const Matrix& samples, double adc_gain, std::span<const double> baseline);

/// Moving-median window length in samples: rounded, then bumped to odd.
std::size_t median_window_samples(double window_ms, double rate_hz);

std::vector<double> remove_baseline_wander(std::span<const double> signal, double rate_hz,
                                           double window_ms);

/// Linear-interpolation quantile at fractional order-statistic index q*(n-1).
double quantile_linear(std::span<const double> values, double q);

std::vector<double> clip_quantiles(std::span<const double> signal, double q_low, double q_high);

/// Gain used by normalize: explicit gain, else 1000 for raw-count data, else 1.
double effective_gain(const RawRecording& rec, const NormalizationOptions& opts = {});

StandardEcg normalize(const RawRecording& rec, const NormalizationOptions& opts = {});

/// canonicalize -> scale -> resample -> fit, returned as a recording so the
/// stage can be re-applied to its own output.
RawRecording normalize_core(const RawRecording& rec, const NormalizationOptions& opts = {});

}  // namespace ecgx
