#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "ecgx/matrix.hpp"
#include "ecgx/signal.hpp"

namespace ecgx::analysis {

/// Beat landmarks on lead II. Onsets/offsets are either empty or one per peak.
struct FiducialMap {
    std::vector<std::size_t> r_peaks;
    std::vector<std::size_t> qrs_onsets;
    std::vector<std::size_t> qrs_offsets;
    double rate_hz = kStandardRateHz;

    /// Throws InvalidOptions when ordering or bounds are violated.
    void validate(std::size_t signal_length) const;
};

struct AlignedEcg {
    Matrix samples;                            // 12 x 1000
    std::vector<std::size_t> template_rpeaks;  // full template grid
    std::size_t beats_used = 0;                // peaks mapped onto the grid
};

struct MedianBeat {
    Matrix samples;  // 12 x W
    std::size_t r_position = 0;
};

/// Pan-Tompkins constants, all expressed in physical units.
struct DetectorOptions {
    double band_low_hz = 5.0;
    double band_high_hz = 15.0;
    double integration_ms = 150.0;
    double refractory_ms = 200.0;
    double refine_ms = 50.0;
    double learning_s = 2.0;
};

/// Intermediate detector signals, exposed for plotting and tests.
struct DetectorTrace {
    std::vector<double> bandpassed;
    std::vector<double> derivative;
    std::vector<double> integrated;
};

DetectorTrace pan_tompkins_trace(std::span<const double> lead, double rate_hz,
                                 const DetectorOptions& opts = {});

/// R peaks on an arbitrary single lead (used by detect_rpeaks on lead II).
FiducialMap detect_rpeaks_lead(std::span<const double> lead, double rate_hz,
                               const DetectorOptions& opts = {});

FiducialMap detect_rpeaks(const StandardEcg& ecg, const DetectorOptions& opts = {});

/// One centered 12 x W window per R peak; windows crossing an edge are dropped.
std::vector<Matrix> extract_qrs_windows(const StandardEcg& ecg, const FiducialMap& fid,
                                        double window_ms = 600.0);

/// Template R positions: every 60/bpm seconds from 0.5 s, inside the record.
std::vector<std::size_t> rlign_template(double target_bpm = 60.0, double rate_hz = kStandardRateHz,
                                        std::size_t n_samples = kStandardSamples);

AlignedEcg rlign_transform(const StandardEcg& ecg, const FiducialMap& fid, double target_bpm = 60.0);

struct BeatWindow {
    double pre_ms = 200.0;
    double post_ms = 400.0;
};

MedianBeat median_beat(const Matrix& signal, double rate_hz, const FiducialMap& fid,
                       const BeatWindow& window = {});
MedianBeat median_beat(const StandardEcg& ecg, const FiducialMap& fid, const BeatWindow& window = {});

}  // namespace ecgx::analysis
