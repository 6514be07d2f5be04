#pragma once

#include <cstdint>
#include <vector>

#include "ecgx/matrix.hpp"
#include "ecgx/signal.hpp"

namespace ecgx::testing {

struct BeatShape {
    double r_amplitude_mv = 1.0;
    double r_sigma_s = 0.02;
    double t_amplitude_mv = 0.0;
    double t_delay_s = 0.25;
    double t_sigma_s = 0.05;
    double s_amplitude_mv = 0.0;  // negative deflection right after R
};

/// Per-lead amplitude multipliers; lead II (index 1) is 1.
const std::vector<double>& default_lead_gains();

/// Beat times t0 + k*period for k = 0..count-1.
std::vector<double> beat_times(double first_s, double period_s, std::size_t count);

/// Beat times t0 + k*period that lie strictly inside [0, duration).
std::vector<double> beat_times_within(double first_s, double period_s, double duration_s);

Matrix synthesize(const std::vector<double>& times_s, const BeatShape& shape, double rate_hz,
                  std::size_t n_samples, double noise_sigma = 0.0, std::uint64_t seed = 0,
                  const std::vector<double>& lead_gains = default_lead_gains());

StandardEcg synthetic_ecg(const std::vector<double>& times_s, const BeatShape& shape = {},
                          double noise_sigma = 0.0, std::uint64_t seed = 0);

/// Regular rhythm at `bpm` starting at `first_s`, 10 s at 100 Hz.
StandardEcg synthetic_rhythm(double bpm, double first_s = 0.5, const BeatShape& shape = {},
                             double noise_sigma = 0.0, std::uint64_t seed = 0);

/// Wraps a matrix as a RawRecording with canonical lead names.
RawRecording as_recording(const Matrix& m, double rate_hz, SourceFormat fmt = SourceFormat::npy);

}  // namespace ecgx::testing
