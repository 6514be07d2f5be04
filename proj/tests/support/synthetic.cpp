#include "support/synthetic.hpp"

#include <cmath>
#include <random>

namespace ecgx::testing {

const std::vector<double>& default_lead_gains() {
    static const std::vector<double> gains = {0.8, 1.0, 0.5, -0.9, 0.4, 0.7,
                                              -0.6, 0.3, 0.9, 1.2, 1.1, 0.9};
    return gains;
}

std::vector<double> beat_times(double first_s, double period_s, std::size_t count) {
    std::vector<double> t;
    for (std::size_t k = 0; k < count; ++k) t.push_back(first_s + static_cast<double>(k) * period_s);
    return t;
}

std::vector<double> beat_times_within(double first_s, double period_s, double duration_s) {
    std::vector<double> t;
    for (double x = first_s; x < duration_s; x += period_s) t.push_back(x);
    return t;
}

Matrix synthesize(const std::vector<double>& times_s, const BeatShape& shape, double rate_hz,
                  std::size_t n_samples, double noise_sigma, std::uint64_t seed,
                  const std::vector<double>& lead_gains) {
    Matrix m(lead_gains.size(), n_samples);
    std::vector<double> base(n_samples, 0.0);
    auto bump = [](double t, double centre, double sigma) {
        const double z = (t - centre) / sigma;
        return std::exp(-0.5 * z * z);
    };
    for (std::size_t i = 0; i < n_samples; ++i) {
        const double t = static_cast<double>(i) / rate_hz;
        double v = 0.0;
        for (double c : times_s) {
            if (std::abs(t - c) > 1.0) continue;
            v += shape.r_amplitude_mv * bump(t, c, shape.r_sigma_s);
            if (shape.s_amplitude_mv != 0.0)
                v -= shape.s_amplitude_mv * bump(t, c + 2.5 * shape.r_sigma_s, shape.r_sigma_s);
            if (shape.t_amplitude_mv != 0.0)
                v += shape.t_amplitude_mv * bump(t, c + shape.t_delay_s, shape.t_sigma_s);
        }
        base[i] = v;
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
    for (std::size_t r = 0; r < lead_gains.size(); ++r)
        for (std::size_t i = 0; i < n_samples; ++i)
            m(r, i) = lead_gains[r] * base[i] + (noise_sigma > 0.0 ? noise(rng) : 0.0);
    return m;
}

StandardEcg synthetic_ecg(const std::vector<double>& times_s, const BeatShape& shape,
                          double noise_sigma, std::uint64_t seed) {
    return StandardEcg(synthesize(times_s, shape, kStandardRateHz, kStandardSamples, noise_sigma, seed));
}

StandardEcg synthetic_rhythm(double bpm, double first_s, const BeatShape& shape, double noise_sigma,
                             std::uint64_t seed) {
    return synthetic_ecg(beat_times_within(first_s, 60.0 / bpm, 10.0), shape, noise_sigma, seed);
}

RawRecording as_recording(const Matrix& m, double rate_hz, SourceFormat fmt) {
    RawRecording rec;
    rec.samples = m;
    rec.sampling_rate_hz = rate_hz;
    rec.source_format = fmt;
    for (std::size_t i = 0; i < m.rows(); ++i) rec.lead_names.emplace_back(kCanonicalLeads[i]);
    return rec;
}

}  // namespace ecgx::testing
