#include "ecgx/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ecgx/error.hpp"

namespace ecgx::analysis {

namespace {

std::size_t samples_for_ms(double ms, double rate_hz) {
    return static_cast<std::size_t>(std::lround(ms * rate_hz / 1000.0));
}

// Centered moving average; windows are truncated at the edges.
std::vector<double> moving_average(std::span<const double> x, std::size_t width) {
    const std::size_t n = x.size();
    std::vector<double> prefix(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + x[i];
    const std::size_t half = width / 2;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(n, lo + width);
        out[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
    }
    return out;
}

double clamped(std::span<const double> x, std::ptrdiff_t i) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    return x[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, n - 1))];
}

std::size_t argmax_in(std::span<const double> x, std::size_t lo, std::size_t hi) {
    std::size_t best = lo;
    for (std::size_t i = lo; i <= hi; ++i)
        if (x[i] > x[best]) best = i;
    return best;
}

double median_of(std::vector<double>& v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

struct Detection {
    std::size_t index;  // on the integrated signal
    double threshold;
};

}  // namespace

void FiducialMap::validate(std::size_t signal_length) const {
    for (std::size_t i = 0; i < r_peaks.size(); ++i) {
        if (r_peaks[i] >= signal_length) fail(ErrorCode::InvalidOptions, "R peak beyond signal end");
        if (i > 0 && r_peaks[i] <= r_peaks[i - 1]) fail(ErrorCode::InvalidOptions, "R peaks not strictly increasing");
    }
    if (qrs_onsets.empty() && qrs_offsets.empty()) return;
    if (qrs_onsets.size() != r_peaks.size() || qrs_offsets.size() != r_peaks.size())
        fail(ErrorCode::InvalidOptions, "QRS bounds must be given for every peak");
    for (std::size_t i = 0; i < r_peaks.size(); ++i)
        if (!(qrs_onsets[i] < r_peaks[i] && r_peaks[i] < qrs_offsets[i] && qrs_offsets[i] < signal_length))
            fail(ErrorCode::InvalidOptions, "QRS bounds must bracket their R peak");
}

DetectorTrace pan_tompkins_trace(std::span<const double> lead, double rate_hz, const DetectorOptions& opts) {
    if (!(rate_hz > 0.0)) fail(ErrorCode::BadRate, "rate must be positive");
    DetectorTrace tr;
    // Band-pass as the difference of a short (low-pass) and a long (baseline) average.
    const auto short_w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(rate_hz / opts.band_high_hz)));
    const auto long_w = std::max<std::size_t>(short_w + 1, static_cast<std::size_t>(std::lround(rate_hz / opts.band_low_hz)));
    const auto lp = moving_average(lead, short_w);
    const auto base = moving_average(lead, long_w);
    tr.bandpassed.resize(lead.size());
    for (std::size_t i = 0; i < lead.size(); ++i) tr.bandpassed[i] = lp[i] - base[i];

    const std::span<const double> bp(tr.bandpassed);
    tr.derivative.resize(lead.size());
    for (std::size_t i = 0; i < lead.size(); ++i) {
        const auto k = static_cast<std::ptrdiff_t>(i);
        tr.derivative[i] = rate_hz / 8.0 *
                           (2.0 * clamped(bp, k + 2) + clamped(bp, k + 1) - clamped(bp, k - 1) - 2.0 * clamped(bp, k - 2));
    }
    std::vector<double> squared(lead.size());
    for (std::size_t i = 0; i < lead.size(); ++i) squared[i] = tr.derivative[i] * tr.derivative[i];
    tr.integrated = moving_average(squared, std::max<std::size_t>(1, samples_for_ms(opts.integration_ms, rate_hz)));
    return tr;
}

FiducialMap detect_rpeaks_lead(std::span<const double> lead, double rate_hz, const DetectorOptions& opts) {
    const std::size_t n = lead.size();
    FiducialMap fid;
    fid.rate_hz = rate_hz;
    if (n < 3) fail(ErrorCode::NoBeatsFound, "signal too short for detection");
    const auto tr = pan_tompkins_trace(lead, rate_hz, opts);
    const auto& mwi = tr.integrated;

    const std::size_t learn = std::min(n, std::max<std::size_t>(1, static_cast<std::size_t>(opts.learning_s * rate_hz)));
    double spki = 0.25 * *std::max_element(mwi.begin(), mwi.begin() + static_cast<std::ptrdiff_t>(learn));
    double npki = 0.5 * std::accumulate(mwi.begin(), mwi.begin() + static_cast<std::ptrdiff_t>(learn), 0.0) /
                  static_cast<double>(learn);
    auto threshold1 = [&] { return npki + 0.25 * (spki - npki); };

    const std::size_t refractory = samples_for_ms(opts.refractory_ms, rate_hz);
    std::vector<Detection> found;
    std::vector<std::size_t> noise_peaks;  // candidates below I1 since the last beat
    std::vector<double> rr;

    auto accept = [&](std::size_t p, double thr) {
        if (!found.empty()) {
            rr.push_back(static_cast<double>(p - found.back().index));
            if (rr.size() > 8) rr.erase(rr.begin());
        }
        found.push_back({p, thr});
        noise_peaks.clear();
    };

    for (std::size_t p = 1; p + 1 < n; ++p) {
        const double v = mwi[p];
        if (!(v > mwi[p - 1] && v >= mwi[p + 1]) || !(v > 0.0)) continue;
        if (!found.empty() && p - found.back().index < refractory) {
            // a taller hump inside the refractory period supersedes the last detection
            if (v > mwi[found.back().index]) {
                if (!rr.empty()) rr.back() += static_cast<double>(p - found.back().index);
                found.back().index = p;
                spki = 0.125 * v + 0.875 * spki;
            }
            continue;
        }

        // Search back for a missed beat once the gap exceeds 1.66 mean RR.
        if (!found.empty() && !rr.empty()) {
            const double mean_rr = std::accumulate(rr.begin(), rr.end(), 0.0) / static_cast<double>(rr.size());
            if (static_cast<double>(p - found.back().index) > 1.66 * mean_rr) {
                const double i2 = 0.5 * threshold1();
                std::optional<std::size_t> best;
                for (std::size_t q : noise_peaks)
                    if (q - found.back().index >= refractory && p - q >= refractory && mwi[q] > i2 &&
                        (!best || mwi[q] > mwi[*best]))
                        best = q;
                if (best) {
                    spki = 0.25 * mwi[*best] + 0.75 * spki;
                    accept(*best, i2);
                }
            }
        }

        const double i1 = threshold1();
        if (v > i1) {
            spki = 0.125 * v + 0.875 * spki;
            accept(p, i1);
        } else {
            npki = 0.125 * v + 0.875 * npki;
            noise_peaks.push_back(p);
        }
    }

    // Refine each detection onto the raw-signal maximum and find QRS bounds.
    const std::size_t refine = samples_for_ms(opts.refine_ms, rate_hz);
    for (const auto& d : found) {
        const std::size_t lo = d.index >= refine ? d.index - refine : 0;
        const std::size_t hi = std::min(n - 1, d.index + refine);
        const std::size_t r = argmax_in(lead, lo, hi);
        if (r == 0 || r + 1 >= n) continue;
        if (!fid.r_peaks.empty() && r <= fid.r_peaks.back()) continue;
        if (!fid.r_peaks.empty() && r - fid.r_peaks.back() < refractory) {
            if (lead[r] <= lead[fid.r_peaks.back()]) continue;
            fid.r_peaks.pop_back();
            fid.qrs_onsets.pop_back();
            fid.qrs_offsets.pop_back();
        }
        std::size_t on = d.index;
        while (on > 0 && mwi[on - 1] > d.threshold) --on;
        std::size_t off = d.index;
        while (off + 1 < n && mwi[off + 1] > d.threshold) ++off;
        on = std::min(on, r - 1);
        off = std::max(off, r + 1);
        fid.r_peaks.push_back(r);
        fid.qrs_onsets.push_back(on);
        fid.qrs_offsets.push_back(off);
    }
    if (fid.r_peaks.empty()) fail(ErrorCode::NoBeatsFound, "no R peaks detected");
    // Bounds of neighbouring beats may overlap at very high rates; keep them ordered.
    for (std::size_t i = 1; i < fid.r_peaks.size(); ++i) {
        fid.qrs_onsets[i] = std::max(fid.qrs_onsets[i], fid.qrs_onsets[i - 1] + 1);
        fid.qrs_onsets[i] = std::min(fid.qrs_onsets[i], fid.r_peaks[i] - 1);
    }
    return fid;
}

FiducialMap detect_rpeaks(const StandardEcg& ecg, const DetectorOptions& opts) {
    return detect_rpeaks_lead(ecg.lead(1), StandardEcg::rate_hz(), opts);
}

std::vector<Matrix> extract_qrs_windows(const StandardEcg& ecg, const FiducialMap& fid, double window_ms) {
    const std::size_t n = ecg.samples().cols();
    fid.validate(n);
    const std::size_t w = samples_for_ms(window_ms, StandardEcg::rate_hz());
    if (w == 0) fail(ErrorCode::InvalidOptions, "window must hold at least one sample");
    std::vector<Matrix> out;
    for (std::size_t r : fid.r_peaks) {
        if (r < w / 2 || r - w / 2 + w > n) continue;
        const std::size_t start = r - w / 2;
        Matrix m(kLeadCount, w);
        for (std::size_t l = 0; l < kLeadCount; ++l)
            std::copy_n(ecg.lead(l).begin() + static_cast<std::ptrdiff_t>(start), w, m.row(l).begin());
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<std::size_t> rlign_template(double target_bpm, double rate_hz, std::size_t n_samples) {
    if (!(target_bpm > 0.0) || !(rate_hz > 0.0)) fail(ErrorCode::InvalidOptions, "bpm and rate must be positive");
    std::vector<std::size_t> grid;
    const double period = 60.0 / target_bpm;
    for (std::size_t k = 0;; ++k) {
        const double pos = std::round((0.5 + static_cast<double>(k) * period) * rate_hz);
        if (pos >= static_cast<double>(n_samples)) break;
        const auto p = static_cast<std::size_t>(pos);
        if (grid.empty() || p > grid.back()) grid.push_back(p);
    }
    return grid;
}

AlignedEcg rlign_transform(const StandardEcg& ecg, const FiducialMap& fid, double target_bpm) {
    const std::size_t n = ecg.samples().cols();
    fid.validate(n);
    if (fid.r_peaks.size() < 2) fail(ErrorCode::TooFewBeats, "Rlign needs at least two R peaks");
    AlignedEcg out;
    out.template_rpeaks = rlign_template(target_bpm, StandardEcg::rate_hz(), n);
    if (out.template_rpeaks.size() < 2) fail(ErrorCode::InvalidOptions, "target rate leaves fewer than two template beats");
    const std::size_t m = std::min(fid.r_peaks.size(), out.template_rpeaks.size());
    out.beats_used = m;
    out.samples = Matrix(kLeadCount, n);

    const auto& tpl = out.template_rpeaks;
    const auto& rp = fid.r_peaks;
    for (std::size_t l = 0; l < kLeadCount; ++l) {
        const auto in = ecg.lead(l);
        auto dst = out.samples.row(l);
        const auto r0 = static_cast<std::ptrdiff_t>(rp[0]);
        const auto t0 = static_cast<std::ptrdiff_t>(tpl[0]);
        for (std::ptrdiff_t j = 0; j <= t0; ++j) dst[static_cast<std::size_t>(j)] = clamped(in, r0 - (t0 - j));
        for (std::size_t s = 0; s + 1 < m; ++s) {
            const double span_in = static_cast<double>(rp[s + 1] - rp[s]);
            const double span_out = static_cast<double>(tpl[s + 1] - tpl[s]);
            for (std::size_t j = tpl[s]; j <= tpl[s + 1]; ++j) {
                const double pos = static_cast<double>(rp[s]) + static_cast<double>(j - tpl[s]) * span_in / span_out;
                const auto lo = static_cast<std::size_t>(std::floor(pos));
                const double frac = pos - static_cast<double>(lo);
                dst[j] = frac == 0.0 ? in[lo] : (1.0 - frac) * in[lo] + frac * in[std::min(lo + 1, n - 1)];
            }
        }
        const auto rl = static_cast<std::ptrdiff_t>(rp[m - 1]);
        const auto tl = static_cast<std::ptrdiff_t>(tpl[m - 1]);
        for (auto j = tl; j < static_cast<std::ptrdiff_t>(n); ++j) dst[static_cast<std::size_t>(j)] = clamped(in, rl + (j - tl));
    }
    return out;
}

MedianBeat median_beat(const Matrix& signal, double rate_hz, const FiducialMap& fid, const BeatWindow& window) {
    const std::size_t n = signal.cols();
    fid.validate(n);
    const std::size_t pre = samples_for_ms(window.pre_ms, rate_hz);
    const std::size_t post = samples_for_ms(window.post_ms, rate_hz);
    if (pre + post == 0 || post == 0) fail(ErrorCode::InvalidOptions, "beat window must extend past the R peak");
    const std::size_t w = pre + post;

    std::vector<std::size_t> starts;
    for (std::size_t r : fid.r_peaks)
        if (r >= pre && r - pre + w <= n) starts.push_back(r - pre);
    if (starts.empty()) fail(ErrorCode::TooFewBeats, "no complete beat window");

    MedianBeat beat{Matrix(signal.rows(), w), pre};
    std::vector<double> column(starts.size());
    for (std::size_t l = 0; l < signal.rows(); ++l) {
        const auto row = signal.row(l);
        for (std::size_t j = 0; j < w; ++j) {
            for (std::size_t b = 0; b < starts.size(); ++b) column[b] = row[starts[b] + j];
            beat.samples(l, j) = median_of(column);
        }
    }
    return beat;
}

MedianBeat median_beat(const StandardEcg& ecg, const FiducialMap& fid, const BeatWindow& window) {
    return median_beat(ecg.samples(), StandardEcg::rate_hz(), fid, window);
}

}  // namespace ecgx::analysis
