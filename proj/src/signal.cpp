#include "ecgx/signal.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <complex>
#include <mutex>

#include "ecgx/error.hpp"

namespace ecgx {

namespace {

std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

std::string upper(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    return out;
}

std::string normalized_lead_key(std::string_view name) {
    std::string key;
    for (char c : name) {
        if (std::isspace(static_cast<unsigned char>(c)) || c == '_' || c == '-') continue;
        key.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    if (key.rfind("LEAD", 0) == 0 && key.size() > 4) key.erase(0, 4);
    return key;
}

double median_of(std::vector<double>& scratch) {
    const std::size_t n = scratch.size();
    auto mid = scratch.begin() + static_cast<std::ptrdiff_t>(n / 2);
    std::nth_element(scratch.begin(), mid, scratch.end());
    if (n % 2 == 1) return *mid;
    const double upper_mid = *mid;
    const double lower_mid = *std::max_element(scratch.begin(), mid);
    return 0.5 * (lower_mid + upper_mid);
}

}  // namespace

std::string_view to_string(SourceFormat f) noexcept {
    switch (f) {
        case SourceFormat::csv: return "csv";
        case SourceFormat::npy: return "npy";
        case SourceFormat::npz: return "npz";
        case SourceFormat::wfdb: return "wfdb";
        case SourceFormat::dicom: return "dicom";
        case SourceFormat::mat: return "mat";
        case SourceFormat::xml: return "xml";
        case SourceFormat::json: return "json";
    }
    return "npy";
}

void RawRecording::validate() const {
    if (samples.rows() < 1 || samples.cols() < 1)
        fail(ErrorCode::InvalidOptions, "recording has no samples");
    if (!(sampling_rate_hz > 0.0) || !std::isfinite(sampling_rate_hz))
        fail(ErrorCode::BadRate, "sampling rate must be positive");
    if (lead_names.size() != samples.rows())
        fail(ErrorCode::InvalidOptions, "lead name count does not match lead count");
    if (!baseline.empty() && baseline.size() != samples.rows())
        fail(ErrorCode::InvalidOptions, "baseline count does not match lead count");
    for (std::size_t i = 0; i < lead_names.size(); ++i)
        for (std::size_t j = i + 1; j < lead_names.size(); ++j)
            if (upper(lead_names[i]) == upper(lead_names[j]))
                fail(ErrorCode::InvalidOptions, "duplicate lead name " + lead_names[i]);
}

StandardEcg::StandardEcg(Matrix samples) : samples_(std::move(samples)) {
    if (samples_.rows() != kLeadCount || samples_.cols() != kStandardSamples)
        fail(ErrorCode::ShapeMismatch, "standard ECG must be 12 x 1000");
    for (double v : samples_.data())
        if (!std::isfinite(v)) fail(ErrorCode::NonFiniteEvaluation, "standard ECG has non-finite values");
}

std::span<const double> StandardEcg::lead(std::string_view name) const {
    auto idx = canonical_lead_index(name);
    if (!idx) fail(ErrorCode::UnknownLead, "unknown lead " + std::string(name));
    return samples_.row(*idx);
}

void NormalizationOptions::validate() const {
    if (!(target_rate_hz > 0.0)) fail(ErrorCode::BadRate, "target rate must be positive");
    if (target_samples == 0) fail(ErrorCode::InvalidOptions, "target_samples must be positive");
    if (!(adc_gain_target > 0.0)) fail(ErrorCode::NonPositiveGain, "default gain must be positive");
    if (!(baseline_window_ms > 0.0)) fail(ErrorCode::InvalidOptions, "baseline window must be positive");
    if (!(clip_low_quantile >= 0.0 && clip_low_quantile < clip_high_quantile && clip_high_quantile <= 1.0))
        fail(ErrorCode::InvalidOptions, "clip quantiles must satisfy 0 <= low < high <= 1");
}

std::optional<std::size_t> canonical_lead_index(std::string_view name) {
    const std::string key = normalized_lead_key(name);
    for (std::size_t i = 0; i < kCanonicalLeads.size(); ++i)
        if (key == upper(kCanonicalLeads[i])) return i;
    return std::nullopt;
}

bool is_auxiliary_lead(std::string_view name) {
    const std::string key = normalized_lead_key(name);
    return key == "VX" || key == "VY" || key == "VZ" || key == "X" || key == "Y" || key == "Z";
}

RawRecording canonicalize_leads(const RawRecording& rec) {
    rec.validate();
    std::array<std::optional<std::size_t>, kLeadCount> source_row{};
    for (std::size_t r = 0; r < rec.lead_names.size(); ++r) {
        const auto idx = canonical_lead_index(rec.lead_names[r]);
        if (!idx) {
            if (is_auxiliary_lead(rec.lead_names[r])) continue;
            fail(ErrorCode::UnknownLead, "cannot map lead name '" + rec.lead_names[r] + "'");
        }
        source_row[*idx] = r;
    }

    const bool all_twelve = std::all_of(source_row.begin(), source_row.end(),
                                        [](const auto& r) { return r.has_value(); });
    const bool eight_set = std::all_of(kEightLeadSet.begin(), kEightLeadSet.end(), [&](auto lead) {
        return source_row[*canonical_lead_index(lead)].has_value();
    });
    if (!all_twelve && !eight_set)
        fail(ErrorCode::IncompleteLeadSet, "need all 12 leads or the set {I, II, V1..V6}");

    const std::size_t n = rec.n_samples();
    RawRecording out;
    out.lead_names.assign(kCanonicalLeads.begin(), kCanonicalLeads.end());
    out.samples = Matrix(kLeadCount, n);
    out.sampling_rate_hz = rec.sampling_rate_hz;
    out.adc_gain = rec.adc_gain;
    out.source_format = rec.source_format;
    out.metadata = rec.metadata;
    out.baseline.assign(kLeadCount, 0.0);

    auto base = [&](std::size_t r) { return rec.baseline.empty() ? 0.0 : rec.baseline[r]; };
    for (std::size_t i = 0; i < kLeadCount; ++i) {
        if (!source_row[i]) continue;
        out.samples.set_row(i, rec.samples.row(*source_row[i]));
        out.baseline[i] = base(*source_row[i]);
    }
    if (!all_twelve) {
        // Einthoven / Goldberger. Derived leads are formed after removing the
        // source baselines so the relations hold in physical units.
        const auto lead_i = rec.samples.row(*source_row[0]);
        const auto lead_ii = rec.samples.row(*source_row[1]);
        const double b1 = base(*source_row[0]);
        const double b2 = base(*source_row[1]);
        for (std::size_t t = 0; t < n; ++t) {
            const double a = lead_i[t] - b1;
            const double b = lead_ii[t] - b2;
            out.samples(2, t) = b - a;
            out.samples(3, t) = -(a + b) / 2.0;
            out.samples(4, t) = a - b / 2.0;
            out.samples(5, t) = b - a / 2.0;
        }
        for (std::size_t i = 2; i < 6; ++i) out.baseline[i] = 0.0;
        out.metadata["derived_leads"] = "III,aVR,aVL,aVF";
    }
    return out;
}

std::vector<double> resample_fft(std::span<const double> signal, double from_hz, double to_hz) {
    if (!(from_hz > 0.0) || !(to_hz > 0.0) || !std::isfinite(from_hz) || !std::isfinite(to_hz))
        fail(ErrorCode::BadRate, "sampling rates must be positive");
    const std::size_t n_in = signal.size();
    if (n_in < 2) fail(ErrorCode::BadLength, "resampling needs at least two samples");
    const auto n_out = static_cast<std::size_t>(std::llround(static_cast<double>(n_in) * to_hz / from_hz));
    if (n_out == 0) fail(ErrorCode::BadRate, "resampled signal would be empty");
    if (n_out == n_in) return {signal.begin(), signal.end()};

    std::vector<double> in(signal.begin(), signal.end());
    std::vector<std::complex<double>> spectrum(n_in / 2 + 1);
    std::vector<std::complex<double>> target(n_out / 2 + 1);
    std::vector<double> out(n_out);

    fftw_plan forward;
    fftw_plan inverse;
    {
        std::lock_guard lock(fftw_planner_mutex());
        forward = fftw_plan_dft_r2c_1d(static_cast<int>(n_in), in.data(),
                                       reinterpret_cast<fftw_complex*>(spectrum.data()), FFTW_ESTIMATE);
        inverse = fftw_plan_dft_c2r_1d(static_cast<int>(n_out), reinterpret_cast<fftw_complex*>(target.data()),
                                       out.data(), FFTW_ESTIMATE);
    }
    // FFTW_ESTIMATE planning leaves the arrays untouched, so the input copy
    // is still intact here.
    std::copy(signal.begin(), signal.end(), in.begin());
    fftw_execute(forward);

    const std::size_t shared = std::min(n_in, n_out);
    const std::size_t keep = shared / 2 + 1;
    for (std::size_t k = 0; k < keep; ++k) target[k] = spectrum[k];
    if (shared % 2 == 0) {
        // The +/- Nyquist pair of the shorter grid folds into (or splits out
        // of) a single real bin.
        if (n_out < n_in)
            target[shared / 2] *= 2.0;
        else
            target[shared / 2] *= 0.5;
    }
    fftw_execute(inverse);
    {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(forward);
        fftw_destroy_plan(inverse);
    }
    const double scale = 1.0 / static_cast<double>(n_in);
    for (double& v : out) v *= scale;
    return out;
}

Matrix fit_duration(const Matrix& signal, std::size_t target_samples) {
    if (signal.empty()) fail(ErrorCode::BadLength, "cannot fit an empty signal");
    if (signal.cols() == target_samples) return signal;
    Matrix out(signal.rows(), target_samples);
    const std::size_t copied = std::min(signal.cols(), target_samples);
    for (std::size_t r = 0; r < signal.rows(); ++r) {
        const auto src = signal.row(r);
        auto dst = out.row(r);
        std::copy_n(src.begin(), copied, dst.begin());
        std::fill(dst.begin() + static_cast<std::ptrdiff_t>(copied), dst.end(), src.back());
    }
    return out;
}

Matrix scale_to_mv(const Matrix& samples, double adc_gain, std::span<const double> baseline) {
    if (!(adc_gain > 0.0) || !std::isfinite(adc_gain))
        fail(ErrorCode::NonPositiveGain, "ADC gain must be positive");
    if (!baseline.empty() && baseline.size() != samples.rows())
        fail(ErrorCode::ShapeMismatch, "one baseline per lead required");
    Matrix out(samples.rows(), samples.cols());
    for (std::size_t r = 0; r < samples.rows(); ++r) {
        const double b = baseline.empty() ? 0.0 : baseline[r];
        const auto src = samples.row(r);
        auto dst = out.row(r);
        if (adc_gain == 1.0 && b == 0.0) {
            std::copy(src.begin(), src.end(), dst.begin());
            continue;
        }
        for (std::size_t t = 0; t < src.size(); ++t) dst[t] = (src[t] - b) / adc_gain;
    }
    return out;
}

std::size_t median_window_samples(double window_ms, double rate_hz) {
    auto w = static_cast<std::size_t>(std::llround(window_ms * rate_hz / 1000.0));
    if (w == 0) w = 1;
    if (w % 2 == 0) ++w;
    return w;
}

std::vector<double> remove_baseline_wander(std::span<const double> signal, double rate_hz,
                                           double window_ms) {
    if (!(rate_hz > 0.0)) fail(ErrorCode::BadRate, "sampling rate must be positive");
    if (!(window_ms > 0.0)) fail(ErrorCode::InvalidOptions, "window must be positive");
    const std::size_t n = signal.size();
    const std::size_t half = median_window_samples(window_ms, rate_hz) / 2;
    std::vector<double> out(n);
    std::vector<double> scratch;
    scratch.reserve(2 * half + 1);
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t lo = t >= half ? t - half : 0;
        const std::size_t hi = std::min(n - 1, t + half);
        scratch.assign(signal.begin() + static_cast<std::ptrdiff_t>(lo),
                       signal.begin() + static_cast<std::ptrdiff_t>(hi + 1));
        out[t] = signal[t] - median_of(scratch);
    }
    return out;
}

double quantile_linear(std::span<const double> values, double q) {
    if (values.empty()) fail(ErrorCode::TooFew, "quantile of an empty set");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> clip_quantiles(std::span<const double> signal, double q_low, double q_high) {
    if (!(q_low >= 0.0 && q_low < q_high && q_high <= 1.0))
        fail(ErrorCode::InvalidOptions, "quantiles must satisfy 0 <= low < high <= 1");
    if (signal.empty()) return {};
    const double lo = quantile_linear(signal, q_low);
    const double hi = quantile_linear(signal, q_high);
    std::vector<double> out(signal.begin(), signal.end());
    for (double& v : out) v = std::clamp(v, lo, hi);
    return out;
}

double effective_gain(const RawRecording& rec, const NormalizationOptions& opts) {
    if (rec.adc_gain) return *rec.adc_gain;
    const auto units = rec.metadata.find(std::string(kUnitsKey));
    if (units != rec.metadata.end() && units->second == "adu") return opts.adc_gain_target;
    return 1.0;
}

RawRecording normalize_core(const RawRecording& rec, const NormalizationOptions& opts) {
    opts.validate();
    RawRecording canon = canonicalize_leads(rec);
    Matrix mv = scale_to_mv(canon.samples, effective_gain(canon, opts), canon.baseline);

    Matrix resampled;
    if (canon.sampling_rate_hz == opts.target_rate_hz) {
        resampled = std::move(mv);
    } else {
        std::vector<std::vector<double>> rows;
        rows.reserve(kLeadCount);
        for (std::size_t r = 0; r < kLeadCount; ++r)
            rows.push_back(resample_fft(mv.row(r), canon.sampling_rate_hz, opts.target_rate_hz));
        resampled = from_rows(rows);
    }

    RawRecording out;
    out.lead_names = canon.lead_names;
    out.samples = fit_duration(resampled, opts.target_samples);
    out.sampling_rate_hz = opts.target_rate_hz;
    out.adc_gain = 1.0;
    out.baseline.assign(kLeadCount, 0.0);
    out.source_format = canon.source_format;
    out.metadata = canon.metadata;
    out.metadata[std::string(kUnitsKey)] = "mV";
    return out;
}

StandardEcg normalize(const RawRecording& rec, const NormalizationOptions& opts) {
    if (opts.target_samples != kStandardSamples || opts.target_rate_hz != kStandardRateHz)
        fail(ErrorCode::InvalidOptions, "a StandardEcg is always 12 x 1000 at 100 Hz");
    RawRecording core = normalize_core(rec, opts);
    Matrix& m = core.samples;
    for (std::size_t r = 0; r < m.rows(); ++r) {
        std::vector<double> lead = m.row_copy(r);
        if (opts.enable_baseline_removal)
            lead = remove_baseline_wander(lead, opts.target_rate_hz, opts.baseline_window_ms);
        if (opts.enable_clipping)
            lead = clip_quantiles(lead, opts.clip_low_quantile, opts.clip_high_quantile);
        m.set_row(r, lead);
    }
    return StandardEcg(std::move(m));
}

}  // namespace ecgx
