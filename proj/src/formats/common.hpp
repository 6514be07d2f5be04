#pragma once

#include <exception>
#include <string>
#include <utility>
#include <vector>

#include "ecgx/error.hpp"
#include "ecgx/formats.hpp"

namespace ecgx::formats::detail {

/// Lead names assumed for headerless data: 8 -> I, II, V1..V6;
/// 12 -> canonical; 15 -> canonical + Frank VX/VY/VZ.
std::vector<std::string> positional_lead_names(std::size_t n_leads);

bool is_lead_count(std::size_t n);

/// Applies the shared orientation rule: the axis whose size is 8, 12 or 15
/// holds the leads; when both qualify, rows are leads.
Matrix orient_leads_first(const Matrix& m);

/// Builds a recording from a lead-major matrix with positional names and
/// the rate taken from options or the 500 Hz default.
RawRecording positional_recording(Matrix leads_first, bool integer_samples, SourceFormat fmt,
                                  const ParseOptions& opts);

void apply_rate(RawRecording& rec, const ParseOptions& opts, std::optional<double> from_file = {});

/// Subtracts the per-lead ADC baselines (kept in metadata["adc_baseline"])
/// and folds per-lead gains into one: equal gains are kept as adc_gain,
/// mixed gains are converted to mV up front.
void set_lead_gains(RawRecording& rec, const std::vector<double>& gains,
                    const std::vector<double>& baselines);

bool parse_double(std::string_view text, double& out);

std::string trim(std::string_view s);

/// Runs a parser body and converts any foreign exception into `fallback`.
template <typename Fn>
auto guarded(ErrorCode fallback, const char* what, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(fallback, std::string(what) + ": " + e.what());
    }
}

}  // namespace ecgx::formats::detail
