#pragma once

#include <array>
#include <string_view>

// Per-task F1 values of the external-test comparison tables and the
// aggregate rows printed beneath them (average, median, IQR, CV).
namespace ecgx::testing {

struct PublishedColumn {
    std::string_view model;
    std::array<double, 9> values;
    std::array<double, 4> aggregates;
};

inline constexpr std::array<PublishedColumn, 6> kWeightedF1Columns{{
    {"XceptionTime (baseline)", {.335, .371, .432, .753, .566, .730, .825, .739, .750}, {.611, .730, .318, .308}},
    {"XceptionTime (fine-tuned)", {.647, .374, .387, .734, .484, .101, .820, .827, .688}, {.562, .647, .347, .433}},
    {"InceptionTime", {.064, .358, .379, .726, .584, .792, .819, .732, .645}, {.567, .645, .353, .443}},
    {"CardX", {.644, .208, .263, .502, .625, .610, .571, .826, .614}, {.540, .610, .123, .358}},
    {"DSAIL SNU", {.585, .323, .331, .336, .343, .496, .333, .622, .635}, {.445, .343, .252, .310}},
    {"ECG-FM", {.173, .355, .216, .403, .532, .617, .087, .248, .603}, {.359, .355, .316, .538}},
}};

inline constexpr std::array<PublishedColumn, 6> kMacroF1Columns{{
    {"XceptionTime (baseline)", {.112, .278, .293, .753, .546, .548, .825, .741, .750}, {.538, .645, .457, .475}},
    {"XceptionTime (fine-tuned)", {.430, .280, .266, .734, .469, .282, .820, .821, .688}, {.532, .579, .452, .442}},
    {"InceptionTime", {.021, .269, .379, .726, .570, .648, .819, .733, .546}, {.523, .609, .347, .491}},
    {"CardX", {.171, .117, .143, .499, .630, .276, .439, .820, .614}, {.412, .469, .443, .606}},
    {"DSAIL SNU", {.242, .243, .219, .336, .352, .404, .333, .630, .635}, {.377, .344, .161, .416}},
    {"ECG-FM", {.070, .136, .108, .410, .495, .306, .166, .302, .603}, {.288, .304, .274, .643}},
}};

inline constexpr double kAggregateTolerance = 0.0015;

}  // namespace ecgx::testing
