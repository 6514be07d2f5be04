#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ecgx/matrix.hpp"
#include "ecgx/metrics.hpp"

namespace ecgx::testing {

struct Blobs {
    Matrix x;
    std::vector<metrics::LabelSet> labels;
    Matrix centers;
};

/// Isotropic Gaussian blobs (sd `sigma`) whose centers sit `margin` sigmas
/// either side of the bisecting hyperplanes; classes alternate sample by sample.
inline Blobs make_blobs(std::size_t n, std::size_t n_classes, std::size_t dim, double margin, std::uint64_t seed,
                        double sigma = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Blobs b;
    b.centers = Matrix(n_classes, dim);
    // centers along orthogonal axes, pairwise distance 2 * margin * sigma
    for (std::size_t c = 0; c < n_classes; ++c) b.centers(c, c % dim) = margin * sigma * std::sqrt(2.0);
    b.x = Matrix(n, dim);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % n_classes;
        for (std::size_t j = 0; j < dim; ++j) b.x(i, j) = b.centers(c, j) + sigma * nd(rng);
        b.labels.push_back({"class" + std::to_string(c)});
    }
    return b;
}

}  // namespace ecgx::testing
