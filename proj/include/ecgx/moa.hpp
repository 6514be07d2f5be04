#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ecgx/matrix.hpp"

namespace ecgx::moa {

struct RouterConfig {
    std::size_t n_experts = 4;
    std::size_t k = 2;
    double gumbel_tau0 = 1.0;
    double gumbel_tau_min = 0.1;
    double gumbel_decay = 0.97;  // per epoch
    /// Raw per-expert noise parameters; the noise std is softplus(noise_scale[i]).
    /// Empty means all zeros.
    std::vector<double> noise_scale;
    std::size_t latent_dim = 512;
    std::uint64_t seed = 0;

    void validate() const;
    double tau_at(std::size_t step) const;
};

enum class RouteMode { train, eval };

struct RouterOutput {
    std::vector<double> logits;
    std::vector<double> gates;  // length n_experts, zero outside `selected`
    std::vector<std::size_t> selected;  // ascending expert index
    std::vector<double> probs_full;

    friend bool operator==(const RouterOutput&, const RouterOutput&) = default;
};

std::vector<double> softmax(std::span<const double> z);
double softplus(double x);

std::vector<double> gumbel_softmax(std::span<const double> logits, double tau, std::span<const double> noise);

/// Indices of the k largest values; ties go to the lower index. Result ascending.
std::vector<std::size_t> top_k(std::span<const double> values, std::size_t k);

/// Train mode draws its noise from `rng`; eval mode never touches it.
RouterOutput route(std::span<const double> logits, const RouterConfig& cfg, RouteMode mode, std::size_t step,
                   std::mt19937_64& rng);

/// Convenience overload seeding a private stream from (cfg.seed, step).
RouterOutput route(std::span<const double> logits, const RouterConfig& cfg, RouteMode mode, std::size_t step = 0);

double load_balance_loss(const Matrix& batch_probs, const std::vector<std::vector<std::size_t>>& batch_selected);
double route_entropy_loss(const Matrix& batch_probs);

/// Median pairwise Euclidean distance of the pooled samples (1 if degenerate).
double median_heuristic_sigma(const Matrix& x, const Matrix& y);

/// Biased RBF MMD^2; sigma defaults to the median heuristic.
double mmd_loss(const Matrix& x, const Matrix& y, std::optional<double> sigma = std::nullopt);

double reconstruction_mse(const Matrix& reconstruction, const Matrix& target);

// Analytic gradients, checked against numeric_gradient in the tests.

/// d load_balance / d logits (B x N) with probs = softmax(logits) and selections frozen.
Matrix load_balance_grad(const Matrix& batch_logits, const std::vector<std::vector<std::size_t>>& batch_selected);
/// d route_entropy / d logits (B x N) with probs = softmax(logits).
Matrix route_entropy_grad(const Matrix& batch_logits);
/// d mmd / d x (n x d) for a fixed sigma.
Matrix mmd_grad_x(const Matrix& x, const Matrix& y, double sigma);

/// Row-wise softmax of a B x N logit matrix.
Matrix softmax_rows(const Matrix& batch_logits);

/// tAPE: L x d matrix, frequencies w_i = 10000^(-2i/d) scaled by d/L.
Matrix tape_encoding(std::size_t length, std::size_t dim = 512);

using Expert = std::function<std::vector<double>(const Matrix& features)>;

/// Tiny fixed-seed affine expert on the per-channel mean of the features.
Expert affine_expert(std::size_t channels, std::size_t out_dim, std::uint64_t seed);

/// 1x1 convolution over channels followed by global average pooling.
struct ConvRouter {
    Matrix weight;  // n_experts x channels
    std::vector<double> bias;

    static ConvRouter random(std::size_t channels, std::size_t n_experts, std::uint64_t seed);
    std::vector<double> logits(const Matrix& features) const;
};

struct MoAOutput {
    std::vector<double> latent;
    RouterOutput routing;
};

/// Concatenates the gate-weighted outputs of the selected experts in
/// ascending expert order.
MoAOutput moa_forward(const Matrix& features, const std::vector<Expert>& experts, const ConvRouter& router,
                      const RouterConfig& cfg, RouteMode mode = RouteMode::eval, std::size_t step = 0);

struct MoALosses {
    double load_balance = 0.0;
    double route_entropy = 0.0;
    double mmd = 0.0;
    double reconstruction_mse = 0.0;
};

/// Batch losses: routing terms from `routes`, MMD between `latents` and
/// `prior_samples`, MSE between reconstruction and target.
MoALosses evaluate_losses(const std::vector<RouterOutput>& routes, const Matrix& latents, const Matrix& prior_samples,
                          const Matrix& reconstruction, const Matrix& target);

/// Central differences (f(p + h e_j) - f(p - h e_j)) / 2h.
std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> p, double h = 1e-5);

}  // namespace ecgx::moa
