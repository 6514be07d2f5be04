#include "ecgx/moa.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ecgx/error.hpp"

namespace ecgx::moa {

namespace {

void check_finite(std::span<const double> v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x)) fail(ErrorCode::BadLength, std::string(what) + " must be finite");
}

void check_batch(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) fail(ErrorCode::EmptyBatch, "batch is empty");
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

double mean_kernel(const Matrix& a, const Matrix& b, double two_sigma_sq) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) s += std::exp(-squared_distance(a.row(i), b.row(j)) / two_sigma_sq);
    return s / static_cast<double>(a.rows() * b.rows());
}

std::vector<double> column_mean(const Matrix& m) {
    std::vector<double> mean(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) mean[c] += m(r, c);
    for (double& v : mean) v /= static_cast<double>(m.rows());
    return mean;
}

// Chain rule through a row softmax: dL/dz_j = p_j (g_j - sum_i g_i p_i).
void softmax_backward(std::span<const double> p, std::span<const double> g, std::span<double> out) {
    double dot = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) dot += g[i] * p[i];
    for (std::size_t j = 0; j < p.size(); ++j) out[j] = p[j] * (g[j] - dot);
}

std::vector<double> selection_fractions(std::size_t n_experts,
                                        const std::vector<std::vector<std::size_t>>& batch_selected) {
    std::vector<double> f(n_experts, 0.0);
    std::size_t total = 0;
    for (const auto& sel : batch_selected) {
        for (std::size_t e : sel) {
            if (e >= n_experts) fail(ErrorCode::BadLength, "selected expert index out of range");
            f[e] += 1.0;
            ++total;
        }
    }
    if (total == 0) fail(ErrorCode::EmptyBatch, "no selections in batch");
    for (double& v : f) v /= static_cast<double>(total);
    return f;
}

}  // namespace

void RouterConfig::validate() const {
    if (n_experts == 0 || k == 0 || k > n_experts) fail(ErrorCode::InvalidOptions, "need 1 <= k <= n_experts");
    if (!(gumbel_tau_min > 0.0) || !(gumbel_tau0 >= gumbel_tau_min))
        fail(ErrorCode::NonPositiveTau, "need tau0 >= tau_min > 0");
    if (!(gumbel_decay > 0.0 && gumbel_decay <= 1.0)) fail(ErrorCode::InvalidOptions, "decay must lie in (0, 1]");
    if (!noise_scale.empty() && noise_scale.size() != n_experts)
        fail(ErrorCode::BadLength, "noise_scale needs one entry per expert");
    if (latent_dim % k != 0) fail(ErrorCode::DimMismatch, "latent_dim must be divisible by k");
}

double RouterConfig::tau_at(std::size_t step) const {
    return std::max(gumbel_tau_min, gumbel_tau0 * std::pow(gumbel_decay, static_cast<double>(step)));
}

std::vector<double> softmax(std::span<const double> z) {
    std::vector<double> out(z.begin(), z.end());
    if (out.empty()) return out;
    const double mx = *std::max_element(out.begin(), out.end());
    double sum = 0.0;
    for (double& v : out) sum += (v = std::exp(v - mx));
    for (double& v : out) v /= sum;
    return out;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

std::vector<double> gumbel_softmax(std::span<const double> logits, double tau, std::span<const double> noise) {
    if (!(tau > 0.0)) fail(ErrorCode::NonPositiveTau, "tau must be positive");
    if (noise.size() != logits.size()) fail(ErrorCode::BadLength, "noise length differs from logits");
    std::vector<double> z(logits.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (logits[i] + noise[i]) / tau;
    return softmax(z);
}

std::vector<std::size_t> top_k(std::span<const double> values, std::size_t k) {
    std::vector<std::size_t> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
    idx.resize(std::min(k, idx.size()));
    std::sort(idx.begin(), idx.end());
    return idx;
}

RouterOutput route(std::span<const double> logits, const RouterConfig& cfg, RouteMode mode, std::size_t step,
                   std::mt19937_64& rng) {
    cfg.validate();
    if (logits.size() != cfg.n_experts)
        fail(ErrorCode::BadLength, "expected " + std::to_string(cfg.n_experts) + " logits, got " +
                                       std::to_string(logits.size()));
    check_finite(logits, "logits");

    RouterOutput out;
    out.logits.assign(logits.begin(), logits.end());
    if (mode == RouteMode::eval) {
        out.probs_full = softmax(logits);
    } else {
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        std::vector<double> noisy(logits.size());
        std::vector<double> gumbel(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) {
            const double scale = softplus(cfg.noise_scale.empty() ? 0.0 : cfg.noise_scale[i]);
            noisy[i] = logits[i] + normal(rng) * scale;
        }
        for (double& g : gumbel) {
            double u = uniform(rng);
            while (u <= 0.0) u = uniform(rng);
            g = -std::log(-std::log(u));
        }
        out.probs_full = gumbel_softmax(noisy, cfg.tau_at(step), gumbel);
    }
    out.selected = top_k(out.probs_full, cfg.k);
    out.gates.assign(cfg.n_experts, 0.0);
    double mass = 0.0;
    for (std::size_t e : out.selected) mass += out.probs_full[e];
    for (std::size_t e : out.selected)
        out.gates[e] = mass > 0.0 ? out.probs_full[e] / mass : 1.0 / static_cast<double>(cfg.k);
    return out;
}

RouterOutput route(std::span<const double> logits, const RouterConfig& cfg, RouteMode mode, std::size_t step) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
    std::mt19937_64 rng(seq);
    return route(logits, cfg, mode, step, rng);
}

double load_balance_loss(const Matrix& batch_probs, const std::vector<std::vector<std::size_t>>& batch_selected) {
    check_batch(batch_probs);
    if (batch_selected.size() != batch_probs.rows()) fail(ErrorCode::BadLength, "one selection set per sample");
    const auto f = selection_fractions(batch_probs.cols(), batch_selected);
    const auto p = column_mean(batch_probs);
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += f[i] * p[i];
    return static_cast<double>(batch_probs.cols()) * s;
}

double route_entropy_loss(const Matrix& batch_probs) {
    check_batch(batch_probs);
    const auto p = column_mean(batch_probs);
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return std::max(0.0, std::log(static_cast<double>(p.size())) - h);
}

double median_heuristic_sigma(const Matrix& x, const Matrix& y) {
    std::vector<const Matrix*> sets = {&x, &y};
    std::vector<std::span<const double>> rows;
    for (const Matrix* m : sets)
        for (std::size_t r = 0; r < m->rows(); ++r) rows.push_back(m->row(r));
    std::vector<double> d;
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j) d.push_back(std::sqrt(squared_distance(rows[i], rows[j])));
    if (d.empty()) return 1.0;
    const std::size_t mid = d.size() / 2;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
    double med = d[mid];
    if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid)));
    return med > 0.0 ? med : 1.0;
}

double mmd_loss(const Matrix& x, const Matrix& y, std::optional<double> sigma) {
    check_batch(x);
    check_batch(y);
    if (x.cols() != y.cols()) fail(ErrorCode::DimMismatch, "samples must share a dimension");
    const double s = sigma ? *sigma : median_heuristic_sigma(x, y);
    if (!(s > 0.0)) fail(ErrorCode::InvalidOptions, "sigma must be positive");
    const double two_sigma_sq = 2.0 * s * s;
    const double v = mean_kernel(x, x, two_sigma_sq) + mean_kernel(y, y, two_sigma_sq) - 2.0 * mean_kernel(x, y, two_sigma_sq);
    // the biased estimator is a squared RKHS norm; clamp rounding below zero
    return std::max(0.0, v);
}

double reconstruction_mse(const Matrix& reconstruction, const Matrix& target) {
    if (reconstruction.rows() != target.rows() || reconstruction.cols() != target.cols())
        fail(ErrorCode::DimMismatch, "reconstruction and target shapes differ");
    if (target.empty()) fail(ErrorCode::EmptyBatch, "empty target");
    double s = 0.0;
    for (std::size_t i = 0; i < target.data().size(); ++i) {
        const double d = reconstruction.data()[i] - target.data()[i];
        s += d * d;
    }
    return s / static_cast<double>(target.data().size());
}

Matrix softmax_rows(const Matrix& batch_logits) {
    Matrix p(batch_logits.rows(), batch_logits.cols());
    for (std::size_t r = 0; r < batch_logits.rows(); ++r) p.set_row(r, softmax(batch_logits.row(r)));
    return p;
}

Matrix load_balance_grad(const Matrix& batch_logits, const std::vector<std::vector<std::size_t>>& batch_selected) {
    check_batch(batch_logits);
    const std::size_t b = batch_logits.rows();
    const std::size_t n = batch_logits.cols();
    const auto f = selection_fractions(n, batch_selected);
    const Matrix p = softmax_rows(batch_logits);
    // L = N * sum_i f_i * mean_b p_bi  =>  dL/dp_bi = N f_i / B
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = static_cast<double>(n) * f[i] / static_cast<double>(b);
    Matrix grad(b, n);
    for (std::size_t r = 0; r < b; ++r) softmax_backward(p.row(r), g, grad.row(r));
    return grad;
}

Matrix route_entropy_grad(const Matrix& batch_logits) {
    check_batch(batch_logits);
    const std::size_t b = batch_logits.rows();
    const Matrix p = softmax_rows(batch_logits);
    const auto mean = column_mean(p);
    // L = ln N + sum_i pbar_i ln pbar_i  =>  dL/dp_bi = (ln pbar_i + 1) / B
    std::vector<double> g(mean.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (std::log(mean[i]) + 1.0) / static_cast<double>(b);
    Matrix grad(b, p.cols());
    for (std::size_t r = 0; r < b; ++r) softmax_backward(p.row(r), g, grad.row(r));
    return grad;
}

Matrix mmd_grad_x(const Matrix& x, const Matrix& y, double sigma) {
    check_batch(x);
    check_batch(y);
    if (x.cols() != y.cols()) fail(ErrorCode::DimMismatch, "samples must share a dimension");
    const double s2 = sigma * sigma;
    const double n = static_cast<double>(x.rows());
    const double m = static_cast<double>(y.rows());
    Matrix grad(x.rows(), x.cols());
    // dk(a,b)/da = -k(a,b) (a - b) / sigma^2
    for (std::size_t a = 0; a < x.rows(); ++a) {
        auto g = grad.row(a);
        for (std::size_t j = 0; j < x.rows(); ++j) {
            const double k = std::exp(-squared_distance(x.row(a), x.row(j)) / (2.0 * s2));
            // x_a appears in both arguments of Kxx, hence the factor 2
            for (std::size_t c = 0; c < x.cols(); ++c) g[c] += -2.0 * k * (x(a, c) - x(j, c)) / s2 / (n * n);
        }
        for (std::size_t j = 0; j < y.rows(); ++j) {
            const double k = std::exp(-squared_distance(x.row(a), y.row(j)) / (2.0 * s2));
            for (std::size_t c = 0; c < x.cols(); ++c) g[c] -= 2.0 * (-k * (x(a, c) - y(j, c)) / s2) / (n * m);
        }
    }
    return grad;
}

Matrix tape_encoding(std::size_t length, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) fail(ErrorCode::OddDim, "tAPE dimension must be even");
    if (length == 0) fail(ErrorCode::BadLength, "sequence length must be at least 1");
    Matrix pe(length, dim);
    const double scale = static_cast<double>(dim) / static_cast<double>(length);
    for (std::size_t i = 0; i < dim / 2; ++i) {
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
        for (std::size_t pos = 0; pos < length; ++pos) {
            const double angle = static_cast<double>(pos) * omega * scale;
            pe(pos, 2 * i) = std::sin(angle);
            pe(pos, 2 * i + 1) = std::cos(angle);
        }
    }
    return pe;
}

Expert affine_expert(std::size_t channels, std::size_t out_dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(channels, 1))));
    Matrix w(out_dim, channels);
    for (double& v : w.data()) v = dist(rng);
    std::vector<double> b(out_dim);
    for (double& v : b) v = 0.1 * dist(rng);
    return [w = std::move(w), b = std::move(b)](const Matrix& features) {
        if (features.rows() != w.cols()) fail(ErrorCode::DimMismatch, "expert expects a different channel count");
        std::vector<double> mean(features.rows(), 0.0);
        for (std::size_t c = 0; c < features.rows(); ++c) {
            for (double v : features.row(c)) mean[c] += v;
            mean[c] /= static_cast<double>(std::max<std::size_t>(features.cols(), 1));
        }
        std::vector<double> out = b;
        for (std::size_t o = 0; o < out.size(); ++o)
            for (std::size_t c = 0; c < mean.size(); ++c) out[o] += w(o, c) * mean[c];
        return out;
    };
}

ConvRouter ConvRouter::random(std::size_t channels, std::size_t n_experts, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    ConvRouter r{Matrix(n_experts, channels), std::vector<double>(n_experts)};
    for (double& v : r.weight.data()) v = dist(rng);
    for (double& v : r.bias) v = 0.1 * dist(rng);
    return r;
}

std::vector<double> ConvRouter::logits(const Matrix& features) const {
    if (features.rows() != weight.cols()) fail(ErrorCode::DimMismatch, "router expects a different channel count");
    if (features.cols() == 0) fail(ErrorCode::BadLength, "features have no time steps");
    std::vector<double> out(weight.rows());
    for (std::size_t e = 0; e < weight.rows(); ++e) {
        double acc = 0.0;
        for (std::size_t c = 0; c < weight.cols(); ++c) {
            double s = 0.0;
            for (double v : features.row(c)) s += v;
            acc += weight(e, c) * s;
        }
        out[e] = acc / static_cast<double>(features.cols()) + bias[e];
    }
    return out;
}

MoAOutput moa_forward(const Matrix& features, const std::vector<Expert>& experts, const ConvRouter& router,
                      const RouterConfig& cfg, RouteMode mode, std::size_t step) {
    cfg.validate();
    if (experts.size() != cfg.n_experts) fail(ErrorCode::DimMismatch, "one expert per router output required");
    MoAOutput out;
    out.routing = route(router.logits(features), cfg, mode, step);
    const std::size_t part = cfg.latent_dim / cfg.k;
    out.latent.reserve(cfg.latent_dim);
    for (std::size_t e : out.routing.selected) {
        const auto y = experts[e](features);
        if (y.size() != part)
            fail(ErrorCode::DimMismatch, "expert " + std::to_string(e) + " returned " + std::to_string(y.size()) +
                                             " values, expected " + std::to_string(part));
        for (double v : y) out.latent.push_back(out.routing.gates[e] * v);
    }
    return out;
}

MoALosses evaluate_losses(const std::vector<RouterOutput>& routes, const Matrix& latents, const Matrix& prior_samples,
                          const Matrix& reconstruction, const Matrix& target) {
    if (routes.empty()) fail(ErrorCode::EmptyBatch, "no routing outputs");
    Matrix probs(routes.size(), routes.front().probs_full.size());
    std::vector<std::vector<std::size_t>> selected;
    for (std::size_t b = 0; b < routes.size(); ++b) {
        if (routes[b].probs_full.size() != probs.cols()) fail(ErrorCode::BadLength, "inconsistent expert counts");
        probs.set_row(b, routes[b].probs_full);
        selected.push_back(routes[b].selected);
    }
    MoALosses l;
    l.load_balance = load_balance_loss(probs, selected);
    l.route_entropy = route_entropy_loss(probs);
    l.mmd = mmd_loss(latents, prior_samples);
    l.reconstruction_mse = reconstruction_mse(reconstruction, target);
    return l;
}

std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> p, double h) {
    if (!(h > 0.0)) fail(ErrorCode::InvalidOptions, "step must be positive");
    std::vector<double> x(p.begin(), p.end());
    std::vector<double> grad(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double keep = x[j];
        x[j] = keep + h;
        const double up = f(x);
        x[j] = keep - h;
        const double down = f(x);
        x[j] = keep;
        if (!std::isfinite(up) || !std::isfinite(down))
            fail(ErrorCode::NonFiniteEvaluation, "function not finite near coordinate " + std::to_string(j));
        grad[j] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace ecgx::moa
