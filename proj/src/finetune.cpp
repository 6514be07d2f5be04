#include "ecgx/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "ecgx/analysis.hpp"
#include "ecgx/error.hpp"

namespace ecgx::finetune {

namespace {

double log_sum_exp(std::span<const double> z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    return mx + std::log(s);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

std::vector<double> logits_row(const LinearHead& head, std::span<const double> x) {
    std::vector<double> z(head.bias);
    for (std::size_t c = 0; c < z.size(); ++c) {
        const auto w = head.weights.row(c);
        z[c] += std::inner_product(w.begin(), w.end(), x.begin(), 0.0);
    }
    return z;
}

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.set_row(i, m.row(idx[i]));
    return out;
}

std::vector<double> take(std::span<const double> v, const std::vector<std::size_t>& idx) {
    std::vector<double> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(v[i]);
    return out;
}

void clip(std::span<double> g, double limit) {
    for (double& v : g) v = std::clamp(v, -limit, limit);
}

void check_finite_matrix(const Matrix& m) {
    for (double v : m.data())
        if (!std::isfinite(v)) fail(ErrorCode::NonFiniteLoss, "embeddings contain non-finite values");
}

// Stratification keys: the class itself for single-label data; the rarest
// label of each sample otherwise, with singleton keys pooled.
std::vector<std::string> strat_keys(const std::vector<metrics::LabelSet>& labels,
                                    const std::map<std::string, std::size_t>& counts, bool multilabel) {
    std::vector<std::string> keys;
    keys.reserve(labels.size());
    for (const auto& set : labels) {
        if (!multilabel) {
            keys.push_back(set.front());
            continue;
        }
        std::string best;
        std::size_t best_count = SIZE_MAX;
        for (const auto& l : set) {
            const std::size_t c = counts.at(l);
            if (c < best_count || (c == best_count && l < best)) {
                best = l;
                best_count = c;
            }
        }
        keys.push_back(best);
    }
    if (!multilabel) return keys;
    std::map<std::string, std::size_t> key_counts;
    for (const auto& k : keys) ++key_counts[k];
    const std::string pooled = "\x01pooled";
    for (auto& k : keys)
        if (key_counts[k] < 2) k = pooled;
    key_counts.clear();
    for (const auto& k : keys) ++key_counts[k];
    if (key_counts.count(pooled) && key_counts[pooled] < 2) {
        std::string largest;
        std::size_t n = 0;
        for (const auto& [k, c] : key_counts)
            if (k != pooled && c > n) {
                largest = k;
                n = c;
            }
        for (auto& k : keys)
            if (k == pooled) k = largest;
    }
    return keys;
}

std::vector<metrics::LabelSet> predicted_sets(const LinearHead& head, const Matrix& probs) {
    std::vector<metrics::LabelSet> out(probs.rows());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        const auto p = probs.row(r);
        if (head.multilabel) {
            for (std::size_t c = 0; c < p.size(); ++c)
                if (p[c] >= 0.5) out[r].push_back(head.class_names[c]);
        } else {
            const auto it = std::max_element(p.begin(), p.end());
            out[r].push_back(head.class_names[static_cast<std::size_t>(it - p.begin())]);
        }
    }
    return out;
}

}  // namespace

std::vector<double> embed(const StandardEcg& ecg, std::size_t dim) {
    if (dim < 2) fail(ErrorCode::InvalidOptions, "embedding dimension must be at least 2");
    const auto beat = analysis::median_beat(ecg, analysis::detect_rpeaks(ecg));
    const auto& flat = beat.samples.data();
    std::vector<double> out(dim);
    const double step = static_cast<double>(flat.size() - 1) / static_cast<double>(dim - 1);
    for (std::size_t j = 0; j < dim; ++j) {
        const double pos = static_cast<double>(j) * step;
        const auto lo = std::min(static_cast<std::size_t>(pos), flat.size() - 1);
        const std::size_t hi = std::min(lo + 1, flat.size() - 1);
        out[j] = flat[lo] + (pos - static_cast<double>(lo)) * (flat[hi] - flat[lo]);
    }
    const double mean = std::accumulate(out.begin(), out.end(), 0.0) / static_cast<double>(dim);
    double var = 0.0;
    for (double v : out) var += (v - mean) * (v - mean);
    var /= static_cast<double>(dim);
    const double sd = std::sqrt(var);
    for (double& v : out) v = sd > 1e-12 ? (v - mean) / sd : 0.0;
    return out;
}

Split stratified_split(const std::vector<std::string>& labels, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail(ErrorCode::InvalidOptions, "val_fraction must lie in (0, 1)");
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
    if (groups.empty()) fail(ErrorCode::ClassTooSmall, "no samples to split");
    std::mt19937_64 rng(seed);
    Split s;
    for (auto& [label, idx] : groups) {
        if (idx.size() < 2)
            fail(ErrorCode::ClassTooSmall, "class '" + label + "' has " + std::to_string(idx.size()) +
                                               " sample; at least 2 are needed");
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto want = static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * val_fraction));
        const std::size_t n_val = std::clamp<std::size_t>(want, 1, idx.size() - 1);
        s.val.insert(s.val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
        s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    return s;
}

void adamw_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                const AdamHyper& h, std::size_t t) {
    if (grads.size() != params.size())
        fail(ErrorCode::ShapeMismatch, "gradient has " + std::to_string(grads.size()) + " entries for " +
                                           std::to_string(params.size()) + " parameters");
    if (state.m.empty() && state.v.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size() || state.v.size() != params.size())
        fail(ErrorCode::ShapeMismatch, "optimizer state does not match the parameters");
    if (t == 0) fail(ErrorCode::InvalidOptions, "AdamW step counter starts at 1");
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        const double theta = params[i];
        params[i] = theta - lr * m_hat / (std::sqrt(v_hat) + h.eps) - lr * h.weight_decay * theta;
    }
}

double exponential_lr(double lr0, double gamma, std::size_t epoch) {
    return lr0 * std::pow(gamma, static_cast<double>(epoch));
}

void FineTuneConfig::validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) fail(ErrorCode::InvalidOptions, "gamma must lie in (0, 1]");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail(ErrorCode::InvalidOptions, "val_fraction must lie in (0, 1)");
    if (patience < 1) fail(ErrorCode::InvalidOptions, "patience must be at least 1");
    if (max_epochs < 1) fail(ErrorCode::InvalidOptions, "max_epochs must be at least 1");
    if (batch_size < 1) fail(ErrorCode::InvalidOptions, "batch_size must be at least 1");
    if (lr && !(*lr > 0.0 && std::isfinite(*lr))) fail(ErrorCode::InvalidOptions, "lr must be positive");
    if (!(grad_clip_value > 0.0)) fail(ErrorCode::InvalidOptions, "grad_clip_value must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0))
        fail(ErrorCode::InvalidOptions, "betas must lie in [0, 1)");
    if (!(adam.eps > 0.0) || !(adam.weight_decay >= 0.0))
        fail(ErrorCode::InvalidOptions, "eps must be positive and weight_decay non-negative");
}

void LinearHead::validate() const {
    if (class_names.size() < 2) fail(ErrorCode::ShapeMismatch, "a head needs at least 2 classes");
    if (weights.rows() != class_names.size() || bias.size() != class_names.size())
        fail(ErrorCode::ShapeMismatch, "weights, bias and class names disagree on the class count");
    for (double v : weights.data())
        if (!std::isfinite(v)) fail(ErrorCode::NonFiniteLoss, "head weights are not finite");
    for (double v : bias)
        if (!std::isfinite(v)) fail(ErrorCode::NonFiniteLoss, "head bias is not finite");
}

Matrix predict(const LinearHead& head, const Matrix& embeddings) {
    if (embeddings.cols() != head.dim() && embeddings.rows() > 0)
        fail(ErrorCode::ShapeMismatch, "embedding dim " + std::to_string(embeddings.cols()) + " but head expects " +
                                           std::to_string(head.dim()));
    Matrix probs(embeddings.rows(), head.class_names.size());
    for (std::size_t r = 0; r < embeddings.rows(); ++r) {
        const auto z = logits_row(head, embeddings.row(r));
        if (head.multilabel) {
            for (std::size_t c = 0; c < z.size(); ++c) probs(r, c) = sigmoid(z[c]);
        } else {
            const double lse = log_sum_exp(z);
            for (std::size_t c = 0; c < z.size(); ++c) probs(r, c) = std::exp(z[c] - lse);
        }
    }
    return probs;
}

LossAndGrad head_loss(const LinearHead& head, const Matrix& x, const Matrix& targets,
                      std::span<const double> weights, bool with_grad) {
    const std::size_t n_classes = head.class_names.size();
    if (x.cols() != head.dim()) fail(ErrorCode::ShapeMismatch, "embedding dim does not match the head");
    if (targets.rows() != x.rows() || targets.cols() != n_classes)
        fail(ErrorCode::ShapeMismatch, "targets do not match samples x classes");
    if (weights.size() != x.rows()) fail(ErrorCode::ShapeMismatch, "one weight per sample required");
    if (x.rows() == 0) fail(ErrorCode::ShapeMismatch, "empty batch");
    const double total_w = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(total_w > 0.0)) fail(ErrorCode::ShapeMismatch, "sample weights must have a positive sum");

    LossAndGrad out;
    if (with_grad) {
        out.grad_w = Matrix(n_classes, head.dim());
        out.grad_b.assign(n_classes, 0.0);
    }
    std::vector<double> dz(n_classes);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto z = logits_row(head, x.row(i));
        const auto y = targets.row(i);
        const double w = weights[i] / total_w;
        double li = 0.0;
        if (head.multilabel) {
            const double inv_c = 1.0 / static_cast<double>(n_classes);
            for (std::size_t c = 0; c < n_classes; ++c) {
                li += (softplus(z[c]) - y[c] * z[c]) * inv_c;
                dz[c] = w * (sigmoid(z[c]) - y[c]) * inv_c;
            }
        } else {
            const double lse = log_sum_exp(z);
            for (std::size_t c = 0; c < n_classes; ++c) {
                li += y[c] * (lse - z[c]);
                dz[c] = w * (std::exp(z[c] - lse) - y[c]);
            }
        }
        out.loss += w * li;
        if (!with_grad) continue;
        const auto xi = x.row(i);
        for (std::size_t c = 0; c < n_classes; ++c) {
            out.grad_b[c] += dz[c];
            auto g = out.grad_w.row(c);
            for (std::size_t j = 0; j < xi.size(); ++j) g[j] += dz[c] * xi[j];
        }
    }
    return out;
}

LrFinderResult lr_sweep(const std::function<double(double)>& step, const LrFinderOptions& opts) {
    if (!(opts.lr_min > 0.0 && opts.lr_max > opts.lr_min)) fail(ErrorCode::InvalidOptions, "need 0 < lr_min < lr_max");
    if (opts.steps < 2) fail(ErrorCode::InvalidOptions, "the sweep needs at least 2 steps");
    LrFinderResult res;
    const double ratio = opts.lr_max / opts.lr_min;
    double avg = 0.0;
    double best = INFINITY;
    for (std::size_t i = 0; i < opts.steps; ++i) {
        const double lr = opts.lr_min * std::pow(ratio, static_cast<double>(i) / static_cast<double>(opts.steps - 1));
        const double loss = step(lr);
        if (!std::isfinite(loss)) {
            if (i == 0) fail(ErrorCode::DivergedImmediately, "loss is not finite at the smallest learning rate");
            break;
        }
        avg = opts.smoothing * avg + (1.0 - opts.smoothing) * loss;
        const double smoothed = avg / (1.0 - std::pow(opts.smoothing, static_cast<double>(i + 1)));
        if (i > 0 && smoothed > opts.divergence_factor * best) break;
        best = std::min(best, smoothed);
        res.lrs.push_back(lr);
        res.smoothed_losses.push_back(smoothed);
    }
    const auto& s = res.smoothed_losses;
    std::size_t pick = 0;
    if (opts.selection == LrSelection::minimum) {
        pick = static_cast<std::size_t>(std::min_element(s.begin(), s.end()) - s.begin());
    } else if (s.size() >= 2) {
        // lrs are evenly spaced in log space, so index differences suffice
        double steepest = INFINITY;
        for (std::size_t i = 0; i < s.size(); ++i) {
            double g;
            if (i == 0) g = s[1] - s[0];
            else if (i + 1 == s.size()) g = s[i] - s[i - 1];
            else g = 0.5 * (s[i + 1] - s[i - 1]);
            if (g < steepest) {
                steepest = g;
                pick = i;
            }
        }
    }
    res.picked_lr = res.lrs[pick];
    res.lr = std::clamp(res.picked_lr / 10.0, opts.lr_min, opts.lr_max);
    return res;
}

LrFinderResult lr_finder(const LinearHead& init, const Matrix& x, const Matrix& targets,
                         std::span<const double> weights, const FineTuneConfig& cfg, const LrFinderOptions& opts) {
    if (x.rows() == 0) fail(ErrorCode::ShapeMismatch, "the LR finder needs at least one batch");
    LinearHead head = init;
    AdamState sw, sb;
    std::mt19937_64 rng(cfg.seed ^ 0x6c725f66696e64ULL);
    std::vector<std::size_t> order(x.rows());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;
    std::size_t t = 0;
    const std::size_t batch = std::min(cfg.batch_size, x.rows());
    auto step = [&](double lr) {
        std::vector<std::size_t> idx;
        for (std::size_t k = 0; k < batch; ++k) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        auto g = head_loss(head, take_rows(x, idx), take_rows(targets, idx), take(weights, idx));
        if (!std::isfinite(g.loss)) return g.loss;
        clip(g.grad_w.data(), cfg.grad_clip_value);
        clip(g.grad_b, cfg.grad_clip_value);
        ++t;
        adamw_step(head.weights.data(), g.grad_w.data(), sw, lr, cfg.adam, t);
        adamw_step(head.bias, g.grad_b, sb, lr, cfg.adam, t);
        return g.loss;
    };
    LrFinderOptions o = opts;
    o.selection = cfg.lr_selection;
    return lr_sweep(step, o);
}

std::vector<double> class_weights(const Matrix& targets) {
    const std::size_t n_classes = targets.cols();
    std::vector<double> count(n_classes, 0.0);
    for (std::size_t r = 0; r < targets.rows(); ++r)
        for (std::size_t c = 0; c < n_classes; ++c) count[c] += targets(r, c);
    std::vector<double> w(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c)
        w[c] = static_cast<double>(targets.rows()) / (static_cast<double>(n_classes) * std::max(count[c], 1.0));
    return w;
}

std::vector<double> sample_weights(const Matrix& targets, std::span<const double> cw) {
    std::vector<double> w(targets.rows(), 1.0);
    for (std::size_t r = 0; r < targets.rows(); ++r) {
        double s = 0.0, k = 0.0;
        for (std::size_t c = 0; c < targets.cols(); ++c)
            if (targets(r, c) > 0.0) {
                s += cw[c];
                k += 1.0;
            }
        if (k > 0.0) w[r] = s / k;
    }
    return w;
}

Matrix encode_targets(const std::vector<metrics::LabelSet>& labels, const std::vector<std::string>& classes) {
    Matrix t(labels.size(), classes.size());
    for (std::size_t r = 0; r < labels.size(); ++r)
        for (const auto& l : labels[r]) {
            const auto it = std::find(classes.begin(), classes.end(), l);
            if (it == classes.end()) fail(ErrorCode::ShapeMismatch, "label '" + l + "' is not a head class");
            t(r, static_cast<std::size_t>(it - classes.begin())) = 1.0;
        }
    return t;
}

FineTuneResult train_head(const Matrix& x, const std::vector<metrics::LabelSet>& labels, const FineTuneConfig& cfg,
                          const TrainHooks& hooks) {
    cfg.validate();
    if (cfg.method == TrainingMethod::full)
        fail(ErrorCode::UnsupportedAtDeskScale, "full-model fine-tuning needs the deep backbone; only the head is trainable");
    if (labels.size() != x.rows())
        fail(ErrorCode::ShapeMismatch, std::to_string(x.rows()) + " embeddings but " + std::to_string(labels.size()) +
                                           " label sets");
    if (x.rows() < 10) fail(ErrorCode::ClassTooSmall, "at least 10 samples are needed, got " + std::to_string(x.rows()));
    check_finite_matrix(x);

    FineTuneResult res;
    auto& rep = res.report;
    bool multilabel = false;
    for (const auto& set : labels) {
        if (set.size() != 1) multilabel = true;
        for (const auto& l : std::set<std::string>(set.begin(), set.end())) ++rep.label_distribution[l];
    }
    if (rep.label_distribution.size() < 2) fail(ErrorCode::ClassTooSmall, "labels must cover at least 2 classes");
    for (const auto& [name, count] : rep.label_distribution)
        if (count < 2) fail(ErrorCode::ClassTooSmall, "class '" + name + "' has a single sample");
    std::vector<std::string> classes;
    for (const auto& [name, count] : rep.label_distribution) classes.push_back(name);

    const auto split = stratified_split(strat_keys(labels, rep.label_distribution, multilabel), cfg.val_fraction, cfg.seed);
    const Matrix targets = encode_targets(labels, classes);
    const Matrix xtr = take_rows(x, split.train), xva = take_rows(x, split.val);
    const Matrix ttr = take_rows(targets, split.train), tva = take_rows(targets, split.val);
    const auto cw = class_weights(ttr);
    const auto wtr = sample_weights(ttr, cw);
    const auto wva = sample_weights(tva, cw);

    LinearHead head;
    head.class_names = classes;
    head.multilabel = multilabel;
    head.weights = Matrix(classes.size(), x.cols());
    head.bias.assign(classes.size(), 0.0);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> init(0.0, 0.01);
    for (double& v : head.weights.data()) v = init(rng);

    const double lr = cfg.lr ? *cfg.lr : lr_finder(head, xtr, ttr, wtr, cfg).lr;

    AdamState sw, sb;
    std::size_t t = 0;
    std::vector<std::size_t> order(xtr.rows());
    std::iota(order.begin(), order.end(), 0);
    double best = INFINITY;
    std::size_t since_best = 0;
    LinearHead best_head = head;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        if (hooks.cancel && hooks.cancel->load()) fail(ErrorCode::Cancelled, "training cancelled");
        const double lr_epoch = exponential_lr(lr, cfg.gamma, epoch);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                               order.begin() + static_cast<std::ptrdiff_t>(
                                                                   std::min(order.size(), start + cfg.batch_size)));
            auto g = head_loss(head, take_rows(xtr, idx), take_rows(ttr, idx), take(wtr, idx));
            if (!std::isfinite(g.loss))
                fail(ErrorCode::NonFiniteLoss, "training loss diverged in epoch " + std::to_string(epoch));
            clip(g.grad_w.data(), cfg.grad_clip_value);
            clip(g.grad_b, cfg.grad_clip_value);
            ++t;
            adamw_step(head.weights.data(), g.grad_w.data(), sw, lr_epoch, cfg.adam, t);
            adamw_step(head.bias, g.grad_b, sb, lr_epoch, cfg.adam, t);
        }
        const double train_loss = head_loss(head, xtr, ttr, wtr, false).loss;
        const double val_loss = head_loss(head, xva, tva, wva, false).loss;
        if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
            fail(ErrorCode::NonFiniteLoss, "loss is not finite after epoch " + std::to_string(epoch));
        rep.train_loss_per_epoch.push_back(train_loss);
        rep.val_loss_per_epoch.push_back(val_loss);
        if (val_loss < best) {
            best = val_loss;
            rep.best_epoch = epoch;
            best_head = head;
            since_best = 0;
        } else {
            ++since_best;
        }
        if (hooks.on_epoch) hooks.on_epoch(epoch + 1);
        if (since_best >= cfg.patience) break;
    }

    std::vector<metrics::LabelSet> val_truth;
    for (std::size_t i : split.val) {
        const std::set<std::string> uniq(labels[i].begin(), labels[i].end());
        val_truth.emplace_back(uniq.begin(), uniq.end());
    }
    rep.eval_f1 = metrics::f1_scores(val_truth, predicted_sets(best_head, predict(best_head, xva)), classes);
    rep.n_samples = x.rows();
    rep.base_model = cfg.base_model;
    rep.lr_used = lr;
    res.head = std::move(best_head);
    return res;
}

}  // namespace ecgx::finetune
