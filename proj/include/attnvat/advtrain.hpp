#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnvat/autodiff.hpp"
#include "attnvat/errors.hpp"
#include "attnvat/eval.hpp"
#include "attnvat/model.hpp"
#include "attnvat/rng.hpp"
#include "attnvat/textdata.hpp"

namespace attnvat::advtrain {

using autodiff::Tape;
using autodiff::Tensor;
using model::ModelParams;
using model::ParamLeaves;
using textdata::Corpus;
using textdata::Example;

enum class Technique {
    vanilla,
    word_at,
    word_iat,
    word_vat,
    word_ivat,
    attn_at,
    attn_iat,
    attn_vat,
    attn_ivat,
};

inline const char* to_string(Technique t) {
    switch (t) {
        case Technique::vanilla: return "vanilla";
        case Technique::word_at: return "word_at";
        case Technique::word_iat: return "word_iat";
        case Technique::word_vat: return "word_vat";
        case Technique::word_ivat: return "word_ivat";
        case Technique::attn_at: return "attn_at";
        case Technique::attn_iat: return "attn_iat";
        case Technique::attn_vat: return "attn_vat";
        case Technique::attn_ivat: return "attn_ivat";
    }
    return "vanilla";
}

inline Technique technique_from_string(const std::string& s) {
    for (Technique t : {Technique::vanilla, Technique::word_at, Technique::word_iat, Technique::word_vat,
                        Technique::word_ivat, Technique::attn_at, Technique::attn_iat, Technique::attn_vat,
                        Technique::attn_ivat})
        if (s == to_string(t)) return t;
    throw std::invalid_argument("unknown technique \"" + s + "\"");
}

// Label-free techniques that admit an unlabeled corpus.
inline bool is_semi_supervised(Technique t) {
    return t == Technique::word_vat || t == Technique::word_ivat || t == Technique::attn_vat ||
           t == Technique::attn_ivat;
}

// Supervised adversarial techniques whose perturbation needs the gold label.
inline bool is_adversarial_supervised(Technique t) {
    return t == Technique::word_at || t == Technique::word_iat || t == Technique::attn_at ||
           t == Technique::attn_iat;
}

struct PerturbationSpec {
    double epsilon = 1.0;  // L2 norm bound of the perturbation
    double xi = 0.1;       // scale of the random offset where the gradient is taken
    double lambda = 1.0;   // mixing coefficient of the adversarial loss term
    std::uint64_t seed = 0;

    void validate() const {
        if (!(epsilon >= 0.0)) throw std::invalid_argument("PerturbationSpec: epsilon must be >= 0");
        if (!(xi > 0.0)) throw std::invalid_argument("PerturbationSpec: xi must be > 0");
        if (!(lambda >= 0.0)) throw std::invalid_argument("PerturbationSpec: lambda must be >= 0");
    }
};

// Pairwise score differences D[t][k] = s_t - s_k with row-normalized copy.
// Rows where every difference vanishes stay zero and are flagged.
struct DifferenceMatrix {
    int length = 0;
    std::vector<double> diff;        // [T x T], antisymmetric, zero diagonal
    std::vector<double> normalized;  // [T x T], rows of unit L2 norm (or zero)
    std::vector<char> degenerate_row;
    bool all_degenerate = true;

    std::span<const double> row(int t) const { return {diff.data() + static_cast<std::size_t>(t) * length, static_cast<std::size_t>(length)}; }
    std::span<const double> normalized_row(int t) const {
        return {normalized.data() + static_cast<std::size_t>(t) * length, static_cast<std::size_t>(length)};
    }
};

inline DifferenceMatrix difference_vectors(std::span<const double> scores) {
    if (scores.empty()) throw std::invalid_argument("difference_vectors: empty score vector");
    int T = static_cast<int>(scores.size());
    DifferenceMatrix dm;
    dm.length = T;
    dm.diff.assign(static_cast<std::size_t>(T) * T, 0.0);
    dm.normalized.assign(static_cast<std::size_t>(T) * T, 0.0);
    dm.degenerate_row.assign(static_cast<std::size_t>(T), 0);
    for (int t = 0; t < T; ++t) {
        double norm_sq = 0.0;
        for (int k = 0; k < T; ++k) {
            double d = t == k ? 0.0 : scores[static_cast<std::size_t>(t)] - scores[static_cast<std::size_t>(k)];
            dm.diff[static_cast<std::size_t>(t) * T + k] = d;
            norm_sq += d * d;
        }
        if (norm_sq < 1e-24) {
            dm.degenerate_row[static_cast<std::size_t>(t)] = 1;
        } else {
            double inv = 1.0 / std::sqrt(norm_sq);
            for (int k = 0; k < T; ++k)
                dm.normalized[static_cast<std::size_t>(t) * T + k] = dm.diff[static_cast<std::size_t>(t) * T + k] * inv;
            dm.all_degenerate = false;
        }
    }
    return dm;
}

struct PerturbResult {
    Tensor r;                 // the perturbation, ||r||_2 == epsilon unless epsilon == 0
    bool degenerate = false;  // gradient vanished; a random direction was substituted
    double clean_prob = 0.0;  // model output at the unperturbed input, detached
};

namespace detail {

inline std::vector<double> scaled_to_norm(std::vector<double> v, double target) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-300) return v;
    for (double& x : v) x *= target / n;
    return v;
}

inline std::vector<double> random_direction(Rng& rng, std::size_t n, double norm) {
    auto v = rng.gaussian_vector(n);
    double s = 0.0;
    for (double x : v) s += x * x;
    if (s < 1e-300) v[0] = 1.0;
    return scaled_to_norm(std::move(v), norm);
}

inline double vec_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double kl_bernoulli_value(double p, double q) {
    p = autodiff::clamp_prob(p);
    q = autodiff::clamp_prob(q);
    return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

// The gradient step recovers the worst-case axis but fixes its orientation
// only up to the local linearization; at a finite radius the opposite sign
// can score higher. Keep whichever orientation maximizes the objective.
inline std::vector<double> orient_score_direction(const ModelParams& params, const Example& example,
                                                  double clean_prob, std::vector<double> r) {
    std::vector<double> neg(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) neg[i] = -r[i];
    double kl_pos = kl_bernoulli_value(clean_prob, model::infer(params, example.ids, &r).pred.probability);
    double kl_neg = kl_bernoulli_value(clean_prob, model::infer(params, example.ids, &neg).pred.probability);
    return kl_neg > kl_pos ? neg : r;
}

inline double prob_under_word_offset(const ModelParams& params, const Example& example,
                                     const std::vector<double>& r) {
    Tape tape;
    ParamLeaves leaves = model::register_params(tape, params, /*trainable=*/false);
    Tensor rt({example.length(), params.config.embed_dim}, r);
    model::ForwardOptions opts;
    opts.word_perturbation = &rt;
    return model::forward(tape, leaves, params.config, example.ids, opts).prob.value();
}

inline std::vector<double> orient_word_direction(const ModelParams& params, const Example& example,
                                                 double clean_prob, std::vector<double> r) {
    std::vector<double> neg(r.size());
    for (std::size_t i = 0; i < r.size(); ++i) neg[i] = -r[i];
    double kl_pos = kl_bernoulli_value(clean_prob, prob_under_word_offset(params, example, r));
    double kl_neg = kl_bernoulli_value(clean_prob, prob_under_word_offset(params, example, neg));
    return kl_neg > kl_pos ? neg : r;
}

}  // namespace detail

// Virtual adversarial direction for the attention scores. The clean output
// is computed once and detached; the KL between it and the output under a
// small random score offset is differentiated with respect to that offset,
// and the gradient is rescaled to the requested norm. A vanished gradient
// falls back to the random offset itself, flagged as degenerate.
inline PerturbResult perturb_attention_vat(const Example& example, const ModelParams& params,
                                           const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    int T = example.length();
    double clean = model::infer(params, example.ids).pred.probability;

    std::vector<double> offset = detail::random_direction(rng, static_cast<std::size_t>(T), spec.xi);

    Tape tape;
    ParamLeaves leaves = model::register_params(tape, params, /*trainable=*/false);
    Tensor offset_leaf = Tensor::vector(offset, /*requires_grad=*/true);
    model::ForwardOptions opts;
    opts.score_perturbation = &offset_leaf;
    model::ForwardResult res = model::forward(tape, leaves, params.config, example.ids, opts);
    Tensor kl = tape.kl_bernoulli(tape.constant_scalar(clean), res.prob);
    autodiff::GradientMap grads = tape.backward(kl);
    Tensor g = grads.at_or_zero(res.score_perturbation.node_id(), {T});

    PerturbResult out;
    out.clean_prob = clean;
    if (g.l2_norm() < 1e-12) {
        out.degenerate = true;
        out.r = Tensor::vector(detail::scaled_to_norm(offset, spec.epsilon));
    } else {
        out.r = Tensor::vector(
            detail::orient_score_direction(params, example, clean, detail::scaled_to_norm(g.values(), spec.epsilon)));
    }
    return out;
}

// Supervised counterpart: the gradient of the per-example classification
// loss with respect to the attention scores, rescaled to the norm bound.
inline PerturbResult perturb_attention_at(const Example& example, int label, const ModelParams& params,
                                          const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    if (label != 0 && label != 1) throw std::domain_error("perturb_attention_at: label must be 0 or 1");
    int T = example.length();

    Tape tape;
    ParamLeaves leaves = model::register_params(tape, params, /*trainable=*/false);
    Tensor zero_leaf = Tensor::vector(std::vector<double>(static_cast<std::size_t>(T), 0.0), true);
    model::ForwardOptions opts;
    opts.score_perturbation = &zero_leaf;
    model::ForwardResult res = model::forward(tape, leaves, params.config, example.ids, opts);
    Tensor loss = tape.nll_bernoulli(res.prob, label);
    autodiff::GradientMap grads = tape.backward(loss);
    Tensor g = grads.at_or_zero(res.score_perturbation.node_id(), {T});

    PerturbResult out;
    out.clean_prob = res.prob.value();
    if (g.l2_norm() < 1e-12) {
        out.degenerate = true;
        out.r = Tensor::vector(detail::random_direction(rng, static_cast<std::size_t>(T), spec.epsilon));
    } else {
        out.r = Tensor::vector(detail::scaled_to_norm(g.values(), spec.epsilon));
    }
    return out;
}

inline PerturbResult perturb_attention_at(const Example& example, const ModelParams& params,
                                          const PerturbationSpec& spec, Rng& rng) {
    if (!example.label) throw std::invalid_argument("perturb_attention_at: example carries no label");
    return perturb_attention_at(example, *example.label, params, spec, rng);
}

namespace detail {

// Shared body of the difference-parameterized attention perturbations. The
// perturbation for token t is alpha_t . normalized_difference_row_t; the
// objective gradient is taken in alpha space and mapped back through that
// parameterization, then rescaled to the norm bound.
template <class LossFn>
inline std::optional<PerturbResult> interpretable_attention_direction(const Example& example,
                                                                      const ModelParams& params,
                                                                      const PerturbationSpec& spec,
                                                                      const std::vector<double>& alpha0,
                                                                      double clean_prob, bool orient_by_kl,
                                                                      const DifferenceMatrix& dm,
                                                                      LossFn&& make_loss) {
    int T = example.length();

    Tape tape;
    ParamLeaves leaves = model::register_params(tape, params, /*trainable=*/false);
    Tensor alpha = tape.leaf(Tensor({T, T}, alpha0, /*requires_grad=*/true));
    std::vector<Tensor> per_token(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        auto dir = dm.normalized_row(t);
        per_token[static_cast<std::size_t>(t)] =
            tape.dot(tape.row(alpha, t), tape.constant(Tensor::vector(std::vector<double>(dir.begin(), dir.end()))));
    }
    Tensor r_alpha = tape.stack(per_token);

    model::ForwardOptions opts;
    opts.score_perturbation = &r_alpha;
    model::ForwardResult res = model::forward(tape, leaves, params.config, example.ids, opts);
    Tensor loss = make_loss(tape, res);
    autodiff::GradientMap grads = tape.backward(loss);
    Tensor g = grads.at_or_zero(alpha.node_id(), {T, T});

    std::vector<double> alpha_hat;
    bool degenerate = false;
    if (g.l2_norm() < 1e-12) {
        degenerate = true;
        alpha_hat = scaled_to_norm(alpha0, spec.epsilon);
    } else {
        alpha_hat = scaled_to_norm(g.values(), spec.epsilon);
    }

    // Map back to score space: r_t = alpha_hat_t . normalized_row_t.
    std::vector<double> r(static_cast<std::size_t>(T), 0.0);
    for (int t = 0; t < T; ++t) {
        auto dir = dm.normalized_row(t);
        double s = 0.0;
        for (int k = 0; k < T; ++k) s += alpha_hat[static_cast<std::size_t>(t) * T + k] * dir[static_cast<std::size_t>(k)];
        r[static_cast<std::size_t>(t)] = s;
    }
    if (vec_norm(r) < 1e-12 && spec.epsilon > 0.0) return std::nullopt;
    r = scaled_to_norm(std::move(r), spec.epsilon);
    if (orient_by_kl) r = orient_score_direction(params, example, clean_prob, std::move(r));

    PerturbResult out;
    out.clean_prob = clean_prob;
    out.degenerate = degenerate;
    out.r = Tensor::vector(std::move(r));
    return out;
}

}  // namespace detail

// Difference-parameterized virtual adversarial direction. Degenerate
// difference geometry (a single token, or all scores equal) falls back to
// the plain attention direction.
inline PerturbResult perturb_attention_ivat(const Example& example, const ModelParams& params,
                                            const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    int T = example.length();
    auto inf = model::infer(params, example.ids);
    DifferenceMatrix dm = difference_vectors(inf.attention_scores);
    if (dm.all_degenerate) return perturb_attention_vat(example, params, spec, rng);
    double clean = inf.pred.probability;
    std::vector<double> alpha0 =
        detail::random_direction(rng, static_cast<std::size_t>(T) * static_cast<std::size_t>(T), spec.xi);
    auto result = detail::interpretable_attention_direction(
        example, params, spec, alpha0, clean, /*orient_by_kl=*/true, dm,
        [&](Tape& tape, const model::ForwardResult& res) {
            return tape.kl_bernoulli(tape.constant_scalar(clean), res.prob);
        });
    if (!result) return perturb_attention_vat(example, params, spec, rng);
    return *result;
}

inline PerturbResult perturb_attention_iat(const Example& example, int label, const ModelParams& params,
                                           const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    if (label != 0 && label != 1) throw std::domain_error("perturb_attention_iat: label must be 0 or 1");
    int T = example.length();
    // The supervised loss has a nonvanishing gradient at the clean point, so
    // alpha starts at zero.
    std::vector<double> alpha0(static_cast<std::size_t>(T) * static_cast<std::size_t>(T), 0.0);
    auto inf = model::infer(params, example.ids);
    DifferenceMatrix dm = difference_vectors(inf.attention_scores);
    if (dm.all_degenerate) return perturb_attention_at(example, label, params, spec, rng);
    double clean = inf.pred.probability;
    auto result = detail::interpretable_attention_direction(
        example, params, spec, alpha0, clean, /*orient_by_kl=*/false, dm,
        [&](Tape& tape, const model::ForwardResult& res) { return tape.nll_bernoulli(res.prob, label); });
    if (!result) return perturb_attention_at(example, label, params, spec, rng);
    return *result;
}

inline PerturbResult perturb_attention_iat(const Example& example, const ModelParams& params,
                                           const PerturbationSpec& spec, Rng& rng) {
    if (!example.label) throw std::invalid_argument("perturb_attention_iat: example carries no label");
    return perturb_attention_iat(example, *example.label, params, spec, rng);
}

// Word-space virtual adversarial direction: the same detach, offset,
// gradient, rescale procedure applied to the embedded sequence, with the
// norm taken over the whole [T x d] array.
inline PerturbResult perturb_word_vat(const Example& example, const ModelParams& params,
                                      const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    int T = example.length(), d = params.config.embed_dim;
    double clean = model::infer(params, example.ids).pred.probability;

    std::vector<double> offset =
        detail::random_direction(rng, static_cast<std::size_t>(T) * static_cast<std::size_t>(d), spec.xi);

    Tape tape;
    ParamLeaves leaves = model::register_params(tape, params, /*trainable=*/false);
    Tensor offset_leaf = Tensor({T, d}, offset, /*requires_grad=*/true);
    model::ForwardOptions opts;
    opts.word_perturbation = &offset_leaf;
    model::ForwardResult res = model::forward(tape, leaves, params.config, example.ids, opts);
    Tensor kl = tape.kl_bernoulli(tape.constant_scalar(clean), res.prob);
    autodiff::GradientMap grads = tape.backward(kl);
    Tensor g = grads.at_or_zero(res.word_perturbation.node_id(), {T, d});

    PerturbResult out;
    out.clean_prob = clean;
    if (g.l2_norm() < 1e-12) {
        out.degenerate = true;
        out.r = Tensor({T, d}, detail::scaled_to_norm(offset, spec.epsilon));
    } else {
        out.r = Tensor({T, d}, detail::orient_word_direction(params, example, clean,
                                                             detail::scaled_to_norm(g.values(), spec.epsilon)));
    }
    return out;
}

inline PerturbResult perturb_word_at(const Example& example, int label, const ModelParams& params,
                                     const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    if (label != 0 && label != 1) throw std::domain_error("perturb_word_at: label must be 0 or 1");
    int T = example.length(), d = params.config.embed_dim;

    Tape tape;
    ParamLeaves leaves = model::register_params(tape, params, /*trainable=*/false);
    Tensor zero_leaf = Tensor::zeros({T, d}, true);
    model::ForwardOptions opts;
    opts.word_perturbation = &zero_leaf;
    model::ForwardResult res = model::forward(tape, leaves, params.config, example.ids, opts);
    Tensor loss = tape.nll_bernoulli(res.prob, label);
    autodiff::GradientMap grads = tape.backward(loss);
    Tensor g = grads.at_or_zero(res.word_perturbation.node_id(), {T, d});

    PerturbResult out;
    out.clean_prob = res.prob.value();
    if (g.l2_norm() < 1e-12) {
        out.degenerate = true;
        out.r = Tensor({T, d}, detail::random_direction(rng, static_cast<std::size_t>(T) * d, spec.epsilon));
    } else {
        out.r = Tensor({T, d}, detail::scaled_to_norm(g.values(), spec.epsilon));
    }
    return out;
}

inline PerturbResult perturb_word_at(const Example& example, const ModelParams& params,
                                     const PerturbationSpec& spec, Rng& rng) {
    if (!example.label) throw std::invalid_argument("perturb_word_at: example carries no label");
    return perturb_word_at(example, *example.label, params, spec, rng);
}

namespace detail {

// Unit directions between the embedded words of a sentence:
// dirs[t][k] = (w_t - w_k) / ||w_t - w_k||, zero for identical tokens.
inline std::vector<std::vector<std::vector<double>>> word_difference_directions(const Example& example,
                                                                                const ModelParams& params,
                                                                                bool& any_nonzero) {
    int T = example.length(), d = params.config.embed_dim;
    const auto& emb = params.embedding.values();
    any_nonzero = false;
    std::vector<std::vector<std::vector<double>>> dirs(
        static_cast<std::size_t>(T),
        std::vector<std::vector<double>>(static_cast<std::size_t>(T), std::vector<double>(static_cast<std::size_t>(d), 0.0)));
    for (int t = 0; t < T; ++t) {
        const double* wt = emb.data() + static_cast<std::size_t>(example.ids[static_cast<std::size_t>(t)]) * d;
        for (int k = 0; k < T; ++k) {
            if (k == t) continue;
            const double* wk = emb.data() + static_cast<std::size_t>(example.ids[static_cast<std::size_t>(k)]) * d;
            double norm_sq = 0.0;
            auto& slot = dirs[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
            for (int j = 0; j < d; ++j) {
                slot[static_cast<std::size_t>(j)] = wt[j] - wk[j];
                norm_sq += slot[static_cast<std::size_t>(j)] * slot[static_cast<std::size_t>(j)];
            }
            if (norm_sq < 1e-24) {
                std::fill(slot.begin(), slot.end(), 0.0);
            } else {
                double inv = 1.0 / std::sqrt(norm_sq);
                for (auto& v : slot) v *= inv;
                any_nonzero = true;
            }
        }
    }
    return dirs;
}

template <class LossFn>
inline std::optional<PerturbResult> interpretable_word_direction(const Example& example, const ModelParams& params,
                                                                 const PerturbationSpec& spec,
                                                                 const std::vector<double>& alpha0,
                                                                 double clean_prob, bool orient_by_kl,
                                                                 const std::vector<std::vector<std::vector<double>>>& dirs,
                                                                 LossFn&& make_loss) {
    int T = example.length(), d = params.config.embed_dim;

    Tape tape;
    ParamLeaves leaves = model::register_params(tape, params, /*trainable=*/false);
    Tensor alpha = tape.leaf(Tensor({T, T}, alpha0, /*requires_grad=*/true));
    std::vector<Tensor> rows(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t)
        rows[static_cast<std::size_t>(t)] = tape.lincomb_const(tape.row(alpha, t), dirs[static_cast<std::size_t>(t)]);
    Tensor r_alpha = tape.stack_rows(rows);

    model::ForwardOptions opts;
    opts.word_perturbation = &r_alpha;
    model::ForwardResult res = model::forward(tape, leaves, params.config, example.ids, opts);
    Tensor loss = make_loss(tape, res);
    autodiff::GradientMap grads = tape.backward(loss);
    Tensor g = grads.at_or_zero(alpha.node_id(), {T, T});

    std::vector<double> alpha_hat;
    bool degenerate = false;
    if (g.l2_norm() < 1e-12) {
        degenerate = true;
        alpha_hat = scaled_to_norm(alpha0, spec.epsilon);
    } else {
        alpha_hat = scaled_to_norm(g.values(), spec.epsilon);
    }

    std::vector<double> r(static_cast<std::size_t>(T) * d, 0.0);
    for (int t = 0; t < T; ++t)
        for (int k = 0; k < T; ++k) {
            double a = alpha_hat[static_cast<std::size_t>(t) * T + k];
            if (a == 0.0) continue;
            const auto& dir = dirs[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
            for (int j = 0; j < d; ++j) r[static_cast<std::size_t>(t) * d + j] += a * dir[static_cast<std::size_t>(j)];
        }
    if (vec_norm(r) < 1e-12 && spec.epsilon > 0.0) return std::nullopt;
    r = scaled_to_norm(std::move(r), spec.epsilon);
    if (orient_by_kl) r = orient_word_direction(params, example, clean_prob, std::move(r));

    PerturbResult out;
    out.clean_prob = clean_prob;
    out.degenerate = degenerate;
    out.r = Tensor({T, d}, std::move(r));
    return out;
}

}  // namespace detail

inline PerturbResult perturb_word_ivat(const Example& example, const ModelParams& params,
                                       const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    int T = example.length();
    bool any_nonzero = false;
    auto dirs = detail::word_difference_directions(example, params, any_nonzero);
    if (!any_nonzero) return perturb_word_vat(example, params, spec, rng);
    double clean = model::infer(params, example.ids).pred.probability;
    std::vector<double> alpha0 =
        detail::random_direction(rng, static_cast<std::size_t>(T) * static_cast<std::size_t>(T), spec.xi);
    auto result = detail::interpretable_word_direction(example, params, spec, alpha0, clean, /*orient_by_kl=*/true,
                                                       dirs,
                                                       [&](Tape& tape, const model::ForwardResult& res) {
                                                           return tape.kl_bernoulli(tape.constant_scalar(clean), res.prob);
                                                       });
    if (!result) return perturb_word_vat(example, params, spec, rng);
    return *result;
}

inline PerturbResult perturb_word_iat(const Example& example, int label, const ModelParams& params,
                                      const PerturbationSpec& spec, Rng& rng) {
    spec.validate();
    if (label != 0 && label != 1) throw std::domain_error("perturb_word_iat: label must be 0 or 1");
    int T = example.length();
    std::vector<double> alpha0(static_cast<std::size_t>(T) * static_cast<std::size_t>(T), 0.0);
    bool any_nonzero = false;
    auto dirs = detail::word_difference_directions(example, params, any_nonzero);
    if (!any_nonzero) return perturb_word_at(example, label, params, spec, rng);
    double clean = model::infer(params, example.ids).pred.probability;
    auto result = detail::interpretable_word_direction(
        example, params, spec, alpha0, clean, /*orient_by_kl=*/false, dirs,
        [&](Tape& tape, const model::ForwardResult& res) { return tape.nll_bernoulli(res.prob, label); });
    if (!result) return perturb_word_at(example, label, params, spec, rng);
    return *result;
}

inline PerturbResult perturb_word_iat(const Example& example, const ModelParams& params,
                                      const PerturbationSpec& spec, Rng& rng) {
    if (!example.label) throw std::invalid_argument("perturb_word_iat: example carries no label");
    return perturb_word_iat(example, *example.label, params, spec, rng);
}

// Label-free perturbation for the given technique.
inline PerturbResult perturb_virtual(Technique technique, const Example& example, const ModelParams& params,
                                     const PerturbationSpec& spec, Rng& rng) {
    switch (technique) {
        case Technique::attn_vat: return perturb_attention_vat(example, params, spec, rng);
        case Technique::attn_ivat: return perturb_attention_ivat(example, params, spec, rng);
        case Technique::word_vat: return perturb_word_vat(example, params, spec, rng);
        case Technique::word_ivat: return perturb_word_ivat(example, params, spec, rng);
        default: throw std::invalid_argument(std::string("perturb_virtual: not a VAT technique: ") + to_string(technique));
    }
}

inline PerturbResult perturb_supervised(Technique technique, const Example& example, const ModelParams& params,
                                        const PerturbationSpec& spec, Rng& rng) {
    switch (technique) {
        case Technique::attn_at: return perturb_attention_at(example, params, spec, rng);
        case Technique::attn_iat: return perturb_attention_iat(example, params, spec, rng);
        case Technique::word_at: return perturb_word_at(example, params, spec, rng);
        case Technique::word_iat: return perturb_word_iat(example, params, spec, rng);
        default: throw std::invalid_argument(std::string("perturb_supervised: not an AT technique: ") + to_string(technique));
    }
}

inline bool perturbs_words(Technique t) {
    return t == Technique::word_at || t == Technique::word_iat || t == Technique::word_vat ||
           t == Technique::word_ivat;
}

namespace detail {

inline Tensor perturbed_forward_prob(Tape& tape, const ParamLeaves& leaves, const model::ModelConfig& config,
                                     const Example& example, Technique technique, const Tensor& r) {
    model::ForwardOptions opts;
    Tensor constant_r = r;
    constant_r.set_requires_grad(false);
    if (perturbs_words(technique)) opts.word_perturbation = &constant_r;
    else opts.score_perturbation = &constant_r;
    return model::forward(tape, leaves, config, example.ids, opts).prob;
}

}  // namespace detail

// Mean consistency loss over a batch: for each example, the KL divergence
// between the detached clean output and the output under the technique's
// virtual adversarial perturbation. Parameter gradients flow through the
// perturbed branch only.
inline Tensor vat_loss(Tape& tape, const ParamLeaves& leaves, const ModelParams& params,
                       std::span<const Example* const> batch, const PerturbationSpec& spec, Technique technique,
                       Rng& rng) {
    if (batch.empty()) return tape.constant_scalar(0.0);
    std::vector<Tensor> terms;
    terms.reserve(batch.size());
    for (const Example* ex : batch) {
        PerturbResult pr = perturb_virtual(technique, *ex, params, spec, rng);
        Tensor prob = detail::perturbed_forward_prob(tape, leaves, params.config, *ex, technique, pr.r);
        terms.push_back(tape.kl_bernoulli(tape.constant_scalar(pr.clean_prob), prob));
    }
    return tape.mean_of(terms);
}

struct OptimizerConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct TrainerConfig {
    Technique technique = Technique::vanilla;
    model::ModelConfig model;
    OptimizerConfig optimizer;
    double l2 = 1e-5;
    int epochs = 20;
    int batch_size = 16;
    int patience = 10;  // epochs without validation improvement; <= 0 disables
    PerturbationSpec perturbation;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw std::invalid_argument("TrainerConfig: epochs must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainerConfig: batch_size must be >= 1");
        if (l2 < 0) throw std::invalid_argument("TrainerConfig: l2 must be >= 0");
        perturbation.validate();
    }

    nlohmann::json to_json() const {
        return {{"technique", to_string(technique)},
                {"model", model.to_json()},
                {"optimizer",
                 {{"learning_rate", optimizer.learning_rate},
                  {"beta1", optimizer.beta1},
                  {"beta2", optimizer.beta2},
                  {"epsilon", optimizer.epsilon}}},
                {"l2", l2},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"patience", patience},
                {"perturbation",
                 {{"epsilon", perturbation.epsilon},
                  {"xi", perturbation.xi},
                  {"lambda", perturbation.lambda},
                  {"seed", perturbation.seed}}},
                {"seed", seed}};
    }
};

struct TotalLoss {
    Tensor total;
    Tensor nll;  // mean classification loss over the labeled batch
    Tensor adv;  // adversarial or virtual adversarial term, before lambda
    Tensor l2;
};

// Combined objective: mean label loss, plus lambda times the technique's
// adversarial term (label loss at the perturbed input for the supervised
// techniques, consistency KL over labeled and unlabeled data for the
// virtual ones), plus the L2 penalty.
inline TotalLoss total_loss(Tape& tape, const ParamLeaves& leaves, const ModelParams& params,
                            std::span<const Example* const> labeled, std::span<const Example* const> unlabeled,
                            const TrainerConfig& config, Rng& rng) {
    if (labeled.empty()) throw std::invalid_argument("total_loss: labeled batch is empty");
    if (!unlabeled.empty() && !is_semi_supervised(config.technique))
        throw std::invalid_argument(std::string("total_loss: technique ") + to_string(config.technique) +
                                    " does not accept unlabeled data");

    std::vector<Tensor> nll_terms;
    nll_terms.reserve(labeled.size());
    for (const Example* ex : labeled) {
        if (!ex->label) throw std::invalid_argument("total_loss: labeled batch contains an unlabeled example");
        model::ForwardResult res = model::forward(tape, leaves, params.config, ex->ids);
        nll_terms.push_back(tape.nll_bernoulli(res.prob, *ex->label));
    }

    TotalLoss out;
    out.nll = tape.mean_of(nll_terms);

    if (config.technique == Technique::vanilla) {
        out.adv = tape.constant_scalar(0.0);
    } else if (is_adversarial_supervised(config.technique)) {
        std::vector<Tensor> adv_terms;
        adv_terms.reserve(labeled.size());
        for (const Example* ex : labeled) {
            PerturbResult pr = perturb_supervised(config.technique, *ex, params, config.perturbation, rng);
            Tensor prob = detail::perturbed_forward_prob(tape, leaves, params.config, *ex, config.technique, pr.r);
            adv_terms.push_back(tape.nll_bernoulli(prob, *ex->label));
        }
        out.adv = tape.mean_of(adv_terms);
    } else {
        std::vector<const Example*> pool(labeled.begin(), labeled.end());
        pool.insert(pool.end(), unlabeled.begin(), unlabeled.end());
        out.adv = vat_loss(tape, leaves, params, pool, config.perturbation, config.technique, rng);
    }

    out.l2 = model::l2_penalty(tape, leaves, config.l2, params.config.trainable_embeddings);
    out.total = tape.add(tape.add(out.nll, tape.scale(out.adv, config.perturbation.lambda)), out.l2);
    return out;
}

struct AdamState {
    int step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

// Bias-corrected adaptive-moment update of one flat array in place.
// Entries below skip_prefix keep their value but still decay their moments.
inline void adam_update_array(std::vector<double>& values, const std::vector<double>& grads, std::vector<double>& m,
                              std::vector<double>& v, int step, const OptimizerConfig& opt,
                              std::size_t skip_prefix = 0) {
    double correction1 = 1.0 - std::pow(opt.beta1, step);
    double correction2 = 1.0 - std::pow(opt.beta2, step);
    for (std::size_t i = 0; i < values.size(); ++i) {
        double gi = grads[i];
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
        if (i < skip_prefix) continue;
        double m_hat = m[i] / correction1;
        double v_hat = v[i] / correction2;
        values[i] -= opt.learning_rate * m_hat / (std::sqrt(v_hat) + opt.epsilon);
    }
}

// One optimizer step over all trainable parameters. The PAD embedding row is
// pinned.
inline void adam_step(ModelParams& params, const std::map<std::string, std::vector<double>>& grads, AdamState& state,
                      const OptimizerConfig& opt) {
    ++state.step;
    for (auto& [name, tensor] : params.named()) {
        if (name == "embedding" && !params.config.trainable_embeddings) continue;
        auto git = grads.find(name);
        std::size_t n = tensor->values().size();
        std::vector<double> zero;
        const std::vector<double>* g = &zero;
        if (git != grads.end()) g = &git->second;
        else zero.assign(n, 0.0);
        if (g->size() != n) throw std::invalid_argument("adam_step: gradient size mismatch for " + name);

        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(n, 0.0);
        if (v.empty()) v.assign(n, 0.0);

        std::vector<double> next(tensor->values());
        std::size_t skip = name == "embedding" ? static_cast<std::size_t>(params.config.embed_dim) : 0;
        adam_update_array(next, *g, m, v, state.step, opt, skip);
        *tensor = Tensor(tensor->shape(), std::move(next));
    }
}

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double vat_loss = 0.0;
    double valid_f1 = 0.0;
};

struct TrainingReport {
    std::vector<EpochStats> epochs;
    int selected_epoch = 0;
    double best_valid_f1 = 0.0;
    double wall_clock_sec = 0.0;
    std::uint64_t seed = 0;
    double epsilon = 0.0;
    std::string technique;

    nlohmann::json to_json(bool include_timing = true) const {
        nlohmann::json eps = nlohmann::json::array();
        for (const auto& e : epochs)
            eps.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"vat_loss", e.vat_loss}, {"valid_f1", e.valid_f1}});
        nlohmann::json j{{"epochs", eps},
                         {"selected_epoch", selected_epoch},
                         {"best_valid_f1", best_valid_f1},
                         {"seed", seed},
                         {"epsilon", epsilon},
                         {"technique", technique}};
        if (include_timing) j["timing"] = {{"wall_clock_sec", wall_clock_sec}};
        return j;
    }
};

inline void write_metrics_csv(const std::filesystem::path& path, const TrainingReport& report) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write metrics csv: " + path.string());
    out << "epoch,train_loss,vat_loss,valid_f1\n";
    char line[160];
    for (const auto& e : report.epochs) {
        std::snprintf(line, sizeof line, "%d,%.10g,%.10g,%.10g\n", e.epoch, e.train_loss, e.vat_loss, e.valid_f1);
        out << line;
    }
}

inline double validation_f1(const ModelParams& params, const Corpus& valid) {
    std::vector<int> preds, golds;
    preds.reserve(valid.size());
    golds.reserve(valid.size());
    for (const auto& ex : valid.examples) {
        preds.push_back(model::infer(params, ex.ids).pred.probability > 0.5 ? 1 : 0);
        golds.push_back(ex.label.value_or(0));
    }
    return eval::f1_score(preds, golds);
}

struct TrainResult {
    ModelParams params;  // parameters of the best validation epoch
    TrainingReport report;
};

// One full run: at every step the perturbations are re-estimated from the
// current parameters and held constant through the update. Deterministic
// given the config seed.
inline TrainResult train(const TrainerConfig& config, const Corpus& train_corpus, const Corpus& valid_corpus,
                         const Corpus* unlabeled_corpus = nullptr,
                         const textdata::EmbeddingTable* pretrained = nullptr) {
    config.validate();
    if (train_corpus.empty() || valid_corpus.empty())
        throw std::invalid_argument("train: labeled corpora must be non-empty");
    if (unlabeled_corpus && !unlabeled_corpus->empty() && !is_semi_supervised(config.technique))
        throw std::invalid_argument(std::string("train: technique ") + to_string(config.technique) +
                                    " does not accept an unlabeled corpus");

    auto t_start = std::chrono::steady_clock::now();

    Rng init_rng(Rng::mix(config.seed, 0x01));
    Rng pert_rng(config.perturbation.seed != 0 ? config.perturbation.seed : Rng::mix(config.seed, 0x02));
    std::uint64_t batch_seed = Rng::mix(config.seed, 0x03);
    std::uint64_t unlabeled_seed = Rng::mix(config.seed, 0x04);

    ModelParams params =
        pretrained ? model::init_params(config.model, init_rng, *pretrained) : model::init_params(config.model, init_rng);

    AdamState adam;
    TrainingReport report;
    report.seed = config.seed;
    report.epsilon = config.perturbation.epsilon;
    report.technique = to_string(config.technique);

    ModelParams best = params;
    double best_f1 = -1.0;
    int best_epoch = 0;
    int stall = 0;

    bool use_unlabeled = unlabeled_corpus && !unlabeled_corpus->empty() && is_semi_supervised(config.technique);

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        auto labeled_batches =
            textdata::batches(train_corpus.size(), static_cast<std::size_t>(config.batch_size), true, batch_seed,
                              static_cast<std::uint64_t>(epoch));
        std::vector<std::vector<std::size_t>> unlabeled_batches;
        if (use_unlabeled)
            unlabeled_batches = textdata::batches(unlabeled_corpus->size(), static_cast<std::size_t>(config.batch_size),
                                                  true, unlabeled_seed, static_cast<std::uint64_t>(epoch));

        double loss_sum = 0.0, adv_sum = 0.0;
        for (std::size_t step = 0; step < labeled_batches.size(); ++step) {
            std::vector<const Example*> labeled;
            for (std::size_t idx : labeled_batches[step]) labeled.push_back(&train_corpus.examples[idx]);
            std::vector<const Example*> unlabeled;
            if (use_unlabeled) {
                const auto& ub = unlabeled_batches[step % unlabeled_batches.size()];
                for (std::size_t idx : ub) unlabeled.push_back(&unlabeled_corpus->examples[idx]);
            }

            Tape tape;
            ParamLeaves leaves = model::register_params(tape, params);
            TotalLoss losses = total_loss(tape, leaves, params, labeled, unlabeled, config, pert_rng);
            double loss_value = losses.total.value();
            if (!std::isfinite(loss_value))
                throw TrainingDiverged("training loss is not finite at epoch " + std::to_string(epoch) + " step " +
                                       std::to_string(step + 1),
                                       epoch, static_cast<int>(step + 1));
            loss_sum += loss_value;
            adv_sum += losses.adv.value();

            autodiff::GradientMap grads = tape.backward(losses.total);
            std::map<std::string, std::vector<double>> named_grads;
            for (auto& [name, leaf] : leaves.named()) {
                if (!leaf->requires_grad()) continue;
                named_grads[name] = grads.at_or_zero(leaf->node_id(), leaf->shape()).values();
            }
            adam_step(params, named_grads, adam, config.optimizer);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = loss_sum / static_cast<double>(labeled_batches.size());
        stats.vat_loss = adv_sum / static_cast<double>(labeled_batches.size());
        stats.valid_f1 = validation_f1(params, valid_corpus);
        report.epochs.push_back(stats);

        if (stats.valid_f1 > best_f1) {
            best_f1 = stats.valid_f1;
            best = params;
            best_epoch = epoch;
            stall = 0;
        } else {
            ++stall;
            if (config.patience > 0 && stall >= config.patience) break;
        }
    }

    report.selected_epoch = best_epoch;
    report.best_valid_f1 = best_f1;
    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return {std::move(best), std::move(report)};
}

struct EpsilonSearchRow {
    double epsilon = 0.0;
    std::optional<double> valid_f1;
    std::string status = "ok";
};

struct EpsilonSearchResult {
    double best_epsilon = 0.0;
    std::vector<EpsilonSearchRow> rows;
};

// One training run per grid point; the point with the highest validation F1
// wins, ties resolved toward the smaller epsilon. Failed points are recorded
// and skipped.
inline EpsilonSearchResult epsilon_search(std::span<const double> grid, TrainerConfig config,
                                          const Corpus& train_corpus, const Corpus& valid_corpus,
                                          const Corpus* unlabeled_corpus = nullptr,
                                          const textdata::EmbeddingTable* pretrained = nullptr) {
    if (grid.empty()) throw std::invalid_argument("epsilon_search: empty grid");
    EpsilonSearchResult result;
    bool have_best = false;
    double best_f1 = -1.0;
    for (double eps : grid) {
        if (!(eps > 0.0)) throw std::invalid_argument("epsilon_search: grid values must be positive");
        EpsilonSearchRow row;
        row.epsilon = eps;
        config.perturbation.epsilon = eps;
        try {
            TrainResult r = train(config, train_corpus, valid_corpus, unlabeled_corpus, pretrained);
            row.valid_f1 = r.report.best_valid_f1;
            if (*row.valid_f1 > best_f1 || (*row.valid_f1 == best_f1 && have_best && eps < result.best_epsilon)) {
                best_f1 = *row.valid_f1;
                result.best_epsilon = eps;
                have_best = true;
            }
        } catch (const std::exception& e) {
            row.status = std::string("failed: ") + e.what();
        }
        result.rows.push_back(std::move(row));
    }
    if (!have_best) throw TrainingDiverged("epsilon_search: every grid point failed", 0, 0);
    return result;
}

}  // namespace attnvat::advtrain
