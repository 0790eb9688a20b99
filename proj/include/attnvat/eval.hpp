#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "attnvat/model.hpp"
#include "attnvat/textdata.hpp"

namespace attnvat::eval {

using textdata::Span;

enum class ImportanceSource { attention, gradient };

struct ImportanceVector {
    std::vector<double> scores;  // per token, non-negative
    ImportanceSource source = ImportanceSource::attention;
};

using RationaleSpans = std::vector<Span>;

struct BinaryF1 {
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    bool degenerate = false;  // no positives on either side
};

inline BinaryF1 f1_detail(std::span<const int> preds, std::span<const int> golds) {
    if (preds.size() != golds.size())
        throw std::invalid_argument("f1_score: " + std::to_string(preds.size()) + " predictions vs " +
                                    std::to_string(golds.size()) + " golds");
    if (preds.empty()) throw std::invalid_argument("f1_score: empty input");
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == 1 && golds[i] == 1) ++tp;
        else if (preds[i] == 1) ++fp;
        else if (golds[i] == 1) ++fn;
    }
    BinaryF1 r;
    r.degenerate = (tp + fp == 0) && (tp + fn == 0);
    r.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    r.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

inline double f1_score(std::span<const int> preds, std::span<const int> golds) {
    return f1_detail(preds, golds).f1;
}

// Product-moment correlation; nullopt when undefined (fewer than two points
// or a constant vector).
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size())
        throw std::invalid_argument("pearson: length mismatch " + std::to_string(x.size()) + " vs " +
                                    std::to_string(y.size()));
    std::size_t n = x.size();
    if (n < 2) return std::nullopt;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

// Saliency of token t: L2 norm over the embedding dimension of the gradient
// of the decision logit with respect to the embedded word.
inline ImportanceVector gradient_importance(const model::ModelParams& params, std::span<const int> ids) {
    model::Tape tape;
    model::ParamLeaves leaves = model::register_params(tape, params);
    model::ForwardOptions opts;
    opts.embeddings_as_leaves = true;
    model::ForwardResult res = model::forward(tape, leaves, params.config, ids, opts);
    autodiff::GradientMap grads = tape.backward(res.logit);

    ImportanceVector imp;
    imp.source = ImportanceSource::gradient;
    imp.scores.reserve(ids.size());
    for (const auto& w : res.embedded)
        imp.scores.push_back(grads.at_or_zero(w.node_id(), w.shape()).l2_norm());
    return imp;
}

struct CorrelationReport {
    double mean = 0.0;
    std::size_t n_used = 0;
    std::size_t n_excluded = 0;
    std::vector<std::optional<double>> per_example;
};

// Mean Pearson correlation between attention weights and gradient saliency.
// Examples where the correlation is undefined (length one, constant vectors)
// are excluded and counted.
inline CorrelationReport attention_gradient_correlation(const textdata::Corpus& corpus,
                                                        const model::ModelParams& params) {
    if (corpus.empty()) throw std::invalid_argument("attention_gradient_correlation: empty corpus");
    CorrelationReport report;
    double total = 0.0;
    for (const auto& ex : corpus.examples) {
        std::optional<double> r;
        if (ex.length() >= 2) {
            auto inf = model::infer(params, ex.ids);
            auto imp = gradient_importance(params, ex.ids);
            r = pearson(inf.attention_weights, imp.scores);
        }
        report.per_example.push_back(r);
        if (r) {
            total += *r;
            ++report.n_used;
        } else {
            ++report.n_excluded;
        }
    }
    report.mean = report.n_used > 0 ? total / static_cast<double>(report.n_used) : 0.0;
    return report;
}

// Tokens scoring at least the k-th largest importance are selected, where
// k = max(1, floor((1 - quantile) * T)); maximal runs become spans.
inline RationaleSpans extract_hard_rationale(const ImportanceVector& importance, double quantile = 0.8) {
    if (!(quantile > 0.0 && quantile < 1.0))
        throw std::invalid_argument("extract_hard_rationale: quantile must lie in (0, 1)");
    const auto& s = importance.scores;
    if (s.empty()) return {};
    std::size_t T = s.size();
    std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor((1.0 - quantile) * static_cast<double>(T))));
    std::vector<double> sorted(s.begin(), s.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    double threshold = sorted[k - 1];

    RationaleSpans spans;
    int run_start = -1;
    for (std::size_t t = 0; t <= T; ++t) {
        bool selected = t < T && s[t] >= threshold;
        if (selected && run_start < 0) run_start = static_cast<int>(t);
        if (!selected && run_start >= 0) {
            spans.push_back(Span{run_start, static_cast<int>(t)});
            run_start = -1;
        }
    }
    return spans;
}

namespace detail {

inline void check_spans(const RationaleSpans& spans, int length, const char* side) {
    int prev_end = 0;
    for (const auto& s : spans) {
        if (s.start < 0 || s.start >= s.end || s.end > length)
            throw std::invalid_argument(std::string(side) + " span [" + std::to_string(s.start) + ", " +
                                        std::to_string(s.end) + ") invalid for length " + std::to_string(length));
        if (s.start < prev_end)
            throw std::invalid_argument(std::string(side) + " spans overlap or are unsorted at [" +
                                        std::to_string(s.start) + ", " + std::to_string(s.end) + ")");
        prev_end = s.end;
    }
}

inline double span_iou(const Span& a, const Span& b) {
    int inter = std::max(0, std::min(a.end, b.end) - std::max(a.start, b.start));
    int uni = (a.end - a.start) + (b.end - b.start) - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline std::vector<int> token_mask(const RationaleSpans& spans, int length) {
    std::vector<int> mask(static_cast<std::size_t>(length), 0);
    for (const auto& s : spans)
        for (int t = s.start; t < s.end; ++t) mask[static_cast<std::size_t>(t)] = 1;
    return mask;
}

}  // namespace detail

struct HardMetrics {
    double iou_f1 = 0.0;
    double token_f1 = 0.0;
};

// Span-level matching: a predicted span counts as a hit when its best
// token-set IOU against the gold spans reaches 0.5. Precision is hits over
// predicted spans, recall hits over gold spans. Token F1 compares the
// per-token membership masks.
inline HardMetrics hard_rationale_metrics(const RationaleSpans& predicted, const RationaleSpans& gold, int length) {
    detail::check_spans(predicted, length, "predicted");
    detail::check_spans(gold, length, "gold");

    HardMetrics m;
    std::size_t hits = 0;
    for (const auto& p : predicted) {
        double best = 0.0;
        for (const auto& g : gold) best = std::max(best, detail::span_iou(p, g));
        if (best >= 0.5) ++hits;
    }
    double precision = predicted.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(predicted.size());
    double recall = gold.empty() ? 0.0 : std::min(1.0, static_cast<double>(hits) / static_cast<double>(gold.size()));
    m.iou_f1 = precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;

    if (length > 0) {
        auto pm = detail::token_mask(predicted, length);
        auto gm = detail::token_mask(gold, length);
        m.token_f1 = f1_score(pm, gm);
    }
    return m;
}

struct SoftMetrics {
    double auprc = 0.0;
    double ap = 0.0;
    double roc_auc = 0.0;
};

// Threshold-free agreement between a continuous importance profile and a
// binary gold mask. Undefined (nullopt) when the mask has no positive or no
// negative token.
inline std::optional<SoftMetrics> soft_rationale_metrics(std::span<const double> importance,
                                                         std::span<const int> mask) {
    if (importance.size() != mask.size())
        throw std::invalid_argument("soft_rationale_metrics: length mismatch " + std::to_string(importance.size()) +
                                    " vs " + std::to_string(mask.size()));
    std::size_t n = importance.size();
    std::size_t pos = 0;
    for (int m : mask) pos += m == 1 ? 1 : 0;
    std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) return std::nullopt;

    SoftMetrics out;

    // ROC-AUC as the Mann-Whitney statistic, ties at one half.
    double u = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i] != 1) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (mask[j] == 1) continue;
            if (importance[i] > importance[j]) u += 1.0;
            else if (importance[i] == importance[j]) u += 0.5;
        }
    }
    out.roc_auc = u / (static_cast<double>(pos) * static_cast<double>(neg));

    // Rank by score descending, ties broken by token position.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });

    // AP: precision accumulated at each positive rank.
    std::size_t tp = 0;
    double ap = 0.0;
    for (std::size_t rank = 0; rank < n; ++rank) {
        if (mask[order[rank]] == 1) {
            ++tp;
            ap += static_cast<double>(tp) / static_cast<double>(rank + 1);
        }
    }
    out.ap = ap / static_cast<double>(pos);

    // AUPRC: trapezoid over the precision-recall points swept across the
    // distinct score thresholds, anchored at recall zero.
    std::vector<std::pair<double, double>> curve;  // (recall, precision)
    tp = 0;
    std::size_t taken = 0;
    for (std::size_t rank = 0; rank < n; ++rank) {
        ++taken;
        if (mask[order[rank]] == 1) ++tp;
        bool boundary = rank + 1 == n || importance[order[rank + 1]] != importance[order[rank]];
        if (boundary)
            curve.emplace_back(static_cast<double>(tp) / static_cast<double>(pos),
                               static_cast<double>(tp) / static_cast<double>(taken));
    }
    double prev_r = 0.0, prev_p = curve.front().second;
    double area = 0.0;
    for (auto& [r, p] : curve) {
        area += (r - prev_r) * 0.5 * (p + prev_p);
        prev_r = r;
        prev_p = p;
    }
    out.auprc = area;
    return out;
}

struct RationaleReport {
    double iou_f1 = 0.0;
    double token_f1 = 0.0;
    double auprc = 0.0;
    double ap = 0.0;
    double roc_auc = 0.0;
    double quantile = 0.8;
    std::size_t n_examples = 0;
    std::size_t n_soft_excluded = 0;
};

// Corpus-level rationale agreement: hard metrics from thresholded
// importance, soft metrics from the raw profile, both macro-averaged.
inline RationaleReport rationale_metrics(const textdata::Corpus& corpus, const model::ModelParams& params,
                                         double quantile = 0.8,
                                         ImportanceSource source = ImportanceSource::attention) {
    RationaleReport report;
    report.quantile = quantile;
    double iou_sum = 0, tok_sum = 0, auprc_sum = 0, ap_sum = 0, roc_sum = 0;
    std::size_t soft_used = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& ex = corpus.examples[i];
        if (ex.rationale.empty())
            throw DataError("rationale_metrics: example " + std::to_string(i) + " has no rationale spans");
        ImportanceVector imp;
        if (source == ImportanceSource::attention) {
            imp.scores = model::infer(params, ex.ids).attention_weights;
            imp.source = ImportanceSource::attention;
        } else {
            imp = gradient_importance(params, ex.ids);
        }
        auto predicted = extract_hard_rationale(imp, quantile);
        auto hard = hard_rationale_metrics(predicted, ex.rationale, ex.length());
        iou_sum += hard.iou_f1;
        tok_sum += hard.token_f1;

        auto gold_mask = detail::token_mask(ex.rationale, ex.length());
        if (auto soft = soft_rationale_metrics(imp.scores, gold_mask)) {
            auprc_sum += soft->auprc;
            ap_sum += soft->ap;
            roc_sum += soft->roc_auc;
            ++soft_used;
        } else {
            ++report.n_soft_excluded;
        }
        ++report.n_examples;
    }
    if (report.n_examples > 0) {
        report.iou_f1 = iou_sum / static_cast<double>(report.n_examples);
        report.token_f1 = tok_sum / static_cast<double>(report.n_examples);
    }
    if (soft_used > 0) {
        report.auprc = auprc_sum / static_cast<double>(soft_used);
        report.ap = ap_sum / static_cast<double>(soft_used);
        report.roc_auc = roc_sum / static_cast<double>(soft_used);
    }
    return report;
}

}  // namespace attnvat::eval
