#pragma once

// Shared fixtures and independent oracles for the test suites. Everything
// here recomputes results through a second route (straight loops over
// doubles) so the library's tape-based path is checked against code that
// shares none of it.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "attnvat/advtrain.hpp"
#include "attnvat/eval.hpp"
#include "attnvat/model.hpp"

namespace testutil {

using attnvat::Rng;
using attnvat::autodiff::Tape;
using attnvat::autodiff::Tensor;
using attnvat::model::ModelConfig;
using attnvat::model::ModelParams;
using attnvat::model::ParamLeaves;

inline ModelParams tiny_params(std::uint64_t seed, int vocab = 12, int d = 4, int u = 3, int attn = 0) {
    ModelConfig mc;
    mc.vocab_size = vocab;
    mc.embed_dim = d;
    mc.hidden_dim = u;
    mc.attn_dim = attn;
    Rng rng(seed);
    return attnvat::model::init_params(mc, rng);
}

inline attnvat::textdata::Example example_of(std::vector<int> ids, std::optional<int> label = std::nullopt) {
    attnvat::textdata::Example ex;
    ex.ids = std::move(ids);
    ex.label = label;
    return ex;
}

// --- flat parameter vector <-> tape leaves --------------------------------

inline int flat_size(const ModelParams& p) {
    int n = 0;
    for (auto& [name, t] : p.named()) n += t->numel();
    return n;
}

inline std::vector<double> flatten(const ModelParams& p) {
    std::vector<double> out;
    for (auto& [name, t] : p.named()) out.insert(out.end(), t->values().begin(), t->values().end());
    return out;
}

// Rebuild the parameter leaves by slicing one flat tensor already on the
// tape, so a single fd_check sweep differentiates the entire model.
inline ParamLeaves leaves_from_flat(Tape& tape, const Tensor& flat, const ModelParams& ref) {
    ParamLeaves leaves;
    std::vector<std::pair<std::string, Tensor*>> slots = {
        {"embedding", &leaves.embedding}, {"fwd.w_input", &leaves.fwd_wi}, {"fwd.w_hidden", &leaves.fwd_wh},
        {"fwd.bias", &leaves.fwd_b},      {"bwd.w_input", &leaves.bwd_wi}, {"bwd.w_hidden", &leaves.bwd_wh},
        {"bwd.bias", &leaves.bwd_b},      {"attn.w", &leaves.attn_w},      {"attn.b", &leaves.attn_b},
        {"attn.c", &leaves.attn_c},       {"dec.weight", &leaves.dec_w},   {"dec.bias", &leaves.dec_b}};
    int offset = 0;
    auto named = ref.named();
    for (auto& [name, t] : named) {
        Tensor piece = tape.slice(flat, offset, t->numel());
        if (t->shape().size() > 1) piece = tape.reshape(piece, t->shape());
        for (auto& [slot_name, slot] : slots)
            if (slot_name == name) *slot = piece;
        offset += t->numel();
    }
    return leaves;
}

inline ModelParams with_perturbed_entry(const ModelParams& p, const std::string& name, int index, double delta) {
    ModelParams out = p;
    for (auto& [n, t] : out.named()) {
        if (n != name) continue;
        std::vector<double> v = t->values();
        v[static_cast<std::size_t>(index)] += delta;
        *t = Tensor(t->shape(), std::move(v));
    }
    return out;
}

// --- plain-double reference implementations --------------------------------

inline double ref_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Step-by-step recurrence written directly from the cell equations, no tape.
inline std::vector<std::vector<double>> reference_bilstm(const ModelParams& p, const std::vector<int>& ids) {
    int d = p.config.embed_dim, u = p.config.hidden_dim;
    int T = static_cast<int>(ids.size());
    auto embed = [&](int t) {
        const auto& e = p.embedding.values();
        return std::vector<double>(e.begin() + static_cast<std::size_t>(ids[t]) * d,
                                   e.begin() + static_cast<std::size_t>(ids[t] + 1) * d);
    };
    auto run_cell = [&](const attnvat::model::LstmWeights& w, const std::vector<int>& order) {
        std::vector<std::vector<double>> states(ids.size());
        std::vector<double> h(u, 0.0), c(u, 0.0);
        for (int t : order) {
            auto x = embed(t);
            std::vector<double> gates(4 * u, 0.0);
            for (int r = 0; r < 4 * u; ++r) {
                double s = w.bias.at(r);
                for (int j = 0; j < d; ++j) s += w.w_input.at(r, j) * x[static_cast<std::size_t>(j)];
                for (int j = 0; j < u; ++j) s += w.w_hidden.at(r, j) * h[static_cast<std::size_t>(j)];
                gates[static_cast<std::size_t>(r)] = s;
            }
            for (int j = 0; j < u; ++j) {
                double gi = ref_sigmoid(gates[static_cast<std::size_t>(j)]);
                double gf = ref_sigmoid(gates[static_cast<std::size_t>(u + j)]);
                double gg = std::tanh(gates[static_cast<std::size_t>(2 * u + j)]);
                double go = ref_sigmoid(gates[static_cast<std::size_t>(3 * u + j)]);
                c[static_cast<std::size_t>(j)] = gf * c[static_cast<std::size_t>(j)] + gi * gg;
                h[static_cast<std::size_t>(j)] = go * std::tanh(c[static_cast<std::size_t>(j)]);
            }
            states[static_cast<std::size_t>(t)] = h;
        }
        return states;
    };
    std::vector<int> fwd_order(T), bwd_order(T);
    std::iota(fwd_order.begin(), fwd_order.end(), 0);
    for (int t = 0; t < T; ++t) bwd_order[static_cast<std::size_t>(t)] = T - 1 - t;
    auto fs = run_cell(p.fwd, fwd_order);
    auto bs = run_cell(p.bwd, bwd_order);
    std::vector<std::vector<double>> hidden(ids.size());
    for (int t = 0; t < T; ++t) {
        hidden[static_cast<std::size_t>(t)] = fs[static_cast<std::size_t>(t)];
        hidden[static_cast<std::size_t>(t)].insert(hidden[static_cast<std::size_t>(t)].end(),
                                                   bs[static_cast<std::size_t>(t)].begin(),
                                                   bs[static_cast<std::size_t>(t)].end());
    }
    return hidden;
}

inline double kl_bern(double p, double q) {
    p = attnvat::autodiff::clamp_prob(p);
    q = attnvat::autodiff::clamp_prob(q);
    return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

// KL between the clean output and the output under a score perturbation.
inline double kl_at_score_offset(const ModelParams& params, const std::vector<int>& ids,
                                 const std::vector<double>& r) {
    double clean = attnvat::model::infer(params, ids).pred.probability;
    double perturbed = attnvat::model::infer(params, ids, &r).pred.probability;
    return kl_bern(clean, perturbed);
}

// ROC-AUC by explicit curve integration with tie groups, the second route
// against the Mann-Whitney form.
inline double roc_auc_by_curve(const std::vector<double>& scores, const std::vector<int>& mask) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double pos = 0, neg = 0;
    for (int m : mask) (m == 1 ? pos : neg) += 1;
    double tp = 0, fp = 0, prev_tpr = 0, prev_fpr = 0, area = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            if (mask[order[j]] == 1) tp += 1;
            else fp += 1;
            ++j;
        }
        double tpr = tp / pos, fpr = fp / neg;
        area += (fpr - prev_fpr) * 0.5 * (tpr + prev_tpr);
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j;
    }
    return area;
}

inline std::vector<double> random_unit_times(Rng& rng, std::size_t n, double norm) {
    auto v = rng.gaussian_vector(n);
    double s = 0.0;
    for (double x : v) s += x * x;
    s = std::sqrt(s);
    for (auto& x : v) x *= norm / s;
    return v;
}

inline double percentile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    double pos = q * static_cast<double>(v.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

}  // namespace testutil
