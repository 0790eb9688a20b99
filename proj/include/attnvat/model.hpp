#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnvat/autodiff.hpp"
#include "attnvat/errors.hpp"
#include "attnvat/rng.hpp"
#include "attnvat/textdata.hpp"

namespace attnvat::model {

using autodiff::Activation;
using autodiff::GradientMap;
using autodiff::NodeId;
using autodiff::Tape;
using autodiff::Tensor;

struct ModelConfig {
    int vocab_size = 0;
    int embed_dim = 50;
    int hidden_dim = 32;   // per direction
    int attn_dim = 0;      // 0 -> hidden_dim
    bool trainable_embeddings = true;

    int state_dim() const { return 2 * hidden_dim; }
    int attention_dim() const { return attn_dim > 0 ? attn_dim : hidden_dim; }

    nlohmann::json to_json() const {
        return {{"vocab_size", vocab_size},
                {"embed_dim", embed_dim},
                {"hidden_dim", hidden_dim},
                {"attn_dim", attn_dim},
                {"trainable_embeddings", trainable_embeddings}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.vocab_size = j.at("vocab_size").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.attn_dim = j.value("attn_dim", 0);
        c.trainable_embeddings = j.value("trainable_embeddings", true);
        return c;
    }
};

// Gate layout in the stacked LSTM matrices: input, forget, candidate, output.
struct LstmWeights {
    Tensor w_input;   // [4u x d]
    Tensor w_hidden;  // [4u x u]
    Tensor bias;      // [4u]
};

struct AttentionWeights {
    Tensor w;  // [d' x m]
    Tensor b;  // [d']
    Tensor c;  // [d']
};

struct DecoderWeights {
    Tensor weight;  // [1 x m]
    Tensor bias;    // [1]
};

struct ModelParams {
    ModelConfig config;
    Tensor embedding;  // [|V| x d]
    LstmWeights fwd, bwd;
    AttentionWeights attention;
    DecoderWeights decoder;

    std::vector<std::pair<std::string, const Tensor*>> named() const {
        return {{"embedding", &embedding}, {"fwd.w_input", &fwd.w_input},   {"fwd.w_hidden", &fwd.w_hidden},
                {"fwd.bias", &fwd.bias},   {"bwd.w_input", &bwd.w_input},   {"bwd.w_hidden", &bwd.w_hidden},
                {"bwd.bias", &bwd.bias},   {"attn.w", &attention.w},        {"attn.b", &attention.b},
                {"attn.c", &attention.c},  {"dec.weight", &decoder.weight}, {"dec.bias", &decoder.bias}};
    }

    std::vector<std::pair<std::string, Tensor*>> named() {
        return {{"embedding", &embedding}, {"fwd.w_input", &fwd.w_input},   {"fwd.w_hidden", &fwd.w_hidden},
                {"fwd.bias", &fwd.bias},   {"bwd.w_input", &bwd.w_input},   {"bwd.w_hidden", &bwd.w_hidden},
                {"bwd.bias", &bwd.bias},   {"attn.w", &attention.w},        {"attn.b", &attention.b},
                {"attn.c", &attention.c},  {"dec.weight", &decoder.weight}, {"dec.bias", &decoder.bias}};
    }

    bool all_finite() const {
        for (auto& [name, t] : named())
            if (!t->all_finite()) return false;
        return true;
    }
};

inline Tensor uniform_tensor(std::vector<int> shape, Rng& rng, double bound = 0.1) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(v));
}

inline ModelParams init_params(const ModelConfig& config, Rng& rng) {
    if (config.vocab_size < 2) throw std::invalid_argument("init_params: vocab_size must cover the reserved ids");
    int d = config.embed_dim, u = config.hidden_dim, m = config.state_dim(), dp = config.attention_dim();
    ModelParams p;
    p.config = config;

    Tensor emb = uniform_tensor({config.vocab_size, d}, rng);
    std::vector<double> ev = emb.values();
    std::fill(ev.begin(), ev.begin() + d, 0.0);  // PAD row
    p.embedding = Tensor({config.vocab_size, d}, std::move(ev));

    auto cell = [&](LstmWeights& w) {
        w.w_input = uniform_tensor({4 * u, d}, rng);
        w.w_hidden = uniform_tensor({4 * u, u}, rng);
        w.bias = Tensor::zeros({4 * u});
    };
    cell(p.fwd);
    cell(p.bwd);

    p.attention.w = uniform_tensor({dp, m}, rng);
    p.attention.b = Tensor::zeros({dp});
    p.attention.c = uniform_tensor({dp}, rng);
    p.decoder.weight = uniform_tensor({1, m}, rng);
    p.decoder.bias = Tensor::zeros({1});
    return p;
}

inline ModelParams init_params(const ModelConfig& config, Rng& rng, const textdata::EmbeddingTable& table) {
    ModelParams p = init_params(config, rng);
    if (table.matrix.shape() != std::vector<int>{config.vocab_size, config.embed_dim})
        throw std::invalid_argument("init_params: embedding table " + autodiff::shape_string(table.matrix.shape()) +
                                    " does not match configured " +
                                    autodiff::shape_string({config.vocab_size, config.embed_dim}));
    p.embedding = table.matrix;
    p.config.trainable_embeddings = table.trainable;
    return p;
}

// Tape handles for every parameter, registered once per forward tape.
struct ParamLeaves {
    Tensor embedding;
    Tensor fwd_wi, fwd_wh, fwd_b;
    Tensor bwd_wi, bwd_wh, bwd_b;
    Tensor attn_w, attn_b, attn_c;
    Tensor dec_w, dec_b;

    std::vector<std::pair<std::string, const Tensor*>> named() const {
        return {{"embedding", &embedding}, {"fwd.w_input", &fwd_wi}, {"fwd.w_hidden", &fwd_wh},
                {"fwd.bias", &fwd_b},      {"bwd.w_input", &bwd_wi}, {"bwd.w_hidden", &bwd_wh},
                {"bwd.bias", &bwd_b},      {"attn.w", &attn_w},      {"attn.b", &attn_b},
                {"attn.c", &attn_c},       {"dec.weight", &dec_w},   {"dec.bias", &dec_b}};
    }
};

// Register every parameter on the tape. With trainable=false the leaves take
// no gradient, which is what perturbation estimation wants: the model is
// frozen there and only the injected perturbation is differentiated.
inline ParamLeaves register_params(Tape& tape, const ModelParams& p, bool trainable = true) {
    auto as_leaf = [&](const Tensor& t, bool rg) {
        Tensor copy = t;
        copy.set_requires_grad(trainable && rg);
        return tape.leaf(copy);
    };
    ParamLeaves l;
    l.embedding = as_leaf(p.embedding, p.config.trainable_embeddings);
    l.fwd_wi = as_leaf(p.fwd.w_input, true);
    l.fwd_wh = as_leaf(p.fwd.w_hidden, true);
    l.fwd_b = as_leaf(p.fwd.bias, true);
    l.bwd_wi = as_leaf(p.bwd.w_input, true);
    l.bwd_wh = as_leaf(p.bwd.w_hidden, true);
    l.bwd_b = as_leaf(p.bwd.bias, true);
    l.attn_w = as_leaf(p.attention.w, true);
    l.attn_b = as_leaf(p.attention.b, true);
    l.attn_c = as_leaf(p.attention.c, true);
    l.dec_w = as_leaf(p.decoder.weight, true);
    l.dec_b = as_leaf(p.decoder.bias, true);
    return l;
}

inline Tensor lstm_step(Tape& tape, const Tensor& wi, const Tensor& wh, const Tensor& bias, const Tensor& x,
                        Tensor& h, Tensor& c, int u) {
    Tensor gates = tape.add(tape.matvec(wi, x), tape.affine(h, wh, bias));
    Tensor gi = tape.sigmoid_of(tape.slice(gates, 0, u));
    Tensor gf = tape.sigmoid_of(tape.slice(gates, u, u));
    Tensor gg = tape.tanh_of(tape.slice(gates, 2 * u, u));
    Tensor go = tape.sigmoid_of(tape.slice(gates, 3 * u, u));
    c = tape.add(tape.mul(gf, c), tape.mul(gi, gg));
    h = tape.mul(go, tape.tanh_of(c));
    return h;
}

// h_t = [forward state at t ; backward state at t], zero initial states.
inline std::vector<Tensor> encode_bilstm(Tape& tape, const ParamLeaves& p, const ModelConfig& config,
                                         std::span<const Tensor> embedded) {
    int u = config.hidden_dim;
    std::size_t T = embedded.size();
    std::vector<Tensor> fwd_states(T), bwd_states(T);

    Tensor h = tape.constant(Tensor::zeros({u}));
    Tensor c = tape.constant(Tensor::zeros({u}));
    for (std::size_t t = 0; t < T; ++t) fwd_states[t] = lstm_step(tape, p.fwd_wi, p.fwd_wh, p.fwd_b, embedded[t], h, c, u);

    h = tape.constant(Tensor::zeros({u}));
    c = tape.constant(Tensor::zeros({u}));
    for (std::size_t t = T; t > 0; --t)
        bwd_states[t - 1] = lstm_step(tape, p.bwd_wi, p.bwd_wh, p.bwd_b, embedded[t - 1], h, c, u);

    std::vector<Tensor> hidden(T);
    for (std::size_t t = 0; t < T; ++t) hidden[t] = tape.concat(fwd_states[t], bwd_states[t]);
    return hidden;
}

// Additive scoring: score_t = c . tanh(W h_t + b).
inline Tensor attention_scores(Tape& tape, const ParamLeaves& p, std::span<const Tensor> hidden) {
    std::vector<Tensor> scores(hidden.size());
    for (std::size_t t = 0; t < hidden.size(); ++t)
        scores[t] = tape.dot(p.attn_c, tape.tanh_of(tape.affine(hidden[t], p.attn_w, p.attn_b)));
    return tape.stack(scores);
}

struct AttentionState {
    Tensor scores;   // pre-softmax, before any injected perturbation
    Tensor weights;  // softmax of (scores + perturbation)
    Tensor context;  // sum_t weights_t h_t
};

struct Prediction {
    double probability = 0.0;
    double logit = 0.0;
};

struct ForwardOptions {
    // Perturbation added to the attention scores before softmax, length T.
    // May already be a node on the tape (for perturbations that are
    // themselves differentiable expressions), or a plain tensor that is
    // registered with its own requires_grad flag.
    const Tensor* score_perturbation = nullptr;
    // Perturbation added to the embedded words, [T x d].
    const Tensor* word_perturbation = nullptr;
    // Register each embedded word as an independent leaf so its gradient can
    // be read back (saliency); no gradient reaches the table.
    bool embeddings_as_leaves = false;
};

struct ForwardResult {
    Tensor logit;  // scalar node
    Tensor prob;   // scalar node
    AttentionState attention;
    std::vector<Tensor> hidden;
    std::vector<Tensor> embedded;
    Tensor score_perturbation;  // bound node when injected
    Tensor word_perturbation;

    Prediction prediction() const { return {prob.value(), logit.value()}; }
};

inline ForwardResult forward(Tape& tape, const ParamLeaves& p, const ModelConfig& config, std::span<const int> ids,
                             const ForwardOptions& opts = {}) {
    if (ids.empty()) throw std::invalid_argument("forward: empty token sequence");
    int T = static_cast<int>(ids.size());
    int d = config.embed_dim;

    ForwardResult res;

    if (opts.word_perturbation) {
        const Tensor& r = *opts.word_perturbation;
        if (r.shape() != std::vector<int>{T, d})
            throw std::invalid_argument("forward: word perturbation " + autodiff::shape_string(r.shape()) +
                                        " does not match sequence " + autodiff::shape_string({T, d}));
        res.word_perturbation = r.on_tape() ? r : tape.leaf(r);
    }

    res.embedded.resize(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) {
        Tensor w;
        if (opts.embeddings_as_leaves) {
            std::vector<double> row(p.embedding.values().begin() + static_cast<std::size_t>(ids[t]) * d,
                                    p.embedding.values().begin() + static_cast<std::size_t>(ids[t] + 1) * d);
            w = tape.leaf(Tensor({d}, std::move(row), true));
        } else {
            w = tape.gather_row(p.embedding, ids[t]);
        }
        if (opts.word_perturbation) w = tape.add(w, tape.row(res.word_perturbation, t));
        res.embedded[static_cast<std::size_t>(t)] = w;
    }

    res.hidden = encode_bilstm(tape, p, config, res.embedded);
    res.attention.scores = attention_scores(tape, p, res.hidden);

    Tensor pre_softmax = res.attention.scores;
    if (opts.score_perturbation) {
        const Tensor& r = *opts.score_perturbation;
        if (r.numel() != T)
            throw std::invalid_argument("forward: score perturbation length " + std::to_string(r.numel()) +
                                        " does not match sequence length " + std::to_string(T));
        res.score_perturbation = r.on_tape() ? r : tape.leaf(r);
        pre_softmax = tape.add(pre_softmax, res.score_perturbation);
    }

    res.attention.weights = tape.softmax(pre_softmax);
    res.attention.context = tape.weighted_sum(res.attention.weights, res.hidden);
    res.logit = tape.affine(res.attention.context, p.dec_w, p.dec_b);
    res.prob = tape.sigmoid_of(res.logit);
    return res;
}

struct InferenceResult {
    Prediction pred;
    std::vector<double> attention_weights;
    std::vector<double> attention_scores;
};

// Convenience single-example evaluation on a throwaway tape.
inline InferenceResult infer(const ModelParams& params, std::span<const int> ids,
                             const std::vector<double>* score_perturbation = nullptr) {
    Tape tape;
    ParamLeaves leaves = register_params(tape, params);
    ForwardOptions opts;
    Tensor pert;
    if (score_perturbation) {
        pert = Tensor::vector(*score_perturbation);
        opts.score_perturbation = &pert;
    }
    ForwardResult r = forward(tape, leaves, params.config, ids, opts);
    return {r.prediction(), r.attention.weights.values(), r.attention.scores.values()};
}

inline Tensor nll_loss(Tape& tape, const Tensor& prob, int label) { return tape.nll_bernoulli(prob, label); }

// coefficient * sum of squared trainable parameters. The PAD embedding row
// is pinned at zero and never updated, so it contributes nothing.
inline Tensor l2_penalty(Tape& tape, const ParamLeaves& p, double coefficient, bool trainable_embeddings) {
    if (coefficient < 0) throw std::invalid_argument("l2_penalty: coefficient must be >= 0");
    Tensor total = tape.constant_scalar(0.0);
    for (auto& [name, t] : p.named()) {
        if (name == "embedding" && !trainable_embeddings) continue;
        total = tape.add(total, tape.sumsq(*t));
    }
    return tape.scale(total, coefficient);
}

// --- checkpoint ---------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(os, bits);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64(std::istream& is) {
    std::uint64_t bits = read_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline std::string read_string(std::istream& is, std::uint64_t max_len = (1ull << 32)) {
    std::uint64_t n = read_u64(is);
    if (n > max_len) throw DataError("checkpoint: corrupt string length");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'A', 'V', 'A', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelParams params;
    textdata::Vocabulary vocab;
    nlohmann::json config_echo;
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                            const textdata::Vocabulary& vocab, const nlohmann::json& config_echo) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path.string());
    os.write(kCheckpointMagic, 8);
    detail::write_u32(os, kCheckpointVersion);

    nlohmann::json echo = config_echo;
    echo["model"] = params.config.to_json();
    detail::write_string(os, echo.dump());

    detail::write_u64(os, static_cast<std::uint64_t>(vocab.size()));
    for (const auto& tok : vocab.tokens()) detail::write_string(os, tok);

    auto named = params.named();
    detail::write_u64(os, named.size());
    for (auto& [name, t] : named) {
        detail::write_string(os, name);
        detail::write_u32(os, static_cast<std::uint32_t>(t->shape().size()));
        for (int dim : t->shape()) detail::write_u64(os, static_cast<std::uint64_t>(dim));
        for (double v : t->values()) detail::write_f64(os, v);
    }
    if (!os) throw DataError("checkpoint write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw DataError("not a checkpoint file: " + path.string());
    std::uint32_t version = detail::read_u32(is);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());

    Checkpoint ck;
    std::string config_text = detail::read_string(is);
    try {
        ck.config_echo = nlohmann::json::parse(config_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint config is corrupt: " + std::string(e.what()));
    }
    ck.params.config = ModelConfig::from_json(ck.config_echo.at("model"));

    std::uint64_t vocab_size = detail::read_u64(is);
    std::vector<std::string> tokens;
    tokens.reserve(vocab_size);
    for (std::uint64_t i = 0; i < vocab_size; ++i) tokens.push_back(detail::read_string(is));
    ck.vocab = textdata::Vocabulary::from_tokens(tokens);

    std::uint64_t tensor_count = detail::read_u64(is);
    auto named = ck.params.named();
    if (tensor_count != named.size()) throw DataError("checkpoint tensor count mismatch in " + path.string());
    for (std::uint64_t i = 0; i < tensor_count; ++i) {
        std::string name = detail::read_string(is);
        std::uint32_t ndim = detail::read_u32(is);
        std::vector<int> shape(ndim);
        std::size_t n = 1;
        for (auto& dim : shape) {
            dim = static_cast<int>(detail::read_u64(is));
            n *= static_cast<std::size_t>(dim);
        }
        std::vector<double> values(n);
        for (auto& v : values) v = detail::read_f64(is);
        if (!is) throw DataError("checkpoint truncated: " + path.string());
        bool found = false;
        for (auto& [pname, t] : named) {
            if (pname == name) {
                *t = Tensor(shape, std::move(values));
                found = true;
                break;
            }
        }
        if (!found) throw DataError("checkpoint has unknown tensor \"" + name + "\"");
    }
    if (static_cast<int>(vocab_size) != ck.params.config.vocab_size ||
        ck.params.embedding.shape() != std::vector<int>{ck.params.config.vocab_size, ck.params.config.embed_dim})
        throw DataError("checkpoint config does not match stored tensors: " + path.string());
    return ck;
}

}  // namespace attnvat::model
