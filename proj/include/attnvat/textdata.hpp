#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "attnvat/errors.hpp"
#include "attnvat/rng.hpp"
#include "attnvat/tensor.hpp"

namespace attnvat::textdata {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";

class Vocabulary {
public:
    Vocabulary() {
        add(kPadToken);
        add(kUnkToken);
    }

    // Rebuild from a full id -> token list (checkpoint restore). The list
    // must start with the two reserved tokens.
    static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
        if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken)
            throw DataError("Vocabulary::from_tokens: reserved tokens missing or out of place");
        Vocabulary v;
        for (std::size_t i = 2; i < tokens.size(); ++i) v.add(tokens[i]);
        return v;
    }

    int add(const std::string& token) {
        auto [it, inserted] = index_.emplace(token, static_cast<int>(tokens_.size()));
        if (inserted) tokens_.push_back(token);
        return it->second;
    }

    std::optional<int> lookup(const std::string& token) const {
        auto it = index_.find(token);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    int id_or_unk(const std::string& token) const { return lookup(token).value_or(kUnkId); }

    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    int size() const { return static_cast<int>(tokens_.size()); }

private:
    std::unordered_map<std::string, int> index_;
    std::vector<std::string> tokens_;
};

// Token span [start, end), end-exclusive, indices into the tokenized text.
struct Span {
    int start = 0;
    int end = 0;

    bool operator==(const Span&) const = default;
};

struct Example {
    std::vector<int> ids;
    std::optional<int> label;
    std::vector<std::string> raw_tokens;
    std::vector<Span> rationale;

    int length() const { return static_cast<int>(ids.size()); }
};

enum class CorpusKind { labeled, unlabeled };

struct Provenance {
    std::string source;
    std::uint64_t sample_seed = 0;
    std::size_t sample_count = 0;
};

struct Corpus {
    std::vector<Example> examples;
    CorpusKind kind = CorpusKind::labeled;
    Provenance provenance;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
};

inline bool is_ascii_punct(char c) {
    return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

// Lowercase, split on whitespace, then peel leading/trailing ASCII
// punctuation into tokens of their own. Interior punctuation stays attached.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        if (j == i) break;
        std::string chunk(text.substr(i, j - i));
        for (auto& c : chunk) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

        std::size_t lo = 0, hi = chunk.size();
        std::vector<std::string> tail;
        while (hi - lo > 1 && is_ascii_punct(chunk[lo])) {
            out.emplace_back(1, chunk[lo]);
            ++lo;
        }
        while (hi - lo > 1 && is_ascii_punct(chunk[hi - 1])) {
            tail.emplace_back(1, chunk[hi - 1]);
            --hi;
        }
        out.push_back(chunk.substr(lo, hi - lo));
        out.insert(out.end(), tail.rbegin(), tail.rend());
        i = j;
    }
    return out;
}

// Frequency-ordered vocabulary: tokens with count >= min_freq, most frequent
// first, ties lexicographic, truncated to max_size including the two
// reserved entries.
inline Vocabulary build_vocab(std::span<const std::string> texts, int min_freq, int max_size) {
    if (min_freq < 1) throw std::invalid_argument("build_vocab: min_freq must be >= 1");
    if (max_size < 3) throw std::invalid_argument("build_vocab: max_size must be >= 3");
    std::map<std::string, std::size_t> counts;
    for (const auto& text : texts)
        for (auto& tok : tokenize(text)) ++counts[tok];

    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary vocab;
    for (const auto& [tok, count] : ranked) {
        if (count < static_cast<std::size_t>(min_freq)) continue;
        if (vocab.size() >= max_size) break;
        vocab.add(tok);
    }
    return vocab;
}

inline std::vector<int> encode(std::span<const std::string> tokens, const Vocabulary& vocab) {
    if (tokens.empty()) throw std::invalid_argument("encode: empty token sequence");
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& tok : tokens) ids.push_back(vocab.id_or_unk(tok));
    return ids;
}

inline std::vector<std::string> decode(std::span<const int> ids, const Vocabulary& vocab) {
    std::vector<std::string> tokens;
    tokens.reserve(ids.size());
    for (int id : ids) tokens.push_back(vocab.token(id));
    return tokens;
}

struct JsonlRecord {
    std::string text;
    std::optional<int> label;
    std::vector<Span> rationale;
};

// One JSON object per line: "text" required, "label" in {0,1} required for
// labeled corpora, optional "rationale" as a list of [start, end) pairs.
inline std::vector<JsonlRecord> read_jsonl(const std::filesystem::path& path, CorpusKind kind) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file: " + path.string());
    std::vector<JsonlRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
        }
        if (!obj.contains("text") || !obj["text"].is_string())
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": missing string field \"text\"");
        JsonlRecord rec;
        rec.text = obj["text"].get<std::string>();
        if (obj.contains("label")) {
            if (!obj["label"].is_number_integer() || (obj["label"] != 0 && obj["label"] != 1))
                throw DataError(path.string() + ":" + std::to_string(lineno) + ": \"label\" must be 0 or 1");
            rec.label = obj["label"].get<int>();
        }
        if (kind == CorpusKind::labeled && !rec.label)
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": labeled corpus line has no \"label\"");
        if (kind == CorpusKind::unlabeled) rec.label.reset();
        if (obj.contains("rationale")) {
            for (const auto& pair : obj["rationale"]) {
                if (!pair.is_array() || pair.size() != 2)
                    throw DataError(path.string() + ":" + std::to_string(lineno) + ": \"rationale\" entries must be [start, end) pairs");
                rec.rationale.push_back(Span{pair[0].get<int>(), pair[1].get<int>()});
            }
        }
        records.push_back(std::move(rec));
    }
    return records;
}

inline Corpus make_corpus(std::span<const JsonlRecord> records, const Vocabulary& vocab, CorpusKind kind,
                          const std::string& source) {
    Corpus corpus;
    corpus.kind = kind;
    corpus.provenance.source = source;
    corpus.examples.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        Example ex;
        ex.raw_tokens = tokenize(rec.text);
        if (ex.raw_tokens.empty())
            throw DataError(source + ": record " + std::to_string(i + 1) + ": text has no tokens");
        ex.ids = encode(ex.raw_tokens, vocab);
        if (kind == CorpusKind::labeled) ex.label = rec.label;
        ex.rationale = rec.rationale;
        corpus.examples.push_back(std::move(ex));
    }
    return corpus;
}

inline Corpus load_jsonl(const std::filesystem::path& path, CorpusKind kind, const Vocabulary& vocab) {
    auto records = read_jsonl(path, kind);
    return make_corpus(records, vocab, kind, path.string());
}

inline void write_jsonl(const std::filesystem::path& path, std::span<const JsonlRecord> records) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write corpus file: " + path.string());
    for (const auto& rec : records) {
        nlohmann::json obj;
        obj["text"] = rec.text;
        if (rec.label) obj["label"] = *rec.label;
        if (!rec.rationale.empty()) {
            auto arr = nlohmann::json::array();
            for (const auto& span : rec.rationale) arr.push_back({span.start, span.end});
            obj["rationale"] = arr;
        }
        out << obj.dump() << '\n';
    }
}

struct EmbeddingTable {
    autodiff::Tensor matrix;  // [|V| x d]
    bool trainable = true;
};

// Plain-text embeddings: token followed by d reals per line, with an
// optional "count dim" header. Vocabulary rows not covered by the file are
// drawn from uniform(-0.1, 0.1); the PAD row is zero.
inline EmbeddingTable load_embeddings(const std::filesystem::path& path, const Vocabulary& vocab, int dim, Rng& rng) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embeddings file: " + path.string());

    std::vector<double> values(static_cast<std::size_t>(vocab.size()) * dim);
    for (auto& v : values) v = rng.uniform(-0.1, 0.1);
    std::fill(values.begin(), values.begin() + dim, 0.0);  // PAD row

    std::string line;
    std::size_t lineno = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string token;
        ls >> token;
        std::vector<double> row;
        double v;
        while (ls >> v) row.push_back(v);
        if (first) {
            first = false;
            // "count dim" header: two integers, the second matching dim.
            char* end = nullptr;
            double head = std::strtod(token.c_str(), &end);
            if (end && *end == '\0' && row.size() == 1 && static_cast<int>(row[0]) == dim && head == std::floor(head))
                continue;
        }
        if (row.size() != static_cast<std::size_t>(dim))
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(dim) +
                            " values, found " + std::to_string(row.size()));
        if (auto id = vocab.lookup(token); id && *id != kPadId)
            std::copy(row.begin(), row.end(), values.begin() + static_cast<std::size_t>(*id) * dim);
    }
    return EmbeddingTable{autodiff::Tensor::matrix(vocab.size(), dim, std::move(values)), true};
}

// Uniform sample of `count` examples without replacement, in pool order.
inline Corpus sample_unlabeled(const Corpus& pool, std::size_t count, std::uint64_t seed) {
    if (count > pool.size())
        throw std::out_of_range("sample_unlabeled: requested " + std::to_string(count) + " of " +
                                std::to_string(pool.size()) + " examples");
    Rng rng(seed);
    auto picks = rng.sample_indices(pool.size(), count);
    Corpus out;
    out.kind = pool.kind;
    out.provenance = pool.provenance;
    out.provenance.sample_seed = seed;
    out.provenance.sample_count = count;
    out.examples.reserve(count);
    for (std::size_t idx : picks) out.examples.push_back(pool.examples[idx]);
    return out;
}

// Index batches for one epoch. The shuffle order is derived from (seed,
// epoch) so distinct epochs get distinct, reproducible orders. The final
// short batch is kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t corpus_size, std::size_t batch_size, bool shuffle,
                                                     std::uint64_t seed, std::uint64_t epoch = 0) {
    if (batch_size < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
    std::vector<std::size_t> order(corpus_size);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle) {
        Rng rng(Rng::mix(seed, epoch));
        rng.shuffle(order);
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < corpus_size; start += batch_size) {
        std::size_t stop = std::min(corpus_size, start + batch_size);
        out.emplace_back(order.begin() + start, order.begin() + stop);
    }
    return out;
}

}  // namespace attnvat::textdata
