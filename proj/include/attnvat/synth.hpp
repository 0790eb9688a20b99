#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "attnvat/rng.hpp"
#include "attnvat/textdata.hpp"

namespace attnvat::synth {

// Two-class keyword task. Each sentence carries a few class-consistent
// keyword tokens among neutral filler tokens; the keyword positions are the
// gold rationale. The unlabeled pool is drawn from the same process, which
// makes keyword co-occurrence informative for consistency training.
struct SynthConfig {
    int labeled_train = 200;
    int labeled_valid = 60;
    int labeled_test = 60;
    int unlabeled = 1000;
    int keywords_per_class = 40;
    int distractors = 60;
    int keywords_per_example = 2;
    int min_len = 6;
    int max_len = 12;
    std::uint64_t seed = 7;

    void validate() const {
        if (labeled_train < 2 || labeled_valid < 2 || labeled_test < 0 || unlabeled < 0)
            throw std::invalid_argument("SynthConfig: corpus sizes out of range");
        if (keywords_per_class < 1 || distractors < 1) throw std::invalid_argument("SynthConfig: empty inventories");
        if (keywords_per_example < 1 || min_len < keywords_per_example || max_len < min_len)
            throw std::invalid_argument("SynthConfig: inconsistent lengths");
    }
};

struct SynthData {
    std::vector<textdata::JsonlRecord> train;
    std::vector<textdata::JsonlRecord> valid;
    std::vector<textdata::JsonlRecord> test;
    std::vector<textdata::JsonlRecord> unlabeled;
};

namespace detail {

inline textdata::JsonlRecord make_record(const SynthConfig& cfg, Rng& rng, int label, bool keep_label,
                                         bool keep_rationale) {
    int len = cfg.min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_len - cfg.min_len + 1)));
    auto positions = rng.sample_indices(static_cast<std::size_t>(len), static_cast<std::size_t>(cfg.keywords_per_example));

    std::vector<std::string> tokens(static_cast<std::size_t>(len));
    std::vector<bool> is_keyword(static_cast<std::size_t>(len), false);
    for (std::size_t p : positions) is_keyword[p] = true;
    for (int t = 0; t < len; ++t) {
        if (is_keyword[static_cast<std::size_t>(t)]) {
            int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.keywords_per_class)));
            tokens[static_cast<std::size_t>(t)] = (label == 1 ? "pos" : "neg") + std::to_string(k);
        } else {
            int w = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.distractors)));
            tokens[static_cast<std::size_t>(t)] = "w" + std::to_string(w);
        }
    }

    textdata::JsonlRecord rec;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (t) rec.text += ' ';
        rec.text += tokens[t];
    }
    if (keep_label) rec.label = label;
    if (keep_rationale)
        for (std::size_t p : positions) rec.rationale.push_back(textdata::Span{static_cast<int>(p), static_cast<int>(p) + 1});
    return rec;
}

}  // namespace detail

inline SynthData generate(const SynthConfig& cfg) {
    cfg.validate();
    SynthData data;
    Rng rng(cfg.seed);
    auto fill = [&](std::vector<textdata::JsonlRecord>& out, int n, bool keep_label, bool keep_rationale) {
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) out.push_back(detail::make_record(cfg, rng, i % 2, keep_label, keep_rationale));
    };
    fill(data.train, cfg.labeled_train, true, true);
    fill(data.valid, cfg.labeled_valid, true, true);
    fill(data.test, cfg.labeled_test, true, true);
    fill(data.unlabeled, cfg.unlabeled, false, false);
    return data;
}

inline void write_dir(const SynthData& data, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    textdata::write_jsonl(dir / "train.jsonl", data.train);
    textdata::write_jsonl(dir / "valid.jsonl", data.valid);
    textdata::write_jsonl(dir / "test.jsonl", data.test);
    textdata::write_jsonl(dir / "unlabeled.jsonl", data.unlabeled);
}

}  // namespace attnvat::synth
