#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "attnvat/textdata.hpp"

using namespace attnvat::textdata;
using attnvat::DataError;
using attnvat::Rng;

namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& contents) {
    fs::path p = fs::temp_directory_path() / name;
    std::ofstream out(p);
    out << contents;
    return p;
}

}  // namespace

TEST_CASE("tokenize") {
    REQUIRE(tokenize("Good movie!") == std::vector<std::string>{"good", "movie", "!"});
    REQUIRE(tokenize("").empty());
    REQUIRE(tokenize("A B  C") == std::vector<std::string>{"a", "b", "c"});
    REQUIRE(tokenize("(really?) don't") == std::vector<std::string>{"(", "really", "?", ")", "don't"});
    REQUIRE(tokenize("...") == std::vector<std::string>{".", ".", "."});
}

TEST_CASE("build_vocab") {
    SECTION("frequency ordering with reserved ids") {
        std::vector<std::string> texts{"a a b"};
        Vocabulary v = build_vocab(texts, 1, 100);
        REQUIRE(v.size() == 4);
        REQUIRE(v.lookup("a") == 2);
        REQUIRE(v.lookup("b") == 3);
        REQUIRE(v.token(kPadId) == kPadToken);
        REQUIRE(v.token(kUnkId) == kUnkToken);
    }
    SECTION("min_freq threshold") {
        std::vector<std::string> texts{"a b"};
        Vocabulary v = build_vocab(texts, 2, 100);
        REQUIRE(v.size() == 2);
    }
    SECTION("ties break lexicographically") {
        std::vector<std::string> texts{"y x"};
        Vocabulary v = build_vocab(texts, 1, 100);
        REQUIRE(v.lookup("x") == 2);
        REQUIRE(v.lookup("y") == 3);
    }
    SECTION("max_size includes the reserved entries") {
        std::vector<std::string> texts{"a a a b b c"};
        Vocabulary v = build_vocab(texts, 1, 3);
        REQUIRE(v.size() == 3);
        REQUIRE(v.lookup("a") == 2);
        REQUIRE_FALSE(v.lookup("b"));
    }
    SECTION("precondition violations") {
        std::vector<std::string> texts{"a"};
        REQUIRE_THROWS_AS(build_vocab(texts, 0, 10), std::invalid_argument);
        REQUIRE_THROWS_AS(build_vocab(texts, 1, 2), std::invalid_argument);
    }
}

TEST_CASE("encode") {
    std::vector<std::string> texts{"a a"};
    Vocabulary v = build_vocab(texts, 1, 100);
    SECTION("unknown tokens map to UNK") {
        std::vector<std::string> toks{"a", "zzz"};
        REQUIRE(encode(toks, v) == std::vector<int>{2, kUnkId});
    }
    SECTION("repeats preserved") {
        std::vector<std::string> toks{"a", "a"};
        REQUIRE(encode(toks, v) == std::vector<int>{2, 2});
    }
    SECTION("round-trip on known tokens") {
        std::vector<std::string> toks{"a", "a"};
        REQUIRE(decode(encode(toks, v), v) == toks);
    }
    SECTION("empty input rejected") {
        std::vector<std::string> empty;
        REQUIRE_THROWS_AS(encode(empty, v), std::invalid_argument);
    }
    SECTION("ids never reach past the vocabulary") {
        Rng rng(9);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<std::string> toks;
            for (int i = 0; i < 8; ++i) toks.push_back("tok" + std::to_string(rng.below(40)));
            for (int id : encode(toks, v)) REQUIRE(id < v.size());
        }
    }
}

TEST_CASE("load_jsonl") {
    Vocabulary v = build_vocab(std::vector<std::string>{"good bad plot"}, 1, 100);
    SECTION("labeled corpus") {
        auto p = temp_file("attnvat_l.jsonl", "{\"text\":\"good\",\"label\":1}\n{\"text\":\"bad plot\",\"label\":0}\n{\"text\":\"good good\",\"label\":1}\n");
        Corpus c = load_jsonl(p, CorpusKind::labeled, v);
        REQUIRE(c.size() == 3);
        REQUIRE(c.examples[0].label == 1);
        REQUIRE(c.examples[1].ids.size() == 2);
    }
    SECTION("labeled line without label names the line") {
        auto p = temp_file("attnvat_m.jsonl", "{\"text\":\"good\",\"label\":1}\n{\"text\":\"bad\"}\n");
        REQUIRE_THROWS_WITH(load_jsonl(p, CorpusKind::labeled, v), Catch::Matchers::ContainsSubstring(":2"));
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(load_jsonl("/nonexistent/x.jsonl", CorpusKind::labeled, v), DataError);
    }
    SECTION("unlabeled corpus drops stray labels") {
        auto p = temp_file("attnvat_u.jsonl", "{\"text\":\"good\",\"label\":1}\n");
        Corpus c = load_jsonl(p, CorpusKind::unlabeled, v);
        REQUIRE_FALSE(c.examples[0].label.has_value());
    }
    SECTION("rationale spans parsed") {
        auto p = temp_file("attnvat_r.jsonl", "{\"text\":\"good bad\",\"label\":1,\"rationale\":[[0,1]]}\n");
        Corpus c = load_jsonl(p, CorpusKind::labeled, v);
        REQUIRE(c.examples[0].rationale == std::vector<Span>{{0, 1}});
    }
}

TEST_CASE("load_embeddings") {
    Vocabulary v = build_vocab(std::vector<std::string>{"alpha beta"}, 1, 100);
    SECTION("full coverage leaves no random rows") {
        auto p = temp_file("attnvat_e1.txt", "alpha 1 2 3\nbeta 4 5 6\n");
        Rng rng(1);
        EmbeddingTable t = load_embeddings(p, v, 3, rng);
        REQUIRE(t.matrix.at(2, 0) == 1.0);
        REQUIRE(t.matrix.at(3, 2) == 6.0);
        for (int j = 0; j < 3; ++j) REQUIRE(t.matrix.at(kPadId, j) == 0.0);
    }
    SECTION("header line tolerated") {
        auto p = temp_file("attnvat_e2.txt", "2 3\nalpha 1 2 3\n");
        Rng rng(1);
        EmbeddingTable t = load_embeddings(p, v, 3, rng);
        REQUIRE(t.matrix.at(2, 1) == 2.0);
    }
    SECTION("empty file randomizes everything but PAD") {
        auto p = temp_file("attnvat_e3.txt", "");
        Rng rng(1);
        EmbeddingTable t = load_embeddings(p, v, 3, rng);
        for (int j = 0; j < 3; ++j) REQUIRE(t.matrix.at(kPadId, j) == 0.0);
        bool any = false;
        for (int j = 0; j < 3; ++j) any = any || t.matrix.at(2, j) != 0.0;
        REQUIRE(any);
    }
    SECTION("short line reports its number") {
        auto p = temp_file("attnvat_e4.txt", "alpha 1 2 3\nbeta 4 5\n");
        Rng rng(1);
        REQUIRE_THROWS_WITH(load_embeddings(p, v, 3, rng), Catch::Matchers::ContainsSubstring(":2"));
    }
}

TEST_CASE("sample_unlabeled") {
    Corpus pool;
    pool.kind = CorpusKind::unlabeled;
    for (int i = 0; i < 20; ++i) {
        Example ex;
        ex.ids = {i + 2};
        pool.examples.push_back(ex);
    }
    SECTION("full sample is the pool in order") {
        Corpus s = sample_unlabeled(pool, 20, 99);
        for (int i = 0; i < 20; ++i) REQUIRE(s.examples[i].ids[0] == i + 2);
    }
    SECTION("empty sample") {
        REQUIRE(sample_unlabeled(pool, 0, 5).empty());
    }
    SECTION("deterministic in the seed") {
        Corpus a = sample_unlabeled(pool, 7, 123);
        Corpus b = sample_unlabeled(pool, 7, 123);
        for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.examples[i].ids == b.examples[i].ids);
        REQUIRE(a.provenance.sample_seed == 123);
        REQUIRE(a.provenance.sample_count == 7);
    }
    SECTION("oversampling is rejected") {
        REQUIRE_THROWS_AS(sample_unlabeled(pool, 21, 1), std::out_of_range);
    }
    SECTION("inclusion frequency is uniform over many trials") {
        const int trials = 10000;
        const std::size_t count = 5;
        std::vector<int> included(pool.size(), 0);
        for (int trial = 0; trial < trials; ++trial) {
            Corpus s = sample_unlabeled(pool, count, 1000 + static_cast<std::uint64_t>(trial));
            for (const auto& ex : s.examples) ++included[static_cast<std::size_t>(ex.ids[0] - 2)];
        }
        double p = static_cast<double>(count) / static_cast<double>(pool.size());
        double sigma = std::sqrt(p * (1 - p) / trials);
        for (int c : included) {
            double freq = static_cast<double>(c) / trials;
            REQUIRE(std::abs(freq - p) < 5 * sigma);
        }
    }
}

TEST_CASE("batches") {
    SECTION("sizes with a short tail") {
        auto b = batches(5, 2, false, 0);
        REQUIRE(b.size() == 3);
        REQUIRE(b[0].size() == 2);
        REQUIRE(b[2].size() == 1);
    }
    SECTION("unshuffled order is corpus order") {
        auto b = batches(4, 3, false, 7);
        REQUIRE(b[0] == std::vector<std::size_t>{0, 1, 2});
        REQUIRE(b[1] == std::vector<std::size_t>{3});
    }
    SECTION("epoch-derived shuffles differ across epochs but not reruns") {
        auto e1 = batches(16, 4, true, 42, 1);
        auto e2 = batches(16, 4, true, 42, 2);
        auto e1_again = batches(16, 4, true, 42, 1);
        REQUIRE(e1 == e1_again);
        REQUIRE(e1 != e2);
    }
    SECTION("batches partition the corpus") {
        for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
            auto b = batches(13, 4, true, seed, 5);
            std::vector<std::size_t> all;
            for (auto& batch : b) all.insert(all.end(), batch.begin(), batch.end());
            std::sort(all.begin(), all.end());
            std::vector<std::size_t> expect(13);
            std::iota(expect.begin(), expect.end(), std::size_t{0});
            REQUIRE(all == expect);
        }
    }
}
