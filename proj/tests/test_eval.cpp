#include <catch2/catch_amalgamated.hpp>

#include "attnvat/eval.hpp"
#include "testutil.hpp"

using namespace attnvat;
using Catch::Approx;
using eval::ImportanceVector;
using eval::RationaleSpans;
using textdata::Span;
using testutil::tiny_params;

TEST_CASE("f1_score") {
    SECTION("perfect agreement with positives") {
        std::vector<int> v{1, 0, 1};
        REQUIRE(eval::f1_score(v, v) == 1.0);
    }
    SECTION("direct formula") {
        std::vector<int> preds{1, 1, 0}, golds{1, 0, 0};
        auto d = eval::f1_detail(preds, golds);
        REQUIRE(d.precision == 0.5);
        REQUIRE(d.recall == 1.0);
        REQUIRE(d.f1 == Approx(2.0 / 3.0).epsilon(1e-12));
    }
    SECTION("no positives anywhere is zero and flagged") {
        std::vector<int> zeros{0, 0};
        auto d = eval::f1_detail(zeros, zeros);
        REQUIRE(d.f1 == 0.0);
        REQUIRE(d.degenerate);
    }
    SECTION("length mismatch rejected") {
        std::vector<int> a{1}, b{1, 0};
        REQUIRE_THROWS_AS(eval::f1_score(a, b), std::invalid_argument);
    }
}

TEST_CASE("pearson") {
    SECTION("perfect linear") {
        std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8};
        REQUIRE(*eval::pearson(x, y) == Approx(1.0).epsilon(1e-12));
    }
    SECTION("perfect inverse") {
        std::vector<double> x{1, 2, 3}, y{5, 3, 1};
        REQUIRE(*eval::pearson(x, y) == Approx(-1.0).epsilon(1e-12));
    }
    SECTION("hand-computed value") {
        std::vector<double> x{1, 2, 3}, y{1, 1, 2};
        REQUIRE(*eval::pearson(x, y) == Approx(0.8660254037844386).epsilon(1e-12));
    }
    SECTION("constant vectors are undefined") {
        std::vector<double> x{1, 1, 1}, y{1, 2, 3};
        REQUIRE_FALSE(eval::pearson(x, y).has_value());
        REQUIRE_FALSE(eval::pearson(y, x).has_value());
    }
    SECTION("scale and shift invariance") {
        Rng rng(21);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<double> x(6), y(6);
            for (auto& v : x) v = rng.uniform(-3, 3);
            for (auto& v : y) v = rng.uniform(-3, 3);
            double a = rng.uniform(0.1, 5.0), b = rng.uniform(-10, 10);
            std::vector<double> xs(x);
            for (auto& v : xs) v = a * v + b;
            REQUIRE(*eval::pearson(xs, y) == Approx(*eval::pearson(x, y)).margin(1e-12));
            REQUIRE(*eval::pearson(x, y) == Approx(*eval::pearson(y, x)).margin(1e-12));
        }
    }
}

TEST_CASE("gradient_importance") {
    SECTION("zero decoder weight gives zero importance") {
        auto p = tiny_params(31, 10, 4, 3);
        p.decoder.weight = autodiff::Tensor::zeros({1, p.config.state_dim()});
        auto imp = eval::gradient_importance(p, std::vector<int>{2, 5, 7});
        for (double s : imp.scores) REQUIRE(s == 0.0);
    }
    SECTION("coinciding hidden states give equal importance") {
        auto p = tiny_params(32, 10, 4, 3);
        // Zeroed encoder weights collapse every hidden state to the same
        // point, so both copies of the token must matter equally.
        for (auto& [name, t] : p.named())
            if (name.rfind("fwd.", 0) == 0 || name.rfind("bwd.", 0) == 0) *t = autodiff::Tensor::zeros(t->shape());
        auto imp = eval::gradient_importance(p, std::vector<int>{4, 4});
        REQUIRE(imp.scores[0] == Approx(imp.scores[1]).margin(1e-12));
    }
    SECTION("matches finite-difference saliency") {
        auto p = tiny_params(33, 10, 4, 3);
        std::vector<int> ids{2, 6, 8};
        auto imp = eval::gradient_importance(p, ids);
        const double h = 1e-5;
        int d = p.config.embed_dim;
        for (std::size_t t = 0; t < ids.size(); ++t) {
            double norm_sq = 0.0;
            for (int j = 0; j < d; ++j) {
                auto logit_with = [&](double delta) {
                    autodiff::Tape tape;
                    auto leaves = model::register_params(tape, p, false);
                    std::vector<double> pert(ids.size() * static_cast<std::size_t>(d), 0.0);
                    pert[t * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] = delta;
                    autodiff::Tensor rt({static_cast<int>(ids.size()), d}, std::move(pert));
                    model::ForwardOptions opts;
                    opts.word_perturbation = &rt;
                    return model::forward(tape, leaves, p.config, ids, opts).logit.value();
                };
                double g = (logit_with(h) - logit_with(-h)) / (2 * h);
                norm_sq += g * g;
            }
            REQUIRE(imp.scores[t] == Approx(std::sqrt(norm_sq)).epsilon(1e-3));
        }
    }
}

TEST_CASE("attention_gradient_correlation") {
    auto p = tiny_params(34, 10, 4, 3);
    textdata::Corpus corpus;
    corpus.examples.push_back(testutil::example_of({2, 7}, 1));
    corpus.examples.push_back(testutil::example_of({5}, 0));  // length one, excluded
    corpus.examples.push_back(testutil::example_of({3, 8, 6}, 1));

    auto report = eval::attention_gradient_correlation(corpus, p);
    REQUIRE(report.per_example.size() == 3);
    REQUIRE_FALSE(report.per_example[1].has_value());
    REQUIRE(report.n_used + report.n_excluded == 3);

    SECTION("per-example values match a direct recomputation") {
        auto inf = model::infer(p, corpus.examples[2].ids);
        auto imp = eval::gradient_importance(p, corpus.examples[2].ids);
        auto direct = eval::pearson(inf.attention_weights, imp.scores);
        REQUIRE(report.per_example[2].has_value() == direct.has_value());
        if (direct) REQUIRE(*report.per_example[2] == Approx(*direct).margin(1e-15));
    }
    SECTION("two-token examples correlate exactly at one") {
        textdata::Corpus two;
        two.examples.push_back(testutil::example_of({2, 7}, 1));
        auto r = eval::attention_gradient_correlation(two, p);
        if (r.n_used == 1) {
            auto inf = model::infer(p, two.examples[0].ids);
            auto imp = eval::gradient_importance(p, two.examples[0].ids);
            double expected =
                (inf.attention_weights[0] - inf.attention_weights[1]) * (imp.scores[0] - imp.scores[1]) > 0 ? 1.0 : -1.0;
            REQUIRE(r.mean == Approx(expected).margin(1e-12));
        }
    }
}

TEST_CASE("extract_hard_rationale") {
    SECTION("uniform importance selects everything") {
        ImportanceVector imp{{0.2, 0.2, 0.2, 0.2}, eval::ImportanceSource::attention};
        REQUIRE(eval::extract_hard_rationale(imp, 0.8) == RationaleSpans{{0, 4}});
    }
    SECTION("one dominant token") {
        ImportanceVector imp{{0.1, 0.1, 0.9, 0.1, 0.1}, eval::ImportanceSource::attention};
        REQUIRE(eval::extract_hard_rationale(imp, 0.8) == RationaleSpans{{2, 3}});
    }
    SECTION("run construction at the median") {
        ImportanceVector imp{{0, 0, 9, 9, 0}, eval::ImportanceSource::attention};
        REQUIRE(eval::extract_hard_rationale(imp, 0.5) == RationaleSpans{{2, 4}});
    }
    SECTION("quantile bounds enforced") {
        ImportanceVector imp{{1.0}, eval::ImportanceSource::attention};
        REQUIRE_THROWS_AS(eval::extract_hard_rationale(imp, 0.0), std::invalid_argument);
        REQUIRE_THROWS_AS(eval::extract_hard_rationale(imp, 1.0), std::invalid_argument);
    }
}

TEST_CASE("hard_rationale_metrics") {
    SECTION("identical spans") {
        RationaleSpans s{{1, 3}, {5, 6}};
        auto m = eval::hard_rationale_metrics(s, s, 8);
        REQUIRE(m.iou_f1 == 1.0);
        REQUIRE(m.token_f1 == 1.0);
    }
    SECTION("half-overlap counts as a match") {
        RationaleSpans pred{{0, 2}}, gold{{0, 1}};
        auto m = eval::hard_rationale_metrics(pred, gold, 4);
        REQUIRE(m.iou_f1 == 1.0);
        REQUIRE(m.token_f1 == Approx(2.0 / 3.0).epsilon(1e-12));
    }
    SECTION("disjoint spans score zero") {
        RationaleSpans pred{{0, 1}}, gold{{2, 3}};
        auto m = eval::hard_rationale_metrics(pred, gold, 4);
        REQUIRE(m.iou_f1 == 0.0);
        REQUIRE(m.token_f1 == 0.0);
    }
    SECTION("overlapping spans on one side are a contract error") {
        RationaleSpans bad{{0, 3}, {2, 5}}, gold{{0, 1}};
        REQUIRE_THROWS_AS(eval::hard_rationale_metrics(bad, gold, 6), std::invalid_argument);
    }
    SECTION("span order does not matter after sorting") {
        RationaleSpans a{{0, 1}, {3, 4}}, gold{{0, 1}, {3, 4}};
        auto m = eval::hard_rationale_metrics(a, gold, 5);
        REQUIRE(m.iou_f1 == 1.0);
    }
}

TEST_CASE("soft_rationale_metrics") {
    SECTION("perfect ranking") {
        std::vector<double> scores{0.9, 0.1, 0.8, 0.2};
        std::vector<int> mask{1, 0, 1, 0};
        auto m = eval::soft_rationale_metrics(scores, mask);
        REQUIRE(m);
        REQUIRE(m->roc_auc == 1.0);
        REQUIRE(m->ap == 1.0);
        REQUIRE(m->auprc == Approx(1.0).margin(1e-12));
    }
    SECTION("uniform scores give the tie convention") {
        std::vector<double> scores{0.5, 0.5, 0.5, 0.5};
        std::vector<int> mask{1, 0, 1, 0};
        auto m = eval::soft_rationale_metrics(scores, mask);
        REQUIRE(m->roc_auc == 0.5);
    }
    SECTION("degenerate masks are excluded") {
        std::vector<double> scores{0.5, 0.6};
        std::vector<int> ones{1, 1}, zeros{0, 0};
        REQUIRE_FALSE(eval::soft_rationale_metrics(scores, ones).has_value());
        REQUIRE_FALSE(eval::soft_rationale_metrics(scores, zeros).has_value());
    }
    SECTION("worst ranking") {
        std::vector<double> scores{0.1, 0.9};
        std::vector<int> mask{1, 0};
        auto m = eval::soft_rationale_metrics(scores, mask);
        REQUIRE(m->roc_auc == 0.0);
    }
    SECTION("Mann-Whitney equals explicit curve integration") {
        Rng rng(55);
        for (int trial = 0; trial < 100; ++trial) {
            std::size_t n = 3 + rng.below(10);
            std::vector<double> scores(n);
            std::vector<int> mask(n);
            // Quantized scores force plenty of ties.
            for (auto& s : scores) s = static_cast<double>(rng.below(5)) / 4.0;
            bool has0 = false, has1 = false;
            for (auto& m : mask) {
                m = static_cast<int>(rng.below(2));
                (m == 1 ? has1 : has0) = true;
            }
            if (!has0 || !has1) continue;
            auto m = eval::soft_rationale_metrics(scores, mask);
            REQUIRE(m->roc_auc == Approx(testutil::roc_auc_by_curve(scores, mask)).margin(1e-9));
        }
    }
    SECTION("metrics stay inside the unit interval") {
        Rng rng(56);
        for (int trial = 0; trial < 50; ++trial) {
            std::size_t n = 4 + rng.below(8);
            std::vector<double> scores(n);
            std::vector<int> mask(n);
            for (auto& s : scores) s = rng.uniform01();
            mask[0] = 1;
            mask[1] = 0;
            for (std::size_t i = 2; i < n; ++i) mask[i] = static_cast<int>(rng.below(2));
            auto m = eval::soft_rationale_metrics(scores, mask);
            REQUIRE(m->auprc >= 0.0);
            REQUIRE(m->auprc <= 1.0);
            REQUIRE(m->ap >= 0.0);
            REQUIRE(m->ap <= 1.0);
            REQUIRE(m->roc_auc >= 0.0);
            REQUIRE(m->roc_auc <= 1.0);
        }
    }
}

TEST_CASE("rationale_metrics over a corpus") {
    auto p = tiny_params(41, 10, 4, 3);
    textdata::Corpus corpus;
    auto ex = testutil::example_of({2, 5, 7, 8}, 1);
    ex.rationale = {{1, 2}};
    corpus.examples.push_back(ex);
    auto report = eval::rationale_metrics(corpus, p, 0.8, eval::ImportanceSource::attention);
    REQUIRE(report.n_examples == 1);
    REQUIRE(report.quantile == 0.8);

    SECTION("missing rationale is a data error with the index") {
        corpus.examples.push_back(testutil::example_of({2, 3}, 0));
        REQUIRE_THROWS_WITH(eval::rationale_metrics(corpus, p, 0.8, eval::ImportanceSource::attention),
                            Catch::Matchers::ContainsSubstring("example 1"));
    }
}
