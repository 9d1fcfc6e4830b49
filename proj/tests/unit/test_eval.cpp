#include <doctest.h>

#include <cmath>
#include <functional>

#include "rswm/common/errors.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/eval.hpp"

using namespace rswm;
using namespace rswm::eval;

namespace {

Eigen::MatrixXd column(std::initializer_list<double> v) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), 1);
    Eigen::Index i = 0;
    for (double x : v) m(i++, 0) = x;
    return m;
}

// Independent LCS by memoized recursion.
int lcs_oracle(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
    std::function<int(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> int {
        if (i == a.size() || j == b.size()) return 0;
        int& m = memo[i][j];
        if (m >= 0) return m;
        if (a[i] == b[j]) return m = 1 + go(i + 1, j + 1);
        return m = std::max(go(i + 1, j), go(i, j + 1));
    };
    return go(0, 0);
}

const corpus::Corpus& eval_corpus() {
    static const corpus::Corpus c = [] {
        corpus::CorpusConfig cc;
        cc.seed = 8;
        cc.sizes = {{"gagp", 0}, {"sit", 800}, {"vro", 0}, {"eval_tfsf", 12}, {"eval_stcqa", 12}};
        return corpus::build_corpus(cc);
    }();
    return c;
}

const rewards::Embedder& small_embedder() {
    static const rewards::Embedder e = [] {
        std::vector<rewards::ImageText> pairs;
        for (const auto& r : eval_corpus().at("sit"))
            for (const auto& o : r.images) pairs.push_back({o.image, o.caption});
        rewards::EmbedderConfig c;
        c.steps = 50;
        return rewards::train_embedder(pairs, c, 1);
    }();
    return e;
}

} // namespace

TEST_CASE("fid closed forms") {
    Rng rng(2);
    Eigen::MatrixXd a(50, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    CHECK(fid(a, a) <= 1e-6);

    // sample mean 0 / 1, unbiased variance 1
    const double h = 1.0 / std::sqrt(2.0);
    CHECK(fid(column({-h, h}), column({1 - h, 1 + h})) == doctest::Approx(1.0).epsilon(1e-6));
    // equal means, sigma 1 vs 2
    CHECK(fid(column({-h, h}), column({-2 * h, 2 * h})) == doctest::Approx(1.0).epsilon(1e-6));

    CHECK_THROWS_AS(fid(column({1.0}), column({1.0, 2.0})), InvalidInput);
    CHECK_THROWS_AS(fid(a, Eigen::MatrixXd::Zero(5, 3)), InvalidInput);
}

TEST_CASE("fid is symmetric and non-negative") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const int d = static_cast<int>(rng.uniform_int(1, 6));
        // few samples make the covariances singular
        const int n = static_cast<int>(rng.uniform_int(2, 9)), m = static_cast<int>(rng.uniform_int(2, 9));
        Eigen::MatrixXd a(n, d), b(m, d);
        for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal(0.0, rng.uniform() * 3);
        for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.normal(1.0, rng.uniform() * 3);
        const double ab = fid(a, b), ba = fid(b, a);
        CHECK(ab >= 0.0);
        CHECK(std::abs(ab - ba) <= 1e-8 * std::max(1.0, ab));
    }
}

TEST_CASE("bleu1 cases") {
    CHECK(bleu1("the farmland has become buildings", "the farmland has become buildings") == 1.0);
    CHECK(bleu1("a b", "c d") == 0.0);
    CHECK(bleu1("a b", "a c") == 0.5);
    // clipping: one "the" in the reference
    CHECK(bleu1("the the the", "the cat sat") == doctest::Approx(1.0 / 3.0));
    // brevity penalty for a short hypothesis
    CHECK(bleu1("a", "a b") == doctest::Approx(std::exp(1.0 - 2.0)));
    CHECK(bleu1("", "a") == 0.0);
    CHECK(bleu1("The Farmland  ", "the farmland") == 1.0);
}

TEST_CASE("rouge-l matches an independent LCS oracle") {
    CHECK(rouge_l("a b c", "a b c") == 1.0);
    CHECK(rouge_l("a b", "c d") == 0.0);
    CHECK(rouge_l("A B c ", "a b c") == 1.0);
    const std::vector<std::string> words = {"the", "farmland", "north", "has", "become", "buildings", "water", "."};
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        auto sentence = [&] {
            std::vector<std::string> s;
            const int n = static_cast<int>(rng.uniform_int(1, 14));
            for (int i = 0; i < n; ++i) s.push_back(words[static_cast<std::size_t>(rng.uniform_int(0, 7))]);
            return s;
        };
        const auto h = sentence(), r = sentence();
        std::string hs, rs;
        for (const auto& w : h) hs += w + " ";
        for (const auto& w : r) rs += w + " ";
        const double l = lcs_oracle(h, r);
        double expect = 0.0;
        if (l > 0) {
            const double p = l / h.size(), rc = l / r.size(), b2 = 1.2 * 1.2;
            expect = (1 + b2) * p * rc / (rc + b2 * p);
        }
        CHECK(rouge_l(hs, rs) == doctest::Approx(expect).epsilon(1e-12));
    }
    CHECK(rouge_l("a b c", "a c") == doctest::Approx((1 + 1.44) * (2.0 / 3.0) * 1.0 / (1.0 + 1.44 * (2.0 / 3.0))));
}

TEST_CASE("oracle pass-through scores perfectly") {
    const auto& c = eval_corpus();
    EvalConfig cfg;
    cfg.oracle = true;
    const auto report = evaluate_suite(nullptr, small_embedder(), c.at("eval_tfsf"), c.at("eval_stcqa"), cfg, "oracle");
    CHECK(report.tfsf.count == 12);
    CHECK(report.stcqa.count == 12);
    CHECK(report.tfsf_samples.size() == c.at("eval_tfsf").size());
    CHECK(report.tfsf.fid <= 1e-6);
    CHECK(report.stcqa.bleu1 == 1.0);
    CHECK(report.stcqa.rouge_l == 1.0);

    auto copy = report;
    recompute(copy);
    CHECK(copy.tfsf.fid == report.tfsf.fid);
    CHECK(copy.stcqa.judge_total == report.stcqa.judge_total);

    const auto back = report_from_json(to_json(report));
    CHECK(to_json(back).dump() == to_json(report).dump());
    CHECK(to_csv(back) == to_csv(report));

    auto broken = to_json(report);
    broken["stcqa"]["bleu1"] = 0.25;
    CHECK_THROWS_AS(report_from_json(broken), FormatError);
    CHECK_THROWS_AS(report_from_json(nlohmann::json::object()), FormatError);

    const auto table = to_table({report});
    CHECK(table.find("proxy-FID") != std::string::npos);
    CHECK(table.find("B-1") != std::string::npos);
    CHECK(table.find("R-L") != std::string::npos);
    CHECK(to_csv(report).rfind("task,id,cossim,s_ir,reward,bleu1,rouge_l,judge_total,length\n", 0) == 0);

    CHECK_THROWS_AS(evaluate_suite(nullptr, small_embedder(), c.at("eval_tfsf"), {}, EvalConfig{}), InvalidInput);
    CHECK_THROWS_AS(evaluate_suite(nullptr, small_embedder(), c.at("eval_stcqa"), {}, cfg), InvalidInput);
}

TEST_CASE("vocabulary mismatch is rejected") {
    const auto& c = eval_corpus();
    tokenizer::TokenizerConfig tc;
    Rng rng(3);
    tokenizer::Mat codebook(tc.codebook_size, tc.latent_dim);
    for (Eigen::Index i = 0; i < codebook.size(); ++i) codebook.data()[i] = rng.normal(0.0, 0.5);
    tokenizer::Tokenizer tok(tc, tokenizer::Network::init(tc, 4), codebook);
    model::Vocabulary vocab(64, {"the", "farmland"});
    model::ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.width = 8;
    mc.context = 400;
    mc.vocab_size = vocab.size();
    const auto p = model::init_policy(mc, vocab, tok, 1);
    CHECK_THROWS_AS(evaluate_suite(&p, small_embedder(), c.at("eval_tfsf"), {}, EvalConfig{}), InvalidInput);
}

TEST_CASE("eval config is strict") {
    EvalConfig c;
    c.limit_tfsf = 3;
    c.mode = model::DecodeMode::top_k;
    c.top_k = 5;
    CHECK(to_json(eval_config_from_json(to_json(c))) == to_json(c));
    CHECK_THROWS_AS(eval_config_from_json({{"limit", 3}}), ConfigError);
    CHECK_THROWS_AS(eval_config_from_json({{"mode", "beam"}}), ConfigError);
    CHECK_THROWS_AS(eval_config_from_json({{"max_new_tokens", 0}}), ConfigError);
}
