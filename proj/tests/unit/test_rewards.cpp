#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "rswm/common/errors.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/corpus/caption.hpp"
#include "rswm/corpus/corpus.hpp"
#include "rswm/rewards/embedder.hpp"
#include "rswm/rewards/judge.hpp"
#include "rswm/worldgen.hpp"

using namespace rswm;
using namespace rswm::rewards;

namespace {

std::vector<ImageText> observation_pairs(int n, std::uint64_t seed) {
    std::vector<ImageText> out;
    for (int i = 0; i < n; ++i) {
        const auto s = worldgen::generate_scene(seed, i);
        const auto m = worldgen::sample_acquisition(s, static_cast<std::uint64_t>(i));
        out.push_back({quantize_rgb8(worldgen::render_observation(s, m)), corpus::describe_observation(s, m)});
    }
    return out;
}

const std::vector<corpus::PromptRecord>& qa_records() {
    static const auto records = [] {
        corpus::CorpusConfig c;
        c.seed = 17;
        c.sizes = {{"gagp", 0}, {"sit", 0}, {"vro", 0}, {"eval_tfsf", 0}, {"eval_stcqa", 40}};
        return corpus::build_corpus(c).at("eval_stcqa");
    }();
    return records;
}

JudgeContext context_of(const corpus::PromptRecord& r) { return {r.meta_source, r.meta_target, r.truth, r.target_text}; }

bool in_bounds(const JudgeVerdict& v) {
    double sum = 0;
    for (double s : v.scores) {
        if (s < 0 || s > kDimensionMax) return false;
        sum += s;
    }
    return v.total == sum && v.total >= 0 && v.total <= 100 && v.reward >= 0 && v.reward <= 1 && v.reward == judge_reward(v.total);
}

} // namespace

TEST_CASE("cosine basics") {
    const std::vector<double> v = {0.3, -1.2, 2.0}, neg = {-0.3, 1.2, -2.0}, e1 = {1, 0, 0}, e2 = {0, 1, 0}, zero = {0, 0, 0};
    CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine(v, neg) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(cosine(e1, e2) == 0.0);
    CHECK_THROWS_AS(cosine(v, zero), InvalidInput);
    CHECK_THROWS_AS(cosine(v, std::vector<double>{1, 2}), InvalidInput);
}

TEST_CASE("forecast reward arithmetic") {
    const auto r = combine_tfsf(0.6, 0.5, 0.2);
    CHECK(std::abs(r.r_tfsf - 0.70) <= 1e-12);
    CHECK(r.r_tfsf == r.s_it + r.lambda * r.s_ir);
    CHECK(combine_tfsf(0.37, 0.9, 0.0).r_tfsf == 0.37);
    CHECK_THROWS_AS(combine_tfsf(0.1, 0.1, -0.5), InvalidInput);
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), lam = rng.uniform(0.01, 2.0), eps = rng.uniform(1e-6, 0.1);
        CHECK(combine_tfsf(a + eps, b, lam).r_tfsf > combine_tfsf(a, b, lam).r_tfsf);
        CHECK(combine_tfsf(a, b + eps, lam).r_tfsf > combine_tfsf(a, b, lam).r_tfsf);
    }
}

TEST_CASE("embedder training contract") {
    EmbedderConfig c;
    c.steps = 60;
    c.hidden = 32;
    c.text_buckets = 256;
    const auto pairs = observation_pairs(1100, 5);
    const auto a = train_embedder(pairs, c, 9);
    const auto b = train_embedder(pairs, c, 9);
    CHECK(a.frozen());
    CHECK(a.to_bytes() == b.to_bytes());
    CHECK(a.holdout_pairs == 110);
    CHECK(a.loss_curve.back() < a.loss_curve.front());
    for (int i = 0; i < 20; ++i) {
        CHECK(std::abs(a.embed_image(pairs[static_cast<std::size_t>(i)].image).norm() - 1.0) <= 1e-6);
        CHECK(std::abs(a.embed_text(pairs[static_cast<std::size_t>(i)].text).norm() - 1.0) <= 1e-6);
    }
    const auto path = std::filesystem::temp_directory_path() / "rswm_test_embedder.bin";
    a.save(path);
    const auto loaded = Embedder::load(path);
    CHECK(loaded.to_bytes() == a.to_bytes());
    CHECK(loaded.embed_text(pairs[0].text) == a.embed_text(pairs[0].text));
    std::filesystem::remove(path);

    CHECK_THROWS_AS(train_embedder(observation_pairs(50, 1), c, 1), InvalidInput);
    CHECK(Embedder::text_features("Forest  in the north", c) == Embedder::text_features("forest in the north", c));
}

TEST_CASE("judge scores the reference highly and an empty answer at the floor") {
    for (const auto& r : qa_records()) {
        const auto ctx = context_of(r);
        const auto ref = judge_stcqa(r.target_text, ctx);
        CHECK(in_bounds(ref));
        CHECK(ref.total >= 90);
        CHECK(ref.reward >= 0.9);
        const auto empty = judge_stcqa("", ctx);
        CHECK(empty.total <= 10);
        CHECK(empty.reward <= 0.1);
        CHECK(judge_stcqa(r.target_text, ctx).total == ref.total);
    }
}

TEST_CASE("judge penalizes omissions, inventions and contradictions") {
    const corpus::PromptRecord* rec = nullptr;
    for (const auto& r : qa_records())
        if (!r.truth.changed.empty()) rec = &r;
    REQUIRE(rec != nullptr);
    const auto ctx = context_of(*rec);
    const auto facts = corpus::facts_from_truth(ctx.truth, ctx.meta_pre, ctx.meta_post);
    const double full = judge_stcqa(corpus::render_caption(facts), ctx).total;

    auto no_changes = facts;
    no_changes.changes.clear();
    CHECK(judge_stcqa(corpus::render_caption(no_changes), ctx).scores[0] == 0.0);

    auto lie = facts;
    lie.changes.push_back({worldgen::LandCover::water, worldgen::LandCover::road, {4}});
    CHECK(judge_stcqa(corpus::render_caption(lie), ctx).scores[0] < 20.0);

    auto flipped = facts;
    flipped.shadow->trend = facts.shadow->trend == corpus::ShadowTrend::longer ? corpus::ShadowTrend::shorter : corpus::ShadowTrend::longer;
    const auto v = judge_stcqa(corpus::render_caption(flipped), ctx);
    CHECK(v.scores[4] < 20.0);
    CHECK(v.total < full);

    auto wrong_time = facts;
    wrong_time.time->elapsed = facts.time->elapsed == corpus::Elapsed::several_years ? corpus::Elapsed::few_months : corpus::Elapsed::several_years;
    CHECK(judge_stcqa(corpus::render_caption(wrong_time), ctx).scores[2] == 10.0);
}

TEST_CASE("judge verdict bounds under fuzzing") {
    const auto& records = qa_records();
    const std::vector<std::string> pool = {"the",   "farmland", "has", "become", "buildings", "in", "north", "south", "remains", "unchanged",
                                           ".",     ",",        "forest", "water", "overall", "layout", "snow", "shadows", "longer", "sunlight",
                                           "shifts", "from",   "to",  "clear", "skies", "second", "image", "was", "taken", "later", "summer"};
    Rng rng(2024);
    for (int i = 0; i < 10000; ++i) {
        std::string s;
        const int n = static_cast<int>(rng.uniform_int(0, 40));
        for (int k = 0; k < n; ++k) {
            if (rng.bernoulli(0.8)) s += pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
            else s += static_cast<char>(rng.uniform_int(1, 255));
            s += rng.bernoulli(0.9) ? " " : "";
        }
        const auto v = judge_stcqa(s, context_of(records[static_cast<std::size_t>(i) % records.size()]));
        REQUIRE(in_bounds(v));
    }
    const auto forced = make_verdict({24, 24, 24, 24, 24}, "forced");
    CHECK(forced.total == 120);
    CHECK(forced.reward == 1.0);
    CHECK(judge_reward(-5) == 0.0);
}

TEST_CASE("external judge prompt and reply parsing") {
    const auto v = ExternalJudge::parse_reply("87#good coverage");
    CHECK(v.total == 87);
    CHECK(v.reward == doctest::Approx(0.87).epsilon(1e-12));
    CHECK(v.reason == "good coverage");
    CHECK(ExternalJudge::parse_reply("150#x").reward == 1.0);
    CHECK(ExternalJudge::parse_reply("  42.5#ok\n").total == 42.5);
    CHECK_THROWS_AS(ExternalJudge::parse_reply("n/a"), MalformedResponse);
    CHECK_THROWS_AS(ExternalJudge::parse_reply("high#x"), MalformedResponse);
    CHECK_THROWS_AS(ExternalJudge::parse_reply(""), MalformedResponse);

    const auto& r = qa_records()[0];
    const auto prompt = ExternalJudge::render_prompt("some answer .", context_of(r));
    CHECK(prompt.find(r.target_text) != std::string::npos);
    CHECK(prompt.find("some answer .") != std::string::npos);
    CHECK(prompt.find("score#reason") != std::string::npos);
    CHECK(prompt.find("{meta_tse}") == std::string::npos);
}
