#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "rswm/common/errors.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/corpus/corpus.hpp"
#include "rswm/training.hpp"

using namespace rswm;
using namespace rswm::training;
using model::Matrix;
using model::Transformer;

namespace {

const corpus::Corpus& small_corpus() {
    static const corpus::Corpus c = [] {
        corpus::CorpusConfig cc;
        cc.seed = 21;
        cc.sizes = {{"gagp", 24}, {"sit", 24}, {"vro", 12}, {"eval_tfsf", 0}, {"eval_stcqa", 0}};
        return corpus::build_corpus(cc);
    }();
    return c;
}

tokenizer::Tokenizer untrained_tokenizer() {
    tokenizer::TokenizerConfig tc;
    Rng rng(3);
    tokenizer::Mat codebook(tc.codebook_size, tc.latent_dim);
    for (Eigen::Index i = 0; i < codebook.size(); ++i) codebook.data()[i] = rng.normal(0.0, 0.5);
    return tokenizer::Tokenizer(tc, tokenizer::Network::init(tc, 4), codebook);
}

PolicyCheckpoint fresh_policy(std::uint64_t seed = 1) {
    const auto& c = small_corpus();
    auto vocab = model::build_vocabulary({&c.at("gagp"), &c.at("sit"), &c.at("vro")}, 64);
    model::ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.width = 16;
    mc.context = 400;
    mc.vocab_size = vocab.size();
    return model::init_policy(mc, vocab, untrained_tokenizer(), seed);
}

StageConfig quick(Stage s, int steps) {
    auto c = default_stage_config(s);
    c.steps = steps;
    c.batch_size = 2;
    c.peak_lr = 3e-3;
    c.log_every = 1;
    c.seed = 5;
    return c;
}

} // namespace

TEST_CASE("learning-rate schedule") {
    CHECK(lr_at(0, 100, 1e-3, 0.1) == 0.0);
    CHECK(lr_at(5, 100, 1e-3, 0.1) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(lr_at(10, 100, 1e-3, 0.1) == 1e-3);
    CHECK(lr_at(100, 100, 1e-3, 0.1) == 0.0);
    CHECK(lr_at(55, 100, 1e-3, 0.1) == doctest::Approx(0.5e-3).epsilon(1e-12));
    CHECK(lr_at(0, 50, 2e-4, 0.0) == 2e-4);
    double prev = 1.0;
    for (long s = 10; s <= 100; ++s) {
        const double lr = lr_at(s, 100, 1e-3, 0.1);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK_THROWS_AS(lr_at(0, 0, 1e-3, 0.1), InvalidInput);
}

TEST_CASE("group advantages") {
    const std::vector<double> r = {1, 2, 3, 4};
    const auto a = group_advantages(r);
    const double sd = std::sqrt(1.25);
    for (int i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx((r[i] - 2.5) / sd).epsilon(1e-14));
    double mean = 0, var = 0;
    for (double x : a) mean += x / 4;
    for (double x : a) var += (x - mean) * (x - mean) / 4;
    CHECK(std::abs(mean) < 1e-14);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-12));
    const std::vector<double> flat = {0.3, 0.3, 0.3};
    for (double x : group_advantages(flat)) CHECK(x == 0.0);
    const std::vector<double> one = {1.0};
    CHECK_THROWS_AS(group_advantages(one), InvalidInput);
    const std::vector<double> bad = {1.0, std::nan("")};
    CHECK_THROWS_AS(group_advantages(bad), InvalidInput);
}

TEST_CASE("exact token KL against a long-double oracle") {
    Rng rng(9);
    Matrix<double> p(6, 37), q(6, 37);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        p.data()[i] = rng.normal(0.0, 3.0);
        q.data()[i] = rng.normal(0.0, 3.0);
    }
    const auto kl = token_kl(p, q);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        long double zp = 0, zq = 0;
        for (Eigen::Index v = 0; v < p.cols(); ++v) {
            zp += std::exp(static_cast<long double>(p(r, v)));
            zq += std::exp(static_cast<long double>(q(r, v)));
        }
        long double k = 0;
        for (Eigen::Index v = 0; v < p.cols(); ++v) {
            const long double a = std::exp(static_cast<long double>(p(r, v))) / zp;
            const long double b = std::exp(static_cast<long double>(q(r, v))) / zq;
            k += a * std::log(a / b);
        }
        CHECK(kl[static_cast<std::size_t>(r)] == doctest::Approx(static_cast<double>(k)).epsilon(1e-10));
    }
    for (double k : token_kl(p, p)) CHECK(std::abs(k) < 1e-14);
    CHECK_THROWS_AS(token_kl(p, Matrix<double>(6, 36)), InvalidInput);
}

TEST_CASE("holdout split is deterministic and disjoint") {
    const auto [train, held] = holdout_split(95, 0.1);
    CHECK(held.size() == 9);
    CHECK(train.size() == 86);
    for (auto h : held) CHECK(h % 10 == 9);
    const auto [all, none] = holdout_split(7, 0.0);
    CHECK(all.size() == 7);
    CHECK(none.empty());

    // interleaved tasks: a plain index stride would only ever hold out one task
    std::vector<corpus::PromptRecord> mixed(40);
    for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i].task = i % 2 ? corpus::Task::stcqa : corpus::Task::tfsf;
    const auto [mt, mh] = holdout_split(mixed, 0.1);
    CHECK(mt.size() + mh.size() == 40);
    int held_tfsf = 0;
    for (auto h : mh) held_tfsf += mixed[h].task == corpus::Task::tfsf;
    CHECK(held_tfsf == 2);
    CHECK(mh.size() == 4);
}

TEST_CASE("stage configs are strict") {
    const auto g = default_stage_config(Stage::gagp);
    CHECK(g.peak_lr == 5e-4);
    CHECK(g.warmup_ratio == 0.10);
    const auto s = default_stage_config(Stage::sit);
    CHECK(s.peak_lr == 1e-4);
    CHECK(s.warmup_ratio == 0.02);
    auto v = default_stage_config(Stage::vro);
    CHECK(v.group_size == 8);
    CHECK(v.clip_eps == 0.2);
    CHECK(v.kl_weight == 0.05);
    CHECK(v.lambda == 0.2);
    v.steps = 7;
    v.lambda = 0.0;
    const auto back = stage_config_from_json(to_json(v), Stage::vro);
    CHECK(back.steps == 7);
    CHECK(back.lambda == 0.0);
    CHECK(to_json(back) == to_json(v));
    CHECK_THROWS_AS(stage_config_from_json({{"peak_lrr", 1e-3}}, Stage::sit), ConfigError);
    CHECK_THROWS_AS(stage_config_from_json({{"group_size", 8}}, Stage::sit), ConfigError);
    CHECK_THROWS_AS(stage_config_from_json({{"group_size", 1}}, Stage::vro), ConfigError);
    CHECK_THROWS_AS(stage_config_from_json({{"stage", "sit"}}, Stage::gagp), ConfigError);
    CHECK_THROWS_AS(stage_config_from_json({{"batch_size", "8"}}, Stage::gagp), ConfigError);
    CHECK_THROWS_AS(stage_config_from_json({{"judge", "external"}}, Stage::vro), ConfigError);
}

TEST_CASE("pre-training contract") {
    const auto& c = small_corpus();
    const auto p0 = fresh_policy();
    const auto cfg = quick(Stage::gagp, 30);
    CHECK_THROWS_AS(run_gagp(p0, {}, cfg), InvalidInput);
    CHECK_THROWS_AS(run_gagp(p0, c.at("sit"), cfg), InvalidInput);
    CHECK_THROWS_AS(run_gagp(p0, c.at("gagp"), quick(Stage::sit, 3)), ConfigError);

    const auto a = run_gagp(p0, c.at("gagp"), cfg);
    CHECK(a.checkpoint.stage == Stage::gagp);
    CHECK(a.steps == 30);
    CHECK(a.log.size() == 30);
    CHECK(a.log.back()["loss"].get<double>() < a.log.front()["loss"].get<double>());
    CHECK(std::isfinite(a.validation_loss));
    CHECK(a.checkpoint.info["validation_records"] == 2);

    const auto b = run_gagp(p0, c.at("gagp"), cfg);
    CHECK(a.checkpoint.content_hash() == b.checkpoint.content_hash());
    auto other = cfg;
    other.seed = 6;
    CHECK(run_gagp(p0, c.at("gagp"), other).checkpoint.content_hash() != a.checkpoint.content_hash());

    CHECK_THROWS_AS(run_gagp(a.checkpoint, c.at("gagp"), cfg), StageOrderError);

    auto ablate = cfg;
    ablate.drop_metadata = true;
    const auto d = run_gagp(p0, c.at("gagp"), ablate);
    CHECK(d.checkpoint.content_hash() != a.checkpoint.content_hash());
}

TEST_CASE("instruction tuning contract") {
    const auto& c = small_corpus();
    const auto p0 = fresh_policy();
    const auto gagp = run_gagp(p0, c.at("gagp"), quick(Stage::gagp, 2)).checkpoint;
    const auto cfg = quick(Stage::sit, 20);
    CHECK_THROWS_AS(run_sit(gagp, c.at("gagp"), cfg), InvalidInput);
    CHECK_THROWS_AS(run_sit(gagp, {}, cfg), InvalidInput);
    const auto sit = run_sit(gagp, c.at("sit"), cfg);
    CHECK(sit.checkpoint.stage == Stage::sit);
    CHECK(sit.warnings.empty());
    CHECK(sit.checkpoint.info["start_hash"] == gagp.content_hash());
    CHECK(sit.log.back()["loss"].get<double>() < sit.log.front()["loss"].get<double>());
    CHECK(run_sit(p0, c.at("sit"), cfg).checkpoint.stage == Stage::sit);
    CHECK_THROWS_AS(run_sit(sit.checkpoint, c.at("sit"), cfg), StageOrderError);

    std::vector<corpus::PromptRecord> only_qa;
    for (const auto& r : c.at("sit"))
        if (r.task == corpus::Task::stcqa) only_qa.push_back(r);
    const auto single = run_sit(gagp, only_qa, quick(Stage::sit, 2));
    CHECK(single.warnings.size() == 1);
}

namespace {

// Policy over a 6-word vocabulary with a fixed prompt, for exact gradient checks.
struct Toy {
    model::ModelConfig config;
    Transformer<double> policy;
    Transformer<double> reference;
    std::vector<int> prompt = {1, 4, 7, 9};

    Toy() {
        config.layers = 1;
        config.heads = 2;
        config.width = 8;
        config.context = 12;
        config.vocab_size = 11;
        policy = Transformer<double>(config, 3);
        reference = Transformer<double>(config, 4);
    }
};

GroupRollout one_token_group(const std::vector<int>& prompt, const std::vector<int>& tokens, const std::vector<double>& rewards) {
    GroupRollout g;
    g.prompt = prompt;
    for (int t : tokens) {
        g.completions.push_back({t});
        g.choice_mask.push_back({1});
    }
    g.rewards = rewards;
    g.advantages = group_advantages(rewards);
    return g;
}

} // namespace

TEST_CASE("grpo gradient equals REINFORCE with a group baseline") {
    Toy t;
    const auto g = one_token_group(t.prompt, {2, 5, 5, 8}, {1.0, 0.0, 0.5, 2.0});
    auto cfg = default_stage_config(Stage::vro);
    cfg.kl_weight = 0.0;
    auto grads = t.policy.zero_grads();
    grpo_group_gradient(t.policy, t.reference, g, cfg, 1.0, grads);

    // d/db of -(1/G) sum_i A_i log softmax(z)[o_i] is (1/G) sum_i A_i (p - e_{o_i})
    const auto lp = t.policy.target_log_softmax([&] {
        auto ids = t.prompt;
        ids.push_back(0);
        return ids;
    }(), static_cast<int>(t.prompt.size()));
    Eigen::RowVectorXd expect = Eigen::RowVectorXd::Zero(t.config.vocab_size);
    for (std::size_t i = 0; i < g.completions.size(); ++i) {
        Eigen::RowVectorXd e = lp.row(0).array().exp();
        e(g.completions[i][0]) -= 1.0;
        expect += g.advantages[i] * e / static_cast<double>(g.completions.size());
    }
    const auto& gb = grads.back();
    for (int v = 0; v < t.config.vocab_size; ++v) CHECK(gb(0, v) == doctest::Approx(expect(v)).epsilon(1e-12));

    // the KL term has zero gradient when the policy equals the reference
    cfg.kl_weight = 0.05;
    auto same = t.policy.zero_grads();
    grpo_group_gradient(t.policy, t.policy, g, cfg, 1.0, same);
    for (int v = 0; v < t.config.vocab_size; ++v) CHECK(same.back()(0, v) == doctest::Approx(expect(v)).epsilon(1e-10));
}

TEST_CASE("zero-advantage groups contribute no policy gradient") {
    Toy t;
    const auto g = one_token_group(t.prompt, {2, 5, 8}, {0.7, 0.7, 0.7});
    auto cfg = default_stage_config(Stage::vro);
    cfg.kl_weight = 0.0;
    auto grads = t.policy.zero_grads();
    grpo_group_gradient(t.policy, t.reference, g, cfg, 1.0, grads);
    for (const auto& m : grads) CHECK(m.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("clipped ratios and forced tokens carry no policy gradient") {
    Toy t;
    auto g = one_token_group(t.prompt, {2, 5}, {1.0, 0.0});
    auto cfg = default_stage_config(Stage::vro);
    cfg.kl_weight = 0.0;
    const auto lp2 = t.policy.sequence_logprobs(std::vector<int>{1, 4, 7, 9, 2}, 4, 5)[0];
    const auto lp5 = t.policy.sequence_logprobs(std::vector<int>{1, 4, 7, 9, 5}, 4, 5)[0];
    // A > 0 with ratio 1.5 and A < 0 with ratio 0.5: both outside the clip range
    g.old_logprobs = {{lp2 - std::log(1.5)}, {lp5 - std::log(0.5)}};
    auto grads = t.policy.zero_grads();
    grpo_group_gradient(t.policy, t.reference, g, cfg, 1.0, grads);
    for (const auto& m : grads) CHECK(m.cwiseAbs().maxCoeff() == 0.0);

    g.old_logprobs.clear();
    g.choice_mask = {{0}, {0}};
    auto masked = t.policy.zero_grads();
    grpo_group_gradient(t.policy, t.reference, g, cfg, 1.0, masked);
    for (const auto& m : masked) CHECK(m.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("KL penalty gradient matches finite differences") {
    Toy t;
    GroupRollout g;
    g.prompt = t.prompt;
    g.completions = {{3, 6, 2}, {10, 1}};
    g.choice_mask = {{1, 1, 1}, {1, 1}};
    g.rewards = {0.0, 0.0};
    g.advantages = {0.0, 0.0};
    auto cfg = default_stage_config(Stage::vro);
    cfg.kl_weight = 1.0;
    auto grads = t.policy.zero_grads();
    const double mean_kl = grpo_group_gradient(t.policy, t.reference, g, cfg, 1.0, grads);
    CHECK(mean_kl > 0.0);

    auto penalty = [&](const Transformer<double>& m) {
        double f = 0.0;
        for (const auto& c : g.completions) {
            auto ids = g.prompt;
            ids.insert(ids.end(), c.begin(), c.end());
            const int tb = static_cast<int>(g.prompt.size());
            const auto kl = token_kl(m.target_log_softmax(ids, tb), t.reference.target_log_softmax(ids, tb));
            for (double k : kl) f += k / (static_cast<double>(c.size()) * 2.0);
        }
        return f;
    };
    const double h = 1e-6;
    int checked = 0;
    for (std::size_t k = 0; k < t.policy.params().size(); k += 3) {
        auto& p = t.policy.params()[k];
        for (Eigen::Index i = 0; i < std::min<Eigen::Index>(p.size(), 4); ++i) {
            const double keep = p.data()[i];
            p.data()[i] = keep + h;
            const double up = penalty(t.policy);
            p.data()[i] = keep - h;
            const double down = penalty(t.policy);
            p.data()[i] = keep;
            const double fd = (up - down) / (2 * h);
            CHECK(grads[k].data()[i] == doctest::Approx(fd).epsilon(1e-4).scale(1e-5));
            ++checked;
        }
    }
    CHECK(checked > 10);
}

TEST_CASE("verifiable optimization contract") {
    const auto& c = small_corpus();
    const auto p0 = fresh_policy();
    const auto sit = run_sit(p0, c.at("sit"), quick(Stage::sit, 2)).checkpoint;
    auto cfg = quick(Stage::vro, 2);
    cfg.group_size = 2;
    cfg.max_new_tokens = 8;
    cfg.peak_lr = 1e-3;

    // a reward source that never needs the network: question answering only, builtin judge
    std::vector<corpus::PromptRecord> qa;
    for (const auto& r : c.at("vro"))
        if (r.task == corpus::Task::stcqa) qa.push_back(r);
    REQUIRE(qa.size() >= 2);
    const RewardSource none{};
    CHECK_THROWS_AS(run_vro(sit, p0, qa, none, cfg), StageOrderError);
    CHECK_THROWS_AS(run_vro(p0, sit, qa, none, cfg), StageOrderError);
    CHECK_THROWS_AS(run_vro(sit, sit, {}, none, cfg), InvalidInput);
    CHECK_THROWS_AS(run_vro(sit, sit, c.at("gagp"), none, cfg), InvalidInput);

    const auto a = run_vro(sit, sit, qa, none, cfg);
    const auto b = run_vro(sit, sit, qa, none, cfg);
    CHECK(a.checkpoint.stage == Stage::vro);
    CHECK(a.checkpoint.info["completed_steps"] == 2);
    CHECK(a.checkpoint.info["resumable"] == false);
    CHECK(a.checkpoint.content_hash() == b.checkpoint.content_hash());
    CHECK(a.log.front().contains("reward_stcqa"));
    CHECK(a.log.front()["kl"].get<double>() == doctest::Approx(0.0).scale(1e-9));

    // a finished run resumes as a no-op
    const auto again = run_vro(a.checkpoint, sit, qa, none, cfg);
    CHECK(again.steps == 0);
    CHECK(again.checkpoint.content_hash() == a.checkpoint.content_hash());

    // forecasting prompts need an embedder
    std::vector<corpus::PromptRecord> tf;
    for (const auto& r : c.at("vro"))
        if (r.task == corpus::Task::tfsf) tf.push_back(r);
    REQUIRE(!tf.empty());
    CHECK_THROWS_AS(run_vro(sit, sit, tf, none, cfg), InvalidInput);
}

TEST_CASE("judge transport failure leaves a resumable checkpoint") {
    const auto& c = small_corpus();
    const auto sit = run_sit(fresh_policy(), c.at("sit"), quick(Stage::sit, 1)).checkpoint;
    std::vector<corpus::PromptRecord> qa;
    for (const auto& r : c.at("vro"))
        if (r.task == corpus::Task::stcqa) qa.push_back(r);

    ChatClientConfig dead;
    dead.endpoint = "http://127.0.0.1:1/v1/chat/completions";
    dead.max_retries = 0;
    dead.backoff_ms = 0;
    dead.timeout_seconds = 1;
    rewards::ExternalJudge judge(dead);
    auto cfg = quick(Stage::vro, 2);
    cfg.group_size = 2;
    cfg.max_new_tokens = 4;
    cfg.judge = "external";
    cfg.judge_client = dead;
    const auto path = std::filesystem::temp_directory_path() / "rswm_test_vro_resume.ckpt";
    std::filesystem::remove(path);
    cfg.resume_path = path;
    CHECK_THROWS_AS(run_vro(sit, sit, qa, RewardSource{nullptr, &judge}, cfg), TransportError);
    REQUIRE(std::filesystem::exists(path));
    const auto resume = PolicyCheckpoint::load(path);
    CHECK(resume.stage == Stage::vro);
    CHECK(resume.info["completed_steps"] == 0);
    CHECK(resume.info["resumable"] == true);

    // resuming with the builtin judge finishes the schedule
    cfg.judge = "builtin";
    const auto done = run_vro(resume, sit, qa, RewardSource{}, cfg);
    CHECK(done.steps == 2);
    CHECK(done.checkpoint.info["completed_steps"] == 2);
    std::filesystem::remove(path);
}

TEST_CASE("a large KL weight keeps the policy near the reference") {
    const auto& c = small_corpus();
    const auto p0 = fresh_policy();
    const auto sit = run_sit(p0, c.at("sit"), quick(Stage::sit, 2)).checkpoint;
    // start from a policy that differs from the reference
    auto drifted = sit;
    Rng rng(4);
    for (auto& p : drifted.model.params())
        for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += static_cast<float>(rng.normal(0.0, 0.02));
    std::vector<corpus::PromptRecord> qa;
    for (const auto& r : c.at("vro"))
        if (r.task == corpus::Task::stcqa) qa.push_back(r);
    auto cfg = quick(Stage::vro, 4);
    cfg.group_size = 2;
    cfg.max_new_tokens = 8;
    cfg.kl_weight = 1e3;
    cfg.peak_lr = 1e-3;
    const double before = mean_policy_kl(drifted, sit, qa, 8);
    const auto after = run_vro(drifted, sit, qa, RewardSource{}, cfg);
    CHECK(before > 0.0);
    CHECK(mean_policy_kl(after.checkpoint, sit, qa, 8) <= before * 1.05);
}

TEST_CASE("stages overfit tiny corpora") {
    const auto& c = small_corpus();
    const auto p0 = fresh_policy();
    const std::vector<corpus::PromptRecord> one = {c.at("gagp")[0]};
    auto g = quick(Stage::gagp, 200);
    g.peak_lr = 1e-2;
    g.batch_size = 1;
    g.holdout_fraction = 0.0;
    const model::AssembleOptions stage1{model::SystemPrompt::stage1, false};
    const double before = mean_loss(p0, one, stage1);
    const auto gagp = run_gagp(p0, one, g);
    CHECK(mean_loss(gagp.checkpoint, one, stage1) < 0.1 * before);

    std::vector<corpus::PromptRecord> two;
    for (auto task : {corpus::Task::tfsf, corpus::Task::stcqa})
        for (const auto& r : c.at("sit"))
            if (r.task == task) {
                two.push_back(r);
                break;
            }
    REQUIRE(two.size() == 2);
    auto s = quick(Stage::sit, 200);
    s.peak_lr = 1e-2;
    s.holdout_fraction = 0.0;
    const auto sit = run_sit(p0, two, s);
    for (const auto& r : two) {
        const std::vector<corpus::PromptRecord> just = {r};
        CHECK(mean_loss(sit.checkpoint, just, {}) < 0.1 * mean_loss(p0, just, {}));
    }
}

TEST_CASE("two-sample advantages") {
    const std::vector<double> r = {0.0, 1.0};
    const auto a = group_advantages(r);
    CHECK(a[0] == -1.0);
    CHECK(a[1] == 1.0);
    Rng rng(12);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> x(static_cast<std::size_t>(rng.uniform_int(2, 16)));
        for (auto& v : x) v = rng.normal(0.0, 5.0);
        double mean = 0.0;
        for (double v : group_advantages(x)) mean += v;
        CHECK(std::abs(mean / static_cast<double>(x.size())) <= 1e-9);
    }
}
