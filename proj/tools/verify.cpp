#include "verify.hpp"

#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include "rswm/common/errors.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/corpus/corpus.hpp"
#include "rswm/eval.hpp"
#include "rswm/metadata.hpp"
#include "rswm/rewards/judge.hpp"
#include "rswm/training.hpp"

namespace rswm::cli {

namespace {

using Check = std::function<std::string()>; // empty string = pass

std::string metadata_tables() {
    using namespace metadata;
    const char* words[8] = {"north", "northeast", "east", "southeast", "south", "southwest", "west", "northwest"};
    for (int i = 0; i < 8; ++i)
        if (azimuth_sector(45.0 * i) != words[i]) return "azimuth anchor " + std::to_string(45 * i);
    if (hemisphere_of(1.0) != Hemisphere::northern || hemisphere_of(-1.0) != Hemisphere::southern) return "hemisphere sign";
    const Season north[12] = {Season::winter, Season::winter, Season::spring, Season::spring, Season::spring, Season::summer,
                              Season::summer, Season::summer, Season::autumn, Season::autumn, Season::autumn, Season::winter};
    for (int m = 1; m <= 12; ++m) {
        if (season_of(m, Hemisphere::northern) != north[m - 1]) return "northern season, month " + std::to_string(m);
        if (season_of(m, Hemisphere::southern) != north[(m + 5) % 12]) return "southern season, month " + std::to_string(m);
    }
    if (shadow_class(5) != ShadowClass::long_shadows || shadow_class(45) != ShadowClass::moderate || shadow_class(88) != ShadowClass::minimal)
        return "shadow anchors";
    return {};
}

std::string cloud_filter() {
    AcqMetadata m;
    m.cloud_cover = 0.90;
    if (!corpus::cloud_filter(m)) return "0.90 rejected";
    m.cloud_cover = 0.901;
    if (corpus::cloud_filter(m)) return "0.901 kept";
    return {};
}

std::string gradients() {
    model::ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.width = 8;
    c.context = 12;
    c.vocab_size = 13;
    model::Transformer<double> m(c, 3);
    Rng rng(1);
    model::TokenSequence seq;
    for (int i = 0; i < 10; ++i) seq.ids.push_back(static_cast<int>(rng.uniform_int(0, 12)));
    seq.target_begin = 4;
    auto grads = m.zero_grads();
    m.ar_loss(seq, &grads);
    double worst = 0.0;
    int probed = 0;
    for (std::size_t k = 0; k < m.params().size(); ++k) {
        auto& p = m.params()[k];
        for (Eigen::Index i = 0; i < p.size(); i += std::max<Eigen::Index>(1, p.size() / 8)) {
            const double keep = p.data()[i], h = 1e-5;
            p.data()[i] = keep + h;
            const double up = m.ar_loss(seq);
            p.data()[i] = keep - h;
            const double down = m.ar_loss(seq);
            p.data()[i] = keep;
            const double fd = (up - down) / (2 * h), an = grads[k].data()[i];
            worst = std::max(worst, std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)));
            ++probed;
        }
    }
    if (worst > 1e-4) return "relative error " + std::to_string(worst) + " over " + std::to_string(probed) + " coordinates";
    return {};
}

std::string grpo() {
    const std::vector<double> flat = {1, 1, 1, 1}, two = {0, 1};
    for (double a : training::group_advantages(flat))
        if (a != 0.0) return "zero-variance group";
    const auto a = training::group_advantages(two);
    if (a[0] != -1.0 || a[1] != 1.0) return "[0,1] advantages";
    Rng rng(4);
    model::Matrix<double> p(4, 9);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = rng.normal(0.0, 2.0);
    for (double k : training::token_kl(p, p))
        if (std::abs(k) > 1e-9) return "token_kl(p, p) != 0";
    return {};
}

std::string reward_formulas() {
    if (std::abs(rewards::combine_tfsf(0.6, 0.5, 0.2).r_tfsf - 0.70) > 1e-12) return "0.6 + 0.2 x 0.5";
    if (rewards::judge_reward(120) != 1.0 || rewards::judge_reward(-3) != 0.0 || rewards::judge_reward(55) != 0.55) return "judge clip";
    return {};
}

std::string metrics() {
    Rng rng(6);
    Eigen::MatrixXd a(20, 3);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    if (eval::fid(a, a) > 1e-6) return "fid(identical)";
    if (eval::bleu1("a b c", "a b c") != 1.0 || eval::bleu1("a b", "c d") != 0.0 || eval::bleu1("a b", "a c") != 0.5) return "bleu1";
    if (eval::rouge_l("a b c", "a b c") != 1.0 || eval::rouge_l("a b", "c d") != 0.0) return "rouge_l";
    return {};
}

std::string split_isolation() {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        corpus::CorpusConfig c;
        c.seed = seed;
        c.sizes = {{"gagp", 6}, {"sit", 6}, {"vro", 4}, {"eval_tfsf", 4}, {"eval_stcqa", 4}};
        const auto corpus = corpus::build_corpus(c);
        std::set<std::int64_t> train, test;
        for (const auto& [name, records] : corpus.splits)
            for (const auto& r : records)
                for (const auto& o : r.images) (corpus::is_train_split(name) ? train : test).insert(o.location_id);
        for (auto id : test)
            if (train.count(id)) return "location " + std::to_string(id) + " on both sides, seed " + std::to_string(seed);
    }
    return {};
}

} // namespace

std::vector<CheckResult> run_invariant_suite() {
    const std::vector<std::pair<std::string, Check>> checks = {
        {"metadata tables", metadata_tables}, {"cloud filter boundary", cloud_filter}, {"gradient check", gradients},
        {"grpo oracles", grpo},               {"reward formulas", reward_formulas},     {"metric identities", metrics},
        {"split isolation", split_isolation},
    };
    std::vector<CheckResult> out;
    for (const auto& [name, fn] : checks) {
        CheckResult r{name, false, {}};
        try {
            r.detail = fn();
            r.passed = r.detail.empty();
        } catch (const std::exception& e) {
            r.detail = std::string("threw: ") + e.what();
        }
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace rswm::cli
