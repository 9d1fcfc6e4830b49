// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run every criterion
//   acceptance 3 7        run only the listed criteria
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rswm/common/rng.hpp"
#include "rswm/corpus/corpus.hpp"
#include "rswm/eval.hpp"
#include "rswm/metadata.hpp"
#include "rswm/pipeline.hpp"
#include "rswm/rewards/embedder.hpp"
#include "rswm/rewards/judge.hpp"
#include "rswm/tokenizer.hpp"
#include "rswm/training.hpp"
#include "rswm/worldgen.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rswm;

#ifndef RSWM_SOURCE_DIR
#error "RSWM_SOURCE_DIR must point at the repository root"
#endif

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
};

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

// Collects failed sub-checks; the criterion passes when none failed.
struct Checks {
    std::vector<std::string> failures;
    int total = 0;
    void expect(bool ok, const std::string& what) {
        ++total;
        if (!ok) failures.push_back(what);
    }
    Outcome outcome(const std::string& summary = {}) const {
        std::string d = summary.empty() ? std::to_string(total - static_cast<int>(failures.size())) + "/" + std::to_string(total) + " checks" : summary;
        for (std::size_t i = 0; i < failures.size() && i < 5; ++i) d += "; failed: " + failures[i];
        if (failures.size() > 5) d += "; ... " + std::to_string(failures.size() - 5) + " more";
        return {failures.empty(), d};
    }
};

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("rswm-acceptance-" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// ---------------------------------------------------------------- 1

Outcome metadata_tables() {
    using namespace metadata;
    Checks c;
    // Interpretation guide, transcribed as plain data.
    const std::vector<std::pair<double, std::string>> compass = {{0, "north"},   {45, "northeast"},  {90, "east"},  {135, "southeast"},
                                                                 {180, "south"}, {225, "southwest"}, {270, "west"}, {315, "northwest"}};
    for (const auto& [deg, word] : compass) c.expect(azimuth_sector(deg) == word, "azimuth " + fmt(deg));

    c.expect(hemisphere_of(12.5) == Hemisphere::northern && to_string(hemisphere_of(12.5)) == "Northern", "positive latitude");
    c.expect(hemisphere_of(-12.5) == Hemisphere::southern && to_string(hemisphere_of(-12.5)) == "Southern", "negative latitude");

    const char* months[12] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};
    const std::map<std::string, std::vector<std::pair<std::string, std::string>>> guide = {
        {"north", {{"Mar-May", "spring"}, {"Jun-Aug", "summer"}, {"Sep-Nov", "autumn"}, {"Dec-Feb", "winter"}}},
        {"south", {{"Sep-Nov", "spring"}, {"Dec-Feb", "summer"}, {"Mar-May", "autumn"}, {"Jun-Aug", "winter"}}},
    };
    auto month_index = [&](const std::string& m) { return static_cast<int>(std::find(months, months + 12, m) - months); };
    for (const auto& [half, ranges] : guide) {
        const auto h = half == "north" ? Hemisphere::northern : Hemisphere::southern;
        std::map<int, std::string> cell;
        for (const auto& [range, season] : ranges) {
            const int a = month_index(range.substr(0, 3)), b = month_index(range.substr(4, 3));
            for (int m = a;; m = (m + 1) % 12) {
                cell[m + 1] = season;
                if (m == b) break;
            }
        }
        for (int m = 1; m <= 12; ++m) c.expect(to_string(season_of(m, h)) == cell.at(m), half + " month " + std::to_string(m));
    }

    const std::vector<std::pair<double, std::string>> shadows = {{0, "long shadows"}, {45, "moderate shadows"}, {90, "minimal shadows"}};
    for (const auto& [elev, phrase] : shadows) c.expect(shadow_phrase(shadow_class(elev)) == phrase, "elevation " + fmt(elev));
    return c.outcome();
}

// ---------------------------------------------------------------- 2

Outcome cloud_boundary() {
    Checks c;
    AcqMetadata m;
    m.cloud_cover = 0.90;
    c.expect(corpus::cloud_filter(m), "0.90 must be retained");
    m.cloud_cover = 0.901;
    c.expect(!corpus::cloud_filter(m), "0.901 must be rejected");
    m.cloud_cover = 0.0;
    c.expect(corpus::cloud_filter(m), "clear sky retained");
    return c.outcome();
}

// ---------------------------------------------------------------- 3

Outcome gradient_check() {
    model::ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.width = 8;
    mc.context = 16;
    mc.vocab_size = 24;
    model::Transformer<double> m(mc, 17);
    const auto params = m.parameter_count();
    if (params > 5000) return {false, "model has " + std::to_string(params) + " parameters"};
    Rng rng(23);
    // Move norms and biases off their init so every tensor carries gradient.
    for (auto& p : m.params())
        for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += rng.normal(0.0, 0.3);

    const int len = 14, tb = 6, n = len - tb, V = mc.vocab_size;
    std::vector<int> ids;
    for (int i = 0; i < len; ++i) ids.push_back(static_cast<int>(rng.uniform_int(0, V - 1)));
    std::vector<double> nll(n), kl(n);
    model::Matrix<double> ref(n, V);
    for (int i = 0; i < n; ++i) {
        nll[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0);
        kl[static_cast<std::size_t>(i)] = rng.uniform(0.0, 1.0);
        for (int v = 0; v < V; ++v) ref(i, v) = rng.normal();
        ref.row(i).array() -= std::log(ref.row(i).array().exp().sum());
    }
    auto objective = [&] { return m.objective(ids, tb, nll, &ref, kl, nullptr); };
    auto grads = m.zero_grads();
    m.objective(ids, tb, nll, &ref, kl, &grads);

    const double h = 1e-5;
    double worst = 0.0;
    int probed = 0, tiny = 0;
    for (std::size_t k = 0; k < m.params().size(); ++k) {
        auto& p = m.params()[k];
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double keep = p.data()[i];
            p.data()[i] = keep + h;
            const double up = objective();
            p.data()[i] = keep - h;
            const double down = objective();
            p.data()[i] = keep;
            const double numeric = (up - down) / (2 * h), analytic = grads[k].data()[i];
            const double scale = std::max(std::abs(numeric), std::abs(analytic));
            if (scale < 1e-7) {
                worst = std::max(worst, std::abs(numeric - analytic) > 1e-9 ? 1.0 : 0.0);
                ++tiny;
                continue;
            }
            worst = std::max(worst, std::abs(numeric - analytic) / scale);
            ++probed;
        }
    }
    const bool ok = probed >= 200 && worst <= 1e-4;
    return {ok, std::to_string(params) + " params, " + std::to_string(probed) + " coordinates probed (" + std::to_string(tiny) +
                    " near-zero), max relative error " + fmt(worst, 3) + " (limit 1e-4)"};
}

// ---------------------------------------------------------------- 4

std::vector<Image> scene_images(std::uint64_t seed, std::int64_t first_location, int count) {
    std::vector<Image> out;
    for (int i = 0; i < count; ++i) {
        const auto scene = worldgen::generate_scene(seed, first_location + i);
        const auto meta = worldgen::sample_acquisition(scene, split_seed(seed, static_cast<std::uint64_t>(first_location + i)));
        out.push_back(worldgen::render_observation(scene, meta));
    }
    return out;
}

double pixel_mse(const Image& a, const Image& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) s += (static_cast<double>(a.pixels[i]) - b.pixels[i]) * (static_cast<double>(a.pixels[i]) - b.pixels[i]);
    return s / static_cast<double>(a.pixels.size());
}

int brute_nearest(const std::vector<double>& v, const tokenizer::Mat& cb) {
    int best = 0;
    double best_d = INFINITY;
    for (Eigen::Index k = 0; k < cb.rows(); ++k) {
        double d = 0.0;
        for (Eigen::Index j = 0; j < cb.cols(); ++j) d += (v[static_cast<std::size_t>(j)] - cb(k, j)) * (v[static_cast<std::size_t>(j)] - cb(k, j));
        if (d < best_d) best_d = d, best = static_cast<int>(k);
    }
    return best;
}

Outcome tokenizer_quality() {
    Checks c;
    tokenizer::TokenizerConfig tc; // K = 64, 8 x 8 grid
    c.expect(tc.codebook_size == 64 && tc.grid_side * tc.grid_side == 64, "K=64, L=64 configuration");
    const auto train = scene_images(41, 0, 2000);
    const auto held = scene_images(41, 5000000, 200);
    const auto tok = tokenizer::train_codebook(train, tc, 5);

    double mse = 0.0;
    std::set<int> codes;
    for (const auto& img : held) {
        const auto t = tok.encode(img);
        c.expect(static_cast<int>(t.codes.size()) == 64, "64 tokens per image");
        codes.insert(t.codes.begin(), t.codes.end());
        mse += pixel_mse(img, tok.decode(t));
    }
    mse /= static_cast<double>(held.size());
    c.expect(mse <= 0.02, "held-out MSE " + fmt(mse));
    c.expect(codes.size() >= 32, "active codes " + std::to_string(codes.size()));

    Rng rng(77);
    const auto& cb = tok.codebook();
    int agree = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> v(static_cast<std::size_t>(cb.cols()));
        // half the probes sit close to a codeword, half are spread out
        const auto anchor = rng.uniform_int(0, cb.rows() - 1);
        for (Eigen::Index j = 0; j < cb.cols(); ++j)
            v[static_cast<std::size_t>(j)] = trial % 2 ? cb(anchor, j) + rng.normal(0.0, 0.05) : rng.normal(0.0, 2.0 * cb.cwiseAbs().maxCoeff());
        agree += tokenizer::quantize_latent(v, cb).index == brute_nearest(v, cb);
    }
    c.expect(agree == 1000, "brute-force agreement " + std::to_string(agree) + "/1000");
    return c.outcome("held-out MSE " + fmt(mse) + " (limit 0.02), " + std::to_string(codes.size()) + " active codes (min 32), " + std::to_string(agree) +
                     "/1000 quantizations match brute force");
}

// ---------------------------------------------------------------- 5

long double oracle_kl(const model::Matrix<double>& p, const model::Matrix<double>& q, Eigen::Index r) {
    auto lse = [](const Eigen::RowVectorXd& z) {
        long double mx = z.maxCoeff(), s = 0.0L;
        for (Eigen::Index i = 0; i < z.size(); ++i) s += std::exp(static_cast<long double>(z(i)) - mx);
        return mx + std::log(s);
    };
    const long double zp = lse(p.row(r)), zq = lse(q.row(r));
    long double kl = 0.0L;
    for (Eigen::Index i = 0; i < p.cols(); ++i) {
        const long double lp = p(r, i) - zp, lq = q(r, i) - zq;
        kl += std::exp(lp) * (lp - lq);
    }
    return kl;
}

Outcome grpo_oracles() {
    Checks c;
    Rng rng(5);
    double worst_mean = 0.0, worst_std = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int g = static_cast<int>(rng.uniform_int(2, 16));
        std::vector<double> r(static_cast<std::size_t>(g));
        for (auto& x : r) x = rng.uniform(-1.0, 1.0) * std::pow(10.0, rng.uniform(-3.0, 2.0));
        const auto a = training::group_advantages(r);
        double m = 0.0, v = 0.0;
        for (double x : a) m += x;
        m /= g;
        for (double x : a) v += (x - m) * (x - m);
        worst_mean = std::max(worst_mean, std::abs(m));
        worst_std = std::max(worst_std, std::abs(std::sqrt(v / g) - 1.0));
    }
    c.expect(worst_mean <= 1e-9, "advantage mean " + fmt(worst_mean));
    c.expect(worst_std <= 1e-9, "advantage std deviation from 1: " + fmt(worst_std));
    for (double x : training::group_advantages(std::vector<double>{1, 1, 1, 1})) c.expect(x == 0.0, "[1,1,1,1] -> zeros");

    int negative = 0;
    double worst_oracle = 0.0, worst_self = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
        const int v = static_cast<int>(rng.uniform_int(2, 40));
        model::Matrix<double> p(1, v), q(1, v);
        const double spread = std::pow(10.0, rng.uniform(-2.0, 1.0));
        for (int i = 0; i < v; ++i) p(0, i) = rng.normal(0.0, spread), q(0, i) = rng.normal(0.0, spread);
        const double k = training::token_kl(p, q)[0];
        negative += k < 0.0;
        worst_oracle = std::max(worst_oracle, static_cast<double>(std::abs(static_cast<long double>(k) - std::max(0.0L, oracle_kl(p, q, 0)))));
        worst_self = std::max(worst_self, std::abs(training::token_kl(p, p)[0]));
    }
    c.expect(negative == 0, std::to_string(negative) + " negative KL values");
    c.expect(worst_self == 0.0, "token_kl(p, p) = " + fmt(worst_self));
    c.expect(worst_oracle <= 1e-9, "KL oracle error " + fmt(worst_oracle));

    // One-token completions from a tiny policy: with KL off and ratio 1 the head-bias
    // gradient must equal (1/G) sum_i A_i (softmax - e_{o_i}).
    model::ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.width = 8;
    mc.context = 12;
    mc.vocab_size = 11;
    const model::Transformer<double> policy(mc, 3), reference(mc, 4);
    training::GroupRollout g;
    g.prompt = {1, 4, 7, 9};
    for (int t : {2, 5, 5, 8}) g.completions.push_back({t}), g.choice_mask.push_back({1});
    g.rewards = {1.0, 0.0, 0.5, 2.0};
    g.advantages = training::group_advantages(g.rewards);
    auto cfg = training::default_stage_config(model::Stage::vro);
    cfg.kl_weight = 0.0;
    auto grads = policy.zero_grads();
    training::grpo_group_gradient(policy, reference, g, cfg, 1.0, grads);
    auto ids = g.prompt;
    ids.push_back(0);
    const auto lp = policy.target_log_softmax(ids, static_cast<int>(g.prompt.size()));
    double worst_grad = 0.0;
    for (int v = 0; v < mc.vocab_size; ++v) {
        double expect = 0.0;
        for (std::size_t i = 0; i < g.completions.size(); ++i) expect += g.advantages[i] * (std::exp(lp(0, v)) - (g.completions[i][0] == v ? 1.0 : 0.0));
        expect /= static_cast<double>(g.completions.size());
        worst_grad = std::max(worst_grad, std::abs(grads.back()(0, v) - expect));
    }
    c.expect(worst_grad <= 1e-12, "REINFORCE closed form error " + fmt(worst_grad));
    return c.outcome("advantage mean " + fmt(worst_mean, 2) + ", std error " + fmt(worst_std, 2) + ", KL oracle error " + fmt(worst_oracle, 2) +
                     " over 10000 cases, REINFORCE error " + fmt(worst_grad, 2));
}

// ---------------------------------------------------------------- 6

corpus::CorpusConfig small_corpus(std::uint64_t seed, int eval_stcqa) {
    corpus::CorpusConfig cc;
    cc.seed = seed;
    cc.sizes = {{"gagp", 8}, {"sit", 8}, {"vro", 4}, {"eval_tfsf", 4}, {"eval_stcqa", eval_stcqa}};
    return cc;
}

Outcome reward_formulas() {
    Checks c;
    const auto spot = rewards::combine_tfsf(0.6, 0.5, 0.2);
    c.expect(std::abs(spot.r_tfsf - 0.70) <= 1e-15, "0.6 + 0.2 x 0.5 gave " + fmt(spot.r_tfsf, 17));
    Rng rng(9);
    for (int i = 0; i < 1000; ++i) {
        const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), l = rng.uniform(0, 1);
        if (rewards::combine_tfsf(a, b, l).r_tfsf != a + l * b) {
            c.expect(false, "r = s_it + lambda s_ir");
            break;
        }
    }
    for (double t : {-50.0, 0.0, 37.5, 100.0, 250.0}) c.expect(rewards::judge_reward(t) == std::min(1.0, std::max(0.0, t / 100.0)), "clip " + fmt(t));

    const auto corpus = corpus::build_corpus(small_corpus(31, 200));
    const auto& qa = corpus.at("eval_stcqa");
    std::vector<std::string> words;
    for (const auto& r : qa) {
        std::istringstream in(r.target_text);
        for (std::string w; in >> w;) words.push_back(w);
    }
    // Fuzz: word salads, shuffled reference fragments and raw bytes.
    int bound_failures = 0;
    for (int i = 0; i < 10000; ++i) {
        const auto& rec = qa[static_cast<std::size_t>(i) % qa.size()];
        std::string answer;
        const int kind = i % 3, n = static_cast<int>(rng.uniform_int(0, 80));
        for (int k = 0; k < n; ++k) {
            if (kind == 0) answer += words[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(words.size()) - 1))] + " ";
            else if (kind == 1) answer += rec.target_text.substr(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(rec.target_text.size()) - 1)), 12);
            else answer += static_cast<char>(rng.uniform_int(1, 255));
        }
        const auto v = rewards::judge_stcqa(answer, {rec.images.at(0).meta, rec.images.at(1).meta, rec.truth, rec.target_text});
        double sum = 0.0;
        bool ok = true;
        for (double s : v.scores) ok = ok && s >= 0.0 && s <= 20.0, sum += s;
        ok = ok && std::abs(sum - v.total) <= 1e-9 && v.total >= 0.0 && v.total <= 100.0;
        ok = ok && v.reward == std::min(1.0, std::max(0.0, v.total / 100.0));
        bound_failures += !ok;
    }
    c.expect(bound_failures == 0, std::to_string(bound_failures) + " verdicts out of bounds");

    double ref_min = 1.0, empty_max = 0.0;
    for (const auto& r : qa) {
        const rewards::JudgeContext ctx{r.images.at(0).meta, r.images.at(1).meta, r.truth, r.target_text};
        ref_min = std::min(ref_min, rewards::judge_stcqa(r.target_text, ctx).reward);
        empty_max = std::max(empty_max, rewards::judge_stcqa("", ctx).reward);
    }
    c.expect(ref_min >= 0.9, "reference caption minimum " + fmt(ref_min));
    c.expect(empty_max <= 0.1, "empty answer maximum " + fmt(empty_max));
    return c.outcome("spot value " + fmt(spot.r_tfsf, 17) + ", " + std::to_string(bound_failures) + "/10000 verdicts out of bounds, reference min " +
                     fmt(ref_min) + " over " + std::to_string(qa.size()) + " captions, empty max " + fmt(empty_max));
}

// ---------------------------------------------------------------- 7

std::size_t lcs_memo(const std::vector<std::string>& a, const std::vector<std::string>& b, std::size_t i, std::size_t j,
                     std::map<std::pair<std::size_t, std::size_t>, std::size_t>& memo) {
    if (i == a.size() || j == b.size()) return 0;
    const auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const std::size_t v = a[i] == b[j] ? 1 + lcs_memo(a, b, i + 1, j + 1, memo) : std::max(lcs_memo(a, b, i + 1, j, memo), lcs_memo(a, b, i, j + 1, memo));
    return memo[key] = v;
}

std::vector<std::string> words_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

Outcome metric_oracles() {
    Checks c;
    Rng rng(3);
    Eigen::MatrixXd a(50, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    c.expect(eval::fid(a, a) <= 1e-6, "FID(identical) " + fmt(eval::fid(a, a)));

    // 1-D closed form: (mu_a - mu_b)^2 + (sd_a - sd_b)^2 with unbiased variances.
    Eigen::MatrixXd x(4, 1), shifted(4, 1), wide(4, 1);
    x << -1, 1, -1, 1;     // mean 0, variance 4/3
    shifted = x.array() + 3.0;
    wide = x * 2.5;        // variance 4/3 x 6.25
    const double sd = std::sqrt(4.0 / 3.0);
    const double mean_case = eval::fid(x, shifted), var_case = eval::fid(x, wide);
    c.expect(std::abs(mean_case - 9.0) <= 1e-6, "mean-shift FID " + fmt(mean_case, 10));
    c.expect(std::abs(var_case - (sd - 2.5 * sd) * (sd - 2.5 * sd)) <= 1e-6, "variance FID " + fmt(var_case, 10));

    c.expect(eval::bleu1("the farm became a town", "the farm became a town") == 1.0, "BLEU-1 identity");
    c.expect(eval::bleu1("river forest", "road building") == 0.0, "BLEU-1 disjoint");
    c.expect(eval::rouge_l("the farm became a town", "the farm became a town") == 1.0, "ROUGE-L identity");
    c.expect(eval::rouge_l("river forest", "road building") == 0.0, "ROUGE-L disjoint");

    const std::vector<std::string> pool = {"the", "farm", "road", "new", "built", "river", "field", "was", "is", "a", "of", "shadow"};
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        std::string h, r;
        for (auto n = rng.uniform_int(1, 25); n > 0; --n) h += pool[static_cast<std::size_t>(rng.uniform_int(0, 11))] + " ";
        for (auto n = rng.uniform_int(1, 25); n > 0; --n) r += pool[static_cast<std::size_t>(rng.uniform_int(0, 11))] + " ";
        const auto hw = words_of(h), rw = words_of(r);
        std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
        const double l = static_cast<double>(lcs_memo(hw, rw, 0, 0, memo));
        const double p = l / static_cast<double>(hw.size()), rc = l / static_cast<double>(rw.size()), b2 = 1.2 * 1.2;
        const double expect = l == 0 ? 0.0 : (1 + b2) * p * rc / (rc + b2 * p);
        worst = std::max(worst, std::abs(eval::rouge_l(h, r) - expect));
    }
    c.expect(worst <= 1e-12, "ROUGE-L vs LCS oracle " + fmt(worst));
    return c.outcome("FID cases " + fmt(mean_case, 10) + " / " + fmt(var_case, 10) + ", ROUGE-L oracle error " + fmt(worst, 2) + " on 100 pairs");
}

// ---------------------------------------------------------------- 8

Outcome split_isolation() {
    Checks c;
    const std::set<std::string> train_side = {"gagp", "sit", "vro"}, eval_side = {"eval_tfsf", "eval_stcqa"};
    std::size_t records = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto cc = small_corpus(seed * 7919 + 1, 8);
        const auto corpus = corpus::build_corpus(cc);
        std::set<std::int64_t> train, held;
        for (const auto& [name, recs] : corpus.splits) {
            c.expect(train_side.count(name) || eval_side.count(name), "unknown split " + name);
            for (const auto& r : recs) {
                ++records;
                for (const auto& o : r.images) (train_side.count(name) ? train : held).insert(o.location_id);
                if (r.target_image) (train_side.count(name) ? train : held).insert(r.target_image->location_id);
            }
        }
        std::size_t overlap = 0;
        for (auto id : held) overlap += train.count(id);
        c.expect(overlap == 0, "seed " + std::to_string(seed) + ": " + std::to_string(overlap) + " shared locations");
    }
    return c.outcome("20 seeds, " + std::to_string(records) + " records, " + std::to_string(c.failures.size()) + " seeds with shared locations");
}

// ---------------------------------------------------------------- 9

Outcome embedder_retrieval() {
    corpus::CorpusConfig cc;
    cc.seed = 12;
    cc.sizes = {{"gagp", 8}, {"sit", 3000}, {"vro", 4}, {"eval_tfsf", 160}, {"eval_stcqa", 160}};
    const auto corpus = corpus::build_corpus(cc);
    const auto emb = rewards::train_embedder(pipeline::embedder_pairs(corpus.at("sit"), 10000), {}, 12);

    // Independent retrieval on eval-side locations the embedder never saw.
    std::vector<rewards::ImageText> pairs;
    for (const char* s : {"eval_tfsf", "eval_stcqa"})
        for (const auto& r : corpus.at(s))
            for (const auto& o : r.images) pairs.push_back({o.image, o.caption});
    Rng rng(99);
    for (std::size_t i = pairs.size(); i > 1; --i) std::swap(pairs[i - 1], pairs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    int hits = 0, queries = 0;
    for (std::size_t g = 0; g + 64 <= pairs.size(); g += 64) {
        std::vector<Eigen::VectorXd> texts;
        for (std::size_t k = 0; k < 64; ++k) texts.push_back(emb.embed_text(pairs[g + k].text).normalized());
        for (std::size_t k = 0; k < 64; ++k) {
            const Eigen::VectorXd im = emb.embed_image(pairs[g + k].image).normalized();
            std::size_t best = 0;
            for (std::size_t j = 1; j < 64; ++j)
                if (im.dot(texts[j]) > im.dot(texts[best])) best = j;
            hits += best == k;
            ++queries;
        }
    }
    const double top1 = static_cast<double>(hits) / queries;
    Checks c;
    c.expect(emb.holdout_top1 >= 0.5, "training holdout top-1 " + fmt(emb.holdout_top1));
    c.expect(top1 >= 0.5, "eval-side top-1 " + fmt(top1));
    return c.outcome("eval-side top-1 " + fmt(top1) + " over " + std::to_string(queries) + " queries in groups of 64 (limit 0.5, chance 0.0156), training holdout " +
                     fmt(emb.holdout_top1));
}

// ---------------------------------------------------------------- 10

// Desk-scale protocol; budgets and learning rates are pinned here.
struct StageEffectPlan {
    std::map<std::string, int> sizes = {{"gagp", 8000}, {"sit", 12000}, {"vro", 600}, {"eval_tfsf", 160}, {"eval_stcqa", 100}};
    int gagp_steps = 3000;
    double gagp_lr = 3e-3;
    int sit_steps = 1500;
    double sit_lr = 1e-3;
    int vro_steps = 120;
    double vro_lr = 3e-4;
    int seeds = 5;
};

Outcome stage_effects() {
    const StageEffectPlan plan;
    corpus::CorpusConfig cc;
    cc.seed = 3;
    cc.sizes = plan.sizes;
    const auto corpus = corpus::build_corpus(cc);
    const auto tok = tokenizer::train_codebook(pipeline::tokenizer_images(corpus.at("gagp"), 2000), {}, 1);
    const auto emb = rewards::train_embedder(pipeline::embedder_pairs(corpus.at("sit"), 10000), {}, 1);
    auto vocab = pipeline::training_vocabulary(corpus.splits, tok.config().codebook_size);
    model::ModelConfig mc;
    mc.width = 64;
    mc.layers = 2;
    mc.heads = 4;
    mc.context = 448;
    mc.vocab_size = vocab.size();

    // Mean verifiable reward over every eval-side record.
    std::vector<corpus::PromptRecord> probe = corpus.at("eval_tfsf");
    probe.insert(probe.end(), corpus.at("eval_stcqa").begin(), corpus.at("eval_stcqa").end());
    eval::EvalConfig ec;
    ec.limit_stcqa = 0;
    const training::RewardSource source{&emb, nullptr};

    int a = 0, b = 0, cwin = 0, d = 0;
    std::string rows;
    for (int s = 0; s < plan.seeds; ++s) {
        const auto p0 = model::init_policy(mc, vocab, tok, split_seed(100, static_cast<std::uint64_t>(s)));
        auto gc = training::default_stage_config(model::Stage::gagp);
        gc.steps = plan.gagp_steps, gc.peak_lr = plan.gagp_lr, gc.seed = split_seed(200, static_cast<std::uint64_t>(s)), gc.log_every = 1 << 30;
        const auto with_meta = training::run_gagp(p0, corpus.at("gagp"), gc);
        auto ablate = gc;
        ablate.drop_metadata = true;
        const auto without_meta = training::run_gagp(p0, corpus.at("gagp"), ablate);

        auto sc = training::default_stage_config(model::Stage::sit);
        sc.steps = plan.sit_steps, sc.peak_lr = plan.sit_lr, sc.seed = split_seed(300, static_cast<std::uint64_t>(s)), sc.log_every = 1 << 30;
        const auto sit = training::run_sit(with_meta.checkpoint, corpus.at("sit"), sc);
        const auto sit_only = training::run_sit(p0, corpus.at("sit"), sc);
        const auto fid_full = eval::evaluate_suite(&sit.checkpoint, emb, corpus.at("eval_tfsf"), {}, ec).tfsf.fid;
        const auto fid_sit_only = eval::evaluate_suite(&sit_only.checkpoint, emb, corpus.at("eval_tfsf"), {}, ec).tfsf.fid;

        auto vc = training::default_stage_config(model::Stage::vro);
        vc.steps = plan.vro_steps, vc.peak_lr = plan.vro_lr, vc.seed = split_seed(400, static_cast<std::uint64_t>(s)), vc.log_every = 1 << 30;
        const auto vro = training::run_vro(sit.checkpoint, sit.checkpoint, corpus.at("vro"), source, vc);
        auto v0 = vc;
        v0.lambda = 0.0;
        const auto vro_l0 = training::run_vro(sit.checkpoint, sit.checkpoint, corpus.at("vro"), source, v0);
        const double r_sit = training::mean_verifiable_reward(sit.checkpoint, probe, source, vc).mean;
        const double r_vro = training::mean_verifiable_reward(vro.checkpoint, probe, source, vc).mean;
        const auto e2 = eval::evaluate_suite(&vro.checkpoint, emb, corpus.at("eval_tfsf"), {}, ec).tfsf;
        const auto e0 = eval::evaluate_suite(&vro_l0.checkpoint, emb, corpus.at("eval_tfsf"), {}, ec).tfsf;

        const bool wa = fid_full < fid_sit_only, wb = with_meta.validation_loss < without_meta.validation_loss;
        const bool wc = r_vro >= 1.02 * r_sit, wd = e2.mean_s_ir >= e0.mean_s_ir && e2.fid <= e0.fid;
        a += wa, b += wb, cwin += wc, d += wd;
        rows += "\n    seed " + std::to_string(s) + ": (a) FID " + fmt(fid_full) + " vs " + fmt(fid_sit_only) + (wa ? " win" : " loss") + "; (b) loss " +
                fmt(with_meta.validation_loss) + " vs " + fmt(without_meta.validation_loss) + (wb ? " win" : " loss") + "; (c) reward " + fmt(r_sit) + " -> " +
                fmt(r_vro) + (wc ? " win" : " loss") + "; (d) s_ir " + fmt(e2.mean_s_ir) + " vs " + fmt(e0.mean_s_ir) + ", FID " + fmt(e2.fid) + " vs " +
                fmt(e0.fid) + (wd ? " win" : " loss");
        std::cout << rows.substr(rows.rfind('\n')) << std::endl;
    }
    const bool ok = a >= 4 && b >= 4 && cwin >= 4 && d >= 3;
    return {ok, "(a) " + std::to_string(a) + "/5 need 4, (b) " + std::to_string(b) + "/5 need 4, (c) " + std::to_string(cwin) + "/5 need 4, (d) " +
                    std::to_string(d) + "/5 need 3" + rows};
}

// ---------------------------------------------------------------- 11

bool same_bytes(const fs::path& x, const fs::path& y) {
    std::ifstream a(x, std::ios::binary), b(y, std::ios::binary);
    if (!a || !b) return false;
    return std::equal(std::istreambuf_iterator<char>(a), std::istreambuf_iterator<char>(), std::istreambuf_iterator<char>(b),
                      std::istreambuf_iterator<char>());
}

Outcome reproducibility() {
    Checks c;
    std::ifstream in(fs::path(RSWM_SOURCE_DIR) / "configs" / "demo.json");
    const auto config = pipeline::run_config_from_json(json::parse(in));
    const auto first = scratch_dir("run-a"), second = scratch_dir("run-b");
    {
        pipeline::Log log(first / "logs" / "pipeline.jsonl");
        pipeline::run_pipeline(config, first, log);
    }
    for (const char* f : {"corpus/gagp.jsonl", "corpus/sit.jsonl", "corpus/vro.jsonl", "corpus/eval_tfsf.jsonl", "corpus/eval_stcqa.jsonl",
                          "checkpoints/tokenizer.bin", "checkpoints/gagp.ckpt", "checkpoints/sit.ckpt", "checkpoints/vro.ckpt", "reports/eval.json"})
        c.expect(fs::exists(first / f), std::string("missing ") + f);
    std::ifstream mf(first / "manifest.json");
    const auto manifest = json::parse(mf);
    try {
        std::ifstream rf(first / "reports" / "eval.json");
        const auto report = eval::report_from_json(json::parse(rf));
        c.expect(report.tfsf.count > 0 && report.stcqa.count > 0, "report has both tasks");
    } catch (const std::exception& e) {
        c.expect(false, std::string("report does not parse: ") + e.what());
    }

    std::vector<std::string> mismatched;
    {
        pipeline::Log log(second / "logs" / "reproduce.jsonl");
        mismatched = pipeline::reproduce(manifest, second, log);
    }
    c.expect(mismatched.empty(), std::to_string(mismatched.size()) + " artifacts differ by hash");
    // Byte comparison independent of the manifest hashes.
    std::size_t files = 0, differ = 0;
    for (const auto& [path, hash] : manifest.at("artifacts").items()) {
        ++files;
        if (!same_bytes(first / path, second / path)) ++differ, c.expect(false, path + " differs");
    }
    c.expect(files >= 14, "manifest lists " + std::to_string(files) + " artifacts");
    fs::remove_all(first);
    fs::remove_all(second);
    return c.outcome(std::to_string(files) + " artifacts, " + std::to_string(mismatched.size()) + " hash mismatches, " + std::to_string(differ) +
                     " byte mismatches");
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all = {
        {1, "metadata-table exactness", 1, metadata_tables},
        {2, "cloud-filter boundary", 1, cloud_boundary},
        {3, "gradient correctness", 120, gradient_check},
        {4, "tokenizer quality", 600, tokenizer_quality},
        {5, "GRPO oracles", 60, grpo_oracles},
        {6, "reward formulas", 60, reward_formulas},
        {7, "metric oracles", 60, metric_oracles},
        {8, "split isolation", 120, split_isolation},
        {9, "embedder retrieval", 600, embedder_retrieval},
        {10, "stage-effect directions", 7200, stage_effects},
        {11, "end-to-end reproducibility", 9000, reproducibility},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    bool all_passed = true;
    for (const auto& crit : all) {
        if (!selected.empty() && !selected.count(crit.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = crit.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_budget = secs <= crit.budget_seconds;
        const bool passed = o.passed && in_budget;
        all_passed = all_passed && passed;
        std::printf("criterion %2d %-28s %s  %.1f s (budget %.0f s%s)  %s\n", crit.id, crit.name, passed ? "PASS" : "FAIL", secs, crit.budget_seconds,
                    in_budget ? "" : ", exceeded", o.detail.c_str());
        std::fflush(stdout);
    }
    return all_passed ? 0 : 1;
}
