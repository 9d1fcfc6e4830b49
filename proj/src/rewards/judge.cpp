#include "rswm/rewards/judge.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "rswm/common/errors.hpp"
#include "rswm/corpus/caption.hpp"
#include "rswm/prompts.hpp"

namespace rswm::rewards {

using corpus::CaptionFacts;
using worldgen::LandCover;

namespace {

double clamp20(double v) { return std::clamp(v, 0.0, kDimensionMax); }

double jaccard(const std::vector<int>& a, const std::vector<int>& b) {
    const std::set<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    if (sa.empty() && sb.empty()) return 1.0;
    int inter = 0;
    for (int x : sa) inter += sb.count(x) ? 1 : 0;
    return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - static_cast<std::size_t>(inter));
}

bool states_anything(const CaptionFacts& f) {
    return !f.changes.empty() || f.layout_unchanged || !f.unchanged.empty() || f.time || f.light || f.shadow || f.cloud || f.snow;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

std::string stamp(const Timestamp& t) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d %02d:00", t.year, t.month, t.day, t.hour);
    return buf;
}

} // namespace

double judge_reward(double total) { return std::clamp(total / 100.0, 0.0, 1.0); }

JudgeVerdict make_verdict(const std::array<double, 5>& scores, std::string reason) {
    JudgeVerdict v;
    v.scores = scores;
    v.total = 0;
    for (double s : scores) v.total += s;
    v.reward = judge_reward(v.total);
    v.reason = std::move(reason);
    return v;
}

JudgeVerdict judge_stcqa(const std::string& answer, const JudgeContext& ctx) {
    const CaptionFacts truth = corpus::facts_from_truth(ctx.truth, ctx.meta_pre, ctx.meta_post);
    const CaptionFacts got = corpus::parse_caption(answer);
    if (!states_anything(got)) return make_verdict({0, 0, 0, 0, 0}, "no recognizable statement");

    // changes
    std::set<std::pair<LandCover, LandCover>> true_pairs, got_pairs;
    for (const auto& c : truth.changes) true_pairs.insert({c.from, c.to});
    for (const auto& c : got.changes) got_pairs.insert({c.from, c.to});
    int recalled = 0, invented = 0;
    for (const auto& p : got_pairs) (true_pairs.count(p) ? recalled : invented) += 1;
    double changes = 0;
    if (!true_pairs.empty()) {
        changes = kDimensionMax * recalled / static_cast<double>(true_pairs.size()) - 5.0 * invented - (got.layout_unchanged ? 5.0 : 0.0);
    } else {
        changes = (got.layout_unchanged ? kDimensionMax : 0.0) - 10.0 * invented;
    }
    changes = clamp20(changes);

    // unchanged
    std::set<LandCover> true_stable, stable_any, got_stable;
    for (const auto& u : truth.unchanged) true_stable.insert(u.cls);
    for (const auto& u : ctx.truth.unchanged) stable_any.insert(u.cls);
    for (const auto& u : got.unchanged) got_stable.insert(u.cls);
    int stable_hits = 0, stable_wrong = 0;
    for (auto c : got_stable) {
        if (true_stable.count(c)) ++stable_hits;
        else if (!stable_any.count(c)) ++stable_wrong;
    }
    double unchanged = true_stable.empty() ? kDimensionMax : kDimensionMax * stable_hits / static_cast<double>(true_stable.size());
    unchanged = clamp20(unchanged - 5.0 * stable_wrong);

    // time
    double time = 0;
    if (got.time && truth.time) {
        time += got.time->season_pre == truth.time->season_pre ? 5.0 : 0.0;
        time += got.time->season_post == truth.time->season_post ? 5.0 : 0.0;
        time += got.time->elapsed == truth.time->elapsed ? 10.0 : 0.0;
    }

    // space
    double overlap = 0;
    int items = 0;
    {
        std::map<std::pair<LandCover, LandCover>, const corpus::ChangeFact*> answer_changes;
        for (const auto& c : got.changes) answer_changes.emplace(std::make_pair(c.from, c.to), &c);
        std::map<LandCover, const corpus::UnchangedFact*> answer_stable;
        for (const auto& u : got.unchanged) answer_stable.emplace(u.cls, &u);
        items = static_cast<int>(truth.changes.size() + truth.unchanged.size());
        for (const auto& c : truth.changes) {
            const auto it = answer_changes.find({c.from, c.to});
            if (it != answer_changes.end()) {
                overlap += jaccard(c.sectors, it->second->sectors);
                answer_changes.erase(it);
            }
        }
        for (const auto& u : truth.unchanged) {
            const auto it = answer_stable.find(u.cls);
            if (it != answer_stable.end()) {
                overlap += jaccard(u.sectors, it->second->sectors);
                answer_stable.erase(it);
            }
        }
        items += static_cast<int>(answer_changes.size() + answer_stable.size());
    }
    const double space = items == 0 ? kDimensionMax : clamp20(kDimensionMax * overlap / items);

    // environment
    int n_env = 0, omitted = 0, contradicted = 0;
    auto check = [&](const auto& t, const auto& g) {
        if (!t) return;
        ++n_env;
        if (!g) ++omitted;
        else if (!(*g == *t)) ++contradicted;
    };
    check(truth.light, got.light);
    check(truth.shadow, got.shadow);
    check(truth.cloud, got.cloud);
    check(truth.snow, got.snow);
    double env = kDimensionMax;
    if (n_env > 0) env -= (kDimensionMax / n_env) * (omitted + contradicted) + 5.0 * contradicted;
    if (!truth.snow && got.snow && (got.snow->in_pre || got.snow->in_post)) env -= 5.0;
    env = clamp20(env);

    std::ostringstream reason;
    reason << "changes " << recalled << "/" << true_pairs.size() << " recalled, " << invented << " invented; stable " << stable_hits << "/"
           << true_stable.size() << "; environment " << omitted << " omitted, " << contradicted << " contradicted";
    return make_verdict({changes, unchanged, time, space, env}, reason.str());
}

std::string metadata_summary(const JudgeContext& ctx) {
    std::ostringstream out;
    const AcqMetadata* metas[2] = {&ctx.meta_pre, &ctx.meta_post};
    const char* names[2] = {"pre-temporal", "post-temporal"};
    for (int i = 0; i < 2; ++i) {
        const auto& m = *metas[i];
        out << names[i] << ": time " << stamp(m.timestamp) << ", center " << fmt(m.lat) << ", " << fmt(m.lon) << ", gsd " << fmt(m.gsd)
            << " m, sun azimuth " << fmt(m.sun_azimuth) << ", sun elevation " << fmt(m.sun_elevation) << ", off-nadir angle "
            << fmt(m.off_nadir) << ", cloud cover " << fmt(100.0 * m.cloud_cover) << "%";
        if (i == 0) out << "\n";
    }
    return out.str();
}

std::string ExternalJudge::render_prompt(const std::string& answer, const JudgeContext& ctx) {
    return prompts::render(prompts::get("judge"), {{"meta_tse", metadata_summary(ctx)}, {"ground_truth", ctx.reference}, {"model_output", answer}});
}

JudgeVerdict ExternalJudge::parse_reply(const std::string& reply) {
    const auto first = reply.find_first_not_of(" \t\r\n");
    const auto last = reply.find_last_not_of(" \t\r\n");
    if (first == std::string::npos) throw MalformedResponse("judge reply is empty");
    const std::string line = reply.substr(first, last - first + 1);
    const auto hash = line.find('#');
    if (hash == std::string::npos) throw MalformedResponse("judge reply lacks 'score#reason': " + line);
    const std::string score_text = line.substr(0, hash);
    std::size_t used = 0;
    double score = 0;
    try {
        score = std::stod(score_text, &used);
    } catch (const std::exception&) {
        throw MalformedResponse("judge score is not a number: " + score_text);
    }
    if (used != score_text.size() || !std::isfinite(score)) throw MalformedResponse("judge score is not a number: " + score_text);
    const double total = std::clamp(score, 0.0, 100.0);
    std::array<double, 5> scores;
    scores.fill(total / 5.0);
    return make_verdict(scores, line.substr(hash + 1));
}

JudgeVerdict ExternalJudge::judge(const std::string& answer, const JudgeContext& ctx) {
    return parse_reply(client_.complete("", render_prompt(answer, ctx)));
}

} // namespace rswm::rewards
