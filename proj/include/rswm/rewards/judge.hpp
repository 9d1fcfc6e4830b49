#pragma once

// Rubric judge for change question answering, and a client for an external
// LLM judge that uses the shipped judge template.

#include <array>
#include <string>

#include "rswm/acquisition.hpp"
#include "rswm/common/chat_client.hpp"
#include "rswm/worldgen.hpp"

namespace rswm::rewards {

inline constexpr std::array<const char*, 5> kJudgeDimensions = {"changes", "unchanged", "time", "space", "environment"};
inline constexpr double kDimensionMax = 20.0;

struct JudgeContext {
    AcqMetadata meta_pre;
    AcqMetadata meta_post;
    worldgen::ChangeRecord truth;
    std::string reference;
};

struct JudgeVerdict {
    std::array<double, 5> scores{}; // in kJudgeDimensions order
    double total = 0.0;
    double reward = 0.0;
    std::string reason;
};

/// clip(total / 100, 0, 1).
double judge_reward(double total);

/// Verdict with total = sum of scores and reward = judge_reward(total).
JudgeVerdict make_verdict(const std::array<double, 5>& scores, std::string reason);

/// Deterministic rubric against the ground-truth record and metadata.
///
/// changes      20 x recall of true (from, to) pairs, -5 per invented pair, -5 for claiming an
///              unchanged layout when something changed. With no true change: 20 for stating
///              the layout is unchanged, -10 per invented pair.
/// unchanged    20 x recall of stable classes, -5 per class wrongly claimed stable.
/// time         5 per correct season, 10 for the correct elapsed-time bucket.
/// space        20 x sum of sector Jaccard overlaps of matched items / (true items + unmatched claims).
/// environment  20 split evenly over the true light, shadow, cloud and snow facts; an omitted
///              fact loses its share, a contradicted one its share plus 5; claimed snow that is
///              absent costs 5.
/// An answer that states no recognizable fact scores 0 everywhere.
JudgeVerdict judge_stcqa(const std::string& answer, const JudgeContext& ctx);

/// Metadata summary substituted for the template's metadata field.
std::string metadata_summary(const JudgeContext& ctx);

class ExternalJudge {
public:
    explicit ExternalJudge(ChatClientConfig config) : client_(std::move(config)) {}
    /// Transport failures propagate as TransportError; bad replies as MalformedResponse.
    JudgeVerdict judge(const std::string& answer, const JudgeContext& ctx);
    static std::string render_prompt(const std::string& answer, const JudgeContext& ctx);
    /// Parses "score#reason". The total is clamped to [0, 100] and spread evenly over the dimensions.
    static JudgeVerdict parse_reply(const std::string& reply);

private:
    ChatClient client_;
};

} // namespace rswm::rewards
