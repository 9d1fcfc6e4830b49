#pragma once

// Three-stage training: geo-aware generative pre-training (forecasting only),
// synergistic instruction tuning (mixed tasks) and verifiable reinforcement
// optimization (GRPO with an exact KL penalty toward the frozen SIT policy).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rswm/common/chat_client.hpp"
#include "rswm/corpus/corpus.hpp"
#include "rswm/model/transformer.hpp"
#include "rswm/rewards/embedder.hpp"
#include "rswm/rewards/judge.hpp"

namespace rswm::training {

using model::PolicyCheckpoint;
using model::Stage;

struct StageConfig {
    Stage stage = Stage::gagp;
    int epochs = 1;
    int steps = 0; // > 0 overrides epochs
    int batch_size = 8;
    double peak_lr = 5e-4;
    double warmup_ratio = 0.10;
    std::uint64_t seed = 0;
    double holdout_fraction = 0.1; // every round(1 / fraction)-th record is held out for validation
    model::AdamWConfig optimizer;
    bool drop_metadata = false; // metadata tokens replaced by pad
    int log_every = 10;

    // vro only
    int group_size = 8;           // G
    double clip_eps = 0.2;        // ratio clip
    double kl_weight = 0.05;      // gamma
    double lambda = 0.2;          // reference-adherence weight of the forecasting reward
    double temperature = 1.0;     // rollout sampling temperature
    int max_new_tokens = 256;
    std::string judge = "builtin"; // "builtin" or "external"
    std::optional<ChatClientConfig> judge_client;
    std::string task_mix = "uniform"; // "uniform" shuffles tasks together, "alternate" alternates per step
    std::filesystem::path resume_path; // where an aborted VRO run leaves its checkpoint

    void validate() const;
};

nlohmann::json to_json(const StageConfig& c);
/// Strict parse; `stage` fixes the defaults the section starts from.
StageConfig stage_config_from_json(const nlohmann::json& j, Stage stage);
/// Defaults for a stage (learning rate and warmup per stage).
StageConfig default_stage_config(Stage stage);

/// Linear warmup over floor(warmup_ratio * total) steps, then cosine decay to 0 at `total`.
double lr_at(long step, long total, double peak, double warmup_ratio);
double lr_at(long step, long total, const StageConfig& c);

/// (r - mean) / population std; all zeros when the std is 0.
std::vector<double> group_advantages(std::span<const double> rewards);

/// Exact KL(softmax(p) || softmax(q)) per row.
std::vector<double> token_kl(const model::Matrix<double>& policy_logits, const model::Matrix<double>& reference_logits);

/// Indices [0, n) split into (train, held-out) by the holdout rule of StageConfig.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction);
/// holdout_split applied within each task, so mixed splits hold out every task. Indices stay sorted.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(const std::vector<corpus::PromptRecord>& records, double fraction);

struct StageResult {
    PolicyCheckpoint checkpoint;
    std::vector<nlohmann::json> log; // one entry per logged step
    double validation_loss = 0.0;    // GAGP / SIT
    std::vector<std::string> warnings;
    long steps = 0;
};

/// Mean target NLL of records under `policy`.
double mean_loss(const PolicyCheckpoint& policy, const std::vector<corpus::PromptRecord>& records, const model::AssembleOptions& options);

StageResult run_gagp(const PolicyCheckpoint& start, const std::vector<corpus::PromptRecord>& records, const StageConfig& config);
StageResult run_sit(const PolicyCheckpoint& start, const std::vector<corpus::PromptRecord>& records, const StageConfig& config);

/// Reward providers for VRO.
struct RewardSource {
    const rewards::Embedder* embedder = nullptr;
    rewards::ExternalJudge* external_judge = nullptr;
};

/// Verifiable reward of one completion for a record.
double completion_reward(const corpus::PromptRecord& record, const std::vector<int>& completion, const PolicyCheckpoint& policy,
                         const RewardSource& source, const StageConfig& config, rewards::RewardBreakdown* breakdown = nullptr);

/// One group of rollouts for a prompt.
struct GroupRollout {
    std::vector<int> prompt;
    std::vector<std::vector<int>> completions;
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<std::vector<int>> choice_mask; // 1 where the policy chose the token, 0 for forced tokens
    std::vector<std::vector<double>> old_logprobs; // behaviour log-probs; empty means on-policy (ratio 1)
};

/// Adds the gradient of the clipped objective minus gamma * KL for the group to `grads`,
/// scaled by `weight`. Returns the mean per-token KL.
double grpo_group_gradient(const model::Transformer<float>& policy, const model::Transformer<float>& reference, const GroupRollout& group,
                           const StageConfig& config, double weight, std::vector<model::Matrix<float>>& grads);

/// GRPO objective for a group in double precision (for exact checks).
double grpo_group_gradient(const model::Transformer<double>& policy, const model::Transformer<double>& reference, const GroupRollout& group,
                           const StageConfig& config, double weight, std::vector<model::Matrix<double>>& grads);

StageResult run_vro(const PolicyCheckpoint& policy, const PolicyCheckpoint& reference, const std::vector<corpus::PromptRecord>& records,
                    const RewardSource& source, const StageConfig& config);

/// Mean verifiable reward of greedy completions over records.
struct RewardSummary {
    double mean = 0.0;
    double mean_tfsf = 0.0;
    double mean_stcqa = 0.0;
    double mean_s_ir = 0.0;
    double mean_s_it = 0.0;
    int tfsf = 0;
    int stcqa = 0;
};
RewardSummary mean_verifiable_reward(const PolicyCheckpoint& policy, const std::vector<corpus::PromptRecord>& records,
                                     const RewardSource& source, const StageConfig& config, const model::GenerateOptions& decode = {});

/// Mean exact per-token KL between two policies over the target spans of records' greedy completions.
double mean_policy_kl(const PolicyCheckpoint& policy, const PolicyCheckpoint& reference, const std::vector<corpus::PromptRecord>& records,
                      int max_new_tokens);

} // namespace rswm::training
