#pragma once

// Metrics and the benchmark runner: proxy-FID and cosine similarity for
// text-guided forecasting, BLEU-1 / ROUGE-L / rubric judge for change QA.

#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "rswm/corpus/corpus.hpp"
#include "rswm/model/transformer.hpp"
#include "rswm/rewards/embedder.hpp"

namespace rswm::eval {

/// Frechet distance between Gaussian fits of two row-sample sets (unbiased covariance).
/// Matrix square roots use a symmetric eigendecomposition with negative eigenvalues clamped to 0.
double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
double fid(const std::vector<rewards::Embedding>& a, const std::vector<rewards::Embedding>& b);

/// Lowercased whitespace tokens.
std::vector<std::string> text_tokens(std::string_view text);

/// Clipped unigram precision times brevity penalty, no smoothing.
double bleu1(std::string_view hypothesis, std::string_view reference);
/// LCS F-measure with recall weight beta.
double rouge_l(std::string_view hypothesis, std::string_view reference, double beta = 1.2);

struct EvalConfig {
    int max_new_tokens = 256;
    model::DecodeMode mode = model::DecodeMode::greedy;
    double temperature = 1.0;
    int top_k = 0;
    std::uint64_t seed = 0;
    double lambda = 0.2; // for the reported forecasting reward
    int limit_tfsf = -1; // < 0: whole split
    int limit_stcqa = -1;
    bool oracle = false; // score ground-truth targets as if generated

    void validate() const;
};

nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct TfsfSample {
    std::string id;
    double cossim = 0.0; // generated image vs instruction
    double s_ir = 0.0;   // generated image vs current image
    double reward = 0.0;
    rewards::Embedding generated;
    rewards::Embedding truth;
};

struct StcqaSample {
    std::string id;
    std::string hypothesis;
    std::string reference;
    double bleu1 = 0.0;
    double rouge_l = 0.0;
    double judge_total = 0.0;
    int length = 0; // words
};

struct TfsfSummary {
    int count = 0;
    double fid = 0.0;
    double mean_cossim = 0.0;
    double mean_s_ir = 0.0;
    double mean_reward = 0.0;
};

struct StcqaSummary {
    int count = 0;
    double bleu1 = 0.0;
    double rouge_l = 0.0;
    double judge_total = 0.0;
    double mean_length = 0.0;
};

struct EvalReport {
    std::string label;
    TfsfSummary tfsf;
    StcqaSummary stcqa;
    nlohmann::json config;
    std::string checkpoint_hash;
    std::string embedder_hash;
    std::vector<TfsfSample> tfsf_samples;
    std::vector<StcqaSample> stcqa_samples;
};

/// Aggregates recomputed from the per-sample records.
void recompute(EvalReport& report);

/// Generates for every eval record and scores the outputs. `policy` may be null in oracle mode.
EvalReport evaluate_suite(const model::PolicyCheckpoint* policy, const rewards::Embedder& embedder,
                          const std::vector<corpus::PromptRecord>& tfsf, const std::vector<corpus::PromptRecord>& stcqa,
                          const EvalConfig& config, std::string label = "model");

nlohmann::json to_json(const EvalReport& r);
/// Throws FormatError for malformed reports (including aggregates that disagree with the samples).
EvalReport report_from_json(const nlohmann::json& j);

/// One row per sample: task,id,then the task's metrics.
std::string to_csv(const EvalReport& r);
/// Fixed-width tables, one per task, one row per report.
std::string to_table(const std::vector<EvalReport>& reports);

} // namespace rswm::eval
