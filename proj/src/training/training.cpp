#include "rswm/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <map>
#include <numeric>

#include "rswm/common/errors.hpp"
#include "rswm/common/hash.hpp"
#include "rswm/common/rng.hpp"

namespace rswm::training {

using json = nlohmann::json;
using corpus::PromptRecord;
using corpus::Task;
using model::AssembleOptions;
using model::SystemPrompt;
using model::TokenSequence;

void StageConfig::validate() const {
    if (epochs < 1 && steps < 1) throw ConfigError("training: need epochs >= 1 or steps >= 1");
    if (steps < 0) throw ConfigError("training: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
    if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ConfigError("training: peak_lr must be positive");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ConfigError("training: warmup_ratio must be in [0, 1)");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("training: holdout_fraction must be in [0, 1)");
    if (log_every < 1) throw ConfigError("training: log_every must be >= 1");
    if (optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 || optimizer.beta2 >= 1 || optimizer.eps <= 0 || optimizer.weight_decay < 0)
        throw ConfigError("training: invalid optimizer settings");
    if (stage == Stage::vro) {
        if (group_size < 2) throw ConfigError("training: group_size must be >= 2");
        if (!(clip_eps > 0.0)) throw ConfigError("training: clip_eps must be positive");
        if (!(kl_weight >= 0.0) || !std::isfinite(kl_weight)) throw ConfigError("training: kl_weight must be >= 0");
        if (!(lambda >= 0.0)) throw ConfigError("training: lambda must be >= 0");
        if (!(temperature > 0.0)) throw ConfigError("training: temperature must be positive");
        if (max_new_tokens < 1) throw ConfigError("training: max_new_tokens must be >= 1");
        if (judge != "builtin" && judge != "external") throw ConfigError("training: judge must be 'builtin' or 'external'");
        if (judge == "external" && !judge_client) throw ConfigError("training: external judge needs judge_client");
        if (task_mix != "uniform" && task_mix != "alternate") throw ConfigError("training: task_mix must be 'uniform' or 'alternate'");
    }
    if (stage == Stage::init) throw ConfigError("training: 'init' is not a trainable stage");
}

StageConfig default_stage_config(Stage stage) {
    StageConfig c;
    c.stage = stage;
    switch (stage) {
    case Stage::gagp: c.peak_lr = 5e-4; c.warmup_ratio = 0.10; break;
    case Stage::sit: c.peak_lr = 1e-4; c.warmup_ratio = 0.02; break;
    case Stage::vro: c.peak_lr = 1e-4; c.warmup_ratio = 0.0; c.batch_size = 4; break;
    case Stage::init: break;
    }
    return c;
}

json to_json(const StageConfig& c) {
    json j = {{"stage", model::to_string(c.stage)},
              {"epochs", c.epochs},
              {"steps", c.steps},
              {"batch_size", c.batch_size},
              {"peak_lr", c.peak_lr},
              {"warmup_ratio", c.warmup_ratio},
              {"seed", c.seed},
              {"holdout_fraction", c.holdout_fraction},
              {"optimizer",
               {{"beta1", c.optimizer.beta1},
                {"beta2", c.optimizer.beta2},
                {"eps", c.optimizer.eps},
                {"weight_decay", c.optimizer.weight_decay},
                {"clip_norm", c.optimizer.clip_norm}}},
              {"drop_metadata", c.drop_metadata},
              {"log_every", c.log_every}};
    if (c.stage == Stage::vro) {
        j["group_size"] = c.group_size;
        j["clip_eps"] = c.clip_eps;
        j["kl_weight"] = c.kl_weight;
        j["lambda"] = c.lambda;
        j["temperature"] = c.temperature;
        j["max_new_tokens"] = c.max_new_tokens;
        j["judge"] = c.judge;
        if (c.judge_client) j["judge_client"] = to_json(*c.judge_client);
        j["task_mix"] = c.task_mix;
        j["resume_path"] = c.resume_path.string();
    }
    return j;
}

StageConfig stage_config_from_json(const json& j, Stage stage) {
    if (!j.is_object()) throw ConfigError("training: section must be an object");
    StageConfig c = default_stage_config(stage);
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "stage") {
                if (model::stage_from_string(v.get<std::string>()) != stage) throw ConfigError("training: section stage mismatch");
            } else if (k == "epochs") c.epochs = v.get<int>();
            else if (k == "steps") c.steps = v.get<int>();
            else if (k == "batch_size") c.batch_size = v.get<int>();
            else if (k == "peak_lr") c.peak_lr = v.get<double>();
            else if (k == "warmup_ratio") c.warmup_ratio = v.get<double>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else if (k == "holdout_fraction") c.holdout_fraction = v.get<double>();
            else if (k == "drop_metadata") c.drop_metadata = v.get<bool>();
            else if (k == "log_every") c.log_every = v.get<int>();
            else if (k == "optimizer") {
                if (!v.is_object()) throw ConfigError("training: optimizer must be an object");
                for (const auto& [ok, ov] : v.items()) {
                    if (ok == "beta1") c.optimizer.beta1 = ov.get<double>();
                    else if (ok == "beta2") c.optimizer.beta2 = ov.get<double>();
                    else if (ok == "eps") c.optimizer.eps = ov.get<double>();
                    else if (ok == "weight_decay") c.optimizer.weight_decay = ov.get<double>();
                    else if (ok == "clip_norm") c.optimizer.clip_norm = ov.get<double>();
                    else throw ConfigError("training: unknown optimizer key '" + ok + "'");
                }
            } else if (stage == Stage::vro && k == "group_size") c.group_size = v.get<int>();
            else if (stage == Stage::vro && k == "clip_eps") c.clip_eps = v.get<double>();
            else if (stage == Stage::vro && k == "kl_weight") c.kl_weight = v.get<double>();
            else if (stage == Stage::vro && k == "lambda") c.lambda = v.get<double>();
            else if (stage == Stage::vro && k == "temperature") c.temperature = v.get<double>();
            else if (stage == Stage::vro && k == "max_new_tokens") c.max_new_tokens = v.get<int>();
            else if (stage == Stage::vro && k == "judge") c.judge = v.get<std::string>();
            else if (stage == Stage::vro && k == "judge_client") c.judge_client = chat_client_config_from_json(v);
            else if (stage == Stage::vro && k == "task_mix") c.task_mix = v.get<std::string>();
            else if (stage == Stage::vro && k == "resume_path") c.resume_path = v.get<std::string>();
            else throw ConfigError("training: unknown key '" + k + "' for stage " + std::string(model::to_string(stage)));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("training: ") + e.what());
    } catch (const InvalidInput& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

double lr_at(long step, long total, double peak, double warmup_ratio) {
    require(total >= 1, "lr_at: total must be >= 1");
    require(step >= 0, "lr_at: step must be >= 0");
    if (step >= total) return 0.0;
    const long warm = static_cast<long>(std::floor(warmup_ratio * static_cast<double>(total)));
    if (step < warm) return peak * static_cast<double>(step) / static_cast<double>(warm);
    const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_at(long step, long total, const StageConfig& c) { return lr_at(step, total, c.peak_lr, c.warmup_ratio); }

std::vector<double> group_advantages(std::span<const double> rewards) {
    require(rewards.size() >= 2, "group_advantages: need at least 2 rewards");
    for (double r : rewards) require(std::isfinite(r), "group_advantages: non-finite reward");
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    std::vector<double> out(rewards.size(), 0.0);
    // identical rewards can leave a rounding residue in the std
    if (sd == 0.0 || std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) return out;
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
    return out;
}

namespace {

Eigen::RowVectorXd log_softmax_row(const Eigen::RowVectorXd& z) {
    const double mx = z.maxCoeff();
    const double lse = mx + std::log((z.array() - mx).exp().sum());
    return (z.array() - lse).matrix();
}

} // namespace

std::vector<double> token_kl(const model::Matrix<double>& p, const model::Matrix<double>& q) {
    require(p.rows() == q.rows() && p.cols() == q.cols() && p.cols() > 0, "token_kl: shape mismatch");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const Eigen::RowVectorXd lp = log_softmax_row(p.row(r));
        const Eigen::RowVectorXd lq = log_softmax_row(q.row(r));
        out.push_back(std::max(0.0, (lp.array().exp() * (lp - lq).array()).sum()));
    }
    return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction) {
    require(fraction >= 0.0 && fraction < 1.0, "holdout_split: fraction must be in [0, 1)");
    std::vector<std::size_t> train, held;
    const std::size_t every = fraction > 0.0 ? static_cast<std::size_t>(std::llround(1.0 / fraction)) : 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (every > 1 && i % every == every - 1) held.push_back(i);
        else train.push_back(i);
    }
    if (train.empty() && !held.empty()) {
        train.push_back(held.back());
        held.pop_back();
    }
    return {train, held};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(const std::vector<PromptRecord>& records, double fraction) {
    std::map<Task, std::vector<std::size_t>> by_task;
    for (std::size_t i = 0; i < records.size(); ++i) by_task[records[i].task].push_back(i);
    std::vector<std::size_t> train, held;
    for (const auto& [task, idx] : by_task) {
        const auto [t, h] = holdout_split(idx.size(), fraction);
        for (auto k : t) train.push_back(idx[k]);
        for (auto k : h) held.push_back(idx[k]);
    }
    std::sort(train.begin(), train.end());
    std::sort(held.begin(), held.end());
    return {train, held};
}

namespace {

TokenSequence encode_record(const PromptRecord& r, const PolicyCheckpoint& p, const AssembleOptions& opts) {
    auto seq = model::assemble_sequence(r, p.vocab, p.tokenizer, opts);
    if (static_cast<int>(seq.ids.size()) > p.config.context)
        throw InvalidInput("training: record " + r.id + " needs " + std::to_string(seq.ids.size()) + " tokens, context is " +
                           std::to_string(p.config.context));
    return seq;
}

std::string records_hash(const std::vector<PromptRecord>& records) {
    Sha256 h;
    for (const auto& r : records) {
        h.update(r.id);
        h.update("\n");
    }
    return h.hex_digest();
}

/// Seeded Fisher-Yates over [0, n).
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
    return p;
}

/// Endless epoch-shuffled stream of indices into `pool`.
class Sampler {
public:
    Sampler(std::vector<std::size_t> pool, std::uint64_t seed) : pool_(std::move(pool)), seed_(seed) {}
    bool empty() const { return pool_.empty(); }
    std::size_t next() {
        if (cursor_ >= order_.size()) {
            order_ = permutation(pool_.size(), split_seed(seed_, static_cast<std::uint64_t>(epoch_++)));
            cursor_ = 0;
        }
        return pool_[order_[cursor_++]];
    }

private:
    std::vector<std::size_t> pool_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    long epoch_ = 0;
};

long total_steps(const StageConfig& c, std::size_t n_train) {
    if (c.steps > 0) return c.steps;
    const long per_epoch = static_cast<long>((n_train + static_cast<std::size_t>(c.batch_size) - 1) / static_cast<std::size_t>(c.batch_size));
    return std::max(1L, per_epoch * c.epochs);
}

double mean_loss_seqs(const model::Transformer<float>& m, const std::vector<TokenSequence>& seqs) {
    if (seqs.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& s : seqs) sum += static_cast<double>(m.ar_loss(s));
    return sum / static_cast<double>(seqs.size());
}

StageResult supervised(const PolicyCheckpoint& start, const std::vector<PromptRecord>& records, const StageConfig& config,
                       SystemPrompt system) {
    const AssembleOptions opts{system, config.drop_metadata};
    const auto [train_idx, held_idx] = holdout_split(records, config.holdout_fraction);
    std::vector<TokenSequence> train, held;
    for (auto i : train_idx) train.push_back(encode_record(records[i], start, opts));
    for (auto i : held_idx) held.push_back(encode_record(records[i], start, opts));

    StageResult result;
    result.checkpoint = start;
    auto& m = result.checkpoint.model;
    model::AdamW<float> opt(m.params(), config.optimizer);
    std::vector<std::size_t> pool(train.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    Sampler sampler(pool, split_seed(config.seed, 1));
    const long total = total_steps(config, train.size());
    const float inv_batch = 1.0f / static_cast<float>(config.batch_size);
    double window = 0.0;
    int window_n = 0;
    for (long step = 0; step < total; ++step) {
        auto grads = m.zero_grads();
        double loss = 0.0;
        for (int b = 0; b < config.batch_size; ++b) {
            const auto& s = train[sampler.next()];
            const int n = s.target_length();
            const std::vector<float> coef(static_cast<std::size_t>(n), inv_batch / static_cast<float>(n));
            loss += static_cast<double>(m.objective(s.ids, s.target_begin, coef, nullptr, {}, &grads));
        }
        const double lr = lr_at(step, total, config);
        const double norm = opt.step(m.params(), grads, lr);
        window += loss;
        ++window_n;
        if ((step + 1) % config.log_every == 0 || step + 1 == total) {
            result.log.push_back({{"step", step + 1}, {"lr", lr}, {"loss", window / window_n}, {"grad_norm", norm}});
            window = 0.0;
            window_n = 0;
        }
    }
    result.steps = total;
    result.validation_loss = mean_loss_seqs(m, held);
    Rng rng(split_seed(config.seed, 2));
    result.checkpoint.stage = config.stage;
    result.checkpoint.rng_state = rng.state();
    result.checkpoint.info = {{"stage", model::to_string(config.stage)},
                              {"steps", total},
                              {"train_records", train.size()},
                              {"validation_records", held.size()},
                              {"validation_loss", result.validation_loss},
                              {"records_sha256", records_hash(records)},
                              {"start_hash", start.content_hash()},
                              {"config", to_json(config)}};
    return result;
}

} // namespace

double mean_loss(const PolicyCheckpoint& policy, const std::vector<PromptRecord>& records, const AssembleOptions& options) {
    std::vector<TokenSequence> seqs;
    for (const auto& r : records) seqs.push_back(encode_record(r, policy, options));
    return mean_loss_seqs(policy.model, seqs);
}

StageResult run_gagp(const PolicyCheckpoint& start, const std::vector<PromptRecord>& records, const StageConfig& config) {
    config.validate();
    if (config.stage != Stage::gagp) throw ConfigError("run_gagp: config is not a gagp section");
    if (start.stage != Stage::init) throw StageOrderError("run_gagp: pre-training starts from an initialized policy, got " + std::string(model::to_string(start.stage)));
    if (records.empty()) throw InvalidInput("run_gagp: empty corpus");
    for (const auto& r : records)
        if (r.task != Task::fsf) throw InvalidInput("run_gagp: record " + r.id + " is not a forecasting-only record");
    return supervised(start, records, config, SystemPrompt::stage1);
}

StageResult run_sit(const PolicyCheckpoint& start, const std::vector<PromptRecord>& records, const StageConfig& config) {
    config.validate();
    if (config.stage != Stage::sit) throw ConfigError("run_sit: config is not a sit section");
    if (start.stage != Stage::init && start.stage != Stage::gagp)
        throw StageOrderError("run_sit: instruction tuning starts from an initialized or pre-trained policy, got " + std::string(model::to_string(start.stage)));
    if (records.empty()) throw InvalidInput("run_sit: empty corpus");
    bool has_tfsf = false, has_stcqa = false;
    for (const auto& r : records) {
        if (r.task == Task::tfsf) has_tfsf = true;
        else if (r.task == Task::stcqa) has_stcqa = true;
        else throw InvalidInput("run_sit: record " + r.id + " is a forecasting-only record");
    }
    auto result = supervised(start, records, config, SystemPrompt::stage23);
    if (has_tfsf != has_stcqa) result.warnings.push_back("run_sit: corpus holds a single task");
    return result;
}

double completion_reward(const PromptRecord& record, const std::vector<int>& completion, const PolicyCheckpoint& policy,
                         const RewardSource& source, const StageConfig& config, rewards::RewardBreakdown* breakdown) {
    const auto& v = policy.vocab;
    if (record.task == Task::tfsf) {
        if (!source.embedder) throw InvalidInput("completion_reward: forecasting reward needs an embedder");
        const int L = policy.tokenizer.config().sequence_length();
        const bool valid = static_cast<int>(completion.size()) == L + 2 && completion.front() == v.special(model::Special::boi) &&
                           completion.back() == v.special(model::Special::eoi) &&
                           std::all_of(completion.begin() + 1, completion.end() - 1, [&](int id) { return v.is_visual(id); });
        if (!valid) {
            // worst attainable score for an unusable image
            const auto b = rewards::combine_tfsf(-1.0, -1.0, config.lambda);
            if (breakdown) *breakdown = b;
            return b.r_tfsf;
        }
        tokenizer::VisualTokens codes;
        for (std::size_t i = 1; i + 1 < completion.size(); ++i) codes.codes.push_back(v.code_of(completion[i]));
        const auto b = rewards::reward_tfsf(*source.embedder, policy.tokenizer, codes, record.instruction, record.images.at(0).image, config.lambda);
        if (breakdown) *breakdown = b;
        return b.r_tfsf;
    }
    if (record.task == Task::stcqa) {
        const rewards::JudgeContext ctx{record.images.at(0).meta, record.images.at(1).meta, record.truth, record.target_text};
        const std::string answer = v.detokenize(completion);
        if (config.judge == "external") {
            if (!source.external_judge) throw InvalidInput("completion_reward: external judge not provided");
            return source.external_judge->judge(answer, ctx).reward;
        }
        return rewards::judge_stcqa(answer, ctx).reward;
    }
    throw InvalidInput("completion_reward: forecasting-only records carry no verifiable reward");
}

namespace {

template <typename S>
double grpo_impl(const model::Transformer<S>& policy, const model::Transformer<S>& reference, const GroupRollout& g, const StageConfig& config,
                 double weight, std::vector<model::Matrix<S>>& grads) {
    const std::size_t G = g.completions.size();
    require(G >= 2, "grpo: group needs at least 2 completions");
    require(g.advantages.size() == G && g.choice_mask.size() == G, "grpo: group arrays disagree in size");
    require(g.old_logprobs.empty() || g.old_logprobs.size() == G, "grpo: old log-prob arity");
    double kl_sum = 0.0;
    long kl_n = 0;
    for (std::size_t i = 0; i < G; ++i) {
        const auto& c = g.completions[i];
        const std::size_t n = c.size();
        if (n == 0) continue;
        require(g.choice_mask[i].size() == n, "grpo: choice mask length");
        std::vector<int> ids = g.prompt;
        ids.insert(ids.end(), c.begin(), c.end());
        const int tb = static_cast<int>(g.prompt.size());
        const auto ref_lp = reference.target_log_softmax(ids, tb);
        const auto cur_lp = policy.target_log_softmax(ids, tb);
        const double scale = weight / (static_cast<double>(n) * static_cast<double>(G));
        const double A = g.advantages[i];
        std::vector<S> nll(n), kl(n, static_cast<S>(config.kl_weight * scale));
        for (std::size_t t = 0; t < n; ++t) {
            const auto row = static_cast<Eigen::Index>(t);
            const double lp = static_cast<double>(cur_lp(row, c[t]));
            double ratio = 1.0;
            if (!g.old_logprobs.empty()) ratio = std::exp(lp - g.old_logprobs[i].at(t));
            const bool clipped = (A > 0 && ratio > 1.0 + config.clip_eps) || (A < 0 && ratio < 1.0 - config.clip_eps);
            nll[t] = (g.choice_mask[i][t] && !clipped) ? static_cast<S>(A * ratio * scale) : S(0);
            double k = 0.0;
            for (Eigen::Index v = 0; v < cur_lp.cols(); ++v) {
                const double a = static_cast<double>(cur_lp(row, v));
                k += std::exp(a) * (a - static_cast<double>(ref_lp(row, v)));
            }
            kl_sum += std::max(0.0, k);
            ++kl_n;
        }
        policy.objective(ids, tb, nll, &ref_lp, kl, &grads);
    }
    return kl_n ? kl_sum / static_cast<double>(kl_n) : 0.0;
}

std::vector<int> choice_mask(const std::vector<int>& completion, Task task, const model::Vocabulary& v) {
    std::vector<int> mask(completion.size(), 1);
    if (task == Task::tfsf || task == Task::fsf) {
        for (std::size_t t = 0; t < completion.size(); ++t)
            if (completion[t] == v.special(model::Special::boi) || completion[t] == v.special(model::Special::eoi)) mask[t] = 0;
    }
    return mask;
}

void check_vro_records(const std::vector<PromptRecord>& records) {
    if (records.empty()) throw InvalidInput("run_vro: empty corpus");
    for (const auto& r : records)
        if (r.task == Task::fsf) throw InvalidInput("run_vro: record " + r.id + " has no verifiable reward");
}

} // namespace

double grpo_group_gradient(const model::Transformer<float>& policy, const model::Transformer<float>& reference, const GroupRollout& group,
                           const StageConfig& config, double weight, std::vector<model::Matrix<float>>& grads) {
    return grpo_impl(policy, reference, group, config, weight, grads);
}

double grpo_group_gradient(const model::Transformer<double>& policy, const model::Transformer<double>& reference, const GroupRollout& group,
                           const StageConfig& config, double weight, std::vector<model::Matrix<double>>& grads) {
    return grpo_impl(policy, reference, group, config, weight, grads);
}

StageResult run_vro(const PolicyCheckpoint& policy, const PolicyCheckpoint& reference, const std::vector<PromptRecord>& records,
                    const RewardSource& source, const StageConfig& config) {
    config.validate();
    if (config.stage != Stage::vro) throw ConfigError("run_vro: config is not a vro section");
    if (reference.stage != Stage::sit) throw StageOrderError("run_vro: the reference must be an instruction-tuned policy, got " + std::string(model::to_string(reference.stage)));
    if (policy.stage != Stage::sit && policy.stage != Stage::vro)
        throw StageOrderError("run_vro: the policy must be instruction-tuned, got " + std::string(model::to_string(policy.stage)));
    if (!(policy.config == reference.config) || !(policy.vocab == reference.vocab))
        throw InvalidInput("run_vro: policy and reference must share architecture and vocabulary");
    check_vro_records(records);

    const int L = policy.tokenizer.config().sequence_length();
    const AssembleOptions opts{SystemPrompt::stage23, false};
    const auto [train_idx, held_idx] = holdout_split(records, config.holdout_fraction);
    std::vector<std::size_t> tfsf_pool, stcqa_pool;
    for (auto i : train_idx) (records[i].task == Task::tfsf ? tfsf_pool : stcqa_pool).push_back(i);
    Sampler mixed(train_idx, split_seed(config.seed, 1));
    Sampler tfsf(tfsf_pool, split_seed(config.seed, 3));
    Sampler stcqa(stcqa_pool, split_seed(config.seed, 4));

    const long total = total_steps(config, train_idx.size());
    long start_step = 0;
    if (policy.stage == Stage::vro) {
        start_step = policy.info.value("completed_steps", total);
        if (policy.info.value("total_steps", total) != total) throw StageOrderError("run_vro: resume checkpoint was made for a different schedule");
    }

    StageResult result;
    result.checkpoint = policy;
    auto& m = result.checkpoint.model;
    model::AdamW<float> opt(m.params(), config.optimizer);
    // replay the sampler so a resumed run sees the prompts it would have seen
    auto next_prompt = [&](long step) -> std::size_t {
        if (config.task_mix == "alternate" && !tfsf.empty() && !stcqa.empty()) return (step % 2 == 0 ? tfsf : stcqa).next();
        return mixed.next();
    };
    for (long s = 0; s < start_step; ++s)
        for (int b = 0; b < config.batch_size; ++b) next_prompt(s);

    auto finish = [&](long completed) {
        result.checkpoint.stage = Stage::vro;
        result.checkpoint.rng_state = Rng(split_seed(config.seed, static_cast<std::uint64_t>(completed))).state();
        result.checkpoint.info = {{"stage", "vro"},
                                  {"completed_steps", completed},
                                  {"total_steps", total},
                                  {"resumable", completed < total},
                                  {"records_sha256", records_hash(records)},
                                  {"reference_hash", reference.content_hash()},
                                  {"config", to_json(config)}};
        // where a failed run would land is not part of its identity
        result.checkpoint.info["config"].erase("resume_path");
    };

    const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
    for (long step = start_step; step < total; ++step) {
        auto grads = m.zero_grads();
        double reward_sum = 0.0, kl_sum = 0.0, tfsf_sum = 0.0, stcqa_sum = 0.0;
        int tfsf_n = 0, stcqa_n = 0, flat_groups = 0;
        std::vector<GroupRollout> groups;
        try {
            for (int b = 0; b < config.batch_size; ++b) {
                const auto& rec = records[next_prompt(step)];
                const auto seq = encode_record(rec, result.checkpoint, opts);
                GroupRollout g;
                g.prompt = seq.prompt();
                model::GenerateOptions gen;
                gen.mode = model::DecodeMode::temperature;
                gen.temperature = config.temperature;
                gen.max_new = config.max_new_tokens;
                gen.seed = split_seed(config.seed, static_cast<std::uint64_t>(step * config.batch_size + b) + 1000);
                for (auto& o : model::generate_group(m, result.checkpoint.vocab, g.prompt, rec.task, L, gen, config.group_size)) {
                    g.rewards.push_back(completion_reward(rec, o.tokens, result.checkpoint, source, config));
                    g.choice_mask.push_back(choice_mask(o.tokens, rec.task, result.checkpoint.vocab));
                    g.completions.push_back(std::move(o.tokens));
                }
                g.advantages = group_advantages(g.rewards);
                const double mean_r = std::accumulate(g.rewards.begin(), g.rewards.end(), 0.0) / static_cast<double>(g.rewards.size());
                reward_sum += mean_r;
                if (rec.task == Task::tfsf) tfsf_sum += mean_r, ++tfsf_n;
                else stcqa_sum += mean_r, ++stcqa_n;
                if (std::all_of(g.advantages.begin(), g.advantages.end(), [](double a) { return a == 0.0; })) ++flat_groups;
                groups.push_back(std::move(g));
            }
        } catch (const TransportError&) {
            finish(step);
            if (!config.resume_path.empty()) result.checkpoint.save(config.resume_path);
            throw;
        } catch (const MalformedResponse&) {
            finish(step);
            if (!config.resume_path.empty()) result.checkpoint.save(config.resume_path);
            throw;
        }
        for (const auto& g : groups) kl_sum += grpo_impl(m, reference.model, g, config, inv_batch, grads);
        const double lr = lr_at(step, total, config);
        const double norm = opt.step(m.params(), grads, lr);
        if ((step + 1) % config.log_every == 0 || step + 1 == total || step == start_step) {
            json e = {{"step", step + 1},
                      {"lr", lr},
                      {"reward", reward_sum * inv_batch},
                      {"kl", kl_sum * inv_batch},
                      {"grad_norm", norm},
                      {"zero_advantage_groups", flat_groups}};
            if (tfsf_n) e["reward_tfsf"] = tfsf_sum / tfsf_n;
            if (stcqa_n) e["reward_stcqa"] = stcqa_sum / stcqa_n;
            result.log.push_back(std::move(e));
        }
    }
    result.steps = total - start_step;
    finish(total);
    return result;
}

RewardSummary mean_verifiable_reward(const PolicyCheckpoint& policy, const std::vector<PromptRecord>& records, const RewardSource& source,
                                     const StageConfig& config, const model::GenerateOptions& decode) {
    check_vro_records(records);
    const int L = policy.tokenizer.config().sequence_length();
    RewardSummary s;
    double tf = 0.0, qa = 0.0, sir = 0.0, sit = 0.0;
    for (const auto& rec : records) {
        const auto seq = encode_record(rec, policy, {});
        auto opts = decode;
        opts.max_new = config.max_new_tokens;
        const auto g = model::generate(policy.model, policy.vocab, seq.prompt(), rec.task, L, opts);
        rewards::RewardBreakdown b;
        const double r = completion_reward(rec, g.tokens, policy, source, config, &b);
        if (rec.task == Task::tfsf) {
            tf += r, sir += b.s_ir, sit += b.s_it;
            ++s.tfsf;
        } else {
            qa += r;
            ++s.stcqa;
        }
    }
    const int n = s.tfsf + s.stcqa;
    s.mean = (tf + qa) / n;
    if (s.tfsf) {
        s.mean_tfsf = tf / s.tfsf;
        s.mean_s_ir = sir / s.tfsf;
        s.mean_s_it = sit / s.tfsf;
    }
    if (s.stcqa) s.mean_stcqa = qa / s.stcqa;
    return s;
}

double mean_policy_kl(const PolicyCheckpoint& policy, const PolicyCheckpoint& reference, const std::vector<PromptRecord>& records, int max_new_tokens) {
    const int L = policy.tokenizer.config().sequence_length();
    double sum = 0.0;
    long n = 0;
    for (const auto& rec : records) {
        const auto seq = encode_record(rec, policy, {});
        model::GenerateOptions opts;
        opts.max_new = max_new_tokens;
        auto prompt = seq.prompt();
        const auto g = model::generate(policy.model, policy.vocab, prompt, rec.task, L, opts);
        if (g.tokens.empty()) continue;
        auto ids = prompt;
        ids.insert(ids.end(), g.tokens.begin(), g.tokens.end());
        const int tb = static_cast<int>(prompt.size());
        const model::Matrix<double> p = policy.model.target_log_softmax(ids, tb).cast<double>();
        const model::Matrix<double> q = reference.model.target_log_softmax(ids, tb).cast<double>();
        for (double k : token_kl(p, q)) sum += k, ++n;
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

} // namespace rswm::training
