#pragma once

// Decoder-only transformer over the unified vocabulary: learned absolute
// positions, pre-norm blocks, GELU feed-forward, one embedding table and one
// output head. Scalar type is float for training and double for gradient checks.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rswm/model/autograd.hpp"
#include "rswm/model/vocab.hpp"
#include "rswm/tokenizer.hpp"

namespace rswm::model {

struct ModelConfig {
    int layers = 4;
    int heads = 4;
    int width = 128;
    int context = 512;
    double dropout = 0.0; // only 0 is supported
    int vocab_size = 0;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename S>
class Transformer {
public:
    using M = Matrix<S>;

    Transformer() = default;
    Transformer(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::vector<M>& params() { return params_; }
    const std::vector<M>& params() const { return params_; }
    /// Tensor names in storage order.
    static std::vector<std::string> param_names(const ModelConfig& c);
    std::size_t parameter_count() const;
    /// Zero tensors shaped like the parameters.
    std::vector<M> zero_grads() const;

    /// Row i holds the logits for the token after position i.
    M forward_logits(std::span<const int> ids) const;
    /// Each sequence evaluated independently.
    std::vector<M> forward_batch(const std::vector<std::vector<int>>& batch) const {
        std::vector<M> out;
        for (const auto& ids : batch) out.push_back(forward_logits(ids));
        return out;
    }
    /// Log-softmax rows at the positions predicting ids[target_begin..]; n_target x V.
    M target_log_softmax(std::span<const int> ids, int target_begin) const;

    /// sum_i nll_coef[i] * -log p(target i) + kl_coef[i] * KL(p_i || exp(ref_logp row i)) over target
    /// positions. Gradients are added to `grads` when non-null.
    S objective(std::span<const int> ids, int target_begin, std::span<const S> nll_coef, const M* ref_logp,
                std::span<const S> kl_coef, std::vector<M>* grads) const;

    /// Mean negative log-likelihood over the target span.
    S ar_loss(const TokenSequence& seq, std::vector<M>* grads = nullptr) const;
    /// log p(ids[t] | ids[<t]) for t in [begin, end).
    std::vector<S> sequence_logprobs(std::span<const int> ids, int begin, int end) const;

    template <typename T>
    Transformer<T> cast() const {
        Transformer<T> out;
        out.config_ = config_;
        for (const auto& p : params_) out.params_.push_back(p.template cast<T>());
        return out;
    }

    bool operator==(const Transformer& o) const { return config_ == o.config_ && params_ == o.params_; }

private:
    template <typename>
    friend class Transformer;
    template <typename>
    friend class Decoder;

    void check_ids(std::span<const int> ids) const;
    /// Final-norm hidden states; param leaf ids are appended to `leaves`.
    typename Tape<S>::Id build(Tape<S>& tape, std::span<const int> ids, bool needs_grad, std::vector<int>& leaves) const;

    ModelConfig config_;
    std::vector<M> params_;
};

/// Incremental decoding with a key/value cache. Copyable, so a prefilled
/// prompt can be shared by several samples.
template <typename S>
class Decoder {
public:
    using M = Matrix<S>;
    using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;

    explicit Decoder(const Transformer<S>& model);
    /// Appends a token; returns the logits for the next one.
    Row step(int token);
    int length() const { return length_; }

private:
    const Transformer<S>* model_;
    std::vector<M> keys_;
    std::vector<M> values_;
    int length_ = 0;
};

enum class DecodeMode { greedy, temperature, top_k };

struct GenerateOptions {
    DecodeMode mode = DecodeMode::greedy;
    double temperature = 1.0;
    int top_k = 0;
    int max_new = 256;     // text tasks
    bool constrained = true;
    std::uint64_t seed = 0;
};

std::string_view to_string(DecodeMode m);
DecodeMode decode_mode_from_string(std::string_view s);

struct Generation {
    std::vector<int> tokens; // generated ids only
    std::vector<double> step_logprobs; // log-softmax of the chosen id under the full (unmasked) logits
};

/// Samples a completion. Forecasting tasks emit [BOI] + exactly L visual ids + [EOI];
/// question answering emits words until [EOS], max_new or the context limit.
Generation generate(const Transformer<float>& model, const Vocabulary& vocab, std::span<const int> prompt, corpus::Task task,
                    int image_tokens, const GenerateOptions& options);

/// `count` samples of one prompt sharing a single prefill; sample i uses seed split_seed(options.seed, i).
std::vector<Generation> generate_group(const Transformer<float>& model, const Vocabulary& vocab, std::span<const int> prompt,
                                       corpus::Task task, int image_tokens, const GenerateOptions& options, int count);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0; // <= 0 disables clipping
};

template <typename S>
class AdamW {
public:
    using M = Matrix<S>;
    AdamW() = default;
    AdamW(const std::vector<M>& params, AdamWConfig config);
    /// One update; returns the global gradient norm before clipping.
    double step(std::vector<M>& params, const std::vector<M>& grads, double lr);
    long steps() const { return t_; }

private:
    AdamWConfig config_;
    std::vector<M> m_, v_;
    long t_ = 0;
};

enum class Stage { init, gagp, sit, vro };
std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);

struct PolicyCheckpoint {
    static constexpr int kVersion = 1;
    ModelConfig config;
    Vocabulary vocab;
    tokenizer::Tokenizer tokenizer;
    Transformer<float> model;
    Stage stage = Stage::init;
    std::string rng_state;
    nlohmann::json info = nlohmann::json::object(); // training provenance: steps, corpus hash, config echo

    std::vector<std::uint8_t> to_bytes() const;
    static PolicyCheckpoint from_bytes(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static PolicyCheckpoint load(const std::filesystem::path& path);
    /// SHA-256 over header fields, tensors and the embedded tokenizer.
    std::string content_hash() const;
};

/// Fresh policy for a vocabulary and tokenizer.
PolicyCheckpoint init_policy(ModelConfig config, Vocabulary vocab, tokenizer::Tokenizer tok, std::uint64_t seed);

} // namespace rswm::model
