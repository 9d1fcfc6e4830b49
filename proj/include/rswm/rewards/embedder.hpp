#pragma once

// Frozen image/text dual encoder and the forecasting reward built on it.
//
// Image branch: average-pooled RGB grid -> MLP. Text branch: hashed unigram
// and windowed word-pair counts -> MLP. Both end in a unit-norm d-vector and
// are trained with a symmetric contrastive loss on matched pairs.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "rswm/common/image.hpp"
#include "rswm/tokenizer.hpp"

namespace rswm::rewards {

using Embedding = Eigen::VectorXd;

struct EmbedderConfig {
    int dim = 32;
    int hidden = 256;
    int pool = 8;            // image is average-pooled to pool x pool
    int text_buckets = 2048; // hashed text features
    int pair_window = 4;     // word pairs up to this distance apart
    double temperature = 0.07;
    int steps = 3000;
    int batch = 64;
    double learning_rate = 2e-3;
    double holdout_fraction = 0.1;
    int min_pairs = 1000;

    void validate() const;
    bool operator==(const EmbedderConfig&) const = default;
};

nlohmann::json to_json(const EmbedderConfig& c);
EmbedderConfig embedder_config_from_json(const nlohmann::json& j);

struct ImageText {
    Image image;
    std::string text;
};

class Embedder {
public:
    using M = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    Embedder() = default;
    Embedder(EmbedderConfig config, std::vector<M> params);

    const EmbedderConfig& config() const { return config_; }
    const std::vector<M>& params() const { return params_; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    Embedding embed_image(const Image& image) const;
    Embedding embed_text(const std::string& text) const;

    /// Raw branch inputs (rows of the first layer).
    static Eigen::RowVectorXf image_features(const Image& image, const EmbedderConfig& c);
    static Eigen::RowVectorXf text_features(const std::string& text, const EmbedderConfig& c);

    /// Held-out retrieval accuracy measured at the end of training.
    double holdout_top1 = 0.0;
    int holdout_pairs = 0;
    std::vector<double> loss_curve;

    std::vector<std::uint8_t> to_bytes() const;
    static Embedder from_bytes(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static Embedder load(const std::filesystem::path& path);
    std::string content_hash() const;

    /// Parameter tensor names in storage order.
    static std::vector<std::string> param_names();

private:
    EmbedderConfig config_;
    std::vector<M> params_; // img_w1 img_b1 img_w2 img_b2 txt_w1 txt_b1 txt_w2 txt_b2
    bool frozen_ = false;
};

/// Trains on `pairs` minus a seeded held-out slice, records held-out top-1 retrieval, freezes.
Embedder train_embedder(const std::vector<ImageText>& pairs, const EmbedderConfig& config, std::uint64_t seed);

/// Image-to-text top-1 accuracy: pairs are taken in consecutive groups of `candidates`
/// (a trailing partial group is dropped) and each image must rank its own text first.
double retrieval_top1(const Embedder& e, const std::vector<ImageText>& pairs, int candidates = 64);

/// dot(a, b) / (|a| |b|); throws for zero vectors or unequal sizes.
double cosine(std::span<const double> a, std::span<const double> b);
double cosine(const Embedding& a, const Embedding& b);

struct RewardBreakdown {
    double s_it = 0.0; // generated image vs instruction
    double s_ir = 0.0; // generated image vs current image
    double lambda = 0.0;
    double r_tfsf = 0.0;
};

/// r = s_it + lambda * s_ir.
RewardBreakdown combine_tfsf(double s_it, double s_ir, double lambda);

/// Decodes `generated`, embeds it and scores it against the instruction and the current image.
RewardBreakdown reward_tfsf(const Embedder& embedder, const tokenizer::Tokenizer& tok, const tokenizer::VisualTokens& generated,
                            const std::string& instruction, const Image& current, double lambda);

} // namespace rswm::rewards
