#pragma once

// Vector-quantized image tokenizer: image <-> L codes from a K-entry codebook.
//
// The encoder is a conv stack whose first layer has kernel = stride = patch
// size, followed by 1x1 layers. Equivalently, each non-overlapping patch is fed
// through the same small MLP, so the code grid is grid_side x grid_side.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json_fwd.hpp>

#include "rswm/common/image.hpp"

namespace rswm::tokenizer {

struct TokenizerConfig {
    int codebook_size = 64; // K
    int grid_side = 8;      // L = grid_side^2
    int latent_dim = 16;
    int image_side = 32;
    int hidden = 64;

    // training
    int steps = 3000;
    int batch_images = 16;
    double learning_rate = 2e-3;
    double ema_decay = 0.99;
    double commitment = 0.25;
    int dead_code_steps = 100;

    int downsample_factor() const { return image_side / grid_side; }
    int sequence_length() const { return grid_side * grid_side; }
    int patch_dim() const { return downsample_factor() * downsample_factor() * 3; }
    void validate() const;
    bool operator==(const TokenizerConfig&) const = default;
};

nlohmann::json to_json(const TokenizerConfig& c);
TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j);

struct VisualTokens {
    std::vector<int> codes;
    bool operator==(const VisualTokens&) const = default;
};

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct Quantized {
    int index = 0;
    double distance = 0.0; // squared Euclidean
};

/// Nearest codeword (rows of `codebook`) by squared distance, lowest index on ties.
Quantized quantize_latent(std::span<const double> v, const Mat& codebook);

/// Encoder and decoder weights. Activations are column-per-patch.
struct Network {
    Mat enc_w1; Vec enc_b1; // hidden x patch_dim
    Mat enc_w2; Vec enc_b2; // latent x hidden
    Mat dec_w1; Vec dec_b1; // hidden x latent
    Mat dec_w2; Vec dec_b2; // patch_dim x hidden

    static Network init(const TokenizerConfig& c, std::uint64_t seed);
    static Network zeros_like(const Network& n);
    Mat encode(const Mat& patches) const;
    Mat decode(const Mat& latents) const; // unclamped
    std::vector<Mat*> tensors();
    std::vector<const Mat*> tensors() const;
    std::vector<Vec*> biases();
    std::vector<const Vec*> biases() const;
};

/// Reconstruction MSE + commitment loss on a batch with a fixed assignment.
///
/// The decoder sees z = E + offset. During training offset = Q - E, so z is
/// exactly the quantized latent while gradients reach the encoder unchanged
/// (straight-through). Commitment is beta * mean ||E - Q||^2.
/// Gradients are accumulated into `grad` when non-null.
double composite_loss(const Network& net, const Mat& patches, const Mat& assigned, const Mat& offset, double beta,
                      Network* grad, double* reconstruction = nullptr);

struct TrainingCurve {
    std::vector<double> loss;
    std::vector<double> reconstruction;
    std::vector<int> active_codes;
    int reinitialized = 0;
};

class Tokenizer {
public:
    Tokenizer() = default;
    Tokenizer(TokenizerConfig config, Network net, Mat codebook);

    const TokenizerConfig& config() const { return config_; }
    const Network& network() const { return net_; }
    const Mat& codebook() const { return codebook_; }
    const TrainingCurve& curve() const { return curve_; }
    void set_curve(TrainingCurve c) { curve_ = std::move(c); }

    VisualTokens encode(const Image& image) const;
    Image decode(const VisualTokens& tokens) const;
    Image round_trip(const Image& image) const { return decode(encode(image)); }

    std::vector<std::uint8_t> to_bytes() const;
    static Tokenizer from_bytes(std::span<const std::uint8_t> bytes);
    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);
    std::string content_hash() const;

private:
    TokenizerConfig config_;
    Network net_;
    Mat codebook_; // K x latent_dim
    TrainingCurve curve_;
};

/// Image -> patch_dim x L matrix, patches in row-major grid order,
/// each patch flattened as (row, col, channel).
Mat image_to_patches(const Image& image, const TokenizerConfig& c);
Image patches_to_image(const Mat& patches, const TokenizerConfig& c);

Tokenizer train_codebook(const std::vector<Image>& images, const TokenizerConfig& config, std::uint64_t seed);

/// Number of distinct codes used when encoding `images`.
int active_codes(const Tokenizer& tok, const std::vector<Image>& images);

} // namespace rswm::tokenizer
