#include "rswm/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "rswm/common/binary_io.hpp"
#include "rswm/common/errors.hpp"
#include "rswm/common/hash.hpp"
#include "rswm/common/rng.hpp"

namespace rswm::tokenizer {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'R', 'S', 'W', 'M', 'T', 'O', 'K', '1'};
constexpr int kFormatVersion = 1;

void fill_normal(Mat& m, Rng& rng, double stddev) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.normal(0.0, stddev);
}

Mat tanh_of(const Mat& m) { return m.array().tanh().matrix(); }

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_to_f32(Mat& m) { m = m.unaryExpr(&round_f32); }
void round_to_f32(Vec& v) { v = v.unaryExpr(&round_f32); }

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int t = 0;
    Network m, v;

    explicit Adam(const Network& net) : m(Network::zeros_like(net)), v(Network::zeros_like(net)) {}

    void step(Network& net, const Network& grad, double lr) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
        auto update = [&](auto& p, const auto& g, auto& mm, auto& vv) {
            mm = beta1 * mm + (1.0 - beta1) * g;
            vv = beta2 * vv + (1.0 - beta2) * g.cwiseProduct(g);
            p.array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
        };
        auto pt = net.tensors();
        auto gt = grad.tensors();
        auto mt = m.tensors(), vt = v.tensors();
        for (std::size_t i = 0; i < pt.size(); ++i) update(*pt[i], *gt[i], *mt[i], *vt[i]);
        auto pb = net.biases();
        auto gb = grad.biases();
        auto mb = m.biases(), vb = v.biases();
        for (std::size_t i = 0; i < pb.size(); ++i) update(*pb[i], *gb[i], *mb[i], *vb[i]);
    }
};

} // namespace

void TokenizerConfig::validate() const {
    require(codebook_size >= 2, "tokenizer: codebook_size must be >= 2");
    require(grid_side > 0 && latent_dim > 0 && hidden > 0 && image_side > 0, "tokenizer: sizes must be positive");
    require(image_side % grid_side == 0, "tokenizer: image side must be divisible by grid_side");
    require(steps >= 0 && batch_images > 0, "tokenizer: invalid training schedule");
    require(ema_decay > 0.0 && ema_decay < 1.0, "tokenizer: ema_decay must be in (0, 1)");
    require(dead_code_steps > 0, "tokenizer: dead_code_steps must be positive");
}

json to_json(const TokenizerConfig& c) {
    return {{"codebook_size", c.codebook_size}, {"grid_side", c.grid_side},     {"latent_dim", c.latent_dim},
            {"image_side", c.image_side},       {"hidden", c.hidden},           {"steps", c.steps},
            {"batch_images", c.batch_images},   {"learning_rate", c.learning_rate}, {"ema_decay", c.ema_decay},
            {"commitment", c.commitment},       {"dead_code_steps", c.dead_code_steps}};
}

TokenizerConfig tokenizer_config_from_json(const json& j) {
    TokenizerConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "codebook_size") c.codebook_size = value.get<int>();
        else if (key == "grid_side") c.grid_side = value.get<int>();
        else if (key == "latent_dim") c.latent_dim = value.get<int>();
        else if (key == "image_side") c.image_side = value.get<int>();
        else if (key == "hidden") c.hidden = value.get<int>();
        else if (key == "steps") c.steps = value.get<int>();
        else if (key == "batch_images") c.batch_images = value.get<int>();
        else if (key == "learning_rate") c.learning_rate = value.get<double>();
        else if (key == "ema_decay") c.ema_decay = value.get<double>();
        else if (key == "commitment") c.commitment = value.get<double>();
        else if (key == "dead_code_steps") c.dead_code_steps = value.get<int>();
        else throw ConfigError("tokenizer: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

Quantized quantize_latent(std::span<const double> v, const Mat& codebook) {
    require(static_cast<Eigen::Index>(v.size()) == codebook.cols(), "quantize_latent: dimension mismatch");
    require(codebook.rows() > 0, "quantize_latent: empty codebook");
    Quantized best{0, std::numeric_limits<double>::infinity()};
    for (Eigen::Index k = 0; k < codebook.rows(); ++k) {
        double d = 0.0;
        for (Eigen::Index i = 0; i < codebook.cols(); ++i) {
            const double diff = v[static_cast<std::size_t>(i)] - codebook(k, i);
            d += diff * diff;
        }
        if (d < best.distance) best = {static_cast<int>(k), d};
    }
    return best;
}

Network Network::init(const TokenizerConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    const int p = c.patch_dim();
    Network n;
    n.enc_w1 = Mat(c.hidden, p);
    n.enc_w2 = Mat(c.latent_dim, c.hidden);
    n.dec_w1 = Mat(c.hidden, c.latent_dim);
    n.dec_w2 = Mat(p, c.hidden);
    fill_normal(n.enc_w1, rng, 1.0 / std::sqrt(p));
    fill_normal(n.enc_w2, rng, 1.0 / std::sqrt(c.hidden));
    fill_normal(n.dec_w1, rng, 1.0 / std::sqrt(c.latent_dim));
    fill_normal(n.dec_w2, rng, 1.0 / std::sqrt(c.hidden));
    n.enc_b1 = Vec::Zero(c.hidden);
    n.enc_b2 = Vec::Zero(c.latent_dim);
    n.dec_b1 = Vec::Zero(c.hidden);
    n.dec_b2 = Vec::Constant(p, 0.4);
    return n;
}

Network Network::zeros_like(const Network& n) {
    Network z;
    auto src = n.tensors();
    auto dst = z.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = Mat::Zero(src[i]->rows(), src[i]->cols());
    auto sb = n.biases();
    auto db = z.biases();
    for (std::size_t i = 0; i < sb.size(); ++i) *db[i] = Vec::Zero(sb[i]->size());
    return z;
}

std::vector<Mat*> Network::tensors() { return {&enc_w1, &enc_w2, &dec_w1, &dec_w2}; }
std::vector<const Mat*> Network::tensors() const { return {&enc_w1, &enc_w2, &dec_w1, &dec_w2}; }
std::vector<Vec*> Network::biases() { return {&enc_b1, &enc_b2, &dec_b1, &dec_b2}; }
std::vector<const Vec*> Network::biases() const { return {&enc_b1, &enc_b2, &dec_b1, &dec_b2}; }

Mat Network::encode(const Mat& patches) const {
    const Mat h = tanh_of((enc_w1 * patches).colwise() + enc_b1);
    return (enc_w2 * h).colwise() + enc_b2;
}

Mat Network::decode(const Mat& latents) const {
    const Mat g = tanh_of((dec_w1 * latents).colwise() + dec_b1);
    return (dec_w2 * g).colwise() + dec_b2;
}

double composite_loss(const Network& net, const Mat& x, const Mat& assigned, const Mat& offset, double beta, Network* grad,
                      double* reconstruction) {
    const double n = static_cast<double>(x.cols());
    const double p = static_cast<double>(x.rows());
    const double d = static_cast<double>(assigned.rows());

    const Mat h1 = tanh_of((net.enc_w1 * x).colwise() + net.enc_b1);
    const Mat e = (net.enc_w2 * h1).colwise() + net.enc_b2;
    const Mat z = e + offset;
    const Mat g1 = tanh_of((net.dec_w1 * z).colwise() + net.dec_b1);
    const Mat y = (net.dec_w2 * g1).colwise() + net.dec_b2;

    const Mat ry = y - x;
    const Mat re = e - assigned;
    const double recon = ry.squaredNorm() / (n * p);
    const double commit = beta * re.squaredNorm() / (n * d);
    if (reconstruction) *reconstruction = recon;
    if (!grad) return recon + commit;

    const Mat dy = ry * (2.0 / (n * p));
    grad->dec_w2 += dy * g1.transpose();
    grad->dec_b2 += dy.rowwise().sum();
    const Mat da = (net.dec_w2.transpose() * dy).cwiseProduct((1.0 - g1.array().square()).matrix());
    grad->dec_w1 += da * z.transpose();
    grad->dec_b1 += da.rowwise().sum();
    // Straight-through: dL/dE = dL/dz, plus the commitment pull.
    const Mat de = net.dec_w1.transpose() * da + re * (2.0 * beta / (n * d));
    grad->enc_w2 += de * h1.transpose();
    grad->enc_b2 += de.rowwise().sum();
    const Mat db = (net.enc_w2.transpose() * de).cwiseProduct((1.0 - h1.array().square()).matrix());
    grad->enc_w1 += db * x.transpose();
    grad->enc_b1 += db.rowwise().sum();
    return recon + commit;
}

Mat image_to_patches(const Image& image, const TokenizerConfig& c) {
    require(image.height == c.image_side && image.width == c.image_side, "tokenizer: image size mismatch");
    const int f = c.downsample_factor();
    Mat out(c.patch_dim(), c.sequence_length());
    for (int gr = 0; gr < c.grid_side; ++gr)
        for (int gc = 0; gc < c.grid_side; ++gc) {
            const int col = gr * c.grid_side + gc;
            int k = 0;
            for (int r = 0; r < f; ++r)
                for (int cc = 0; cc < f; ++cc)
                    for (int ch = 0; ch < 3; ++ch) out(k++, col) = image.at(gr * f + r, gc * f + cc, ch);
        }
    return out;
}

Image patches_to_image(const Mat& patches, const TokenizerConfig& c) {
    const int f = c.downsample_factor();
    Image img(c.image_side, c.image_side);
    for (int gr = 0; gr < c.grid_side; ++gr)
        for (int gc = 0; gc < c.grid_side; ++gc) {
            const int col = gr * c.grid_side + gc;
            int k = 0;
            for (int r = 0; r < f; ++r)
                for (int cc = 0; cc < f; ++cc)
                    for (int ch = 0; ch < 3; ++ch)
                        img.at(gr * f + r, gc * f + cc, ch) = static_cast<float>(std::clamp(patches(k++, col), 0.0, 1.0));
        }
    return img;
}

Tokenizer::Tokenizer(TokenizerConfig config, Network net, Mat codebook)
    : config_(config), net_(std::move(net)), codebook_(std::move(codebook)) {
    config_.validate();
    require(codebook_.rows() == config_.codebook_size && codebook_.cols() == config_.latent_dim,
            "tokenizer: codebook shape mismatch");
}

VisualTokens Tokenizer::encode(const Image& image) const {
    const Mat e = net_.encode(image_to_patches(image, config_));
    VisualTokens out;
    out.codes.resize(static_cast<std::size_t>(e.cols()));
    for (Eigen::Index j = 0; j < e.cols(); ++j) {
        out.codes[static_cast<std::size_t>(j)] = quantize_latent(std::span<const double>(e.col(j).data(), e.rows()), codebook_).index;
    }
    return out;
}

Image Tokenizer::decode(const VisualTokens& tokens) const {
    require(static_cast<int>(tokens.codes.size()) == config_.sequence_length(), "tokenizer: wrong number of visual tokens");
    Mat z(config_.latent_dim, config_.sequence_length());
    for (std::size_t j = 0; j < tokens.codes.size(); ++j) {
        const int code = tokens.codes[j];
        require(code >= 0 && code < config_.codebook_size, "tokenizer: visual token out of range");
        z.col(static_cast<Eigen::Index>(j)) = codebook_.row(code).transpose();
    }
    return patches_to_image(net_.decode(z), config_);
}

std::vector<std::uint8_t> Tokenizer::to_bytes() const {
    // Layout: magic | u32 header length | header JSON | fp32 tensors.
    // Tensor order: enc_w1, enc_b1, enc_w2, enc_b2, dec_w1, dec_b1, dec_w2,
    // dec_b2, codebook; each matrix column-major.
    json tensors = json::array();
    std::vector<std::uint8_t> blob;
    auto put = [&](const char* name, const auto& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
        io::append_f32(blob, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
    };
    put("enc_w1", net_.enc_w1);
    put("enc_b1", net_.enc_b1);
    put("enc_w2", net_.enc_w2);
    put("enc_b2", net_.enc_b2);
    put("dec_w1", net_.dec_w1);
    put("dec_b1", net_.dec_b1);
    put("dec_w2", net_.dec_w2);
    put("dec_b2", net_.dec_b2);
    put("codebook", codebook_);
    const json header = {{"format", "rswm-tokenizer"}, {"version", kFormatVersion}, {"config", to_json(config_)}, {"tensors", tensors}};
    const std::string text = header.dump();
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    const auto len = static_cast<std::uint32_t>(text.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), blob.begin(), blob.end());
    return out;
}

Tokenizer Tokenizer::from_bytes(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("tokenizer: bad magic");
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
    if (12 + static_cast<std::size_t>(len) > bytes.size()) throw FormatError("tokenizer: truncated header");
    json header;
    try {
        header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
    } catch (const json::exception& e) {
        throw FormatError(std::string("tokenizer: bad header: ") + e.what());
    }
    if (header.value("version", 0) != kFormatVersion) throw FormatError("tokenizer: unsupported version");
    const TokenizerConfig config = tokenizer_config_from_json(header.at("config"));
    Network net = Network::zeros_like(Network::init(config, 0));
    Mat codebook(config.codebook_size, config.latent_dim);
    std::size_t offset = 12 + len;
    auto get = [&](std::size_t i, const char* name, auto& m) {
        const auto& t = header.at("tensors").at(i);
        if (t.at("name") != name || t.at("rows").get<Eigen::Index>() != m.rows() || t.at("cols").get<Eigen::Index>() != m.cols())
            throw FormatError(std::string("tokenizer: unexpected tensor ") + name);
        io::read_f32(bytes, offset, std::span<double>(m.data(), static_cast<std::size_t>(m.size())));
    };
    get(0, "enc_w1", net.enc_w1);
    get(1, "enc_b1", net.enc_b1);
    get(2, "enc_w2", net.enc_w2);
    get(3, "enc_b2", net.enc_b2);
    get(4, "dec_w1", net.dec_w1);
    get(5, "dec_b1", net.dec_b1);
    get(6, "dec_w2", net.dec_w2);
    get(7, "dec_b2", net.dec_b2);
    get(8, "codebook", codebook);
    if (offset != bytes.size()) throw FormatError("tokenizer: trailing bytes");
    return Tokenizer(config, std::move(net), std::move(codebook));
}

void Tokenizer::save(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidInput("tokenizer: cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("tokenizer: cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(bytes);
}

std::string Tokenizer::content_hash() const { return sha256_hex(std::span<const std::uint8_t>(to_bytes())); }

Tokenizer train_codebook(const std::vector<Image>& images, const TokenizerConfig& config, std::uint64_t seed) {
    config.validate();
    const int L = config.sequence_length();
    require(static_cast<long>(images.size()) * L >= config.codebook_size, "train_codebook: fewer patches than codewords");
    const int K = config.codebook_size;
    const int D = config.latent_dim;

    std::vector<Mat> patches;
    patches.reserve(images.size());
    for (const auto& img : images) patches.push_back(image_to_patches(img, config));

    Rng rng(split_seed(seed, 1));
    Network net = Network::init(config, split_seed(seed, 0));

    auto sample_batch = [&]() {
        const int b = config.batch_images;
        Mat x(config.patch_dim(), static_cast<Eigen::Index>(b) * L);
        for (int i = 0; i < b; ++i) {
            const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(images.size()) - 1));
            x.middleCols(static_cast<Eigen::Index>(i) * L, L) = patches[idx];
        }
        return x;
    };

    // Codewords start as encodings of random training patches.
    Mat codebook(K, D);
    {
        const std::int64_t total = static_cast<std::int64_t>(images.size()) * L;
        for (int k = 0; k < K; ++k) {
            const auto flat = rng.uniform_int(0, total - 1);
            const Mat e = net.encode(patches[static_cast<std::size_t>(flat / L)].col(flat % L));
            codebook.row(k) = e.col(0).transpose();
        }
    }
    Vec cluster_size = Vec::Ones(K);
    Mat embed_sum = codebook;
    std::vector<int> last_used(static_cast<std::size_t>(K), 0);

    Adam adam(net);
    TrainingCurve curve;
    constexpr double kSmoothing = 1e-5;
    for (int step = 1; step <= config.steps; ++step) {
        const Mat x = sample_batch();
        const Mat e = net.encode(x);
        const Eigen::Index n = e.cols();
        std::vector<int> assign(static_cast<std::size_t>(n));
        Mat q(D, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            const int k = quantize_latent(std::span<const double>(e.col(j).data(), D), codebook).index;
            assign[static_cast<std::size_t>(j)] = k;
            q.col(j) = codebook.row(k).transpose();
        }

        Network grad = Network::zeros_like(net);
        double recon = 0.0;
        const double loss = composite_loss(net, x, q, q - e, config.commitment, &grad, &recon);
        const double progress = static_cast<double>(step - 1) / std::max(1, config.steps);
        const double lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
        adam.step(net, grad, lr);

        // EMA codebook update with Laplace-smoothed cluster sizes.
        Vec counts = Vec::Zero(K);
        Mat sums = Mat::Zero(K, D);
        for (Eigen::Index j = 0; j < n; ++j) {
            const int k = assign[static_cast<std::size_t>(j)];
            counts(k) += 1.0;
            sums.row(k) += e.col(j).transpose();
        }
        const double decay = config.ema_decay;
        cluster_size = decay * cluster_size + (1.0 - decay) * counts;
        embed_sum = decay * embed_sum + (1.0 - decay) * sums;
        const double total = cluster_size.sum();
        int active = 0;
        for (int k = 0; k < K; ++k) {
            const double smoothed = (cluster_size(k) + kSmoothing) / (total + K * kSmoothing) * total;
            codebook.row(k) = embed_sum.row(k) / smoothed;
            if (counts(k) > 0) {
                last_used[static_cast<std::size_t>(k)] = step;
                ++active;
            } else if (step - last_used[static_cast<std::size_t>(k)] >= config.dead_code_steps) {
                const auto j = static_cast<Eigen::Index>(rng.uniform_int(0, n - 1));
                codebook.row(k) = e.col(j).transpose();
                cluster_size(k) = 1.0;
                embed_sum.row(k) = codebook.row(k);
                last_used[static_cast<std::size_t>(k)] = step;
                ++curve.reinitialized;
            }
        }
        curve.loss.push_back(loss);
        curve.reconstruction.push_back(recon);
        curve.active_codes.push_back(active);
    }

    // Persisted tensors are fp32; round now so the in-memory model equals the saved one.
    for (auto* m : net.tensors()) round_to_f32(*m);
    for (auto* b : net.biases()) round_to_f32(*b);
    round_to_f32(codebook);
    Tokenizer tok(config, std::move(net), std::move(codebook));
    tok.set_curve(std::move(curve));
    return tok;
}

int active_codes(const Tokenizer& tok, const std::vector<Image>& images) {
    std::vector<char> used(static_cast<std::size_t>(tok.config().codebook_size), 0);
    for (const auto& img : images)
        for (int c : tok.encode(img).codes) used[static_cast<std::size_t>(c)] = 1;
    return static_cast<int>(std::count(used.begin(), used.end(), 1));
}

} // namespace rswm::tokenizer
