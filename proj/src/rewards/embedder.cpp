#include "rswm/rewards/embedder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rswm/common/binary_io.hpp"
#include "rswm/common/errors.hpp"
#include "rswm/common/hash.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/model/autograd.hpp"
#include "rswm/model/transformer.hpp"

namespace rswm::rewards {

using nlohmann::json;
using M = Embedder::M;

namespace {

constexpr char kMagic[8] = {'R', 'S', 'W', 'M', 'E', 'M', 'B', '1'};
constexpr std::size_t kParamCount = 8;

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

float gelu(float a) {
    constexpr float c = 0.7978845608028654f;
    return 0.5f * a * (1.0f + std::tanh(c * (a + 0.044715f * a * a * a)));
}

Embedding branch(const Eigen::RowVectorXf& x, const M& w1, const M& b1, const M& w2, const M& b2) {
    Eigen::RowVectorXf h = x * w1 + b1;
    for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = gelu(h(i));
    const Eigen::RowVectorXf y = h * w2 + b2;
    Embedding e = y.transpose().cast<double>();
    const double n = e.norm();
    if (n > 0) e /= n;
    return e;
}

M stack(const std::vector<Eigen::RowVectorXf>& rows, const std::vector<std::size_t>& idx) {
    M out(static_cast<Eigen::Index>(idx.size()), rows[idx[0]].size());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[idx[i]];
    return out;
}

json header_body(const Embedder& e) {
    json tensors = json::array();
    const auto names = Embedder::param_names();
    for (std::size_t k = 0; k < e.params().size(); ++k)
        tensors.push_back({{"name", names[k]}, {"rows", e.params()[k].rows()}, {"cols", e.params()[k].cols()}});
    return {{"format", "rswm-embedder"}, {"version", 1}, {"config", to_json(e.config())}, {"frozen", e.frozen()},
            {"holdout_top1", e.holdout_top1}, {"holdout_pairs", e.holdout_pairs}, {"loss_curve", e.loss_curve}, {"tensors", tensors}};
}

std::vector<std::uint8_t> tensor_blob(const Embedder& e) {
    std::vector<std::uint8_t> blob;
    for (const auto& p : e.params()) io::append_f32<float>(blob, std::span<const float>(p.data(), static_cast<std::size_t>(p.size())));
    return blob;
}

std::string hash_of(const json& body, const std::vector<std::uint8_t>& blob) {
    Sha256 h;
    h.update(std::string_view(body.dump()));
    h.update(std::span<const std::uint8_t>(blob));
    return h.hex_digest();
}

} // namespace

void EmbedderConfig::validate() const {
    if (dim < 2 || hidden < 1 || pool < 1 || text_buckets < 16 || pair_window < 0) throw ConfigError("embedder: invalid architecture sizes");
    if (!(temperature > 0)) throw ConfigError("embedder: temperature must be positive");
    if (steps < 0 || batch < 2 || !(learning_rate > 0)) throw ConfigError("embedder: invalid training settings");
    if (!(holdout_fraction > 0 && holdout_fraction < 1)) throw ConfigError("embedder: holdout_fraction must lie in (0, 1)");
    if (min_pairs < 2) throw ConfigError("embedder: min_pairs must be >= 2");
}

json to_json(const EmbedderConfig& c) {
    return {{"dim", c.dim},
            {"hidden", c.hidden},
            {"pool", c.pool},
            {"text_buckets", c.text_buckets},
            {"pair_window", c.pair_window},
            {"temperature", c.temperature},
            {"steps", c.steps},
            {"batch", c.batch},
            {"learning_rate", c.learning_rate},
            {"holdout_fraction", c.holdout_fraction},
            {"min_pairs", c.min_pairs}};
}

EmbedderConfig embedder_config_from_json(const json& j) {
    EmbedderConfig c;
    if (!j.is_object()) throw ConfigError("embedder: section must be an object");
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "dim") c.dim = v.get<int>();
            else if (k == "hidden") c.hidden = v.get<int>();
            else if (k == "pool") c.pool = v.get<int>();
            else if (k == "text_buckets") c.text_buckets = v.get<int>();
            else if (k == "pair_window") c.pair_window = v.get<int>();
            else if (k == "temperature") c.temperature = v.get<double>();
            else if (k == "steps") c.steps = v.get<int>();
            else if (k == "batch") c.batch = v.get<int>();
            else if (k == "learning_rate") c.learning_rate = v.get<double>();
            else if (k == "holdout_fraction") c.holdout_fraction = v.get<double>();
            else if (k == "min_pairs") c.min_pairs = v.get<int>();
            else throw ConfigError("embedder: unknown key '" + k + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("embedder: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<std::string> Embedder::param_names() {
    return {"img_w1", "img_b1", "img_w2", "img_b2", "txt_w1", "txt_b1", "txt_w2", "txt_b2"};
}

Embedder::Embedder(EmbedderConfig config, std::vector<M> params) : config_(config), params_(std::move(params)) {
    config_.validate();
    require(params_.size() == kParamCount, "embedder: expected eight tensors");
    const Eigen::Index fi = 3 * config_.pool * config_.pool;
    require(params_[0].rows() == fi && params_[0].cols() == config_.hidden && params_[4].rows() == config_.text_buckets &&
                params_[2].cols() == config_.dim && params_[6].cols() == config_.dim,
            "embedder: tensor shapes do not match the config");
}

Eigen::RowVectorXf Embedder::image_features(const Image& image, const EmbedderConfig& c) {
    require(image.height % c.pool == 0 && image.width % c.pool == 0, "embedder: image size not divisible by the pool grid");
    const int bh = image.height / c.pool, bw = image.width / c.pool;
    Eigen::RowVectorXf f = Eigen::RowVectorXf::Zero(3 * c.pool * c.pool);
    const float inv = 1.0f / static_cast<float>(bh * bw);
    for (int r = 0; r < image.height; ++r)
        for (int col = 0; col < image.width; ++col)
            for (int ch = 0; ch < 3; ++ch) f(((r / bh) * c.pool + col / bw) * 3 + ch) += image.at(r, col, ch) * inv;
    f.array() -= 0.5f;
    return f;
}

Eigen::RowVectorXf Embedder::text_features(const std::string& text, const EmbedderConfig& c) {
    std::vector<std::string> words;
    std::istringstream in(text);
    for (std::string w; in >> w;) {
        for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        words.push_back(w);
    }
    Eigen::RowVectorXf f = Eigen::RowVectorXf::Zero(c.text_buckets);
    const auto buckets = static_cast<std::uint64_t>(c.text_buckets);
    for (std::size_t i = 0; i < words.size(); ++i) {
        f(static_cast<Eigen::Index>(fnv1a("u:" + words[i]) % buckets)) += 1.0f;
        for (std::size_t j = i + 1; j < words.size() && j <= i + static_cast<std::size_t>(c.pair_window); ++j)
            f(static_cast<Eigen::Index>(fnv1a("p:" + words[i] + "|" + words[j]) % buckets)) += 1.0f;
    }
    const float n = f.norm();
    if (n > 0) f /= n;
    return f;
}

Embedding Embedder::embed_image(const Image& image) const {
    require(params_.size() == kParamCount, "embedder: not initialized");
    return branch(image_features(image, config_), params_[0], params_[1], params_[2], params_[3]);
}

Embedding Embedder::embed_text(const std::string& text) const {
    require(params_.size() == kParamCount, "embedder: not initialized");
    return branch(text_features(text, config_), params_[4], params_[5], params_[6], params_[7]);
}

std::vector<std::uint8_t> Embedder::to_bytes() const {
    json header = header_body(*this);
    const auto blob = tensor_blob(*this);
    header["content_hash"] = hash_of(header_body(*this), blob);
    const std::string text = header.dump();
    std::ostringstream out;
    out.write(kMagic, 8);
    io::write_u32(out, static_cast<std::uint32_t>(text.size()));
    out << text;
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    const std::string s = out.str();
    return {s.begin(), s.end()};
}

Embedder Embedder::from_bytes(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12 || !std::equal(kMagic, kMagic + 8, reinterpret_cast<const char*>(bytes.data()))) throw FormatError("embedder: bad magic");
    std::uint32_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 8, 4);
    if (12 + static_cast<std::size_t>(hlen) > bytes.size()) throw FormatError("embedder: truncated header");
    try {
        const json header = json::parse(std::string(reinterpret_cast<const char*>(bytes.data()) + 12, hlen));
        const auto config = embedder_config_from_json(header.at("config"));
        std::vector<M> params;
        std::size_t offset = 12 + hlen;
        for (const auto& t : header.at("tensors")) {
            M p(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
            io::read_f32<float>(bytes, offset, std::span<float>(p.data(), static_cast<std::size_t>(p.size())));
            params.push_back(std::move(p));
        }
        if (offset != bytes.size()) throw FormatError("embedder: trailing bytes");
        Embedder e(config, std::move(params));
        e.holdout_top1 = header.at("holdout_top1").get<double>();
        e.holdout_pairs = header.at("holdout_pairs").get<int>();
        e.loss_curve = header.at("loss_curve").get<std::vector<double>>();
        if (header.at("frozen").get<bool>()) e.freeze();
        if (e.content_hash() != header.at("content_hash").get<std::string>()) throw FormatError("embedder: content hash mismatch");
        return e;
    } catch (const json::exception& ex) {
        throw FormatError(std::string("embedder: ") + ex.what());
    } catch (const InvalidInput& ex) {
        throw FormatError(std::string("embedder: ") + ex.what());
    }
}

std::string Embedder::content_hash() const { return hash_of(header_body(*this), tensor_blob(*this)); }

void Embedder::save(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidInput("cannot write embedder: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Embedder Embedder::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot read embedder: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(bytes);
}

double retrieval_top1(const Embedder& e, const std::vector<ImageText>& pairs, int candidates) {
    require(candidates >= 2, "retrieval: need at least two candidates");
    const std::size_t groups = pairs.size() / static_cast<std::size_t>(candidates);
    require(groups > 0, "retrieval: fewer pairs than candidates");
    int hits = 0;
    for (std::size_t g = 0; g < groups; ++g) {
        std::vector<Embedding> img, txt;
        for (int i = 0; i < candidates; ++i) {
            const auto& p = pairs[g * static_cast<std::size_t>(candidates) + static_cast<std::size_t>(i)];
            img.push_back(e.embed_image(p.image));
            txt.push_back(e.embed_text(p.text));
        }
        for (int i = 0; i < candidates; ++i) {
            int best = 0;
            double best_s = -2;
            for (int j = 0; j < candidates; ++j) {
                const double s = img[static_cast<std::size_t>(i)].dot(txt[static_cast<std::size_t>(j)]);
                if (s > best_s) {
                    best_s = s;
                    best = j;
                }
            }
            hits += best == i ? 1 : 0;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(groups * static_cast<std::size_t>(candidates));
}

Embedder train_embedder(const std::vector<ImageText>& pairs, const EmbedderConfig& config, std::uint64_t seed) {
    config.validate();
    if (static_cast<int>(pairs.size()) < config.min_pairs)
        throw InvalidInput("train_embedder: " + std::to_string(pairs.size()) + " pairs, need at least " + std::to_string(config.min_pairs));

    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    const auto n_hold = std::max<std::size_t>(static_cast<std::size_t>(config.holdout_fraction * static_cast<double>(pairs.size())), 1);
    const std::vector<std::size_t> hold(order.end() - static_cast<std::ptrdiff_t>(n_hold), order.end());
    std::vector<std::size_t> train(order.begin(), order.end() - static_cast<std::ptrdiff_t>(n_hold));
    require(train.size() >= static_cast<std::size_t>(config.batch), "train_embedder: fewer training pairs than one batch");

    std::vector<Eigen::RowVectorXf> img_f(pairs.size()), txt_f(pairs.size());
    for (std::size_t i : train) {
        img_f[i] = Embedder::image_features(pairs[i].image, config);
        txt_f[i] = Embedder::text_features(pairs[i].text, config);
    }

    const int fi = 3 * config.pool * config.pool, H = config.hidden, d = config.dim;
    auto normal = [&](int r, int c, double std) {
        M m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal(0.0, std));
        return m;
    };
    std::vector<M> params = {normal(fi, H, 1.0 / std::sqrt(fi)), M::Zero(1, H), normal(H, d, 1.0 / std::sqrt(H)), M::Zero(1, d),
                             normal(config.text_buckets, H, 1.0), M::Zero(1, H),  normal(H, d, 1.0 / std::sqrt(H)), M::Zero(1, d)};
    model::AdamW<float> opt(params, {});
    std::vector<double> curve;
    std::size_t cursor = train.size();
    std::vector<std::size_t> batch(static_cast<std::size_t>(config.batch));
    for (int step = 0; step < config.steps; ++step) {
        for (auto& b : batch) {
            if (cursor == train.size()) {
                for (std::size_t i = train.size(); i > 1; --i)
                    std::swap(train[i - 1], train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
                cursor = 0;
            }
            b = train[cursor++];
        }
        model::Tape<float> tape;
        std::vector<int> leaf;
        for (const auto& p : params) leaf.push_back(tape.leaf(p, true));
        const auto xi = tape.leaf(stack(img_f, batch), false);
        const auto xt = tape.leaf(stack(txt_f, batch), false);
        auto mlp = [&](int x, int k) {
            const auto h = tape.gelu(tape.add_row(tape.matmul(x, leaf[static_cast<std::size_t>(k)]), leaf[static_cast<std::size_t>(k + 1)]));
            return tape.normalize_rows(tape.add_row(tape.matmul(h, leaf[static_cast<std::size_t>(k + 2)]), leaf[static_cast<std::size_t>(k + 3)]));
        };
        const auto loss = tape.contrastive_loss(mlp(xi, 0), mlp(xt, 4), static_cast<float>(config.temperature));
        tape.backward(loss);
        std::vector<M> grads;
        for (std::size_t k = 0; k < params.size(); ++k) grads.push_back(tape.grad(leaf[k]));
        const double progress = config.steps > 1 ? static_cast<double>(step) / (config.steps - 1) : 1.0;
        const double lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress)));
        opt.step(params, grads, lr);
        curve.push_back(tape.value(loss)(0, 0));
    }

    Embedder e(config, std::move(params));
    std::vector<ImageText> held;
    for (std::size_t i : hold) held.push_back(pairs[i]);
    const int candidates = std::min<int>(64, static_cast<int>(held.size()));
    e.holdout_pairs = static_cast<int>(held.size());
    e.holdout_top1 = candidates >= 2 ? retrieval_top1(e, held, candidates) : 0.0;
    e.loss_curve = std::move(curve);
    e.freeze();
    return e;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    require(na > 0 && nb > 0, "cosine: zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double cosine(const Embedding& a, const Embedding& b) {
    return cosine(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())), std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

RewardBreakdown combine_tfsf(double s_it, double s_ir, double lambda) {
    require(lambda >= 0, "reward_tfsf: lambda must be non-negative");
    return {s_it, s_ir, lambda, s_it + lambda * s_ir};
}

RewardBreakdown reward_tfsf(const Embedder& embedder, const tokenizer::Tokenizer& tok, const tokenizer::VisualTokens& generated,
                            const std::string& instruction, const Image& current, double lambda) {
    require(embedder.frozen(), "reward_tfsf: embedder must be frozen");
    const auto gen = embedder.embed_image(tok.decode(generated));
    return combine_tfsf(cosine(gen, embedder.embed_text(instruction)), cosine(gen, embedder.embed_image(current)), lambda);
}

} // namespace rswm::rewards
