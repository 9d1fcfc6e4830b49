#include "rswm/model/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "rswm/common/binary_io.hpp"
#include "rswm/common/errors.hpp"
#include "rswm/common/hash.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/metadata.hpp"

namespace rswm::model {

using nlohmann::json;

namespace {

constexpr int kPerLayer = 12;
enum LayerParam { ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2 };
constexpr char kCheckpointMagic[8] = {'R', 'S', 'W', 'M', 'C', 'K', 'P', '1'};

int layer_index(int layer, LayerParam p) { return 2 + kPerLayer * layer + static_cast<int>(p); }
int final_index(const ModelConfig& c, int k) { return 2 + kPerLayer * c.layers + k; } // lnf_g, lnf_b, head_w, head_b

template <typename Row, typename G, typename B>
Row layernorm_row(const Row& x, const G& gain, const B& bias) {
    using S = typename Row::Scalar;
    const S mean = x.mean();
    const S var = (x.array() - mean).square().mean();
    const S inv = S(1) / std::sqrt(var + S(1e-5));
    return (((x.array() - mean) * inv) * gain.array() + bias.array()).matrix();
}

template <typename S>
S gelu(S a) {
    constexpr S c = S(0.7978845608028654);
    return S(0.5) * a * (S(1) + std::tanh(c * (a + S(0.044715) * a * a * a)));
}

} // namespace

void ModelConfig::validate() const {
    if (layers < 1 || heads < 1 || width < 1 || context < 2) throw ConfigError("model: layers, heads, width and context must be positive");
    if (width % heads != 0) throw ConfigError("model: width must be divisible by heads");
    if (dropout != 0.0) throw ConfigError("model: only dropout 0 is supported");
    if (vocab_size < 1) throw ConfigError("model: vocab_size must be set");
}

json to_json(const ModelConfig& c) {
    return {{"layers", c.layers}, {"heads", c.heads}, {"width", c.width}, {"context", c.context}, {"dropout", c.dropout}, {"vocab_size", c.vocab_size}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    if (!j.is_object()) throw ConfigError("model: section must be an object");
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "layers") c.layers = v.get<int>();
            else if (k == "heads") c.heads = v.get<int>();
            else if (k == "width") c.width = v.get<int>();
            else if (k == "context") c.context = v.get<int>();
            else if (k == "dropout") c.dropout = v.get<double>();
            else if (k == "vocab_size") c.vocab_size = v.get<int>();
            else throw ConfigError("model: unknown key '" + k + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    return c;
}

template <typename S>
std::vector<std::string> Transformer<S>::param_names(const ModelConfig& c) {
    static const char* layer_names[kPerLayer] = {"ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2"};
    std::vector<std::string> names = {"tok_emb", "pos_emb"};
    for (int l = 0; l < c.layers; ++l)
        for (const auto* n : layer_names) names.push_back("layer" + std::to_string(l) + "." + n);
    for (const auto* n : {"lnf_g", "lnf_b", "head_w", "head_b"}) names.emplace_back(n);
    return names;
}

template <typename S>
Transformer<S>::Transformer(ModelConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const int d = config_.width, V = config_.vocab_size, C = config_.context;
    Rng rng(seed);
    auto normal = [&](int r, int c, double std) {
        M m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal(0.0, std));
        return m;
    };
    const double proj_std = 0.02 / std::sqrt(2.0 * config_.layers);
    params_.push_back(normal(V, d, 0.02));
    params_.push_back(normal(C, d, 0.02));
    for (int l = 0; l < config_.layers; ++l) {
        params_.push_back(M::Ones(1, d));
        params_.push_back(M::Zero(1, d));
        params_.push_back(normal(d, 3 * d, 0.02));
        params_.push_back(M::Zero(1, 3 * d));
        params_.push_back(normal(d, d, proj_std));
        params_.push_back(M::Zero(1, d));
        params_.push_back(M::Ones(1, d));
        params_.push_back(M::Zero(1, d));
        params_.push_back(normal(d, 4 * d, 0.02));
        params_.push_back(M::Zero(1, 4 * d));
        params_.push_back(normal(4 * d, d, proj_std));
        params_.push_back(M::Zero(1, d));
    }
    params_.push_back(M::Ones(1, d));
    params_.push_back(M::Zero(1, d));
    params_.push_back(normal(d, V, 0.02));
    params_.push_back(M::Zero(1, V));
}

template <typename S>
std::size_t Transformer<S>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
}

template <typename S>
std::vector<typename Transformer<S>::M> Transformer<S>::zero_grads() const {
    std::vector<M> out;
    for (const auto& p : params_) out.push_back(M::Zero(p.rows(), p.cols()));
    return out;
}

template <typename S>
void Transformer<S>::check_ids(std::span<const int> ids) const {
    if (ids.empty()) throw InvalidInput("model: empty sequence");
    if (static_cast<int>(ids.size()) > config_.context)
        throw InvalidInput("model: sequence of " + std::to_string(ids.size()) + " tokens exceeds context " + std::to_string(config_.context));
    for (int id : ids)
        if (id < 0 || id >= config_.vocab_size) throw InvalidInput("model: unknown token id " + std::to_string(id));
}

template <typename S>
typename Tape<S>::Id Transformer<S>::build(Tape<S>& tape, std::span<const int> ids, bool needs_grad, std::vector<int>& leaves) const {
    for (const auto& p : params_) leaves.push_back(tape.leaf(p, needs_grad));
    std::vector<int> positions(ids.size());
    std::iota(positions.begin(), positions.end(), 0);
    auto x = tape.add(tape.gather(leaves[0], ids), tape.gather(leaves[1], positions));
    for (int l = 0; l < config_.layers; ++l) {
        auto P = [&](LayerParam p) { return leaves[static_cast<std::size_t>(layer_index(l, p))]; };
        auto h = tape.layernorm(x, P(ln1_g), P(ln1_b));
        auto qkv = tape.add_row(tape.matmul(h, P(w_qkv)), P(b_qkv));
        auto att = tape.causal_attention(qkv, config_.heads);
        x = tape.add(x, tape.add_row(tape.matmul(att, P(w_o)), P(b_o)));
        auto h2 = tape.layernorm(x, P(ln2_g), P(ln2_b));
        auto f = tape.gelu(tape.add_row(tape.matmul(h2, P(w_1)), P(b_1)));
        x = tape.add(x, tape.add_row(tape.matmul(f, P(w_2)), P(b_2)));
    }
    return tape.layernorm(x, leaves[static_cast<std::size_t>(final_index(config_, 0))], leaves[static_cast<std::size_t>(final_index(config_, 1))]);
}

template <typename S>
typename Transformer<S>::M Transformer<S>::forward_logits(std::span<const int> ids) const {
    check_ids(ids);
    Tape<S> tape;
    std::vector<int> leaves;
    const auto h = build(tape, ids, false, leaves);
    const auto logits = tape.add_row(tape.matmul(h, leaves[static_cast<std::size_t>(final_index(config_, 2))]),
                                     leaves[static_cast<std::size_t>(final_index(config_, 3))]);
    return tape.value(logits);
}

template <typename S>
typename Transformer<S>::M Transformer<S>::target_log_softmax(std::span<const int> ids, int target_begin) const {
    check_ids(ids);
    const int T = static_cast<int>(ids.size());
    require(target_begin >= 1 && target_begin < T, "model: target span outside the sequence");
    Tape<S> tape;
    std::vector<int> leaves;
    const auto h = build(tape, ids, false, leaves);
    const auto rows = tape.rows(h, target_begin - 1, T - target_begin);
    const auto logits = tape.add_row(tape.matmul(rows, leaves[static_cast<std::size_t>(final_index(config_, 2))]),
                                     leaves[static_cast<std::size_t>(final_index(config_, 3))]);
    M out = tape.value(logits);
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const S mx = out.row(r).maxCoeff();
        const S lse = mx + std::log((out.row(r).array() - mx).exp().sum());
        out.row(r).array() -= lse;
    }
    return out;
}

template <typename S>
S Transformer<S>::objective(std::span<const int> ids, int target_begin, std::span<const S> nll_coef, const M* ref_logp,
                            std::span<const S> kl_coef, std::vector<M>* grads) const {
    check_ids(ids);
    const int T = static_cast<int>(ids.size());
    require(target_begin >= 1 && target_begin < T, "model: target span outside the sequence");
    Tape<S> tape;
    std::vector<int> leaves;
    const auto h = build(tape, ids, grads != nullptr, leaves);
    const auto rows = tape.rows(h, target_begin - 1, T - target_begin);
    const auto logits = tape.add_row(tape.matmul(rows, leaves[static_cast<std::size_t>(final_index(config_, 2))]),
                                     leaves[static_cast<std::size_t>(final_index(config_, 3))]);
    const auto loss = tape.token_objective(logits, ids.subspan(static_cast<std::size_t>(target_begin)), nll_coef, ref_logp ? *ref_logp : M(), kl_coef);
    if (grads) {
        require(grads->size() == params_.size(), "model: gradient buffer has the wrong arity");
        tape.backward(loss);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            const auto& g = tape.grad(leaves[k]);
            if (g.size() > 0) (*grads)[k] += g;
        }
    }
    return tape.value(loss)(0, 0);
}

template <typename S>
S Transformer<S>::ar_loss(const TokenSequence& seq, std::vector<M>* grads) const {
    const int n = seq.target_length();
    if (n <= 0) throw InvalidInput("model: empty target");
    const std::vector<S> coef(static_cast<std::size_t>(n), S(1) / static_cast<S>(n));
    return objective(seq.ids, seq.target_begin, coef, nullptr, {}, grads);
}

template <typename S>
std::vector<S> Transformer<S>::sequence_logprobs(std::span<const int> ids, int begin, int end) const {
    require(begin >= 1 && end <= static_cast<int>(ids.size()) && begin < end, "model: log-prob span outside the sequence");
    const M lp = target_log_softmax(ids.first(static_cast<std::size_t>(end)), begin);
    std::vector<S> out;
    for (int t = begin; t < end; ++t) out.push_back(lp(t - begin, ids[static_cast<std::size_t>(t)]));
    return out;
}

template <typename S>
Decoder<S>::Decoder(const Transformer<S>& model) : model_(&model) {
    const auto& c = model.config();
    for (int l = 0; l < c.layers; ++l) {
        keys_.push_back(M::Zero(c.context, c.width));
        values_.push_back(M::Zero(c.context, c.width));
    }
}

template <typename S>
typename Decoder<S>::Row Decoder<S>::step(int token) {
    const auto& c = model_->config();
    const auto& p = model_->params();
    require(length_ < c.context, "decoder: context exhausted");
    require(token >= 0 && token < c.vocab_size, "decoder: unknown token id");
    const int d = c.width, dh = d / c.heads, pos = length_;
    const S inv = S(1) / std::sqrt(static_cast<S>(dh));
    Row x = p[0].row(token) + p[1].row(pos);
    for (int l = 0; l < c.layers; ++l) {
        auto P = [&](LayerParam q) -> const M& { return p[static_cast<std::size_t>(layer_index(l, q))]; };
        Row h = layernorm_row(x, P(ln1_g), P(ln1_b));
        Row qkv = h * P(w_qkv) + P(b_qkv);
        keys_[l].row(pos) = qkv.segment(d, d);
        values_[l].row(pos) = qkv.segment(2 * d, d);
        Row att(d);
        for (int hd = 0; hd < c.heads; ++hd) {
            const auto q = qkv.segment(hd * dh, dh);
            Row s = (keys_[l].block(0, hd * dh, pos + 1, dh) * q.transpose()).transpose() * inv;
            const S mx = s.maxCoeff();
            s = (s.array() - mx).exp().matrix();
            s /= s.sum();
            att.segment(hd * dh, dh) = s * values_[l].block(0, hd * dh, pos + 1, dh);
        }
        x += att * P(w_o) + P(b_o);
        Row h2 = layernorm_row(x, P(ln2_g), P(ln2_b));
        Row f = h2 * P(w_1) + P(b_1);
        for (Eigen::Index i = 0; i < f.size(); ++i) f(i) = gelu(f(i));
        x += f * P(w_2) + P(b_2);
    }
    x = layernorm_row(x, p[static_cast<std::size_t>(final_index(c, 0))], p[static_cast<std::size_t>(final_index(c, 1))]);
    ++length_;
    return x * p[static_cast<std::size_t>(final_index(c, 2))] + p[static_cast<std::size_t>(final_index(c, 3))];
}

std::string_view to_string(DecodeMode m) {
    switch (m) {
    case DecodeMode::greedy: return "greedy";
    case DecodeMode::temperature: return "temperature";
    case DecodeMode::top_k: return "top_k";
    }
    return "";
}

DecodeMode decode_mode_from_string(std::string_view s) {
    if (s == "greedy") return DecodeMode::greedy;
    if (s == "temperature") return DecodeMode::temperature;
    if (s == "top_k") return DecodeMode::top_k;
    throw ConfigError("unknown decode mode: " + std::string(s));
}

namespace {

using RowF = Decoder<float>::Row;

double log_softmax_at(const RowF& logits, int id) {
    const double mx = logits.maxCoeff();
    double sum = 0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) sum += std::exp(static_cast<double>(logits(i)) - mx);
    return static_cast<double>(logits(id)) - mx - std::log(sum);
}

int choose(const RowF& logits, int lo, int hi, const std::vector<int>& extra, const GenerateOptions& o, Rng& rng) {
    std::vector<int> ids;
    if (o.constrained) {
        for (int i = lo; i < hi; ++i) ids.push_back(i);
        ids.insert(ids.end(), extra.begin(), extra.end());
    } else {
        ids.resize(static_cast<std::size_t>(logits.size()));
        std::iota(ids.begin(), ids.end(), 0);
    }
    auto best = [&] {
        int b = ids[0];
        for (int i : ids)
            if (logits(i) > logits(b) || (logits(i) == logits(b) && i < b)) b = i;
        return b;
    };
    if (o.mode == DecodeMode::greedy) return best();
    require(o.temperature > 0, "generate: temperature must be positive");
    if (o.mode == DecodeMode::top_k && o.top_k > 0 && o.top_k < static_cast<int>(ids.size())) {
        std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return logits(a) > logits(b); });
        ids.resize(static_cast<std::size_t>(o.top_k));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (int i : ids) mx = std::max(mx, static_cast<double>(logits(i)));
    std::vector<double> w(ids.size());
    double total = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) total += (w[k] = std::exp((logits(ids[k]) - mx) / o.temperature));
    double u = rng.uniform() * total;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        u -= w[k];
        if (u < 0) return ids[k];
    }
    return best();
}

Generation continue_from(Decoder<float> dec, RowF logits, const Vocabulary& vocab, corpus::Task task, int image_tokens,
                         const GenerateOptions& o, std::uint64_t seed, int context) {
    Rng rng(seed);
    Generation g;
    auto emit = [&](int id) {
        g.tokens.push_back(id);
        g.step_logprobs.push_back(log_softmax_at(logits, id));
    };
    const int V = vocab.size();
    if (task != corpus::Task::stcqa) {
        require(dec.length() + image_tokens + 2 <= context, "generate: prompt leaves no room for the image block");
        emit(vocab.special(Special::boi));
        logits = dec.step(vocab.special(Special::boi));
        for (int k = 0; k < image_tokens; ++k) {
            const int id = choose(logits, vocab.visual_begin(), vocab.meta_begin(), {}, o, rng);
            emit(id);
            logits = dec.step(id);
        }
        emit(vocab.special(Special::eoi));
        return g;
    }
    const std::vector<int> eos = {vocab.special(Special::eos)};
    for (int k = 0; k < o.max_new && dec.length() < context; ++k) {
        const int id = o.constrained ? choose(logits, vocab.word_begin(), V, eos, o, rng) : choose(logits, 0, V, {}, o, rng);
        emit(id);
        if (id == vocab.special(Special::eos)) break;
        if (dec.length() >= context) break;
        logits = dec.step(id);
    }
    return g;
}

} // namespace

Generation generate(const Transformer<float>& model, const Vocabulary& vocab, std::span<const int> prompt, corpus::Task task,
                    int image_tokens, const GenerateOptions& options) {
    auto group = generate_group(model, vocab, prompt, task, image_tokens, options, 1);
    return std::move(group[0]);
}

std::vector<Generation> generate_group(const Transformer<float>& model, const Vocabulary& vocab, std::span<const int> prompt,
                                       corpus::Task task, int image_tokens, const GenerateOptions& options, int count) {
    require(model.config().vocab_size == vocab.size(), "generate: model and vocabulary disagree on size");
    require(!prompt.empty() && static_cast<int>(prompt.size()) <= model.config().context - 1, "generate: prompt exceeds context - 1");
    for (int id : prompt) require(id >= 0 && id < vocab.size(), "generate: unknown token id in prompt");
    Decoder<float> dec(model);
    RowF logits;
    for (int id : prompt) logits = dec.step(id);
    std::vector<Generation> out;
    for (int i = 0; i < count; ++i) {
        const std::uint64_t seed = count == 1 ? options.seed : split_seed(options.seed, static_cast<std::uint64_t>(i));
        out.push_back(continue_from(dec, logits, vocab, task, image_tokens, options, seed, model.config().context));
    }
    return out;
}

template <typename S>
AdamW<S>::AdamW(const std::vector<M>& params, AdamWConfig config) : config_(config) {
    for (const auto& p : params) {
        m_.push_back(M::Zero(p.rows(), p.cols()));
        v_.push_back(M::Zero(p.rows(), p.cols()));
    }
}

template <typename S>
double AdamW<S>::step(std::vector<M>& params, const std::vector<M>& grads, double lr) {
    require(params.size() == m_.size() && grads.size() == m_.size(), "adamw: tensor count mismatch");
    double sq = 0;
    for (const auto& g : grads) sq += g.template cast<double>().squaredNorm();
    const double norm = std::sqrt(sq);
    const double clip = config_.clip_norm > 0 && norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(config_.beta1), b2 = static_cast<S>(config_.beta2);
    for (std::size_t k = 0; k < params.size(); ++k) {
        const M g = grads[k] * static_cast<S>(clip);
        m_[k] = b1 * m_[k] + (S(1) - b1) * g;
        v_[k] = b2 * v_[k] + (S(1) - b2) * g.cwiseProduct(g);
        if (config_.weight_decay > 0 && params[k].rows() > 1) params[k] *= static_cast<S>(1.0 - lr * config_.weight_decay);
        params[k].array() -= static_cast<S>(lr) * (m_[k].array() / static_cast<S>(bc1)) /
                             ((v_[k].array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(config_.eps));
    }
    return norm;
}

std::string_view to_string(Stage s) {
    switch (s) {
    case Stage::init: return "init";
    case Stage::gagp: return "gagp";
    case Stage::sit: return "sit";
    case Stage::vro: return "vro";
    }
    return "";
}

Stage stage_from_string(std::string_view s) {
    if (s == "init") return Stage::init;
    if (s == "gagp") return Stage::gagp;
    if (s == "sit") return Stage::sit;
    if (s == "vro") return Stage::vro;
    throw InvalidInput("unknown stage: " + std::string(s));
}

namespace {

json checkpoint_header(const PolicyCheckpoint& c) {
    json tensors = json::array();
    const auto names = Transformer<float>::param_names(c.config);
    for (std::size_t k = 0; k < names.size(); ++k)
        tensors.push_back({{"name", names[k]}, {"rows", c.model.params()[k].rows()}, {"cols", c.model.params()[k].cols()}});
    return {{"format", "rswm-policy"},
            {"version", PolicyCheckpoint::kVersion},
            {"stage", std::string(to_string(c.stage))},
            {"model", to_json(c.config)},
            {"vocabulary", to_json(c.vocab)},
            {"tokenizer_config", tokenizer::to_json(c.tokenizer.config())},
            {"tokenizer_hash", c.tokenizer.content_hash()},
            {"rng_state", c.rng_state},
            {"info", c.info},
            {"tensors", tensors},
            {"tensor_encoding", "fp32 little-endian, row-major, in tensor order"}};
}

std::vector<std::uint8_t> tensor_blob(const PolicyCheckpoint& c) {
    std::vector<std::uint8_t> blob;
    for (const auto& p : c.model.params()) io::append_f32<float>(blob, std::span<const float>(p.data(), static_cast<std::size_t>(p.size())));
    return blob;
}

std::string hash_parts(const std::string& header, const std::vector<std::uint8_t>& tensors, const std::vector<std::uint8_t>& tok) {
    Sha256 h;
    h.update(std::string_view(header));
    h.update(std::span<const std::uint8_t>(tensors));
    h.update(std::span<const std::uint8_t>(tok));
    return h.hex_digest();
}

} // namespace

std::string PolicyCheckpoint::content_hash() const {
    return hash_parts(checkpoint_header(*this).dump(), tensor_blob(*this), tokenizer.to_bytes());
}

std::vector<std::uint8_t> PolicyCheckpoint::to_bytes() const {
    require(config == model.config(), "checkpoint: config differs from the model's");
    require(vocab.size() == config.vocab_size, "checkpoint: vocabulary size differs from the model's");
    json header = checkpoint_header(*this);
    const auto tensors = tensor_blob(*this);
    const auto tok = tokenizer.to_bytes();
    header["content_hash"] = hash_parts(header.dump(), tensors, tok);
    const std::string text = header.dump();
    std::ostringstream out;
    out.write(kCheckpointMagic, 8);
    io::write_u32(out, static_cast<std::uint32_t>(text.size()));
    out << text;
    io::write_u64(out, tensors.size());
    out.write(reinterpret_cast<const char*>(tensors.data()), static_cast<std::streamsize>(tensors.size()));
    io::write_u64(out, tok.size());
    out.write(reinterpret_cast<const char*>(tok.data()), static_cast<std::streamsize>(tok.size()));
    const std::string s = out.str();
    return {s.begin(), s.end()};
}

PolicyCheckpoint PolicyCheckpoint::from_bytes(std::span<const std::uint8_t> bytes) {
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    char magic[8] = {};
    if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) throw FormatError("checkpoint: bad magic");
    const auto hlen = io::read_u32(in);
    std::string text(hlen, '\0');
    if (!in.read(text.data(), hlen)) throw FormatError("checkpoint: truncated header");
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: header: ") + e.what());
    }
    auto read_blob = [&](const char* what) {
        const auto n = io::read_u64(in);
        if (n > bytes.size()) throw FormatError(std::string("checkpoint: truncated ") + what);
        std::vector<std::uint8_t> blob(n);
        if (!in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(n))) throw FormatError(std::string("checkpoint: truncated ") + what);
        return blob;
    };
    const auto tensors = read_blob("tensors");
    const auto tok = read_blob("tokenizer");
    try {
        if (header.at("version").get<int>() != kVersion) throw FormatError("checkpoint: unsupported version");
        const std::string stored = header.at("content_hash").get<std::string>();
        json body = header;
        body.erase("content_hash");
        if (hash_parts(body.dump(), tensors, tok) != stored) throw FormatError("checkpoint: content hash mismatch");

        PolicyCheckpoint c;
        c.config = model_config_from_json(header.at("model"));
        c.config.validate();
        c.vocab = vocabulary_from_json(header.at("vocabulary"));
        c.tokenizer = tokenizer::Tokenizer::from_bytes(tok);
        c.stage = stage_from_string(header.at("stage").get<std::string>());
        c.rng_state = header.at("rng_state").get<std::string>();
        c.info = header.at("info");
        c.model = Transformer<float>(c.config, 0);
        std::size_t offset = 0;
        const auto& shapes = header.at("tensors");
        if (shapes.size() != c.model.params().size()) throw FormatError("checkpoint: tensor count mismatch");
        for (std::size_t k = 0; k < shapes.size(); ++k) {
            auto& p = c.model.params()[k];
            if (shapes[k].at("rows").get<Eigen::Index>() != p.rows() || shapes[k].at("cols").get<Eigen::Index>() != p.cols())
                throw FormatError("checkpoint: tensor shape mismatch for " + shapes[k].at("name").get<std::string>());
            io::read_f32<float>(tensors, offset, std::span<float>(p.data(), static_cast<std::size_t>(p.size())));
        }
        if (offset != tensors.size()) throw FormatError("checkpoint: trailing tensor bytes");
        if (c.tokenizer.content_hash() != header.at("tokenizer_hash").get<std::string>()) throw FormatError("checkpoint: tokenizer hash mismatch");
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
}

void PolicyCheckpoint::save(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidInput("cannot write checkpoint: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

PolicyCheckpoint PolicyCheckpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot read checkpoint: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(bytes);
}

namespace {

// Metadata rows start near a shared per-family vector, offset by a small random
// projection of Fourier features of the bucket position, so neighbouring buckets
// begin close and the block looks almost constant until training separates it.
// Month, hour and azimuth wrap around.
void init_metadata_rows(Matrix<float>& table, const Vocabulary& vocab, std::uint64_t seed) {
    using metadata::MetaFamily;
    constexpr int kFreqs = 4;
    const int d = static_cast<int>(table.cols());
    Rng rng(split_seed(seed, 0x6d657461));
    Eigen::MatrixXd proj(2 * kFreqs, d);
    constexpr double kDeviation = 0.002;
    for (Eigen::Index i = 0; i < proj.size(); ++i) proj.data()[i] = rng.normal(0.0, kDeviation / std::sqrt(static_cast<double>(kFreqs)));
    for (int f = 0; f < metadata::kFamilyCount; ++f) {
        const auto family = static_cast<MetaFamily>(f);
        const int n = metadata::family_size(family);
        const bool cyclic = family == MetaFamily::month || family == MetaFamily::hour || family == MetaFamily::azimuth;
        Eigen::RowVectorXd base(d);
        for (int j = 0; j < d; ++j) base[j] = rng.normal(0.0, 0.02);
        for (int b = 0; b < n; ++b) {
            const double angle = cyclic ? 2.0 * M_PI * b / n : M_PI * b / std::max(1, n - 1);
            Eigen::RowVectorXd feat(2 * kFreqs);
            for (int k = 0; k < kFreqs; ++k) {
                feat[2 * k] = std::cos((k + 1) * angle);
                feat[2 * k + 1] = std::sin((k + 1) * angle);
            }
            const int row = vocab.meta(metadata::family_offset(family) + b);
            table.row(row) = (base + feat * proj).cast<float>();
        }
    }
}

} // namespace

PolicyCheckpoint init_policy(ModelConfig config, Vocabulary vocab, tokenizer::Tokenizer tok, std::uint64_t seed) {
    require(tok.config().codebook_size == vocab.visual_count(), "init_policy: tokenizer and vocabulary disagree on K");
    config.vocab_size = vocab.size();
    PolicyCheckpoint c;
    c.config = config;
    c.vocab = std::move(vocab);
    c.tokenizer = std::move(tok);
    c.model = Transformer<float>(config, seed);
    init_metadata_rows(c.model.params()[0], c.vocab, seed);
    c.stage = Stage::init;
    c.rng_state = Rng(seed).state();
    return c;
}

template class Transformer<float>;
template class Transformer<double>;
template class Decoder<float>;
template class Decoder<double>;
template class AdamW<float>;
template class AdamW<double>;

} // namespace rswm::model
