#include "rswm/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "rswm/common/errors.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/rewards/judge.hpp"

namespace rswm::eval {

using json = nlohmann::json;
using corpus::PromptRecord;
using corpus::Task;

namespace {

// Eigenvalues below this fraction of the largest are rounding noise of a singular matrix.
constexpr double kRelativeFloor = 1e-12;

Eigen::VectorXd clamped(Eigen::VectorXd ev) {
    const double floor = kRelativeFloor * std::max(0.0, ev.maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i)
        if (ev(i) <= floor) ev(i) = 0.0;
    return ev;
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd s = clamped(es.eigenvalues()).cwiseSqrt();
    return es.eigenvectors() * s.asDiagonal() * es.eigenvectors().transpose();
}

/// Tr((A^1/2 B A^1/2)^1/2).
double cross_trace(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    const Eigen::MatrixXd ra = sym_sqrt(a);
    const Eigen::MatrixXd inner = ra * b * ra;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    return clamped(es.eigenvalues()).cwiseSqrt().sum();
}

} // namespace

double fid(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    require(a.rows() >= 2 && b.rows() >= 2, "fid: each set needs at least 2 samples");
    require(a.cols() == b.cols() && a.cols() > 0, "fid: dimension mismatch");
    require(a.allFinite() && b.allFinite(), "fid: non-finite features");
    const Eigen::RowVectorXd mu_a = a.colwise().mean();
    const Eigen::RowVectorXd mu_b = b.colwise().mean();
    const Eigen::MatrixXd ca = a.rowwise() - mu_a;
    const Eigen::MatrixXd cb = b.rowwise() - mu_b;
    const Eigen::MatrixXd sa = ca.transpose() * ca / static_cast<double>(a.rows() - 1);
    const Eigen::MatrixXd sb = cb.transpose() * cb / static_cast<double>(b.rows() - 1);
    // both orders have the same value in exact arithmetic; averaging makes the result symmetric
    const double cross = 0.5 * (cross_trace(sa, sb) + cross_trace(sb, sa));
    const double d = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross;
    return std::max(0.0, d);
}

double fid(const std::vector<rewards::Embedding>& a, const std::vector<rewards::Embedding>& b) {
    auto stack = [](const std::vector<rewards::Embedding>& v) {
        require(!v.empty(), "fid: empty set");
        Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), v[0].size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            require(v[i].size() == m.cols(), "fid: dimension mismatch");
            m.row(static_cast<Eigen::Index>(i)) = v[i].transpose();
        }
        return m;
    };
    return fid(stack(a), stack(b));
}

std::vector<std::string> text_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

double bleu1(std::string_view hypothesis, std::string_view reference) {
    const auto h = text_tokens(hypothesis);
    const auto r = text_tokens(reference);
    if (h.empty() || r.empty()) return 0.0;
    std::map<std::string, int> ref_counts;
    for (const auto& w : r) ++ref_counts[w];
    std::map<std::string, int> hyp_counts;
    for (const auto& w : h) ++hyp_counts[w];
    int clipped = 0;
    for (const auto& [w, n] : hyp_counts) {
        const auto it = ref_counts.find(w);
        if (it != ref_counts.end()) clipped += std::min(n, it->second);
    }
    const double c = static_cast<double>(h.size()), rl = static_cast<double>(r.size());
    const double bp = c > rl ? 1.0 : std::exp(1.0 - rl / c);
    return bp * clipped / c;
}

double rouge_l(std::string_view hypothesis, std::string_view reference, double beta) {
    require(beta > 0.0, "rouge_l: beta must be positive");
    const auto h = text_tokens(hypothesis);
    const auto r = text_tokens(reference);
    if (h.empty() || r.empty()) return 0.0;
    std::vector<int> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
    for (std::size_t i = 1; i <= h.size(); ++i) {
        for (std::size_t j = 1; j <= r.size(); ++j)
            cur[j] = h[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    const double lcs = prev[r.size()];
    if (lcs == 0) return 0.0;
    const double p = lcs / static_cast<double>(h.size()), rc = lcs / static_cast<double>(r.size());
    const double b2 = beta * beta;
    return (1.0 + b2) * p * rc / (rc + b2 * p);
}

void EvalConfig::validate() const {
    if (max_new_tokens < 1) throw ConfigError("eval: max_new_tokens must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("eval: temperature must be positive");
    if (top_k < 0) throw ConfigError("eval: top_k must be >= 0");
    if (mode == model::DecodeMode::top_k && top_k < 1) throw ConfigError("eval: top_k decoding needs top_k >= 1");
    if (!(lambda >= 0.0)) throw ConfigError("eval: lambda must be >= 0");
}

json to_json(const EvalConfig& c) {
    return {{"max_new_tokens", c.max_new_tokens}, {"mode", model::to_string(c.mode)}, {"temperature", c.temperature},
            {"top_k", c.top_k},                   {"seed", c.seed},                   {"lambda", c.lambda},
            {"limit_tfsf", c.limit_tfsf},         {"limit_stcqa", c.limit_stcqa},     {"oracle", c.oracle}};
}

EvalConfig eval_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("eval: section must be an object");
    EvalConfig c;
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "max_new_tokens") c.max_new_tokens = v.get<int>();
            else if (k == "mode") c.mode = model::decode_mode_from_string(v.get<std::string>());
            else if (k == "temperature") c.temperature = v.get<double>();
            else if (k == "top_k") c.top_k = v.get<int>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else if (k == "lambda") c.lambda = v.get<double>();
            else if (k == "limit_tfsf") c.limit_tfsf = v.get<int>();
            else if (k == "limit_stcqa") c.limit_stcqa = v.get<int>();
            else if (k == "oracle") c.oracle = v.get<bool>();
            else throw ConfigError("eval: unknown key '" + k + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("eval: ") + e.what());
    } catch (const InvalidInput& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

void recompute(EvalReport& r) {
    TfsfSummary t;
    t.count = static_cast<int>(r.tfsf_samples.size());
    if (t.count > 0) {
        std::vector<rewards::Embedding> gen, truth;
        for (const auto& s : r.tfsf_samples) {
            t.mean_cossim += s.cossim;
            t.mean_s_ir += s.s_ir;
            t.mean_reward += s.reward;
            gen.push_back(s.generated);
            truth.push_back(s.truth);
        }
        t.mean_cossim /= t.count;
        t.mean_s_ir /= t.count;
        t.mean_reward /= t.count;
        t.fid = t.count >= 2 ? fid(gen, truth) : 0.0;
    }
    StcqaSummary q;
    q.count = static_cast<int>(r.stcqa_samples.size());
    if (q.count > 0) {
        for (const auto& s : r.stcqa_samples) {
            q.bleu1 += s.bleu1;
            q.rouge_l += s.rouge_l;
            q.judge_total += s.judge_total;
            q.mean_length += s.length;
        }
        q.bleu1 /= q.count;
        q.rouge_l /= q.count;
        q.judge_total /= q.count;
        q.mean_length /= q.count;
    }
    r.tfsf = t;
    r.stcqa = q;
}

namespace {

void check_vocabulary(const PromptRecord& rec, const model::PolicyCheckpoint& p) {
    const int side = p.tokenizer.config().image_side;
    for (const auto& o : rec.images)
        if (o.image.width != side || o.image.height != side)
            throw InvalidInput("eval: record " + rec.id + " has images the checkpoint tokenizer cannot encode");
    const std::string& text = rec.task == Task::tfsf ? rec.instruction : rec.question;
    std::istringstream in(text);
    std::string w;
    while (in >> w)
        if (p.vocab.word(w) == p.vocab.special(model::Special::unk))
            throw InvalidInput("eval: word '" + w + "' of record " + rec.id + " is missing from the checkpoint vocabulary");
}

template <typename T>
std::vector<T> head(const std::vector<T>& v, int limit) {
    if (limit < 0 || static_cast<std::size_t>(limit) >= v.size()) return v;
    return {v.begin(), v.begin() + limit};
}

} // namespace

EvalReport evaluate_suite(const model::PolicyCheckpoint* policy, const rewards::Embedder& embedder, const std::vector<PromptRecord>& tfsf_all,
                          const std::vector<PromptRecord>& stcqa_all, const EvalConfig& config, std::string label) {
    config.validate();
    require(embedder.frozen(), "eval: embedder must be frozen");
    if (!config.oracle && !policy) throw InvalidInput("eval: a checkpoint is required outside oracle mode");
    const auto tfsf = head(tfsf_all, config.limit_tfsf);
    const auto stcqa = head(stcqa_all, config.limit_stcqa);
    for (const auto& r : tfsf)
        if (r.task != Task::tfsf) throw InvalidInput("eval: record " + r.id + " is not a text-guided forecasting record");
    for (const auto& r : stcqa)
        if (r.task != Task::stcqa) throw InvalidInput("eval: record " + r.id + " is not a change question-answering record");
    if (policy) {
        for (const auto& r : tfsf) check_vocabulary(r, *policy);
        for (const auto& r : stcqa) check_vocabulary(r, *policy);
    }

    EvalReport report;
    report.label = std::move(label);
    report.config = to_json(config);
    report.checkpoint_hash = policy ? policy->content_hash() : "oracle";
    report.embedder_hash = embedder.content_hash();

    model::GenerateOptions gen;
    gen.mode = config.mode;
    gen.temperature = config.temperature;
    gen.top_k = config.top_k;
    gen.max_new = config.max_new_tokens;

    for (std::size_t i = 0; i < tfsf.size(); ++i) {
        const auto& rec = tfsf[i];
        Image image;
        if (config.oracle) {
            image = rec.target_image.value().image;
        } else {
            const auto seq = model::assemble_sequence(rec, policy->vocab, policy->tokenizer);
            gen.seed = split_seed(config.seed, i);
            const auto g = model::generate(policy->model, policy->vocab, seq.prompt(), rec.task, policy->tokenizer.config().sequence_length(), gen);
            const auto codes = model::extract_image(g.tokens, policy->vocab);
            if (!codes) throw InvalidInput("eval: no image block generated for " + rec.id);
            image = policy->tokenizer.decode(*codes);
        }
        TfsfSample s;
        s.id = rec.id;
        s.generated = embedder.embed_image(image);
        s.truth = embedder.embed_image(rec.target_image.value().image);
        s.cossim = rewards::cosine(s.generated, embedder.embed_text(rec.instruction));
        s.s_ir = rewards::cosine(s.generated, embedder.embed_image(rec.images.at(0).image));
        s.reward = rewards::combine_tfsf(s.cossim, s.s_ir, config.lambda).r_tfsf;
        report.tfsf_samples.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < stcqa.size(); ++i) {
        const auto& rec = stcqa[i];
        StcqaSample s;
        s.id = rec.id;
        s.reference = rec.target_text;
        if (config.oracle) {
            s.hypothesis = rec.target_text;
        } else {
            const auto seq = model::assemble_sequence(rec, policy->vocab, policy->tokenizer);
            gen.seed = split_seed(config.seed, 1000000 + i);
            const auto g = model::generate(policy->model, policy->vocab, seq.prompt(), rec.task, 0, gen);
            s.hypothesis = policy->vocab.detokenize(g.tokens);
        }
        s.bleu1 = bleu1(s.hypothesis, s.reference);
        s.rouge_l = rouge_l(s.hypothesis, s.reference);
        const rewards::JudgeContext ctx{rec.images.at(0).meta, rec.images.at(1).meta, rec.truth, rec.target_text};
        s.judge_total = rewards::judge_stcqa(s.hypothesis, ctx).total;
        s.length = static_cast<int>(text_tokens(s.hypothesis).size());
        report.stcqa_samples.push_back(std::move(s));
    }
    recompute(report);
    return report;
}

namespace {

json vec_json(const rewards::Embedding& e) { return std::vector<double>(e.data(), e.data() + e.size()); }

rewards::Embedding vec_from(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

bool close(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); }

} // namespace

json to_json(const EvalReport& r) {
    json tf = json::array(), qa = json::array();
    for (const auto& s : r.tfsf_samples)
        tf.push_back({{"id", s.id}, {"cossim", s.cossim}, {"s_ir", s.s_ir}, {"reward", s.reward}, {"generated", vec_json(s.generated)}, {"truth", vec_json(s.truth)}});
    for (const auto& s : r.stcqa_samples)
        qa.push_back({{"id", s.id},
                      {"hypothesis", s.hypothesis},
                      {"reference", s.reference},
                      {"bleu1", s.bleu1},
                      {"rouge_l", s.rouge_l},
                      {"judge_total", s.judge_total},
                      {"length", s.length}});
    return {{"format", "rswm-eval-report"},
            {"version", 1},
            {"label", r.label},
            {"checkpoint_hash", r.checkpoint_hash},
            {"embedder_hash", r.embedder_hash},
            {"config", r.config},
            {"tfsf",
             {{"count", r.tfsf.count},
              {"proxy_fid", r.tfsf.fid},
              {"mean_cossim", r.tfsf.mean_cossim},
              {"mean_s_ir", r.tfsf.mean_s_ir},
              {"mean_reward", r.tfsf.mean_reward}}},
            {"stcqa",
             {{"count", r.stcqa.count},
              {"bleu1", r.stcqa.bleu1},
              {"rouge_l", r.stcqa.rouge_l},
              {"judge_total", r.stcqa.judge_total},
              {"mean_length", r.stcqa.mean_length}}},
            {"samples", {{"tfsf", tf}, {"stcqa", qa}}}};
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    try {
        if (j.at("format") != "rswm-eval-report" || j.at("version") != 1) throw FormatError("report: unknown format");
        r.label = j.at("label").get<std::string>();
        r.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
        r.embedder_hash = j.at("embedder_hash").get<std::string>();
        r.config = j.at("config");
        for (const auto& s : j.at("samples").at("tfsf")) {
            TfsfSample t;
            t.id = s.at("id").get<std::string>();
            t.cossim = s.at("cossim").get<double>();
            t.s_ir = s.at("s_ir").get<double>();
            t.reward = s.at("reward").get<double>();
            t.generated = vec_from(s.at("generated"));
            t.truth = vec_from(s.at("truth"));
            r.tfsf_samples.push_back(std::move(t));
        }
        for (const auto& s : j.at("samples").at("stcqa")) {
            StcqaSample q;
            q.id = s.at("id").get<std::string>();
            q.hypothesis = s.at("hypothesis").get<std::string>();
            q.reference = s.at("reference").get<std::string>();
            q.bleu1 = s.at("bleu1").get<double>();
            q.rouge_l = s.at("rouge_l").get<double>();
            q.judge_total = s.at("judge_total").get<double>();
            q.length = s.at("length").get<int>();
            r.stcqa_samples.push_back(std::move(q));
        }
        recompute(r);
        const auto& tf = j.at("tfsf");
        const auto& qa = j.at("stcqa");
        if (tf.at("count").get<int>() != r.tfsf.count || qa.at("count").get<int>() != r.stcqa.count || !close(tf.at("proxy_fid").get<double>(), r.tfsf.fid) ||
            !close(tf.at("mean_cossim").get<double>(), r.tfsf.mean_cossim) || !close(tf.at("mean_s_ir").get<double>(), r.tfsf.mean_s_ir) ||
            !close(tf.at("mean_reward").get<double>(), r.tfsf.mean_reward) || !close(qa.at("bleu1").get<double>(), r.stcqa.bleu1) ||
            !close(qa.at("rouge_l").get<double>(), r.stcqa.rouge_l) || !close(qa.at("judge_total").get<double>(), r.stcqa.judge_total) ||
            !close(qa.at("mean_length").get<double>(), r.stcqa.mean_length))
            throw FormatError("report: aggregates disagree with the per-sample records");
    } catch (const json::exception& e) {
        throw FormatError(std::string("report: ") + e.what());
    } catch (const InvalidInput& e) {
        throw FormatError(std::string("report: ") + e.what());
    }
    return r;
}

namespace {

std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string pad(const std::string& s, std::size_t w, bool left = false) {
    if (s.size() >= w) return s;
    return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

} // namespace

std::string to_csv(const EvalReport& r) {
    std::ostringstream out;
    out << "task,id,cossim,s_ir,reward,bleu1,rouge_l,judge_total,length\n";
    for (const auto& s : r.tfsf_samples) out << "tfsf," << csv_field(s.id) << ',' << fmt(s.cossim, 6) << ',' << fmt(s.s_ir, 6) << ',' << fmt(s.reward, 6) << ",,,,\n";
    for (const auto& s : r.stcqa_samples)
        out << "stcqa," << csv_field(s.id) << ",,,," << fmt(s.bleu1, 6) << ',' << fmt(s.rouge_l, 6) << ',' << fmt(s.judge_total, 6) << ',' << s.length << '\n';
    return out.str();
}

std::string to_table(const std::vector<EvalReport>& reports) {
    std::size_t w = 5;
    for (const auto& r : reports) w = std::max(w, r.label.size());
    std::ostringstream out;
    out << "Text-guided forecasting\n";
    out << pad("Model", w, true) << " | " << pad("proxy-FID", 10) << " | " << pad("CosSim", 8) << " | " << pad("s_ir", 8) << " | " << pad("reward", 8) << " | " << pad("N", 5) << '\n';
    out << std::string(w + 55, '-') << '\n';
    for (const auto& r : reports)
        out << pad(r.label, w, true) << " | " << pad(fmt(r.tfsf.fid), 10) << " | " << pad(fmt(r.tfsf.mean_cossim), 8) << " | " << pad(fmt(r.tfsf.mean_s_ir), 8) << " | "
            << pad(fmt(r.tfsf.mean_reward), 8) << " | " << pad(std::to_string(r.tfsf.count), 5) << '\n';
    out << "\nChange question answering\n";
    out << pad("Model", w, true) << " | " << pad("B-1", 8) << " | " << pad("R-L", 8) << " | " << pad("Judge", 8) << " | " << pad("Len", 7) << " | " << pad("N", 5) << '\n';
    out << std::string(w + 52, '-') << '\n';
    for (const auto& r : reports)
        out << pad(r.label, w, true) << " | " << pad(fmt(r.stcqa.bleu1), 8) << " | " << pad(fmt(r.stcqa.rouge_l), 8) << " | " << pad(fmt(r.stcqa.judge_total, 2), 8) << " | "
            << pad(fmt(r.stcqa.mean_length, 1), 7) << " | " << pad(std::to_string(r.stcqa.count), 5) << '\n';
    return out.str();
}

} // namespace rswm::eval
