#include "rswm/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <iostream>
#include <set>
#include <sstream>

#include "rswm/common/errors.hpp"
#include "rswm/common/hash.hpp"
#include "rswm/common/rng.hpp"

namespace rswm::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using model::Stage;

namespace {

enum SeedStream : std::uint64_t { kTokenizerSeed = 11, kEmbedderSeed = 12, kModelSeed = 13, kEvalSeed = 14, kStageSeed = 20 };

template <typename F>
auto section(const json& j, const char* name, F&& parse) {
    try {
        return parse(j);
    } catch (const json::exception& e) {
        throw ConfigError(std::string(name) + ": " + e.what());
    }
}

/// Splits `key` off an object section and returns the rest.
json without(const json& j, std::initializer_list<const char*> keys) {
    json out = j;
    for (const char* k : keys) out.erase(k);
    return out;
}

} // namespace

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    if (!j.contains("seed")) throw ConfigError("config: 'seed' is required");
    static const std::set<std::string> known = {"seed", "paths", "worldgen", "corpus", "tokenizer", "embedder", "model", "gagp", "sit", "vro", "eval"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError("config: unknown key '" + k + "'");
    RunConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception&) {
        throw ConfigError("config: 'seed' must be a non-negative integer");
    }
    if (j.contains("paths")) {
        section(j["paths"], "paths", [&](const json& p) {
            if (!p.is_object()) throw ConfigError("paths: section must be an object");
            for (const auto& [k, v] : p.items()) {
                if (k == "corpus") c.paths.corpus = v.get<std::string>();
                else if (k == "checkpoints") c.paths.checkpoints = v.get<std::string>();
                else if (k == "reports") c.paths.reports = v.get<std::string>();
                else throw ConfigError("paths: unknown key '" + k + "'");
            }
            for (const auto* s : {&c.paths.corpus, &c.paths.checkpoints, &c.paths.reports})
                if (s->empty() || fs::path(*s).is_absolute() || s->find("..") != std::string::npos)
                    throw ConfigError("paths: entries must be non-empty paths inside the run directory");
            return 0;
        });
    }
    if (j.contains("worldgen")) {
        section(j["worldgen"], "worldgen", [&](const json& w) {
            if (!w.is_object()) throw ConfigError("worldgen: section must be an object");
            for (const auto& [k, v] : w.items()) {
                if (k == "preview_scenes") c.preview_scenes = v.get<int>();
                else throw ConfigError("worldgen: unknown key '" + k + "'");
            }
            if (c.preview_scenes < 1) throw ConfigError("worldgen: preview_scenes must be >= 1");
            return 0;
        });
    }
    json corpus = j.value("corpus", json::object());
    if (!corpus.is_object()) throw ConfigError("corpus: section must be an object");
    if (!corpus.contains("seed")) corpus["seed"] = c.seed;
    c.corpus = corpus::corpus_config_from_json(corpus);
    c.world = c.corpus.world;

    const json tok = j.value("tokenizer", json::object());
    if (!tok.is_object()) throw ConfigError("tokenizer: section must be an object");
    c.tokenizer = tokenizer::tokenizer_config_from_json(without(tok, {"train_images"}));
    if (tok.contains("train_images")) c.tokenizer_images = section(tok["train_images"], "tokenizer", [](const json& v) { return v.get<int>(); });
    if (c.tokenizer_images < 1) throw ConfigError("tokenizer: train_images must be >= 1");
    if (c.tokenizer.image_side != c.corpus.world.scene_size) throw ConfigError("tokenizer: image_side must equal corpus scene_size");

    const json emb = j.value("embedder", json::object());
    if (!emb.is_object()) throw ConfigError("embedder: section must be an object");
    c.embedder = rewards::embedder_config_from_json(without(emb, {"train_pairs"}));
    if (emb.contains("train_pairs")) c.embedder_pairs = section(emb["train_pairs"], "embedder", [](const json& v) { return v.get<int>(); });
    if (c.embedder_pairs < c.embedder.min_pairs) throw ConfigError("embedder: train_pairs below min_pairs");

    const json m = j.value("model", json::object());
    if (m.contains("vocab_size")) throw ConfigError("model: vocab_size is derived from the corpus");
    c.model = model::model_config_from_json(m);
    auto probe = c.model;
    probe.vocab_size = 1;
    probe.validate();

    auto stage = [&](const char* name, Stage s) {
        json sj = j.value(name, json::object());
        if (!sj.is_object()) throw ConfigError(std::string(name) + ": section must be an object");
        if (!sj.contains("seed")) sj["seed"] = split_seed(c.seed, kStageSeed + static_cast<std::uint64_t>(s));
        return training::stage_config_from_json(sj, s);
    };
    c.gagp = stage("gagp", Stage::gagp);
    c.sit = stage("sit", Stage::sit);
    c.vro = stage("vro", Stage::vro);
    json ej = j.value("eval", json::object());
    if (!ej.is_object()) throw ConfigError("eval: section must be an object");
    if (!ej.contains("seed")) ej["seed"] = split_seed(c.seed, kEvalSeed);
    c.eval = eval::eval_config_from_json(ej);
    return c;
}

json to_json(const RunConfig& c) {
    json tok = tokenizer::to_json(c.tokenizer);
    tok["train_images"] = c.tokenizer_images;
    json emb = rewards::to_json(c.embedder);
    emb["train_pairs"] = c.embedder_pairs;
    json m = model::to_json(c.model);
    m.erase("vocab_size");
    return {{"seed", c.seed},
            {"paths", {{"corpus", c.paths.corpus}, {"checkpoints", c.paths.checkpoints}, {"reports", c.paths.reports}}},
            {"worldgen", {{"preview_scenes", c.preview_scenes}}},
            {"corpus", corpus::to_json(c.corpus)},
            {"tokenizer", tok},
            {"embedder", emb},
            {"model", m},
            {"gagp", training::to_json(c.gagp)},
            {"sit", training::to_json(c.sit)},
            {"vro", training::to_json(c.vro)},
            {"eval", eval::to_json(c.eval)}};
}

json apply_overrides(json j, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' must look like key.path=value");
        const std::string path = o.substr(0, eq), raw = o.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;
        }
        json* node = &j;
        std::istringstream parts(path);
        std::string part;
        std::vector<std::string> keys;
        while (std::getline(parts, part, '.')) {
            if (part.empty()) throw ConfigError("override '" + o + "' has an empty key");
            keys.push_back(part);
        }
        for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
            if (!node->is_object()) throw ConfigError("override '" + o + "' descends into a non-object");
            node = &(*node)[keys[i]];
            if (node->is_null()) *node = json::object();
        }
        if (!node->is_object()) throw ConfigError("override '" + o + "' descends into a non-object");
        (*node)[keys.back()] = value;
    }
    return j;
}

Log::Log(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    file_.open(path, std::ios::app);
    if (!file_) throw InvalidInput("log: cannot open " + path.string());
}

void Log::event(const std::string& kind, json fields) {
    const auto now = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    json line = {{"event", kind}, {"time", now}};
    for (auto& [k, v] : fields.items()) line[k] = v;
    const std::string text = line.dump();
    if (file_.is_open()) file_ << text << '\n' << std::flush;
    if (stderr_) std::cerr << text << '\n';
}

DirLock::DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw InvalidInput("run directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

DirLock::~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

std::vector<Image> tokenizer_images(const std::vector<corpus::PromptRecord>& records, int count) {
    std::vector<Image> out;
    for (const auto& r : records) {
        for (const auto& o : r.images)
            if (static_cast<int>(out.size()) < count) out.push_back(o.image);
        if (r.target_image && static_cast<int>(out.size()) < count) out.push_back(r.target_image->image);
        if (static_cast<int>(out.size()) >= count) break;
    }
    if (out.empty()) throw InvalidInput("tokenizer: no images in the corpus");
    return out;
}

std::vector<rewards::ImageText> embedder_pairs(const std::vector<corpus::PromptRecord>& records, int count) {
    std::vector<rewards::ImageText> out;
    for (const auto& r : records) {
        for (const auto& o : r.images)
            if (static_cast<int>(out.size()) < count && !o.caption.empty()) out.push_back({o.image, o.caption});
        if (r.task == corpus::Task::tfsf && r.target_image && static_cast<int>(out.size()) < count) out.push_back({r.target_image->image, r.instruction});
        if (static_cast<int>(out.size()) >= count) break;
    }
    return out;
}

model::Vocabulary training_vocabulary(const std::map<std::string, std::vector<corpus::PromptRecord>>& splits, int visual) {
    std::vector<const std::vector<corpus::PromptRecord>*> train;
    for (const auto& [name, records] : splits)
        if (corpus::is_train_split(name)) train.push_back(&records);
    return model::build_vocabulary(train, visual);
}

std::string file_sha256(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInput("cannot read " + path.string());
    Sha256 h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto n = in.gcount();
        if (n > 0) h.update(std::string_view(buf.data(), static_cast<std::size_t>(n)));
    }
    return h.hex_digest();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw InvalidInput("cannot write " + path.string());
}

json stage_log(const training::StageResult& r) { return {{"steps", r.steps}, {"validation_loss", r.validation_loss}, {"log", r.log}, {"warnings", r.warnings}}; }

} // namespace

RunResult run_pipeline(const RunConfig& config, const fs::path& dir, Log& log) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };
    RunResult result;
    const fs::path corpus_dir = dir / config.paths.corpus, ckpt_dir = dir / config.paths.checkpoints, report_dir = dir / config.paths.reports;
    fs::create_directories(ckpt_dir);
    fs::create_directories(report_dir);

    log.event("stage_start", {{"stage", "corpus"}});
    corpus::write_corpus(config.corpus, corpus_dir);
    std::map<std::string, std::vector<corpus::PromptRecord>> splits;
    for (const char* s : corpus::kSplitNames) splits[s] = corpus::read_split(corpus_dir, s);
    log.event("stage_end", {{"stage", "corpus"}, {"seconds", elapsed()}});

    log.event("stage_start", {{"stage", "tokenizer"}});
    const auto tok = tokenizer::train_codebook(tokenizer_images(splits.at("gagp"), config.tokenizer_images), config.tokenizer, split_seed(config.seed, kTokenizerSeed));
    tok.save(ckpt_dir / "tokenizer.bin");
    log.event("stage_end", {{"stage", "tokenizer"}, {"seconds", elapsed()}});

    log.event("stage_start", {{"stage", "embedder"}});
    const auto emb = rewards::train_embedder(embedder_pairs(splits.at("sit"), config.embedder_pairs), config.embedder, split_seed(config.seed, kEmbedderSeed));
    emb.save(ckpt_dir / "embedder.bin");
    log.event("stage_end", {{"stage", "embedder"}, {"seconds", elapsed()}, {"holdout_top1", emb.holdout_top1}});

    auto mc = config.model;
    auto vocab = training_vocabulary(splits, tok.config().codebook_size);
    mc.vocab_size = vocab.size();
    const auto init = model::init_policy(mc, std::move(vocab), tok, split_seed(config.seed, kModelSeed));

    log.event("stage_start", {{"stage", "gagp"}});
    const auto gagp = training::run_gagp(init, splits.at("gagp"), config.gagp);
    gagp.checkpoint.save(ckpt_dir / "gagp.ckpt");
    log.event("stage_end", {{"stage", "gagp"}, {"seconds", elapsed()}, {"result", stage_log(gagp)}});

    log.event("stage_start", {{"stage", "sit"}});
    const auto sit = training::run_sit(gagp.checkpoint, splits.at("sit"), config.sit);
    sit.checkpoint.save(ckpt_dir / "sit.ckpt");
    for (const auto& w : sit.warnings) log.event("warning", {{"message", w}});
    log.event("stage_end", {{"stage", "sit"}, {"seconds", elapsed()}, {"result", stage_log(sit)}});

    log.event("stage_start", {{"stage", "vro"}});
    std::unique_ptr<rewards::ExternalJudge> judge;
    if (config.vro.judge == "external") judge = std::make_unique<rewards::ExternalJudge>(*config.vro.judge_client);
    auto vro_config = config.vro;
    if (vro_config.resume_path.empty()) vro_config.resume_path = ckpt_dir / "vro.resume.ckpt";
    const auto vro = training::run_vro(sit.checkpoint, sit.checkpoint, splits.at("vro"), {&emb, judge.get()}, vro_config);
    vro.checkpoint.save(ckpt_dir / "vro.ckpt");
    log.event("stage_end", {{"stage", "vro"}, {"seconds", elapsed()}, {"result", stage_log(vro)}});

    log.event("stage_start", {{"stage", "eval"}});
    result.report = eval::evaluate_suite(&vro.checkpoint, emb, splits.at("eval_tfsf"), splits.at("eval_stcqa"), config.eval, "vro");
    write_text(report_dir / "eval.json", eval::to_json(result.report).dump(1) + "\n");
    write_text(report_dir / "eval.csv", eval::to_csv(result.report));
    write_text(report_dir / "eval.txt", eval::to_table({result.report}));
    log.event("stage_end", {{"stage", "eval"}, {"seconds", elapsed()}});

    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        const auto rel = fs::relative(f, dir).generic_string();
        if (rel == "manifest.json" || rel == ".lock" || rel.starts_with("logs/")) continue;
        result.artifacts[rel] = file_sha256(f);
    }
    result.manifest = {{"format", "rswm-run-manifest"},
                       {"version", 1},
                       {"config", to_json(config)},
                       {"artifacts", result.artifacts},
                       {"checkpoints",
                        {{"tokenizer", tok.content_hash()},
                         {"embedder", emb.content_hash()},
                         {"gagp", gagp.checkpoint.content_hash()},
                         {"sit", sit.checkpoint.content_hash()},
                         {"vro", vro.checkpoint.content_hash()}}},
                       {"eval", {{"tfsf", eval::to_json(result.report)["tfsf"]}, {"stcqa", eval::to_json(result.report)["stcqa"]}}}};
    write_text(dir / "manifest.json", result.manifest.dump(1) + "\n");
    log.event("run_end", {{"seconds", elapsed()}, {"artifacts", result.artifacts.size()}});
    return result;
}

std::vector<std::string> reproduce(const json& manifest, const fs::path& dir, Log& log) {
    if (!manifest.is_object() || manifest.value("format", "") != "rswm-run-manifest") throw FormatError("reproduce: not a run manifest");
    std::map<std::string, std::string> expected;
    try {
        expected = manifest.at("artifacts").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("reproduce: ") + e.what());
    }
    const auto config = run_config_from_json(manifest.at("config"));
    const auto got = run_pipeline(config, dir, log);
    std::vector<std::string> diff;
    for (const auto& [path, hash] : expected) {
        const auto it = got.artifacts.find(path);
        if (it == got.artifacts.end() || it->second != hash) diff.push_back(path);
    }
    for (const auto& [path, hash] : got.artifacts)
        if (!expected.count(path)) diff.push_back(path);
    return diff;
}

} // namespace rswm::pipeline
