// rswm: command line front end for the whole pipeline.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rswm/common/errors.hpp"
#include "rswm/common/hash.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/pipeline.hpp"
#include "rswm/worldgen.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rswm;

namespace {

constexpr int kUsageError = 2;
constexpr int kConfigError = 3;
constexpr int kRuntimeError = 1;

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    std::string log;
    bool quiet = false;
};

json read_json_file(const fs::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw ConfigError(std::string(what) + ": cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string(what) + ": " + path.string() + ": " + e.what());
    }
}

pipeline::RunConfig load_config(const Common& c) {
    if (c.config.empty()) throw ConfigError("--config is required for this command");
    return pipeline::run_config_from_json(pipeline::apply_overrides(read_json_file(c.config, "config"), c.overrides));
}

pipeline::Log open_log(const Common& c, const fs::path& fallback) {
    pipeline::Log log(c.log.empty() ? fallback : fs::path(c.log));
    log.echo_to_stderr(!c.quiet);
    return log;
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw InvalidInput("cannot write " + path.string());
}

fs::path parent_or_cwd(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

/// Provenance record next to a command's output.
void write_run_manifest(const fs::path& where, const std::string& command, const json& config, const std::vector<fs::path>& inputs,
                        const std::vector<fs::path>& outputs) {
    json in = json::object(), out = json::object();
    for (const auto& p : inputs) in[p.string()] = pipeline::file_sha256(p);
    for (const auto& p : outputs) out[p.string()] = pipeline::file_sha256(p);
    write_file(where, json{{"format", "rswm-command-manifest"}, {"command", command}, {"config", config}, {"inputs", in}, {"outputs", out}}.dump(1) + "\n");
}

std::map<std::string, std::vector<corpus::PromptRecord>> load_splits(const fs::path& dir) {
    std::map<std::string, std::vector<corpus::PromptRecord>> splits;
    for (const char* s : corpus::kSplitNames) splits[s] = corpus::read_split(dir, s);
    return splits;
}

void print_error(const char* kind, const std::string& message) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Geo-conditioned remote sensing world model: corpus, training and evaluation"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub, bool with_config) {
        if (with_config) sub->add_option("--config", common.config, "run configuration (JSON)");
        sub->add_option("--set", common.overrides, "override a config key, e.g. --set sit.steps=100");
        sub->add_option("--log", common.log, "line-delimited JSON log file");
        sub->add_flag("--quiet", common.quiet, "do not echo log lines to stderr");
    };

    std::string out, corpus_dir, init, reference, tokenizer_path, embedder_path, checkpoint, format = "json", stage, task, manifest, record_id, split, report_in;
    int count = 0, index = 0;
    bool oracle = false;

    auto* worldgen_cmd = app.add_subcommand("worldgen", "sample scenes and write PNG previews");
    add_common(worldgen_cmd, true);
    worldgen_cmd->add_option("--out", out, "output directory")->required();
    worldgen_cmd->add_option("--count", count, "number of scenes (default: worldgen.preview_scenes)");

    auto* corpus_cmd = app.add_subcommand("build-corpus", "build all corpus splits");
    add_common(corpus_cmd, true);
    corpus_cmd->add_option("--out", out, "corpus directory")->required();

    auto* tok_cmd = app.add_subcommand("train-tokenizer", "train the visual codebook");
    add_common(tok_cmd, true);
    tok_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
    tok_cmd->add_option("--out", out, "tokenizer file")->required();

    auto* emb_cmd = app.add_subcommand("train-embedder", "train the frozen image/text embedder");
    add_common(emb_cmd, true);
    emb_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
    emb_cmd->add_option("--out", out, "embedder file")->required();

    auto* train_cmd = app.add_subcommand("train", "run one training stage");
    add_common(train_cmd, true);
    train_cmd->add_option("--stage", stage, "gagp, sit or vro")->required()->check(CLI::IsMember({"gagp", "sit", "vro"}));
    train_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
    train_cmd->add_option("--init", init, "starting checkpoint");
    train_cmd->add_option("--tokenizer", tokenizer_path, "tokenizer for a fresh policy when --init is absent (gagp, sit)");
    train_cmd->add_option("--reference", reference, "frozen reference checkpoint (vro; default --init)");
    train_cmd->add_option("--embedder", embedder_path, "frozen embedder (vro)");
    train_cmd->add_option("--out", out, "output checkpoint")->required();

    auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on the eval splits");
    add_common(eval_cmd, true);
    eval_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
    eval_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint");
    eval_cmd->add_option("--embedder", embedder_path, "frozen embedder")->required();
    eval_cmd->add_option("--out", out, "report file")->required();
    eval_cmd->add_option("--format", format, "json, csv or table")->check(CLI::IsMember({"json", "csv", "table"}));
    eval_cmd->add_flag("--oracle", oracle, "score ground-truth targets as if generated");

    auto* gen_cmd = app.add_subcommand("generate", "single-prompt inference");
    add_common(gen_cmd, false);
    gen_cmd->add_option("--task", task, "tfsf or stcqa")->required()->check(CLI::IsMember({"tfsf", "stcqa"}));
    gen_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint")->required();
    gen_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
    gen_cmd->add_option("--split", split, "split to draw the prompt from (default eval_<task>)");
    gen_cmd->add_option("--index", index, "record index within the split");
    gen_cmd->add_option("--id", record_id, "record id (overrides --index)");
    gen_cmd->add_option("--out", out, "output PNG (tfsf) or text file (stcqa)")->required();

    auto* verify_cmd = app.add_subcommand("verify", "run the invariant suite");
    add_common(verify_cmd, false);

    auto* pipe_cmd = app.add_subcommand("pipeline", "run every stage end to end");
    add_common(pipe_cmd, true);
    pipe_cmd->add_option("--out", out, "run directory")->required();

    auto* repro_cmd = app.add_subcommand("reproduce", "re-run a pipeline manifest and compare artifact hashes");
    add_common(repro_cmd, false);
    repro_cmd->add_option("--manifest", manifest, "manifest.json of an earlier run")->required();
    repro_cmd->add_option("--out", out, "new run directory")->required();

    auto* report_cmd = app.add_subcommand("report", "render an evaluation report");
    add_common(report_cmd, false);
    report_cmd->add_option("--in", report_in, "report JSON")->required();
    report_cmd->add_option("--format", format, "json, csv or table")->check(CLI::IsMember({"json", "csv", "table"}));
    report_cmd->add_option("--out", out, "output file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        std::cerr << app.help() << '\n';
        return kUsageError;
    }

    try {
        if (*worldgen_cmd) {
            const auto cfg = load_config(common);
            const int n = count > 0 ? count : cfg.preview_scenes;
            fs::create_directories(out);
            json scenes = json::array();
            std::vector<fs::path> outputs;
            for (int i = 0; i < n; ++i) {
                const auto scene = worldgen::generate_scene(cfg.corpus.seed, i, cfg.world);
                const auto meta = worldgen::sample_acquisition(scene, split_seed(cfg.corpus.seed, static_cast<std::uint64_t>(i)));
                char name[32];
                std::snprintf(name, sizeof name, "scene_%03d.png", i);
                write_png(fs::path(out) / name, worldgen::render_observation(scene, meta));
                outputs.push_back(fs::path(out) / name);
                scenes.push_back({{"file", name}, {"scene", worldgen::to_json(scene)}, {"meta", worldgen::to_json(meta)}});
            }
            write_file(fs::path(out) / "scenes.json", scenes.dump(1) + "\n");
            outputs.push_back(fs::path(out) / "scenes.json");
            write_run_manifest(fs::path(out) / "run.manifest.json", "worldgen", pipeline::to_json(cfg), {}, outputs);
            std::cout << json{{"scenes", n}, {"out", out}}.dump() << '\n';
        } else if (*corpus_cmd) {
            const auto cfg = load_config(common);
            pipeline::DirLock lock(out);
            auto log = open_log(common, fs::path(out) / "logs" / "build-corpus.jsonl");
            log.event("stage_start", {{"stage", "corpus"}});
            const auto m = corpus::write_corpus(cfg.corpus, out);
            log.event("stage_end", {{"stage", "corpus"}, {"counts", m.at("counts")}});
            std::vector<fs::path> outputs = {fs::path(out) / "manifest.json"};
            for (const char* s : corpus::kSplitNames) outputs.push_back(fs::path(out) / (std::string(s) + ".jsonl"));
            write_run_manifest(fs::path(out) / "run.manifest.json", "build-corpus", pipeline::to_json(cfg), {}, outputs);
            std::cout << json{{"counts", m.at("counts")}, {"out", out}}.dump() << '\n';
        } else if (*tok_cmd || *emb_cmd) {
            const auto cfg = load_config(common);
            pipeline::DirLock lock(parent_or_cwd(out));
            auto log = open_log(common, parent_or_cwd(out) / "logs" / (*tok_cmd ? "train-tokenizer.jsonl" : "train-embedder.jsonl"));
            json summary;
            std::vector<fs::path> inputs;
            if (*tok_cmd) {
                inputs.push_back(fs::path(corpus_dir) / "gagp.jsonl");
                const auto records = corpus::read_split(corpus_dir, "gagp");
                log.event("stage_start", {{"stage", "tokenizer"}});
                const auto tok = tokenizer::train_codebook(pipeline::tokenizer_images(records, cfg.tokenizer_images), cfg.tokenizer, split_seed(cfg.seed, 11));
                tok.save(out);
                summary = {{"tokenizer", out}, {"hash", tok.content_hash()}, {"active_codes_train", tok.curve().active_codes}};
            } else {
                inputs.push_back(fs::path(corpus_dir) / "sit.jsonl");
                const auto records = corpus::read_split(corpus_dir, "sit");
                log.event("stage_start", {{"stage", "embedder"}});
                const auto emb = rewards::train_embedder(pipeline::embedder_pairs(records, cfg.embedder_pairs), cfg.embedder, split_seed(cfg.seed, 12));
                emb.save(out);
                summary = {{"embedder", out}, {"hash", emb.content_hash()}, {"holdout_top1", emb.holdout_top1}, {"holdout_pairs", emb.holdout_pairs}};
            }
            log.event("stage_end", summary);
            write_run_manifest(fs::path(out).string() + ".manifest.json", *tok_cmd ? "train-tokenizer" : "train-embedder", pipeline::to_json(cfg), inputs, {out});
            std::cout << summary.dump() << '\n';
        } else if (*train_cmd) {
            const auto cfg = load_config(common);
            const auto s = model::stage_from_string(stage);
            pipeline::DirLock lock(parent_or_cwd(out));
            auto log = open_log(common, parent_or_cwd(out) / "logs" / ("train-" + stage + ".jsonl"));
            std::vector<fs::path> inputs = {fs::path(corpus_dir) / (stage + ".jsonl")};
            const auto records = corpus::read_split(corpus_dir, stage);
            model::PolicyCheckpoint start;
            if (!init.empty()) {
                start = model::PolicyCheckpoint::load(init);
                inputs.push_back(init);
            } else if (s == model::Stage::vro) {
                throw StageOrderError("train --stage vro needs --init with an instruction-tuned (sit) checkpoint");
            } else {
                if (tokenizer_path.empty()) throw ConfigError("train: --init or --tokenizer is required");
                const auto tok = tokenizer::Tokenizer::load(tokenizer_path);
                inputs.push_back(tokenizer_path);
                auto mc = cfg.model;
                auto vocab = pipeline::training_vocabulary(load_splits(corpus_dir), tok.config().codebook_size);
                mc.vocab_size = vocab.size();
                start = model::init_policy(mc, std::move(vocab), tok, split_seed(cfg.seed, 13));
            }
            log.event("stage_start", {{"stage", stage}, {"start_stage", model::to_string(start.stage)}, {"start_hash", start.content_hash()}});
            training::StageResult result;
            if (s == model::Stage::gagp) result = training::run_gagp(start, records, cfg.gagp);
            else if (s == model::Stage::sit) result = training::run_sit(start, records, cfg.sit);
            else {
                const auto ref = reference.empty() ? start : model::PolicyCheckpoint::load(reference);
                if (!reference.empty()) inputs.push_back(reference);
                std::optional<rewards::Embedder> emb;
                if (!embedder_path.empty()) {
                    emb = rewards::Embedder::load(embedder_path);
                    inputs.push_back(embedder_path);
                }
                std::unique_ptr<rewards::ExternalJudge> judge;
                if (cfg.vro.judge == "external") judge = std::make_unique<rewards::ExternalJudge>(*cfg.vro.judge_client);
                auto vc = cfg.vro;
                if (vc.resume_path.empty()) vc.resume_path = fs::path(out).string() + ".resume";
                result = training::run_vro(start, ref, records, {emb ? &*emb : nullptr, judge.get()}, vc);
            }
            for (const auto& w : result.warnings) log.event("warning", {{"message", w}});
            for (const auto& e : result.log) log.event("step", e);
            result.checkpoint.save(out);
            const json summary = {{"stage", stage}, {"checkpoint", out}, {"hash", result.checkpoint.content_hash()}, {"steps", result.steps}, {"validation_loss", result.validation_loss}};
            log.event("stage_end", summary);
            write_run_manifest(fs::path(out).string() + ".manifest.json", "train --stage " + stage, pipeline::to_json(cfg), inputs, {out});
            std::cout << summary.dump() << '\n';
        } else if (*eval_cmd) {
            const auto cfg = load_config(common);
            auto ec = cfg.eval;
            ec.oracle = ec.oracle || oracle;
            std::optional<model::PolicyCheckpoint> policy;
            std::vector<fs::path> inputs = {fs::path(corpus_dir) / "eval_tfsf.jsonl", fs::path(corpus_dir) / "eval_stcqa.jsonl", embedder_path};
            if (!checkpoint.empty()) {
                policy = model::PolicyCheckpoint::load(checkpoint);
                inputs.push_back(checkpoint);
            } else if (!ec.oracle) {
                throw ConfigError("evaluate: --checkpoint is required unless --oracle is set");
            }
            const auto emb = rewards::Embedder::load(embedder_path);
            const auto report = eval::evaluate_suite(policy ? &*policy : nullptr, emb, corpus::read_split(corpus_dir, "eval_tfsf"),
                                                     corpus::read_split(corpus_dir, "eval_stcqa"), ec, policy ? std::string(model::to_string(policy->stage)) : "oracle");
            const std::string text = format == "csv" ? eval::to_csv(report) : format == "table" ? eval::to_table({report}) : eval::to_json(report).dump(1) + "\n";
            write_file(out, text);
            write_run_manifest(fs::path(out).string() + ".manifest.json", "evaluate", pipeline::to_json(cfg), inputs, {out});
            std::cout << json{{"report", out}, {"tfsf", eval::to_json(report)["tfsf"]}, {"stcqa", eval::to_json(report)["stcqa"]}}.dump() << '\n';
        } else if (*gen_cmd) {
            const auto policy = model::PolicyCheckpoint::load(checkpoint);
            const auto t = corpus::task_from_string(task);
            const auto records = corpus::read_split(corpus_dir, split.empty() ? "eval_" + task : split);
            const corpus::PromptRecord* rec = nullptr;
            if (!record_id.empty()) {
                for (const auto& r : records)
                    if (r.id == record_id) rec = &r;
                if (!rec) throw InvalidInput("generate: no record with id " + record_id);
            } else {
                if (index < 0 || static_cast<std::size_t>(index) >= records.size()) throw InvalidInput("generate: --index out of range");
                rec = &records[static_cast<std::size_t>(index)];
            }
            if (rec->task != t) throw InvalidInput("generate: record " + rec->id + " is not a " + task + " record");
            const auto seq = model::assemble_sequence(*rec, policy.vocab, policy.tokenizer);
            model::GenerateOptions opts;
            const auto g = model::generate(policy.model, policy.vocab, seq.prompt(), t, policy.tokenizer.config().sequence_length(), opts);
            if (t == corpus::Task::tfsf) {
                const auto codes = model::extract_image(g.tokens, policy.vocab);
                if (!codes) throw InvalidInput("generate: no image block produced");
                if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
                write_png(out, policy.tokenizer.decode(*codes));
            } else {
                write_file(out, policy.vocab.detokenize(g.tokens) + "\n");
            }
            std::cout << json{{"record", rec->id}, {"out", out}, {"tokens", g.tokens.size()}}.dump() << '\n';
        } else if (*verify_cmd) {
            const auto results = cli::run_invariant_suite();
            int passed = 0;
            for (const auto& r : results) {
                passed += r.passed;
                std::cout << json{{"check", r.name}, {"passed", r.passed}, {"detail", r.detail}}.dump() << '\n';
            }
            std::cout << json{{"passed", passed}, {"total", results.size()}}.dump() << '\n';
            return passed == static_cast<int>(results.size()) ? 0 : kRuntimeError;
        } else if (*pipe_cmd) {
            const auto cfg = load_config(common);
            pipeline::DirLock lock(out);
            auto log = open_log(common, fs::path(out) / "logs" / "pipeline.jsonl");
            const auto result = pipeline::run_pipeline(cfg, out, log);
            std::cout << json{{"manifest", (fs::path(out) / "manifest.json").string()}, {"artifacts", result.artifacts.size()}, {"eval", result.manifest["eval"]}}.dump() << '\n';
        } else if (*repro_cmd) {
            const auto m = read_json_file(manifest, "manifest");
            pipeline::DirLock lock(out);
            auto log = open_log(common, fs::path(out) / "logs" / "reproduce.jsonl");
            const auto diff = pipeline::reproduce(m, out, log);
            std::cout << json{{"reproduced", diff.empty()}, {"mismatched", diff}}.dump() << '\n';
            return diff.empty() ? 0 : kRuntimeError;
        } else if (*report_cmd) {
            json j;
            try {
                std::ifstream in(report_in);
                if (!in) throw FormatError("report: cannot read " + report_in);
                j = json::parse(in);
            } catch (const json::parse_error& e) {
                throw FormatError(std::string("report: ") + e.what());
            }
            const auto report = eval::report_from_json(j);
            const std::string text = format == "csv" ? eval::to_csv(report) : format == "table" ? eval::to_table({report}) : eval::to_json(report).dump(1) + "\n";
            write_file(out, text);
            std::cout << json{{"out", out}, {"format", format}}.dump() << '\n';
        }
    } catch (const StageOrderError& e) {
        print_error("stage_order", e.what());
        return kConfigError;
    } catch (const ConfigError& e) {
        print_error("config", e.what());
        return kConfigError;
    } catch (const FormatError& e) {
        print_error("format", e.what());
        return kConfigError;
    } catch (const InvalidInput& e) {
        print_error("invalid_input", e.what());
        return kConfigError;
    } catch (const TransportError& e) {
        print_error("transport", e.what());
        return kRuntimeError;
    } catch (const std::exception& e) {
        print_error("runtime", e.what());
        return kRuntimeError;
    }
    return 0;
}
