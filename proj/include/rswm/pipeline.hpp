#pragma once

// Run configuration and end-to-end orchestration shared by the command line
// tool: corpus, tokenizer, embedder, three stages, evaluation, manifest.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rswm/corpus/corpus.hpp"
#include "rswm/eval.hpp"
#include "rswm/model/transformer.hpp"
#include "rswm/rewards/embedder.hpp"
#include "rswm/tokenizer.hpp"
#include "rswm/training.hpp"

namespace rswm::pipeline {

struct Paths {
    std::string corpus = "corpus";
    std::string checkpoints = "checkpoints";
    std::string reports = "reports";
};

struct RunConfig {
    std::uint64_t seed = 0;
    Paths paths;
    worldgen::WorldConfig world;
    int preview_scenes = 8; // worldgen subcommand
    corpus::CorpusConfig corpus;
    tokenizer::TokenizerConfig tokenizer;
    int tokenizer_images = 2000;
    rewards::EmbedderConfig embedder;
    int embedder_pairs = 10000;
    model::ModelConfig model;
    training::StageConfig gagp = training::default_stage_config(model::Stage::gagp);
    training::StageConfig sit = training::default_stage_config(model::Stage::sit);
    training::StageConfig vro = training::default_stage_config(model::Stage::vro);
    eval::EvalConfig eval;
};

/// Strict parse: unknown keys and a missing seed are ConfigError. Seeds of sections
/// that omit one are derived from the global seed.
RunConfig run_config_from_json(const nlohmann::json& j);
/// Fully resolved configuration (every default spelled out).
nlohmann::json to_json(const RunConfig& c);

/// Applies "a.b.c=value" overrides; values parse as JSON when they can, else as strings.
nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& overrides);

/// Line-delimited JSON event log.
class Log {
public:
    Log() = default;
    explicit Log(const std::filesystem::path& path);
    void event(const std::string& kind, nlohmann::json fields = nlohmann::json::object());
    void echo_to_stderr(bool on) { stderr_ = on; }

private:
    std::ofstream file_;
    bool stderr_ = false;
};

/// Exclusive ownership of an output directory for the lifetime of the object.
class DirLock {
public:
    explicit DirLock(const std::filesystem::path& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::filesystem::path path_;
};

/// Images for codebook training: current and target images of the pre-training split.
std::vector<Image> tokenizer_images(const std::vector<corpus::PromptRecord>& records, int count);
/// Matched (image, text) pairs: observation captions plus (target image, instruction).
std::vector<rewards::ImageText> embedder_pairs(const std::vector<corpus::PromptRecord>& records, int count);
/// Vocabulary over the training-side splits.
model::Vocabulary training_vocabulary(const std::map<std::string, std::vector<corpus::PromptRecord>>& splits, int visual);

std::string file_sha256(const std::filesystem::path& path);

/// Everything the pipeline produced, keyed by path relative to the run directory.
struct RunResult {
    nlohmann::json manifest;
    std::map<std::string, std::string> artifacts; // relative path -> sha256
    eval::EvalReport report;
};

/// Runs every stage into `dir` and writes dir/manifest.json.
RunResult run_pipeline(const RunConfig& config, const std::filesystem::path& dir, Log& log);

/// Re-runs the manifest's configuration into `dir`; returns artifacts whose hashes differ.
std::vector<std::string> reproduce(const nlohmann::json& manifest, const std::filesystem::path& dir, Log& log);

} // namespace rswm::pipeline
