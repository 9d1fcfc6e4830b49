#pragma once

// Corpus construction: filter, pair, annotate, assemble, split.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rswm/acquisition.hpp"
#include "rswm/common/chat_client.hpp"
#include "rswm/common/image.hpp"
#include "rswm/worldgen.hpp"

namespace rswm::corpus {

enum class Task { fsf, tfsf, stcqa };
std::string_view to_string(Task t);
Task task_from_string(std::string_view s);

/// One rendered acquisition. Images are kept on the 8-bit grid so that
/// serialization is lossless.
struct Observation {
    std::int64_t location_id = 0;
    int epoch = 0;
    AcqMetadata meta;
    Image image;
    std::string caption; // single-image description, used to train the embedder
    std::optional<worldgen::SceneState> scene; // in memory only

    bool operator==(const Observation& o) const {
        return location_id == o.location_id && epoch == o.epoch && meta == o.meta && image == o.image && caption == o.caption;
    }
};

inline constexpr double kMaxCloudCover = 0.9;

/// True iff cloud_cover <= 0.9.
bool cloud_filter(const AcqMetadata& meta);

/// All (pre, post) index pairs with equal location, pre strictly earlier, both passing cloud_filter.
std::vector<std::pair<std::size_t, std::size_t>> pair_temporal(const std::vector<Observation>& observations);

/// Caption of the change plus the matching forecasting prompt.
struct Draft {
    std::string caption;
    std::string post_prompt;
    bool operator==(const Draft&) const = default;
};

Draft draft_caption(const Observation& pre, const Observation& post, const worldgen::ChangeRecord& truth);

/// Metadata context handed to refiners (the placeholder fields of the refinement template).
nlohmann::json refine_context(const Observation& pre, const Observation& post, const worldgen::ChangeRecord& truth);

struct RefineRequest {
    Draft draft;
    nlohmann::json context;
};

struct RefineResponse {
    Draft refined;
    double latency_ms = 0.0;
};

class AnnotationClient {
public:
    virtual ~AnnotationClient() = default;
    virtual RefineResponse refine(const RefineRequest& request) = 0;
    virtual std::string name() const = 0;
};

/// Deduplicates sentences, orders them changes -> unchanged -> time/environment
/// and rewrites numerals ("45 degrees" -> "moderate shadows", "30 %" -> "partly cloudy skies").
class RuleRefiner : public AnnotationClient {
public:
    RefineResponse refine(const RefineRequest& request) override;
    std::string name() const override { return "rule"; }
};

/// Sends the text-refinement template to a chat-completion endpoint.
class HttpRefiner : public AnnotationClient {
public:
    explicit HttpRefiner(ChatClientConfig config) : client_(std::move(config)) {}
    RefineResponse refine(const RefineRequest& request) override;
    std::string name() const override { return "http"; }
    /// The user message sent for `request`.
    static std::string render_request(const RefineRequest& request);

private:
    ChatClient client_;
};

/// Rewrites numerals and normalizes spacing; output is always numeral-free.
std::string strip_numerals(std::string_view text);
std::string normalize_spacing(std::string_view text);

struct RefineOutcome {
    Draft text;
    bool fallback = false; // true when the refiner failed and the draft was kept
    std::string error;
};

/// Transport failures fall back to the draft; the result is numeral-free either way.
RefineOutcome refine_caption(const Draft& draft, const nlohmann::json& context, AnnotationClient& refiner);

struct PromptRecord {
    std::string id;
    std::string split;
    Task task = Task::fsf;
    std::vector<Observation> images; // [I_cur] or [I_pre, I_post]
    std::string instruction;         // TFSF only
    std::string question;            // STCQA only
    AcqMetadata meta_source;
    AcqMetadata meta_target;
    std::optional<Observation> target_image; // FSF / TFSF
    std::string target_text;                 // STCQA
    worldgen::ChangeRecord truth;
    bool refine_fallback = false;
    bool operator==(const PromptRecord&) const = default;
};

struct PromptParts {
    std::vector<Observation> images;
    std::string text; // instruction (TFSF) or question (STCQA); empty for FSF
    AcqMetadata meta_source;
    AcqMetadata meta_target;
    std::optional<Observation> target_image;
    std::string target_text;
    worldgen::ChangeRecord truth;
};

/// Builds a record with exactly the fields of the task's prompt; throws InvalidInput on arity mismatch.
PromptRecord assemble_prompt(Task task, PromptParts parts);

/// Fixed STCQA question bank.
const std::vector<std::string>& question_bank();

nlohmann::json to_json(const Observation& o);
Observation observation_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PromptRecord& r);
PromptRecord record_from_json(const nlohmann::json& j);

struct LocationRange {
    std::int64_t begin = 0;
    std::int64_t end = 0; // exclusive
    bool operator==(const LocationRange&) const = default;
};

inline constexpr std::array<const char*, 5> kSplitNames = {"gagp", "sit", "vro", "eval_tfsf", "eval_stcqa"};
bool is_train_split(std::string_view split);

struct CorpusConfig {
    std::uint64_t seed = 0;
    std::map<std::string, int> sizes = {{"gagp", 20000}, {"sit", 40000}, {"vro", 900}, {"eval_tfsf", 160}, {"eval_stcqa", 500}};
    double sit_stcqa_fraction = 0.5;
    double vro_stcqa_fraction = 0.5;
    int min_span_months = 6;
    int max_span_months = 48;
    int acquisitions_per_epoch = 2;
    LocationRange train_locations{0, 1000000};
    LocationRange eval_locations{1000000, 2000000};
    worldgen::WorldConfig world;
    std::string refiner = "rule"; // "rule" or "http"
    std::optional<ChatClientConfig> refiner_client;

    void validate() const;
};

nlohmann::json to_json(const CorpusConfig& c);
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

/// Receives records in build order.
using RecordSink = std::function<void(const PromptRecord&)>;

/// Runs the whole pipeline, streaming records to `sink`; returns the manifest.
nlohmann::json build_corpus(const CorpusConfig& config, const RecordSink& sink, AnnotationClient* refiner = nullptr);

struct Corpus {
    std::map<std::string, std::vector<PromptRecord>> splits;
    nlohmann::json manifest;
    const std::vector<PromptRecord>& at(const std::string& split) const { return splits.at(split); }
};

Corpus build_corpus(const CorpusConfig& config, AnnotationClient* refiner = nullptr);

/// Writes <dir>/<split>.jsonl plus <dir>/manifest.json; returns the manifest.
nlohmann::json write_corpus(const CorpusConfig& config, const std::filesystem::path& dir, AnnotationClient* refiner = nullptr);

std::vector<PromptRecord> read_split(const std::filesystem::path& dir, const std::string& split);
nlohmann::json read_manifest(const std::filesystem::path& dir);

/// Canonical JSONL line of a record (what write_corpus hashes).
std::string jsonl_line(const PromptRecord& r);

} // namespace rswm::corpus
