#pragma once

// Unified vocabulary and the fixed token layout of prompt records.
//
// Id families, contiguous and in this order:
//   special | visual (K) | metadata | words
//
// Sequence layout:
//   [BOS][SYS][TASK] ([BOI] z [EOI]) x images [META src][META tgt] words [SEP] target
// where the target is [BOI] z [EOI] for forecasting tasks and words [EOS] for
// question answering. Loss and log-probabilities cover the target only.

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "rswm/corpus/corpus.hpp"
#include "rswm/tokenizer.hpp"

namespace rswm::model {

enum class Special { pad, bos, eos, boi, eoi, sep, unk, sys_stage1, sys_stage23, task_fsf, task_tfsf, task_stcqa };
inline constexpr int kSpecialCount = 12;

/// Which system prompt heads the sequence: stage 1 for pre-training, stage 2/3 otherwise.
enum class SystemPrompt { stage1, stage23 };

class Vocabulary {
public:
    Vocabulary() = default;
    /// `words` are deduplicated and sorted; `visual` is the codebook size.
    Vocabulary(int visual, std::vector<std::string> words);

    int size() const { return word_begin() + static_cast<int>(words_.size()); }
    int visual_count() const { return visual_; }
    int visual_begin() const { return kSpecialCount; }
    int meta_begin() const { return visual_begin() + visual_; }
    int word_begin() const;

    int special(Special s) const { return static_cast<int>(s); }
    int visual(int code) const;
    int meta(int flat) const;
    /// Word id, or the unk id for unseen words.
    int word(std::string_view w) const;

    bool is_visual(int id) const { return id >= visual_begin() && id < meta_begin(); }
    bool is_word(int id) const { return id >= word_begin() && id < size(); }
    int code_of(int id) const;
    std::string_view word_of(int id) const;
    const std::vector<std::string>& words() const { return words_; }

    /// Words for ids (non-word ids are skipped), joined by single spaces.
    std::string detokenize(const std::vector<int>& ids) const;
    std::vector<int> tokenize(std::string_view text) const;

    bool operator==(const Vocabulary& o) const { return visual_ == o.visual_ && words_ == o.words_; }

private:
    int visual_ = 0;
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

nlohmann::json to_json(const Vocabulary& v);
Vocabulary vocabulary_from_json(const nlohmann::json& j);

/// Vocabulary over every word of the given records' instructions, questions and target texts.
Vocabulary build_vocabulary(const std::vector<const std::vector<corpus::PromptRecord>*>& splits, int visual);

struct TokenSequence {
    std::vector<int> ids;
    int target_begin = 0; // first target position
    corpus::Task task = corpus::Task::fsf;

    int prompt_length() const { return target_begin; }
    int target_length() const { return static_cast<int>(ids.size()) - target_begin; }
    std::vector<int> prompt() const { return {ids.begin(), ids.begin() + target_begin}; }
    bool operator==(const TokenSequence&) const = default;
};

struct AssembleOptions {
    SystemPrompt system = SystemPrompt::stage23;
    bool drop_metadata = false; // metadata tokens replaced by pad (ablation)
};

/// Full sequence for a record. Images are encoded with `tok`.
TokenSequence assemble_sequence(const corpus::PromptRecord& record, const Vocabulary& vocab, const tokenizer::Tokenizer& tok,
                                const AssembleOptions& options = {});

/// Visual block [BOI] codes [EOI] for an image.
std::vector<int> image_block(const tokenizer::VisualTokens& codes, const Vocabulary& vocab);

/// Codes of the first complete image block in `ids`, or nullopt.
std::optional<tokenizer::VisualTokens> extract_image(const std::vector<int>& ids, const Vocabulary& vocab);

} // namespace rswm::model
