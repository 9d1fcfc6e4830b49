#include "rswm/model/vocab.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "rswm/common/errors.hpp"
#include "rswm/metadata.hpp"

namespace rswm::model {

using nlohmann::json;

Vocabulary::Vocabulary(int visual, std::vector<std::string> words) : visual_(visual) {
    require(visual > 0, "vocabulary: visual family must be non-empty");
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    words_ = std::move(words);
    for (std::size_t i = 0; i < words_.size(); ++i) {
        require(!words_[i].empty() && words_[i].find(' ') == std::string::npos, "vocabulary: words must be non-empty and space-free");
        index_.emplace(words_[i], word_begin() + static_cast<int>(i));
    }
}

int Vocabulary::word_begin() const { return meta_begin() + metadata::total_metadata_tokens(); }

int Vocabulary::visual(int code) const {
    require(code >= 0 && code < visual_, "vocabulary: visual code out of range");
    return visual_begin() + code;
}

int Vocabulary::meta(int flat) const {
    require(flat >= 0 && flat < metadata::total_metadata_tokens(), "vocabulary: metadata id out of range");
    return meta_begin() + flat;
}

int Vocabulary::word(std::string_view w) const {
    const auto it = index_.find(std::string(w));
    return it == index_.end() ? special(Special::unk) : it->second;
}

int Vocabulary::code_of(int id) const {
    require(is_visual(id), "vocabulary: not a visual token");
    return id - visual_begin();
}

std::string_view Vocabulary::word_of(int id) const {
    require(is_word(id), "vocabulary: not a word token");
    return words_[static_cast<std::size_t>(id - word_begin())];
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (!is_word(id)) continue;
        if (!out.empty()) out += ' ';
        out += word_of(id);
    }
    return out;
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
    std::istringstream in{std::string(text)};
    std::vector<int> out;
    for (std::string w; in >> w;) out.push_back(word(w));
    return out;
}

json to_json(const Vocabulary& v) {
    return {{"special", kSpecialCount}, {"visual", v.visual_count()}, {"metadata", metadata::total_metadata_tokens()},
            {"metadata_layout", metadata::kLayoutVersion},  {"words", v.words()}, {"size", v.size()}};
}

Vocabulary vocabulary_from_json(const json& j) {
    if (j.at("special").get<int>() != kSpecialCount || j.at("metadata").get<int>() != metadata::total_metadata_tokens() ||
        j.at("metadata_layout").get<std::string>() != metadata::kLayoutVersion)
        throw FormatError("vocabulary: family layout differs from this build");
    Vocabulary v(j.at("visual").get<int>(), j.at("words").get<std::vector<std::string>>());
    if (v.size() != j.at("size").get<int>()) throw FormatError("vocabulary: size mismatch");
    return v;
}

Vocabulary build_vocabulary(const std::vector<const std::vector<corpus::PromptRecord>*>& splits, int visual) {
    std::set<std::string> words;
    auto add = [&](const std::string& text) {
        std::istringstream in(text);
        for (std::string w; in >> w;) words.insert(w);
    };
    for (const auto* split : splits) {
        for (const auto& r : *split) {
            add(r.instruction);
            add(r.question);
            add(r.target_text);
        }
    }
    for (const auto& q : corpus::question_bank()) add(q);
    return Vocabulary(visual, {words.begin(), words.end()});
}

std::vector<int> image_block(const tokenizer::VisualTokens& codes, const Vocabulary& vocab) {
    std::vector<int> out;
    out.reserve(codes.codes.size() + 2);
    out.push_back(vocab.special(Special::boi));
    for (int c : codes.codes) out.push_back(vocab.visual(c));
    out.push_back(vocab.special(Special::eoi));
    return out;
}

std::optional<tokenizer::VisualTokens> extract_image(const std::vector<int>& ids, const Vocabulary& vocab) {
    const auto boi = std::find(ids.begin(), ids.end(), vocab.special(Special::boi));
    if (boi == ids.end()) return std::nullopt;
    tokenizer::VisualTokens out;
    for (auto it = boi + 1; it != ids.end(); ++it) {
        if (*it == vocab.special(Special::eoi)) return out;
        if (!vocab.is_visual(*it)) return std::nullopt;
        out.codes.push_back(vocab.code_of(*it));
    }
    return std::nullopt;
}

TokenSequence assemble_sequence(const corpus::PromptRecord& record, const Vocabulary& vocab, const tokenizer::Tokenizer& tok,
                                const AssembleOptions& options) {
    require(tok.config().codebook_size == vocab.visual_count(), "assemble: tokenizer and vocabulary disagree on K");
    TokenSequence seq;
    seq.task = record.task;
    auto& ids = seq.ids;
    ids.push_back(vocab.special(Special::bos));
    ids.push_back(vocab.special(options.system == SystemPrompt::stage1 ? Special::sys_stage1 : Special::sys_stage23));
    switch (record.task) {
    case corpus::Task::fsf: ids.push_back(vocab.special(Special::task_fsf)); break;
    case corpus::Task::tfsf: ids.push_back(vocab.special(Special::task_tfsf)); break;
    case corpus::Task::stcqa: ids.push_back(vocab.special(Special::task_stcqa)); break;
    }
    for (const auto& obs : record.images) {
        const auto block = image_block(tok.encode(obs.image), vocab);
        ids.insert(ids.end(), block.begin(), block.end());
    }
    for (const auto* meta : {&record.meta_source, &record.meta_target}) {
        for (int flat : metadata::metadata_token_ids(*meta)) ids.push_back(options.drop_metadata ? vocab.special(Special::pad) : vocab.meta(flat));
    }
    const auto& text = record.task == corpus::Task::tfsf ? record.instruction : record.question;
    for (int w : vocab.tokenize(text)) ids.push_back(w);
    ids.push_back(vocab.special(Special::sep));
    seq.target_begin = static_cast<int>(ids.size());
    if (record.task == corpus::Task::stcqa) {
        require(!record.target_text.empty(), "assemble: empty text target");
        for (int w : vocab.tokenize(record.target_text)) ids.push_back(w);
        ids.push_back(vocab.special(Special::eos));
    } else {
        require(record.target_image.has_value(), "assemble: missing target image");
        const auto block = image_block(tok.encode(record.target_image->image), vocab);
        ids.insert(ids.end(), block.begin(), block.end());
    }
    return seq;
}

} // namespace rswm::model
