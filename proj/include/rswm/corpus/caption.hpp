#pragma once

// Template caption grammar shared by the drafter, the refiner and the judge.
//
// A caption is a sequence of sentences, each one of:
//   change     "the farmland in the north and east has become buildings ."
//   layout     "the overall layout remains unchanged ."
//   unchanged  "the forest in the west remains unchanged ."
//   time       "the second image was taken about a year later , in summer after spring ."
//   light      "sunlight shifts from the east to the south , and shadows become longer ."
//   cloud      "the view changes from clear skies to partly cloudy skies ."
//   snow       "snow covers the ground in the first image only ."
// Tokens are separated by single spaces; punctuation is its own token.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rswm/acquisition.hpp"
#include "rswm/metadata.hpp"
#include "rswm/worldgen.hpp"

namespace rswm::corpus {

using worldgen::LandCover;

/// Caption noun phrase for a class ("farmland", "bare land", "construction site", ...).
std::string_view class_phrase(LandCover c);
/// The single keyword that must appear when a class is mentioned.
std::string_view class_keyword(LandCover c);

/// 3x3 compass grid over the scene; index = 3 * row_third + col_third.
inline constexpr std::string_view kSectorWords[9] = {"northwest", "north", "northeast", "west", "center",
                                                     "east",      "southwest", "south", "southeast"};
int sector_of(int row, int col, int size);

enum class Elapsed { few_months, under_a_year, about_a_year, several_years };
Elapsed elapsed_bucket(int months);
std::string_view elapsed_phrase(Elapsed e);

enum class ShadowTrend { longer, shorter, same };

struct ChangeFact {
    LandCover from = LandCover::field;
    LandCover to = LandCover::field;
    std::vector<int> sectors; // most affected first
    bool operator==(const ChangeFact&) const = default;
};

struct UnchangedFact {
    LandCover cls = LandCover::field;
    std::vector<int> sectors;
    bool operator==(const UnchangedFact&) const = default;
};

struct TimeFact {
    metadata::Season season_pre = metadata::Season::spring;
    metadata::Season season_post = metadata::Season::spring;
    Elapsed elapsed = Elapsed::few_months;
    bool operator==(const TimeFact&) const = default;
};

struct LightFact {
    int dir_pre = 0; // compass sector of the sunlight
    int dir_post = 0;
    bool operator==(const LightFact&) const = default;
};

struct ShadowFact {
    ShadowTrend trend = ShadowTrend::same;
    metadata::ShadowClass same_class = metadata::ShadowClass::moderate; // only meaningful when trend == same
    bool operator==(const ShadowFact&) const = default;
};

struct CloudFact {
    metadata::CloudClass pre = metadata::CloudClass::clear;
    metadata::CloudClass post = metadata::CloudClass::clear;
    bool operator==(const CloudFact&) const = default;
};

struct SnowFact {
    bool in_pre = false;
    bool in_post = false;
    bool operator==(const SnowFact&) const = default;
};

struct CaptionFacts {
    std::vector<ChangeFact> changes;
    bool layout_unchanged = false;
    std::vector<UnchangedFact> unchanged;
    std::optional<TimeFact> time;
    std::optional<LightFact> light;
    std::optional<ShadowFact> shadow;
    std::optional<CloudFact> cloud;
    std::optional<SnowFact> snow;
    bool operator==(const CaptionFacts&) const = default;
};

/// Changed-class groups of a record, largest first.
std::vector<ChangeFact> change_facts(const worldgen::ChangeRecord& truth);

/// Ground-truth facts for a pair. `truth` must carry acquisition deltas consistent with the metas.
CaptionFacts facts_from_truth(const worldgen::ChangeRecord& truth, const AcqMetadata& meta_pre,
                              const AcqMetadata& meta_post);

/// One sentence per fact, in the order changes, unchanged, time, environment.
std::vector<std::string> render_sentences(const CaptionFacts& facts);
std::string render_caption(const CaptionFacts& facts);

/// Extracts whatever facts the text states. Never throws; unknown sentences are ignored.
CaptionFacts parse_caption(std::string_view text);

/// Sentence category, used by the refiner for ordering.
enum class SentenceKind { change, unchanged, time, environment, other };
SentenceKind classify_sentence(std::string_view sentence);

/// Splits on " . " boundaries, keeping the terminating period on each sentence.
std::vector<std::string> split_sentences(std::string_view text);

/// "farmland in the north and east , water in the south" for the dominant classes of a class map.
std::string scene_clause(const std::vector<LandCover>& grid, int size);

/// Caption of a single observation: "A satellite image showing <scene clause> , <acquisition> ."
std::string describe_observation(const worldgen::SceneState& scene, const AcqMetadata& meta);

/// TFSF instruction for forecasting `post` from `pre`.
std::string forecast_instruction(const worldgen::ChangeRecord& truth, const worldgen::SceneState& post,
                                 const AcqMetadata& meta_post);

} // namespace rswm::corpus
