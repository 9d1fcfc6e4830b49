#include "rswm/corpus/caption.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <map>
#include <sstream>

#include "rswm/common/errors.hpp"

namespace rswm::corpus {

namespace {

using metadata::CloudClass;
using metadata::Season;
using metadata::ShadowClass;

constexpr std::array<LandCover, worldgen::kLandCoverCount> kAllClasses = {
    LandCover::water, LandCover::forest, LandCover::field, LandCover::bare,
    LandCover::road,  LandCover::building, LandCover::construction};

constexpr int kMinUnchangedArea = 16;
constexpr int kMaxUnchangedClasses = 4;
constexpr int kMaxChangeSectors = 3;
constexpr int kMaxUnchangedSectors = 2;
constexpr int kMinSectorPixels = 4;

using SectorCounts = std::array<int, 9>;

std::vector<std::string> tokens_of(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (ch == '.' || ch == ',' || ch == '?' || ch == '!' || ch == ';') {
            flush();
            out.emplace_back(1, ch);
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

std::string sector_list(const std::vector<int>& sectors) {
    std::string out;
    for (std::size_t i = 0; i < sectors.size(); ++i) {
        if (i > 0) out += (i + 1 == sectors.size()) ? " and " : " , ";
        out += kSectorWords[sectors[i]];
    }
    return out;
}

std::vector<int> top_sectors(const SectorCounts& counts, int limit, int min_pixels) {
    std::vector<int> idx;
    for (int i = 0; i < 9; ++i)
        if (counts[static_cast<std::size_t>(i)] > 0) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)]; });
    std::vector<int> out;
    for (int i : idx) {
        if (static_cast<int>(out.size()) >= limit) break;
        if (!out.empty() && counts[static_cast<std::size_t>(i)] < min_pixels) break;
        out.push_back(i);
    }
    return out;
}

void add_rect(SectorCounts& counts, const worldgen::Rect& r, int size) {
    for (int y = r.row; y < r.row + r.height; ++y)
        for (int x = r.col; x < r.col + r.width; ++x) ++counts[static_cast<std::size_t>(sector_of(y, x, size))];
}

struct ClassStats {
    int area = 0;
    SectorCounts sectors{};
};

std::vector<UnchangedFact> dominant_classes(const std::map<LandCover, ClassStats>& stats) {
    std::vector<std::pair<LandCover, ClassStats>> items(stats.begin(), stats.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second.area > b.second.area; });
    std::vector<UnchangedFact> out;
    for (const auto& [cls, st] : items) {
        if (st.area < kMinUnchangedArea || static_cast<int>(out.size()) >= kMaxUnchangedClasses) break;
        out.push_back({cls, top_sectors(st.sectors, kMaxUnchangedSectors, kMinSectorPixels)});
    }
    return out;
}

// Matches a class phrase starting at token i; returns its length in tokens or 0.
int match_class(const std::vector<std::string>& t, std::size_t i, LandCover& cls) {
    for (LandCover c : kAllClasses) {
        const auto words = tokens_of(class_phrase(c));
        if (i + words.size() > t.size()) continue;
        if (std::equal(words.begin(), words.end(), t.begin() + static_cast<std::ptrdiff_t>(i))) {
            cls = c;
            return static_cast<int>(words.size());
        }
    }
    return 0;
}

std::optional<LandCover> first_class(const std::vector<std::string>& t, std::size_t from, std::size_t to) {
    LandCover c{};
    for (std::size_t i = from; i < std::min(to, t.size()); ++i)
        if (match_class(t, i, c) > 0) return c;
    return std::nullopt;
}

std::size_t find_seq(const std::vector<std::string>& t, std::initializer_list<std::string_view> seq, std::size_t from = 0) {
    if (seq.size() == 0 || t.size() < seq.size()) return std::string::npos;
    for (std::size_t i = from; i + seq.size() <= t.size(); ++i) {
        std::size_t k = 0;
        for (auto w : seq) {
            if (t[i + k] != w) break;
            ++k;
        }
        if (k == seq.size()) return i;
    }
    return std::string::npos;
}

bool contains(const std::vector<std::string>& t, std::initializer_list<std::string_view> seq) {
    return find_seq(t, seq) != std::string::npos;
}

std::vector<int> sectors_in(const std::vector<std::string>& t, std::size_t from, std::size_t to) {
    std::vector<int> out;
    for (std::size_t i = from; i < std::min(to, t.size()); ++i)
        for (int s = 0; s < 9; ++s)
            if (t[i] == kSectorWords[s] && std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    return out;
}

std::optional<int> compass_at(const std::vector<std::string>& t, std::size_t i) {
    if (i >= t.size()) return std::nullopt;
    for (int d = 0; d < 8; ++d)
        if (t[i] == metadata::kCompassWords[static_cast<std::size_t>(d)]) return d;
    return std::nullopt;
}

std::optional<Season> season_at(const std::vector<std::string>& t, std::size_t i) {
    if (i >= t.size()) return std::nullopt;
    for (Season s : {Season::spring, Season::summer, Season::autumn, Season::winter})
        if (t[i] == metadata::to_string(s)) return s;
    return std::nullopt;
}

std::vector<CloudClass> clouds_in(const std::vector<std::string>& t) {
    std::vector<CloudClass> out;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] == "clear" && i + 1 < t.size() && t[i + 1] == "skies") out.push_back(CloudClass::clear);
        if (t[i] == "partly" && find_seq(t, {"partly", "cloudy", "skies"}, i) == i) out.push_back(CloudClass::partly_cloudy);
        if (t[i] == "mostly" && find_seq(t, {"mostly", "cloudy", "skies"}, i) == i) out.push_back(CloudClass::mostly_cloudy);
    }
    return out;
}

int shadow_rank(ShadowClass s) { return static_cast<int>(s); } // long 0, moderate 1, minimal 2

} // namespace

std::string_view class_phrase(LandCover c) {
    switch (c) {
    case LandCover::water: return "water";
    case LandCover::forest: return "forest";
    case LandCover::field: return "farmland";
    case LandCover::bare: return "bare land";
    case LandCover::road: return "road";
    case LandCover::building: return "buildings";
    case LandCover::construction: return "construction site";
    }
    return "";
}

std::string_view class_keyword(LandCover c) {
    switch (c) {
    case LandCover::bare: return "bare";
    case LandCover::construction: return "construction";
    default: return class_phrase(c);
    }
}

int sector_of(int row, int col, int size) {
    require(size > 0 && row >= 0 && col >= 0 && row < size && col < size, "sector_of: cell outside grid");
    return 3 * (row * 3 / size) + col * 3 / size;
}

Elapsed elapsed_bucket(int months) {
    require(months >= 0, "elapsed_bucket: negative span");
    if (months < 6) return Elapsed::few_months;
    if (months < 12) return Elapsed::under_a_year;
    if (months < 24) return Elapsed::about_a_year;
    return Elapsed::several_years;
}

std::string_view elapsed_phrase(Elapsed e) {
    switch (e) {
    case Elapsed::few_months: return "a few months";
    case Elapsed::under_a_year: return "less than a year";
    case Elapsed::about_a_year: return "about a year";
    case Elapsed::several_years: return "several years";
    }
    return "";
}

std::vector<ChangeFact> change_facts(const worldgen::ChangeRecord& truth) {
    std::map<std::pair<LandCover, LandCover>, ClassStats> groups;
    for (const auto& c : truth.changed) {
        auto& g = groups[{c.from, c.to}];
        g.area += c.region.area();
        add_rect(g.sectors, c.region, truth.size);
    }
    std::vector<std::pair<std::pair<LandCover, LandCover>, ClassStats>> items(groups.begin(), groups.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second.area > b.second.area; });
    std::vector<ChangeFact> out;
    for (const auto& [key, st] : items) out.push_back({key.first, key.second, top_sectors(st.sectors, kMaxChangeSectors, 1)});
    return out;
}

CaptionFacts facts_from_truth(const worldgen::ChangeRecord& truth, const AcqMetadata& meta_pre, const AcqMetadata& meta_post) {
    require(truth.epoch_post >= truth.epoch_pre, "facts_from_truth: post precedes pre");
    CaptionFacts f;
    f.changes = change_facts(truth);
    f.layout_unchanged = f.changes.empty();

    std::map<LandCover, ClassStats> stable;
    for (const auto& u : truth.unchanged) {
        auto& st = stable[u.cls];
        st.area += u.region.area();
        add_rect(st.sectors, u.region, truth.size);
    }
    f.unchanged = dominant_classes(stable);

    const auto pre = metadata::describe_acquisition(meta_pre);
    const auto post = metadata::describe_acquisition(meta_post);
    f.time = TimeFact{pre.season, post.season, elapsed_bucket(truth.epoch_post - truth.epoch_pre)};
    f.light = LightFact{metadata::azimuth_sector_index(meta_pre.sun_azimuth), metadata::azimuth_sector_index(meta_post.sun_azimuth)};
    ShadowFact sh;
    const int a = shadow_rank(pre.shadow), b = shadow_rank(post.shadow);
    sh.trend = b < a ? ShadowTrend::longer : (b > a ? ShadowTrend::shorter : ShadowTrend::same);
    if (sh.trend == ShadowTrend::same) sh.same_class = pre.shadow;
    f.shadow = sh;
    f.cloud = CloudFact{metadata::cloud_class(meta_pre.cloud_cover), metadata::cloud_class(meta_post.cloud_cover)};
    for (const auto& e : truth.seasonal)
        if (e.kind == worldgen::SeasonalEffect::Kind::snow && (e.in_pre || e.in_post)) f.snow = SnowFact{e.in_pre, e.in_post};
    return f;
}

std::vector<std::string> render_sentences(const CaptionFacts& f) {
    std::vector<std::string> out;
    if (f.layout_unchanged) out.emplace_back("the overall layout remains unchanged .");
    for (const auto& c : f.changes) {
        out.push_back("the " + std::string(class_phrase(c.from)) + " in the " + sector_list(c.sectors) + " has become " +
                      std::string(class_phrase(c.to)) + " .");
    }
    for (const auto& u : f.unchanged) {
        out.push_back("the " + std::string(class_phrase(u.cls)) + " in the " + sector_list(u.sectors) + " remains unchanged .");
    }
    if (f.time) {
        std::string s = "the second image was taken " + std::string(elapsed_phrase(f.time->elapsed)) + " later , ";
        if (f.time->season_pre == f.time->season_post) {
            s += "again in " + std::string(metadata::to_string(f.time->season_post)) + " .";
        } else {
            s += "in " + std::string(metadata::to_string(f.time->season_post)) + " after " +
                 std::string(metadata::to_string(f.time->season_pre)) + " .";
        }
        out.push_back(s);
    }
    if (f.light || f.shadow) {
        std::vector<std::string> parts;
        if (f.light) {
            const auto d0 = std::string(metadata::kCompassWords[static_cast<std::size_t>(f.light->dir_pre)]);
            const auto d1 = std::string(metadata::kCompassWords[static_cast<std::size_t>(f.light->dir_post)]);
            parts.push_back(d0 == d1 ? "sunlight comes from the " + d0 + " in both images" : "sunlight shifts from the " + d0 + " to the " + d1);
        }
        if (f.shadow) {
            switch (f.shadow->trend) {
            case ShadowTrend::longer: parts.emplace_back("shadows become longer"); break;
            case ShadowTrend::shorter: parts.emplace_back("shadows become shorter"); break;
            case ShadowTrend::same: parts.push_back("shadows stay " + std::string(metadata::to_string(f.shadow->same_class))); break;
            }
        }
        out.push_back(join(parts, " , and ") + " .");
    }
    if (f.cloud) {
        if (f.cloud->pre == f.cloud->post) {
            out.push_back("both images show " + std::string(metadata::cloud_phrase(f.cloud->pre)) + " .");
        } else {
            out.push_back("the view changes from " + std::string(metadata::cloud_phrase(f.cloud->pre)) + " to " +
                          std::string(metadata::cloud_phrase(f.cloud->post)) + " .");
        }
    }
    if (f.snow) {
        const char* where = f.snow->in_pre && f.snow->in_post ? "both images" : (f.snow->in_pre ? "the first image only" : "the second image only");
        out.push_back(std::string("snow covers the ground in ") + where + " .");
    }
    return out;
}

std::string render_caption(const CaptionFacts& facts) { return join(render_sentences(facts), " "); }

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::vector<std::string> cur;
    // Original casing is kept; sentences end at a standalone terminator token.
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        cur.push_back(word);
        if (word == "." || word == "?" || word == "!") {
            out.push_back(join(cur, " "));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(join(cur, " "));
    return out;
}

SentenceKind classify_sentence(std::string_view sentence) {
    const auto t = tokens_of(sentence);
    if (contains(t, {"has", "become"}) || contains(t, {"overall", "layout"})) return SentenceKind::change;
    if (contains(t, {"remains", "unchanged"})) return SentenceKind::unchanged;
    if (contains(t, {"second", "image", "was", "taken"})) return SentenceKind::time;
    if (contains(t, {"sunlight"}) || contains(t, {"shadows"}) || contains(t, {"skies"}) || contains(t, {"snow"}))
        return SentenceKind::environment;
    return SentenceKind::other;
}

CaptionFacts parse_caption(std::string_view text) {
    CaptionFacts f;
    for (const auto& sentence : split_sentences(text)) {
        const auto t = tokens_of(sentence);
        if (const auto at = find_seq(t, {"has", "become"}); at != std::string::npos) {
            const auto from = first_class(t, 0, at);
            const auto to = first_class(t, at + 2, t.size());
            if (!from || !to) continue;
            const bool seen = std::any_of(f.changes.begin(), f.changes.end(), [&](const ChangeFact& c) { return c.from == *from && c.to == *to; });
            if (!seen) f.changes.push_back({*from, *to, sectors_in(t, 0, at)});
            continue;
        }
        if (contains(t, {"overall", "layout", "remains", "unchanged"})) {
            f.layout_unchanged = true;
            continue;
        }
        if (const auto at = find_seq(t, {"remains", "unchanged"}); at != std::string::npos) {
            const auto cls = first_class(t, 0, at);
            if (!cls) continue;
            const bool seen = std::any_of(f.unchanged.begin(), f.unchanged.end(), [&](const UnchangedFact& u) { return u.cls == *cls; });
            if (!seen) f.unchanged.push_back({*cls, sectors_in(t, 0, at)});
            continue;
        }
        if (contains(t, {"second", "image", "was", "taken"})) {
            std::optional<Elapsed> elapsed;
            for (Elapsed e : {Elapsed::few_months, Elapsed::under_a_year, Elapsed::about_a_year, Elapsed::several_years}) {
                const auto words = tokens_of(elapsed_phrase(e));
                bool hit = false;
                for (std::size_t i = 0; i + words.size() <= t.size() && !hit; ++i)
                    hit = std::equal(words.begin(), words.end(), t.begin() + static_cast<std::ptrdiff_t>(i));
                if (hit) elapsed = e;
            }
            std::optional<Season> pre, post;
            if (const auto again = find_seq(t, {"again", "in"}); again != std::string::npos) {
                pre = post = season_at(t, again + 2);
            } else if (const auto after = find_seq(t, {"after"}); after != std::string::npos && after >= 1) {
                post = season_at(t, after - 1);
                pre = season_at(t, after + 1);
            }
            if (elapsed && pre && post) f.time = TimeFact{*pre, *post, *elapsed};
            continue;
        }
        bool env = false;
        if (const auto at = find_seq(t, {"sunlight", "comes", "from", "the"}); at != std::string::npos) {
            if (const auto d = compass_at(t, at + 4)) f.light = LightFact{*d, *d};
            env = true;
        } else if (const auto at2 = find_seq(t, {"sunlight", "shifts", "from", "the"}); at2 != std::string::npos) {
            const auto d0 = compass_at(t, at2 + 4);
            const auto d1 = (find_seq(t, {"to", "the"}, at2 + 5) == at2 + 5) ? compass_at(t, at2 + 7) : std::nullopt;
            if (d0 && d1) f.light = LightFact{*d0, *d1};
            env = true;
        }
        if (contains(t, {"shadows", "become", "longer"})) {
            f.shadow = ShadowFact{ShadowTrend::longer, ShadowClass::moderate};
            env = true;
        } else if (contains(t, {"shadows", "become", "shorter"})) {
            f.shadow = ShadowFact{ShadowTrend::shorter, ShadowClass::moderate};
            env = true;
        } else if (const auto at = find_seq(t, {"shadows", "stay"}); at != std::string::npos && at + 2 < t.size()) {
            for (ShadowClass s : {ShadowClass::long_shadows, ShadowClass::moderate, ShadowClass::minimal})
                if (t[at + 2] == metadata::to_string(s)) f.shadow = ShadowFact{ShadowTrend::same, s};
            env = true;
        }
        if (env) continue;
        if (contains(t, {"both", "images", "show"})) {
            const auto c = clouds_in(t);
            if (!c.empty()) f.cloud = CloudFact{c[0], c[0]};
            continue;
        }
        if (contains(t, {"view", "changes", "from"})) {
            const auto c = clouds_in(t);
            if (c.size() >= 2) f.cloud = CloudFact{c[0], c[1]};
            continue;
        }
        if (contains(t, {"snow", "covers", "the", "ground"})) {
            if (contains(t, {"both", "images"})) f.snow = SnowFact{true, true};
            else if (contains(t, {"first", "image", "only"})) f.snow = SnowFact{true, false};
            else if (contains(t, {"second", "image", "only"})) f.snow = SnowFact{false, true};
        }
    }
    return f;
}

std::string scene_clause(const std::vector<LandCover>& grid, int size) {
    require(static_cast<int>(grid.size()) == size * size, "scene_clause: grid size mismatch");
    std::map<LandCover, ClassStats> stats;
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            auto& st = stats[grid[static_cast<std::size_t>(r) * size + c]];
            ++st.area;
            ++st.sectors[static_cast<std::size_t>(sector_of(r, c, size))];
        }
    std::vector<std::string> parts;
    for (const auto& u : dominant_classes(stats)) parts.push_back(std::string(class_phrase(u.cls)) + " in the " + sector_list(u.sectors));
    return join(parts, " , ");
}

std::string describe_observation(const worldgen::SceneState& scene, const AcqMetadata& meta) {
    return "A satellite image showing " + scene_clause(scene.grid, scene.size) + " , " + metadata::describe_acquisition(meta).full_text;
}

std::string forecast_instruction(const worldgen::ChangeRecord& truth, const worldgen::SceneState& post, const AcqMetadata& meta_post) {
    std::vector<std::string> parts;
    for (const auto& c : change_facts(truth)) {
        parts.push_back(std::string(class_phrase(c.to)) + " in the " + sector_list(c.sectors) + " where there was " +
                        std::string(class_phrase(c.from)));
    }
    if (parts.empty()) parts.emplace_back("no visible change");
    return "A satellite image showing " + join(parts, " , ") + " , with " + scene_clause(post.grid, post.size) + " , " +
           metadata::describe_acquisition(meta_post).full_text;
}

} // namespace rswm::corpus
