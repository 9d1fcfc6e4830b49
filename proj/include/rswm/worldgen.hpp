#pragma once

// Procedural synthetic Earth: multi-temporal scenes with exact ground truth.

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rswm/acquisition.hpp"
#include "rswm/common/image.hpp"
#include "rswm/metadata.hpp"

namespace rswm::worldgen {

enum class LandCover : std::uint8_t { water = 0, forest, field, bare, road, building, construction };
inline constexpr int kLandCoverCount = 7;

std::string_view to_string(LandCover c);
std::optional<LandCover> land_cover_from_string(std::string_view name);

struct Rect {
    int row = 0;
    int col = 0;
    int height = 0;
    int width = 0;

    int area() const { return height * width; }
    bool inside(int size) const { return row >= 0 && col >= 0 && height > 0 && width > 0 && row + height <= size && col + width <= size; }
    bool operator==(const Rect&) const = default;
};

struct Structure {
    Rect rect;
    LandCover cls = LandCover::building;
    int height_px = 2; // shadow-casting height; 0 for flat structures (roads)

    bool operator==(const Structure&) const = default;
};

/// Land-cover state of one location at one epoch.
///
/// The background is a coarse parcel layout; structures are painted on top.
/// `grid` is always the rasterization of parcels + structures.
struct SceneState {
    std::int64_t location_id = 0;
    double lat = 0.0;
    double lon = 0.0;
    int size = 32;
    int parcel_size = 8;
    std::vector<LandCover> parcels; // (size / parcel_size)^2, row-major
    std::vector<Structure> structures;
    std::vector<LandCover> grid; // size * size, row-major
    int epoch = 0;               // months since January 2010

    LandCover at(int row, int col) const { return grid[static_cast<std::size_t>(row) * size + col]; }
    int parcels_per_side() const { return size / parcel_size; }
    bool operator==(const SceneState&) const = default;
};

inline constexpr int kOriginYear = 2010;
inline int epoch_year(int epoch) { return kOriginYear + epoch / 12; }
inline int epoch_month(int epoch) { return epoch % 12 + 1; }

/// Monthly transition hazards applied by evolve_scene.
struct TransitionRates {
    double field_to_construction = 0.012;
    double field_to_forest = 0.004;
    double bare_to_construction = 0.012;
    double forest_to_field = 0.003;
    double construction_to_building = 0.06;
    double new_building = 0.004; // per field/bare parcel per month
};

struct WorldConfig {
    int scene_size = 32;
    int parcel_size = 8;
    TransitionRates rates;
};

SceneState generate_scene(std::uint64_t seed, std::int64_t location_id, const WorldConfig& config = {});

/// Advances `scene` by `months`, applying stochastic transitions month by month.
SceneState evolve_scene(const SceneState& scene, int months, std::uint64_t rng_seed, const WorldConfig& config = {});

AcqMetadata sample_acquisition(const SceneState& scene, std::uint64_t rng_seed);

/// Image together with the per-pixel masks that produced it.
struct RenderLayers {
    Image image;
    std::vector<std::uint8_t> shadow_mask;
    std::vector<std::uint8_t> cloud_mask;
};

RenderLayers render_layers(const SceneState& scene, const AcqMetadata& meta);
Image render_observation(const SceneState& scene, const AcqMetadata& meta);

/// Shadow length in pixels for a structure of `height_px` under `sun_elevation`.
int shadow_length(int height_px, double sun_elevation);

struct ChangedRegion {
    Rect region;
    LandCover from = LandCover::field;
    LandCover to = LandCover::field;
    bool operator==(const ChangedRegion&) const = default;
};

struct UnchangedRegion {
    Rect region;
    LandCover cls = LandCover::field;
    bool operator==(const UnchangedRegion&) const = default;
};

struct SeasonalEffect {
    enum class Kind { snow, vegetation_tint };
    Kind kind = Kind::vegetation_tint;
    bool in_pre = false;
    bool in_post = false;
    metadata::Season season_pre = metadata::Season::spring;
    metadata::Season season_post = metadata::Season::spring;
    bool operator==(const SeasonalEffect&) const = default;
};

/// Post minus pre for the fields that drive appearance.
struct AcquisitionDeltas {
    double sun_azimuth = 0.0; // signed, wrapped to (-180, 180]
    double sun_elevation = 0.0;
    double cloud_cover = 0.0;
    double off_nadir = 0.0;
    bool operator==(const AcquisitionDeltas&) const = default;
};

struct ChangeRecord {
    std::int64_t location_id = 0;
    int size = 0;
    int epoch_pre = 0;
    int epoch_post = 0;
    std::vector<ChangedRegion> changed;
    std::vector<UnchangedRegion> unchanged;
    std::vector<SeasonalEffect> seasonal;
    std::optional<AcquisitionDeltas> acquisition_deltas;
    bool operator==(const ChangeRecord&) const = default;
};

/// Exact region-wise diff. Changed and unchanged rectangles partition the grid.
ChangeRecord diff_scenes(const SceneState& pre, const SceneState& post);
ChangeRecord diff_scenes(const SceneState& pre, const SceneState& post, const AcqMetadata& meta_pre, const AcqMetadata& meta_post);

/// Paints every changed region of `change` onto `pre`'s class map.
std::vector<LandCover> apply_changes(const SceneState& pre, const ChangeRecord& change);

/// True when snow is rendered for a scene at `lat` acquired in `season`.
bool snow_expected(double lat, metadata::Season season);

nlohmann::json to_json(const SceneState& scene);
SceneState scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ChangeRecord& change);
ChangeRecord change_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AcqMetadata& meta);
AcqMetadata meta_from_json(const nlohmann::json& j);

} // namespace rswm::worldgen
