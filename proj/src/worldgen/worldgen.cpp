#include "rswm/worldgen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include "rswm/common/errors.hpp"
#include "rswm/common/rng.hpp"

namespace rswm::worldgen {

namespace {

constexpr std::array<std::string_view, kLandCoverCount> kNames = {
    "water", "forest", "field", "bare", "road", "building", "construction"};

// Parcel background classes; roads only appear as structures.
constexpr std::array<LandCover, 6> kParcelClasses = {
    LandCover::water, LandCover::forest, LandCover::field, LandCover::bare, LandCover::construction, LandCover::building};

std::array<double, 6> parcel_prior(double lat) {
    const double a = std::abs(lat);
    if (a < 15.0) return {0.10, 0.40, 0.25, 0.05, 0.08, 0.12};
    if (a < 35.0) return {0.08, 0.07, 0.20, 0.40, 0.10, 0.15};
    if (a < 55.0) return {0.10, 0.22, 0.35, 0.08, 0.10, 0.15};
    return {0.22, 0.45, 0.15, 0.10, 0.03, 0.05};
}

LandCover draw_parcel(Rng& rng, const std::array<double, 6>& prior) {
    double u = rng.uniform();
    for (std::size_t i = 0; i < prior.size(); ++i) {
        if (u < prior[i]) return kParcelClasses[i];
        u -= prior[i];
    }
    return kParcelClasses.back();
}

constexpr int kParcelBuildingHeight = 2;

void rasterize(SceneState& s) {
    s.grid.assign(static_cast<std::size_t>(s.size) * s.size, LandCover::bare);
    const int side = s.parcels_per_side();
    for (int r = 0; r < s.size; ++r) {
        for (int c = 0; c < s.size; ++c) {
            s.grid[static_cast<std::size_t>(r) * s.size + c] = s.parcels[(r / s.parcel_size) * side + c / s.parcel_size];
        }
    }
    for (const auto& st : s.structures) {
        for (int r = st.rect.row; r < st.rect.row + st.rect.height; ++r) {
            for (int c = st.rect.col; c < st.rect.col + st.rect.width; ++c) {
                s.grid[static_cast<std::size_t>(r) * s.size + c] = st.cls;
            }
        }
    }
}

Structure random_building(Rng& rng, int size, int h, int w, int row_lo, int row_hi, int col_lo, int col_hi) {
    Structure st;
    st.cls = LandCover::building;
    st.height_px = static_cast<int>(rng.uniform_int(2, 3));
    st.rect.height = h;
    st.rect.width = w;
    st.rect.row = static_cast<int>(rng.uniform_int(row_lo, std::max(row_lo, std::min(row_hi, size - h))));
    st.rect.col = static_cast<int>(rng.uniform_int(col_lo, std::max(col_lo, std::min(col_hi, size - w))));
    return st;
}

// Stable per-pixel hash in [-1, 1].
double hash_unit(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    const std::uint64_t h = split_seed(split_seed(a, b), c);
    return static_cast<double>(h >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

std::uint64_t double_bits(double v) {
    std::uint64_t bits = 0;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(v));
    return bits;
}

struct Rgb {
    double r, g, b;
};

constexpr std::array<Rgb, kLandCoverCount> kBaseColor = {{
    {0.10, 0.20, 0.45}, // water
    {0.10, 0.36, 0.13}, // forest
    {0.46, 0.56, 0.22}, // field
    {0.64, 0.56, 0.42}, // bare
    {0.33, 0.33, 0.35}, // road
    {0.78, 0.74, 0.72}, // building
    {0.72, 0.48, 0.28}, // construction
}};

bool is_vegetation(LandCover c) { return c == LandCover::forest || c == LandCover::field; }
bool takes_snow(LandCover c) {
    return c == LandCover::forest || c == LandCover::field || c == LandCover::bare || c == LandCover::construction;
}

} // namespace

std::string_view to_string(LandCover c) { return kNames[static_cast<int>(c)]; }

std::optional<LandCover> land_cover_from_string(std::string_view name) {
    for (int i = 0; i < kLandCoverCount; ++i) {
        if (kNames[i] == name) return static_cast<LandCover>(i);
    }
    return std::nullopt;
}

SceneState generate_scene(std::uint64_t seed, std::int64_t location_id, const WorldConfig& config) {
    require(config.scene_size > 0 && config.parcel_size > 0 && config.scene_size % config.parcel_size == 0,
            "scene size must be a positive multiple of the parcel size");
    Rng rng(split_seed(seed, static_cast<std::uint64_t>(location_id)));
    SceneState s;
    s.location_id = location_id;
    s.size = config.scene_size;
    s.parcel_size = config.parcel_size;
    s.lat = std::round(rng.uniform(-60.0, 70.0) * 1e4) / 1e4;
    s.lon = std::round(rng.uniform(-180.0, 180.0) * 1e4) / 1e4;
    s.epoch = static_cast<int>(rng.uniform_int(0, 23));

    const int side = s.parcels_per_side();
    const auto prior = parcel_prior(s.lat);
    s.parcels.resize(static_cast<std::size_t>(side) * side);
    for (auto& p : s.parcels) p = draw_parcel(rng, prior);

    if (rng.bernoulli(0.6)) {
        Structure road;
        road.cls = LandCover::road;
        road.height_px = 0;
        const int offset = static_cast<int>(rng.uniform_int(2, s.size - 4));
        if (rng.bernoulli(0.5)) {
            road.rect = {offset, 0, 2, s.size};
        } else {
            road.rect = {0, offset, s.size, 2};
        }
        s.structures.push_back(road);
    }
    const int buildings = static_cast<int>(rng.uniform_int(1, 3));
    for (int i = 0; i < buildings; ++i) {
        const int h = static_cast<int>(rng.uniform_int(2, 4));
        const int w = static_cast<int>(rng.uniform_int(2, 4));
        s.structures.push_back(random_building(rng, s.size, h, w, 1, s.size - 1, 1, s.size - 1));
    }
    rasterize(s);
    return s;
}

SceneState evolve_scene(const SceneState& scene, int months, std::uint64_t rng_seed, const WorldConfig& config) {
    require(months >= 0, "evolve_scene: months must be non-negative");
    SceneState s = scene;
    if (months == 0) return s;
    Rng rng(rng_seed);
    const auto& rates = config.rates;
    const int side = s.parcels_per_side();
    for (int m = 0; m < months; ++m) {
        for (std::size_t p = 0; p < s.parcels.size(); ++p) {
            const double u = rng.uniform();
            const double v = rng.uniform();
            LandCover& cls = s.parcels[p];
            switch (cls) {
            case LandCover::field:
                if (u < rates.field_to_construction) cls = LandCover::construction;
                else if (u < rates.field_to_construction + rates.field_to_forest) cls = LandCover::forest;
                break;
            case LandCover::bare:
                if (u < rates.bare_to_construction) cls = LandCover::construction;
                break;
            case LandCover::forest:
                if (u < rates.forest_to_field) cls = LandCover::field;
                break;
            case LandCover::construction:
                if (u < rates.construction_to_building) cls = LandCover::building;
                break;
            default:
                break;
            }
            if ((cls == LandCover::field || cls == LandCover::bare) && v < rates.new_building) {
                const int pr = static_cast<int>(p) / side * s.parcel_size;
                const int pc = static_cast<int>(p) % side * s.parcel_size;
                const int span = s.parcel_size - 3;
                s.structures.push_back(random_building(rng, s.size, 3, 3, pr, pr + span, pc, pc + span));
            }
        }
    }
    s.epoch += months;
    rasterize(s);
    return s;
}

AcqMetadata sample_acquisition(const SceneState& scene, std::uint64_t rng_seed) {
    Rng rng(rng_seed);
    AcqMetadata m;
    m.lat = scene.lat;
    m.lon = scene.lon;
    m.timestamp.year = epoch_year(scene.epoch);
    m.timestamp.month = epoch_month(scene.epoch);
    m.timestamp.day = static_cast<int>(rng.uniform_int(1, 28));
    m.timestamp.hour = static_cast<int>(rng.uniform_int(9, 14));

    // Seasonal mean elevation: noon elevation for a sun declination that peaks
    // in late June, minus an hour-angle penalty, plus noise.
    const double declination = 23.44 * std::sin(2.0 * std::numbers::pi * (m.timestamp.month - 3.7) / 12.0);
    const double noon = 90.0 - std::abs(scene.lat - declination);
    const double elevation = noon - 4.0 * std::abs(m.timestamp.hour - 12) + rng.normal(0.0, 3.0);
    m.sun_elevation = std::round(std::clamp(elevation, 0.0, 90.0) * 100.0) / 100.0;
    m.sun_azimuth = std::floor(rng.uniform(0.0, 360.0) * 100.0) / 100.0;
    m.off_nadir = std::round(std::min(std::abs(rng.normal(0.0, 10.0)), 45.0) * 100.0) / 100.0;
    const double base_gsd = std::array<double, 4>{0.3, 0.5, 1.0, 2.0}[split_seed(static_cast<std::uint64_t>(scene.location_id), 91) % 4];
    m.gsd = std::round(base_gsd / std::cos(m.off_nadir * std::numbers::pi / 180.0) * 1000.0) / 1000.0;

    // Mass near zero with a tail to full overcast.
    const double pick = rng.uniform();
    double cloud = 0.0;
    if (pick < 0.55) cloud = rng.uniform(0.0, 0.05);
    else if (pick < 0.9) cloud = rng.uniform(0.05, 0.6);
    else cloud = rng.uniform(0.6, 1.0);
    m.cloud_cover = std::round(cloud * 1000.0) / 1000.0;
    return m;
}

int shadow_length(int height_px, double sun_elevation) {
    constexpr int kMaxShadow = 8;
    if (height_px <= 0) return 0;
    if (sun_elevation <= 0.0) return kMaxShadow;
    const double t = std::tan(sun_elevation * std::numbers::pi / 180.0);
    const double len = static_cast<double>(height_px) / t;
    if (len >= kMaxShadow) return kMaxShadow;
    return static_cast<int>(std::floor(len + 0.5));
}

bool snow_expected(double lat, metadata::Season season) {
    return season == metadata::Season::winter && std::abs(lat) >= 40.0;
}

RenderLayers render_layers(const SceneState& scene, const AcqMetadata& meta) {
    validate(meta);
    const int n = scene.size;
    RenderLayers out;
    out.image = Image(n, n);
    out.shadow_mask.assign(static_cast<std::size_t>(n) * n, 0);
    out.cloud_mask.assign(static_cast<std::size_t>(n) * n, 0);

    const auto hemisphere = metadata::hemisphere_of(meta.lat);
    const auto season = metadata::season_of(meta.timestamp.month, hemisphere);
    const bool snow = snow_expected(meta.lat, season);

    // Per-pixel shadow-casting height.
    std::vector<int> height(static_cast<std::size_t>(n) * n, 0);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            if (scene.at(r, c) == LandCover::building) height[static_cast<std::size_t>(r) * n + c] = kParcelBuildingHeight;
        }
    }
    for (const auto& st : scene.structures) {
        if (st.cls != LandCover::building) continue;
        for (int r = st.rect.row; r < st.rect.row + st.rect.height; ++r) {
            for (int c = st.rect.col; c < st.rect.col + st.rect.width; ++c) {
                auto& h = height[static_cast<std::size_t>(r) * n + c];
                h = std::max(h, st.height_px);
            }
        }
    }

    // Shadows point away from the sun: sunlight from azimuth A (clockwise from
    // north) displaces shadows by (+cos A rows, -sin A cols), rows growing south.
    const double az = meta.sun_azimuth * std::numbers::pi / 180.0;
    const double dr = std::cos(az);
    const double dc = -std::sin(az);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const int h = height[static_cast<std::size_t>(r) * n + c];
            const int len = shadow_length(h, meta.sun_elevation);
            for (int t = 1; t <= len; ++t) {
                const int rr = r + static_cast<int>(std::lround(t * dr));
                const int cc = c + static_cast<int>(std::lround(t * dc));
                if (rr < 0 || rr >= n || cc < 0 || cc >= n) break;
                if (scene.at(rr, cc) == LandCover::building) continue;
                out.shadow_mask[static_cast<std::size_t>(rr) * n + cc] = 1;
            }
        }
    }

    // Cloud field: bilinear value noise on a coarse lattice, seeded by the acquisition.
    std::uint64_t cloud_seed = split_seed(static_cast<std::uint64_t>(scene.location_id), static_cast<std::uint64_t>(scene.epoch));
    for (double v : {meta.sun_azimuth, meta.sun_elevation, meta.cloud_cover, meta.off_nadir}) {
        cloud_seed = split_seed(cloud_seed, double_bits(v));
    }
    constexpr int kLattice = 5;
    std::array<double, kLattice * kLattice> lattice{};
    for (int i = 0; i < kLattice * kLattice; ++i) lattice[i] = hash_unit(cloud_seed, 1, static_cast<std::uint64_t>(i));
    std::vector<double> field(static_cast<std::size_t>(n) * n);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const double y = static_cast<double>(r) / n * (kLattice - 1);
            const double x = static_cast<double>(c) / n * (kLattice - 1);
            const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
            const double fy = y - y0, fx = x - x0;
            const auto L = [&](int yy, int xx) { return lattice[yy * kLattice + xx]; };
            const double top = L(y0, x0) * (1 - fx) + L(y0, x0 + 1) * fx;
            const double bottom = L(y0 + 1, x0) * (1 - fx) + L(y0 + 1, x0 + 1) * fx;
            field[static_cast<std::size_t>(r) * n + c] =
                top * (1 - fy) + bottom * fy + 0.15 * hash_unit(cloud_seed, 2, static_cast<std::uint64_t>(r * n + c));
        }
    }
    const auto total = static_cast<std::size_t>(n) * n;
    const auto cloudy = static_cast<std::size_t>(std::llround(meta.cloud_cover * static_cast<double>(total)));
    if (cloudy > 0) {
        std::vector<std::size_t> order(total);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return field[a] > field[b]; });
        for (std::size_t i = 0; i < cloudy; ++i) out.cloud_mask[order[i]] = 1;
    }

    const double haze = 0.2 * meta.off_nadir / 45.0;
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const auto idx = static_cast<std::size_t>(r) * n + c;
            const LandCover cls = scene.at(r, c);
            Rgb px = kBaseColor[static_cast<int>(cls)];
            const double tex = 0.035 * hash_unit(static_cast<std::uint64_t>(scene.location_id), 7, idx);
            px = {px.r + tex, px.g + tex, px.b + tex};
            if (is_vegetation(cls)) {
                switch (season) {
                case metadata::Season::summer: px.g += 0.06; break;
                case metadata::Season::autumn: px.r += 0.10; px.g -= 0.03; break;
                case metadata::Season::winter: px.r += 0.04; px.g -= 0.08; px.b -= 0.02; break;
                case metadata::Season::spring: px.g += 0.02; break;
                }
            }
            if (snow && takes_snow(cls)) {
                px = {0.45 * px.r + 0.55 * 0.92, 0.45 * px.g + 0.55 * 0.93, 0.45 * px.b + 0.55 * 0.95};
            }
            if (out.shadow_mask[idx]) px = {px.r * 0.45, px.g * 0.45, px.b * 0.45};
            px = {px.r * (1 - haze) + haze * 0.65, px.g * (1 - haze) + haze * 0.68, px.b * (1 - haze) + haze * 0.72};
            if (out.cloud_mask[idx]) {
                const double white = 0.90 + 0.05 * hash_unit(cloud_seed, 3, idx);
                constexpr double alpha = 0.85;
                px = {px.r * (1 - alpha) + alpha * white, px.g * (1 - alpha) + alpha * white, px.b * (1 - alpha) + alpha * white};
            }
            out.image.at(r, c, 0) = static_cast<float>(std::clamp(px.r, 0.0, 1.0));
            out.image.at(r, c, 1) = static_cast<float>(std::clamp(px.g, 0.0, 1.0));
            out.image.at(r, c, 2) = static_cast<float>(std::clamp(px.b, 0.0, 1.0));
        }
    }
    return out;
}

Image render_observation(const SceneState& scene, const AcqMetadata& meta) { return render_layers(scene, meta).image; }

namespace {

// Greedy maximal-rectangle partition of cells sharing the same key.
template <typename KeyFn, typename Emit>
void partition_rectangles(int n, const std::vector<bool>& eligible, KeyFn key, Emit emit) {
    std::vector<bool> taken(static_cast<std::size_t>(n) * n, false);
    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const auto idx = static_cast<std::size_t>(r) * n + c;
            if (taken[idx] || !eligible[idx]) continue;
            const auto k = key(idx);
            auto same = [&](int rr, int cc) {
                const auto j = static_cast<std::size_t>(rr) * n + cc;
                return !taken[j] && eligible[j] && key(j) == k;
            };
            int w = 1;
            while (c + w < n && same(r, c + w)) ++w;
            int h = 1;
            while (r + h < n) {
                bool full = true;
                for (int cc = c; cc < c + w && full; ++cc) full = same(r + h, cc);
                if (!full) break;
                ++h;
            }
            for (int rr = r; rr < r + h; ++rr) {
                for (int cc = c; cc < c + w; ++cc) taken[static_cast<std::size_t>(rr) * n + cc] = true;
            }
            emit(Rect{r, c, h, w}, idx);
        }
    }
}

} // namespace

ChangeRecord diff_scenes(const SceneState& pre, const SceneState& post) {
    require(pre.location_id == post.location_id, "diff_scenes: location_id mismatch");
    require(pre.size == post.size && pre.grid.size() == post.grid.size(), "diff_scenes: scene size mismatch");
    const int n = pre.size;
    ChangeRecord rec;
    rec.location_id = pre.location_id;
    rec.size = n;
    rec.epoch_pre = pre.epoch;
    rec.epoch_post = post.epoch;

    std::vector<bool> changed(pre.grid.size()), unchanged(pre.grid.size());
    for (std::size_t i = 0; i < pre.grid.size(); ++i) {
        changed[i] = pre.grid[i] != post.grid[i];
        unchanged[i] = !changed[i];
    }
    partition_rectangles(
        n, changed, [&](std::size_t i) { return static_cast<int>(pre.grid[i]) * 16 + static_cast<int>(post.grid[i]); },
        [&](Rect rect, std::size_t i) { rec.changed.push_back({rect, pre.grid[i], post.grid[i]}); });
    partition_rectangles(
        n, unchanged, [&](std::size_t i) { return static_cast<int>(pre.grid[i]); },
        [&](Rect rect, std::size_t i) { rec.unchanged.push_back({rect, pre.grid[i]}); });

    const auto hemisphere = metadata::hemisphere_of(pre.lat);
    const auto s_pre = metadata::season_of(epoch_month(pre.epoch), hemisphere);
    const auto s_post = metadata::season_of(epoch_month(post.epoch), hemisphere);
    const bool snow_pre = snow_expected(pre.lat, s_pre);
    const bool snow_post = snow_expected(pre.lat, s_post);
    if (snow_pre || snow_post) {
        rec.seasonal.push_back({SeasonalEffect::Kind::snow, snow_pre, snow_post, s_pre, s_post});
    }
    if (s_pre != s_post) {
        rec.seasonal.push_back({SeasonalEffect::Kind::vegetation_tint, true, true, s_pre, s_post});
    }
    return rec;
}

ChangeRecord diff_scenes(const SceneState& pre, const SceneState& post, const AcqMetadata& meta_pre,
                         const AcqMetadata& meta_post) {
    ChangeRecord rec = diff_scenes(pre, post);
    AcquisitionDeltas d;
    double daz = meta_post.sun_azimuth - meta_pre.sun_azimuth;
    while (daz > 180.0) daz -= 360.0;
    while (daz <= -180.0) daz += 360.0;
    d.sun_azimuth = daz;
    d.sun_elevation = meta_post.sun_elevation - meta_pre.sun_elevation;
    d.cloud_cover = meta_post.cloud_cover - meta_pre.cloud_cover;
    d.off_nadir = meta_post.off_nadir - meta_pre.off_nadir;
    rec.acquisition_deltas = d;
    return rec;
}

std::vector<LandCover> apply_changes(const SceneState& pre, const ChangeRecord& change) {
    require(change.location_id == pre.location_id && change.size == pre.size, "apply_changes: record does not match scene");
    auto grid = pre.grid;
    for (const auto& c : change.changed) {
        require(c.region.inside(pre.size), "apply_changes: region outside grid");
        for (int r = c.region.row; r < c.region.row + c.region.height; ++r) {
            for (int col = c.region.col; col < c.region.col + c.region.width; ++col) {
                auto& cell = grid[static_cast<std::size_t>(r) * pre.size + col];
                require(cell == c.from, "apply_changes: from-class does not match scene");
                cell = c.to;
            }
        }
    }
    return grid;
}

} // namespace rswm::worldgen
