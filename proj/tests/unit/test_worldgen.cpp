#include <doctest.h>

#include <nlohmann/json.hpp>

#include "rswm/common/errors.hpp"
#include "rswm/worldgen.hpp"

using namespace rswm;
using namespace rswm::worldgen;

namespace {

// Each pixel covered exactly once by changed ∪ unchanged.
bool is_partition(const ChangeRecord& rec) {
    std::vector<int> cover(static_cast<std::size_t>(rec.size) * rec.size, 0);
    auto paint = [&](const Rect& r) {
        for (int y = r.row; y < r.row + r.height; ++y)
            for (int x = r.col; x < r.col + r.width; ++x) ++cover[static_cast<std::size_t>(y) * rec.size + x];
    };
    for (const auto& c : rec.changed) paint(c.region);
    for (const auto& u : rec.unchanged) paint(u.region);
    return std::all_of(cover.begin(), cover.end(), [](int v) { return v == 1; });
}

int count(const std::vector<std::uint8_t>& mask) { return static_cast<int>(std::count(mask.begin(), mask.end(), 1)); }

AcqMetadata clear_meta(const SceneState& s, double elevation, double azimuth) {
    AcqMetadata m = sample_acquisition(s, 3);
    m.cloud_cover = 0.0;
    m.sun_elevation = elevation;
    m.sun_azimuth = azimuth;
    return m;
}

} // namespace

TEST_CASE("generate_scene is deterministic and well-formed") {
    const auto a = generate_scene(7, 0);
    const auto b = generate_scene(7, 0);
    CHECK(a == b);
    CHECK(a.grid == b.grid);
    const auto c = generate_scene(7, 1);
    CHECK(a.grid != c.grid);

    for (std::int64_t loc = 0; loc < 200; ++loc) {
        const auto s = generate_scene(21, loc);
        REQUIRE(s.grid.size() == 32u * 32u);
        REQUIRE_FALSE(s.structures.empty());
        for (const auto& st : s.structures) REQUIRE(st.rect.inside(s.size));
        for (auto cls : s.grid) REQUIRE(static_cast<int>(cls) < kLandCoverCount);
        REQUIRE((s.lat >= -90.0 && s.lat <= 90.0));
        REQUIRE((s.lon >= -180.0 && s.lon <= 180.0));
    }
}

TEST_CASE("land-cover prior depends on latitude") {
    // Arid belt is dominated by bare ground, boreal belt by forest.
    int bare_arid = 0, bare_boreal = 0, forest_arid = 0, forest_boreal = 0, arid = 0, boreal = 0;
    for (std::int64_t loc = 0; loc < 3000; ++loc) {
        const auto s = generate_scene(3, loc);
        const double a = std::abs(s.lat);
        for (auto p : s.parcels) {
            if (a >= 15 && a < 35) {
                ++arid;
                bare_arid += p == LandCover::bare;
                forest_arid += p == LandCover::forest;
            } else if (a >= 55) {
                ++boreal;
                bare_boreal += p == LandCover::bare;
                forest_boreal += p == LandCover::forest;
            }
        }
    }
    CHECK(static_cast<double>(bare_arid) / arid > static_cast<double>(bare_boreal) / boreal);
    CHECK(static_cast<double>(forest_boreal) / boreal > static_cast<double>(forest_arid) / arid);
}

TEST_CASE("evolve_scene contract") {
    const auto s = generate_scene(7, 0);
    CHECK(evolve_scene(s, 0, 99) == s);
    CHECK_THROWS_AS(evolve_scene(s, -1, 99), InvalidInput);
    const auto post = evolve_scene(s, 36, 4);
    CHECK(post.lat == s.lat);
    CHECK(post.lon == s.lon);
    CHECK(post.location_id == s.location_id);
    CHECK(post.epoch == s.epoch + 36);
    CHECK(evolve_scene(s, 36, 4) == post);
}

TEST_CASE("36 months of evolution change the scene with probability >= 0.9") {
    int changed = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto pre = generate_scene(seed, static_cast<std::int64_t>(seed));
        const auto post = evolve_scene(pre, 36, seed + 1000);
        changed += diff_scenes(pre, post).changed.empty() ? 0 : 1;
    }
    MESSAGE("scenes changed after 36 months: " << changed << "/100");
    CHECK(changed >= 90);
}

TEST_CASE("sample_acquisition ranges, determinism, seasonality") {
    for (std::int64_t loc = 0; loc < 300; ++loc) {
        const auto s = generate_scene(1, loc);
        const auto m = sample_acquisition(s, static_cast<std::uint64_t>(loc) * 7);
        REQUIRE(is_valid(m));
        REQUIRE(m == sample_acquisition(s, static_cast<std::uint64_t>(loc) * 7));
    }
    auto s = generate_scene(7, 0);
    s.lat = 45.0;
    double july = 0.0, january = 0.0;
    for (std::uint64_t i = 0; i < 1000; ++i) {
        s.epoch = 6; // July 2010
        july += sample_acquisition(s, i).sun_elevation;
        s.epoch = 12; // January 2011
        january += sample_acquisition(s, i + 50000).sun_elevation;
    }
    CHECK(july / 1000 > january / 1000);

    // The deliberately retained partly-cloudy regime is represented.
    int partly = 0, heavy = 0;
    for (std::uint64_t i = 0; i < 2000; ++i) {
        const double c = sample_acquisition(s, i + 9000).cloud_cover;
        partly += (c > 0.1 && c < 0.9) ? 1 : 0;
        heavy += c > 0.9 ? 1 : 0;
    }
    CHECK(partly > 200);
    CHECK(heavy > 0);
}

TEST_CASE("render_observation: clouds") {
    const auto s = generate_scene(7, 0);
    auto m = sample_acquisition(s, 5);
    m.cloud_cover = 0.0;
    auto layers = render_layers(s, m);
    CHECK(count(layers.cloud_mask) == 0);
    m.cloud_cover = 0.5;
    layers = render_layers(s, m);
    const double frac = count(layers.cloud_mask) / 1024.0;
    CHECK(frac >= 0.45);
    CHECK(frac <= 0.55);
    for (float v : layers.image.pixels) REQUIRE((v >= 0.0f && v <= 1.0f));
    CHECK(render_observation(s, m) == layers.image);
}

TEST_CASE("render_observation: shadows lengthen as the sun drops") {
    const auto s = generate_scene(7, 0);
    const int low = count(render_layers(s, clear_meta(s, 10, 135)).shadow_mask);
    const int high = count(render_layers(s, clear_meta(s, 70, 135)).shadow_mask);
    CHECK(low > high);

    for (std::int64_t loc = 0; loc < 40; ++loc) {
        const auto scene = generate_scene(2, loc);
        for (double az : {0.0, 90.0, 200.0, 315.0}) {
            int previous = 1 << 30;
            for (double elev : {5.0, 25.0, 45.0, 65.0, 85.0}) {
                const int n = count(render_layers(scene, clear_meta(scene, elev, az)).shadow_mask);
                REQUIRE(n <= previous);
                previous = n;
            }
        }
    }
}

TEST_CASE("shadows fall opposite the sun") {
    SceneState s = generate_scene(7, 0);
    std::fill(s.parcels.begin(), s.parcels.end(), LandCover::field);
    s.structures = {Structure{{14, 14, 3, 3}, LandCover::building, 3}};
    s.grid.assign(1024, LandCover::field);
    for (int r = 14; r < 17; ++r)
        for (int c = 14; c < 17; ++c) s.grid[r * 32 + c] = LandCover::building;
    // Sun in the east: shadow pixels sit west of the building.
    const auto layers = render_layers(s, clear_meta(s, 20, 90));
    int west = 0, east = 0;
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c) {
            if (!layers.shadow_mask[r * 32 + c]) continue;
            (c < 14 ? west : east) += 1;
        }
    CHECK(west > 0);
    CHECK(east == 0);
}

TEST_CASE("diff_scenes is an exact partitioning oracle") {
    const auto s = generate_scene(7, 0);
    const auto same = diff_scenes(s, s);
    CHECK(same.changed.empty());
    CHECK(is_partition(same));

    SceneState pre = s;
    std::fill(pre.parcels.begin(), pre.parcels.end(), LandCover::field);
    pre.structures.clear();
    pre.grid.assign(1024, LandCover::field);
    SceneState post = pre;
    for (int r = 0; r < 8; ++r)
        for (int c = 24; c < 32; ++c) post.grid[r * 32 + c] = LandCover::building;
    const auto fixture = diff_scenes(pre, post);
    REQUIRE(fixture.changed.size() == 1);
    CHECK(fixture.changed[0].from == LandCover::field);
    CHECK(fixture.changed[0].to == LandCover::building);
    CHECK(fixture.changed[0].region == Rect{0, 24, 8, 8});

    SceneState other = s;
    other.location_id += 1;
    CHECK_THROWS_AS(diff_scenes(s, other), InvalidInput);

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto a = generate_scene(seed, static_cast<std::int64_t>(seed));
        const auto b = evolve_scene(a, 48, seed);
        const auto rec = diff_scenes(a, b);
        REQUIRE(is_partition(rec));
        REQUIRE(apply_changes(a, rec) == b.grid);
        int area = 0;
        for (const auto& c : rec.changed) area += c.region.area();
        for (const auto& u : rec.unchanged) area += u.region.area();
        REQUIRE(area == 1024);
    }
}

TEST_CASE("acquisition deltas and seasonal effects") {
    auto pre = generate_scene(7, 0);
    pre.lat = 50.0;
    pre.epoch = 0; // January: winter, snow at this latitude
    auto post = evolve_scene(pre, 6, 1);
    auto m0 = sample_acquisition(pre, 1);
    auto m1 = sample_acquisition(post, 2);
    m0.sun_azimuth = 350;
    m1.sun_azimuth = 10;
    const auto rec = diff_scenes(pre, post, m0, m1);
    REQUIRE(rec.acquisition_deltas.has_value());
    CHECK(rec.acquisition_deltas->sun_azimuth == doctest::Approx(20.0));
    CHECK(rec.acquisition_deltas->sun_elevation == doctest::Approx(m1.sun_elevation - m0.sun_elevation));
    bool snow = false, tint = false;
    for (const auto& e : rec.seasonal) {
        snow |= e.kind == SeasonalEffect::Kind::snow && e.in_pre && !e.in_post;
        tint |= e.kind == SeasonalEffect::Kind::vegetation_tint;
    }
    CHECK(snow);
    CHECK(tint);
}

TEST_CASE("scene and change records serialize to JSON") {
    const auto a = generate_scene(7, 3);
    const auto b = evolve_scene(a, 30, 8);
    CHECK(scene_from_json(nlohmann::json::parse(to_json(a).dump())) == a);
    const auto rec = diff_scenes(a, b, sample_acquisition(a, 1), sample_acquisition(b, 2));
    CHECK(change_from_json(nlohmann::json::parse(to_json(rec).dump())) == rec);
}
