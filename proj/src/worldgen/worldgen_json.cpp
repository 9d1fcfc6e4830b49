#include <nlohmann/json.hpp>

#include "rswm/common/errors.hpp"
#include "rswm/worldgen.hpp"

namespace rswm::worldgen {

using nlohmann::json;

namespace {

json rect_json(const Rect& r) { return json::array({r.row, r.col, r.height, r.width}); }
Rect rect_from(const json& j) { return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()}; }

LandCover cls_from(const json& j) {
    const auto name = j.get<std::string>();
    const auto cls = land_cover_from_string(name);
    if (!cls) throw InvalidInput("unknown land-cover class '" + name + "'");
    return *cls;
}

std::string grid_string(const std::vector<LandCover>& grid) {
    std::string s;
    s.reserve(grid.size());
    for (auto c : grid) s.push_back(static_cast<char>('0' + static_cast<int>(c)));
    return s;
}

std::vector<LandCover> grid_from(const std::string& s) {
    std::vector<LandCover> grid;
    grid.reserve(s.size());
    for (char ch : s) {
        const int v = ch - '0';
        require(v >= 0 && v < kLandCoverCount, "grid string holds an invalid class digit");
        grid.push_back(static_cast<LandCover>(v));
    }
    return grid;
}

metadata::Season season_from(const json& j) {
    const auto s = j.get<std::string>();
    for (auto season : {metadata::Season::spring, metadata::Season::summer, metadata::Season::autumn, metadata::Season::winter}) {
        if (metadata::to_string(season) == s) return season;
    }
    throw InvalidInput("unknown season '" + s + "'");
}

} // namespace

json to_json(const SceneState& s) {
    json structures = json::array();
    for (const auto& st : s.structures) {
        structures.push_back({{"rect", rect_json(st.rect)}, {"class", to_string(st.cls)}, {"height_px", st.height_px}});
    }
    return {{"location_id", s.location_id}, {"lat", s.lat}, {"lon", s.lon}, {"size", s.size},
            {"parcel_size", s.parcel_size}, {"parcels", grid_string(s.parcels)}, {"structures", structures},
            {"grid", grid_string(s.grid)}, {"epoch", s.epoch}};
}

SceneState scene_from_json(const json& j) {
    SceneState s;
    s.location_id = j.at("location_id").get<std::int64_t>();
    s.lat = j.at("lat").get<double>();
    s.lon = j.at("lon").get<double>();
    s.size = j.at("size").get<int>();
    s.parcel_size = j.at("parcel_size").get<int>();
    s.parcels = grid_from(j.at("parcels").get<std::string>());
    for (const auto& st : j.at("structures")) {
        s.structures.push_back({rect_from(st.at("rect")), cls_from(st.at("class")), st.at("height_px").get<int>()});
    }
    s.grid = grid_from(j.at("grid").get<std::string>());
    s.epoch = j.at("epoch").get<int>();
    return s;
}

json to_json(const AcqMetadata& m) {
    return {{"lat", m.lat},
            {"lon", m.lon},
            {"gsd", m.gsd},
            {"timestamp", {m.timestamp.year, m.timestamp.month, m.timestamp.day, m.timestamp.hour}},
            {"sun_azimuth", m.sun_azimuth},
            {"sun_elevation", m.sun_elevation},
            {"off_nadir", m.off_nadir},
            {"cloud_cover", m.cloud_cover}};
}

AcqMetadata meta_from_json(const json& j) {
    AcqMetadata m;
    m.lat = j.at("lat").get<double>();
    m.lon = j.at("lon").get<double>();
    m.gsd = j.at("gsd").get<double>();
    const auto& t = j.at("timestamp");
    m.timestamp = {t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>(), t.at(3).get<int>()};
    m.sun_azimuth = j.at("sun_azimuth").get<double>();
    m.sun_elevation = j.at("sun_elevation").get<double>();
    m.off_nadir = j.at("off_nadir").get<double>();
    m.cloud_cover = j.at("cloud_cover").get<double>();
    validate(m);
    return m;
}

json to_json(const ChangeRecord& c) {
    json changed = json::array(), unchanged = json::array(), seasonal = json::array();
    for (const auto& x : c.changed) changed.push_back({{"rect", rect_json(x.region)}, {"from", to_string(x.from)}, {"to", to_string(x.to)}});
    for (const auto& x : c.unchanged) unchanged.push_back({{"rect", rect_json(x.region)}, {"class", to_string(x.cls)}});
    for (const auto& x : c.seasonal) {
        seasonal.push_back({{"kind", x.kind == SeasonalEffect::Kind::snow ? "snow" : "vegetation_tint"},
                            {"in_pre", x.in_pre},
                            {"in_post", x.in_post},
                            {"season_pre", metadata::to_string(x.season_pre)},
                            {"season_post", metadata::to_string(x.season_post)}});
    }
    json j = {{"location_id", c.location_id}, {"size", c.size}, {"epoch_pre", c.epoch_pre}, {"epoch_post", c.epoch_post},
              {"changed", changed}, {"unchanged", unchanged}, {"seasonal", seasonal}};
    if (c.acquisition_deltas) {
        const auto& d = *c.acquisition_deltas;
        j["acquisition_deltas"] = {{"sun_azimuth", d.sun_azimuth}, {"sun_elevation", d.sun_elevation},
                                   {"cloud_cover", d.cloud_cover}, {"off_nadir", d.off_nadir}};
    }
    return j;
}

ChangeRecord change_from_json(const json& j) {
    ChangeRecord c;
    c.location_id = j.at("location_id").get<std::int64_t>();
    c.size = j.at("size").get<int>();
    c.epoch_pre = j.at("epoch_pre").get<int>();
    c.epoch_post = j.at("epoch_post").get<int>();
    for (const auto& x : j.at("changed")) c.changed.push_back({rect_from(x.at("rect")), cls_from(x.at("from")), cls_from(x.at("to"))});
    for (const auto& x : j.at("unchanged")) c.unchanged.push_back({rect_from(x.at("rect")), cls_from(x.at("class"))});
    for (const auto& x : j.at("seasonal")) {
        SeasonalEffect e;
        e.kind = x.at("kind").get<std::string>() == "snow" ? SeasonalEffect::Kind::snow : SeasonalEffect::Kind::vegetation_tint;
        e.in_pre = x.at("in_pre").get<bool>();
        e.in_post = x.at("in_post").get<bool>();
        e.season_pre = season_from(x.at("season_pre"));
        e.season_post = season_from(x.at("season_post"));
        c.seasonal.push_back(e);
    }
    if (j.contains("acquisition_deltas")) {
        const auto& d = j.at("acquisition_deltas");
        c.acquisition_deltas = AcquisitionDeltas{d.at("sun_azimuth").get<double>(), d.at("sun_elevation").get<double>(),
                                                 d.at("cloud_cover").get<double>(), d.at("off_nadir").get<double>()};
    }
    return c;
}

} // namespace rswm::worldgen
