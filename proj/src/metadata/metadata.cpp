#include "rswm/metadata.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "rswm/common/errors.hpp"

namespace rswm::metadata {

std::string_view to_string(Hemisphere h) { return h == Hemisphere::northern ? "Northern" : "Southern"; }

std::string_view to_string(Season s) {
    switch (s) {
    case Season::spring: return "spring";
    case Season::summer: return "summer";
    case Season::autumn: return "autumn";
    case Season::winter: return "winter";
    }
    return "";
}

std::string_view to_string(ShadowClass s) {
    switch (s) {
    case ShadowClass::long_shadows: return "long";
    case ShadowClass::moderate: return "moderate";
    case ShadowClass::minimal: return "minimal";
    }
    return "";
}

std::string_view shadow_phrase(ShadowClass s) {
    switch (s) {
    case ShadowClass::long_shadows: return "long shadows";
    case ShadowClass::moderate: return "moderate shadows";
    case ShadowClass::minimal: return "minimal shadows";
    }
    return "";
}

std::string_view cloud_phrase(CloudClass c) {
    switch (c) {
    case CloudClass::clear: return "clear skies";
    case CloudClass::partly_cloudy: return "partly cloudy skies";
    case CloudClass::mostly_cloudy: return "mostly cloudy skies";
    }
    return "";
}

Hemisphere hemisphere_of(double lat) {
    require(std::isfinite(lat) && lat >= -90.0 && lat <= 90.0, "latitude outside [-90, 90]");
    return lat >= 0.0 ? Hemisphere::northern : Hemisphere::southern;
}

Season season_of(int month, Hemisphere hemisphere) {
    require(month >= 1 && month <= 12, "month outside 1..12");
    // Northern: Mar-May spring, Jun-Aug summer, Sep-Nov autumn, Dec-Feb winter.
    static constexpr std::array<Season, 12> kNorth = {
        Season::winter, Season::winter, Season::spring, Season::spring, Season::spring, Season::summer,
        Season::summer, Season::summer, Season::autumn, Season::autumn, Season::autumn, Season::winter};
    // Southern: Sep-Nov spring, Dec-Feb summer, Mar-May autumn, Jun-Aug winter.
    static constexpr std::array<Season, 12> kSouth = {
        Season::summer, Season::summer, Season::autumn, Season::autumn, Season::autumn, Season::winter,
        Season::winter, Season::winter, Season::spring, Season::spring, Season::spring, Season::summer};
    return hemisphere == Hemisphere::northern ? kNorth[month - 1] : kSouth[month - 1];
}

int azimuth_sector_index(double degrees) {
    require(std::isfinite(degrees) && degrees >= 0.0 && degrees < 360.0, "azimuth outside [0, 360)");
    return static_cast<int>(std::floor((degrees + 22.5) / 45.0)) % 8;
}

std::string_view azimuth_sector(double degrees) { return kCompassWords[azimuth_sector_index(degrees)]; }

ShadowClass shadow_class(double elevation_degrees) {
    require(std::isfinite(elevation_degrees) && elevation_degrees >= 0.0 && elevation_degrees <= 90.0,
            "sun elevation outside [0, 90]");
    if (elevation_degrees < 25.0) return ShadowClass::long_shadows;
    if (elevation_degrees < 65.0) return ShadowClass::moderate;
    return ShadowClass::minimal;
}

CloudClass cloud_class(double cloud_cover) {
    require(std::isfinite(cloud_cover) && cloud_cover >= 0.0 && cloud_cover <= 1.0, "cloud cover outside [0, 1]");
    if (cloud_cover < 0.1) return CloudClass::clear;
    if (cloud_cover < 0.5) return CloudClass::partly_cloudy;
    return CloudClass::mostly_cloudy;
}

MetaDescription describe_acquisition(const AcqMetadata& meta) {
    validate(meta);
    MetaDescription d;
    d.hemisphere = hemisphere_of(meta.lat);
    d.season = season_of(meta.timestamp.month, d.hemisphere);
    d.sun_direction = std::string(azimuth_sector(meta.sun_azimuth));
    d.shadow = shadow_class(meta.sun_elevation);
    d.cloud_phrase = std::string(cloud_phrase(cloud_class(meta.cloud_cover)));
    d.full_text = "acquired in the " + std::string(to_string(d.hemisphere)) + " hemisphere during " +
                  std::string(to_string(d.season)) + " , with sunlight from the " + d.sun_direction +
                  " casting " + std::string(shadow_phrase(d.shadow)) + " under " + d.cloud_phrase + " .";
    return d;
}

bool is_numeral_free(std::string_view text) {
    return std::none_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<int, kFamilyCount> kSizes = {180, 360, 20, 64, 12, 24, 8, 19, 10, 21};
constexpr std::array<std::string_view, kFamilyCount> kNames = {
    "lat", "lon", "gsd", "year", "month", "hour", "azimuth", "elevation", "off_nadir", "cloud"};
constexpr double kGsdBase = 0.1;
constexpr int kYearBase = 2000;

int clamp_bucket(double raw, int size) {
    return std::clamp(static_cast<int>(std::floor(raw)), 0, size - 1);
}

int index_of(MetaFamily f) { return static_cast<int>(f); }

} // namespace

int family_size(MetaFamily family) { return kSizes[index_of(family)]; }

int family_offset(MetaFamily family) {
    int offset = 0;
    for (int i = 0; i < index_of(family); ++i) offset += kSizes[i];
    return offset;
}

int total_metadata_tokens() {
    int total = 0;
    for (int s : kSizes) total += s;
    return total;
}

std::vector<MetaToken> metadata_tokens(const AcqMetadata& meta) {
    validate(meta);
    // Tiny offsets keep exact multiples (0.15 cloud, 25 degrees) in their upper bucket.
    constexpr double eps = 1e-9;
    std::vector<MetaToken> out;
    out.reserve(kTokensPerAcquisition);
    out.push_back({MetaFamily::lat, clamp_bucket(meta.lat + 90.0 + eps, 180)});
    out.push_back({MetaFamily::lon, clamp_bucket(meta.lon + 180.0 + eps, 360)});
    out.push_back({MetaFamily::gsd, clamp_bucket(2.0 * std::log2(meta.gsd / kGsdBase) + eps, 20)});
    out.push_back({MetaFamily::year, std::clamp(meta.timestamp.year - kYearBase, 0, 63)});
    out.push_back({MetaFamily::month, meta.timestamp.month - 1});
    out.push_back({MetaFamily::hour, meta.timestamp.hour});
    out.push_back({MetaFamily::azimuth, azimuth_sector_index(meta.sun_azimuth)});
    out.push_back({MetaFamily::elevation, clamp_bucket(meta.sun_elevation / 5.0 + eps, 19)});
    out.push_back({MetaFamily::off_nadir, clamp_bucket(meta.off_nadir / 5.0 + eps, 10)});
    out.push_back({MetaFamily::cloud, clamp_bucket(meta.cloud_cover * 20.0 + eps, 21)});
    return out;
}

int flat_id(const MetaToken& token) {
    require(token.bucket >= 0 && token.bucket < family_size(token.family), "metadata bucket out of range");
    return family_offset(token.family) + token.bucket;
}

std::vector<int> metadata_token_ids(const AcqMetadata& meta) {
    std::vector<int> ids;
    for (const auto& t : metadata_tokens(meta)) ids.push_back(flat_id(t));
    return ids;
}

BucketBounds bucket_bounds(MetaFamily family, int bucket) {
    require(bucket >= 0 && bucket < family_size(family), "metadata bucket out of range");
    const double b = bucket;
    switch (family) {
    case MetaFamily::lat: return {b - 90.0, b - 89.0};
    case MetaFamily::lon: return {b - 180.0, b - 179.0};
    case MetaFamily::gsd: return {kGsdBase * std::exp2(b / 2.0), kGsdBase * std::exp2((b + 1.0) / 2.0)};
    case MetaFamily::year: return {kYearBase + b, kYearBase + b + 1.0};
    case MetaFamily::month: return {b + 1.0, b + 2.0};
    case MetaFamily::hour: return {b, b + 1.0};
    case MetaFamily::azimuth: return {b * 45.0 - 22.5, b * 45.0 + 22.5};
    case MetaFamily::elevation: return {b * 5.0, b * 5.0 + 5.0};
    case MetaFamily::off_nadir: return {b * 5.0, b * 5.0 + 5.0};
    case MetaFamily::cloud: return {b * 0.05, b * 0.05 + 0.05};
    }
    return {0.0, 0.0};
}

AcqMetadata decode_tokens(const std::vector<MetaToken>& tokens) {
    require(tokens.size() == kTokensPerAcquisition, "expected one token per metadata family");
    AcqMetadata m;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        require(index_of(tokens[i].family) == static_cast<int>(i), "metadata tokens out of family order");
        const auto [lo, hi] = bucket_bounds(tokens[i].family, tokens[i].bucket);
        const double mid = 0.5 * (lo + hi);
        switch (tokens[i].family) {
        case MetaFamily::lat: m.lat = std::min(mid, 90.0); break;
        case MetaFamily::lon: m.lon = std::min(mid, 180.0); break;
        case MetaFamily::gsd: m.gsd = std::sqrt(lo * hi); break;
        case MetaFamily::year: m.timestamp.year = static_cast<int>(lo); break;
        case MetaFamily::month: m.timestamp.month = static_cast<int>(lo); break;
        case MetaFamily::hour: m.timestamp.hour = static_cast<int>(lo); break;
        case MetaFamily::azimuth: m.sun_azimuth = tokens[i].bucket * 45.0; break;
        case MetaFamily::elevation: m.sun_elevation = std::min(mid, 90.0); break;
        case MetaFamily::off_nadir: m.off_nadir = std::min(mid, 45.0); break;
        case MetaFamily::cloud: m.cloud_cover = std::min(mid, 1.0); break;
        }
    }
    return m;
}

nlohmann::json layout_json() {
    nlohmann::json families = nlohmann::json::array();
    for (int i = 0; i < kFamilyCount; ++i) {
        families.push_back({{"name", kNames[i]}, {"size", kSizes[i]}, {"offset", family_offset(static_cast<MetaFamily>(i))}});
    }
    return {{"version", kLayoutVersion}, {"families", families}, {"total", total_metadata_tokens()}};
}

} // namespace rswm::metadata
