#pragma once

// Metadata translation: numeric acquisition metadata to natural-language cues
// and to dedicated prompt tokens.

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "rswm/acquisition.hpp"

namespace rswm::metadata {

enum class Hemisphere { northern, southern };
enum class Season { spring, summer, autumn, winter };
enum class ShadowClass { long_shadows, moderate, minimal };
enum class CloudClass { clear, partly_cloudy, mostly_cloudy };

std::string_view to_string(Hemisphere h);   // "Northern" / "Southern"
std::string_view to_string(Season s);       // "spring" ...
std::string_view to_string(ShadowClass s);  // "long" / "moderate" / "minimal"
std::string_view shadow_phrase(ShadowClass s); // "long shadows" ...
std::string_view cloud_phrase(CloudClass c);   // "clear skies" ...

/// lat >= 0 is Northern (the equator is assigned to the north).
Hemisphere hemisphere_of(double lat);

/// Meteorological seasons, mirrored between hemispheres.
Season season_of(int month, Hemisphere hemisphere);

/// The eight compass anchors 0, 45, ..., 315 in clockwise order.
inline constexpr std::array<std::string_view, 8> kCompassWords = {
    "north", "northeast", "east", "southeast", "south", "southwest", "west", "northwest"};

/// Sector = floor((deg + 22.5) / 45) mod 8; each sector is half-open clockwise.
int azimuth_sector_index(double degrees);
std::string_view azimuth_sector(double degrees);

/// long below 25 degrees, moderate in [25, 65), minimal at 65 and above.
ShadowClass shadow_class(double elevation_degrees);

/// clear below 0.1, partly cloudy in [0.1, 0.5), mostly cloudy at 0.5 and above.
CloudClass cloud_class(double cloud_cover);

struct MetaDescription {
    Hemisphere hemisphere = Hemisphere::northern;
    Season season = Season::spring;
    std::string sun_direction;
    ShadowClass shadow = ShadowClass::moderate;
    std::string cloud_phrase;
    std::string full_text;
};

MetaDescription describe_acquisition(const AcqMetadata& meta);

/// True when `text` has no ASCII digit at all.
bool is_numeral_free(std::string_view text);

// ---------------------------------------------------------------------------
// Dedicated metadata tokens.
//
// Each acquisition record is serialized as exactly kTokensPerAcquisition
// tokens, one per family, in the order of MetaFamily below:
//
//   lat        180 buckets, 1 degree wide, [-90, 90] (90 joins the top bucket)
//   lon        360 buckets, 1 degree wide, [-180, 180]
//   gsd         20 buckets, half-octave log2 steps from 0.1 m (clamped)
//   year        64 buckets, 2000..2063 (clamped)
//   month       12 buckets
//   hour        24 buckets
//   azimuth      8 compass sectors (same rule as azimuth_sector_index)
//   elevation   19 buckets, 5 degrees wide (90 joins the top bucket)
//   off_nadir   10 buckets, 5 degrees wide (45 joins the top bucket)
//   cloud       21 buckets, 5 % wide (1.0 gets its own bucket)
// ---------------------------------------------------------------------------

enum class MetaFamily { lat, lon, gsd, year, month, hour, azimuth, elevation, off_nadir, cloud };

inline constexpr int kFamilyCount = 10;
inline constexpr int kTokensPerAcquisition = kFamilyCount;
inline constexpr std::string_view kLayoutVersion = "meta-buckets-v1";

struct MetaToken {
    MetaFamily family;
    int bucket;
    bool operator==(const MetaToken&) const = default;
};

int family_size(MetaFamily family);
/// Offset of a family inside the contiguous metadata id range.
int family_offset(MetaFamily family);
int total_metadata_tokens();

std::vector<MetaToken> metadata_tokens(const AcqMetadata& meta);

/// Flattened ids in [0, total_metadata_tokens()).
std::vector<int> metadata_token_ids(const AcqMetadata& meta);
int flat_id(const MetaToken& token);

struct BucketBounds {
    double lo;
    double hi; // exclusive except for the closing bucket of a closed range
};

BucketBounds bucket_bounds(MetaFamily family, int bucket);

/// A representative AcqMetadata whose fields lie inside the given buckets.
AcqMetadata decode_tokens(const std::vector<MetaToken>& tokens);

/// Layout description stored in checkpoint headers.
nlohmann::json layout_json();

} // namespace rswm::metadata
