#pragma once

#include <string>

namespace rswm {

struct Timestamp {
    int year = 2010;
    int month = 1; // 1..12
    int day = 1;   // 1..31
    int hour = 12; // 0..23, local solar time

    bool operator==(const Timestamp&) const = default;
};

/// Acquisition metadata attached to one observation.
///
/// Ranges: lat [-90, 90], lon [-180, 180], gsd > 0 (m/px), sun_azimuth [0, 360),
/// sun_elevation [0, 90], off_nadir [0, 45], cloud_cover [0, 1].
struct AcqMetadata {
    double lat = 0.0;
    double lon = 0.0;
    double gsd = 1.0;
    Timestamp timestamp;
    double sun_azimuth = 0.0;
    double sun_elevation = 45.0;
    double off_nadir = 0.0;
    double cloud_cover = 0.0;

    bool operator==(const AcqMetadata&) const = default;
};

/// Throws InvalidInput naming the first field outside its range.
void validate(const AcqMetadata& meta);
bool is_valid(const AcqMetadata& meta) noexcept;

} // namespace rswm
