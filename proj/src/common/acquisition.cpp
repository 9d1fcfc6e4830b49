#include "rswm/acquisition.hpp"

#include <cmath>

#include "rswm/common/errors.hpp"

namespace rswm {

namespace {
const char* first_violation(const AcqMetadata& m) noexcept {
    auto in = [](double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; };
    if (!in(m.lat, -90.0, 90.0)) return "lat outside [-90, 90]";
    if (!in(m.lon, -180.0, 180.0)) return "lon outside [-180, 180]";
    if (!std::isfinite(m.gsd) || m.gsd <= 0.0) return "gsd must be positive";
    if (!std::isfinite(m.sun_azimuth) || m.sun_azimuth < 0.0 || m.sun_azimuth >= 360.0) return "sun_azimuth outside [0, 360)";
    if (!in(m.sun_elevation, 0.0, 90.0)) return "sun_elevation outside [0, 90]";
    if (!in(m.off_nadir, 0.0, 45.0)) return "off_nadir outside [0, 45]";
    if (!in(m.cloud_cover, 0.0, 1.0)) return "cloud_cover outside [0, 1]";
    const auto& t = m.timestamp;
    if (t.month < 1 || t.month > 12) return "month outside 1..12";
    if (t.day < 1 || t.day > 31) return "day outside 1..31";
    if (t.hour < 0 || t.hour > 23) return "hour outside 0..23";
    return nullptr;
}
} // namespace

void validate(const AcqMetadata& meta) {
    if (const char* why = first_violation(meta)) throw InvalidInput(std::string("invalid acquisition metadata: ") + why);
}

bool is_valid(const AcqMetadata& meta) noexcept { return first_violation(meta) == nullptr; }

} // namespace rswm
