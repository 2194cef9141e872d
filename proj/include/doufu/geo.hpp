#pragma once

#include <cmath>
#include <numbers>

namespace doufu::geo {

inline constexpr double earth_radius_m = 6371000.0;

struct LatLng {
    double lat = 0.0;
    double lng = 0.0;
    friend bool operator==(const LatLng&, const LatLng&) = default;
};

struct Xy {
    double x = 0.0; ///< east, meters
    double y = 0.0; ///< north, meters
};

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Haversine great-circle distance in meters.
inline double great_circle(LatLng a, LatLng b) {
    const double p1 = deg2rad(a.lat), p2 = deg2rad(b.lat);
    const double dp = p2 - p1, dl = deg2rad(b.lng - a.lng);
    const double h = std::sin(dp / 2) * std::sin(dp / 2) + std::cos(p1) * std::cos(p2) * std::sin(dl / 2) * std::sin(dl / 2);
    return 2.0 * earth_radius_m * std::asin(std::sqrt(std::fmin(1.0, h)));
}

/// Initial bearing from a to b in radians, north = 0, clockwise, in [0, 2pi).
inline double bearing(LatLng a, LatLng b) {
    const double p1 = deg2rad(a.lat), p2 = deg2rad(b.lat), dl = deg2rad(b.lng - a.lng);
    const double y = std::sin(dl) * std::cos(p2);
    const double x = std::cos(p1) * std::sin(p2) - std::sin(p1) * std::cos(p2) * std::cos(dl);
    double th = std::atan2(y, x);
    if (th < 0) th += 2.0 * std::numbers::pi;
    return th;
}

/// Smallest signed difference b - a wrapped into (-pi, pi].
inline double angle_diff(double a, double b) {
    double d = std::remainder(b - a, 2.0 * std::numbers::pi);
    if (d <= -std::numbers::pi) d += 2.0 * std::numbers::pi;
    return d;
}

/// Equirectangular projection around `ref`; adequate at city scale.
inline Xy to_local(LatLng ref, LatLng p) {
    const double k = deg2rad(1.0) * earth_radius_m;
    return {(p.lng - ref.lng) * k * std::cos(deg2rad(ref.lat)), (p.lat - ref.lat) * k};
}

inline LatLng from_local(LatLng ref, Xy v) {
    const double k = deg2rad(1.0) * earth_radius_m;
    return {ref.lat + v.y / k, ref.lng + v.x / (k * std::cos(deg2rad(ref.lat)))};
}

/// Signed great-circle offsets (east, north) of p from ref, in meters.
inline Xy offset_m(LatLng ref, LatLng p) {
    const double east = great_circle({ref.lat, ref.lng}, {ref.lat, p.lng});
    const double north = great_circle({ref.lat, ref.lng}, {p.lat, ref.lng});
    return {p.lng >= ref.lng ? east : -east, p.lat >= ref.lat ? north : -north};
}

/// Distance from point p to segment [a, b] in a planar frame.
inline double point_segment_distance(Xy p, Xy a, Xy b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
    t = std::fmax(0.0, std::fmin(1.0, t));
    const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
    return std::sqrt(ex * ex + ey * ey);
}

} // namespace doufu::geo
