#pragma once

// Decoupling a (trajectory, route) pair into movement, route and global modality inputs.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "doufu/core.hpp"

namespace doufu::features {

using Row = std::vector<double>;
using Rows = std::vector<Row>;

inline constexpr std::size_t quantity_count = 5;
inline constexpr std::size_t stat_count = 7;
inline constexpr std::size_t movement_dim = quantity_count * stat_count; // 35
inline constexpr double location_scale = 1e-4;

inline constexpr std::size_t route_dim(std::size_t zones, std::size_t classes) { return 16 + zones + classes; }
inline constexpr std::size_t global_dim(std::size_t zones) { return 50 + 3 * zones; }

struct FeatureConfig {
    std::size_t window = 8;
    std::size_t stride = 4;
    double buffer_m = 200.0;
    std::size_t zone_count = default_zone_count;
    std::size_t class_count = default_class_count;
};

/// Per-point kinematic quantities; trailing entries that lack successors are zero.
struct KinematicSeries {
    std::vector<double> speed;       ///< m/s
    std::vector<double> accel;       ///< m/s^2
    std::vector<double> speed_diff;  ///< m/s
    std::vector<double> accel_diff;  ///< m/s^2
    std::vector<double> angle_speed; ///< rad/s, magnitude of heading change rate

    std::size_t size() const { return speed.size(); }
    /// Quantities in fixed order: speed, accel, speed_diff, accel_diff, angle_speed.
    const std::vector<double>& quantity(std::size_t q) const {
        switch (q) {
        case 0: return speed;
        case 1: return accel;
        case 2: return speed_diff;
        case 3: return accel_diff;
        default: return angle_speed;
        }
    }
};

inline KinematicSeries kinematics(const Trajectory& traj) {
    const auto& p = traj.points;
    const std::size_t n = p.size();
    KinematicSeries k;
    k.speed.assign(n, 0.0);
    k.accel.assign(n, 0.0);
    k.speed_diff.assign(n, 0.0);
    k.accel_diff.assign(n, 0.0);
    k.angle_speed.assign(n, 0.0);
    std::vector<double> dt(n, 0.0), dist(n, 0.0), heading(n, 0.0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        dt[i] = static_cast<double>(p[i + 1].t - p[i].t);
        if (!(dt[i] > 0)) throw ValidationError("t", "non-increasing timestamp at point " + std::to_string(i + 1));
        dist[i] = geo::great_circle(p[i].pos(), p[i + 1].pos());
        heading[i] = geo::bearing(p[i].pos(), p[i + 1].pos());
        k.speed[i] = dist[i] / dt[i];
    }
    for (std::size_t i = 0; i + 2 < n; ++i) {
        k.speed_diff[i] = k.speed[i + 1] - k.speed[i];
        k.accel[i] = k.speed_diff[i] / dt[i];
        if (dist[i] > 1e-9 && dist[i + 1] > 1e-9)
            k.angle_speed[i] = std::abs(geo::angle_diff(heading[i], heading[i + 1])) / dt[i];
    }
    for (std::size_t i = 0; i + 3 < n; ++i) k.accel_diff[i] = k.accel[i + 1] - k.accel[i];
    return k;
}

/// Linear-interpolation quantile of already sorted values.
inline double quantile_sorted(const std::vector<double>& v, double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// [mean, min, max, std, q25, q50, q75] of the values (population std).
inline std::array<double, stat_count> window_stats(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    return {mean, v.front(), v.back(), std::sqrt(var), quantile_sorted(v, 0.25), quantile_sorted(v, 0.5), quantile_sorted(v, 0.75)};
}

inline std::size_t window_count(std::size_t n, std::size_t window, std::size_t stride) {
    return n < window ? 0 : (n - window) / stride + 1;
}

inline Rows movement_features(const KinematicSeries& series, std::size_t window, std::size_t stride) {
    if (window < 2) throw ValidationError("window", "must be >= 2");
    if (stride < 1) throw ValidationError("stride", "must be >= 1");
    const std::size_t n = series.size();
    if (n < window)
        throw ValidationError("series", "too short: " + std::to_string(n) + " points for window " + std::to_string(window));
    Rows out;
    for (std::size_t w = 0; w < window_count(n, window, stride); ++w) {
        Row row;
        row.reserve(movement_dim);
        const std::size_t start = w * stride;
        for (std::size_t q = 0; q < quantity_count; ++q) {
            const auto& src = series.quantity(q);
            auto st = window_stats({src.begin() + static_cast<std::ptrdiff_t>(start),
                                    src.begin() + static_cast<std::ptrdiff_t>(start + window)});
            row.insert(row.end(), st.begin(), st.end());
        }
        out.push_back(std::move(row));
    }
    return out;
}

namespace detail {

struct Box {
    double min_lat = std::numeric_limits<double>::infinity();
    double min_lng = std::numeric_limits<double>::infinity();
    double max_lat = -std::numeric_limits<double>::infinity();
    double max_lng = -std::numeric_limits<double>::infinity();
    void add(LatLng p) {
        min_lat = std::min(min_lat, p.lat);
        min_lng = std::min(min_lng, p.lng);
        max_lat = std::max(max_lat, p.lat);
        max_lng = std::max(max_lng, p.lng);
    }
    LatLng center() const { return {(min_lat + max_lat) / 2, (min_lng + max_lng) / 2}; }
    double width_m() const {
        const double lat = center().lat;
        return geo::great_circle({lat, min_lng}, {lat, max_lng});
    }
    double height_m() const { return geo::great_circle({min_lat, min_lng}, {max_lat, min_lng}); }
};

inline void push_location(Row& row, LatLng ref, LatLng p) {
    const auto o = geo::offset_m(ref, p);
    row.push_back(o.x * location_scale);
    row.push_back(o.y * location_scale);
}

} // namespace detail

/// Feature vector for one segment; locations are offsets from `ref`.
inline Row segment_features(const RoadSegment& s, LatLng ref, std::size_t class_count) {
    detail::Box box;
    for (auto p : s.polyline) box.add(p);
    Row row;
    row.reserve(route_dim(s.attrs.zone.proportions.size(), class_count));
    detail::push_location(row, ref, box.center());
    row.push_back(box.width_m());
    row.push_back(box.height_m());
    row.push_back(box.width_m() * box.height_m());
    row.push_back(geo::bearing(s.polyline.front(), s.polyline.back()));
    detail::push_location(row, ref, s.polyline.front());
    detail::push_location(row, ref, s.polyline.back());
    row.push_back(static_cast<double>(s.in_edges.size()));
    row.push_back(static_cast<double>(s.out_edges.size()));
    row.insert(row.end(), s.attrs.zone.proportions.begin(), s.attrs.zone.proportions.end());
    row.push_back(s.attrs.length_m);
    row.push_back(s.attrs.width_m);
    row.push_back(static_cast<double>(s.attrs.point_count));
    row.push_back(static_cast<double>(s.attrs.lane_count));
    for (std::size_t c = 0; c < class_count; ++c) row.push_back(static_cast<int>(c) == s.attrs.road_class ? 1.0 : 0.0);
    return row;
}

/// Offset of the one-hot road-class block inside a route feature row.
inline constexpr std::size_t route_class_offset(std::size_t zones) { return 16 + zones; }

inline Rows route_features(const Route& route, const RoadNetwork& net) {
    const auto ref = net.reference_origin();
    Rows out;
    for (const auto& id : route.segments) out.push_back(segment_features(net.at(id), ref, net.class_count()));
    return out;
}

/// Mean zone vector of segments within `radius_m` of p; nearest segment's zone if none.
inline std::vector<double> buffer_zone(LatLng p, const RoadNetwork& net, double radius_m) {
    std::vector<double> acc(net.zone_count(), 0.0);
    std::size_t hits = 0, nearest = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < net.size(); ++s) {
        const double d = ::doufu::detail::distance_to_polyline(p, net.segment(s).polyline);
        if (d < best) {
            best = d;
            nearest = s;
        }
        if (d <= radius_m) {
            const auto& z = net.segment(s).attrs.zone.proportions;
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += z[k];
            ++hits;
        }
    }
    if (hits == 0) return net.segment(nearest).attrs.zone.proportions;
    for (auto& v : acc) v /= static_cast<double>(hits);
    return acc;
}

/// Offsets of the blocks inside the global feature vector.
struct GlobalLayout {
    static constexpr std::size_t stats = 0;      // 10: (mean, std) x 5 quantities
    static constexpr std::size_t origin = 10;    // 2
    static constexpr std::size_t dest = 12;      // 2
    static constexpr std::size_t bbox = 14;      // 3: width, height, area
    static constexpr std::size_t direction = 17; // 1
    static constexpr std::size_t length = 18;    // 1
    static constexpr std::size_t departure = 19; // 24
    static constexpr std::size_t duration = 43;  // 1
    static constexpr std::size_t zones = 44;     // 3K: origin, destination, destination - origin
    static std::size_t route_means(std::size_t k) { return 44 + 3 * k; } // 6
};

inline Row global_features(const Trajectory& traj, const Route& route, const KinematicSeries& series,
                           const RoadNetwork& net, double buffer_m = 200.0) {
    const auto ref = net.reference_origin();
    const auto& pts = traj.points;
    Row row;
    row.reserve(global_dim(net.zone_count()));
    for (std::size_t q = 0; q < quantity_count; ++q) {
        const auto& v = series.quantity(q);
        double mean = 0.0, var = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        for (double x : v) var += (x - mean) * (x - mean);
        row.push_back(mean);
        row.push_back(std::sqrt(var / static_cast<double>(v.size())));
    }
    detail::push_location(row, ref, pts.front().pos());
    detail::push_location(row, ref, pts.back().pos());
    detail::Box box;
    double length = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        box.add(pts[i].pos());
        if (i > 0) length += geo::great_circle(pts[i - 1].pos(), pts[i].pos());
    }
    row.push_back(box.width_m());
    row.push_back(box.height_m());
    row.push_back(box.width_m() * box.height_m());
    row.push_back(geo::bearing(pts.front().pos(), pts.back().pos()));
    row.push_back(length);
    const auto hour = static_cast<std::size_t>(((pts.front().t % 86400) + 86400) % 86400 / 3600);
    for (std::size_t h = 0; h < 24; ++h) row.push_back(h == hour ? 1.0 : 0.0);
    row.push_back(static_cast<double>(pts.back().t - pts.front().t));
    const auto zo = buffer_zone(pts.front().pos(), net, buffer_m);
    const auto zd = buffer_zone(pts.back().pos(), net, buffer_m);
    row.insert(row.end(), zo.begin(), zo.end());
    row.insert(row.end(), zd.begin(), zd.end());
    for (std::size_t k = 0; k < zo.size(); ++k) row.push_back(zd[k] - zo[k]);
    std::array<double, 6> means{};
    for (const auto& id : route.segments) {
        const auto& s = net.at(id);
        means[0] += s.attrs.lane_count;
        means[1] += s.attrs.length_m;
        means[2] += s.attrs.width_m;
        means[3] += s.attrs.point_count;
        means[4] += static_cast<double>(s.in_edges.size());
        means[5] += static_cast<double>(s.out_edges.size());
    }
    for (auto m : means) row.push_back(route.segments.empty() ? 0.0 : m / static_cast<double>(route.segments.size()));
    return row;
}

/// Per-dimension z-score statistics; a zero spread maps to unit scale.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale;

    static Standardizer fit(const Rows& rows) {
        if (rows.empty()) throw ValidationError("rows", "cannot standardize an empty set");
        const std::size_t d = rows.front().size();
        Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
        for (const auto& r : rows)
            for (std::size_t j = 0; j < d; ++j) s.mean[j] += r[j];
        for (auto& m : s.mean) m /= static_cast<double>(rows.size());
        for (const auto& r : rows)
            for (std::size_t j = 0; j < d; ++j) s.scale[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
        for (auto& v : s.scale) {
            v = std::sqrt(v / static_cast<double>(rows.size()));
            if (v < 1e-12) v = 1.0;
        }
        return s;
    }

    Row apply(const Row& r) const {
        if (r.size() != mean.size()) throw ShapeError("standardizer dimension mismatch");
        Row out(r.size());
        for (std::size_t j = 0; j < r.size(); ++j) out[j] = (r[j] - mean[j]) / scale[j];
        return out;
    }
    Rows apply(const Rows& rows) const {
        Rows out;
        out.reserve(rows.size());
        for (const auto& r : rows) out.push_back(apply(r));
        return out;
    }
};

inline void write_standardizer(std::ostream& out, const std::string& name, const Standardizer& s) {
    out << name << " mean";
    for (double v : s.mean) out << ' ' << format_double(v);
    out << '\n' << name << " scale";
    for (double v : s.scale) out << ' ' << format_double(v);
    out << '\n';
}

// ---------------------------------------------------------------------------
// Feature cache: little-endian float32 records plus a text manifest.

struct TrajectoryFeatures {
    std::string traj_id;
    std::string user;
    Rows movement;
    Rows route;
    Row global;
};

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
    buf.append(reinterpret_cast<const char*>(&v), 4);
}
inline void put_f32(std::string& buf, double d) {
    auto v = std::bit_cast<std::uint32_t>(static_cast<float>(d));
    put_u32(buf, v);
}
inline std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
    if (pos + 4 > buf.size()) throw ParseError(0, "feature cache truncated");
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
    return v;
}
inline double get_f32(const std::string& buf, std::size_t& pos) { return std::bit_cast<float>(get_u32(buf, pos)); }

} // namespace detail

struct FeatureCache {
    std::size_t movement_dim = features::movement_dim;
    std::size_t route_dim = 0;
    std::size_t global_dim = 0;
    std::vector<TrajectoryFeatures> records;
};

/// Serialize to (manifest text, binary payload).
inline std::pair<std::string, std::string> encode_cache(const FeatureCache& cache) {
    std::string bin, manifest;
    manifest += "doufu-feature-cache 1\n";
    manifest += "dims D_m=" + std::to_string(cache.movement_dim) + " D_r=" + std::to_string(cache.route_dim) +
                " D_g=" + std::to_string(cache.global_dim) + "\n";
    manifest += "layout u32le n_windows, u32le n_segments, f32le[n_windows*D_m], f32le[n_segments*D_r], f32le[D_g]\n";
    manifest += "records " + std::to_string(cache.records.size()) + "\n";
    for (const auto& r : cache.records) {
        manifest += r.traj_id + "," + r.user + "," + std::to_string(bin.size()) + "," + std::to_string(r.movement.size()) +
                    "," + std::to_string(r.route.size()) + "\n";
        detail::put_u32(bin, static_cast<std::uint32_t>(r.movement.size()));
        detail::put_u32(bin, static_cast<std::uint32_t>(r.route.size()));
        for (const auto& row : r.movement) {
            if (row.size() != cache.movement_dim) throw ShapeError("movement row dimension mismatch");
            for (double v : row) detail::put_f32(bin, v);
        }
        for (const auto& row : r.route) {
            if (row.size() != cache.route_dim) throw ShapeError("route row dimension mismatch");
            for (double v : row) detail::put_f32(bin, v);
        }
        if (r.global.size() != cache.global_dim) throw ShapeError("global dimension mismatch");
        for (double v : r.global) detail::put_f32(bin, v);
    }
    return {manifest, bin};
}

inline FeatureCache decode_cache(const std::string& manifest, const std::string& bin) {
    FeatureCache cache;
    auto lines = split(manifest, '\n');
    if (lines.size() < 4 || lines[0] != "doufu-feature-cache 1") throw ParseError(1, "not a feature cache manifest");
    for (const auto& tok : split(lines[1], ' ')) {
        auto kv = split(tok, '=');
        if (kv.size() != 2) continue;
        long long v = 0;
        if (!parse_int(kv[1], v)) throw ParseError(2, "bad dimension " + tok);
        if (kv[0] == "D_m") cache.movement_dim = static_cast<std::size_t>(v);
        if (kv[0] == "D_r") cache.route_dim = static_cast<std::size_t>(v);
        if (kv[0] == "D_g") cache.global_dim = static_cast<std::size_t>(v);
    }
    std::size_t pos = 0;
    for (std::size_t li = 4; li < lines.size(); ++li) {
        if (trim(lines[li]).empty()) continue;
        auto f = split(lines[li], ',');
        if (f.size() != 5) throw ParseError(li + 1, "bad feature record");
        TrajectoryFeatures r{f[0], f[1], {}, {}, {}};
        const auto nw = detail::get_u32(bin, pos), ns = detail::get_u32(bin, pos);
        r.movement.assign(nw, Row(cache.movement_dim));
        r.route.assign(ns, Row(cache.route_dim));
        for (auto& row : r.movement)
            for (auto& v : row) v = detail::get_f32(bin, pos);
        for (auto& row : r.route)
            for (auto& v : row) v = detail::get_f32(bin, pos);
        r.global.resize(cache.global_dim);
        for (auto& v : r.global) v = detail::get_f32(bin, pos);
        cache.records.push_back(std::move(r));
    }
    return cache;
}

} // namespace doufu::features
