#pragma once

// Trajectories, road segments, routes and functional zones; parsing,
// validation and trajectory-to-route snapping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "doufu/error.hpp"
#include "doufu/geo.hpp"
#include "doufu/util.hpp"

namespace doufu {

using geo::LatLng;

struct GpsPoint {
    double lat = 0.0;
    double lng = 0.0;
    std::int64_t t = 0; ///< seconds since epoch
    LatLng pos() const { return {lat, lng}; }
    friend bool operator==(const GpsPoint&, const GpsPoint&) = default;
};

struct Trajectory {
    std::string id;
    std::string user;
    std::vector<GpsPoint> points;
    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct TrajectorySet {
    std::string user;
    std::vector<Trajectory> trajectories;
    friend bool operator==(const TrajectorySet&, const TrajectorySet&) = default;
};

/// Land-use proportions around a location; sums to 1.
struct FunctionalZoneVector {
    std::vector<double> proportions;
    friend bool operator==(const FunctionalZoneVector&, const FunctionalZoneVector&) = default;
};

struct SegmentAttrs {
    double length_m = 0.0;
    double width_m = 0.0;
    int lane_count = 1;
    int point_count = 2;
    int road_class = 0;
    FunctionalZoneVector zone;
    friend bool operator==(const SegmentAttrs&, const SegmentAttrs&) = default;
};

struct RoadSegment {
    std::string id;
    std::string from_node;
    std::string to_node;
    std::vector<LatLng> polyline;
    std::vector<std::string> in_edges;  ///< sorted segment ids
    std::vector<std::string> out_edges; ///< sorted segment ids
    SegmentAttrs attrs;
    friend bool operator==(const RoadSegment&, const RoadSegment&) = default;
};

struct Route {
    std::vector<std::string> segments;
    friend bool operator==(const Route&, const Route&) = default;
};

inline constexpr std::size_t default_zone_count = 5;  // K
inline constexpr std::size_t default_class_count = 5; // C

/// Directed road network: segments keyed by id plus intersection coordinates.
class RoadNetwork {
public:
    RoadNetwork() = default;

    explicit RoadNetwork(std::vector<RoadSegment> segments, std::size_t class_count = default_class_count)
        : segments_(std::move(segments)), class_count_(class_count) {
        for (std::size_t i = 0; i < segments_.size(); ++i) {
            auto& s = segments_[i];
            if (!index_.emplace(s.id, i).second) throw ValidationError("seg_id", "duplicate segment id " + s.id);
            std::sort(s.in_edges.begin(), s.in_edges.end());
            std::sort(s.out_edges.begin(), s.out_edges.end());
        }
        zone_count_ = segments_.empty() ? default_zone_count : segments_.front().attrs.zone.proportions.size();
        for (const auto& s : segments_) validate_segment(s);
        successors_.resize(segments_.size());
        for (std::size_t i = 0; i < segments_.size(); ++i) {
            const auto& s = segments_[i];
            for (const auto& e : s.in_edges)
                if (!index_.count(e)) throw ValidationError("in_edges", "segment " + s.id + " references unknown " + e);
            for (const auto& e : s.out_edges) {
                auto it = index_.find(e);
                if (it == index_.end()) throw ValidationError("out_edges", "segment " + s.id + " references unknown " + e);
                successors_[i].push_back(it->second);
            }
            intersections_.emplace(s.from_node, s.polyline.front());
            intersections_.emplace(s.to_node, s.polyline.back());
        }
    }

    bool empty() const { return segments_.empty(); }
    std::size_t size() const { return segments_.size(); }
    std::size_t class_count() const { return class_count_; }
    std::size_t zone_count() const { return zone_count_; }
    const std::vector<RoadSegment>& segments() const { return segments_; }
    const RoadSegment& segment(std::size_t i) const { return segments_.at(i); }
    const std::map<std::string, LatLng>& intersections() const { return intersections_; }
    const std::vector<std::size_t>& successors(std::size_t i) const { return successors_.at(i); }

    std::size_t index_of(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw LookupError("unknown road segment " + id);
        return it->second;
    }
    bool contains(const std::string& id) const { return index_.count(id) > 0; }
    const RoadSegment& at(const std::string& id) const { return segments_[index_of(id)]; }

    /// South-west corner of all intersections; reference origin for location features.
    LatLng reference_origin() const {
        LatLng o{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
        for (const auto& [_, p] : intersections_) {
            o.lat = std::min(o.lat, p.lat);
            o.lng = std::min(o.lng, p.lng);
        }
        return intersections_.empty() ? LatLng{} : o;
    }

    bool connected(std::size_t from, std::size_t to) const {
        const auto& s = successors_[from];
        return std::find(s.begin(), s.end(), to) != s.end();
    }

private:
    void validate_segment(const RoadSegment& s) const {
        if (s.polyline.size() < 2) throw ValidationError("polyline", "segment " + s.id + " has fewer than 2 points");
        if (!(s.attrs.length_m > 0)) throw ValidationError("length_m", "segment " + s.id + " has non-positive length");
        if (s.attrs.road_class < 0 || static_cast<std::size_t>(s.attrs.road_class) >= class_count_)
            throw ValidationError("road_class", "segment " + s.id + " class out of range");
        const auto& z = s.attrs.zone.proportions;
        if (z.size() != zone_count_) throw ValidationError("zone", "segment " + s.id + " zone vector length mismatch");
        double sum = 0.0;
        for (double f : z) {
            if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("zone", "segment " + s.id + " proportion outside [0,1]");
            sum += f;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("zone", "segment " + s.id + " proportions do not sum to 1");
    }

    std::vector<RoadSegment> segments_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::vector<std::size_t>> successors_;
    std::map<std::string, LatLng> intersections_;
    std::size_t class_count_ = default_class_count;
    std::size_t zone_count_ = default_zone_count;
};

/// Every violated trajectory invariant; empty means valid.
inline std::vector<std::string> validate_trajectory(const Trajectory& traj) {
    std::vector<std::string> errors;
    if (traj.points.size() < 2) errors.push_back("too short: " + std::to_string(traj.points.size()) + " point(s)");
    for (std::size_t i = 0; i < traj.points.size(); ++i) {
        const auto& p = traj.points[i];
        if (!(p.lat >= -90.0 && p.lat <= 90.0)) errors.push_back("lat out of range at point " + std::to_string(i));
        if (!(p.lng >= -180.0 && p.lng <= 180.0)) errors.push_back("lng out of range at point " + std::to_string(i));
        if (p.t < 0) errors.push_back("negative timestamp at point " + std::to_string(i));
        if (i > 0) {
            const auto prev = traj.points[i - 1].t;
            if (p.t == prev) errors.push_back("duplicate timestamp at point " + std::to_string(i));
            else if (p.t < prev) errors.push_back("non-monotone timestamp at point " + std::to_string(i));
        }
    }
    return errors;
}

inline bool is_connected(const Route& route, const RoadNetwork& net) {
    for (std::size_t i = 1; i < route.segments.size(); ++i)
        if (!net.connected(net.index_of(route.segments[i - 1]), net.index_of(route.segments[i]))) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Trajectory file: `traj_id,user_id,t,lat,lng` with a header row.

inline constexpr std::string_view trajectory_header = "traj_id,user_id,t,lat,lng";

inline std::vector<TrajectorySet> parse_trajectories(std::istream& in) {
    std::vector<TrajectorySet> sets;
    std::unordered_map<std::string, std::size_t> user_index;
    std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> traj_index;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        auto view = trim(line);
        if (view.empty()) continue;
        if (!header_seen) {
            if (view != trajectory_header) throw ParseError(lineno, "expected header '" + std::string(trajectory_header) + "'");
            header_seen = true;
            continue;
        }
        auto f = split(view, ',');
        if (f.size() != 5) throw ParseError(lineno, "expected 5 fields, got " + std::to_string(f.size()));
        long long t = 0;
        double lat = 0, lng = 0;
        if (f[0].empty()) throw ParseError(lineno, "empty traj_id");
        if (f[1].empty()) throw ParseError(lineno, "empty user_id");
        if (!parse_int(f[2], t)) throw ParseError(lineno, "bad t '" + f[2] + "'");
        if (!parse_double(f[3], lat)) throw ParseError(lineno, "bad lat '" + f[3] + "'");
        if (!parse_double(f[4], lng)) throw ParseError(lineno, "bad lng '" + f[4] + "'");
        if (!(lat >= -90.0 && lat <= 90.0)) throw ValidationError("lat", "line " + std::to_string(lineno) + " out of range");
        if (!(lng >= -180.0 && lng <= 180.0)) throw ValidationError("lng", "line " + std::to_string(lineno) + " out of range");
        if (t < 0) throw ValidationError("t", "line " + std::to_string(lineno) + " negative");

        auto [uit, new_user] = user_index.emplace(f[1], sets.size());
        if (new_user) sets.push_back({f[1], {}});
        auto tit = traj_index.find(f[0]);
        if (tit == traj_index.end()) {
            auto& set = sets[uit->second];
            tit = traj_index.emplace(f[0], std::make_pair(uit->second, set.trajectories.size())).first;
            set.trajectories.push_back({f[0], f[1], {}});
        } else if (tit->second.first != uit->second) {
            throw ParseError(lineno, "trajectory " + f[0] + " appears under two users");
        }
        sets[tit->second.first].trajectories[tit->second.second].points.push_back({lat, lng, static_cast<std::int64_t>(t)});
    }
    for (auto& set : sets)
        for (auto& traj : set.trajectories) {
            std::stable_sort(traj.points.begin(), traj.points.end(),
                             [](const GpsPoint& a, const GpsPoint& b) { return a.t < b.t; });
            auto errors = validate_trajectory(traj);
            if (!errors.empty()) throw ValidationError("trajectory " + traj.id, errors.front());
        }
    return sets;
}

inline void write_trajectories(std::ostream& out, const std::vector<TrajectorySet>& sets) {
    out << trajectory_header << '\n';
    for (const auto& set : sets)
        for (const auto& traj : set.trajectories)
            for (const auto& p : traj.points)
                out << traj.id << ',' << traj.user << ',' << p.t << ',' << format_double(p.lat) << ','
                    << format_double(p.lng) << '\n';
}

// ---------------------------------------------------------------------------
// Road network file: one segment per line.

inline constexpr std::string_view network_header =
    "seg_id,from_node,to_node,polyline,in_edges,out_edges,length_m,width_m,lane_count,point_count,road_class,zone";

inline void write_network(std::ostream& out, const RoadNetwork& net) {
    out << network_header << '\n';
    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + v[i];
        return s;
    };
    for (const auto& s : net.segments()) {
        out << s.id << ',' << s.from_node << ',' << s.to_node << ',';
        for (std::size_t i = 0; i < s.polyline.size(); ++i)
            out << (i ? ";" : "") << format_double(s.polyline[i].lat) << ':' << format_double(s.polyline[i].lng);
        out << ',' << join(s.in_edges) << ',' << join(s.out_edges) << ',' << format_double(s.attrs.length_m) << ','
            << format_double(s.attrs.width_m) << ',' << s.attrs.lane_count << ',' << s.attrs.point_count << ','
            << s.attrs.road_class << ',';
        const auto& z = s.attrs.zone.proportions;
        for (std::size_t i = 0; i < z.size(); ++i) out << (i ? ":" : "") << format_double(z[i]);
        out << '\n';
    }
}

inline RoadNetwork parse_network(std::istream& in, std::size_t class_count = default_class_count) {
    std::vector<RoadSegment> segs;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    auto ids = [](const std::string& s) {
        std::vector<std::string> v;
        if (!s.empty()) v = split(s, ';');
        return v;
    };
    while (std::getline(in, line)) {
        ++lineno;
        auto view = trim(line);
        if (view.empty()) continue;
        if (!header_seen) {
            if (view != network_header) throw ParseError(lineno, "expected road network header");
            header_seen = true;
            continue;
        }
        auto f = split(view, ',');
        if (f.size() != 12) throw ParseError(lineno, "expected 12 fields, got " + std::to_string(f.size()));
        RoadSegment s;
        s.id = f[0];
        s.from_node = f[1];
        s.to_node = f[2];
        for (const auto& pair : split(f[3], ';')) {
            auto ll = split(pair, ':');
            LatLng p;
            if (ll.size() != 2 || !parse_double(ll[0], p.lat) || !parse_double(ll[1], p.lng))
                throw ParseError(lineno, "bad polyline point '" + pair + "'");
            s.polyline.push_back(p);
        }
        s.in_edges = ids(f[4]);
        s.out_edges = ids(f[5]);
        long long lanes = 0, points = 0, cls = 0;
        if (!parse_double(f[6], s.attrs.length_m)) throw ParseError(lineno, "bad length_m");
        if (!parse_double(f[7], s.attrs.width_m)) throw ParseError(lineno, "bad width_m");
        if (!parse_int(f[8], lanes)) throw ParseError(lineno, "bad lane_count");
        if (!parse_int(f[9], points)) throw ParseError(lineno, "bad point_count");
        if (!parse_int(f[10], cls)) throw ParseError(lineno, "bad road_class");
        s.attrs.lane_count = static_cast<int>(lanes);
        s.attrs.point_count = static_cast<int>(points);
        s.attrs.road_class = static_cast<int>(cls);
        for (const auto& z : split(f[11], ':')) {
            double v = 0;
            if (!parse_double(z, v)) throw ParseError(lineno, "bad zone component '" + z + "'");
            s.attrs.zone.proportions.push_back(v);
        }
        segs.push_back(std::move(s));
    }
    return RoadNetwork(std::move(segs), class_count);
}

// ---------------------------------------------------------------------------
// Ground-truth / snapped route file: `traj_id,seg_1;seg_2;...`

inline void write_routes(std::ostream& out, const std::vector<std::pair<std::string, Route>>& routes) {
    out << "traj_id,segments\n";
    for (const auto& [id, r] : routes) {
        out << id << ',';
        for (std::size_t i = 0; i < r.segments.size(); ++i) out << (i ? ";" : "") << r.segments[i];
        out << '\n';
    }
}

inline std::vector<std::pair<std::string, Route>> parse_routes(std::istream& in) {
    std::vector<std::pair<std::string, Route>> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto view = trim(line);
        if (view.empty() || lineno == 1) continue;
        auto comma = view.find(',');
        if (comma == std::string_view::npos) throw ParseError(lineno, "expected traj_id,segments");
        Route r;
        r.segments = split(view.substr(comma + 1), ';');
        out.emplace_back(std::string(view.substr(0, comma)), std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Snapping

struct SnapOptions {
    double radius_m = 50.0;
    /// Penalty in meters for a fully reversed heading; scaled by (1 - cos)/2.
    double heading_penalty_m = 30.0;
    int max_hops = 2;
};

namespace detail {

inline double distance_to_polyline(LatLng p, const std::vector<LatLng>& line) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k < line.size(); ++k)
        best = std::min(best, geo::point_segment_distance({0, 0}, geo::to_local(p, line[k - 1]), geo::to_local(p, line[k])));
    return best;
}

/// Hop distance from `from` to `to` if within max_hops, else -1.
inline int hops_between(const RoadNetwork& net, std::size_t from, std::size_t to, int max_hops) {
    if (from == to) return 0;
    std::vector<std::size_t> frontier{from};
    std::vector<std::size_t> seen{from};
    for (int h = 1; h <= max_hops; ++h) {
        std::vector<std::size_t> next;
        for (auto f : frontier)
            for (auto s : net.successors(f)) {
                if (s == to) return h;
                if (std::find(seen.begin(), seen.end(), s) == seen.end()) {
                    seen.push_back(s);
                    next.push_back(s);
                }
            }
        frontier = std::move(next);
    }
    return -1;
}

/// Shortest successor chain strictly between `from` and `to` (empty if directly connected).
inline std::optional<std::vector<std::size_t>> bridge_between(const RoadNetwork& net, std::size_t from, std::size_t to,
                                                              int max_hops) {
    std::map<std::size_t, std::size_t> parent{{from, from}};
    std::vector<std::size_t> frontier{from};
    for (int h = 1; h <= max_hops; ++h) {
        std::vector<std::size_t> next;
        for (auto f : frontier)
            for (auto s : net.successors(f)) {
                if (s == to) {
                    std::vector<std::size_t> mid;
                    for (auto c = f; c != from; c = parent[c]) mid.push_back(c);
                    std::reverse(mid.begin(), mid.end());
                    return mid;
                }
                if (parent.emplace(s, f).second) next.push_back(s);
            }
        frontier = std::move(next);
    }
    return std::nullopt;
}

} // namespace detail

/// Map-matching by dynamic programming over nearby segments: each point pays its distance plus a
/// heading penalty, each hop between segments pays a small cost, and hops beyond max_hops are forbidden.
inline Route snap_to_route(const Trajectory& traj, const RoadNetwork& net, const SnapOptions& opt = {}) {
    if (net.empty()) throw ValidationError("network", "empty road network");
    const auto& pts = traj.points;
    const std::size_t n = pts.size();
    if (n == 0) throw ValidationError("points", "empty trajectory");

    std::vector<double> seg_bearing(net.size());
    for (std::size_t s = 0; s < net.size(); ++s)
        seg_bearing[s] = geo::bearing(net.segment(s).polyline.front(), net.segment(s).polyline.back());

    struct Candidate {
        std::size_t seg;
        double cost;
        std::size_t back;
    };
    std::vector<std::vector<Candidate>> layers(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto a = pts[i == 0 ? 0 : i - 1].pos();
        const auto b = pts[i + 1 < n ? i + 1 : n - 1].pos();
        const bool has_heading = geo::great_circle(a, b) > 1.0;
        const double heading = has_heading ? geo::bearing(a, b) : 0.0;
        for (std::size_t s = 0; s < net.size(); ++s) {
            const double d = detail::distance_to_polyline(pts[i].pos(), net.segment(s).polyline);
            if (d > opt.radius_m) continue;
            double score = d;
            if (has_heading) score += opt.heading_penalty_m * (1.0 - std::cos(geo::angle_diff(heading, seg_bearing[s]))) / 2.0;
            layers[i].push_back({s, score, 0});
        }
        if (layers[i].empty()) throw UnmatchedPointError(i);
    }

    const double inf = std::numeric_limits<double>::infinity();
    const double hop_cost = 2.0;
    for (std::size_t i = 1; i < n; ++i) {
        for (auto& c : layers[i]) {
            double best = inf;
            for (std::size_t k = 0; k < layers[i - 1].size(); ++k) {
                const auto& p = layers[i - 1][k];
                if (!(p.cost < inf)) continue;
                const int hops = detail::hops_between(net, p.seg, c.seg, opt.max_hops);
                if (hops < 0) continue;
                const double total = p.cost + hop_cost * hops;
                if (total < best) {
                    best = total;
                    c.back = k;
                }
            }
            c.cost += best;
        }
        if (std::none_of(layers[i].begin(), layers[i].end(), [&](const Candidate& c) { return c.cost < inf; }))
            throw Error("no hop-continuous match for point " + std::to_string(i) + " of " + traj.id);
    }

    std::vector<std::size_t> chain(n);
    std::size_t k = 0;
    for (std::size_t j = 1; j < layers[n - 1].size(); ++j)
        if (layers[n - 1][j].cost < layers[n - 1][k].cost) k = j;
    for (std::size_t i = n; i-- > 0;) {
        chain[i] = layers[i][k].seg;
        k = layers[i][k].back;
    }

    Route route;
    std::optional<std::size_t> prev;
    for (auto s : chain) {
        if (prev && *prev == s) continue;
        if (prev) {
            auto mid = detail::bridge_between(net, *prev, s, opt.max_hops);
            if (!mid) throw Error("cannot connect segments " + net.segment(*prev).id + " and " + net.segment(s).id);
            for (auto m : *mid) route.segments.push_back(net.segment(m).id);
        }
        route.segments.push_back(net.segment(s).id);
        prev = s;
    }
    return route;
}

} // namespace doufu
