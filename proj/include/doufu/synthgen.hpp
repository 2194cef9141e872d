#pragma once

// Seeded synthetic grid road network and driver-trajectory generator.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include "doufu/core.hpp"

namespace doufu::synth {

struct NetworkSpec {
    int grid_rows = 10;
    int grid_cols = 10;
    double cell_m = 300.0;
    LatLng origin{39.90, 116.30};
    std::uint64_t zone_seed = 11;
    std::uint64_t class_seed = 13;
    std::size_t zone_count = default_zone_count;
    std::size_t class_count = default_class_count;
    /// Every `arterial_every`-th row/column is a high-class road.
    int arterial_every = 3;
};

struct RoutePreference {
    double weight_shortest = 1.0;
    double weight_fastest = 0.0;
    double weight_habit = 0.0;
};

struct DriverProfile {
    std::string user;
    double speed_mean = 10.0;  ///< m/s
    double speed_std = 1.0;    ///< m/s, trip-to-trip spread
    double accel_jitter = 0.5; ///< m/s^2
    RoutePreference route_pref;
    int habit_zone = 0;
    std::array<double, 24> departure_dist{};
    std::vector<double> class_style; ///< per road class multiplier on cruise speed; missing classes use 1
};

struct GeneratorOptions {
    double gps_noise_m = 5.0;
    std::int64_t base_epoch = 1543622400; // 2018-12-01T00:00:00Z
    int min_route_segments = 4;
};

struct Dataset {
    std::vector<TrajectorySet> sets;
    std::vector<std::pair<std::string, Route>> routes; ///< ground truth, in generation order
};

inline void validate(const NetworkSpec& spec) {
    if (spec.grid_rows < 2 || spec.grid_cols < 2) throw ValidationError("grid", "grid_rows and grid_cols must be >= 2");
    if (!(spec.cell_m > 0)) throw ValidationError("cell_m", "must be positive");
    if (spec.zone_count < 1 || spec.class_count < 1) throw ValidationError("grid", "zone/class counts must be >= 1");
}

inline void validate(const DriverProfile& p) {
    if (!(p.speed_mean > 0)) throw ValidationError("speed_mean", "profile " + p.user + " must be positive");
    const auto& r = p.route_pref;
    if (r.weight_shortest < 0 || r.weight_fastest < 0 || r.weight_habit < 0)
        throw ValidationError("route_pref", "profile " + p.user + " has negative weight");
    if (std::abs(r.weight_shortest + r.weight_fastest + r.weight_habit - 1.0) > 1e-9)
        throw ValidationError("route_pref", "profile " + p.user + " weights must sum to 1");
    for (double m : p.class_style)
        if (!(m > 0)) throw ValidationError("class_style", "profile " + p.user + " multipliers must be positive");
    const double s = std::accumulate(p.departure_dist.begin(), p.departure_dist.end(), 0.0);
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError("departure_dist", "profile " + p.user + " must sum to 1");
}

/// Speed limit per road class, m/s.
inline double class_speed_limit(int road_class) {
    static constexpr std::array<double, 8> limits{22.0, 18.0, 14.0, 11.0, 9.0, 8.0, 7.0, 6.0};
    return limits[static_cast<std::size_t>(std::min(road_class, 7))];
}

/// Multiplier on a driver's cruise speed by road class.
inline double class_speed_factor(int road_class) {
    return 1.25 - 0.12 * static_cast<double>(std::min(road_class, 7));
}

inline RoadNetwork generate_network(const NetworkSpec& spec) {
    validate(spec);
    const int R = spec.grid_rows, C = spec.grid_cols;
    auto node_id = [&](int r, int c) { return "n" + std::to_string(r) + "_" + std::to_string(c); };
    auto node_pos = [&](int r, int c) { return geo::from_local(spec.origin, {c * spec.cell_m, r * spec.cell_m}); };

    // Zone field: two centers per category over the grid extent.
    Rng zrng(derive_seed(spec.zone_seed, 1));
    std::uniform_real_distribution<double> ux(0.0, (C - 1) * spec.cell_m), uy(0.0, (R - 1) * spec.cell_m);
    std::vector<std::vector<geo::Xy>> centers(spec.zone_count);
    for (auto& cs : centers)
        for (int k = 0; k < 2; ++k) cs.push_back({ux(zrng), uy(zrng)});
    const double rho = 0.22 * std::max(R - 1, C - 1) * spec.cell_m;
    auto zone_at = [&](geo::Xy p) {
        std::vector<double> z(spec.zone_count);
        double sum = 0.0;
        for (std::size_t k = 0; k < spec.zone_count; ++k) {
            double v = 0.03;
            for (auto c : centers[k]) {
                const double d2 = (p.x - c.x) * (p.x - c.x) + (p.y - c.y) * (p.y - c.y);
                v += std::exp(-d2 / (2 * rho * rho));
            }
            z[k] = v;
            sum += v;
        }
        for (auto& v : z) v /= sum;
        return FunctionalZoneVector{z};
    };

    Rng crng(derive_seed(spec.class_seed, 2));
    struct Undirected {
        int r0, c0, r1, c1, road_class;
    };
    std::vector<Undirected> edges;
    auto pick_class = [&](bool arterial) {
        const int hi = static_cast<int>(spec.class_count) - 1;
        if (arterial) return std::min(hi, static_cast<int>(crng() % 2));
        std::uniform_int_distribution<int> d(std::min(hi, 2), hi);
        return d(crng);
    };
    for (int r = 0; r < R; ++r)
        for (int c = 0; c + 1 < C; ++c) edges.push_back({r, c, r, c + 1, pick_class(r % spec.arterial_every == 0)});
    for (int c = 0; c < C; ++c)
        for (int r = 0; r + 1 < R; ++r) edges.push_back({r, c, r + 1, c, pick_class(c % spec.arterial_every == 0)});

    static constexpr std::array<int, 8> lanes_by_class{4, 3, 2, 2, 1, 1, 1, 1};
    std::vector<RoadSegment> segs;
    for (const auto& e : edges)
        for (int dir = 0; dir < 2; ++dir) {
            const int ra = dir ? e.r1 : e.r0, ca = dir ? e.c1 : e.c0, rb = dir ? e.r0 : e.r1, cb = dir ? e.c0 : e.c1;
            RoadSegment s;
            s.id = "s" + std::to_string(segs.size());
            s.from_node = node_id(ra, ca);
            s.to_node = node_id(rb, cb);
            const auto a = node_pos(ra, ca), b = node_pos(rb, cb);
            s.polyline = {a, {(a.lat + b.lat) / 2, (a.lng + b.lng) / 2}, b};
            s.attrs.length_m = geo::great_circle(a, s.polyline[1]) + geo::great_circle(s.polyline[1], b);
            s.attrs.road_class = e.road_class;
            s.attrs.lane_count = lanes_by_class[static_cast<std::size_t>(std::min(e.road_class, 7))];
            s.attrs.width_m = 3.5 * s.attrs.lane_count;
            s.attrs.point_count = static_cast<int>(s.polyline.size());
            s.attrs.zone = zone_at({(ca + cb) * spec.cell_m / 2, (ra + rb) * spec.cell_m / 2});
            segs.push_back(std::move(s));
        }
    // Turns allowed everywhere except U-turns.
    for (auto& s : segs)
        for (const auto& t : segs) {
            if (t.from_node == s.to_node && t.to_node != s.from_node) s.out_edges.push_back(t.id);
            if (t.to_node == s.from_node && t.from_node != s.to_node) s.in_edges.push_back(t.id);
        }
    return RoadNetwork(std::move(segs), spec.class_count);
}

namespace detail {

/// Dijkstra over the segment dual graph; returns segment indices origin..dest inclusive.
inline std::vector<std::size_t> cheapest_route(const RoadNetwork& net, std::size_t origin, std::size_t dest,
                                               const std::vector<double>& cost) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> best(net.size(), inf);
    std::vector<std::size_t> parent(net.size(), net.size());
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    best[origin] = cost[origin];
    pq.push({best[origin], origin});
    while (!pq.empty()) {
        auto [d, u] = pq.top();
        pq.pop();
        if (d > best[u]) continue;
        if (u == dest) break;
        for (auto v : net.successors(u)) {
            const double nd = d + cost[v];
            if (nd < best[v]) {
                best[v] = nd;
                parent[v] = u;
                pq.push({nd, v});
            }
        }
    }
    if (best[dest] == inf) return {};
    std::vector<std::size_t> path{dest};
    while (path.back() != origin) path.push_back(parent[path.back()]);
    std::reverse(path.begin(), path.end());
    return path;
}

inline double normal_clamped(Rng& rng, double mean, double sd, double lo) {
    std::normal_distribution<double> d(mean, sd);
    return std::max(lo, d(rng));
}

} // namespace detail

/// Integrate one trip along `path`, sampling every `period` seconds.
inline std::vector<GpsPoint> drive(const RoadNetwork& net, const std::vector<std::size_t>& path, const DriverProfile& p,
                                   std::int64_t t0, double period, double noise_m, Rng& rng) {
    // Flatten the route polyline with per-vertex cumulative distance.
    std::vector<LatLng> line;
    std::vector<double> cum;
    std::vector<int> seg_class;  // per polyline piece
    std::vector<double> seg_end; // cumulative distance at the end of each route segment
    for (auto s : path) {
        const auto& pl = net.segment(s).polyline;
        for (std::size_t k = 0; k < pl.size(); ++k) {
            if (!line.empty() && k == 0) continue;
            if (!line.empty()) {
                cum.push_back(cum.back() + geo::great_circle(line.back(), pl[k]));
                seg_class.push_back(net.segment(s).attrs.road_class);
            } else {
                cum.push_back(0.0);
            }
            line.push_back(pl[k]);
        }
        seg_end.push_back(cum.back());
    }
    const double first_len = seg_end.front();
    const double last_start = seg_end.size() > 1 ? seg_end[seg_end.size() - 2] : 0.0;
    const double last_len = seg_end.back() - last_start;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    double s = first_len * (0.2 + 0.3 * u01(rng));
    const double end = last_start + last_len * (0.5 + 0.3 * u01(rng));

    // Turn points: segment boundaries with a bearing change above 45 degrees.
    std::vector<double> turns;
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
        const auto& a = net.segment(path[k]).polyline;
        const auto& b = net.segment(path[k + 1]).polyline;
        const double d = std::abs(geo::angle_diff(geo::bearing(a.front(), a.back()), geo::bearing(b.front(), b.back())));
        if (d > std::numbers::pi / 4) turns.push_back(seg_end[k]);
    }

    auto locate = [&](double at) {
        std::size_t k = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), at) - cum.begin());
        k = std::clamp<std::size_t>(k, 1, cum.size() - 1);
        const double span = cum[k] - cum[k - 1];
        const double f = span > 0 ? (at - cum[k - 1]) / span : 0.0;
        return std::make_pair(LatLng{line[k - 1].lat + f * (line[k].lat - line[k - 1].lat),
                                     line[k - 1].lng + f * (line[k].lng - line[k - 1].lng)},
                              k - 1);
    };

    const double cruise = detail::normal_clamped(rng, p.speed_mean, p.speed_std, 2.0);
    std::normal_distribution<double> jitter(0.0, p.accel_jitter), noise(0.0, noise_m);
    auto emit = [&](std::int64_t t, double at) {
        auto [pos, _] = locate(at);
        const auto xy = geo::to_local(pos, pos);
        const auto noisy = geo::from_local(pos, {xy.x + noise(rng), xy.y + noise(rng)});
        return GpsPoint{noisy.lat, noisy.lng, t};
    };

    std::vector<GpsPoint> pts;
    const int step_per_sample = std::max(1, static_cast<int>(std::lround(period)));
    double v = 0.5 * cruise;
    std::int64_t t = t0;
    pts.push_back(emit(t, s));
    int ticks = 0;
    while (s < end) {
        auto [_, piece] = locate(s);
        const int cls = seg_class[std::min(piece, seg_class.size() - 1)];
        const auto ci = static_cast<std::size_t>(cls);
        double target = cruise * class_speed_factor(cls) * (ci < p.class_style.size() ? p.class_style[ci] : 1.0);
        for (double tp : turns)
            if (tp > s && tp - s < 40.0) target = std::min(target, 0.45 * cruise);
        const double a = 0.35 * (target - v) + jitter(rng);
        v = std::clamp(v + a, 0.5, 40.0);
        s += v;
        ++t;
        if (++ticks % step_per_sample == 0 || s >= end) pts.push_back(emit(t, std::min(s, end)));
    }
    return pts;
}

inline Dataset generate_dataset(const RoadNetwork& net, const std::vector<DriverProfile>& profiles, int per_user,
                                double sample_period_s, std::uint64_t seed, const GeneratorOptions& opt = {}) {
    if (per_user < 1) throw ValidationError("per_user", "must be >= 1");
    if (!(sample_period_s > 0)) throw ValidationError("sample_period_s", "must be positive");
    if (net.empty()) throw ValidationError("network", "empty road network");
    for (const auto& p : profiles) validate(p);

    double mean_len = 0.0, mean_tt = 0.0;
    for (const auto& s : net.segments()) {
        mean_len += s.attrs.length_m;
        mean_tt += s.attrs.length_m / class_speed_limit(s.attrs.road_class);
    }
    mean_len /= static_cast<double>(net.size());
    mean_tt /= static_cast<double>(net.size());

    Dataset out;
    for (std::size_t u = 0; u < profiles.size(); ++u) {
        const auto& p = profiles[u];
        Rng rng(derive_seed(seed, u));
        std::vector<double> usage(net.size(), 0.0);
        std::vector<double> dest_weight(net.size());
        for (std::size_t s = 0; s < net.size(); ++s) {
            const double z = net.segment(s).attrs.zone.proportions.at(static_cast<std::size_t>(p.habit_zone));
            dest_weight[s] = z * z;
        }
        std::discrete_distribution<std::size_t> pick_dest(dest_weight.begin(), dest_weight.end());
        std::uniform_int_distribution<std::size_t> pick_origin(0, net.size() - 1);
        std::discrete_distribution<int> pick_hour(p.departure_dist.begin(), p.departure_dist.end());
        std::uniform_int_distribution<int> pick_second(0, 3599);
        std::uniform_real_distribution<double> perturb(0.9, 1.1);

        TrajectorySet set{p.user, {}};
        for (int k = 0; k < per_user; ++k) {
            std::vector<std::size_t> path;
            for (int attempt = 0; attempt < 200 && path.empty(); ++attempt) {
                const auto o = pick_origin(rng), d = pick_dest(rng);
                std::vector<double> cost(net.size());
                for (std::size_t s = 0; s < net.size(); ++s) {
                    const auto& a = net.segment(s).attrs;
                    const double shortest = a.length_m / mean_len;
                    const double fastest = a.length_m / class_speed_limit(a.road_class) / mean_tt;
                    const double habit = 1.0 / (1.0 + usage[s]);
                    cost[s] = (p.route_pref.weight_shortest * shortest + p.route_pref.weight_fastest * fastest +
                               p.route_pref.weight_habit * habit) *
                              perturb(rng);
                }
                auto candidate = detail::cheapest_route(net, o, d, cost);
                if (candidate.size() >= static_cast<std::size_t>(opt.min_route_segments)) path = std::move(candidate);
            }
            if (path.empty()) throw Error("network disconnected: no route found for profile " + p.user);
            for (auto s : path) usage[s] += 1.0;

            const std::int64_t t0 = opt.base_epoch + static_cast<std::int64_t>(k) * 86400 +
                                    static_cast<std::int64_t>(pick_hour(rng)) * 3600 + pick_second(rng);
            Trajectory traj{p.user + "_t" + std::to_string(k), p.user,
                            drive(net, path, p, t0, sample_period_s, opt.gps_noise_m, rng)};
            Route route;
            for (auto s : path) route.segments.push_back(net.segment(s).id);
            out.routes.emplace_back(traj.id, std::move(route));
            set.trajectories.push_back(std::move(traj));
        }
        out.sets.push_back(std::move(set));
    }
    return out;
}

/// Departure histogram: a wrapped Gaussian bump around `peak_hour` over a uniform floor.
inline std::array<double, 24> departure_bump(double peak_hour, double spread_h, double floor = 0.02) {
    std::array<double, 24> d{};
    double sum = 0.0;
    for (int h = 0; h < 24; ++h) {
        double dh = std::abs(h - peak_hour);
        dh = std::min(dh, 24.0 - dh);
        d[static_cast<std::size_t>(h)] = floor + std::exp(-dh * dh / (2 * spread_h * spread_h));
        sum += d[static_cast<std::size_t>(h)];
    }
    for (auto& v : d) v /= sum;
    return d;
}

/// Users come in groups of four that share route habits, home zone and departure peak.
/// Inside a group they differ by cruise speed and by one of two mirrored per-class speed styles,
/// so a mirrored pair is only told apart by which road classes the driver takes fast.
inline std::vector<DriverProfile> default_profiles(int n_users, std::uint64_t seed, std::size_t zone_count = default_zone_count) {
    static constexpr std::array<double, 2> speed_levels{9.0, 12.5};
    static constexpr std::array<double, 2> jitter_levels{0.4, 0.9};
    static const std::array<RoutePreference, 5> archetypes{{
        {1.0, 0.0, 0.0},
        {0.0, 1.0, 0.0},
        {0.15, 0.15, 0.7},
        {0.5, 0.5, 0.0},
        {0.3, 0.0, 0.7},
    }};
    static constexpr std::array<double, 5> peaks{7.5, 12.0, 17.5, 21.0, 2.0};
    static const std::array<std::array<std::vector<double>, 2>, 2> styles{{
        {{{1.3, 1.15, 1.0, 0.85, 0.7}, {0.7, 0.85, 1.0, 1.15, 1.3}}},
        {{{1.3, 0.75, 1.3, 0.75, 1.3}, {0.75, 1.3, 0.75, 1.3, 0.75}}},
    }};
    const int groups = (n_users + 3) / 4;
    Rng rng(derive_seed(seed, 77));
    std::vector<int> zone_perm(static_cast<std::size_t>(groups));
    for (int g = 0; g < groups; ++g) zone_perm[static_cast<std::size_t>(g)] = g % static_cast<int>(zone_count);
    std::shuffle(zone_perm.begin(), zone_perm.end(), rng);

    std::vector<DriverProfile> out;
    for (int u = 0; u < n_users; ++u) {
        DriverProfile p;
        char buf[16];
        std::snprintf(buf, sizeof buf, "u%02d", u);
        p.user = buf;
        const auto mv = static_cast<std::size_t>(u % 2);
        const auto mirror = static_cast<std::size_t>((u / 2) % 2);
        const auto g = static_cast<std::size_t>(u / 4);
        p.speed_mean = speed_levels[mv];
        p.speed_std = 1.0;
        p.accel_jitter = jitter_levels[mv];
        p.route_pref = archetypes[g % 5];
        p.habit_zone = zone_perm[g];
        p.departure_dist = departure_bump(peaks[g % 5], 3.5);
        p.class_style = styles[g % 2][mirror];
        out.push_back(p);
    }
    return out;
}

} // namespace doufu::synth
