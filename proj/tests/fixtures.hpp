#pragma once

#include <map>

#include <deque>

#include "doufu/core.hpp"
#include "doufu/roadgraph.hpp"
#include "doufu/synthgen.hpp"

namespace fixtures {

/// Six segments R1..R6 with the transitions used by the four example routes
/// R1-R2-R3, R1-R2-R4, R1-R5-R2, R2-R4-R5. R6 is never travelled.
inline doufu::RoadNetwork four_route_network() {
    using doufu::RoadSegment;
    const double lat0 = 39.9, lng0 = 116.3, step = 0.002;
    auto seg = [&](std::string id, double x0, double y0, double x1, double y1, int cls) {
        RoadSegment s;
        s.id = std::move(id);
        s.from_node = s.id + "_a";
        s.to_node = s.id + "_b";
        s.polyline = {{lat0 + y0 * step, lng0 + x0 * step}, {lat0 + y1 * step, lng0 + x1 * step}};
        s.attrs.length_m = doufu::geo::great_circle(s.polyline[0], s.polyline[1]);
        s.attrs.width_m = 7.0;
        s.attrs.lane_count = 2;
        s.attrs.point_count = 2;
        s.attrs.road_class = cls;
        s.attrs.zone.proportions = {0.2, 0.2, 0.2, 0.2, 0.2};
        return s;
    };
    std::vector<RoadSegment> segs{seg("R1", 0, 0, 1, 0, 0), seg("R2", 1, 0, 2, 0, 1), seg("R3", 2, 0, 3, 0, 2),
                                  seg("R4", 2, 0, 2, 1, 3), seg("R5", 1, 1, 1, 0, 4), seg("R6", 3, 0, 3, 1, 2)};
    std::map<std::string, std::vector<std::string>> out{{"R1", {"R2", "R5"}}, {"R2", {"R3", "R4"}}, {"R4", {"R5"}},
                                                        {"R5", {"R2"}},       {"R3", {"R6"}}};
    for (auto& s : segs) {
        s.out_edges = out[s.id];
        for (const auto& [from, tos] : out)
            for (const auto& to : tos)
                if (to == s.id) s.in_edges.push_back(from);
    }
    return doufu::RoadNetwork(std::move(segs));
}

inline std::vector<doufu::Route> four_route_routes() {
    return {{{"R1", "R2", "R3"}}, {{"R1", "R2", "R4"}}, {{"R1", "R5", "R2"}}, {{"R2", "R4", "R5"}}};
}

/// Route graph of a 10x10 synthetic city trimmed to `n` vertices by breadth-first search
/// over transitions in either direction, so the kept part stays connected.
inline doufu::graph::RoadGraph synthetic_graph(std::size_t n, std::uint64_t seed) {
    using namespace doufu;
    const auto net = synth::generate_network(synth::NetworkSpec{});
    const auto data = synth::generate_dataset(net, synth::default_profiles(20, seed), 30, 10.0, seed);
    std::vector<Route> routes;
    for (const auto& [_, r] : data.routes) routes.push_back(r);
    const auto full = graph::build_graph(routes, net);
    std::vector<std::vector<std::size_t>> nbr(full.size());
    for (auto [i, j] : full.edges) {
        nbr[i].push_back(j);
        nbr[j].push_back(i);
    }
    std::vector<char> seen(full.size(), 0);
    std::vector<std::size_t> keep;
    std::deque<std::size_t> queue{0};
    seen[0] = 1;
    while (!queue.empty() && keep.size() < n) {
        const auto v = queue.front();
        queue.pop_front();
        keep.push_back(v);
        for (auto w : nbr[v])
            if (!seen[w]) {
                seen[w] = 1;
                queue.push_back(w);
            }
    }
    if (keep.size() < n) throw Error("synthetic route graph smaller than requested");
    std::sort(keep.begin(), keep.end());
    return graph::induced_subgraph(full, keep);
}

} // namespace fixtures
