#include <sstream>

#include <gtest/gtest.h>

#include "doufu/core.hpp"
#include "doufu/synthgen.hpp"

using namespace doufu;

namespace {

std::vector<TrajectorySet> parse(const std::string& s) {
    std::istringstream in(s);
    return parse_trajectories(in);
}

synth::NetworkSpec small_spec() {
    synth::NetworkSpec spec;
    spec.grid_rows = 5;
    spec.grid_cols = 5;
    spec.cell_m = 300.0;
    return spec;
}

} // namespace

TEST(ParseTrajectories, EmptyStreamGivesEmptyCollection) {
    EXPECT_TRUE(parse("").empty());
    EXPECT_TRUE(parse("traj_id,user_id,t,lat,lng\n").empty());
}

TEST(ParseTrajectories, LatitudeOutOfRangeNamesField) {
    try {
        parse("traj_id,user_id,t,lat,lng\na,u,0,91,116\na,u,10,39,116\n");
        FAIL() << "expected a validation error";
    } catch (const ValidationError& e) {
        EXPECT_EQ(e.field(), "lat");
    }
}

TEST(ParseTrajectories, GroupsByTrajectoryAndUser) {
    auto sets = parse("traj_id,user_id,t,lat,lng\n"
                      "a,u1,20,39.2,116.2\n"
                      "a,u1,10,39.1,116.1\n"
                      "b,u1,5,39.0,116.0\n"
                      "a,u1,30,39.3,116.3\n"
                      "b,u1,6,39.0,116.1\n");
    ASSERT_EQ(sets.size(), 1u);
    EXPECT_EQ(sets[0].user, "u1");
    ASSERT_EQ(sets[0].trajectories.size(), 2u);
    const auto& a = sets[0].trajectories[0];
    ASSERT_EQ(a.points.size(), 3u);
    EXPECT_EQ(a.points[0].t, 10);
    EXPECT_EQ(a.points[2].t, 30);
}

TEST(ParseTrajectories, MalformedRecordReportsLine) {
    try {
        parse("traj_id,user_id,t,lat,lng\na,u,0,39,116\na,u,ten,39,116\n");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
    EXPECT_THROW(parse("traj_id,user_id,t,lat,lng\na,u,0,39\n"), ParseError);
    EXPECT_THROW(parse("id,user,t,lat,lng\n"), ParseError);
}

TEST(ParseTrajectories, RoundTripIsIdentityOnGeneratedData) {
    auto net = synth::generate_network(small_spec());
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto data = synth::generate_dataset(net, synth::default_profiles(3, seed), 4, 10.0, seed);
        std::ostringstream out;
        write_trajectories(out, data.sets);
        std::istringstream in(out.str());
        EXPECT_EQ(parse_trajectories(in), data.sets);
    }
}

TEST(ValidateTrajectory, Cases) {
    Trajectory ok{"a", "u", {{39, 116, 0}, {39, 116.001, 10}, {39, 116.002, 20}}};
    const auto copy = ok;
    EXPECT_TRUE(validate_trajectory(ok).empty());
    EXPECT_EQ(ok, copy);

    Trajectory dup{"b", "u", {{39, 116, 0}, {39, 116.001, 0}}};
    auto e = validate_trajectory(dup);
    ASSERT_EQ(e.size(), 1u);
    EXPECT_NE(e[0].find("duplicate timestamp"), std::string::npos);

    Trajectory single{"c", "u", {{39, 116, 0}}};
    e = validate_trajectory(single);
    ASSERT_EQ(e.size(), 1u);
    EXPECT_NE(e[0].find("too short"), std::string::npos);

    Trajectory bad{"d", "u", {{39, 116, 10}, {99, 116, 5}}};
    EXPECT_EQ(validate_trajectory(bad).size(), 2u);
}

TEST(RoadNetworkFile, RoundTrip) {
    auto net = synth::generate_network(small_spec());
    std::ostringstream out;
    write_network(out, net);
    std::istringstream in(out.str());
    auto back = parse_network(in);
    EXPECT_EQ(back.segments(), net.segments());
}

TEST(RoadNetwork, RejectsDanglingReference) {
    auto net = synth::generate_network(small_spec());
    auto segs = net.segments();
    segs[0].out_edges.push_back("nope");
    EXPECT_THROW(RoadNetwork{segs}, ValidationError);
}

TEST(SnapToRoute, AllPointsOnOneSegment) {
    auto net = synth::generate_network(small_spec());
    const auto& s = net.segment(0);
    const auto a = s.polyline.front(), b = s.polyline.back();
    Trajectory traj{"x", "u", {}};
    for (int i = 0; i < 4; ++i) {
        const double f = 0.2 + 0.15 * i;
        traj.points.push_back({a.lat + f * (b.lat - a.lat), a.lng + f * (b.lng - a.lng), 10 * i});
    }
    auto route = snap_to_route(traj, net);
    ASSERT_EQ(route.segments.size(), 1u);
    EXPECT_EQ(route.segments[0], s.id);
}

TEST(SnapToRoute, FarPointIsUnmatched) {
    auto net = synth::generate_network(small_spec());
    const auto a = net.segment(0).polyline.front();
    Trajectory traj{"x", "u", {{a.lat, a.lng, 0}, {a.lat + 0.09, a.lng, 10}}};
    try {
        snap_to_route(traj, net, {.radius_m = 50.0});
        FAIL();
    } catch (const UnmatchedPointError& e) {
        EXPECT_EQ(e.point_index(), 1u);
    }
}

TEST(SnapToRoute, RecoversGroundTruthAndStaysConnected) {
    auto net = synth::generate_network(small_spec());
    std::size_t total = 0, recovered = 0;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        auto data = synth::generate_dataset(net, synth::default_profiles(4, seed), 8, 10.0, seed);
        std::size_t k = 0;
        for (const auto& set : data.sets)
            for (const auto& traj : set.trajectories) {
                const auto& truth = data.routes[k++].second;
                auto route = snap_to_route(traj, net);
                EXPECT_TRUE(is_connected(route, net));
                ++total;
                recovered += route == truth;
            }
    }
    EXPECT_GE(static_cast<double>(recovered), 0.95 * static_cast<double>(total));
}
