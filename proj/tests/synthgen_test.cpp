#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "doufu/features.hpp"
#include "doufu/synthgen.hpp"

using namespace doufu;

TEST(GenerateNetwork, GridCounts) {
    synth::NetworkSpec spec;
    spec.grid_rows = 2;
    spec.grid_cols = 2;
    auto net = synth::generate_network(spec);
    EXPECT_EQ(net.intersections().size(), 4u);
    EXPECT_EQ(net.size(), 8u);

    spec.grid_rows = spec.grid_cols = 4;
    const std::size_t undirected = 4 * 3 + 4 * 3;
    ASSERT_EQ(undirected, 24u);
    EXPECT_EQ(synth::generate_network(spec).size(), 2 * undirected);
}

TEST(GenerateNetwork, DeterministicPerSpec) {
    synth::NetworkSpec spec;
    spec.grid_rows = 5;
    spec.grid_cols = 6;
    std::ostringstream a, b;
    write_network(a, synth::generate_network(spec));
    write_network(b, synth::generate_network(spec));
    EXPECT_EQ(a.str(), b.str());
}

TEST(GenerateNetwork, RejectsBadSpec) {
    synth::NetworkSpec spec;
    spec.grid_rows = 1;
    EXPECT_THROW(synth::generate_network(spec), ValidationError);
    spec.grid_rows = 3;
    spec.cell_m = 0;
    EXPECT_THROW(synth::generate_network(spec), ValidationError);
}

class GeneratedData : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        synth::NetworkSpec spec;
        spec.grid_rows = spec.grid_cols = 6;
        net_ = new RoadNetwork(synth::generate_network(spec));
    }
    static void TearDownTestSuite() { delete net_; }
    static RoadNetwork* net_;
};
RoadNetwork* GeneratedData::net_ = nullptr;

TEST_F(GeneratedData, LabelsAndCounts) {
    auto profiles = synth::default_profiles(1, 5);
    auto data = synth::generate_dataset(*net_, profiles, 3, 10.0, 5);
    ASSERT_EQ(data.sets.size(), 1u);
    ASSERT_EQ(data.sets[0].trajectories.size(), 3u);
    for (const auto& t : data.sets[0].trajectories) EXPECT_EQ(t.user, profiles[0].user);
    EXPECT_EQ(data.routes.size(), 3u);
}

TEST_F(GeneratedData, SameSeedSamePoints) {
    auto profiles = synth::default_profiles(3, 9);
    auto a = synth::generate_dataset(*net_, profiles, 4, 10.0, 42);
    auto b = synth::generate_dataset(*net_, profiles, 4, 10.0, 42);
    EXPECT_EQ(a.sets, b.sets);
    EXPECT_EQ(a.routes, b.routes);
    auto c = synth::generate_dataset(*net_, profiles, 4, 10.0, 43);
    EXPECT_NE(a.sets, c.sets);
}

TEST_F(GeneratedData, ValidTrajectoriesAndConnectedRoutes) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto data = synth::generate_dataset(*net_, synth::default_profiles(6, seed), 5, 10.0, seed);
        for (const auto& set : data.sets)
            for (const auto& t : set.trajectories) EXPECT_TRUE(validate_trajectory(t).empty()) << t.id;
        for (const auto& [id, r] : data.routes) EXPECT_TRUE(is_connected(r, *net_)) << id;
    }
}

static double mean_speed(const TrajectorySet& set) {
    double dist = 0, time = 0;
    for (const auto& t : set.trajectories)
        for (std::size_t i = 1; i < t.points.size(); ++i) {
            dist += geo::great_circle(t.points[i - 1].pos(), t.points[i].pos());
            time += static_cast<double>(t.points[i].t - t.points[i - 1].t);
        }
    return dist / time;
}

TEST_F(GeneratedData, SpeedProfilesSeparate) {
    auto slow = synth::default_profiles(1, 1)[0];
    auto fast = slow;
    slow.speed_mean = 8.0;
    fast.speed_mean = 16.0;
    fast.user = "fast";
    auto data = synth::generate_dataset(*net_, {slow, fast}, 50, 10.0, 3);
    EXPECT_GT(mean_speed(data.sets[1]) - mean_speed(data.sets[0]), 4.0);
}

TEST_F(GeneratedData, ClassStyleScalesSpeed) {
    auto plain = synth::default_profiles(1, 1)[0];
    plain.class_style = {};
    auto lazy = plain;
    lazy.user = "lazy";
    lazy.class_style = std::vector<double>(default_class_count, 0.6);
    auto data = synth::generate_dataset(*net_, {plain, lazy}, 30, 10.0, 4);
    EXPECT_GT(mean_speed(data.sets[0]), 1.2 * mean_speed(data.sets[1]));

    lazy.class_style = {1.0, 0.0};
    EXPECT_THROW(synth::validate(lazy), ValidationError);
}

TEST_F(GeneratedData, RejectsBadArguments) {
    auto profiles = synth::default_profiles(1, 1);
    EXPECT_THROW(synth::generate_dataset(*net_, profiles, 0, 10.0, 1), ValidationError);
    EXPECT_THROW(synth::generate_dataset(*net_, profiles, 1, 0.0, 1), ValidationError);
    profiles[0].route_pref = {0.5, 0.2, 0.2};
    EXPECT_THROW(synth::generate_dataset(*net_, profiles, 1, 10.0, 1), ValidationError);
}

TEST(DefaultProfiles, Valid) {
    for (const auto& p : synth::default_profiles(20, 3)) EXPECT_NO_THROW(synth::validate(p));
}

TEST(DefaultProfiles, GroupsShareHabitsAndMirrorStyles) {
    const auto ps = synth::default_profiles(20, 3);
    for (std::size_t g = 0; g < 5; ++g) {
        const auto& a = ps[4 * g];
        for (std::size_t k = 1; k < 4; ++k) {
            const auto& b = ps[4 * g + k];
            EXPECT_EQ(a.habit_zone, b.habit_zone);
            EXPECT_EQ(a.departure_dist, b.departure_dist);
            EXPECT_EQ(a.route_pref.weight_habit, b.route_pref.weight_habit);
        }
        // users 0 and 2 of a group differ only in class style
        EXPECT_NE(ps[4 * g].class_style, ps[4 * g + 2].class_style);
        EXPECT_EQ(ps[4 * g].speed_mean, ps[4 * g + 2].speed_mean);
        EXPECT_NE(ps[4 * g].speed_mean, ps[4 * g + 1].speed_mean);
    }
    std::set<std::string> names;
    for (const auto& p : ps) names.insert(p.user);
    EXPECT_EQ(names.size(), 20u);
}
