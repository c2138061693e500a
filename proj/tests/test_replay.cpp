#include <gtest/gtest.h>

#include <map>

#include "qdpg/check/oracles.hpp"
#include "qdpg/replay.hpp"

using namespace qdpg;

namespace {

Transition tagged(int i) {
    Transition t;
    t.state = {static_cast<double>(i), 0.0};
    t.reward = -static_cast<double>(i);
    return t;
}

} // namespace

TEST(Replay, ZeroCapacityRejected) { EXPECT_THROW(ReplayBuffer(0), DimensionError); }

TEST(Replay, FifoOverwriteOrder) {
    ReplayBuffer b(4);
    for (int i = 0; i < 6; ++i) b.push(tagged(i));
    EXPECT_EQ(b.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(b.at(i).state.x, static_cast<double>(i + 2));
    EXPECT_THROW(b.at(4), DimensionError);
}

TEST(Replay, TrajectoryPushKeepsOrder) {
    ReplayBuffer b(10);
    std::vector<Transition> ep;
    for (int i = 0; i < 7; ++i) ep.push_back(tagged(i));
    b.push_trajectory(ep);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(b.at(i), ep[i]);
}

TEST(Replay, BatchLargerThanContentsThrows) {
    ReplayBuffer b(10);
    b.push(tagged(0));
    Rng rng(1);
    EXPECT_THROW(b.sample_batch(2, rng), DimensionError);
    EXPECT_THROW(b.sample_batch(0, rng), DimensionError);
}

TEST(Replay, SamplingIsUniform) {
    ReplayBuffer b(8);
    for (int i = 0; i < 11; ++i) b.push(tagged(i)); // wrapped
    Rng rng(9);
    std::map<double, std::size_t> hits;
    for (int r = 0; r < 12500; ++r)
        for (const auto& t : b.sample_batch(8, rng)) ++hits[t.state.x];
    ASSERT_EQ(hits.size(), 8u);
    std::vector<std::size_t> counts;
    for (const auto& [k, v] : hits) {
        EXPECT_GE(k, 3.0);
        counts.push_back(v);
    }
    EXPECT_GT(check::chi_squared_uniform_p(counts), 0.01);
}

TEST(Replay, SameSeedSameBatch) {
    ReplayBuffer b(100);
    for (int i = 0; i < 100; ++i) b.push(tagged(i));
    Rng r1(5), r2(5);
    EXPECT_EQ(b.sample_batch(32, r1), b.sample_batch(32, r2));
}
