#include <gtest/gtest.h>

#include "qdpg/check/oracles.hpp"
#include "qdpg/check/suites.hpp"
#include "qdpg/pg_update.hpp"

using namespace qdpg;

namespace {

const NetSpec kActor(2, {16, 8}, 2, OutputActivation::scaled_tanh, 0.05);
const NetSpec kCritic(4, {16, 8}, 1);

UpdateConfig small_config() {
    UpdateConfig c;
    c.batch_size = 32;
    return c;
}

ReplayBuffer filled_buffer(std::size_t n, std::uint64_t seed) {
    const EnvSpec env = load_layout(QDPG_DATA_DIR "/point_maze.json");
    ReplayBuffer b(100000);
    Rng rng(seed);
    while (b.size() < n) {
        const auto p = init_params<double>(kActor, rng);
        Rng noise(rng());
        b.push_trajectory(rollout(env, kActor, p, 0.01, &noise).transitions);
    }
    return b;
}

DescriptorArchive archive_of(const ReplayBuffer& b) {
    DescriptorArchive a;
    for (std::size_t i = 0; i < b.size(); ++i) a.try_add(b.at(i).state_descriptor);
    a.reindex();
    return a;
}

// Critic whose value is the first action component: Q(s, a) = a_x.
CriticPair<double> action_reader() {
    const NetSpec linear(4, {}, 1);
    CriticPair<double> p;
    p.spec = linear;
    p.q1 = FlatParams<double>::Zero(linear.parameter_count());
    p.q1(2) = 1.0; // weight of a_x (column-major 1 x 4 block)
    p.q2 = p.q1;
    p.q1_target = p.q1;
    p.q2_target = p.q1;
    return p;
}

} // namespace

TEST(Target, MatchesOracleWithoutSmoothing) {
    Rng rng(1);
    UpdateConfig c;
    c.smoothing_noise_std = 0.0;
    c.gamma = 0.9;
    auto pair = CriticPair<double>::create(kCritic, Objective::quality, rng);
    pair.q1_target = init_params<double>(kCritic, rng);
    const auto actor = init_params<double>(kActor, rng);
    const auto batch = check::detail::random_batch(rng, 16);
    Workspace<double> ws;
    const auto y = critic_target(pair, batch, kActor, actor, c, rng, ws);
    for (Eigen::Index j = 0; j < 16; ++j) {
        const auto s = check::detail::column(batch.next_states, j);
        auto a = check::dense_forward(kActor, check::to_std(actor), s).output;
        for (double& v : a) v = std::clamp(v, -0.05, 0.05);
        const double k = c.critic_action_scale();
        const std::vector<double> in{s[0], s[1], k * a[0], k * a[1]};
        const double t1 = check::dense_forward(kCritic, check::to_std(pair.q1_target), in).output[0];
        const double t2 = check::dense_forward(kCritic, check::to_std(pair.q2_target), in).output[0];
        EXPECT_NEAR(y(0, j), batch.rewards(0, j) + 0.9 * std::min(t1, t2), 1e-12);
    }
}

TEST(Target, SmoothingNoiseIsClippedThenActionBounded) {
    Rng rng(2);
    UpdateConfig c;
    c.gamma = 1.0;
    c.smoothing_noise_std = 1.0;
    c.smoothing_noise_clip = 0.02;
    c.normalize_critic_actions = false;
    auto pair = action_reader();
    const FlatParams<double> zero_actor = FlatParams<double>::Zero(kActor.parameter_count());
    auto batch = check::detail::random_batch(rng, 400);
    batch.rewards.setZero();
    Workspace<double> ws;
    const auto y = critic_target(pair, batch, kActor, zero_actor, c, rng, ws);
    EXPECT_LE(y.maxCoeff(), 0.02);
    EXPECT_GE(y.minCoeff(), -0.02);
    EXPECT_EQ(y.maxCoeff(), 0.02); // std 1 saturates the clip often

    c.smoothing_noise_clip = 0.5; // wider than the action bound
    const auto y2 = critic_target(pair, batch, kActor, zero_actor, c, rng, ws);
    EXPECT_EQ(y2.maxCoeff(), 0.05);
    EXPECT_EQ(y2.minCoeff(), -0.05);
}

TEST(Target, TwinMinimumIsTaken) {
    UpdateConfig c;
    c.smoothing_noise_std = 0.0;
    c.gamma = 1.0;
    c.normalize_critic_actions = false;
    auto pair = action_reader();
    pair.q2_target.setZero();
    pair.q2_target(4) = -3.0; // bias: Q2 = -3
    FlatParams<double> actor = FlatParams<double>::Zero(kActor.parameter_count());
    Rng rng(3);
    auto batch = check::detail::random_batch(rng, 4);
    batch.rewards.setConstant(1.0);
    Workspace<double> ws;
    const auto y = critic_target(pair, batch, kActor, actor, c, rng, ws);
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(y(0, j), -2.0);
}

TEST(Target, CriticsSeeNormalizedActions) {
    UpdateConfig c;
    c.smoothing_noise_std = 0.0;
    c.gamma = 1.0;
    auto pair = action_reader();
    // Actor with only an output bias: pi(s) = 0.05 tanh(0.5) for every state.
    FlatParams<double> actor = FlatParams<double>::Zero(kActor.parameter_count());
    const auto& out = kActor.layers().back();
    actor(out.offset + out.fan_in * out.fan_out) = 0.5;
    Rng rng(3);
    auto batch = check::detail::random_batch(rng, 4);
    batch.rewards.setZero();
    Workspace<double> ws;
    const auto y = critic_target(pair, batch, kActor, actor, c, rng, ws);
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_NEAR(y(0, j), std::tanh(0.5), 1e-12);
    c.normalize_critic_actions = false;
    const auto raw = critic_target(pair, batch, kActor, actor, c, rng, ws);
    for (Eigen::Index j = 0; j < 4; ++j) EXPECT_NEAR(raw(0, j), 0.05 * std::tanh(0.5), 1e-12);
}

TEST(Target, NonFiniteCriticAborts) {
    Rng rng(4);
    UpdateConfig c;
    auto pair = CriticPair<double>::create(kCritic, Objective::quality, rng);
    pair.q1_target(0) = std::numeric_limits<double>::infinity();
    const auto batch = check::detail::random_batch(rng, 4);
    Workspace<double> ws;
    EXPECT_THROW(critic_target(pair, batch, kActor, init_params<double>(kActor, rng), c, rng, ws), NonFiniteError);
}

TEST(Gradients, CriticLossMatchesFiniteDifferences) {
    EXPECT_LT(check::check_critic_loss(11, 30).worst, 1e-5);
}

TEST(Gradients, ActorObjectiveMatchesFiniteDifferences) {
    EXPECT_LT(check::check_actor_objective(12, 30).worst, 1e-5);
}

TEST(Gradients, SumReductionScalesByBatch) {
    Rng rng(5);
    auto pair = CriticPair<double>::create(kCritic, Objective::quality, rng);
    const auto batch = check::detail::random_batch(rng, 8);
    const Matrix<double> y = Matrix<double>::Constant(1, 8, -0.5);
    UpdateConfig mean, sum;
    sum.reduction = LossReduction::sum;
    Workspace<double> ws;
    PairGradient<double> gm, gs;
    critic_gradient(pair, batch, y, mean, ws, gm);
    critic_gradient(pair, batch, y, sum, ws, gs);
    EXPECT_TRUE(gs.g1.isApprox(8.0 * gm.g1, 1e-12));
    EXPECT_NEAR(gs.loss, 8.0 * gm.loss, 1e-12);
}

TEST(Steps, CriticDescentLowersLossOnFixedTargets) {
    Rng rng(6);
    auto pair = CriticPair<double>::create(kCritic, Objective::quality, rng);
    const auto batch = check::detail::random_batch(rng, 64);
    const Matrix<double> y = batch.rewards;
    UpdateConfig c;
    c.lr = 0.01;
    Workspace<double> ws;
    PairGradient<double> g;
    critic_gradient(pair, batch, y, c, ws, g);
    const double first = g.loss;
    for (int i = 0; i < 200; ++i) {
        critic_gradient(pair, batch, y, c, ws, g);
        apply_critic_gradient(pair, g, c);
    }
    critic_gradient(pair, batch, y, c, ws, g);
    EXPECT_LT(g.loss, first);
}

TEST(Steps, ActorAscentRaisesCriticValue) {
    Rng rng(7);
    auto pair = CriticPair<double>::create(kCritic, Objective::quality, rng);
    auto actor = init_params<double>(kActor, rng);
    const auto batch = check::detail::random_batch(rng, 64);
    UpdateConfig c;
    c.lr = 1e-2;
    auto value = [&](const FlatParams<double>& p) {
        Workspace<double> ws;
        const Matrix<double> a = forward_batch(kActor, p, batch.states, ws.actor);
        Matrix<double> sa;
        stack_state_action(batch.states, a, sa, c.critic_action_scale());
        return forward_batch(kCritic, pair.q1, sa, ws.critic1).mean();
    };
    const double before = value(actor);
    for (int i = 0; i < 20; ++i) actor = actor_step(kActor, actor, pair, batch, c);
    EXPECT_GT(value(actor), before);
}

TEST(Steps, NonFiniteActorGradientIsRefusedAndCounted) {
    Rng rng(8);
    auto pair = CriticPair<double>::create(kCritic, Objective::quality, rng);
    pair.q1.setConstant(std::numeric_limits<double>::quiet_NaN());
    const auto actor = init_params<double>(kActor, rng);
    const auto batch = check::detail::random_batch(rng, 8);
    UpdateStats stats;
    const auto out = actor_step(kActor, actor, pair, batch, UpdateConfig{}, &stats);
    EXPECT_EQ(out, actor);
    EXPECT_EQ(stats.refused_actor_steps, 1u);
}

TEST(Steps, NonFiniteCriticGradientThrows) {
    Rng rng(9);
    auto pair = CriticPair<double>::create(kCritic, Objective::quality, rng);
    const auto before = pair.content_hash();
    PairGradient<double> g{FlatParams<double>::Zero(kCritic.parameter_count()),
                           FlatParams<double>::Zero(kCritic.parameter_count()), 0.0};
    g.g2(3) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(apply_critic_gradient(pair, g, UpdateConfig{}), NonFiniteError);
    EXPECT_EQ(pair.content_hash(), before);
}

TEST(Steps, TargetsTrackByPolyak) {
    Rng rng(10);
    auto pair = CriticPair<double>::create(kCritic, Objective::quality, rng);
    const auto online = pair.q1;
    pair.q1_target.setZero();
    UpdateConfig c;
    c.tau = 0.25;
    update_targets(pair, c);
    EXPECT_TRUE(pair.q1_target.isApprox(0.25 * online, 1e-15));
}

TEST(Rewards, PerObjective) {
    const ReplayBuffer buffer = filled_buffer(400, 1);
    const DescriptorArchive archive = archive_of(buffer);
    std::vector<Transition> ts;
    for (std::size_t i = 0; i < 20; ++i) ts.push_back(buffer.at(i * 7));
    std::vector<Neighbor> scratch;
    auto q = make_batch<double>(ts), d = q, s = q;
    assign_rewards(q, Objective::quality, archive, scratch);
    assign_rewards(d, Objective::diversity, archive, scratch);
    assign_rewards(s, Objective::sum, archive, scratch);
    for (Eigen::Index j = 0; j < 20; ++j) {
        const double nov = archive.diversity_reward(ts[static_cast<std::size_t>(j)].state_descriptor);
        EXPECT_EQ(q.rewards(0, j), ts[static_cast<std::size_t>(j)].reward);
        EXPECT_EQ(d.rewards(0, j), nov);
        EXPECT_EQ(s.rewards(0, j), ts[static_cast<std::size_t>(j)].reward + nov);
    }
}

TEST(Mutation, PolicyDelayGatesActorUpdates) {
    const ReplayBuffer buffer = filled_buffer(400, 2);
    const DescriptorArchive archive = archive_of(buffer);
    Rng rng(3);
    auto critics = SharedCritics<double>::create(kCritic, rng);
    const Solution<double> parent{init_params<double>(kActor, rng), 0.0, {}};
    const auto c = small_config();
    Rng fresh(3);
    const auto untouched = SharedCritics<double>::create(kCritic, fresh).diversity.content_hash();
    const auto h0 = critics.quality.content_hash();
    const auto one = mutate(parent, Objective::quality, critics, buffer, archive, 1, kActor, c, 42);
    EXPECT_EQ(one.params, parent.params);
    EXPECT_NE(critics.quality.content_hash(), h0);
    EXPECT_EQ(critics.diversity.content_hash(), untouched);
    const auto two = mutate(parent, Objective::quality, critics, buffer, archive, 2, kActor, c, 42);
    EXPECT_NE(two.params, parent.params);
}

TEST(Mutation, IdenticalWorkersEqualOneWorker) {
    const ReplayBuffer buffer = filled_buffer(400, 4);
    const DescriptorArchive archive = archive_of(buffer);
    Rng rng(5);
    const auto start = SharedCritics<double>::create(kCritic, rng);
    const Solution<double> parent{init_params<double>(kActor, rng), 0.0, {}};
    const auto c = small_config();

    auto solo = start;
    const auto a = mutate(parent, Objective::diversity, solo, buffer, archive, 6, kActor, c, 77);
    auto pairx = start;
    const std::vector<Solution<double>> parents{parent, parent};
    const Objective objs[] = {Objective::diversity, Objective::diversity};
    const std::uint64_t seeds[] = {77, 77};
    const auto b = mutate_population(parents, objs, pairx, buffer, archive, 6, kActor, c, seeds);
    EXPECT_EQ(a.params, b[0].params);
    EXPECT_EQ(a.params, b[1].params);
    EXPECT_EQ(solo.diversity.content_hash(), pairx.diversity.content_hash());
}

TEST(Mutation, ParallelMatchesSingleThreaded) {
    const ReplayBuffer buffer = filled_buffer(800, 6);
    const DescriptorArchive archive = archive_of(buffer);
    Rng rng(7);
    const auto start = SharedCritics<float>::create(kCritic, rng);
    std::vector<Solution<float>> parents;
    for (int i = 0; i < 4; ++i) parents.push_back({init_params<float>(kActor, rng), 0.0, {}});
    const Objective objs[] = {Objective::quality, Objective::diversity, Objective::diversity, Objective::quality};
    const std::uint64_t seeds[] = {1, 2, 3, 4};
    const auto c = small_config();

    auto s1 = start, s2 = start;
    UpdateStats st1, st2;
    const auto a = mutate_population(parents, objs, s1, buffer, archive, 9, kActor, c, seeds,
                                     ExecutionMode::single_threaded, &st1);
    const auto b = mutate_population(parents, objs, s2, buffer, archive, 9, kActor, c, seeds, ExecutionMode::parallel,
                                     &st2);
    for (std::size_t w = 0; w < 4; ++w) EXPECT_EQ(a[w].params, b[w].params);
    EXPECT_EQ(s1.quality.content_hash(), s2.quality.content_hash());
    EXPECT_EQ(s1.diversity.content_hash(), s2.diversity.content_hash());
    EXPECT_EQ(s1.sum.content_hash(), start.sum.content_hash()); // unused pair untouched
    EXPECT_EQ(st1.critic_updates[0], 9u);
    EXPECT_EQ(st1.actor_updates, 4u * 4u);
    EXPECT_EQ(st1.critic_loss_sum[1], st2.critic_loss_sum[1]);
}

TEST(Mutation, ParentsUntouchedAndShapesChecked) {
    const ReplayBuffer buffer = filled_buffer(400, 8);
    const DescriptorArchive archive = archive_of(buffer);
    Rng rng(9);
    auto critics = SharedCritics<double>::create(kCritic, rng);
    const std::vector<Solution<double>> parents{{init_params<double>(kActor, rng), 0.0, {}}};
    const auto copy = parents;
    const Objective objs[] = {Objective::sum};
    const std::uint64_t seeds[] = {1, 2};
    EXPECT_THROW(mutate_population(parents, objs, critics, buffer, archive, 2, kActor, small_config(),
                                   std::span<const std::uint64_t>(seeds, 2)),
                 DimensionError);
    mutate_population(parents, objs, critics, buffer, archive, 2, kActor, small_config(),
                      std::span<const std::uint64_t>(seeds, 1));
    EXPECT_EQ(parents[0].params, copy[0].params);
}

TEST(Mutation, NeedsOneFullBatch) {
    ReplayBuffer buffer(100);
    DescriptorArchive archive;
    Rng rng(1);
    auto critics = SharedCritics<double>::create(kCritic, rng);
    const Solution<double> parent{init_params<double>(kActor, rng), 0.0, {}};
    EXPECT_THROW(mutate(parent, Objective::quality, critics, buffer, archive, 1, kActor, small_config(), 1),
                 DimensionError);
}
