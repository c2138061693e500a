#include <gtest/gtest.h>

#include <sstream>

#include "qdpg/check/oracles.hpp"
#include "qdpg/check/suites.hpp"
#include "qdpg/diffnet.hpp"

using namespace qdpg;

namespace {

NetSpec policy_net() { return NetSpec(2, {64, 32}, 2, OutputActivation::scaled_tanh, 0.05); }

} // namespace

TEST(NetSpec, ParameterCountFollowsLayerShapes) {
    EXPECT_EQ(policy_net().parameter_count(), 3 * 64 + 65 * 32 + 33 * 2);
    EXPECT_EQ(NetSpec(4, {64, 32}, 1).parameter_count(), 5 * 64 + 65 * 32 + 33);
    EXPECT_EQ(NetSpec(3, {}, 2).parameter_count(), 8);
}

TEST(NetSpec, RejectsDegenerateShapes) {
    EXPECT_THROW(NetSpec(0, {4}, 1), DimensionError);
    EXPECT_THROW(NetSpec(2, {0}, 1), DimensionError);
    EXPECT_THROW(NetSpec(2, {4}, 1, OutputActivation::scaled_tanh, 0.0), DimensionError);
}

TEST(Forward, MatchesLoopOracle) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const NetSpec spec(3, {5, 4}, 2, trial % 2 ? OutputActivation::scaled_tanh : OutputActivation::identity, 1.5);
        const auto params = init_params<double>(spec, rng);
        const auto x = check::detail::uniform_vector(3, -1, 1, rng);
        const auto want = check::dense_forward(spec, check::to_std(params), x).output;
        const auto got = check::to_std(forward<double>(spec, params, check::to_eigen(x)));
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-13);
    }
}

TEST(Forward, BatchColumnsEqualSingleCalls) {
    Rng rng(3);
    const NetSpec spec = policy_net();
    const auto params = init_params<float>(spec, rng);
    Matrix<float> xs = Matrix<float>::Random(2, 17);
    Tape<float> tape;
    const Matrix<float> batch = forward_batch(spec, params, xs, tape);
    for (Eigen::Index j = 0; j < xs.cols(); ++j) {
        const Vector<float> one = forward<float>(spec, params, xs.col(j));
        // Matrix and vector kernels may round differently in float.
        EXPECT_NEAR(one(0), batch(0, j), 1e-6f);
        EXPECT_NEAR(one(1), batch(1, j), 1e-6f);
    }
}

TEST(Forward, ZeroParametersGiveZeroOutput) {
    const NetSpec spec = policy_net();
    const FlatParams<double> zero = FlatParams<double>::Zero(spec.parameter_count());
    Vector<double> x(2);
    x << 0.3, 0.7;
    EXPECT_TRUE(forward<double>(spec, zero, x).isZero());
}

TEST(Forward, ScaledTanhStaysWithinScale) {
    Rng rng(11);
    const NetSpec spec(2, {8}, 2, OutputActivation::scaled_tanh, 0.05);
    FlatParams<double> params = 50.0 * init_params<double>(spec, rng);
    for (int i = 0; i < 200; ++i) {
        const Vector<double> x = Vector<double>::Random(2) * 10.0;
        const auto y = forward<double>(spec, params, x);
        EXPECT_LE(y.cwiseAbs().maxCoeff(), 0.05);
    }
}

TEST(Forward, RejectsMismatchedParameters) {
    const NetSpec spec = policy_net();
    Vector<double> x = Vector<double>::Zero(2);
    EXPECT_THROW(forward<double>(spec, FlatParams<double>::Zero(5), x), DimensionError);
}

TEST(Gradients, ParametersMatchFiniteDifferences) {
    const auto c = check::check_grad_params(101, 40);
    EXPECT_LT(c.worst, 1e-5);
}

TEST(Gradients, InputsMatchFiniteDifferences) {
    const auto c = check::check_grad_input(202, 40);
    EXPECT_LT(c.worst, 1e-5);
}

TEST(Gradients, RejectNonFiniteCotangent) {
    Rng rng(1);
    const NetSpec spec(2, {3}, 1);
    const auto params = init_params<double>(spec, rng);
    Vector<double> x = Vector<double>::Zero(2), cot(1);
    cot << std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(grad_params<double>(spec, params, x, cot), NonFiniteError);
    EXPECT_THROW(grad_input<double>(spec, params, x, cot), NonFiniteError);
}

TEST(Updates, SgdStepIsPlainDescent) {
    FlatParams<double> p(3), g(3);
    p << 1.0, -2.0, 0.5;
    g << 0.5, 0.25, -1.0;
    const auto q = sgd_step(p, g, 0.1);
    EXPECT_DOUBLE_EQ(q(0), 0.95);
    EXPECT_DOUBLE_EQ(q(1), -2.025);
    EXPECT_DOUBLE_EQ(q(2), 0.6);
}

TEST(Updates, SgdRefusesNonFiniteGradient) {
    FlatParams<double> p = FlatParams<double>::Zero(2), g(2);
    g << 1.0, std::numeric_limits<double>::infinity();
    EXPECT_THROW(sgd_step(p, g, 0.1), NonFiniteError);
}

TEST(Updates, PolyakEndpointsAndMidpoint) {
    FlatParams<double> t(2), o(2);
    t << 0.0, 4.0;
    o << 2.0, 0.0;
    EXPECT_EQ(polyak_update(t, o, 0.0), t);
    EXPECT_EQ(polyak_update(t, o, 1.0), o);
    const auto mid = polyak_update(t, o, 0.5);
    EXPECT_DOUBLE_EQ(mid(0), 1.0);
    EXPECT_DOUBLE_EQ(mid(1), 2.0);
    auto in_place = t;
    polyak_update_inplace(in_place, o, 0.005);
    EXPECT_DOUBLE_EQ(in_place(0), 0.01);
    EXPECT_DOUBLE_EQ(in_place(1), 3.98);
}

TEST(Init, WithinFanInBounds) {
    Rng rng(5);
    const NetSpec spec(4, {64, 32}, 1);
    const auto p = init_params<double>(spec, rng);
    for (const auto& l : spec.layers()) {
        const double b = 1.0 / std::sqrt(static_cast<double>(l.fan_in));
        const auto block = p.segment(l.offset, (l.fan_in + 1) * l.fan_out);
        EXPECT_LE(block.cwiseAbs().maxCoeff(), b);
    }
}

TEST(Flatten, RoundTrip) {
    Rng rng(9);
    const NetSpec spec(3, {4, 5}, 2);
    const auto p = init_params<double>(spec, rng);
    const auto layers = unflatten(spec, p);
    ASSERT_EQ(layers.size(), 3u);
    EXPECT_EQ(layers[0].weights.rows(), 4);
    EXPECT_EQ(layers[0].weights.cols(), 3);
    EXPECT_EQ(flatten(spec, layers), p);
}

TEST(Serialization, BlobRoundTripIsBitExact) {
    Rng rng(13);
    const NetSpec spec = policy_net();
    const auto p = init_params<float>(spec, rng);
    std::stringstream ss;
    write_params_blob(ss, spec, p);
    const auto [spec2, p2] = read_params_blob<float>(ss);
    EXPECT_EQ(spec2.parameter_count(), spec.parameter_count());
    EXPECT_EQ(spec2.output_activation(), OutputActivation::scaled_tanh);
    EXPECT_EQ(spec2.output_scale(), 0.05);
    EXPECT_EQ(p2, p);
}

TEST(Serialization, RejectsTruncatedBlob) {
    Rng rng(13);
    const NetSpec spec(2, {3}, 1);
    std::stringstream ss;
    write_params_blob(ss, spec, init_params<double>(spec, rng));
    const std::string bytes = ss.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 4));
    EXPECT_ANY_THROW(read_params_blob<double>(cut));
}

TEST(Serialization, JsonExportHasLayerShapes) {
    Rng rng(2);
    const NetSpec spec(2, {3}, 1);
    const auto j = params_to_json(spec, init_params<double>(spec, rng));
    ASSERT_EQ(j["layers"].size(), 2u);
    EXPECT_EQ(j["layers"][0]["weights"].size(), 3u);
    EXPECT_EQ(j["layers"][0]["weights"][0].size(), 2u);
    EXPECT_EQ(j["spec"]["output_activation"], "identity");
}
