#include <gtest/gtest.h>

#include "qdpg/svg_plot.hpp"

using namespace qdpg;

namespace {

std::size_t occurrences(const std::string& s, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
    return n;
}

} // namespace

TEST(Svg, EmptyCoverageDrawsWallsOnly) {
    const EnvSpec env = load_layout(QDPG_DATA_DIR "/point_maze.json");
    const std::string s = svg::coverage_svg(env, {});
    EXPECT_EQ(occurrences(s, "class=\"dot\""), 0u);
    EXPECT_EQ(occurrences(s, "class=\"wall\""), env.walls.size());
    EXPECT_EQ(s.rfind("</svg>"), s.size() - 7);
}

TEST(Svg, OneDotPerCoverageRow) {
    const EnvSpec env = load_layout(QDPG_DATA_DIR "/point_maze.json");
    std::vector<svg::CoveragePoint> pts;
    for (int i = 0; i < 37; ++i) pts.push_back({{0.02 * i, 0.5}, -1.0, static_cast<std::uint64_t>(i)});
    EXPECT_EQ(occurrences(svg::coverage_svg(env, pts), "class=\"dot\""), 37u);
}

TEST(Svg, GridHasOneRectPerCell) {
    GridSpec spec;
    spec.meshes_per_dim = 5;
    std::vector<std::optional<double>> fit(25);
    fit[3] = -10.0;
    fit[7] = -2.0;
    const std::string s = svg::grid_svg(spec, fit);
    EXPECT_EQ(occurrences(s, "class=\"cell\""), 25u);
    EXPECT_EQ(occurrences(s, "#cccccc"), 23u);
    EXPECT_THROW(svg::grid_svg(spec, std::vector<std::optional<double>>(24)), DimensionError);
}

TEST(Svg, CurveStepValueAndBand) {
    const std::vector<svg::CurvePoint> a{{0, -100}, {10, -50}}, b{{0, -90}, {20, -10}};
    EXPECT_EQ(*svg::curve_at(a, 0), -100);
    EXPECT_EQ(*svg::curve_at(a, 15), -50);
    EXPECT_EQ(*svg::curve_at(b, 15), -90);
    EXPECT_EQ(occurrences(svg::curve_svg({a, b}), "class=\"band\""), 1u);
    EXPECT_EQ(occurrences(svg::curve_svg({a}), "class=\"band\""), 0u);
    EXPECT_EQ(occurrences(svg::curve_svg({a}), "class=\"median\""), 1u);
}

TEST(Quantile, LinearInterpolation) {
    EXPECT_EQ(quantile({4, 1, 3, 2}, 0.5), 2.5);
    EXPECT_EQ(quantile({4, 1, 3, 2}, 0.25), 1.75);
    EXPECT_EQ(quantile({7}, 0.75), 7);
    EXPECT_THROW(quantile({}, 0.5), std::invalid_argument);
}
