#pragma once

// SVG renderings of run artifacts: coverage maps, learning curves and grid
// heatmaps. Each renderer returns the document as a string.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "elites_grid.hpp"
#include "env_maze.hpp"

namespace qdpg::svg {

struct CoveragePoint {
    Vec2 bd;
    double fitness = 0.0;
    std::uint64_t timestep = 0;
};

struct CurvePoint {
    std::uint64_t timestep = 0;
    double best_fitness = 0.0;
};

/// Rows of a comma-separated file with a header line, split into fields.
inline std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::getline(in, line); // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        rows.push_back(std::move(fields));
    }
    return rows;
}

// coverage.csv: eval_index,bd_x,bd_y,fitness,timestep
inline std::vector<CoveragePoint> read_coverage(const std::string& path) {
    std::vector<CoveragePoint> out;
    for (const auto& r : read_csv_rows(path)) {
        if (r.size() < 5) throw ConfigError(path + ": short row");
        out.push_back({{std::stod(r[1]), std::stod(r[2])}, std::stod(r[3]), std::stoull(r[4])});
    }
    return out;
}

// curve.csv: timestep,best_fitness,coverage,diversity
inline std::vector<CurvePoint> read_curve(const std::string& path) {
    std::vector<CurvePoint> out;
    for (const auto& r : read_csv_rows(path)) {
        if (r.size() < 2) throw ConfigError(path + ": short row");
        out.push_back({std::stoull(r[0]), std::stod(r[1])});
    }
    return out;
}

namespace detail {

inline std::string rgb(double r, double g, double b) {
    char buf[16];
    auto c = [](double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); };
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c(r), c(g), c(b));
    return buf;
}

// Piecewise-linear purple -> teal -> yellow for t in [0, 1].
inline std::string heat(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const double stops[3][3] = {{0.27, 0.00, 0.33}, {0.13, 0.57, 0.55}, {0.99, 0.91, 0.14}};
    const int i = t < 0.5 ? 0 : 1;
    const double f = t < 0.5 ? t * 2.0 : (t - 0.5) * 2.0;
    return rgb(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]), stops[i][1] + f * (stops[i + 1][1] - stops[i][1]),
               stops[i][2] + f * (stops[i + 1][2] - stops[i][2]));
}

// Blue for early timesteps through to purple for late ones.
inline std::string early_late(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return rgb(0.15 + 0.45 * t, 0.35 * (1.0 - t), 0.85 - 0.25 * t);
}

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

// Maps a world box onto a square canvas with a margin; y points up.
struct Frame {
    Box world;
    double size = 400.0, margin = 20.0;

    double scale() const { return (size - 2 * margin) / std::max(world.width(), world.height()); }
    double x(double wx) const { return margin + (wx - world.lo.x) * scale(); }
    double y(double wy) const { return size - margin - (wy - world.lo.y) * scale(); }
};

inline void rect(std::ostream& os, const Frame& f, const Box& b, const std::string& fill, const char* cls,
                 const std::string& extra = {}) {
    os << "<rect class=\"" << cls << "\" x=\"" << num(f.x(b.lo.x)) << "\" y=\"" << num(f.y(b.hi.y)) << "\" width=\""
       << num(b.width() * f.scale()) << "\" height=\"" << num(b.height() * f.scale()) << "\" fill=\"" << fill << '"'
       << extra << "/>\n";
}

inline void open(std::ostream& os, double w, double h) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w) << "\" height=\"" << num(h)
       << "\" viewBox=\"0 0 " << num(w) << ' ' << num(h) << "\">\n";
}

} // namespace detail

/// Final positions over the arena, coloured by the timestep at which they
/// were evaluated. One circle per point; walls drawn on top of the arena.
inline std::string coverage_svg(const EnvSpec& env, const std::vector<CoveragePoint>& points) {
    std::ostringstream os;
    const detail::Frame f{env.arena};
    detail::open(os, f.size, f.size);
    detail::rect(os, f, env.arena, "#ffffff", "arena", " stroke=\"#000000\"");
    for (const Box& w : env.walls) detail::rect(os, f, w, "#222222", "wall");
    if (env.goal)
        os << "<rect class=\"goal\" x=\"" << detail::num(f.x(env.goal->x) - 5) << "\" y=\""
           << detail::num(f.y(env.goal->y) - 5) << "\" width=\"10\" height=\"10\" fill=\"none\" stroke=\"#d62728\"/>\n";
    std::uint64_t t_max = 1;
    for (const auto& p : points) t_max = std::max(t_max, p.timestep);
    for (const auto& p : points)
        os << "<circle class=\"dot\" cx=\"" << detail::num(f.x(p.bd.x)) << "\" cy=\"" << detail::num(f.y(p.bd.y))
           << "\" r=\"2.5\" fill=\""
           << detail::early_late(static_cast<double>(p.timestep) / static_cast<double>(t_max)) << "\"/>\n";
    os << "</svg>\n";
    return os.str();
}

/// m x m heatmap of cell fitness; yellow is high, purple low, grey empty.
inline std::string grid_svg(const GridSpec& spec, const std::vector<std::optional<double>>& fitness) {
    if (fitness.size() != spec.cell_count()) throw DimensionError("grid_svg: one entry per cell expected");
    std::ostringstream os;
    const detail::Frame f{spec.bd_box};
    detail::open(os, f.size, f.size);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& v : fitness)
        if (v) lo = std::min(lo, *v), hi = std::max(hi, *v);
    const auto m = static_cast<std::size_t>(spec.meshes_per_dim);
    const double cw = spec.bd_box.width() / static_cast<double>(m);
    const double ch = spec.bd_box.height() / static_cast<double>(m);
    for (std::size_t i = 0; i < fitness.size(); ++i) {
        const double x0 = spec.bd_box.lo.x + static_cast<double>(i % m) * cw;
        const double y0 = spec.bd_box.lo.y + static_cast<double>(i / m) * ch;
        const Box cell{{x0, y0}, {x0 + cw, y0 + ch}};
        std::string fill = "#cccccc";
        if (fitness[i]) fill = detail::heat(hi > lo ? (*fitness[i] - lo) / (hi - lo) : 1.0);
        detail::rect(os, f, cell, fill, "cell", " stroke=\"#ffffff\"");
    }
    os << "</svg>\n";
    return os.str();
}

template <typename Scalar>
std::string grid_svg(const ElitesGrid<Scalar>& grid) {
    std::vector<std::optional<double>> fit(grid.spec().cell_count());
    for (std::size_t i = 0; i < fit.size(); ++i)
        if (grid.cell(i)) fit[i] = grid.cell(i)->fitness;
    return grid_svg(grid.spec(), fit);
}

/// Step-function value of a curve at time t: the last evaluation at or before t.
inline std::optional<double> curve_at(const std::vector<CurvePoint>& c, std::uint64_t t) {
    std::optional<double> v;
    for (const auto& p : c) {
        if (p.timestep > t) break;
        v = p.best_fitness;
    }
    return v;
}

/// Best fitness against timesteps. With several curves the median is drawn
/// with a shaded band between the first and third quartiles.
inline std::string curve_svg(const std::vector<std::vector<CurvePoint>>& curves) {
    std::ostringstream os;
    const double w = 480, h = 320, ml = 60, mr = 15, mt = 15, mb = 40;
    detail::open(os, w, h);
    std::vector<std::uint64_t> ts;
    for (const auto& c : curves)
        for (const auto& p : c) ts.push_back(p.timestep);
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());

    struct Row {
        std::uint64_t t;
        double q1, med, q3;
    };
    std::vector<Row> rows;
    for (auto t : ts) {
        std::vector<double> vals;
        for (const auto& c : curves)
            if (auto v = curve_at(c, t)) vals.push_back(*v);
        if (vals.empty()) continue;
        rows.push_back({t, quantile(vals, 0.25), quantile(vals, 0.5), quantile(vals, 0.75)});
    }
    os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << w - ml - mr << "\" height=\"" << h - mt - mb
       << "\" fill=\"none\" stroke=\"#000000\"/>\n";
    if (!rows.empty()) {
        double lo = rows.front().q1, hi = rows.front().q3;
        for (const auto& r : rows) lo = std::min(lo, r.q1), hi = std::max(hi, r.q3);
        if (hi == lo) hi = lo + 1.0;
        const double t_hi = static_cast<double>(std::max<std::uint64_t>(rows.back().t, 1));
        auto X = [&](std::uint64_t t) { return ml + static_cast<double>(t) / t_hi * (w - ml - mr); };
        auto Y = [&](double v) { return h - mb - (v - lo) / (hi - lo) * (h - mt - mb); };
        if (curves.size() > 1) {
            os << "<polygon class=\"band\" fill=\"#1f77b4\" fill-opacity=\"0.25\" points=\"";
            for (const auto& r : rows) os << detail::num(X(r.t)) << ',' << detail::num(Y(r.q3)) << ' ';
            for (auto it = rows.rbegin(); it != rows.rend(); ++it)
                os << detail::num(X(it->t)) << ',' << detail::num(Y(it->q1)) << ' ';
            os << "\"/>\n";
        }
        os << "<polyline class=\"median\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
        for (const auto& r : rows) os << detail::num(X(r.t)) << ',' << detail::num(Y(r.med)) << ' ';
        os << "\"/>\n";
        os << "<text x=\"" << ml << "\" y=\"" << h - 10 << "\" font-size=\"11\">0</text>\n";
        os << "<text x=\"" << w - mr - 60 << "\" y=\"" << h - 10 << "\" font-size=\"11\">" << detail::num(t_hi)
           << " steps</text>\n";
        os << "<text x=\"4\" y=\"" << mt + 10 << "\" font-size=\"11\">" << detail::num(hi) << "</text>\n";
        os << "<text x=\"4\" y=\"" << h - mb << "\" font-size=\"11\">" << detail::num(lo) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace qdpg::svg
