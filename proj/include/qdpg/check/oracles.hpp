#pragma once

// Independent reference implementations used by the tests, the acceptance
// runner and `qdpg selftest`. Nothing here is used by the optimizer itself;
// each routine recomputes a quantity the slow, obvious way.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>

#include "../common.hpp"
#include "../diffnet.hpp"
#include "../env_maze.hpp"
#include "../novelty_archive.hpp"

namespace qdpg::check {

// ---------------------------------------------------------------------------
// Networks

struct OracleForward {
    std::vector<double> output;
    double min_abs_preactivation = std::numeric_limits<double>::infinity(); // hidden layers only
};

/// Plain loops over the documented parameter layout: per layer a fan_out x
/// fan_in column-major weight block followed by fan_out biases.
inline OracleForward dense_forward(const NetSpec& spec, const std::vector<double>& params,
                                   const std::vector<double>& input) {
    OracleForward out;
    std::vector<double> x = input;
    std::size_t offset = 0;
    const auto& layers = spec.layers();
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto fan_in = static_cast<std::size_t>(layers[li].fan_in);
        const auto fan_out = static_cast<std::size_t>(layers[li].fan_out);
        std::vector<double> y(fan_out, 0.0);
        for (std::size_t o = 0; o < fan_out; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < fan_in; ++i) acc += params[offset + i * fan_out + o] * x[i];
            y[o] = acc + params[offset + fan_in * fan_out + o];
        }
        offset += (fan_in + 1) * fan_out;
        const bool last = li + 1 == layers.size();
        for (double& v : y) {
            if (!last) {
                out.min_abs_preactivation = std::min(out.min_abs_preactivation, std::abs(v));
                v = v > 0.0 ? v : 0.0;
            } else if (spec.output_activation() == OutputActivation::scaled_tanh) {
                v = spec.output_scale() * std::tanh(v);
            }
        }
        x = std::move(y);
    }
    out.output = std::move(x);
    return out;
}

/// Central differences of f at x with step h.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps entries
/// that are zero up to rounding from dominating.
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

template <typename Derived>
std::vector<double> to_std(const Eigen::DenseBase<Derived>& v) {
    std::vector<double> out(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(v(i));
    return out;
}

inline Vector<double> to_eigen(const std::vector<double>& v) {
    return Eigen::Map<const Vector<double>>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// ---------------------------------------------------------------------------
// Environment

/// Moves from `from` by a clipped action in `substeps` equal increments per
/// axis (x first, then y). The first increment that would enter a wall
/// interior or leave the arena is bisected down to the contact point.
inline Vec2 substepped_move(const EnvSpec& spec, Vec2 from, Vec2 action, int substeps = 1000) {
    const Vec2 a = clip_action(spec, action);
    auto blocked = [&](Vec2 p) { return !spec.arena.contains(p) || spec.inside_wall(p); };
    auto advance = [&](Vec2 p, Vec2 delta) {
        const Vec2 inc = (1.0 / substeps) * delta;
        for (int i = 0; i < substeps; ++i) {
            const Vec2 next = p + inc;
            if (!blocked(next)) {
                p = next;
                continue;
            }
            double lo = 0.0, hi = 1.0; // fraction of inc that stays free / blocked
            for (int it = 0; it < 200; ++it) {
                const double mid = 0.5 * (lo + hi);
                if (blocked(p + mid * inc))
                    hi = mid;
                else
                    lo = mid;
            }
            return p + lo * inc;
        }
        return p;
    };
    Vec2 p = advance(from, {a.x, 0.0});
    p = advance(p, {0.0, a.y});
    return p;
}

// ---------------------------------------------------------------------------
// Nearest neighbours

/// Sort of every entry by (distance, insertion id); the first k.
inline std::vector<Neighbor> brute_knn(const std::vector<Neighbor>& entries, Vec2 query, std::size_t k) {
    std::vector<Neighbor> all;
    all.reserve(entries.size());
    for (const auto& e : entries) {
        const double dx = query.x - e.descriptor.x;
        const double dy = query.y - e.descriptor.y;
        all.push_back({e.descriptor, std::sqrt(dx * dx + dy * dy), e.id});
    }
    std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
        return a.distance != b.distance ? a.distance < b.distance : a.id < b.id;
    });
    all.resize(std::min(k, all.size()));
    return all;
}

inline double brute_diversity_reward(const std::vector<Neighbor>& entries, Vec2 query, std::size_t k,
                                     RewardForm form) {
    if (entries.empty()) return 0.0;
    const auto nn = brute_knn(entries, query, k);
    double sum = 0.0;
    for (const auto& n : nn) sum += n.distance;
    return form == RewardForm::mean ? sum / static_cast<double>(nn.size()) : sum;
}

// ---------------------------------------------------------------------------
// Population diversity and the novelty decomposition

inline std::size_t nearest_other(const std::vector<Vec2>& pts, std::size_t i) {
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t k = 0; k < pts.size(); ++k)
        if (k != i && distance(pts[i], pts[k]) < distance(pts[i], pts[best])) best = k;
    return best;
}

inline double diversity_of(const std::vector<Vec2>& pts) {
    double total = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) total += distance(pts[i], pts[nearest_other(pts, i)]);
    return total;
}

/// Neighbour list of point `self`: its own nearest neighbour, then every
/// point whose nearest neighbour is `self`. The first entry may repeat.
inline std::vector<std::size_t> novelty_neighbors(const std::vector<Vec2>& pts, std::size_t self) {
    std::vector<std::size_t> out{nearest_other(pts, self)};
    for (std::size_t j = 0; j < pts.size(); ++j)
        if (j != self && nearest_other(pts, j) == self) out.push_back(j);
    return out;
}

inline double novelty_of(Vec2 p, const std::vector<Vec2>& pts, const std::vector<std::size_t>& neighbors) {
    double total = 0.0;
    for (std::size_t j : neighbors) total += distance(p, pts[j]);
    return total;
}

/// Every point's nearest-neighbour gap beats its runner-up by `margin`, so
/// small moves of any point keep the neighbour structure intact.
inline bool nn_structure_is_stable(const std::vector<Vec2>& pts, double margin) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
        std::vector<double> d;
        for (std::size_t k = 0; k < pts.size(); ++k)
            if (k != i) d.push_back(distance(pts[i], pts[k]));
        std::sort(d.begin(), d.end());
        if (d[0] < margin) return false;
        if (d.size() > 1 && d[1] - d[0] < margin) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Statistics

/// Upper tail probability of Pearson's chi-squared statistic for counts
/// against a uniform expectation.
inline double chi_squared_uniform_p(const std::vector<std::size_t>& counts) {
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    const double expected = total / static_cast<double>(counts.size());
    double stat = 0.0;
    for (auto c : counts) stat += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
    boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
    return boost::math::cdf(boost::math::complement(dist, stat));
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

} // namespace qdpg::check
