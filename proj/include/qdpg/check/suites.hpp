#pragma once

// Property suites shared by the acceptance runner and `qdpg selftest`.
// Each suite draws its own random instances from a seed and reports the
// worst observed error next to its threshold.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "../elites_grid.hpp"
#include "../pg_update.hpp"
#include "../qdpg_loop.hpp"
#include "oracles.hpp"

namespace qdpg::check {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

namespace detail {

inline std::string fmt(const char* f, double a, double b = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

inline std::vector<double> uniform_vector(std::size_t n, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

inline NetSpec random_spec(Rng& rng, std::size_t in, std::size_t out, bool tanh_head) {
    std::uniform_int_distribution<std::size_t> width(1, 12);
    std::uniform_int_distribution<int> depth(0, 2);
    std::vector<std::size_t> hidden(static_cast<std::size_t>(depth(rng)));
    for (auto& h : hidden) h = width(rng);
    if (tanh_head) return NetSpec(in, hidden, out, OutputActivation::scaled_tanh, 0.05 + 2.0 * std::uniform_real_distribution<double>(0, 1)(rng));
    return NetSpec(in, hidden, out);
}

// Normalisation floor for relative errors: entries below a thousandth of
// the largest reference component are compared against that floor.
inline double gradient_floor(const std::vector<double>& reference) {
    double m = 0.0;
    for (double v : reference) m = std::max(m, std::abs(v));
    return std::max(1e-3 * m, 1e-12);
}

constexpr double kKinkMargin = 1e-4;
constexpr double kStep = 1e-6;

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace detail

// ---------------------------------------------------------------------------
// Diversity gradient identity

/// For random populations of size K whose nearest-neighbour structure is
/// stable under small moves, the finite-difference gradient of population
/// diversity with respect to one solution's descriptor equals that of its
/// novelty against the neighbour set built from the population.
inline SuiteResult diversity_identity_suite(std::uint64_t seed, int populations = 100,
                                            std::vector<std::size_t> sizes = {3, 5, 8}, double tolerance = 1e-6) {
    SuiteResult r{"diversity gradient identity", true, {}};
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double worst = 0.0;
    int checked = 0;
    for (std::size_t K : sizes) {
        for (int p = 0; p < populations; ++p) {
            std::vector<Vec2> pts(K);
            do {
                for (auto& q : pts) q = {u(rng), u(rng)};
            } while (!nn_structure_is_stable(pts, 1e-3));
            std::uniform_int_distribution<std::size_t> pick(0, K - 1);
            const std::size_t self = pick(rng);
            const auto neighbors = novelty_neighbors(pts, self);

            const std::vector<double> at{pts[self].x, pts[self].y};
            auto diversity = [&](const std::vector<double>& v) {
                auto moved = pts;
                moved[self] = {v[0], v[1]};
                return population_diversity(std::span<const Vec2>(moved));
            };
            auto novelty = [&](const std::vector<double>& v) { return novelty_of({v[0], v[1]}, pts, neighbors); };
            const auto gd = central_difference(diversity, at, detail::kStep);
            const auto gn = central_difference(novelty, at, detail::kStep);
            worst = std::max(worst, max_relative_error(gd, gn, detail::gradient_floor(gn)));
            // The library's diversity must also agree with the brute-force one.
            if (std::abs(population_diversity(std::span<const Vec2>(pts)) - diversity_of(pts)) > 1e-12) {
                r.passed = false;
                r.detail = "population_diversity disagrees with the oracle";
                return r;
            }
            ++checked;
        }
    }
    r.passed = worst < tolerance;
    r.detail = detail::fmt("%.0f populations, max rel err %.3g", checked, worst) + detail::fmt(" (< %.0e)", tolerance);
    return r;
}

// ---------------------------------------------------------------------------
// Gradients

struct GradientCase {
    std::string name;
    double worst = 0.0;
    int instances = 0;
};

namespace detail {

inline bool clear_of_kinks(const NetSpec& spec, const std::vector<double>& params, const std::vector<double>& input) {
    return dense_forward(spec, params, input).min_abs_preactivation > kKinkMargin;
}

inline Batch<double> random_batch(Rng& rng, Eigen::Index n) {
    Batch<double> b;
    std::uniform_real_distribution<double> pos(0.0, 1.0), act(-0.05, 0.05), rew(-1.5, 0.0);
    b.states.resize(2, n);
    b.actions.resize(2, n);
    b.next_states.resize(2, n);
    b.env_rewards.resize(1, n);
    b.descriptors.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        b.states.col(i) << pos(rng), pos(rng);
        b.actions.col(i) << act(rng), act(rng);
        b.next_states.col(i) << pos(rng), pos(rng);
        b.env_rewards(0, i) = rew(rng);
    }
    b.rewards = b.env_rewards;
    return b;
}

inline std::vector<double> column(const Matrix<double>& m, Eigen::Index j) {
    return to_std(m.col(j));
}

} // namespace detail

inline GradientCase check_grad_params(std::uint64_t seed, int instances) {
    GradientCase c{"grad_params", 0.0, 0};
    Rng rng(seed);
    while (c.instances < instances) {
        const NetSpec spec = detail::random_spec(rng, 1 + rng() % 4, 1 + rng() % 3, rng() % 2 == 0);
        const auto params = to_std(init_params<double>(spec, rng));
        const auto input = detail::uniform_vector(spec.input_dim(), -1.0, 1.0, rng);
        const auto cot = detail::uniform_vector(spec.output_dim(), -1.0, 1.0, rng);
        if (!detail::clear_of_kinks(spec, params, input)) continue;
        auto f = [&](const std::vector<double>& p) {
            const auto y = dense_forward(spec, p, input).output;
            double s = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) s += cot[i] * y[i];
            return s;
        };
        const auto fd = central_difference(f, params, detail::kStep);
        const auto g = to_std(grad_params<double>(spec, to_eigen(params), to_eigen(input), to_eigen(cot)));
        c.worst = std::max(c.worst, max_relative_error(g, fd, detail::gradient_floor(fd)));
        ++c.instances;
    }
    return c;
}

inline GradientCase check_grad_input(std::uint64_t seed, int instances) {
    GradientCase c{"grad_input", 0.0, 0};
    Rng rng(seed);
    while (c.instances < instances) {
        const NetSpec spec = detail::random_spec(rng, 1 + rng() % 4, 1 + rng() % 3, rng() % 2 == 0);
        const auto params = to_std(init_params<double>(spec, rng));
        const auto input = detail::uniform_vector(spec.input_dim(), -1.0, 1.0, rng);
        const auto cot = detail::uniform_vector(spec.output_dim(), -1.0, 1.0, rng);
        if (!detail::clear_of_kinks(spec, params, input)) continue;
        auto f = [&](const std::vector<double>& x) {
            const auto y = dense_forward(spec, params, x).output;
            double s = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) s += cot[i] * y[i];
            return s;
        };
        const auto fd = central_difference(f, input, detail::kStep);
        const auto g = to_std(grad_input<double>(spec, to_eigen(params), to_eigen(input), to_eigen(cot)));
        c.worst = std::max(c.worst, max_relative_error(g, fd, detail::gradient_floor(fd)));
        ++c.instances;
    }
    return c;
}

/// Critic regression loss mean_b sum_i (Q_i(s, a) - y)^2 with y held fixed,
/// differentiated with respect to the first critic.
inline GradientCase check_critic_loss(std::uint64_t seed, int instances, Eigen::Index batch = 8) {
    GradientCase c{"critic loss", 0.0, 0};
    Rng rng(seed);
    const NetSpec spec(4, {16, 8}, 1);
    UpdateConfig config;
    while (c.instances < instances) {
        auto pair = CriticPair<double>::create(spec, Objective::quality, rng);
        const auto b = detail::random_batch(rng, batch);
        Matrix<double> y(1, batch);
        for (Eigen::Index j = 0; j < batch; ++j) y(0, j) = std::uniform_real_distribution<double>(-2.0, 0.0)(rng);
        Matrix<double> sa(4, batch);
        sa << b.states, config.critic_action_scale() * b.actions;
        const auto p1 = to_std(pair.q1);
        bool clear = true;
        for (Eigen::Index j = 0; j < batch && clear; ++j) clear = detail::clear_of_kinks(spec, p1, detail::column(sa, j));
        if (!clear) continue;

        auto loss = [&](const std::vector<double>& p) {
            double total = 0.0;
            const auto p2 = to_std(pair.q2);
            for (Eigen::Index j = 0; j < batch; ++j) {
                const auto in = detail::column(sa, j);
                const double e1 = dense_forward(spec, p, in).output[0] - y(0, j);
                const double e2 = dense_forward(spec, p2, in).output[0] - y(0, j);
                total += e1 * e1 + e2 * e2;
            }
            return total / static_cast<double>(batch);
        };
        Workspace<double> ws;
        PairGradient<double> g;
        critic_gradient(pair, b, y, config, ws, g);
        const auto fd = central_difference(loss, p1, detail::kStep);
        c.worst = std::max(c.worst, max_relative_error(to_std(g.g1), fd, detail::gradient_floor(fd)));
        if (std::abs(g.loss - loss(p1)) > 1e-9 * std::max(1.0, std::abs(g.loss))) c.worst = std::max(c.worst, 1.0);
        ++c.instances;
    }
    return c;
}

/// Actor objective mean_b Q1(s, pi(s)), differentiated with respect to the
/// actor parameters through the critic.
inline GradientCase check_actor_objective(std::uint64_t seed, int instances, Eigen::Index batch = 8) {
    GradientCase c{"actor objective", 0.0, 0};
    Rng rng(seed);
    const NetSpec actor(2, {16, 8}, 2, OutputActivation::scaled_tanh, 0.05);
    const NetSpec critic(4, {16, 8}, 1);
    UpdateConfig config;
    while (c.instances < instances) {
        config.actor_reduction = c.instances % 2 == 0 ? LossReduction::sum : LossReduction::mean;
        auto pair = CriticPair<double>::create(critic, Objective::quality, rng);
        const auto theta = to_std(init_params<double>(actor, rng));
        const auto q1 = to_std(pair.q1);
        const auto b = detail::random_batch(rng, batch);
        bool clear = true;
        for (Eigen::Index j = 0; j < batch && clear; ++j) {
            const auto s = detail::column(b.states, j);
            if (!detail::clear_of_kinks(actor, theta, s)) clear = false;
            const auto a = dense_forward(actor, theta, s).output;
            const double k = config.critic_action_scale();
            if (clear && !detail::clear_of_kinks(critic, q1, {s[0], s[1], k * a[0], k * a[1]})) clear = false;
        }
        if (!clear) continue;

        auto objective = [&](const std::vector<double>& p) {
            double total = 0.0;
            for (Eigen::Index j = 0; j < batch; ++j) {
                const auto s = detail::column(b.states, j);
                const auto a = dense_forward(actor, p, s).output;
                const double k = config.critic_action_scale();
                total += dense_forward(critic, q1, {s[0], s[1], k * a[0], k * a[1]}).output[0];
            }
            return config.actor_reduction == LossReduction::mean ? total / static_cast<double>(batch) : total;
        };
        Workspace<double> ws;
        FlatParams<double> g;
        actor_gradient(actor, to_eigen(theta), pair, b.states, config, ws, g);
        const auto fd = central_difference(objective, theta, detail::kStep);
        c.worst = std::max(c.worst, max_relative_error(to_std(g), fd, detail::gradient_floor(fd)));
        ++c.instances;
    }
    return c;
}

inline SuiteResult gradient_suite(std::uint64_t seed, int instances = 100, double tolerance = 1e-5) {
    SuiteResult r{"gradient oracle", true, {}};
    const GradientCase cases[] = {check_grad_params(seed, instances), check_grad_input(seed + 1, instances),
                                  check_critic_loss(seed + 2, instances), check_actor_objective(seed + 3, instances)};
    std::ostringstream os;
    for (const auto& c : cases) {
        if (!(c.worst < tolerance)) r.passed = false;
        os << c.name << ' ' << detail::fmt("%.2g", c.worst) << "; ";
    }
    os << "max rel err over " << instances << " instances each (< " << tolerance << ")";
    r.detail = os.str();
    return r;
}

// ---------------------------------------------------------------------------
// Nearest neighbours

/// Archive queries against a linear scan: ids, distances and rewards must
/// match exactly. Layouts mix uniform, clustered and duplicated points, with
/// archives that have wrapped around their capacity and unindexed tails.
inline SuiteResult knn_suite(std::uint64_t seed, std::size_t queries = 100000, std::size_t max_size = 10000) {
    SuiteResult r{"knn oracle", true, {}};
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> blob(0.0, 0.01);
    const std::size_t archives = 10;
    std::size_t done = 0, mismatches = 0;
    for (std::size_t a = 0; a < archives; ++a) {
        ArchiveConfig cfg;
        cfg.capacity = a == 0 ? max_size : 1 + rng() % max_size;
        cfg.k = 1 + rng() % 15;
        cfg.reward_form = a % 2 == 0 ? RewardForm::mean : RewardForm::sum;
        DescriptorArchive archive(cfg);
        const std::size_t pushes = cfg.capacity + rng() % (cfg.capacity + 1);
        std::vector<Vec2> centers(5);
        for (auto& c : centers) c = {u(rng), u(rng)};
        for (std::size_t i = 0; i < pushes; ++i) {
            Vec2 p;
            switch (rng() % 4) {
            case 0: p = {u(rng), u(rng)}; break;
            case 1: p = centers[rng() % centers.size()]; break; // exact duplicates
            default: {
                const Vec2 c = centers[rng() % centers.size()];
                p = {c.x + blob(rng), c.y + blob(rng)};
            }
            }
            archive.push(p);
        }
        if (a % 3 != 0) archive.reindex();
        const auto entries = archive.entries();
        const std::size_t n = a + 1 == archives ? queries - done : queries / archives;
        std::vector<Neighbor> scratch;
        for (std::size_t q = 0; q < n; ++q) {
            Vec2 query;
            if (q % 5 == 0)
                query = entries[rng() % entries.size()].descriptor;
            else
                query = {1.2 * u(rng) - 0.1, 1.2 * u(rng) - 0.1};
            const std::size_t k = 1 + rng() % 20;
            const auto got = archive.knn(query, k, scratch);
            const auto want = brute_knn(entries, query, k);
            bool same = got.size() == want.size();
            for (std::size_t i = 0; same && i < got.size(); ++i)
                same = got[i].id == want[i].id && got[i].distance == want[i].distance;
            if (archive.diversity_reward(query) != brute_diversity_reward(entries, query, cfg.k, cfg.reward_form))
                same = false;
            if (!same) ++mismatches;
            ++done;
        }
    }
    r.passed = mismatches == 0;
    r.detail = std::to_string(done) + " queries, " + std::to_string(mismatches) + " mismatches";
    return r;
}

// ---------------------------------------------------------------------------
// Grid insertion

inline SuiteResult insertion_suite(std::uint64_t seed, std::size_t draws = 100000, double p_min = 0.01) {
    SuiteResult r{"insertion laws", true, {}};
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> fit(0.0, 10.0);
    const NetSpec policy(2, {3}, 2, OutputActivation::scaled_tanh, 0.05);
    GridSpec gs;
    std::vector<std::string> failures;

    // Elitism: a cell's fitness only ever rises, strictly, once occupied.
    ElitesGrid<double> grid(gs, policy);
    std::vector<std::optional<double>> seen(gs.cell_count());
    for (int i = 0; i < 20000; ++i) {
        Solution<double> s{init_params<double>(policy, rng), std::round(fit(rng)), {u(rng), u(rng)}};
        const std::size_t cell = cell_index(gs, s.bd);
        const std::uint64_t before = grid.content_hash();
        const auto outcome = grid.try_insert(s);
        const double now = grid.cell(cell)->fitness;
        if (seen[cell]) {
            if (outcome == InsertOutcome::replaced && !(now > *seen[cell])) failures.push_back("non-increasing replace");
            if (outcome == InsertOutcome::rejected) {
                if (grid.content_hash() != before) failures.push_back("rejection changed the grid");
                if (s.fitness > *seen[cell]) failures.push_back("better candidate rejected");
            }
            if (outcome == InsertOutcome::inserted) failures.push_back("occupied cell reported inserted");
        } else if (outcome != InsertOutcome::inserted) {
            failures.push_back("empty cell not filled");
        }
        seen[cell] = now;
    }

    // Ties keep the incumbent.
    for (std::size_t cell : grid.occupied_cells()) {
        Solution<double> tie = *grid.cell(cell);
        tie.params.setConstant(0.5);
        const std::uint64_t before = grid.content_hash();
        if (grid.try_insert(tie) != InsertOutcome::rejected || grid.content_hash() != before)
            failures.push_back("tie replaced the incumbent");
    }

    // Uniform parent selection over a partially filled grid.
    ElitesGrid<double> sparse(gs, policy);
    for (std::size_t cell : {0u, 3u, 7u, 12u, 13u, 19u, 24u})
        sparse.try_insert({init_params<double>(policy, rng), 0.0, cell_center(gs, cell)});
    const auto occ = sparse.occupied_cells();
    std::vector<std::size_t> counts(occ.size(), 0);
    std::size_t drawn = 0;
    while (drawn < draws) {
        const std::size_t n = std::min<std::size_t>(1000, draws - drawn);
        for (const auto& p : sparse.sample_parents(n, rng)) {
            const auto at = std::find(occ.begin(), occ.end(), cell_index(gs, p.bd));
            ++counts[static_cast<std::size_t>(at - occ.begin())];
        }
        drawn += n;
    }
    const double p = chi_squared_uniform_p(counts);
    if (!(p > p_min)) failures.push_back("parent sampling not uniform");

    r.passed = failures.empty();
    r.detail = detail::fmt("chi-squared p = %.3g over %.0f draws", p, static_cast<double>(draws));
    if (!failures.empty()) r.detail += "; first failure: " + failures.front();
    return r;
}

// ---------------------------------------------------------------------------
// Episode versus state descriptor distances

/// Pearson correlation between ||xi(a) - xi(b)|| and sum_t ||psi(s_t^a) - psi(s_t^b)||
/// over random deterministic policy pairs.
inline double compatibility_correlation(const EnvSpec& env, std::uint64_t seed, int pairs) {
    Rng rng(seed);
    const NetSpec policy(2, {64, 32}, 2, OutputActivation::scaled_tanh, env.action_bound);
    std::vector<double> episode, summed;
    for (int i = 0; i < pairs; ++i) {
        const auto a = rollout(env, policy, init_params<double>(policy, rng), 0.0);
        const auto b = rollout(env, policy, init_params<double>(policy, rng), 0.0);
        double s = 0.0;
        for (std::size_t t = 0; t < a.transitions.size(); ++t)
            s += distance(a.transitions[t].state_descriptor, b.transitions[t].state_descriptor);
        episode.push_back(distance(a.behavior, b.behavior));
        summed.push_back(s);
    }
    return pearson(episode, summed);
}

inline SuiteResult compatibility_suite(const EnvSpec& env, std::uint64_t seed, int pairs = 100) {
    const double rho = compatibility_correlation(env, seed, pairs);
    return {"descriptor compatibility", rho > 0.0,
            detail::fmt("pearson %.3f over %.0f policy pairs (> 0)", rho, pairs)};
}

// ---------------------------------------------------------------------------
// Determinism

inline bool same_artifacts(const std::filesystem::path& a, const std::filesystem::path& b, std::string* which) {
    for (const char* f : {"grid.csv", "curve.csv", "grid.params.bin", "archive.csv", "coverage.csv"}) {
        const auto x = detail::slurp(a / f);
        if (x.empty() || x != detail::slurp(b / f)) {
            if (which) *which = f;
            return false;
        }
    }
    return true;
}

/// Two single-threaded runs must agree byte for byte, and so must parallel
/// runs with one worker and with the configured population.
inline SuiteResult determinism_suite(RunConfig base, const std::filesystem::path& work, std::uint64_t max_steps = 4000) {
    SuiteResult r{"determinism", true, {}};
    base.max_steps = max_steps;
    base.eval_interval = 1000;
    std::filesystem::remove_all(work);

    auto run_into = [&](RunConfig c, ExecutionMode mode, std::size_t population, const char* name) {
        c.execution = mode;
        c.population = population;
        if (population % 2 != 0 && c.variant == Variant::qdpg) c.variant = Variant::dpg_only;
        const auto dir = work / name;
        run<Real>(c, dir);
        return dir;
    };
    const std::size_t n = base.population;
    const auto s1 = run_into(base, ExecutionMode::single_threaded, n, "single_a");
    const auto s2 = run_into(base, ExecutionMode::single_threaded, n, "single_b");
    const auto pn = run_into(base, ExecutionMode::parallel, n, "parallel_n");
    const auto o1 = run_into(base, ExecutionMode::single_threaded, 1, "single_one");
    const auto p1 = run_into(base, ExecutionMode::parallel, 1, "parallel_one");

    std::string which;
    std::vector<std::string> failures;
    if (!same_artifacts(s1, s2, &which)) failures.push_back("repeat single-threaded run differs in " + which);
    if (!same_artifacts(o1, p1, &which)) failures.push_back("N=1 parallel differs in " + which);
    if (!same_artifacts(s1, pn, &which)) failures.push_back("N=" + std::to_string(n) + " parallel differs in " + which);
    r.passed = failures.empty();
    r.detail = r.passed ? "grid, curve, coverage, archive and parameter blobs identical across 5 runs"
                        : failures.front();
    return r;
}

} // namespace qdpg::check
