#pragma once

// Generational QD-PG loop and its ablations.
//
//   initialize: N random policies, one noisy episode each.
//   generation: sample N parents -> mutate (quality / diversity / summed
//               reward, per variant) -> one noisy episode per mutant ->
//               transitions to the replay buffer, descriptors to the archive,
//               mutants to the grid.
//
// td3_baseline keeps one persistent agent instead of a grid population; its
// episodes are still offered to a grid so coverage is measured the same way.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "config.hpp"
#include "diffnet.hpp"
#include "elites_grid.hpp"
#include "env_maze.hpp"
#include "novelty_archive.hpp"
#include "pg_update.hpp"
#include "replay.hpp"

namespace qdpg {

using Real = float; // training precision

// Sub-stream ids for derive_seed.
namespace streams {
inline constexpr std::uint64_t critics = 1;
inline constexpr std::uint64_t selection = 2;
inline constexpr std::uint64_t init_params = 1'000;
inline constexpr std::uint64_t init_noise = 2'000;
inline constexpr std::uint64_t mutation = 1ULL << 32;
inline constexpr std::uint64_t evaluation = 2ULL << 32;
} // namespace streams

template <typename Scalar>
struct RunState {
    RunConfig config;
    NetSpec policy_spec;
    NetSpec critic_spec;
    ElitesGrid<Scalar> grid;
    DescriptorArchive archive;
    ReplayBuffer buffer;
    SharedCritics<Scalar> critics;
    Rng selection_rng;

    std::optional<Solution<Scalar>> agent; // td3_baseline only

    std::uint64_t total_steps = 0;       // noisy training steps, the budget counter
    std::uint64_t eval_steps = 0;        // deterministic evaluation steps, reported separately
    std::uint64_t last_generation_steps = 0;
    std::uint64_t generation_index = 0;
    std::uint64_t gradient_steps_total = 0;
    std::uint64_t archive_accepted = 0;
    std::uint64_t archive_filtered = 0;
    UpdateStats last_stats;

    RunState(const RunConfig& c)
        : config(c),
          policy_spec(c.policy_spec()),
          critic_spec(c.critic_spec()),
          grid(c.grid, c.policy_spec()),
          archive(c.archive),
          buffer(c.replay_capacity) {}
};

struct GenerationRecord {
    std::uint64_t generation = 0;
    std::uint64_t total_steps = 0;
    std::uint64_t gradient_steps = 0;
    std::size_t inserted = 0, replaced = 0, rejected = 0;
    std::vector<Objective> objectives;
    UpdateStats stats;
};

/// Worker objectives for one generation.
inline std::vector<Objective> assign_objectives(const RunConfig& c, Rng& rng) {
    const std::size_t n = c.population;
    switch (c.variant) {
    case Variant::qdpg_sum: return std::vector<Objective>(n, Objective::sum);
    case Variant::dpg_only: return std::vector<Objective>(n, Objective::diversity);
    case Variant::qpg_only:
    case Variant::td3_baseline: return std::vector<Objective>(n, Objective::quality);
    case Variant::qdpg: break;
    }
    std::vector<Objective> out(n, Objective::quality);
    std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n / 2), Objective::diversity);
    if (c.assignment == Assignment::random) std::shuffle(out.begin(), out.end(), rng);
    return out;
}

/// Noisy episodes for a batch of policies; the arithmetic does not depend
/// on the execution mode.
template <typename Scalar>
std::vector<Episode> evaluate_batch(const RunState<Scalar>& s, const std::vector<Solution<Scalar>>& policies,
                                    const std::vector<std::uint64_t>& seeds, double noise_std) {
    std::vector<Episode> episodes(policies.size());
    auto one = [&](std::size_t i) {
        Rng rng(seeds[i]);
        episodes[i] = rollout(s.config.env, s.policy_spec, policies[i].params, noise_std, &rng);
    };
    if (s.config.execution == ExecutionMode::parallel && policies.size() > 1) {
        std::vector<std::exception_ptr> errors(policies.size());
        {
            std::vector<std::jthread> threads;
            for (std::size_t i = 0; i < policies.size(); ++i)
                threads.emplace_back([&, i] {
                    try {
                        one(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                });
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    } else {
        for (std::size_t i = 0; i < policies.size(); ++i) one(i);
    }
    return episodes;
}

/// Stores one evaluated episode: transitions, descriptors, grid candidate.
template <typename Scalar>
InsertOutcome absorb(RunState<Scalar>& s, Solution<Scalar>& sol, const Episode& ep) {
    s.buffer.push_trajectory(ep.transitions);
    for (const Transition& t : ep.transitions) {
        if (s.archive.try_add(t.state_descriptor) == AddOutcome::accepted)
            ++s.archive_accepted;
        else
            ++s.archive_filtered;
    }
    sol.fitness = ep.fitness;
    sol.bd = ep.behavior;
    s.total_steps += static_cast<std::uint64_t>(ep.length());
    return s.grid.try_insert(sol);
}

template <typename Scalar>
RunState<Scalar> initialize(const RunConfig& config) {
    config.validate();
    RunState<Scalar> s(config);
    Rng critic_rng(derive_seed(config.seed, streams::critics));
    s.critics = SharedCritics<Scalar>::create(s.critic_spec, critic_rng);
    s.selection_rng.seed(derive_seed(config.seed, streams::selection));

    const std::size_t n = config.variant == Variant::td3_baseline ? 1 : config.population;
    std::vector<Solution<Scalar>> pop(n);
    std::vector<std::uint64_t> seeds(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(config.seed, streams::init_params + i));
        pop[i].params = init_params<Scalar>(s.policy_spec, rng);
        seeds[i] = derive_seed(config.seed, streams::init_noise + i);
    }
    const double noise = config.exploration_noise * config.env.action_bound;
    const auto episodes = evaluate_batch(s, pop, seeds, noise);
    std::uint64_t steps = 0;
    for (std::size_t i = 0; i < n; ++i) {
        absorb(s, pop[i], episodes[i]);
        steps += static_cast<std::uint64_t>(episodes[i].length());
    }
    s.archive.reindex();
    s.last_generation_steps = steps;
    if (config.variant == Variant::td3_baseline) s.agent = pop.front();
    return s;
}

/// gradient_steps = int(actor_steps * ratio) for the upcoming generation.
template <typename Scalar>
std::uint64_t gradient_steps_for(const RunState<Scalar>& s) {
    const RunConfig& c = s.config;
    const std::size_t workers = c.variant == Variant::td3_baseline ? 1 : c.population;
    const std::uint64_t actor_steps =
        c.actor_steps_scope == ActorStepsScope::worker ? s.last_generation_steps / workers : s.last_generation_steps;
    return static_cast<std::uint64_t>(static_cast<double>(actor_steps) * c.gradient_steps_ratio);
}

template <typename Scalar>
GenerationRecord generation(RunState<Scalar>& s) {
    const RunConfig& c = s.config;
    if (s.grid.empty() && !s.agent) throw DimensionError("generation: grid is empty");
    GenerationRecord rec;
    rec.generation = s.generation_index;
    rec.gradient_steps = gradient_steps_for(s);

    const bool td3 = c.variant == Variant::td3_baseline;
    std::vector<Solution<Scalar>> parents =
        td3 ? std::vector<Solution<Scalar>>{*s.agent} : s.grid.sample_parents(c.population, s.selection_rng);
    rec.objectives = td3 ? std::vector<Objective>{Objective::quality} : assign_objectives(c, s.selection_rng);

    std::vector<std::uint64_t> mseeds(parents.size()), eseeds(parents.size());
    for (std::size_t w = 0; w < parents.size(); ++w) {
        const std::uint64_t stream = s.generation_index * 4096 + w;
        mseeds[w] = derive_seed(c.seed, streams::mutation + stream);
        eseeds[w] = derive_seed(c.seed, streams::evaluation + stream);
    }

    std::vector<Solution<Scalar>> children = parents;
    // The buffer may still be smaller than a batch (single-agent start); collect first.
    const UpdateConfig update = c.resolved_update();
    if (rec.gradient_steps > 0 && s.buffer.size() >= update.batch_size) {
        children = mutate_population(parents, rec.objectives, s.critics, s.buffer, s.archive, rec.gradient_steps,
                                     s.policy_spec, update, mseeds, c.execution, &rec.stats);
        s.gradient_steps_total += rec.gradient_steps;
    }

    const double noise = c.exploration_noise * c.env.action_bound;
    const auto episodes = evaluate_batch(s, children, eseeds, noise);
    std::uint64_t steps = 0;
    for (std::size_t w = 0; w < children.size(); ++w) {
        switch (absorb(s, children[w], episodes[w])) {
        case InsertOutcome::inserted: ++rec.inserted; break;
        case InsertOutcome::replaced: ++rec.replaced; break;
        case InsertOutcome::rejected: ++rec.rejected; break;
        }
        steps += static_cast<std::uint64_t>(episodes[w].length());
    }
    s.archive.reindex();
    if (td3) s.agent = children.front();
    s.last_generation_steps = steps;
    s.last_stats = rec.stats;
    ++s.generation_index;
    rec.total_steps = s.total_steps;
    return rec;
}

// ---------------------------------------------------------------------------
// Deterministic evaluation

struct EvalPoint {
    std::size_t cell = 0;
    Vec2 bd;
    double fitness = 0.0;
};

struct Evaluation {
    std::uint64_t timestep = 0;
    std::vector<EvalPoint> points;
    double best_fitness = 0.0;
    Vec2 best_bd;
    double coverage = 0.0;
    double diversity = 0.0;
};

/// Noise-free episode of every elite (or of the single td3 agent).
template <typename Scalar>
Evaluation evaluate_population(RunState<Scalar>& s) {
    Evaluation ev;
    ev.timestep = s.total_steps;
    std::vector<std::pair<std::size_t, const FlatParams<Scalar>*>> members;
    if (s.agent) {
        members.emplace_back(cell_index(s.grid.spec(), s.agent->bd), &s.agent->params);
    } else {
        for (std::size_t cell : s.grid.occupied_cells()) members.emplace_back(cell, &s.grid.cell(cell)->params);
    }
    std::vector<Vec2> bds;
    ev.best_fitness = -std::numeric_limits<double>::infinity();
    for (const auto& [cell, params] : members) {
        const Episode ep = rollout(s.config.env, s.policy_spec, *params, 0.0);
        s.eval_steps += static_cast<std::uint64_t>(ep.length());
        ev.points.push_back({cell, ep.behavior, ep.fitness});
        bds.push_back(ep.behavior);
        if (ep.fitness > ev.best_fitness) {
            ev.best_fitness = ep.fitness;
            ev.best_bd = ep.behavior;
        }
    }
    ev.coverage = s.grid.coverage();
    ev.diversity = bds.size() >= 2 ? population_diversity(bds) : 0.0;
    return ev;
}

// ---------------------------------------------------------------------------
// Full run with artifacts

struct RunReport {
    std::string variant;
    std::uint64_t seed = 0;
    std::uint64_t total_steps = 0;
    std::uint64_t eval_steps = 0;
    std::uint64_t generations = 0;
    std::uint64_t gradient_steps = 0;
    double best_fitness = 0.0; // deterministic, final evaluation
    Vec2 best_bd;
    std::optional<double> best_goal_distance;
    double final_coverage = 0.0;
    double final_diversity = 0.0;
    std::size_t archive_size = 0;
    double wall_clock_seconds = 0.0;
    std::uint64_t grid_hash = 0;
    bool completed = false;

    nlohmann::json to_json() const {
        char hash[32];
        std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(grid_hash));
        nlohmann::json j = {{"variant", variant},
                            {"seed", seed},
                            {"total_steps", total_steps},
                            {"eval_steps", eval_steps},
                            {"generations", generations},
                            {"gradient_steps", gradient_steps},
                            {"best_fitness", best_fitness},
                            {"best_bd", {best_bd.x, best_bd.y}},
                            {"final_coverage", final_coverage},
                            {"final_diversity", final_diversity},
                            {"archive_size", archive_size},
                            {"wall_clock_seconds", wall_clock_seconds},
                            {"grid_hash", hash},
                            {"completed", completed}};
        j["best_goal_distance"] = best_goal_distance ? nlohmann::json(*best_goal_distance) : nlohmann::json(nullptr);
        return j;
    }
};

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

class RunWriter {
public:
    explicit RunWriter(const std::filesystem::path& dir) : dir_(dir) {
        std::filesystem::create_directories(dir_);
        curve_.open(dir_ / "curve.csv");
        coverage_.open(dir_ / "coverage.csv");
        log_.open(dir_ / "log.jsonl");
        if (!curve_ || !coverage_ || !log_) throw ConfigError("cannot write run artifacts in " + dir_.string());
        curve_ << "timestep,best_fitness,coverage,diversity\n";
        coverage_ << "eval_index,bd_x,bd_y,fitness,timestep\n";
    }

    void evaluation(std::size_t index, const Evaluation& ev) {
        curve_ << ev.timestep << ',' << fmt_g17(ev.best_fitness) << ',' << fmt_g17(ev.coverage) << ','
               << fmt_g17(ev.diversity) << '\n';
        for (const auto& p : ev.points)
            coverage_ << index << ',' << fmt_g17(p.bd.x) << ',' << fmt_g17(p.bd.y) << ',' << fmt_g17(p.fitness) << ','
                      << ev.timestep << '\n';
        curve_.flush();
        coverage_.flush();
    }

    void log(const nlohmann::json& line) {
        log_ << line.dump() << '\n';
        log_.flush();
    }

private:
    std::filesystem::path dir_;
    std::ofstream curve_, coverage_, log_;
};

template <typename Scalar>
nlohmann::json generation_log(const RunState<Scalar>& s, const GenerationRecord& rec) {
    nlohmann::json objectives = nlohmann::json::array();
    for (Objective o : rec.objectives) objectives.push_back(to_string(o));
    return {{"generation", rec.generation},
            {"total_steps", rec.total_steps},
            {"gradient_steps", rec.gradient_steps},
            {"objectives", objectives},
            {"critic_loss",
             {{"quality", rec.stats.mean_critic_loss(Objective::quality)},
              {"diversity", rec.stats.mean_critic_loss(Objective::diversity)},
              {"sum", rec.stats.mean_critic_loss(Objective::sum)}}},
            {"actor_grad_norm", rec.stats.mean_actor_grad_norm()},
            {"refused_actor_steps", rec.stats.refused_actor_steps},
            {"inserted", rec.inserted},
            {"replaced", rec.replaced},
            {"rejected", rec.rejected},
            {"coverage", s.grid.coverage()},
            {"archive_size", s.archive.size()},
            {"buffer_size", s.buffer.size()}};
}

} // namespace detail

/// Writes grid snapshot and archive dump (also used for partial artifacts).
template <typename Scalar>
void save_state(const RunState<Scalar>& s, const std::filesystem::path& dir) {
    s.grid.save(dir);
    s.archive.save_csv((dir / "archive.csv").string());
    if (s.agent) {
        std::ofstream out(dir / "agent.params.bin", std::ios::binary);
        write_params_blob(out, s.policy_spec, s.agent->params);
    }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

struct RunOptions {
    bool quiet = true;
    std::ostream* progress = nullptr;
};

/// Runs generations until max_steps noisy environment steps have been taken.
/// Evaluates deterministically after initialization, whenever the step
/// counter crosses a multiple of eval_interval, and at the end.
template <typename Scalar = Real>
RunReport run(const RunConfig& config, const std::filesystem::path& out_dir, const RunOptions& opts = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    config.validate();
    std::filesystem::create_directories(out_dir);
    write_json(out_dir / "config.json", config_to_json(config));
    detail::RunWriter writer(out_dir);

    RunReport report;
    report.variant = to_string(config.variant);
    report.seed = config.seed;

    std::optional<RunState<Scalar>> state;
    std::size_t eval_index = 0;
    std::uint64_t next_eval = 0;
    std::uint64_t last_eval_step = std::numeric_limits<std::uint64_t>::max();
    Evaluation last;

    auto evaluate = [&] {
        last = evaluate_population(*state);
        writer.evaluation(eval_index++, last);
        last_eval_step = state->total_steps;
        next_eval = (state->total_steps / config.eval_interval + 1) * config.eval_interval;
    };

    try {
        state.emplace(initialize<Scalar>(config));
        evaluate();
        while (state->total_steps < config.max_steps) {
            const GenerationRecord rec = generation(*state);
            writer.log(detail::generation_log(*state, rec));
            if (state->total_steps >= next_eval) evaluate();
            if (opts.progress && rec.generation % 50 == 0)
                *opts.progress << report.variant << " seed " << config.seed << ": " << state->total_steps
                               << " steps, coverage " << state->grid.coverage() << ", best " << last.best_fitness
                               << std::endl;
        }
        if (last_eval_step != state->total_steps) evaluate();
    } catch (...) {
        if (state) {
            try {
                save_state(*state, out_dir);
            } catch (...) {
            }
        }
        throw;
    }

    save_state(*state, out_dir);
    report.total_steps = state->total_steps;
    report.eval_steps = state->eval_steps;
    report.generations = state->generation_index;
    report.gradient_steps = state->gradient_steps_total;
    report.best_fitness = last.best_fitness;
    report.best_bd = last.best_bd;
    if (config.env.goal) report.best_goal_distance = distance(last.best_bd, *config.env.goal);
    report.final_coverage = state->grid.coverage();
    report.final_diversity = last.diversity;
    report.archive_size = state->archive.size();
    report.grid_hash = state->grid.content_hash();
    report.completed = true;
    report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(out_dir / "report.json", report.to_json());
    return report;
}

// ---------------------------------------------------------------------------
// Fast adaptation

struct AdaptResult {
    std::size_t cell = 0;
    double score = 0.0;         // return under the new goal
    Vec2 final_position;
    double goal_distance = 0.0; // final position to new goal
    std::size_t evaluated = 0;
};

/// Occupied cells ordered by the distance of their centre to `goal`, ties by index.
template <typename Scalar>
std::vector<std::size_t> adaptation_candidates(const ElitesGrid<Scalar>& grid, Vec2 goal) {
    auto cells = grid.occupied_cells();
    std::stable_sort(cells.begin(), cells.end(), [&](std::size_t a, std::size_t b) {
        return distance(cell_center(grid.spec(), a), goal) < distance(cell_center(grid.spec(), b), goal);
    });
    return cells;
}

/// Deterministically evaluates up to `budget` elites nearest to the new goal
/// and returns the one with the highest return. Ties keep the earlier candidate.
template <typename Scalar>
AdaptResult adapt(const ElitesGrid<Scalar>& grid, const EnvSpec& env, Vec2 new_goal, std::size_t budget) {
    if (grid.empty()) throw DimensionError("adapt: grid snapshot is empty");
    if (budget == 0) throw DimensionError("adapt: budget must be positive");
    if (!env.arena.contains(new_goal) || env.inside_wall(new_goal))
        throw DimensionError("adapt: goal must lie in the arena and outside walls");
    EnvSpec target = env;
    target.goal = new_goal;
    target.reward_kind = RewardKind::negative_distance_to_goal;

    const auto cells = adaptation_candidates(grid, new_goal);
    AdaptResult best;
    bool have = false;
    for (std::size_t i = 0; i < cells.size() && i < budget; ++i) {
        const Episode ep = rollout(target, grid.policy_spec(), grid.cell(cells[i])->params, 0.0);
        ++best.evaluated;
        if (!have || ep.fitness > best.score) {
            have = true;
            best.cell = cells[i];
            best.score = ep.fitness;
            best.final_position = ep.behavior;
        }
    }
    best.goal_distance = distance(best.final_position, new_goal);
    return best;
}

/// Goal uniform over the arena, redrawn while it falls inside a wall.
inline Vec2 sample_free_goal(const EnvSpec& env, Rng& rng, std::size_t* redraws = nullptr) {
    std::uniform_real_distribution<double> ux(env.arena.lo.x, env.arena.hi.x);
    std::uniform_real_distribution<double> uy(env.arena.lo.y, env.arena.hi.y);
    for (int attempt = 0; attempt < 1'000'000; ++attempt) {
        const Vec2 g{ux(rng), uy(rng)};
        if (!env.inside_wall(g)) return g;
        if (redraws) ++*redraws;
    }
    throw ConfigError("sample_free_goal: the arena is covered by walls");
}

} // namespace qdpg
