#pragma once

// Gradient-based mutation operators.
//
// Quality and diversity mutations are TD3-style deterministic policy
// gradient updates of a solution's actor against one of the population-wide
// twin-critic pairs. The quality pair learns from stored environment
// rewards; the diversity pair learns from novelty rewards recomputed against
// the current descriptor archive every time a batch is drawn. A third pair
// serves the summed-reward ablation.
//
// Several workers may mutate different solutions at once. Within each
// iteration every worker computes the gradient of its critic pair on its own
// batch, the gradients of workers sharing a pair are averaged (in worker
// order) and applied once, then every worker updates its own actor against
// the freshly stepped critic. The single-threaded mode executes exactly the
// same arithmetic in the same order, so both modes agree bit for bit.

#include <algorithm>
#include <atomic>
#include <barrier>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <thread>
#include <vector>

#include "common.hpp"
#include "diffnet.hpp"
#include "elites_grid.hpp"
#include "novelty_archive.hpp"
#include "replay.hpp"

namespace qdpg {

enum class Objective { quality = 0, diversity = 1, sum = 2 };

inline const char* to_string(Objective o) {
    switch (o) {
    case Objective::quality: return "quality";
    case Objective::diversity: return "diversity";
    case Objective::sum: return "sum";
    }
    return "?";
}

enum class LossReduction { mean, sum };
enum class ExecutionMode { single_threaded, parallel };

struct UpdateConfig {
    double gamma = 0.99;
    double diversity_gamma = 0.99;
    double lr = 6e-3;
    std::optional<double> actor_lr;
    std::optional<double> critic_lr;
    int policy_delay = 2;
    double tau = 0.005;
    std::size_t batch_size = 256;
    double action_bound = 0.05;
    double smoothing_noise_std = 0.01;  // absolute units
    double smoothing_noise_clip = 0.025; // absolute units
    LossReduction reduction = LossReduction::mean;       // critic loss
    LossReduction actor_reduction = LossReduction::sum;  // actor objective
    // Critics see a / action_bound, so action inputs span [-1, 1] like the states.
    bool normalize_critic_actions = true;

    double effective_actor_lr() const { return actor_lr.value_or(lr); }
    double effective_critic_lr() const { return critic_lr.value_or(lr); }
    double gamma_for(Objective o) const { return o == Objective::diversity ? diversity_gamma : gamma; }
    double critic_action_scale() const { return normalize_critic_actions ? 1.0 / action_bound : 1.0; }

    void validate() const {
        if (!(gamma > 0.0 && gamma <= 1.0) || !(diversity_gamma > 0.0 && diversity_gamma <= 1.0))
            throw ConfigError("update: gamma must lie in (0, 1]");
        if (policy_delay < 1) throw ConfigError("update: policy_delay must be >= 1");
        if (batch_size == 0) throw ConfigError("update: batch_size must be positive");
        if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("update: tau must lie in [0, 1]");
        if (!(effective_actor_lr() >= 0.0) || !(effective_critic_lr() >= 0.0))
            throw ConfigError("update: learning rates must be non-negative");
        if (!(smoothing_noise_std >= 0.0) || !(smoothing_noise_clip >= 0.0))
            throw ConfigError("update: smoothing noise must be non-negative");
        if (!(action_bound > 0.0)) throw ConfigError("update: action_bound must be positive");
    }
};

/// Twin critics Q(s, a) and their Polyak-tracked targets.
template <typename Scalar>
struct CriticPair {
    NetSpec spec;
    Objective kind = Objective::quality;
    FlatParams<Scalar> q1, q2, q1_target, q2_target;

    static CriticPair create(const NetSpec& spec, Objective kind, Rng& rng) {
        if (spec.output_dim() != 1) throw DimensionError("critic must have a scalar output");
        CriticPair p;
        p.spec = spec;
        p.kind = kind;
        p.q1 = init_params<Scalar>(spec, rng);
        p.q2 = init_params<Scalar>(spec, rng);
        p.q1_target = p.q1;
        p.q2_target = p.q2;
        return p;
    }

    std::uint64_t content_hash() const {
        Fnv1a h;
        for (const auto* v : {&q1, &q2, &q1_target, &q2_target})
            h.bytes(v->data(), sizeof(Scalar) * static_cast<std::size_t>(v->size()));
        return h.digest();
    }
};

/// Transitions gathered into column blocks, plus the reward stream a
/// particular objective trains on.
template <typename Scalar>
struct Batch {
    Matrix<Scalar> states;      // state_dim x B
    Matrix<Scalar> actions;     // action_dim x B
    Matrix<Scalar> next_states; // state_dim x B
    Matrix<Scalar> env_rewards; // 1 x B
    Matrix<Scalar> rewards;     // 1 x B, what the critic regresses on
    std::vector<Vec2> descriptors;

    Eigen::Index size() const { return states.cols(); }
};

template <typename Scalar>
Batch<Scalar> make_batch(std::span<const Transition> transitions) {
    const auto n = static_cast<Eigen::Index>(transitions.size());
    Batch<Scalar> b;
    b.states.resize(2, n);
    b.actions.resize(2, n);
    b.next_states.resize(2, n);
    b.env_rewards.resize(1, n);
    b.descriptors.resize(transitions.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const Transition& t = transitions[static_cast<std::size_t>(i)];
        b.states.col(i) << Scalar(t.state.x), Scalar(t.state.y);
        b.actions.col(i) << Scalar(t.action.x), Scalar(t.action.y);
        b.next_states.col(i) << Scalar(t.next_state.x), Scalar(t.next_state.y);
        b.env_rewards(0, i) = Scalar(t.reward);
        b.descriptors[static_cast<std::size_t>(i)] = t.state_descriptor;
    }
    b.rewards = b.env_rewards;
    return b;
}

template <typename Scalar>
void sample_batch_into(const ReplayBuffer& buffer, std::size_t batch_size, Rng& rng, Batch<Scalar>& b,
                       std::vector<std::size_t>& slots) {
    buffer.sample_slots(batch_size, rng, slots);
    const auto n = static_cast<Eigen::Index>(batch_size);
    b.states.resize(2, n);
    b.actions.resize(2, n);
    b.next_states.resize(2, n);
    b.env_rewards.resize(1, n);
    b.descriptors.resize(batch_size);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Transition& t = buffer.at_slot(slots[static_cast<std::size_t>(i)]);
        b.states(0, i) = Scalar(t.state.x);
        b.states(1, i) = Scalar(t.state.y);
        b.actions(0, i) = Scalar(t.action.x);
        b.actions(1, i) = Scalar(t.action.y);
        b.next_states(0, i) = Scalar(t.next_state.x);
        b.next_states(1, i) = Scalar(t.next_state.y);
        b.env_rewards(0, i) = Scalar(t.reward);
        b.descriptors[static_cast<std::size_t>(i)] = t.state_descriptor;
    }
}

/// Fills batch.rewards for the objective, recomputing novelty against the
/// archive as it is now.
template <typename Scalar>
void assign_rewards(Batch<Scalar>& b, Objective objective, const DescriptorArchive& archive,
                    std::vector<Neighbor>& scratch) {
    if (objective == Objective::quality) {
        b.rewards = b.env_rewards;
        return;
    }
    b.rewards.resize(1, b.size());
    for (Eigen::Index i = 0; i < b.size(); ++i) {
        const double novelty = archive.diversity_reward(b.descriptors[static_cast<std::size_t>(i)], scratch);
        b.rewards(0, i) = objective == Objective::sum ? b.env_rewards(0, i) + Scalar(novelty) : Scalar(novelty);
    }
}

/// Scratch buffers for one worker; reused across iterations.
template <typename Scalar>
struct Workspace {
    Tape<Scalar> actor, critic1, critic2;
    Matrix<Scalar> critic_input;
    Matrix<Scalar> target;
    Matrix<Scalar> cotangent;
    Matrix<Scalar> input_grad;
    std::vector<Neighbor> knn_scratch;
    std::vector<std::size_t> slots;
};

template <typename Scalar>
void stack_state_action(const Matrix<Scalar>& s, const Matrix<Scalar>& a, Matrix<Scalar>& out,
                        Scalar action_scale = Scalar(1)) {
    out.resize(s.rows() + a.rows(), s.cols());
    out.topRows(s.rows()) = s;
    out.bottomRows(a.rows()) = action_scale * a;
}

/// y = r + gamma * min_i Q_target_i(s', clip(pi(s') + clip(eps))), eps ~ N(0, std^2).
/// Episodes end only at the horizon, so targets are never masked.
template <typename Scalar>
const Matrix<Scalar>& critic_target(const CriticPair<Scalar>& pair, const Batch<Scalar>& batch,
                                    const NetSpec& actor_spec, const FlatParams<Scalar>& actor_params,
                                    const UpdateConfig& config, Rng& rng, Workspace<Scalar>& ws) {
    Matrix<Scalar> next_actions = forward_batch(actor_spec, actor_params, batch.next_states, ws.actor);
    if (config.smoothing_noise_std > 0.0) {
        std::normal_distribution<double> noise(0.0, config.smoothing_noise_std);
        const double c = config.smoothing_noise_clip;
        for (Eigen::Index j = 0; j < next_actions.cols(); ++j)
            for (Eigen::Index i = 0; i < next_actions.rows(); ++i)
                next_actions(i, j) += Scalar(std::clamp(noise(rng), -c, c));
    }
    const Scalar bound = Scalar(config.action_bound);
    next_actions = next_actions.cwiseMax(-bound).cwiseMin(bound);

    stack_state_action(batch.next_states, next_actions, ws.critic_input, Scalar(config.critic_action_scale()));
    const auto& t1 = forward_batch(pair.spec, pair.q1_target, ws.critic_input, ws.critic1);
    const auto& t2 = forward_batch(pair.spec, pair.q2_target, ws.critic_input, ws.critic2);
    ws.target = batch.rewards + Scalar(config.gamma_for(pair.kind)) * t1.cwiseMin(t2);
    if (!ws.target.allFinite()) throw NonFiniteError("critic_target: non-finite critic output, update aborted");
    return ws.target;
}

template <typename Scalar>
struct PairGradient {
    FlatParams<Scalar> g1, g2;
    double loss = 0.0;
};

/// Loss sum_batch sum_i (Q_i(s, a) - y)^2 (divided by B under mean reduction)
/// and its gradient with respect to both online critics.
template <typename Scalar>
void critic_gradient(const CriticPair<Scalar>& pair, const Batch<Scalar>& batch, const Matrix<Scalar>& target,
                     const UpdateConfig& config, Workspace<Scalar>& ws, PairGradient<Scalar>& out) {
    const Scalar scale = config.reduction == LossReduction::mean ? Scalar(1) / Scalar(batch.size()) : Scalar(1);
    stack_state_action(batch.states, batch.actions, ws.critic_input, Scalar(config.critic_action_scale()));
    out.g1.setZero(pair.spec.parameter_count());
    out.g2.setZero(pair.spec.parameter_count());
    double loss = 0.0;
    for (int i = 0; i < 2; ++i) {
        const auto& params = i == 0 ? pair.q1 : pair.q2;
        auto& tape = i == 0 ? ws.critic1 : ws.critic2;
        const auto& q = forward_batch(pair.spec, params, ws.critic_input, tape);
        ws.cotangent = q - target;
        loss += static_cast<double>(ws.cotangent.squaredNorm()) * static_cast<double>(scale);
        ws.cotangent *= Scalar(2) * scale;
        backward_batch(pair.spec, params, tape, ws.cotangent, (i == 0 ? out.g1 : out.g2).data(),
                       static_cast<Matrix<Scalar>*>(nullptr));
    }
    out.loss = loss;
}

template <typename Scalar>
void apply_critic_gradient(CriticPair<Scalar>& pair, const PairGradient<Scalar>& g, const UpdateConfig& config) {
    if (!g.g1.allFinite() || !g.g2.allFinite())
        throw NonFiniteError("critic gradient is not finite, update aborted");
    const Scalar lr = Scalar(config.effective_critic_lr());
    pair.q1 -= lr * g.g1;
    pair.q2 -= lr * g.g2;
}

template <typename Scalar>
void update_targets(CriticPair<Scalar>& pair, const UpdateConfig& config) {
    polyak_update_inplace(pair.q1_target, pair.q1, config.tau);
    polyak_update_inplace(pair.q2_target, pair.q2, config.tau);
}

/// One SGD step on both online critics; returns the loss before the step.
template <typename Scalar>
double critic_step(CriticPair<Scalar>& pair, const Batch<Scalar>& batch, const NetSpec& actor_spec,
                   const FlatParams<Scalar>& actor_params, const UpdateConfig& config, Rng& rng) {
    Workspace<Scalar> ws;
    const Matrix<Scalar> y = critic_target(pair, batch, actor_spec, actor_params, config, rng, ws);
    PairGradient<Scalar> g;
    critic_gradient(pair, batch, y, config, ws, g);
    apply_critic_gradient(pair, g, config);
    return g.loss;
}

/// Gradient of J(theta) = sum_batch Q1(s, pi_theta(s)) (divided by B under
/// mean reduction): the critic's action gradient chained through the actor.
template <typename Scalar>
void actor_gradient(const NetSpec& actor_spec, const FlatParams<Scalar>& actor_params, const CriticPair<Scalar>& pair,
                    const Matrix<Scalar>& states, const UpdateConfig& config, Workspace<Scalar>& ws,
                    FlatParams<Scalar>& grad) {
    const Scalar scale =
        config.actor_reduction == LossReduction::mean ? Scalar(1) / Scalar(states.cols()) : Scalar(1);
    const auto& actions = forward_batch(actor_spec, actor_params, states, ws.actor);
    stack_state_action(states, actions, ws.critic_input, Scalar(config.critic_action_scale()));
    forward_batch(pair.spec, pair.q1, ws.critic_input, ws.critic1);
    ws.cotangent = Matrix<Scalar>::Constant(1, states.cols(), scale);
    backward_batch(pair.spec, pair.q1, ws.critic1, ws.cotangent, static_cast<Scalar*>(nullptr), &ws.input_grad);
    const auto state_dim = static_cast<Eigen::Index>(actor_spec.input_dim());
    grad.setZero(actor_spec.parameter_count());
    const auto action_grad = Scalar(config.critic_action_scale()) * ws.input_grad.bottomRows(ws.input_grad.rows() - state_dim);
    backward_batch(actor_spec, actor_params, ws.actor, action_grad,
                   grad.data(), static_cast<Matrix<Scalar>*>(nullptr));
}

struct UpdateStats {
    double critic_loss_sum[3] = {0.0, 0.0, 0.0};
    std::size_t critic_updates[3] = {0, 0, 0};
    double actor_grad_norm_sum = 0.0;
    std::size_t actor_updates = 0;
    std::size_t refused_actor_steps = 0;

    double mean_critic_loss(Objective o) const {
        const auto i = static_cast<int>(o);
        return critic_updates[i] ? critic_loss_sum[i] / static_cast<double>(critic_updates[i]) : 0.0;
    }
    double mean_actor_grad_norm() const {
        return actor_updates ? actor_grad_norm_sum / static_cast<double>(actor_updates) : 0.0;
    }
};

/// Ascent step on sum_batch Q1(s, pi(s)). A non-finite gradient leaves the
/// parameters unchanged and is counted in `stats`.
template <typename Scalar>
FlatParams<Scalar> actor_step(const NetSpec& actor_spec, const FlatParams<Scalar>& actor_params,
                              const CriticPair<Scalar>& pair, const Batch<Scalar>& batch, const UpdateConfig& config,
                              UpdateStats* stats = nullptr) {
    Workspace<Scalar> ws;
    FlatParams<Scalar> grad;
    actor_gradient(actor_spec, actor_params, pair, batch.states, config, ws, grad);
    if (!grad.allFinite()) {
        if (stats) ++stats->refused_actor_steps;
        return actor_params;
    }
    if (stats) {
        stats->actor_grad_norm_sum += static_cast<double>(grad.norm());
        ++stats->actor_updates;
    }
    return actor_params + Scalar(config.effective_actor_lr()) * grad;
}

/// Population-wide learners: one twin-critic pair per objective.
template <typename Scalar>
struct SharedCritics {
    CriticPair<Scalar> quality, diversity, sum;

    static SharedCritics create(const NetSpec& critic_spec, Rng& rng) {
        SharedCritics s;
        s.quality = CriticPair<Scalar>::create(critic_spec, Objective::quality, rng);
        s.diversity = CriticPair<Scalar>::create(critic_spec, Objective::diversity, rng);
        s.sum = CriticPair<Scalar>::create(critic_spec, Objective::sum, rng);
        return s;
    }

    CriticPair<Scalar>& pair(Objective o) {
        switch (o) {
        case Objective::quality: return quality;
        case Objective::diversity: return diversity;
        case Objective::sum: break;
        }
        return sum;
    }
    const CriticPair<Scalar>& pair(Objective o) const { return const_cast<SharedCritics*>(this)->pair(o); }
};

/// Mutates every parent for `n_steps` iterations with its objective.
/// Returns mutated copies in parent order; the parents are not modified.
template <typename Scalar>
std::vector<Solution<Scalar>> mutate_population(const std::vector<Solution<Scalar>>& parents,
                                                std::span<const Objective> objectives, SharedCritics<Scalar>& critics,
                                                const ReplayBuffer& buffer, const DescriptorArchive& archive,
                                                std::size_t n_steps, const NetSpec& actor_spec,
                                                const UpdateConfig& config, std::span<const std::uint64_t> worker_seeds,
                                                ExecutionMode mode = ExecutionMode::single_threaded,
                                                UpdateStats* stats = nullptr) {
    const std::size_t n_workers = parents.size();
    if (objectives.size() != n_workers || worker_seeds.size() != n_workers)
        throw DimensionError("mutate_population: parents, objectives and seeds must have equal length");
    config.validate();

    std::vector<Solution<Scalar>> children = parents;
    if (n_steps == 0 || n_workers == 0) return children;
    if (buffer.size() < config.batch_size)
        throw DimensionError("mutate_population: replay buffer holds fewer transitions than one batch");

    struct Worker {
        Rng rng;
        Workspace<Scalar> ws;
        Batch<Scalar> batch;
        PairGradient<Scalar> critic_grad;
        FlatParams<Scalar> actor_grad;
    };
    std::vector<Worker> workers(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) workers[w].rng.seed(worker_seeds[w]);

    UpdateStats local;
    std::size_t iteration = 0;

    auto critic_phase = [&](std::size_t w) {
        Worker& wk = workers[w];
        const Objective obj = objectives[w];
        sample_batch_into(buffer, config.batch_size, wk.rng, wk.batch, wk.ws.slots);
        assign_rewards(wk.batch, obj, archive, wk.ws.knn_scratch);
        const CriticPair<Scalar>& pair = critics.pair(obj);
        const auto& y = critic_target(pair, wk.batch, actor_spec, children[w].params, config, wk.rng, wk.ws);
        critic_gradient(pair, wk.batch, y, config, wk.ws, wk.critic_grad);
    };

    // Average per pair in worker order, step, and record the loss.
    auto reduce_critics = [&]() {
        for (Objective obj : {Objective::quality, Objective::diversity, Objective::sum}) {
            std::size_t count = 0;
            PairGradient<Scalar> acc;
            for (std::size_t w = 0; w < n_workers; ++w) {
                if (objectives[w] != obj) continue;
                if (count == 0) {
                    acc = workers[w].critic_grad;
                } else {
                    acc.g1 += workers[w].critic_grad.g1;
                    acc.g2 += workers[w].critic_grad.g2;
                    acc.loss += workers[w].critic_grad.loss;
                }
                ++count;
            }
            if (count == 0) continue;
            if (count > 1) {
                const Scalar inv = Scalar(1) / Scalar(count);
                acc.g1 *= inv;
                acc.g2 *= inv;
                acc.loss /= static_cast<double>(count);
            }
            apply_critic_gradient(critics.pair(obj), acc, config);
            local.critic_loss_sum[static_cast<int>(obj)] += acc.loss;
            ++local.critic_updates[static_cast<int>(obj)];
        }
    };

    auto actor_due = [&]() { return (iteration + 1) % static_cast<std::size_t>(config.policy_delay) == 0; };

    // Returns the gradient norm, or a negative value for a refused step.
    std::vector<double> actor_norms(n_workers, 0.0);
    auto actor_phase = [&](std::size_t w) {
        Worker& wk = workers[w];
        actor_gradient(actor_spec, children[w].params, critics.pair(objectives[w]), wk.batch.states, config, wk.ws,
                       wk.actor_grad);
        if (!wk.actor_grad.allFinite()) {
            actor_norms[w] = -1.0;
            return;
        }
        actor_norms[w] = static_cast<double>(wk.actor_grad.norm());
        children[w].params += Scalar(config.effective_actor_lr()) * wk.actor_grad;
    };

    auto finish_iteration = [&]() {
        if (actor_due()) {
            for (double n : actor_norms) {
                if (n < 0.0) {
                    ++local.refused_actor_steps;
                } else {
                    local.actor_grad_norm_sum += n;
                    ++local.actor_updates;
                }
            }
        }
        for (Objective obj : {Objective::quality, Objective::diversity, Objective::sum})
            for (std::size_t w = 0; w < n_workers; ++w)
                if (objectives[w] == obj) {
                    update_targets(critics.pair(obj), config);
                    break;
                }
        ++iteration;
    };

    if (mode == ExecutionMode::single_threaded || n_workers == 1) {
        while (iteration < n_steps) {
            for (std::size_t w = 0; w < n_workers; ++w) critic_phase(w);
            reduce_critics();
            if (actor_due())
                for (std::size_t w = 0; w < n_workers; ++w) actor_phase(w);
            finish_iteration();
        }
    } else {
        std::atomic<bool> failed{false};
        std::exception_ptr error;
        std::mutex error_mutex;
        auto record = [&](std::exception_ptr e) {
            std::lock_guard lock(error_mutex);
            if (!error) error = e;
            failed = true;
        };
        auto after_critics = [&]() noexcept {
            if (failed) return;
            try {
                reduce_critics();
            } catch (...) {
                record(std::current_exception());
            }
        };
        auto after_actors = [&]() noexcept {
            if (failed) return;
            try {
                finish_iteration();
            } catch (...) {
                record(std::current_exception());
            }
        };
        std::barrier sync_critics(static_cast<std::ptrdiff_t>(n_workers), after_critics);
        std::barrier sync_actors(static_cast<std::ptrdiff_t>(n_workers), after_actors);
        auto body = [&](std::size_t w) {
            for (std::size_t it = 0; it < n_steps; ++it) {
                if (!failed) {
                    try {
                        critic_phase(w);
                    } catch (...) {
                        record(std::current_exception());
                    }
                }
                sync_critics.arrive_and_wait();
                if (!failed && actor_due()) {
                    try {
                        actor_phase(w);
                    } catch (...) {
                        record(std::current_exception());
                    }
                }
                sync_actors.arrive_and_wait();
                if (failed) break;
            }
        };
        {
            std::vector<std::jthread> threads;
            for (std::size_t w = 1; w < n_workers; ++w) threads.emplace_back(body, w);
            body(0);
        }
        if (error) std::rethrow_exception(error);
    }

    if (stats) {
        for (int i = 0; i < 3; ++i) {
            stats->critic_loss_sum[i] += local.critic_loss_sum[i];
            stats->critic_updates[i] += local.critic_updates[i];
        }
        stats->actor_grad_norm_sum += local.actor_grad_norm_sum;
        stats->actor_updates += local.actor_updates;
        stats->refused_actor_steps += local.refused_actor_steps;
    }
    return children;
}

/// Single-solution mutation; the input is left untouched.
template <typename Scalar>
Solution<Scalar> mutate(const Solution<Scalar>& solution, Objective objective, SharedCritics<Scalar>& critics,
                        const ReplayBuffer& buffer, const DescriptorArchive& archive, std::size_t n_steps,
                        const NetSpec& actor_spec, const UpdateConfig& config, std::uint64_t seed,
                        ExecutionMode mode = ExecutionMode::single_threaded, UpdateStats* stats = nullptr) {
    const std::vector<Solution<Scalar>> parents{solution};
    const Objective objectives[] = {objective};
    const std::uint64_t seeds[] = {seed};
    return mutate_population(parents, objectives, critics, buffer, archive, n_steps, actor_spec, config, seeds, mode,
                             stats)
        .front();
}

} // namespace qdpg
