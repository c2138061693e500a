#pragma once

// Deterministic 2-D point-mass environments with deceptive rewards.
//
// The agent's state is its position. An action is a per-axis position
// increment, clipped to +-action_bound. Collisions use axis-decomposed
// sliding: the x increment is applied first and stopped at the first wall
// face it would cross, then the y increment from the updated x. Walls are
// closed rectangles whose interior is forbidden; their boundary is not.

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "diffnet.hpp"

namespace qdpg {

enum class RewardKind { negative_distance_to_goal, x_velocity };

struct EnvSpec {
    std::string name = "point_maze";
    Box arena{{0.0, 0.0}, {1.0, 1.0}};
    std::vector<Box> walls;
    Vec2 start{0.05, 0.05};
    std::optional<Vec2> goal;
    int horizon = 200;
    double action_bound = 0.05;
    RewardKind reward_kind = RewardKind::negative_distance_to_goal;
    Box descriptor_box{{0.0, 0.0}, {1.0, 1.0}}; // state/behavior descriptors are clipped to it

    /// A wall face flush with (or beyond) the arena border is pushed out to
    /// infinity, so no zero-width gap remains between wall and border.
    Box solid(const Box& w) const {
        constexpr double inf = std::numeric_limits<double>::infinity();
        Box s = w;
        if (w.lo.x <= arena.lo.x) s.lo.x = -inf;
        if (w.lo.y <= arena.lo.y) s.lo.y = -inf;
        if (w.hi.x >= arena.hi.x) s.hi.x = inf;
        if (w.hi.y >= arena.hi.y) s.hi.y = inf;
        return s;
    }

    bool inside_wall(Vec2 p) const {
        for (const Box& w : walls)
            if (solid(w).contains_strictly(p)) return true;
        return false;
    }
};

struct EnvState {
    Vec2 position;
    int step_index = 0;

    friend bool operator==(const EnvState&, const EnvState&) = default;
};

/// One environment step. The single reward field always holds the
/// environment reward; diversity rewards are never stored.
struct Transition {
    Vec2 state;
    Vec2 action;
    double reward = 0.0;
    Vec2 next_state;
    Vec2 state_descriptor; // descriptor of next_state, the position reached by this step
    bool done = false;

    friend bool operator==(const Transition&, const Transition&) = default;
};

/// Problems that make a layout unusable; empty when the layout is valid.
inline std::vector<std::string> validate(const EnvSpec& spec) {
    std::vector<std::string> errors;
    auto fmt = [](Vec2 p) {
        std::ostringstream os;
        os << "(" << p.x << ", " << p.y << ")";
        return os.str();
    };
    if (!spec.arena.valid()) errors.push_back("arena box is empty or non-finite");
    if (!spec.descriptor_box.valid()) errors.push_back("descriptor box is empty or non-finite");
    for (std::size_t i = 0; i < spec.walls.size(); ++i)
        if (!spec.walls[i].valid()) errors.push_back("wall " + std::to_string(i) + " is empty or non-finite");
    if (spec.horizon <= 0) errors.push_back("horizon must be positive");
    if (!(spec.action_bound > 0.0) || !std::isfinite(spec.action_bound))
        errors.push_back("action_bound must be positive");
    if (!is_finite(spec.start) || !spec.arena.contains(spec.start))
        errors.push_back("start " + fmt(spec.start) + " lies outside the arena");
    if (spec.inside_wall(spec.start)) errors.push_back("start " + fmt(spec.start) + " lies inside a wall");
    if (spec.goal) {
        if (!is_finite(*spec.goal) || !spec.arena.contains(*spec.goal))
            errors.push_back("goal " + fmt(*spec.goal) + " lies outside the arena");
        if (spec.inside_wall(*spec.goal)) errors.push_back("goal " + fmt(*spec.goal) + " lies inside a wall");
    } else if (spec.reward_kind == RewardKind::negative_distance_to_goal) {
        errors.push_back("negative_distance_to_goal reward needs a goal");
    }
    return errors;
}

inline EnvState reset(const EnvSpec& spec) { return {spec.start, 0}; }

inline Vec2 state_descriptor(const EnvSpec& spec, const EnvState& state) {
    return spec.descriptor_box.clip(state.position);
}

inline Vec2 behavior_descriptor(const std::vector<Transition>& trajectory) {
    if (trajectory.empty()) throw DimensionError("behavior_descriptor: empty trajectory");
    return trajectory.back().state_descriptor;
}

namespace detail {

// Moves along one axis from `from` by `delta`, stopping at the first wall
// face crossed. `across` is the fixed coordinate on the other axis.
inline double slide_axis(const EnvSpec& spec, double from, double delta, double across, bool along_x) {
    double to = from + delta;
    for (const Box& wall : spec.walls) {
        const Box w = spec.solid(wall);
        const double a_lo = along_x ? w.lo.y : w.lo.x;
        const double a_hi = along_x ? w.hi.y : w.hi.x;
        if (!(across > a_lo && across < a_hi)) continue;
        const double lo = along_x ? w.lo.x : w.lo.y;
        const double hi = along_x ? w.hi.x : w.hi.y;
        if (delta > 0.0 && from <= lo && to > lo) to = lo;
        if (delta < 0.0 && from >= hi && to < hi) to = hi;
    }
    const double arena_lo = along_x ? spec.arena.lo.x : spec.arena.lo.y;
    const double arena_hi = along_x ? spec.arena.hi.x : spec.arena.hi.y;
    return std::clamp(to, arena_lo, arena_hi);
}

} // namespace detail

inline Vec2 clip_action(const EnvSpec& spec, Vec2 action) {
    const double b = spec.action_bound;
    return {std::clamp(action.x, -b, b), std::clamp(action.y, -b, b)};
}

/// Advances one step. Throws on non-finite actions or a finished episode.
inline Transition step(const EnvSpec& spec, EnvState& state, Vec2 action) {
    if (!is_finite(action)) throw NonFiniteError("step: non-finite action");
    if (state.step_index >= spec.horizon) throw DimensionError("step: episode already reached its horizon");

    const Vec2 a = clip_action(spec, action);
    const Vec2 from = state.position;
    Vec2 to = from;
    to.x = detail::slide_axis(spec, from.x, a.x, from.y, true);
    to.y = detail::slide_axis(spec, from.y, a.y, to.x, false);

    double reward = 0.0;
    switch (spec.reward_kind) {
    case RewardKind::negative_distance_to_goal: reward = -distance(to, *spec.goal); break;
    case RewardKind::x_velocity: reward = to.x - from.x; break;
    }

    state.position = to;
    state.step_index += 1;
    return {from, a, reward, to, state_descriptor(spec, state), state.step_index == spec.horizon};
}

struct Episode {
    std::vector<Transition> transitions;
    double fitness = 0.0; // undiscounted return
    Vec2 behavior;        // descriptor of the final state

    int length() const { return static_cast<int>(transitions.size()); }
};

/// Plays one full episode with a deterministic policy network plus optional
/// Gaussian action noise (added before clipping).
template <typename Scalar>
Episode rollout(const EnvSpec& spec, const NetSpec& policy, const FlatParams<Scalar>& params,
                double exploration_noise_std, Rng* rng = nullptr) {
    if (policy.input_dim() != 2 || policy.output_dim() != 2)
        throw DimensionError("rollout: policy must map 2-D positions to 2-D actions");
    if (exploration_noise_std > 0.0 && rng == nullptr) throw DimensionError("rollout: noisy rollout needs an rng");

    Episode ep;
    ep.transitions.reserve(static_cast<std::size_t>(spec.horizon));
    EnvState state = reset(spec);
    Tape<Scalar> tape;
    Vector<Scalar> input(2);
    std::normal_distribution<double> noise(0.0, exploration_noise_std > 0.0 ? exploration_noise_std : 1.0);
    while (state.step_index < spec.horizon) {
        input << Scalar(state.position.x), Scalar(state.position.y);
        const auto& out = forward_batch(policy, params, input, tape);
        Vec2 action{static_cast<double>(out(0, 0)), static_cast<double>(out(1, 0))};
        if (exploration_noise_std > 0.0) {
            action.x += noise(*rng);
            action.y += noise(*rng);
        }
        ep.transitions.push_back(step(spec, state, action));
        ep.fitness += ep.transitions.back().reward;
    }
    ep.behavior = ep.transitions.back().state_descriptor;
    return ep;
}

// ---------------------------------------------------------------------------
// Layout files

namespace detail {

inline Vec2 vec2_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
        throw ConfigError("layout: " + what + " must be a [x, y] pair");
    return {j[0].get<double>(), j[1].get<double>()};
}

inline Box box_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_object() || !j.contains("lo") || !j.contains("hi") || j.size() != 2)
        throw ConfigError("layout: " + what + " must be {\"lo\": [x, y], \"hi\": [x, y]}");
    return {vec2_from_json(j["lo"], what + ".lo"), vec2_from_json(j["hi"], what + ".hi")};
}

inline nlohmann::json to_json(Vec2 v) { return nlohmann::json::array({v.x, v.y}); }
inline nlohmann::json to_json(const Box& b) { return {{"lo", to_json(b.lo)}, {"hi", to_json(b.hi)}}; }

} // namespace detail

inline EnvSpec env_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"name",    "version", "arena",        "walls",  "start",
                                                   "goal",    "horizon", "action_bound", "reward", "descriptor_box"};
    if (!j.is_object()) throw ConfigError("layout: top level must be an object");
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("layout: unknown key '" + key + "'");
    for (const char* key : {"arena", "start", "horizon", "action_bound", "reward"})
        if (!j.contains(key)) throw ConfigError(std::string("layout: missing key '") + key + "'");

    EnvSpec spec;
    spec.name = j.value("name", std::string("layout"));
    spec.arena = detail::box_from_json(j["arena"], "arena");
    if (j.contains("walls")) {
        if (!j["walls"].is_array()) throw ConfigError("layout: walls must be an array");
        for (std::size_t i = 0; i < j["walls"].size(); ++i)
            spec.walls.push_back(detail::box_from_json(j["walls"][i], "walls[" + std::to_string(i) + "]"));
    }
    spec.start = detail::vec2_from_json(j["start"], "start");
    if (j.contains("goal") && !j["goal"].is_null()) spec.goal = detail::vec2_from_json(j["goal"], "goal");
    if (!j["horizon"].is_number_integer()) throw ConfigError("layout: horizon must be an integer");
    spec.horizon = j["horizon"].get<int>();
    if (!j["action_bound"].is_number()) throw ConfigError("layout: action_bound must be a number");
    spec.action_bound = j["action_bound"].get<double>();
    const std::string reward = j["reward"].is_string() ? j["reward"].get<std::string>() : "";
    if (reward == "negative_distance_to_goal")
        spec.reward_kind = RewardKind::negative_distance_to_goal;
    else if (reward == "x_velocity")
        spec.reward_kind = RewardKind::x_velocity;
    else
        throw ConfigError("layout: reward must be 'negative_distance_to_goal' or 'x_velocity'");
    spec.descriptor_box =
        j.contains("descriptor_box") ? detail::box_from_json(j["descriptor_box"], "descriptor_box") : spec.arena;
    return spec;
}

inline nlohmann::json env_to_json(const EnvSpec& spec) {
    nlohmann::json walls = nlohmann::json::array();
    for (const Box& w : spec.walls) walls.push_back(detail::to_json(w));
    nlohmann::json j = {{"name", spec.name},
                        {"version", 1},
                        {"arena", detail::to_json(spec.arena)},
                        {"walls", walls},
                        {"start", detail::to_json(spec.start)},
                        {"horizon", spec.horizon},
                        {"action_bound", spec.action_bound},
                        {"reward", spec.reward_kind == RewardKind::x_velocity ? "x_velocity"
                                                                              : "negative_distance_to_goal"},
                        {"descriptor_box", detail::to_json(spec.descriptor_box)}};
    j["goal"] = spec.goal ? detail::to_json(*spec.goal) : nlohmann::json(nullptr);
    return j;
}

/// Reads a layout file. Structural problems throw ConfigError; semantic
/// problems (start inside a wall and so on) are left to validate().
inline EnvSpec load_layout(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open layout file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("layout file '" + path + "': " + e.what());
    }
    return env_from_json(j);
}

} // namespace qdpg
