#pragma once

// Run configuration: JSON file -> defaults merged with strict key checking
// -> dotted overrides -> RunConfig. The resolved form (with the maze layout
// inlined) is what gets echoed to a run directory.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "env_maze.hpp"
#include "elites_grid.hpp"
#include "novelty_archive.hpp"
#include "pg_update.hpp"

namespace qdpg {

enum class Variant { qdpg, qdpg_sum, dpg_only, qpg_only, td3_baseline };
enum class Assignment { random, by_index };
// Which step count feeds gradient_steps = int(actor_steps * ratio).
enum class ActorStepsScope { worker, generation };

inline const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> v{Variant::qdpg, Variant::qdpg_sum, Variant::dpg_only, Variant::qpg_only,
                                        Variant::td3_baseline};
    return v;
}

inline const char* to_string(Variant v) {
    switch (v) {
    case Variant::qdpg: return "qdpg";
    case Variant::qdpg_sum: return "qdpg_sum";
    case Variant::dpg_only: return "dpg_only";
    case Variant::qpg_only: return "qpg_only";
    case Variant::td3_baseline: return "td3_baseline";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    for (Variant v : all_variants())
        if (s == to_string(v)) return v;
    throw ConfigError("unknown variant '" + s + "'");
}

struct RunConfig {
    Variant variant = Variant::qdpg;
    std::size_t population = 4;
    std::uint64_t max_steps = 1'000'000;
    double gradient_steps_ratio = 4.0;
    ActorStepsScope actor_steps_scope = ActorStepsScope::worker;
    std::uint64_t seed = 0;
    std::uint64_t eval_interval = 5000;
    double exploration_noise = 0.1; // fraction of the action bound
    Assignment assignment = Assignment::random;
    ExecutionMode execution = ExecutionMode::single_threaded;

    std::string layout_path; // informational once env is resolved
    EnvSpec env;
    GridSpec grid;
    ArchiveConfig archive;
    UpdateConfig update;
    double smoothing_noise_std = 0.2;  // fraction of the action bound
    double smoothing_noise_clip = 0.5; // fraction of the action bound
    std::vector<std::size_t> policy_hidden{64, 32};
    std::vector<std::size_t> critic_hidden{64, 32};
    std::size_t replay_capacity = 1'000'000;

    NetSpec policy_spec() const {
        return NetSpec(2, policy_hidden, 2, OutputActivation::scaled_tanh, env.action_bound);
    }
    NetSpec critic_spec() const { return NetSpec(4, critic_hidden, 1, OutputActivation::identity); }

    /// Update settings with noise converted to absolute units.
    UpdateConfig resolved_update() const {
        UpdateConfig u = update;
        u.action_bound = env.action_bound;
        u.smoothing_noise_std = smoothing_noise_std * env.action_bound;
        u.smoothing_noise_clip = smoothing_noise_clip * env.action_bound;
        return u;
    }

    void validate() const {
        if (population == 0) throw ConfigError("run.population must be positive");
        if (variant == Variant::qdpg && population % 2 != 0)
            throw ConfigError("run.population must be even for the qdpg variant");
        if (max_steps == 0) throw ConfigError("run.max_steps must be positive");
        if (!(gradient_steps_ratio >= 0.0)) throw ConfigError("run.gradient_steps_ratio must be >= 0");
        if (eval_interval == 0) throw ConfigError("run.eval_interval must be positive");
        if (!(exploration_noise >= 0.0)) throw ConfigError("run.exploration_noise must be >= 0");
        if (replay_capacity == 0) throw ConfigError("replay.capacity must be positive");
        if (grid.meshes_per_dim <= 0) throw ConfigError("grid.meshes_per_dim must be positive");
        if (!grid.bd_box.valid()) throw ConfigError("grid.bd_box is invalid");
        if (archive.capacity == 0 || archive.k == 0) throw ConfigError("archive.capacity and archive.k must be positive");
        if (!(smoothing_noise_std >= 0.0) || !(smoothing_noise_clip >= 0.0))
            throw ConfigError("update smoothing noise fractions must be >= 0");
        const auto problems = qdpg::validate(env);
        if (!problems.empty()) throw ConfigError("env: " + problems.front());
        resolved_update().validate();
    }
};

namespace detail {

template <typename E>
E enum_from(const nlohmann::json& j, const std::string& key, std::initializer_list<std::pair<const char*, E>> table) {
    if (!j.is_string()) throw ConfigError(key + " must be a string");
    const auto s = j.get<std::string>();
    for (const auto& [name, value] : table)
        if (s == name) return value;
    throw ConfigError(key + ": unknown value '" + s + "'");
}

// Copies `src` over `dst`, refusing keys that `dst` does not have.
inline void merge_strict(nlohmann::json& dst, const nlohmann::json& src, const std::string& path) {
    if (!src.is_object()) throw ConfigError((path.empty() ? "config" : path) + " must be an object");
    for (auto it = src.begin(); it != src.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!dst.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        auto& slot = dst[it.key()];
        if (slot.is_object() && it.value().is_object() && key != "env.layout")
            merge_strict(slot, it.value(), key);
        else
            slot = it.value();
    }
}

inline double number(const nlohmann::json& j, const std::string& key) {
    if (!j.is_number()) throw ConfigError(key + " must be a number");
    return j.get<double>();
}

inline std::uint64_t count(const nlohmann::json& j, const std::string& key) {
    if (!j.is_number_integer() || j.get<long long>() < 0) throw ConfigError(key + " must be a non-negative integer");
    return j.get<std::uint64_t>();
}

inline std::vector<std::size_t> widths(const nlohmann::json& j, const std::string& key) {
    if (!j.is_array()) throw ConfigError(key + " must be an array of layer widths");
    std::vector<std::size_t> out;
    for (const auto& w : j) {
        if (!w.is_number_integer() || w.get<long long>() <= 0) throw ConfigError(key + " widths must be positive");
        out.push_back(w.get<std::size_t>());
    }
    return out;
}

} // namespace detail

/// Defaults in file form. Every accepted key appears here.
inline nlohmann::json default_config_json() {
    const RunConfig d;
    return {
        {"run",
         {{"variant", "qdpg"},
          {"population", d.population},
          {"max_steps", d.max_steps},
          {"gradient_steps_ratio", d.gradient_steps_ratio},
          {"actor_steps_scope", "worker"},
          {"seed", d.seed},
          {"eval_interval", d.eval_interval},
          {"exploration_noise", d.exploration_noise},
          {"assignment", "random"},
          {"execution", "single_threaded"}}},
        {"env", {{"layout", nullptr}}},
        {"grid", {{"meshes_per_dim", d.grid.meshes_per_dim}, {"bd_box", nullptr}}},
        {"archive",
         {{"capacity", d.archive.capacity},
          {"k", d.archive.k},
          {"accept_threshold", d.archive.accept_threshold},
          {"reward_form", "mean"}}},
        {"update",
         {{"gamma", d.update.gamma},
          {"diversity_gamma", d.update.diversity_gamma},
          {"lr", d.update.lr},
          {"actor_lr", nullptr},
          {"critic_lr", nullptr},
          {"policy_delay", d.update.policy_delay},
          {"tau", d.update.tau},
          {"batch_size", d.update.batch_size},
          {"smoothing_noise_std", d.smoothing_noise_std},
          {"smoothing_noise_clip", d.smoothing_noise_clip},
          {"loss_reduction", "mean"},
          {"actor_loss_reduction", "sum"},
          {"normalize_critic_actions", d.update.normalize_critic_actions}}},
        {"network", {{"policy_hidden", d.policy_hidden}, {"critic_hidden", d.critic_hidden}}},
        {"replay", {{"capacity", d.replay_capacity}}},
    };
}

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON
/// when possible and taken as a bare string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    nlohmann::json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    *node = value;
}

/// Builds a RunConfig from a fully merged document. Relative layout paths
/// resolve against `base_dir`.
inline RunConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {}) {
    using detail::count;
    using detail::number;
    RunConfig c;
    const auto& run = doc.at("run");
    c.variant = variant_from_string(run.at("variant").is_string() ? run.at("variant").get<std::string>() : "");
    c.population = count(run.at("population"), "run.population");
    c.max_steps = count(run.at("max_steps"), "run.max_steps");
    c.gradient_steps_ratio = number(run.at("gradient_steps_ratio"), "run.gradient_steps_ratio");
    c.actor_steps_scope = detail::enum_from<ActorStepsScope>(
        run.at("actor_steps_scope"), "run.actor_steps_scope",
        {{"worker", ActorStepsScope::worker}, {"generation", ActorStepsScope::generation}});
    c.seed = count(run.at("seed"), "run.seed");
    c.eval_interval = count(run.at("eval_interval"), "run.eval_interval");
    c.exploration_noise = number(run.at("exploration_noise"), "run.exploration_noise");
    c.assignment = detail::enum_from<Assignment>(run.at("assignment"), "run.assignment",
                                                 {{"random", Assignment::random}, {"by_index", Assignment::by_index}});
    c.execution = detail::enum_from<ExecutionMode>(
        run.at("execution"), "run.execution",
        {{"single_threaded", ExecutionMode::single_threaded}, {"parallel", ExecutionMode::parallel}});

    const auto& layout = doc.at("env").at("layout");
    if (layout.is_string()) {
        std::filesystem::path p = layout.get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        c.layout_path = p.string();
        c.env = load_layout(c.layout_path);
    } else if (layout.is_object()) {
        c.env = env_from_json(layout);
    } else {
        throw ConfigError("env.layout must be a layout file path or an inline layout object");
    }

    const auto& grid = doc.at("grid");
    c.grid.meshes_per_dim = static_cast<int>(count(grid.at("meshes_per_dim"), "grid.meshes_per_dim"));
    c.grid.bd_box = grid.at("bd_box").is_null() ? c.env.descriptor_box : detail::box_from_json(grid.at("bd_box"), "grid.bd_box");

    const auto& ar = doc.at("archive");
    c.archive.capacity = count(ar.at("capacity"), "archive.capacity");
    c.archive.k = count(ar.at("k"), "archive.k");
    c.archive.accept_threshold = number(ar.at("accept_threshold"), "archive.accept_threshold");
    c.archive.reward_form = detail::enum_from<RewardForm>(ar.at("reward_form"), "archive.reward_form",
                                                          {{"mean", RewardForm::mean}, {"sum", RewardForm::sum}});

    const auto& up = doc.at("update");
    c.update.gamma = number(up.at("gamma"), "update.gamma");
    c.update.diversity_gamma = number(up.at("diversity_gamma"), "update.diversity_gamma");
    c.update.lr = number(up.at("lr"), "update.lr");
    if (!up.at("actor_lr").is_null()) c.update.actor_lr = number(up.at("actor_lr"), "update.actor_lr");
    if (!up.at("critic_lr").is_null()) c.update.critic_lr = number(up.at("critic_lr"), "update.critic_lr");
    c.update.policy_delay = static_cast<int>(count(up.at("policy_delay"), "update.policy_delay"));
    c.update.tau = number(up.at("tau"), "update.tau");
    c.update.batch_size = count(up.at("batch_size"), "update.batch_size");
    c.smoothing_noise_std = number(up.at("smoothing_noise_std"), "update.smoothing_noise_std");
    c.smoothing_noise_clip = number(up.at("smoothing_noise_clip"), "update.smoothing_noise_clip");
    c.update.reduction = detail::enum_from<LossReduction>(
        up.at("loss_reduction"), "update.loss_reduction", {{"mean", LossReduction::mean}, {"sum", LossReduction::sum}});
    c.update.actor_reduction =
        detail::enum_from<LossReduction>(up.at("actor_loss_reduction"), "update.actor_loss_reduction",
                                         {{"mean", LossReduction::mean}, {"sum", LossReduction::sum}});
    if (!up.at("normalize_critic_actions").is_boolean())
        throw ConfigError("update.normalize_critic_actions must be true or false");
    c.update.normalize_critic_actions = up.at("normalize_critic_actions").get<bool>();

    c.policy_hidden = detail::widths(doc.at("network").at("policy_hidden"), "network.policy_hidden");
    c.critic_hidden = detail::widths(doc.at("network").at("critic_hidden"), "network.critic_hidden");
    c.replay_capacity = count(doc.at("replay").at("capacity"), "replay.capacity");

    c.validate();
    return c;
}

/// Fully resolved document, layout inlined. config_from_json() on this
/// reproduces the same RunConfig.
inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j = default_config_json();
    auto& run = j["run"];
    run["variant"] = to_string(c.variant);
    run["population"] = c.population;
    run["max_steps"] = c.max_steps;
    run["gradient_steps_ratio"] = c.gradient_steps_ratio;
    run["actor_steps_scope"] = c.actor_steps_scope == ActorStepsScope::worker ? "worker" : "generation";
    run["seed"] = c.seed;
    run["eval_interval"] = c.eval_interval;
    run["exploration_noise"] = c.exploration_noise;
    run["assignment"] = c.assignment == Assignment::random ? "random" : "by_index";
    run["execution"] = c.execution == ExecutionMode::parallel ? "parallel" : "single_threaded";
    j["env"]["layout"] = env_to_json(c.env);
    j["grid"]["meshes_per_dim"] = c.grid.meshes_per_dim;
    j["grid"]["bd_box"] = detail::to_json(c.grid.bd_box);
    auto& ar = j["archive"];
    ar["capacity"] = c.archive.capacity;
    ar["k"] = c.archive.k;
    ar["accept_threshold"] = c.archive.accept_threshold;
    ar["reward_form"] = c.archive.reward_form == RewardForm::mean ? "mean" : "sum";
    auto& up = j["update"];
    up["gamma"] = c.update.gamma;
    up["diversity_gamma"] = c.update.diversity_gamma;
    up["lr"] = c.update.lr;
    up["actor_lr"] = c.update.actor_lr ? nlohmann::json(*c.update.actor_lr) : nlohmann::json(nullptr);
    up["critic_lr"] = c.update.critic_lr ? nlohmann::json(*c.update.critic_lr) : nlohmann::json(nullptr);
    up["policy_delay"] = c.update.policy_delay;
    up["tau"] = c.update.tau;
    up["batch_size"] = c.update.batch_size;
    up["smoothing_noise_std"] = c.smoothing_noise_std;
    up["smoothing_noise_clip"] = c.smoothing_noise_clip;
    up["loss_reduction"] = c.update.reduction == LossReduction::mean ? "mean" : "sum";
    up["actor_loss_reduction"] = c.update.actor_reduction == LossReduction::mean ? "mean" : "sum";
    up["normalize_critic_actions"] = c.update.normalize_critic_actions;
    j["network"]["policy_hidden"] = c.policy_hidden;
    j["network"]["critic_hidden"] = c.critic_hidden;
    j["replay"]["capacity"] = c.replay_capacity;
    return j;
}

/// Reads a config file, merges it over the defaults, applies overrides.
inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json file;
    try {
        file = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    nlohmann::json doc = default_config_json();
    detail::merge_strict(doc, file, "");
    for (const auto& o : overrides) apply_override(doc, o);
    try {
        return config_from_json(doc, std::filesystem::path(path).parent_path());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

} // namespace qdpg
