#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "qdpg/config.hpp"

using namespace qdpg;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& text) {
    const fs::path p = fs::temp_directory_path() / name;
    std::ofstream(p) << text;
    return p;
}

} // namespace

TEST(Config, ShippedFileMatchesDefaults) {
    const RunConfig c = load_config(QDPG_CONFIG_DIR "/point_maze.json");
    EXPECT_EQ(c.variant, Variant::qdpg);
    EXPECT_EQ(c.population, 4u);
    EXPECT_EQ(c.max_steps, 1000000u);
    EXPECT_EQ(c.update.batch_size, 256u);
    EXPECT_EQ(c.update.lr, 6e-3);
    EXPECT_EQ(c.update.policy_delay, 2);
    EXPECT_EQ(c.archive.k, 10u);
    EXPECT_EQ(c.archive.capacity, 10000u);
    EXPECT_EQ(c.grid.meshes_per_dim, 5);
    EXPECT_EQ(c.grid.bd_box, c.env.descriptor_box);
    EXPECT_EQ(c.env.horizon, 200);
    EXPECT_EQ(c.policy_hidden, (std::vector<std::size_t>{64, 32}));
}

TEST(Config, ResolvedNoiseIsAbsolute) {
    const RunConfig c = load_config(QDPG_CONFIG_DIR "/point_maze.json");
    const UpdateConfig u = c.resolved_update();
    EXPECT_DOUBLE_EQ(u.smoothing_noise_std, c.smoothing_noise_std * c.env.action_bound);
    EXPECT_DOUBLE_EQ(u.smoothing_noise_clip, c.smoothing_noise_clip * c.env.action_bound);
    EXPECT_EQ(u.action_bound, c.env.action_bound);
}

TEST(Config, UnknownKeysAreRejected) {
    const auto p = write_temp("qdpg_cfg_unknown.json",
                              R"({"run": {"populaton": 4}, "env": {"layout": ")" QDPG_DATA_DIR R"(/point_maze.json"}})");
    EXPECT_THROW(load_config(p.string()), ConfigError);
    fs::remove(p);
}

TEST(Config, OverridesApplyAndValidate) {
    const RunConfig c = load_config(QDPG_CONFIG_DIR "/point_maze.json",
                                    {"run.seed=7", "run.variant=dpg_only", "update.actor_lr=0.001"});
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.variant, Variant::dpg_only);
    EXPECT_EQ(c.update.effective_actor_lr(), 0.001);
    EXPECT_EQ(c.update.effective_critic_lr(), 6e-3);
    EXPECT_THROW(load_config(QDPG_CONFIG_DIR "/point_maze.json", {"run.popsize=3"}), ConfigError);
    EXPECT_THROW(load_config(QDPG_CONFIG_DIR "/point_maze.json", {"run.population=3"}), ConfigError);
    EXPECT_THROW(load_config(QDPG_CONFIG_DIR "/point_maze.json", {"run.variant=me_es"}), ConfigError);
    EXPECT_THROW(load_config(QDPG_CONFIG_DIR "/point_maze.json", {"seed"}), ConfigError);
}

TEST(Config, MissingFileAndLayoutAreConfigErrors) {
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
    const auto p = write_temp("qdpg_cfg_nolayout.json", R"({"run": {"seed": 1}})");
    EXPECT_THROW(load_config(p.string()), ConfigError);
    fs::remove(p);
}

TEST(Config, RelativeLayoutResolvesAgainstConfigDirectory) {
    const RunConfig c = load_config(QDPG_CONFIG_DIR "/point_trap.json");
    EXPECT_TRUE(fs::exists(c.layout_path));
    EXPECT_FALSE(c.env.goal.has_value());
}

TEST(Config, ResolvedDocumentRoundTrips) {
    const RunConfig a = load_config(QDPG_CONFIG_DIR "/point_maze.json", {"run.seed=3", "update.tau=0.01"});
    const nlohmann::json doc = config_to_json(a);
    const RunConfig b = config_from_json(doc);
    EXPECT_EQ(config_to_json(b), doc);
    EXPECT_EQ(b.env.walls, a.env.walls);
    EXPECT_EQ(b.update.tau, 0.01);
}

TEST(Config, EveryVariantParses) {
    for (Variant v : all_variants()) EXPECT_EQ(variant_from_string(to_string(v)), v);
}
