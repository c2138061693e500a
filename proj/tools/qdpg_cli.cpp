// qdpg: run experiments, build the ablation table, plot artifacts, run the
// adaptation experiment, validate layouts and run the property suites.
//
// Exit codes: 0 success, 1 a run or check failed, 2 usage or config error.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>

#include "qdpg/check/suites.hpp"
#include "qdpg/config.hpp"
#include "qdpg/qdpg_loop.hpp"
#include "qdpg/svg_plot.hpp"

namespace fs = std::filesystem;
using namespace qdpg;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

std::mutex g_out;

void say(const std::string& s) {
    std::lock_guard lock(g_out);
    std::cout << s << std::endl;
}

void complain(const std::string& s) {
    std::lock_guard lock(g_out);
    std::cerr << "qdpg: " << s << std::endl;
}

fs::path seed_dir(const fs::path& root, std::uint64_t seed) { return root / ("seed_" + std::to_string(seed)); }

bool run_complete(const fs::path& dir) {
    std::ifstream in(dir / "report.json");
    if (!in) return false;
    const auto j = nlohmann::json::parse(in, nullptr, false);
    return !j.is_discarded() && j.value("completed", false);
}

struct Job {
    RunConfig config;
    fs::path dir;
};

/// Runs jobs on up to `jobs` threads; returns the number of failures.
int run_jobs(const std::vector<Job>& work, unsigned jobs, bool resume, bool progress) {
    std::atomic<std::size_t> next{0};
    std::atomic<int> failures{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < work.size(); i = next++) {
            const Job& job = work[i];
            const std::string tag = std::string(to_string(job.config.variant)) + " seed " + std::to_string(job.config.seed);
            if (resume && run_complete(job.dir)) {
                say(tag + ": complete, skipped");
                continue;
            }
            try {
                RunOptions opts;
                opts.progress = progress ? &std::cerr : nullptr;
                const RunReport r = run<Real>(job.config, job.dir, opts);
                std::ostringstream os;
                os << tag << ": best " << r.best_fitness << ", coverage " << r.final_coverage << ", "
                   << r.total_steps << " steps in " << r.wall_clock_seconds << " s -> " << job.dir.string();
                say(os.str());
            } catch (const std::exception& e) {
                complain(tag + " failed: " + e.what());
                ++failures;
            }
        }
    };
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < std::max(1u, jobs); ++t) pool.emplace_back(worker);
    pool.clear();
    return failures.load();
}

struct Common {
    std::string config;
    std::vector<std::uint64_t> seeds;
    std::string out;
    std::vector<std::string> overrides;
    unsigned jobs = 1;
    bool resume = false;
    bool progress = false;
};

void add_common(CLI::App* cmd, Common& c, bool seeds_default_range) {
    cmd->add_option("-c,--config", c.config, "Config file (JSON)")->required();
    auto* s = cmd->add_option("-s,--seeds", c.seeds, "Seeds, comma separated")->delimiter(',');
    if (seeds_default_range) s->default_str("0,1,2,3,4");
    cmd->add_option("-o,--out", c.out, "Output directory")->required();
    cmd->add_option("--override", c.overrides, "Dotted key=value, repeatable");
    cmd->add_option("-j,--jobs", c.jobs, "Concurrent runs")->check(CLI::PositiveNumber);
    cmd->add_flag("--resume", c.resume, "Skip runs whose report.json marks them complete");
    cmd->add_flag("--progress", c.progress, "Print progress to stderr");
}

// ---------------------------------------------------------------------------

int cmd_run(const Common& c) {
    const RunConfig base = load_config(c.config, c.overrides);
    std::vector<std::uint64_t> seeds = c.seeds;
    if (seeds.empty()) seeds.push_back(base.seed);
    std::vector<Job> work;
    for (auto s : seeds) {
        RunConfig rc = base;
        rc.seed = s;
        work.push_back({rc, seed_dir(c.out, s)});
    }
    return run_jobs(work, c.jobs, c.resume, c.progress) == 0 ? kOk : kFailed;
}

struct TableRow {
    std::string variant;
    std::vector<double> best, coverage;
};

/// Final best fitness and coverage of a run, read from its curve.csv.
std::pair<double, double> final_curve_values(const fs::path& dir) {
    const auto rows = svg::read_csv_rows((dir / "curve.csv").string());
    if (rows.empty()) throw ConfigError((dir / "curve.csv").string() + " has no rows");
    return {std::stod(rows.back().at(1)), std::stod(rows.back().at(2))};
}

void write_table(const fs::path& path, const std::vector<TableRow>& rows) {
    std::ofstream out(path);
    out << "variant,median_best_fitness,q1,q3,iqr,median_coverage,seeds,per_seed_best\n";
    out.precision(10);
    for (const auto& r : rows) {
        const double q1 = quantile(r.best, 0.25), q3 = quantile(r.best, 0.75);
        out << r.variant << ',' << quantile(r.best, 0.5) << ',' << q1 << ',' << q3 << ',' << q3 - q1 << ','
            << quantile(r.coverage, 0.5) << ',' << r.best.size() << ',';
        for (std::size_t i = 0; i < r.best.size(); ++i) out << (i ? ";" : "") << r.best[i];
        out << '\n';
    }
}

int cmd_ablate(const Common& c, const std::vector<std::string>& variant_names) {
    const RunConfig base = load_config(c.config, c.overrides);
    std::vector<std::uint64_t> seeds = c.seeds;
    if (seeds.empty()) seeds = {0, 1, 2, 3, 4};
    std::vector<Variant> variants;
    if (variant_names.empty())
        variants = all_variants();
    else
        for (const auto& v : variant_names) variants.push_back(variant_from_string(v));

    std::vector<Job> work;
    for (Variant v : variants)
        for (auto s : seeds) {
            RunConfig rc = base;
            rc.variant = v;
            rc.seed = s;
            rc.validate();
            work.push_back({rc, fs::path(c.out) / to_string(v) / ("seed_" + std::to_string(s))});
        }
    const int failures = run_jobs(work, c.jobs, c.resume, c.progress);

    std::vector<TableRow> table;
    for (Variant v : variants) {
        TableRow row{to_string(v), {}, {}};
        for (auto s : seeds) {
            const auto [best, cov] = final_curve_values(fs::path(c.out) / to_string(v) / ("seed_" + std::to_string(s)));
            row.best.push_back(best);
            row.coverage.push_back(cov);
        }
        table.push_back(std::move(row));
    }
    write_table(fs::path(c.out) / "table1.csv", table);
    say("wrote " + (fs::path(c.out) / "table1.csv").string());
    return failures == 0 ? kOk : kFailed;
}

// ---------------------------------------------------------------------------

RunConfig config_of_run(const fs::path& run_dir) {
    std::ifstream in(run_dir / "config.json");
    if (!in) throw ConfigError("no config.json in " + run_dir.string());
    nlohmann::json doc = default_config_json();
    detail::merge_strict(doc, nlohmann::json::parse(in), "");
    return config_from_json(doc, run_dir);
}

int cmd_adapt(const std::string& run_dir, std::size_t n_goals, std::size_t budget, std::uint64_t seed,
              const std::string& out_csv) {
    const RunConfig config = config_of_run(run_dir);
    const auto grid = ElitesGrid<Real>::load(run_dir);
    const fs::path csv = out_csv.empty() ? fs::path(run_dir) / "adaptation.csv" : fs::path(out_csv);
    if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
    std::ofstream out(csv);
    if (!out) throw ConfigError("cannot write " + csv.string());
    out << "goal_index,goal_x,goal_y,redraws,cell,score,final_x,final_y,goal_distance,evaluated\n";
    out.precision(17);

    Rng rng(seed);
    std::vector<double> scores, dists;
    for (std::size_t g = 0; g < n_goals; ++g) {
        std::size_t redraws = 0;
        const Vec2 goal = sample_free_goal(config.env, rng, &redraws);
        const AdaptResult r = adapt(grid, config.env, goal, budget);
        out << g << ',' << goal.x << ',' << goal.y << ',' << redraws << ',' << r.cell << ',' << r.score << ','
            << r.final_position.x << ',' << r.final_position.y << ',' << r.goal_distance << ',' << r.evaluated << '\n';
        scores.push_back(r.score);
        dists.push_back(r.goal_distance);
    }

    auto mean_std = [](const std::vector<double>& v) {
        if (v.empty()) return std::pair<double, double>{0.0, 0.0};
        double m = 0.0, s = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        for (double x : v) s += (x - m) * (x - m);
        return std::pair<double, double>{m, std::sqrt(s / static_cast<double>(v.size()))};
    };
    const auto [sm, ss] = mean_std(scores);
    const auto [dm, ds] = mean_std(dists);
    const double diag = config.env.arena.diagonal();
    const nlohmann::json summary = {{"goals", n_goals},           {"budget", budget},
                                    {"score_mean", sm},           {"score_std", ss},
                                    {"distance_mean", dm},        {"distance_std", ds},
                                    {"diagonal", diag},           {"distance_mean_over_diagonal", n_goals ? dm / diag : 0.0},
                                    {"occupied_cells", grid.size()}};
    write_json(csv.parent_path() / (csv.stem().string() + "_summary.json"), summary);
    std::ostringstream os;
    os << n_goals << " goals, budget " << budget << ": score " << sm << " +- " << ss << ", distance " << dm << " +- "
       << ds << " (" << 100.0 * (n_goals ? dm / diag : 0.0) << "% of diagonal)";
    say(os.str());
    return kOk;
}

int cmd_plot(const std::vector<std::string>& runs, const std::string& out) {
    std::vector<std::vector<svg::CurvePoint>> curves;
    for (const auto& r : runs) {
        const fs::path dir(r);
        const RunConfig config = config_of_run(dir);
        std::ofstream(dir / "coverage.svg") << svg::coverage_svg(config.env, svg::read_coverage((dir / "coverage.csv").string()));
        if (fs::exists(dir / "grid.params.bin")) std::ofstream(dir / "grid.svg") << svg::grid_svg(ElitesGrid<Real>::load(dir));
        curves.push_back(svg::read_curve((dir / "curve.csv").string()));
    }
    const fs::path target = out.empty() ? fs::path(runs.front()) : fs::path(out);
    fs::create_directories(target);
    std::ofstream(target / "curve.svg") << svg::curve_svg(curves);
    say("plotted " + std::to_string(runs.size()) + " run(s); curve.svg in " + target.string());
    return kOk;
}

int cmd_validate_env(const std::vector<std::string>& layouts) {
    int status = kOk;
    for (const auto& path : layouts) {
        try {
            const EnvSpec env = load_layout(path);
            const auto problems = validate(env);
            if (problems.empty()) {
                say(path + ": ok (" + std::to_string(env.walls.size()) + " walls, horizon " + std::to_string(env.horizon) + ")");
            } else {
                for (const auto& p : problems) complain(path + ": " + p);
                status = kUsage;
            }
        } catch (const std::exception& e) {
            complain(path + ": " + e.what());
            status = kUsage;
        }
    }
    return status;
}

int cmd_selftest(const std::string& layout, std::uint64_t seed, bool quick) {
    const EnvSpec env = load_layout(layout);
    RunConfig det;
    det.env = env;
    det.layout_path = layout;
    det.grid.bd_box = env.descriptor_box;
    det.seed = seed;
    const fs::path work = fs::temp_directory_path() / ("qdpg_selftest_" + std::to_string(seed));

    std::vector<check::SuiteResult> results;
    auto record = [&](check::SuiteResult r) {
        say(std::string(r.passed ? "PASS " : "FAIL ") + r.name + ": " + r.detail);
        results.push_back(std::move(r));
    };
    record(check::diversity_identity_suite(seed, quick ? 20 : 100));
    record(check::gradient_suite(seed, quick ? 20 : 100));
    record(check::knn_suite(seed, quick ? 10000 : 100000));
    record(check::insertion_suite(seed, quick ? 20000 : 100000));
    record(check::compatibility_suite(env, seed, 100));
    record(check::determinism_suite(det, work, quick ? 1600 : 2400));
    fs::remove_all(work);
    for (const auto& r : results)
        if (!r.passed) return kFailed;
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quality-diversity policy gradient experiments on 2-D point mazes"};
    app.require_subcommand(1);

    Common run_opts, ablate_opts;
    auto* run_cmd = app.add_subcommand("run", "Train one run per seed");
    add_common(run_cmd, run_opts, false);

    std::vector<std::string> variants;
    auto* ablate_cmd = app.add_subcommand("ablate", "Train every variant for every seed and write table1.csv");
    add_common(ablate_cmd, ablate_opts, true);
    ablate_cmd->add_option("--variants", variants, "Subset of variants, comma separated")->delimiter(',');

    std::string adapt_run, adapt_out;
    std::size_t n_goals = 100, budget = 20;
    std::uint64_t adapt_seed = 0;
    auto* adapt_cmd = app.add_subcommand("adapt", "Pick elites of a trained grid for random new goals");
    adapt_cmd->add_option("-r,--run", adapt_run, "Run directory with grid.params.bin and config.json")->required();
    adapt_cmd->add_option("-n,--goals", n_goals, "Number of goals")->capture_default_str();
    adapt_cmd->add_option("-b,--budget", budget, "Elites evaluated per goal")->capture_default_str()->check(CLI::PositiveNumber);
    adapt_cmd->add_option("-s,--seed", adapt_seed, "Goal sampling seed")->capture_default_str();
    adapt_cmd->add_option("-o,--out", adapt_out, "Per-goal CSV (default <run>/adaptation.csv)");

    std::vector<std::string> plot_runs;
    std::string plot_out;
    auto* plot_cmd = app.add_subcommand("plot", "Render coverage.svg, grid.svg and curve.svg");
    plot_cmd->add_option("runs", plot_runs, "Run directories (several seeds give quartile bands)")->required();
    plot_cmd->add_option("-o,--out", plot_out, "Directory for curve.svg (default: first run)");

    std::vector<std::string> layouts;
    auto* validate_cmd = app.add_subcommand("validate-env", "Check maze layout files");
    validate_cmd->add_option("layouts", layouts, "Layout JSON files")->required();

#ifdef QDPG_DATA_DIR
    std::string self_layout = std::string(QDPG_DATA_DIR) + "/point_maze.json";
#else
    std::string self_layout = "data/point_maze.json";
#endif
    std::uint64_t self_seed = 0;
    bool quick = false;
    auto* self_cmd = app.add_subcommand("selftest", "Run the property suites against their oracles");
    self_cmd->add_option("--layout", self_layout, "Layout used by the environment checks")->capture_default_str();
    self_cmd->add_option("--seed", self_seed, "Seed for the random instances")->capture_default_str();
    self_cmd->add_flag("--quick", quick, "Smaller instance counts");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*run_cmd) return cmd_run(run_opts);
        if (*ablate_cmd) return cmd_ablate(ablate_opts, variants);
        if (*adapt_cmd) return cmd_adapt(adapt_run, n_goals, budget, adapt_seed, adapt_out);
        if (*plot_cmd) return cmd_plot(plot_runs, plot_out);
        if (*validate_cmd) return cmd_validate_env(layouts);
        if (*self_cmd) return cmd_selftest(self_layout, self_seed, quick);
    } catch (const ConfigError& e) {
        complain(e.what());
        return kUsage;
    } catch (const std::exception& e) {
        complain(e.what());
        return kFailed;
    }
    return kUsage;
}
