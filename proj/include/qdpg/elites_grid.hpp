#pragma once

// MAP-Elites container over a Cartesian discretization of a 2-D behavior
// descriptor box: m meshes per dimension, m*m cells, row-major indexing.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "diffnet.hpp"

namespace qdpg {

struct GridSpec {
    Box bd_box{{0.0, 0.0}, {1.0, 1.0}};
    int meshes_per_dim = 5;

    std::size_t cell_count() const {
        return static_cast<std::size_t>(meshes_per_dim) * static_cast<std::size_t>(meshes_per_dim);
    }
};

template <typename Scalar>
struct Solution {
    FlatParams<Scalar> params;
    double fitness = 0.0;
    Vec2 bd;
};

enum class InsertOutcome { inserted, replaced, rejected };

inline const char* to_string(InsertOutcome o) {
    switch (o) {
    case InsertOutcome::inserted: return "inserted";
    case InsertOutcome::replaced: return "replaced";
    case InsertOutcome::rejected: return "rejected";
    }
    return "?";
}

/// Row-major cell of `bd` (clipped to the box first). A descriptor on an
/// interior mesh boundary belongs to the higher cell; the upper edge of the
/// box belongs to the last cell.
inline std::size_t cell_index(const GridSpec& spec, Vec2 bd) {
    if (!is_finite(bd)) throw NonFiniteError("cell_index: non-finite descriptor");
    const Vec2 p = spec.bd_box.clip(bd);
    const int m = spec.meshes_per_dim;
    auto bin = [m](double v, double lo, double hi) {
        const int i = static_cast<int>(std::floor((v - lo) / (hi - lo) * m));
        return std::clamp(i, 0, m - 1);
    };
    const int col = bin(p.x, spec.bd_box.lo.x, spec.bd_box.hi.x);
    const int row = bin(p.y, spec.bd_box.lo.y, spec.bd_box.hi.y);
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(m) + static_cast<std::size_t>(col);
}

inline Vec2 cell_center(const GridSpec& spec, std::size_t index) {
    const auto m = static_cast<std::size_t>(spec.meshes_per_dim);
    const double col = static_cast<double>(index % m) + 0.5;
    const double row = static_cast<double>(index / m) + 0.5;
    return {spec.bd_box.lo.x + col / static_cast<double>(m) * spec.bd_box.width(),
            spec.bd_box.lo.y + row / static_cast<double>(m) * spec.bd_box.height()};
}

/// Sum over points of the distance to the nearest other point.
inline double population_diversity(std::span<const Vec2> bds) {
    if (bds.size() < 2) throw DimensionError("population_diversity: need at least two solutions");
    double total = 0.0;
    for (std::size_t i = 0; i < bds.size(); ++i) {
        double nearest = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < bds.size(); ++k)
            if (k != i) nearest = std::min(nearest, distance(bds[i], bds[k]));
        total += nearest;
    }
    return total;
}

template <typename Scalar>
double population_diversity(const std::vector<Solution<Scalar>>& solutions) {
    std::vector<Vec2> bds;
    bds.reserve(solutions.size());
    for (const auto& s : solutions) bds.push_back(s.bd);
    return population_diversity(bds);
}

template <typename Scalar>
class ElitesGrid {
public:
    ElitesGrid(GridSpec spec, NetSpec policy_spec) : spec_(spec), policy_spec_(std::move(policy_spec)) {
        if (spec_.meshes_per_dim <= 0) throw DimensionError("ElitesGrid: meshes_per_dim must be positive");
        if (!spec_.bd_box.valid()) throw DimensionError("ElitesGrid: invalid descriptor box");
        cells_.resize(spec_.cell_count());
    }

    const GridSpec& spec() const { return spec_; }
    const NetSpec& policy_spec() const { return policy_spec_; }

    InsertOutcome try_insert(Solution<Scalar> candidate) {
        if (!std::isfinite(candidate.fitness)) throw NonFiniteError("try_insert: non-finite fitness");
        if (!is_finite(candidate.bd)) throw NonFiniteError("try_insert: non-finite descriptor");
        if (candidate.params.size() != policy_spec_.parameter_count())
            throw DimensionError("try_insert: parameter vector does not match the policy spec");
        candidate.bd = spec_.bd_box.clip(candidate.bd);
        auto& cell = cells_[cell_index(spec_, candidate.bd)];
        if (!cell) {
            cell = std::move(candidate);
            ++insertion_count_;
            ++occupied_;
            return InsertOutcome::inserted;
        }
        if (candidate.fitness > cell->fitness) {
            cell = std::move(candidate);
            ++insertion_count_;
            return InsertOutcome::replaced;
        }
        ++rejection_count_;
        return InsertOutcome::rejected;
    }

    /// n uniform draws with replacement over occupied cells; deep copies.
    std::vector<Solution<Scalar>> sample_parents(std::size_t n, Rng& rng) const {
        const auto occ = occupied_cells();
        if (occ.empty()) throw DimensionError("sample_parents: grid is empty");
        std::uniform_int_distribution<std::size_t> pick(0, occ.size() - 1);
        std::vector<Solution<Scalar>> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(*cells_[occ[pick(rng)]]);
        return out;
    }

    std::vector<std::size_t> occupied_cells() const {
        std::vector<std::size_t> occ;
        occ.reserve(occupied_);
        for (std::size_t i = 0; i < cells_.size(); ++i)
            if (cells_[i]) occ.push_back(i);
        return occ;
    }

    const std::optional<Solution<Scalar>>& cell(std::size_t index) const { return cells_.at(index); }

    std::vector<Solution<Scalar>> elites() const {
        std::vector<Solution<Scalar>> out;
        for (const auto& c : cells_)
            if (c) out.push_back(*c);
        return out;
    }

    std::size_t size() const { return occupied_; }
    bool empty() const { return occupied_ == 0; }
    double coverage() const { return static_cast<double>(occupied_) / static_cast<double>(cells_.size()); }

    double best_fitness() const {
        if (empty()) throw DimensionError("best_fitness: grid is empty");
        double best = -std::numeric_limits<double>::infinity();
        for (const auto& c : cells_)
            if (c) best = std::max(best, c->fitness);
        return best;
    }

    std::size_t insertion_count() const { return insertion_count_; }
    std::size_t rejection_count() const { return rejection_count_; }

    /// Fingerprint of the stored elites (counters excluded).
    std::uint64_t content_hash() const {
        Fnv1a h;
        for (std::size_t i = 0; i < cells_.size(); ++i) {
            if (!cells_[i]) continue;
            h.value(static_cast<std::uint64_t>(i));
            h.value(cells_[i]->fitness);
            h.value(cells_[i]->bd.x);
            h.value(cells_[i]->bd.y);
            h.bytes(cells_[i]->params.data(), sizeof(Scalar) * static_cast<std::size_t>(cells_[i]->params.size()));
        }
        return h.digest();
    }

    // Snapshot: grid.csv (cell_index,bd_x,bd_y,fitness) for humans and
    // grid.params.bin carrying the grid spec, the policy spec and every elite.

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        {
            std::ofstream csv(dir / "grid.csv");
            if (!csv) throw ConfigError("cannot write " + (dir / "grid.csv").string());
            csv << "cell_index,bd_x,bd_y,fitness\n";
            char line[160];
            for (std::size_t i = 0; i < cells_.size(); ++i) {
                if (!cells_[i]) continue;
                std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g\n", i, cells_[i]->bd.x, cells_[i]->bd.y,
                              cells_[i]->fitness);
                csv << line;
            }
        }
        std::ofstream bin(dir / "grid.params.bin", std::ios::binary);
        if (!bin) throw ConfigError("cannot write " + (dir / "grid.params.bin").string());
        bin.write(kMagic, 8);
        detail::write_le<std::uint32_t>(bin, 1);
        detail::write_le<double>(bin, spec_.bd_box.lo.x);
        detail::write_le<double>(bin, spec_.bd_box.lo.y);
        detail::write_le<double>(bin, spec_.bd_box.hi.x);
        detail::write_le<double>(bin, spec_.bd_box.hi.y);
        detail::write_le<std::uint32_t>(bin, static_cast<std::uint32_t>(spec_.meshes_per_dim));
        write_spec_header(bin, policy_spec_);
        detail::write_le<std::uint64_t>(bin, occupied_);
        for (std::size_t i = 0; i < cells_.size(); ++i) {
            if (!cells_[i]) continue;
            detail::write_le<std::uint64_t>(bin, i);
            detail::write_le<double>(bin, cells_[i]->fitness);
            detail::write_le<double>(bin, cells_[i]->bd.x);
            detail::write_le<double>(bin, cells_[i]->bd.y);
            write_values(bin, cells_[i]->params);
        }
        if (!bin) throw ConfigError("short write on " + (dir / "grid.params.bin").string());
    }

    static ElitesGrid load(const std::filesystem::path& dir) {
        std::ifstream bin(dir / "grid.params.bin", std::ios::binary);
        if (!bin) throw ConfigError("cannot open " + (dir / "grid.params.bin").string());
        char magic[8];
        if (!bin.read(magic, 8) || std::string(magic, 8) != std::string(kMagic, 8))
            throw ConfigError("grid.params.bin: bad magic");
        if (detail::read_le<std::uint32_t>(bin) != 1) throw ConfigError("grid.params.bin: unsupported version");
        GridSpec gs;
        gs.bd_box.lo.x = detail::read_le<double>(bin);
        gs.bd_box.lo.y = detail::read_le<double>(bin);
        gs.bd_box.hi.x = detail::read_le<double>(bin);
        gs.bd_box.hi.y = detail::read_le<double>(bin);
        gs.meshes_per_dim = static_cast<int>(detail::read_le<std::uint32_t>(bin));
        ElitesGrid grid(gs, read_spec_header(bin));
        const auto n = detail::read_le<std::uint64_t>(bin);
        if (n > gs.cell_count()) throw ConfigError("grid.params.bin: more elites than cells");
        for (std::uint64_t e = 0; e < n; ++e) {
            const auto idx = detail::read_le<std::uint64_t>(bin);
            if (idx >= gs.cell_count()) throw ConfigError("grid.params.bin: cell index out of range");
            Solution<Scalar> s;
            s.fitness = detail::read_le<double>(bin);
            s.bd.x = detail::read_le<double>(bin);
            s.bd.y = detail::read_le<double>(bin);
            s.params = read_values<Scalar>(bin, grid.policy_spec_);
            if (cell_index(gs, s.bd) != idx) throw ConfigError("grid.params.bin: elite stored in the wrong cell");
            if (grid.cells_[idx]) throw ConfigError("grid.params.bin: duplicate cell");
            grid.cells_[idx] = std::move(s);
            ++grid.occupied_;
        }
        return grid;
    }

private:
    static constexpr char kMagic[8] = {'Q', 'D', 'P', 'G', 'G', 'R', 'I', 'D'};

    GridSpec spec_;
    NetSpec policy_spec_;
    std::vector<std::optional<Solution<Scalar>>> cells_;
    std::size_t occupied_ = 0;
    std::size_t insertion_count_ = 0;
    std::size_t rejection_count_ = 0;
};

} // namespace qdpg
