#pragma once

// Bounded FIFO archive of state descriptors with exact k-nearest-neighbor
// queries. Entries live in a static k-d tree that is rebuilt every few dozen
// insertions; newer entries are scanned linearly and evicted ones are skipped
// by id. Results are identical to a linear scan, including the tie rule
// (equal distances: older entry first).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"

namespace qdpg {

enum class RewardForm { mean, sum };

struct ArchiveConfig {
    std::size_t capacity = 10000;
    std::size_t k = 10;
    double accept_threshold = 1e-4;
    RewardForm reward_form = RewardForm::mean;
};

enum class AddOutcome { accepted, filtered };

struct Neighbor {
    Vec2 descriptor;
    double distance = 0.0;
    std::uint64_t id = 0; // insertion index

    friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

class DescriptorArchive {
public:
    explicit DescriptorArchive(ArchiveConfig config = {}) : config_(config) {
        if (config_.capacity == 0) throw DimensionError("DescriptorArchive: capacity must be positive");
        if (config_.k == 0) throw DimensionError("DescriptorArchive: k must be positive");
    }

    const ArchiveConfig& config() const { return config_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    /// Entries oldest first, with their insertion indices.
    std::vector<Neighbor> entries() const {
        std::vector<Neighbor> out;
        out.reserve(entries_.size());
        for (std::size_t i = 0; i < entries_.size(); ++i) out.push_back({entries_[i], 0.0, first_id_ + i});
        return out;
    }

    /// Accepts unconditionally while fewer than k entries are stored;
    /// afterwards only when the mean distance to the k nearest entries
    /// exceeds the acceptance threshold.
    AddOutcome try_add(Vec2 descriptor) {
        if (!is_finite(descriptor)) throw NonFiniteError("try_add: non-finite descriptor");
        if (entries_.size() >= config_.k) {
            const auto nn = knn(descriptor, config_.k);
            double sum = 0.0;
            for (const auto& n : nn) sum += n.distance;
            if (!(sum / static_cast<double>(nn.size()) > config_.accept_threshold)) return AddOutcome::filtered;
        }
        push(descriptor);
        return AddOutcome::accepted;
    }

    /// Appends without the acceptance test (warm starts from a dump).
    void push(Vec2 descriptor) {
        if (!is_finite(descriptor)) throw NonFiniteError("push: non-finite descriptor");
        entries_.push_back(descriptor);
        tail_.push_back(descriptor);
        if (entries_.size() > config_.capacity) {
            entries_.pop_front();
            ++first_id_;
        }
        if (tail_.size() >= kRebuildEvery) rebuild();
    }

    /// Moves every entry into the spatial index. Queries are exact either
    /// way; this only makes them faster while the archive stays unchanged.
    void reindex() {
        if (!tail_.empty()) rebuild();
    }

    /// Exact k nearest entries, ascending by (distance, insertion index).
    std::vector<Neighbor> knn(Vec2 query, std::size_t k) const {
        std::vector<Neighbor> scratch;
        return knn(query, k, scratch);
    }

    std::vector<Neighbor> knn(Vec2 query, std::size_t k, std::vector<Neighbor>& scratch) const {
        if (entries_.empty()) throw DimensionError("knn: archive is empty");
        if (!is_finite(query)) throw NonFiniteError("knn: non-finite query");
        const std::size_t want = std::min(k, entries_.size());
        if (want == 0) return {};

        knn_into(query, want, scratch);
        return scratch;
    }

    /// knn() writing its result into `out`, without allocating once `out` has capacity.
    void knn_into(Vec2 query, std::size_t want, std::vector<Neighbor>& out) const {
        out.clear();
        Search search{query, want, first_id_, out};
        if (!nodes_.empty()) descend(search);
        for (std::size_t i = 0; i < tail_.size(); ++i)
            if (tree_end_ + i >= first_id_) search.offer(tail_[i], tree_end_ + i);
    }

    /// Mean (or sum, per config) distance to the k nearest entries; 0 when empty.
    double diversity_reward(Vec2 descriptor) const {
        std::vector<Neighbor> scratch;
        return diversity_reward(descriptor, scratch);
    }

    double diversity_reward(Vec2 descriptor, std::vector<Neighbor>& scratch) const {
        if (entries_.empty()) return 0.0;
        if (!is_finite(descriptor)) throw NonFiniteError("diversity_reward: non-finite descriptor");
        knn_into(descriptor, std::min(config_.k, entries_.size()), scratch);
        double sum = 0.0;
        for (const auto& n : scratch) sum += n.distance;
        return config_.reward_form == RewardForm::mean ? sum / static_cast<double>(scratch.size()) : sum;
    }

    /// CSV dump: insertion_index,x,y
    void save_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw ConfigError("cannot write " + path);
        out << "insertion_index,x,y\n";
        char line[128];
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            std::snprintf(line, sizeof line, "%llu,%.17g,%.17g\n",
                          static_cast<unsigned long long>(first_id_ + i), entries_[i].x, entries_[i].y);
            out << line;
        }
    }

    static DescriptorArchive load_csv(const std::string& path, ArchiveConfig config) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open " + path);
        std::string line;
        std::getline(in, line);
        if (line != "insertion_index,x,y") throw ConfigError(path + ": unexpected header");
        DescriptorArchive archive(config);
        bool first = true;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream row(line);
            unsigned long long id = 0;
            double x = 0, y = 0;
            char c1 = 0, c2 = 0;
            if (!(row >> id >> c1 >> x >> c2 >> y) || c1 != ',' || c2 != ',')
                throw ConfigError(path + ": malformed row '" + line + "'");
            if (first) {
                archive.first_id_ = id;
                archive.tree_end_ = id;
                first = false;
            } else if (id != archive.first_id_ + archive.entries_.size()) {
                throw ConfigError(path + ": insertion indices are not consecutive");
            }
            archive.push({x, y});
        }
        return archive;
    }

private:
    static constexpr std::size_t kLeafSize = 8;
    static constexpr std::uint64_t kRebuildEvery = 64;

    struct Point {
        Vec2 p;
        std::uint64_t id;
    };

    // Subtree over points_[lo, hi) with its bounding box; leaves have no children.
    struct KdNode {
        Box box;
        std::uint32_t lo, hi;
        std::int32_t left = -1, right = -1;
    };

    static bool closer(const Neighbor& a, const Neighbor& b) {
        return a.distance < b.distance || (a.distance == b.distance && a.id < b.id);
    }

    // Squared lower bound on the distance from q to any point of the box.
    // Rounding is monotone, so it never exceeds a point's computed square.
    static double box_distance_sq(Vec2 q, const Box& b) {
        const double dx = std::max({b.lo.x - q.x, 0.0, q.x - b.hi.x});
        const double dy = std::max({b.lo.y - q.y, 0.0, q.y - b.hi.y});
        return dx * dx + dy * dy;
    }

    // The k best candidates under closer(), kept sorted. Candidates are
    // screened on squared distance first; `cut_sq` sits a relative 1e-12
    // above the worst kept square, far more than rounding can move a square
    // root, so anything beyond it is strictly farther than the worst.
    struct Search {
        Vec2 query;
        std::size_t want;
        std::uint64_t first_valid;
        std::vector<Neighbor>& best;
        double cut_sq = std::numeric_limits<double>::infinity();

        void offer(Vec2 p, std::uint64_t id) {
            const double dx = query.x - p.x;
            const double dy = query.y - p.y;
            const double sq = dx * dx + dy * dy;
            if (sq > cut_sq) return;
            const Neighbor n{p, std::sqrt(sq), id};
            if (best.size() == want) {
                if (!closer(n, best.back())) return;
                best.back() = n;
            } else {
                best.push_back(n);
            }
            for (std::size_t i = best.size() - 1; i > 0 && closer(best[i], best[i - 1]); --i)
                std::swap(best[i], best[i - 1]);
            if (best.size() == want) cut_sq = best.back().distance * best.back().distance * (1.0 + 1e-12);
        }
    };

    std::uint64_t next_id() const { return first_id_ + entries_.size(); }

    void rebuild() {
        points_.clear();
        nodes_.clear();
        points_.reserve(entries_.size());
        for (std::size_t i = 0; i < entries_.size(); ++i) points_.push_back({entries_[i], first_id_ + i});
        tree_end_ = next_id();
        tail_.clear();
        if (!points_.empty()) build(0, static_cast<std::uint32_t>(points_.size()));
    }

    std::int32_t build(std::uint32_t lo, std::uint32_t hi) {
        KdNode node;
        node.lo = lo;
        node.hi = hi;
        node.box = {points_[lo].p, points_[lo].p};
        for (std::uint32_t i = lo + 1; i < hi; ++i) {
            node.box.lo.x = std::min(node.box.lo.x, points_[i].p.x);
            node.box.lo.y = std::min(node.box.lo.y, points_[i].p.y);
            node.box.hi.x = std::max(node.box.hi.x, points_[i].p.x);
            node.box.hi.y = std::max(node.box.hi.y, points_[i].p.y);
        }
        const auto index = static_cast<std::int32_t>(nodes_.size());
        nodes_.push_back(node);
        if (hi - lo <= kLeafSize) return index;
        const bool along_x = node.box.width() >= node.box.height();
        const std::uint32_t mid = lo + (hi - lo) / 2;
        std::nth_element(points_.begin() + lo, points_.begin() + mid, points_.begin() + hi,
                         [along_x](const Point& a, const Point& b) { return along_x ? a.p.x < b.p.x : a.p.y < b.p.y; });
        const std::int32_t left = build(lo, mid);
        const std::int32_t right = build(mid, hi);
        nodes_[static_cast<std::size_t>(index)].left = left;
        nodes_[static_cast<std::size_t>(index)].right = right;
        return index;
    }

    void descend(Search& s) const {
        struct Pending {
            std::int32_t node;
            double bound_sq;
        };
        Pending stack[128];
        int top = 0;
        stack[top++] = {0, box_distance_sq(s.query, nodes_[0].box)};
        while (top > 0) {
            const Pending cur = stack[--top];
            if (cur.bound_sq > s.cut_sq) continue;
            const KdNode& n = nodes_[static_cast<std::size_t>(cur.node)];
            if (n.left < 0) {
                for (std::uint32_t i = n.lo; i < n.hi; ++i)
                    if (points_[i].id >= s.first_valid) s.offer(points_[i].p, points_[i].id);
                continue;
            }
            const double dl = box_distance_sq(s.query, nodes_[static_cast<std::size_t>(n.left)].box);
            const double dr = box_distance_sq(s.query, nodes_[static_cast<std::size_t>(n.right)].box);
            // Nearer child on top of the stack.
            if (dl <= dr) {
                stack[top++] = {n.right, dr};
                stack[top++] = {n.left, dl};
            } else {
                stack[top++] = {n.left, dl};
                stack[top++] = {n.right, dr};
            }
        }
    }

    ArchiveConfig config_;
    std::deque<Vec2> entries_;
    std::uint64_t first_id_ = 0; // id of entries_.front()
    std::vector<Point> points_;  // k-d tree order; ids below tree_end_, evicted ones included
    std::vector<KdNode> nodes_;  // nodes_[0] is the root
    std::uint64_t tree_end_ = 0;
    std::vector<Vec2> tail_; // entries with ids tree_end_ onwards, not yet indexed
};

} // namespace qdpg
