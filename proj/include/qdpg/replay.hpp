#pragma once

#include <random>
#include <span>
#include <vector>

#include "common.hpp"
#include "env_maze.hpp"

namespace qdpg {

/// Shared FIFO store of environment transitions; uniform sampling with replacement.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity_ == 0) throw DimensionError("ReplayBuffer: capacity must be positive");
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    void push(const Transition& t) {
        if (data_.size() < capacity_) {
            data_.push_back(t);
        } else {
            data_[head_] = t;
            head_ = (head_ + 1) % capacity_;
        }
    }

    void push_trajectory(std::span<const Transition> transitions) {
        for (const auto& t : transitions) push(t);
    }

    /// i-th oldest stored transition.
    const Transition& at(std::size_t i) const {
        if (i >= data_.size()) throw DimensionError("ReplayBuffer::at: index out of range");
        return data_[(head_ + i) % data_.size()];
    }

    /// Storage slots of a uniform batch; at_slot() resolves them.
    void sample_slots(std::size_t batch_size, Rng& rng, std::vector<std::size_t>& slots) const {
        if (data_.size() < batch_size || batch_size == 0)
            throw DimensionError("sample_batch: buffer holds " + std::to_string(data_.size()) +
                                 " transitions, batch needs " + std::to_string(batch_size));
        std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
        slots.resize(batch_size);
        for (auto& s : slots) s = pick(rng);
    }

    const Transition& at_slot(std::size_t slot) const { return data_[slot]; }

    std::vector<Transition> sample_batch(std::size_t batch_size, Rng& rng) const {
        std::vector<std::size_t> slots;
        sample_slots(batch_size, rng, slots);
        std::vector<Transition> out;
        out.reserve(batch_size);
        for (auto s : slots) out.push_back(data_[s]);
        return out;
    }

private:
    std::size_t capacity_;
    std::vector<Transition> data_;
    std::size_t head_ = 0; // oldest element once the ring is full
};

} // namespace qdpg
