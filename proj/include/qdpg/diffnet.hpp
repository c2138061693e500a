#pragma once

// Small fully connected networks with exact reverse-mode gradients.
//
// A network is described by a NetSpec and carried around as one flat
// parameter vector, so the same vector serves as an optimizer state and as
// an evolvable genome. Layer l occupies a contiguous slice of the vector:
// its weight matrix (fan_out x fan_in, column-major) followed by its bias.
//
// Batched entry points take one sample per column.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

namespace qdpg {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using FlatParams = Vector<Scalar>;

enum class OutputActivation : std::uint8_t { identity = 0, scaled_tanh = 1 };

struct LayerShape {
    Eigen::Index fan_in;
    Eigen::Index fan_out;
    Eigen::Index offset; // start of the weight block; the bias follows it
};

class NetSpec {
public:
    NetSpec() = default;

    NetSpec(std::size_t input_dim, std::vector<std::size_t> hidden_dims, std::size_t output_dim,
            OutputActivation output_activation = OutputActivation::identity, double output_scale = 1.0)
        : input_dim_(input_dim),
          hidden_dims_(std::move(hidden_dims)),
          output_dim_(output_dim),
          output_activation_(output_activation),
          output_scale_(output_scale) {
        if (input_dim_ == 0 || output_dim_ == 0) throw DimensionError("NetSpec: zero input or output width");
        for (auto h : hidden_dims_)
            if (h == 0) throw DimensionError("NetSpec: zero hidden width");
        if (!(output_scale_ > 0.0) || !std::isfinite(output_scale_))
            throw DimensionError("NetSpec: output scale must be positive");

        Eigen::Index offset = 0;
        Eigen::Index fan_in = static_cast<Eigen::Index>(input_dim_);
        auto push = [&](std::size_t width) {
            const auto fan_out = static_cast<Eigen::Index>(width);
            layers_.push_back({fan_in, fan_out, offset});
            offset += (fan_in + 1) * fan_out;
            fan_in = fan_out;
        };
        for (auto h : hidden_dims_) push(h);
        push(output_dim_);
        parameter_count_ = offset;
    }

    std::size_t input_dim() const { return input_dim_; }
    const std::vector<std::size_t>& hidden_dims() const { return hidden_dims_; }
    std::size_t output_dim() const { return output_dim_; }
    OutputActivation output_activation() const { return output_activation_; }
    double output_scale() const { return output_scale_; }

    const std::vector<LayerShape>& layers() const { return layers_; }
    Eigen::Index parameter_count() const { return parameter_count_; }

    friend bool operator==(const NetSpec& a, const NetSpec& b) {
        return a.input_dim_ == b.input_dim_ && a.hidden_dims_ == b.hidden_dims_ &&
               a.output_dim_ == b.output_dim_ && a.output_activation_ == b.output_activation_ &&
               a.output_scale_ == b.output_scale_;
    }

private:
    std::size_t input_dim_ = 0;
    std::vector<std::size_t> hidden_dims_;
    std::size_t output_dim_ = 0;
    OutputActivation output_activation_ = OutputActivation::identity;
    double output_scale_ = 1.0;
    std::vector<LayerShape> layers_;
    Eigen::Index parameter_count_ = 0;
};

inline std::size_t parameter_count(const NetSpec& spec) {
    return static_cast<std::size_t>(spec.parameter_count());
}

namespace detail {

template <typename Scalar>
auto weights(const LayerShape& l, const Scalar* p) {
    return Eigen::Map<const Matrix<Scalar>>(p + l.offset, l.fan_out, l.fan_in);
}
template <typename Scalar>
auto bias(const LayerShape& l, const Scalar* p) {
    return Eigen::Map<const Vector<Scalar>>(p + l.offset + l.fan_in * l.fan_out, l.fan_out);
}
template <typename Scalar>
auto weights(const LayerShape& l, Scalar* p) {
    return Eigen::Map<Matrix<Scalar>>(p + l.offset, l.fan_out, l.fan_in);
}
template <typename Scalar>
auto bias(const LayerShape& l, Scalar* p) {
    return Eigen::Map<Vector<Scalar>>(p + l.offset + l.fan_in * l.fan_out, l.fan_out);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
    return m.allFinite();
}

} // namespace detail

/// Activations cached by a batched forward pass, consumed by backward().
/// Reusing one tape across calls avoids reallocating the per-layer buffers.
template <typename Scalar>
struct Tape {
    std::vector<Matrix<Scalar>> activations; // activations[0] is the input
    Matrix<Scalar> delta;
    Matrix<Scalar> delta_next;
};

template <typename Scalar>
void check_params(const NetSpec& spec, const FlatParams<Scalar>& params) {
    if (params.size() != spec.parameter_count())
        throw DimensionError("parameter vector length " + std::to_string(params.size()) + " does not match spec (" +
                             std::to_string(spec.parameter_count()) + ")");
}

/// Batched forward pass; returns a reference to the output block stored in the tape.
template <typename Scalar, typename Derived>
const Matrix<Scalar>& forward_batch(const NetSpec& spec, const FlatParams<Scalar>& params,
                                    const Eigen::MatrixBase<Derived>& input, Tape<Scalar>& tape) {
    check_params(spec, params);
    if (input.rows() != static_cast<Eigen::Index>(spec.input_dim()))
        throw DimensionError("forward: input width does not match spec");

    const auto& layers = spec.layers();
    tape.activations.resize(layers.size() + 1);
    tape.activations[0] = input;

    // Hidden activations are computed in place; a ReLU output is positive
    // exactly where its pre-activation is, so backward() masks on it directly.
    const Scalar* p = params.data();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Matrix<Scalar>& a = tape.activations[l + 1];
        a.noalias() = detail::weights(layers[l], p) * tape.activations[l];
        a.colwise() += detail::bias(layers[l], p);
        if (l + 1 < layers.size()) {
            a = a.cwiseMax(Scalar(0));
        } else if (spec.output_activation() == OutputActivation::scaled_tanh) {
            a = Scalar(spec.output_scale()) * a.array().tanh();
        }
    }
    return tape.activations.back();
}

/// Reverse pass for the batch recorded in `tape`.
///
/// `output_cotangent` holds dL/d(output) per sample. Parameter gradients are
/// accumulated (added) into `grad_params` when non-null; the input gradient
/// is written to `grad_input` when non-null.
template <typename Scalar, typename Derived>
void backward_batch(const NetSpec& spec, const FlatParams<Scalar>& params, Tape<Scalar>& tape,
                    const Eigen::MatrixBase<Derived>& output_cotangent, Scalar* grad_params,
                    Matrix<Scalar>* grad_input) {
    const auto& layers = spec.layers();
    if (tape.activations.size() != layers.size() + 1)
        throw DimensionError("backward: tape does not hold a forward pass for this spec");
    const Eigen::Index batch = tape.activations[0].cols();
    if (output_cotangent.rows() != static_cast<Eigen::Index>(spec.output_dim()) || output_cotangent.cols() != batch)
        throw DimensionError("backward: cotangent shape does not match output");

    const Scalar* p = params.data();
    const std::size_t last = layers.size() - 1;

    // delta <- dL/dz for the output layer
    if (spec.output_activation() == OutputActivation::scaled_tanh) {
        const Scalar scale = Scalar(spec.output_scale());
        tape.delta = output_cotangent.cwiseProduct(
            (scale - tape.activations.back().array().square() / scale).matrix());
    } else {
        tape.delta = output_cotangent;
    }

    for (std::size_t li = layers.size(); li-- > 0;) {
        const LayerShape& l = layers[li];
        if (li != last) {
            tape.delta = (tape.activations[li + 1].array() > Scalar(0)).select(tape.delta, Scalar(0));
        }
        if (grad_params != nullptr) {
            detail::weights(l, grad_params).noalias() += tape.delta * tape.activations[li].transpose();
            detail::bias(l, grad_params) += tape.delta.rowwise().sum();
        }
        if (li > 0) {
            tape.delta_next.noalias() = detail::weights(l, p).transpose() * tape.delta;
            std::swap(tape.delta, tape.delta_next);
        } else if (grad_input != nullptr) {
            grad_input->noalias() = detail::weights(l, p).transpose() * tape.delta;
        }
    }
}

template <typename Scalar>
Vector<Scalar> forward(const NetSpec& spec, const FlatParams<Scalar>& params, const Vector<Scalar>& input) {
    Tape<Scalar> tape;
    return forward_batch(spec, params, input, tape);
}

/// d(cotangent . output)/d(params) for a single input.
template <typename Scalar>
FlatParams<Scalar> grad_params(const NetSpec& spec, const FlatParams<Scalar>& params, const Vector<Scalar>& input,
                               const Vector<Scalar>& output_cotangent) {
    if (!output_cotangent.allFinite()) throw NonFiniteError("grad_params: non-finite cotangent");
    Tape<Scalar> tape;
    forward_batch(spec, params, input, tape);
    FlatParams<Scalar> grad = FlatParams<Scalar>::Zero(spec.parameter_count());
    backward_batch(spec, params, tape, output_cotangent, grad.data(), static_cast<Matrix<Scalar>*>(nullptr));
    return grad;
}

/// d(cotangent . output)/d(input) for a single input.
template <typename Scalar>
Vector<Scalar> grad_input(const NetSpec& spec, const FlatParams<Scalar>& params, const Vector<Scalar>& input,
                          const Vector<Scalar>& output_cotangent) {
    if (!output_cotangent.allFinite()) throw NonFiniteError("grad_input: non-finite cotangent");
    Tape<Scalar> tape;
    forward_batch(spec, params, input, tape);
    Matrix<Scalar> g;
    backward_batch(spec, params, tape, output_cotangent, static_cast<Scalar*>(nullptr), &g);
    return g;
}

/// params - learning_rate * gradient. Refuses non-finite gradients.
template <typename Scalar>
FlatParams<Scalar> sgd_step(const FlatParams<Scalar>& params, const FlatParams<Scalar>& gradient,
                            double learning_rate) {
    if (params.size() != gradient.size()) throw DimensionError("sgd_step: length mismatch");
    if (!gradient.allFinite()) throw NonFiniteError("sgd_step: non-finite gradient, step refused");
    return params - Scalar(learning_rate) * gradient;
}

/// (1 - tau) * target + tau * online, elementwise.
template <typename Scalar>
FlatParams<Scalar> polyak_update(const FlatParams<Scalar>& target, const FlatParams<Scalar>& online, double tau) {
    if (target.size() != online.size()) throw DimensionError("polyak_update: length mismatch");
    if (tau == 1.0) return online;
    if (tau == 0.0) return target;
    return Scalar(1.0 - tau) * target + Scalar(tau) * online;
}

/// In-place form used by the training loop.
template <typename Scalar>
void polyak_update_inplace(FlatParams<Scalar>& target, const FlatParams<Scalar>& online, double tau) {
    if (target.size() != online.size()) throw DimensionError("polyak_update: length mismatch");
    target = Scalar(1.0 - tau) * target + Scalar(tau) * online;
}

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for both weights and biases.
template <typename Scalar>
FlatParams<Scalar> init_params(const NetSpec& spec, Rng& rng) {
    FlatParams<Scalar> params(spec.parameter_count());
    for (const LayerShape& l : spec.layers()) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(l.fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        const Eigen::Index n = (l.fan_in + 1) * l.fan_out;
        for (Eigen::Index i = 0; i < n; ++i) params[l.offset + i] = Scalar(dist(rng));
    }
    return params;
}

// ---------------------------------------------------------------------------
// Flattening: per-layer (W, b) views and the inverse packing.

template <typename Scalar>
struct LayerParams {
    Matrix<Scalar> weights;
    Vector<Scalar> bias;
};

template <typename Scalar>
std::vector<LayerParams<Scalar>> unflatten(const NetSpec& spec, const FlatParams<Scalar>& params) {
    check_params(spec, params);
    std::vector<LayerParams<Scalar>> out;
    for (const LayerShape& l : spec.layers())
        out.push_back({detail::weights(l, params.data()), detail::bias(l, params.data())});
    return out;
}

template <typename Scalar>
FlatParams<Scalar> flatten(const NetSpec& spec, const std::vector<LayerParams<Scalar>>& layers) {
    if (layers.size() != spec.layers().size()) throw DimensionError("flatten: layer count mismatch");
    FlatParams<Scalar> params(spec.parameter_count());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerShape& l = spec.layers()[i];
        if (layers[i].weights.rows() != l.fan_out || layers[i].weights.cols() != l.fan_in ||
            layers[i].bias.size() != l.fan_out)
            throw DimensionError("flatten: layer " + std::to_string(i) + " has the wrong shape");
        detail::weights(l, params.data()) = layers[i].weights;
        detail::bias(l, params.data()) = layers[i].bias;
    }
    return params;
}

// ---------------------------------------------------------------------------
// Serialization.
//
// Binary blob layout (all little-endian):
//   u32 input_dim, u32 n_hidden, u32 hidden[n_hidden], u32 output_dim,
//   u8 output_activation, f64 output_scale, u64 count, f64 values[count]

namespace detail {

inline bool host_is_little_endian() {
    const std::uint16_t probe = 1;
    unsigned char b = 0;
    std::memcpy(&b, &probe, 1);
    return b == 1;
}

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if (!host_is_little_endian()) std::reverse(buf, buf + sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw ConfigError("params blob: truncated");
    if (!host_is_little_endian()) std::reverse(buf, buf + sizeof(T));
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

} // namespace detail

inline void write_spec_header(std::ostream& os, const NetSpec& spec) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.input_dim()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.hidden_dims().size()));
    for (auto h : spec.hidden_dims()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(h));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.output_dim()));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(spec.output_activation()));
    detail::write_le<double>(os, spec.output_scale());
}

inline NetSpec read_spec_header(std::istream& is) {
    const auto input = detail::read_le<std::uint32_t>(is);
    const auto n_hidden = detail::read_le<std::uint32_t>(is);
    if (n_hidden > 64) throw ConfigError("params blob: implausible hidden layer count");
    std::vector<std::size_t> hidden;
    for (std::uint32_t i = 0; i < n_hidden; ++i) hidden.push_back(detail::read_le<std::uint32_t>(is));
    const auto output = detail::read_le<std::uint32_t>(is);
    const auto act = detail::read_le<std::uint8_t>(is);
    if (act > 1) throw ConfigError("params blob: unknown output activation");
    const auto scale = detail::read_le<double>(is);
    return NetSpec(input, std::move(hidden), output, static_cast<OutputActivation>(act), scale);
}

template <typename Scalar>
void write_values(std::ostream& os, const FlatParams<Scalar>& params) {
    detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(params.size()));
    for (Eigen::Index i = 0; i < params.size(); ++i) detail::write_le<double>(os, static_cast<double>(params[i]));
}

template <typename Scalar>
FlatParams<Scalar> read_values(std::istream& is, const NetSpec& spec) {
    const auto n = detail::read_le<std::uint64_t>(is);
    if (n != static_cast<std::uint64_t>(spec.parameter_count()))
        throw ConfigError("params blob: value count does not match the spec header");
    FlatParams<Scalar> params(static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < n; ++i) {
        const double v = detail::read_le<double>(is);
        if (!std::isfinite(v)) throw ConfigError("params blob: non-finite value");
        params[static_cast<Eigen::Index>(i)] = static_cast<Scalar>(v);
    }
    return params;
}

template <typename Scalar>
void write_params_blob(std::ostream& os, const NetSpec& spec, const FlatParams<Scalar>& params) {
    check_params(spec, params);
    write_spec_header(os, spec);
    write_values(os, params);
}

template <typename Scalar>
std::pair<NetSpec, FlatParams<Scalar>> read_params_blob(std::istream& is) {
    NetSpec spec = read_spec_header(is);
    auto params = read_values<Scalar>(is, spec);
    return {std::move(spec), std::move(params)};
}

inline nlohmann::json spec_to_json(const NetSpec& spec) {
    return {{"input_dim", spec.input_dim()},
            {"hidden_dims", spec.hidden_dims()},
            {"output_dim", spec.output_dim()},
            {"output_activation", spec.output_activation() == OutputActivation::scaled_tanh ? "scaled_tanh" : "identity"},
            {"output_scale", spec.output_scale()}};
}

template <typename Scalar>
nlohmann::json params_to_json(const NetSpec& spec, const FlatParams<Scalar>& params) {
    check_params(spec, params);
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : unflatten(spec, params)) {
        nlohmann::json w = nlohmann::json::array();
        for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
            std::vector<double> row(l.weights.cols());
            for (Eigen::Index c = 0; c < l.weights.cols(); ++c) row[c] = static_cast<double>(l.weights(r, c));
            w.push_back(row);
        }
        std::vector<double> b(l.bias.data(), l.bias.data() + l.bias.size());
        layers.push_back({{"weights", w}, {"bias", b}});
    }
    return {{"spec", spec_to_json(spec)}, {"layers", layers}};
}

} // namespace qdpg
