#pragma once

// Parameter storage, basic layers and the Adam optimizer on top of the
// autodiff tape.

#include "radiance/autograd.hpp"
#include "radiance/rng.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace radiance::nn {

using ag::Index;
using ag::Matrix;
using ag::Var;

/// Named parameter collection. Iteration order is lexicographic by name, which
/// keeps serialization and optimizer updates deterministic.
class ParamStore {
public:
    Var create(const std::string& name, Matrix init) {
        if (params_.count(name)) throw std::logic_error("duplicate parameter: " + name);
        Var v = ag::parameter(std::move(init));
        params_.emplace(name, v);
        return v;
    }

    const Var& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, Var>& all() const { return params_; }

    void zero_grad() {
        for (auto& [_, v] : params_) v.zero_grad();
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : params_) n += static_cast<std::size_t>(v.value().size());
        return n;
    }

    bool all_finite() const {
        for (const auto& [_, v] : params_) {
            if (!v.value().allFinite()) return false;
        }
        return true;
    }

    /// Overwrites values in place so that layers holding the same Var see them.
    void assign(const std::string& name, const Matrix& value) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
        Var v = it->second;
        if (v.rows() != value.rows() || v.cols() != value.cols()) {
            throw std::invalid_argument("shape mismatch assigning " + name);
        }
        v.mutable_value() = value;
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    void zero_values(const std::string& prefix) {
        for (auto& [name, v] : params_) {
            if (name.rfind(prefix, 0) == 0) v.mutable_value().setZero();
        }
    }

private:
    std::map<std::string, Var> params_;
};

inline Matrix glorot(Rng& rng, Index in, Index out) {
    const double s = std::sqrt(1.0 / static_cast<double>(in));
    return rng.normal_matrix(in, out) * s;
}

struct Linear {
    Var weight;  // in x out
    Var bias;    // 1 x out

    static Linear create(ParamStore& store, const std::string& name, Index in, Index out, Rng& rng,
                         bool zero_init = false) {
        Linear l;
        l.weight = store.create(name + ".w", zero_init ? Matrix::Zero(in, out) : glorot(rng, in, out));
        l.bias = store.create(name + ".b", Matrix::Zero(1, out));
        return l;
    }

    Var operator()(const Var& x) const { return ag::add_row(ag::matmul(x, weight), bias); }
};

/// Bias-free projection.
struct Projection {
    Var weight;

    static Projection create(ParamStore& store, const std::string& name, Index in, Index out, Rng& rng,
                             bool zero_init = false) {
        return {store.create(name + ".w", zero_init ? Matrix::Zero(in, out) : glorot(rng, in, out))};
    }

    Var operator()(const Var& x) const { return ag::matmul(x, weight); }
};

/// Two-layer perceptron with SiLU.
struct Mlp {
    Linear first;
    Linear second;

    static Mlp create(ParamStore& store, const std::string& name, Index in, Index hidden, Index out, Rng& rng,
                      bool zero_last = false) {
        return {Linear::create(store, name + ".0", in, hidden, rng),
                Linear::create(store, name + ".1", hidden, out, rng, zero_last)};
    }

    Var operator()(const Var& x) const { return second(ag::silu(first(x))); }
};

struct LayerNorm {
    Var gamma;
    Var beta;

    static LayerNorm create(ParamStore& store, const std::string& name, Index dim) {
        return {store.create(name + ".g", Matrix::Ones(1, dim)), store.create(name + ".b", Matrix::Zero(1, dim))};
    }

    Var operator()(const Var& x) const { return ag::add_row(ag::mul_row(ag::layer_norm_rows(x), gamma), beta); }
};

/// Gaussian radial basis expansion of distances (E x 1) -> (E x n_rbf), centres
/// evenly spaced on [0, cutoff].
inline Var rbf_expand(const Var& dist, Index n_rbf, double cutoff) {
    Matrix centres(1, n_rbf);
    for (Index k = 0; k < n_rbf; ++k) {
        centres(0, k) = n_rbf == 1 ? 0.0 : cutoff * static_cast<double>(k) / static_cast<double>(n_rbf - 1);
    }
    const double width = n_rbf > 1 ? cutoff / static_cast<double>(n_rbf - 1) : cutoff;
    const double gamma = 1.0 / (2.0 * width * width);
    Var tiled = ag::matmul(dist, ag::constant(Matrix::Ones(1, n_rbf)));
    Var diff = ag::add_row(tiled, ag::constant(-centres));
    return ag::exp(ag::scale(ag::square(diff), -gamma));
}

/// Sinusoidal embedding of a scalar time into `dim` channels.
inline Matrix sinusoidal_embedding(double t, Index dim) {
    Matrix e(1, dim);
    const Index half = dim / 2;
    for (Index k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(std::max<Index>(half, 1)));
        e(0, k) = std::sin(t * freq);
        e(0, half + k) = std::cos(t * freq);
    }
    if (dim % 2 == 1) e(0, dim - 1) = t;
    return e;
}

inline Matrix one_hot(const std::vector<Index>& idx, Index classes) {
    Matrix m = Matrix::Zero(static_cast<Index>(idx.size()), classes);
    for (std::size_t r = 0; r < idx.size(); ++r) m(static_cast<Index>(r), idx[r]) = 1.0;
    return m;
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 10.0;  // global norm; <= 0 disables
};

class Adam {
public:
    Adam(ParamStore& store, AdamConfig cfg) : store_(store), cfg_(cfg) {}

    /// Applies one update from the grads currently held by the store, then clears them.
    /// Returns the pre-clip global gradient norm.
    double step() {
        ++t_;
        double sq = 0.0;
        for (const auto& [_, v] : store_.all()) {
            if (v.grad().size() != 0) sq += v.grad().squaredNorm();
        }
        const double norm = std::sqrt(sq);
        const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& [name, v] : store_.all()) {
            if (v.grad().size() == 0) continue;
            auto [it, inserted] = m_.try_emplace(name, Matrix::Zero(v.rows(), v.cols()));
            Matrix& m = it->second;
            Matrix& s = s_.try_emplace(name, Matrix::Zero(v.rows(), v.cols())).first->second;
            Matrix g = v.grad() * clip;
            m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
            s = cfg_.beta2 * s + (1.0 - cfg_.beta2) * g.cwiseAbs2();
            Var target = v;
            target.mutable_value().array() -=
                cfg_.lr * (m.array() / bc1) / ((s.array() / bc2).sqrt() + cfg_.eps);
        }
        store_.zero_grad();
        return norm;
    }

private:
    ParamStore& store_;
    AdamConfig cfg_;
    long t_ = 0;
    std::map<std::string, Matrix> m_;
    std::map<std::string, Matrix> s_;
};

}  // namespace radiance::nn
