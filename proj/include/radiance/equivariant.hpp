#pragma once

// Equivariant graph attention shared by the encoder, decoder and denoiser.
//
// Node states are split into invariant features H (n x h) and coordinates
// X (n x 3). Attention logits and messages depend on X only through pairwise
// distances, and coordinate updates are weighted sums of relative vectors
// (x_i - x_j), so the layer commutes with rotations and translations.

#include "radiance/nn.hpp"

#include <algorithm>
#include <set>
#include <vector>

namespace radiance::nn {

/// Directed edge list: node `dst[e]` receives a message from `src[e]`.
struct EdgeIndex {
    std::vector<Index> dst;
    std::vector<Index> src;
    Index num_nodes = 0;

    std::size_t size() const { return dst.size(); }

    /// 1/deg for each node (0 for isolated nodes), as an (n x 1) column.
    Matrix inverse_degree() const {
        Matrix inv = Matrix::Zero(num_nodes, 1);
        for (Index d : dst) inv(d, 0) += 1.0;
        for (Index i = 0; i < num_nodes; ++i) inv(i, 0) = inv(i, 0) > 0.0 ? 1.0 / inv(i, 0) : 0.0;
        return inv;
    }
};

/// Symmetrized kNN edges over the rows of `coords`; lower index wins ties.
inline EdgeIndex knn_edges(const Matrix& coords, int k) {
    const Index n = coords.rows();
    std::set<std::pair<Index, Index>> pairs;
    for (Index i = 0; i < n; ++i) {
        std::vector<std::pair<double, Index>> d;
        for (Index j = 0; j < n; ++j) {
            if (j != i) d.emplace_back((coords.row(i) - coords.row(j)).squaredNorm(), j);
        }
        std::sort(d.begin(), d.end());
        const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), d.size());
        for (std::size_t r = 0; r < take; ++r) {
            pairs.emplace(i, d[r].second);
            pairs.emplace(d[r].second, i);
        }
    }
    EdgeIndex e;
    e.num_nodes = n;
    for (const auto& [i, j] : pairs) {
        e.dst.push_back(i);
        e.src.push_back(j);
    }
    return e;
}

inline EdgeIndex complete_edges(Index n) {
    EdgeIndex e;
    e.num_nodes = n;
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) {
            if (i != j) {
                e.dst.push_back(i);
                e.src.push_back(j);
            }
        }
    }
    return e;
}

/// Differences x_dst - x_src for every edge: (E x 3).
inline Var edge_vectors(const Var& x, const EdgeIndex& edges) {
    return ag::sub(ag::gather_rows(x, edges.dst), ag::gather_rows(x, edges.src));
}

struct AttentionOutput {
    Var features;  // (n x h) aggregated messages, before any residual
    Var coord_update;  // (n x 3) equivariant displacement
};

/// Multi-head attention restricted to graph neighbourhoods with RBF distance
/// features folded into keys and values.
struct GraphAttention {
    Index hidden = 0;
    Index heads = 1;
    Index n_rbf = 16;
    double cutoff = 10.0;
    Projection q, k, v;
    Linear edge;        // [static edge feats | rbf] -> hidden
    Linear out;
    Linear coord_gate;  // hidden -> 1
    Matrix head_sum;    // (hidden x heads) block indicator

    static GraphAttention create(ParamStore& store, const std::string& name, Index hidden, Index heads,
                                 Index static_edge_dim, Index n_rbf, double cutoff, Rng& rng) {
        if (heads < 1 || hidden % heads != 0) {
            throw std::invalid_argument("hidden size must be divisible by the number of heads");
        }
        GraphAttention a;
        a.hidden = hidden;
        a.heads = heads;
        a.n_rbf = n_rbf;
        a.cutoff = cutoff;
        a.q = Projection::create(store, name + ".q", hidden, hidden, rng);
        a.k = Projection::create(store, name + ".k", hidden, hidden, rng);
        a.v = Projection::create(store, name + ".v", hidden, hidden, rng);
        a.edge = Linear::create(store, name + ".edge", static_edge_dim + n_rbf, hidden, rng);
        a.out = Linear::create(store, name + ".o", hidden, hidden, rng);
        a.coord_gate = Linear::create(store, name + ".x", hidden, 1, rng);
        const Index dh = hidden / heads;
        a.head_sum = Matrix::Zero(hidden, heads);
        for (Index c = 0; c < hidden; ++c) a.head_sum(c, c / dh) = 1.0;
        return a;
    }

    /// `edge_static` is (E x static_edge_dim) or undefined when static_edge_dim == 0.
    AttentionOutput operator()(const Var& h, const Var& x, const EdgeIndex& edges, const Var& edge_static) const {
        const Index n = h.rows();
        if (edges.size() == 0) {
            return {ag::constant(Matrix::Zero(n, hidden)), ag::constant(Matrix::Zero(n, 3))};
        }
        const Var rel = edge_vectors(x, edges);
        const Var dist = ag::row_norm(rel, 1e-8);
        Var feats = rbf_expand(dist, n_rbf, cutoff);
        if (edge_static.defined() && edge_static.cols() > 0) feats = ag::concat_cols({edge_static, feats});
        const Var e = edge(feats);
        const Var qi = ag::gather_rows(q(h), edges.dst);
        const Var kj = ag::add(ag::gather_rows(k(h), edges.src), e);
        const Var vj = ag::add(ag::gather_rows(v(h), edges.src), e);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hidden / heads));
        const Var scores = ag::scale(ag::matmul(ag::mul(qi, kj), ag::constant(head_sum)), inv_sqrt);
        const Var alpha = ag::segment_softmax(scores, edges.dst, n);
        const Var weighted = ag::mul(ag::repeat_cols(alpha, hidden / heads), vj);
        const Var agg = out(ag::scatter_add_rows(weighted, edges.dst, n));
        const Var gate = ag::tanh(coord_gate(ag::silu(vj)));
        // unit-ish directions keep each layer's displacement bounded; raw rel
        // compounds over layers
        const Var dir = ag::mul_col(rel, ag::exp(ag::neg(ag::log(ag::add_scalar(dist, 1.0)))));
        const Var dx = ag::scatter_add_rows(ag::mul_col(dir, gate), edges.dst, n);
        const Var coord = ag::mul_col(dx, ag::constant(edges.inverse_degree()));
        return {agg, coord};
    }
};

}  // namespace radiance::nn
