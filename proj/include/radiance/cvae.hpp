#pragma once

// Contrastive variational autoencoder over block graphs.
//
// The encoder maps a binder or binding-site graph to per-block Gaussian
// posteriors over a scalar latent z_i (d dims) and a latent coordinate z⃗_i,
// and mean-pools its final hidden states into a graph embedding (key for
// sites, value for binders). The decoder predicts block types from z_i and
// rebuilds atom coordinates by integrating a learned velocity field from a
// Gaussian prior centred on z⃗_i.

#include "radiance/equivariant.hpp"
#include "radiance/molgraph.hpp"
#include "radiance/nn.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace radiance::cvae {

using ag::Index;
using ag::Matrix;
using ag::Var;

struct CvaeConfig {
    int latent_size = 8;
    int hidden_size = 512;
    int edge_size = 64;
    int n_layers = 6;
    int n_heads = 8;
    int k_neighbors = 9;
    double cutoff = 10.0;
    int n_rbf = 16;
    double kl_sequence_weight = 0.8;   // lambda1, scalar latents
    double kl_structure_weight = 0.6;  // lambda2, coordinate latents
    double atom_coord_weight = 1.0;
    double block_type_weight = 1.0;
    double contrastive_weight = 1.0;
    double local_distance_weight = 0.5;
    double bond_weight = 0.5;
    double tau = 0.07;
    double sigma_floor = 1e-6;
    double local_distance_cutoff = 6.0;
    int decode_steps = 10;

    void validate() const {
        auto positive = [](double v, const char* what) {
            if (!(v > 0.0)) throw std::invalid_argument(std::string("cvae config: ") + what + " must be > 0");
        };
        positive(latent_size, "latent_size");
        positive(hidden_size, "hidden_size");
        positive(edge_size, "edge_size");
        positive(n_heads, "n_heads");
        positive(tau, "tau");
        positive(cutoff, "cutoff");
        positive(n_rbf, "n_rbf");
        positive(decode_steps, "decode_steps");
        if (n_layers < 0) throw std::invalid_argument("cvae config: n_layers must be >= 0");
        if (hidden_size % n_heads != 0) throw std::invalid_argument("cvae config: hidden_size % n_heads != 0");
        if (kl_sequence_weight < 0 || kl_structure_weight < 0) throw std::invalid_argument("cvae config: negative KL weight");
    }
};

inline void to_json(nlohmann::json& j, const CvaeConfig& c) {
    j = {{"latent_size", c.latent_size},
         {"hidden_size", c.hidden_size},
         {"edge_size", c.edge_size},
         {"n_layers", c.n_layers},
         {"n_heads", c.n_heads},
         {"k_neighbors", c.k_neighbors},
         {"cutoff", c.cutoff},
         {"n_rbf", c.n_rbf},
         {"kl_sequence_weight", c.kl_sequence_weight},
         {"kl_structure_weight", c.kl_structure_weight},
         {"atom_coord_weight", c.atom_coord_weight},
         {"block_type_weight", c.block_type_weight},
         {"contrastive_weight", c.contrastive_weight},
         {"local_distance_weight", c.local_distance_weight},
         {"bond_weight", c.bond_weight},
         {"tau", c.tau},
         {"sigma_floor", c.sigma_floor},
         {"local_distance_cutoff", c.local_distance_cutoff},
         {"decode_steps", c.decode_steps}};
}

inline void from_json(const nlohmann::json& j, CvaeConfig& c) {
    CvaeConfig d;
    c.latent_size = j.value("latent_size", d.latent_size);
    c.hidden_size = j.value("hidden_size", d.hidden_size);
    c.edge_size = j.value("edge_size", d.edge_size);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.k_neighbors = j.value("k_neighbors", d.k_neighbors);
    c.cutoff = j.value("cutoff", d.cutoff);
    c.n_rbf = j.value("n_rbf", d.n_rbf);
    c.kl_sequence_weight = j.value("kl_sequence_weight", d.kl_sequence_weight);
    c.kl_structure_weight = j.value("kl_structure_weight", d.kl_structure_weight);
    c.atom_coord_weight = j.value("atom_coord_weight", d.atom_coord_weight);
    c.block_type_weight = j.value("block_type_weight", d.block_type_weight);
    c.contrastive_weight = j.value("contrastive_weight", d.contrastive_weight);
    c.local_distance_weight = j.value("local_distance_weight", d.local_distance_weight);
    c.bond_weight = j.value("bond_weight", d.bond_weight);
    c.tau = j.value("tau", d.tau);
    c.sigma_floor = j.value("sigma_floor", d.sigma_floor);
    c.local_distance_cutoff = j.value("local_distance_cutoff", d.local_distance_cutoff);
    c.decode_steps = j.value("decode_steps", d.decode_steps);
}

// ---------------------------------------------------------------------------
// Value types

struct LatentBlock {
    Eigen::VectorXd mu;
    Eigen::VectorXd sigma;
    Eigen::VectorXd z;
    Vec3 mu_vec = Vec3::Zero();
    Vec3 sigma_vec = Vec3::Ones();
    Vec3 z_vec = Vec3::Zero();
    int block_index = 0;
};

struct LatentCloud {
    std::vector<LatentBlock> blocks;
    /// Maps latent coordinates back to the original structure frame.
    RigidTransform frame;

    std::size_t size() const { return blocks.size(); }

    Matrix z_matrix() const {
        Matrix m(static_cast<Index>(blocks.size()), blocks.empty() ? 0 : blocks.front().z.size());
        for (std::size_t i = 0; i < blocks.size(); ++i) m.row(static_cast<Index>(i)) = blocks[i].z.transpose();
        return m;
    }
    Matrix zvec_matrix() const {
        Matrix m(static_cast<Index>(blocks.size()), 3);
        for (std::size_t i = 0; i < blocks.size(); ++i) m.row(static_cast<Index>(i)) = blocks[i].z_vec.transpose();
        return m;
    }
    Matrix mu_matrix() const {
        Matrix m(static_cast<Index>(blocks.size()), blocks.empty() ? 0 : blocks.front().mu.size());
        for (std::size_t i = 0; i < blocks.size(); ++i) m.row(static_cast<Index>(i)) = blocks[i].mu.transpose();
        return m;
    }
    Matrix mu_vec_matrix() const {
        Matrix m(static_cast<Index>(blocks.size()), 3);
        for (std::size_t i = 0; i < blocks.size(); ++i) m.row(static_cast<Index>(i)) = blocks[i].mu_vec.transpose();
        return m;
    }

    /// Latents set to their posterior means.
    LatentCloud means() const {
        LatentCloud c = *this;
        for (auto& b : c.blocks) {
            b.z = b.mu;
            b.z_vec = b.mu_vec;
        }
        return c;
    }
};

enum class EmbeddingKind { key, value };

struct GraphEmbedding {
    Eigen::VectorXd vec;
    EmbeddingKind kind = EmbeddingKind::key;
};

struct VaeLossReport {
    double recon_type = 0.0;
    double recon_field = 0.0;
    double kl_scalar = 0.0;  // already scaled by lambda1
    double kl_coord = 0.0;   // already scaled by lambda2
    double contrastive = 0.0;
    double bond = 0.0;
    double local_distance = 0.0;
    double total = 0.0;

    /// Weighted sum with the weights of `cfg`; equals `total` for reports produced by total_loss.
    double recompute_total(const CvaeConfig& cfg) const {
        return cfg.block_type_weight * recon_type + cfg.atom_coord_weight * recon_field + kl_scalar + kl_coord +
               cfg.contrastive_weight * contrastive + cfg.local_distance_weight * local_distance + cfg.bond_weight * bond;
    }

    /// Name of the first non-finite component, if any.
    std::optional<std::string> first_non_finite() const {
        const std::pair<const char*, double> parts[] = {
            {"recon_type", recon_type}, {"recon_field", recon_field}, {"kl_scalar", kl_scalar},
            {"kl_coord", kl_coord},     {"contrastive", contrastive}, {"bond", bond},
            {"local_distance", local_distance}, {"total", total}};
        for (const auto& [name, v] : parts) {
            if (!std::isfinite(v)) return std::string(name);
        }
        return std::nullopt;
    }
};

inline nlohmann::json to_json(const VaeLossReport& r) {
    return {{"recon_type", r.recon_type}, {"recon_field", r.recon_field}, {"kl_scalar", r.kl_scalar},
            {"kl_coord", r.kl_coord},     {"contrastive", r.contrastive}, {"bond", r.bond},
            {"local_distance", r.local_distance}, {"total", r.total}};
}

// ---------------------------------------------------------------------------
// Standalone loss terms and sampling

/// z = mu + sigma * eps, z_vec = mu_vec + sigma_vec * eps_vec, with sigma
/// clamped to `floor`.
inline LatentBlock reparameterize(const LatentBlock& lb, Rng& rng, double floor = 1e-6) {
    LatentBlock out = lb;
    out.sigma = lb.sigma.cwiseMax(floor);
    out.sigma_vec = lb.sigma_vec.cwiseMax(floor);
    out.z.resize(lb.mu.size());
    for (Index i = 0; i < lb.mu.size(); ++i) out.z(i) = lb.mu(i) + out.sigma(i) * rng.normal();
    for (int i = 0; i < 3; ++i) out.z_vec(i) = lb.mu_vec(i) + out.sigma_vec(i) * rng.normal();
    return out;
}

/// KL(N(mu, diag sigma^2) || N(prior_mean, I)) in closed form.
inline double gaussian_kl_to_unit(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma, const Eigen::VectorXd& prior_mean) {
    double kl = 0.0;
    for (Index i = 0; i < mu.size(); ++i) {
        const double s2 = sigma(i) * sigma(i);
        const double dm = mu(i) - prior_mean(i);
        kl += 0.5 * (s2 + dm * dm - 1.0 - std::log(s2));
    }
    return kl;
}

/// lambda1 * KL(scalar posterior || N(0, I)) + lambda2 * KL(coordinate posterior || N(center, I)).
inline double kl_loss(const LatentBlock& lb, const Vec3& center, double lambda1 = 0.8, double lambda2 = 0.6) {
    const double ks = gaussian_kl_to_unit(lb.mu, lb.sigma, Eigen::VectorXd::Zero(lb.mu.size()));
    const double kc = gaussian_kl_to_unit(lb.mu_vec, lb.sigma_vec, center);
    return lambda1 * ks + lambda2 * kc;
}

/// Differentiable KL summed over rows and averaged over blocks.
inline Var kl_term(const Var& mu, const Var& sigma, const Var& prior_mean) {
    const Var s2 = ag::square(sigma);
    const Var dm = ag::square(ag::sub(mu, prior_mean));
    const Var per = ag::sub(ag::add_scalar(ag::add(s2, dm), -1.0), ag::log(s2));
    return ag::scale(ag::sum(per), 0.5 / static_cast<double>(mu.rows()));
}

/// Symmetric InfoNCE over raw inner products; per-pair terms (n x 1) so callers
/// can inspect each non-negative -log softmax contribution.
inline Var contrastive_terms(const Var& keys, const Var& values, double tau) {
    if (keys.rows() != values.rows() || keys.cols() != values.cols()) {
        throw std::invalid_argument("contrastive loss: keys and values differ in shape");
    }
    if (!(tau > 0.0)) throw std::invalid_argument("contrastive loss: tau must be > 0");
    const Index n = keys.rows();
    std::vector<Index> diag(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) diag[static_cast<std::size_t>(i)] = i;
    const Var logits = ag::scale(ag::matmul(keys, ag::transpose(values)), 1.0 / tau);
    const Var forward = ag::neg(ag::pick(ag::log_softmax_rows(logits), diag));
    const Var backward = ag::neg(ag::pick(ag::log_softmax_rows(ag::transpose(logits)), diag));
    return ag::concat_cols({forward, backward});
}

inline Var contrastive_var(const Var& keys, const Var& values, double tau) {
    const Var terms = contrastive_terms(keys, values, tau);
    return ag::scale(ag::sum(terms), 1.0 / static_cast<double>(keys.rows()));
}

inline Matrix stack_embeddings(const std::vector<GraphEmbedding>& e) {
    if (e.empty()) return Matrix(0, 0);
    Matrix m(static_cast<Index>(e.size()), e.front().vec.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        if (e[i].vec.size() != m.cols()) throw std::invalid_argument("embeddings differ in dimension");
        m.row(static_cast<Index>(i)) = e[i].vec.transpose();
    }
    return m;
}

inline double contrastive_loss(const std::vector<GraphEmbedding>& keys, const std::vector<GraphEmbedding>& values, double tau) {
    if (keys.size() != values.size()) throw std::invalid_argument("contrastive loss: batch length mismatch");
    if (keys.empty()) throw std::invalid_argument("contrastive loss: empty batch");
    return contrastive_var(ag::constant(stack_embeddings(keys)), ag::constant(stack_embeddings(values)), tau).item();
}

/// (cross-entropy over block types, mean squared error of the velocity field).
inline std::pair<double, double> recon_loss(const Matrix& pred_type_logits, const std::vector<int>& true_type,
                                            const Matrix& pred_field, const Matrix& true_field) {
    if (pred_type_logits.rows() != static_cast<Index>(true_type.size())) throw std::invalid_argument("recon_loss: type count mismatch");
    if (pred_field.rows() != true_field.rows() || pred_field.cols() != true_field.cols()) {
        throw std::invalid_argument("recon_loss: field shape mismatch");
    }
    std::vector<Index> t(true_type.begin(), true_type.end());
    const double ce = ag::cross_entropy(ag::constant(pred_type_logits), t).item();
    const double m = pred_field.size() == 0 ? 0.0 : ag::mse(ag::constant(pred_field), ag::constant(true_field)).item();
    return {ce, m};
}

/// Euler integration of dx/dt = field(x, t) from t = 0 to 1 in `steps` uniform steps.
inline Matrix integrate_euler(Matrix x, int steps, const std::function<Matrix(const Matrix&, double)>& field) {
    if (steps < 1) throw std::invalid_argument("integrate_euler: steps must be >= 1");
    const double dt = 1.0 / steps;
    for (int s = 0; s < steps; ++s) x += dt * field(x, s * dt);
    return x;
}

// ---------------------------------------------------------------------------
// Model

/// Posterior parameters kept on the tape.
struct EncoderOutput {
    Var mu;         // n x d
    Var sigma;      // n x d
    Var mu_vec;     // n x 3
    Var sigma_vec;  // n x 3 (isotropic per block)
    Var hidden;     // n x h
    Var pooled;     // 1 x h
    Matrix centers;  // n x 3 block centres
};

/// Atom set on which the velocity field is evaluated.
struct AtomBatch {
    std::vector<Index> owner;      // block of each atom
    std::vector<Index> flat_slot;  // vocabulary slot
    std::vector<int> slot;         // slot within the block template
};

inline AtomBatch template_atoms(const std::vector<int>& types) {
    AtomBatch a;
    for (std::size_t i = 0; i < types.size(); ++i) {
        const auto& names = vocab::type(types[i]).atoms;
        for (std::size_t s = 0; s < names.size(); ++s) {
            a.owner.push_back(static_cast<Index>(i));
            a.flat_slot.push_back(vocab::flat_slot(types[i], static_cast<int>(s)));
            a.slot.push_back(static_cast<int>(s));
        }
    }
    return a;
}

/// Atoms actually present in `g`, with their coordinates (A x 3).
inline std::pair<AtomBatch, Matrix> graph_atoms(const MolecularGraph& g) {
    AtomBatch a;
    std::vector<Vec3> xs;
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        const auto& b = g.blocks[i];
        for (const auto& atom : b.atoms) {
            const int s = vocab::atom_slot(b.block_type, atom.name);
            if (s < 0) continue;
            a.owner.push_back(static_cast<Index>(i));
            a.flat_slot.push_back(vocab::flat_slot(b.block_type, s));
            a.slot.push_back(s);
            xs.push_back(atom.coord);
        }
    }
    Matrix x(static_cast<Index>(xs.size()), 3);
    for (std::size_t r = 0; r < xs.size(); ++r) x.row(static_cast<Index>(r)) = xs[r].transpose();
    return {a, x};
}

inline constexpr int kNodeFeatures = vocab::kSize + 4;
inline constexpr int kStaticEdgeFeatures = 3;
inline constexpr int kTimeFeatures = 16;

inline Matrix node_features(const MolecularGraph& g) {
    Matrix f = Matrix::Zero(static_cast<Index>(g.size()), kNodeFeatures);
    for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        const auto& b = g.blocks[i];
        const auto r = static_cast<Index>(i);
        f(r, b.block_type) = 1.0;
        f(r, vocab::kSize) = g.role == GraphRole::binding_site ? 1.0 : 0.0;
        f(r, vocab::kSize + 1) = static_cast<double>(b.atoms.size()) / vocab::kMaxAtoms;
        const Vec3 c = b.center();
        double rg = 0.0;
        for (const auto& a : b.atoms) rg += (a.coord - c).squaredNorm();
        f(r, vocab::kSize + 2) = std::sqrt(rg / static_cast<double>(std::max<std::size_t>(b.atoms.size(), 1))) / 3.0;
        f(r, vocab::kSize + 3) = (b.ca_or_center() - c).norm() / 3.0;
    }
    return f;
}

inline std::pair<nn::EdgeIndex, Matrix> graph_edges(const MolecularGraph& g) {
    nn::EdgeIndex e;
    e.num_nodes = static_cast<Index>(g.size());
    Matrix stat(static_cast<Index>(g.edges.size()), kStaticEdgeFeatures);
    for (std::size_t k = 0; k < g.edges.size(); ++k) {
        const auto& ed = g.edges[k];
        e.dst.push_back(ed.src);
        e.src.push_back(ed.dst);
        const auto& a = g.blocks[static_cast<std::size_t>(ed.src)];
        const auto& b = g.blocks[static_cast<std::size_t>(ed.dst)];
        const bool same_chain = a.chain_id == b.chain_id;
        stat(static_cast<Index>(k), 0) = ed.bond != 0 ? 1.0 : 0.0;
        stat(static_cast<Index>(k), 1) = same_chain && std::abs(a.residue_index - b.residue_index) == 1 ? 1.0 : 0.0;
        stat(static_cast<Index>(k), 2) = same_chain ? 1.0 : 0.0;
    }
    return {e, stat};
}

struct TransformerLayer {
    nn::GraphAttention attn;
    nn::LayerNorm ln_attn;
    nn::Mlp ffn;
    nn::LayerNorm ln_ffn;

    static TransformerLayer create(nn::ParamStore& s, const std::string& name, const CvaeConfig& c, Index static_dim, Rng& rng) {
        const Index h = c.hidden_size;
        return {nn::GraphAttention::create(s, name + ".attn", h, c.n_heads, static_dim, c.n_rbf, c.cutoff, rng),
                nn::LayerNorm::create(s, name + ".ln1", h), nn::Mlp::create(s, name + ".ffn", h, h, h, rng),
                nn::LayerNorm::create(s, name + ".ln2", h)};
    }
};

class CvaeModel {
public:
    explicit CvaeModel(CvaeConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const Index h = cfg_.hidden_size;
        const Index d = cfg_.latent_size;
        // encoder
        enc_in_ = nn::Linear::create(store_, "encoder/input", kNodeFeatures, h, rng);
        enc_edge_ = nn::Linear::create(store_, "encoder/edge_embed", kStaticEdgeFeatures, cfg_.edge_size, rng);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            enc_layers_.push_back(TransformerLayer::create(store_, "encoder/layer" + std::to_string(l), cfg_, cfg_.edge_size, rng));
        }
        mu_head_ = nn::Linear::create(store_, "encoder/mu", h, d, rng);
        sigma_head_ = nn::Linear::create(store_, "encoder/sigma", h, d, rng);
        sigma_vec_head_ = nn::Linear::create(store_, "encoder/sigma_vec", h, 1, rng);
        // decoder
        dec_binder_in_ = nn::Linear::create(store_, "decoder/binder_input", d, h, rng);
        dec_site_in_ = nn::Linear::create(store_, "decoder/site_input", d + vocab::kSize, h, rng);
        dec_role_ = store_.create("decoder/role", nn::glorot(rng, 2, h));
        for (int l = 0; l < cfg_.n_layers; ++l) {
            dec_layers_.push_back(TransformerLayer::create(store_, "decoder/layer" + std::to_string(l), cfg_, 0, rng));
        }
        type_head_ = nn::Mlp::create(store_, "decoder/type_head", d, h, vocab::kSize, rng);
        bond_head_ = nn::Mlp::create(store_, "decoder/bond_head", h + cfg_.n_rbf, h, 2, rng);
        slot_embed_ = store_.create("decoder/slot_embed", nn::glorot(rng, vocab::flat_slot_count(), h));
        time_in_ = nn::Linear::create(store_, "decoder/time", kTimeFeatures, h, rng);
        anchor_gate_ = nn::Mlp::create(store_, "decoder/field_anchor", h + cfg_.n_rbf, h, 1, rng);
        neighbor_gate_ = nn::Mlp::create(store_, "decoder/field_neighbor", h + cfg_.n_rbf, h, 1, rng);
        intra_gate_ = nn::Mlp::create(store_, "decoder/field_intra", h + cfg_.n_rbf, h, 1, rng);
    }

    const CvaeConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    // ------------------------------------------------------------------ encoder

    EncoderOutput encode_vars(const MolecularGraph& g) const {
        if (g.empty()) throw std::invalid_argument("encode: empty graph");
        auto [edges, stat] = graph_edges(g);
        const Var edge_static = ag::silu(enc_edge_(ag::constant(stat)));
        Var h = enc_in_(ag::constant(node_features(g)));
        const Matrix centers = g.centers();
        Var x = ag::constant(centers);
        for (const auto& layer : enc_layers_) {
            const auto a = layer.attn(h, x, edges, edge_static);
            h = layer.ln_attn(ag::add(h, a.features));
            x = ag::add(x, a.coord_update);
            h = layer.ln_ffn(ag::add(h, layer.ffn(h)));
        }
        EncoderOutput out;
        out.hidden = h;
        out.mu = mu_head_(h);
        out.sigma = ag::add_scalar(ag::softplus(sigma_head_(h)), cfg_.sigma_floor);
        out.mu_vec = x;
        out.sigma_vec = ag::repeat_cols(ag::add_scalar(ag::softplus(sigma_vec_head_(h)), cfg_.sigma_floor), 3);
        out.pooled = ag::col_mean(h);
        out.centers = centers;
        return out;
    }

    std::pair<LatentCloud, GraphEmbedding> encode(const MolecularGraph& g) const {
        const EncoderOutput e = encode_vars(g);
        LatentCloud cloud;
        for (Index i = 0; i < e.mu.rows(); ++i) {
            LatentBlock lb;
            lb.mu = e.mu.value().row(i).transpose();
            lb.sigma = e.sigma.value().row(i).transpose();
            lb.z = lb.mu;
            lb.mu_vec = e.mu_vec.value().row(i).transpose();
            lb.sigma_vec = e.sigma_vec.value().row(i).transpose();
            lb.z_vec = lb.mu_vec;
            lb.block_index = static_cast<int>(i);
            cloud.blocks.push_back(std::move(lb));
        }
        GraphEmbedding emb{e.pooled.value().row(0).transpose(),
                           g.role == GraphRole::binding_site ? EmbeddingKind::key : EmbeddingKind::value};
        return {std::move(cloud), std::move(emb)};
    }

    // ------------------------------------------------------------------ decoder

    /// Block-level context over binder latents and site nodes, all in one frame.
    struct DecoderContext {
        Var hidden;     // (n + m) x h
        Var positions;  // (n + m) x 3
        nn::EdgeIndex edges;
        Index n_binder = 0;
    };

    DecoderContext decoder_context(const Var& z, const Var& zvec, const Var& z_site, const Matrix& site_centers,
                                   const std::vector<int>& site_types) const {
        const Index n = z.rows();
        const Index m = z_site.rows();
        Matrix site_onehot = nn::one_hot(std::vector<Index>(site_types.begin(), site_types.end()), vocab::kSize);
        Var hb = dec_binder_in_(z);
        Var hs = dec_site_in_(ag::concat_cols({z_site, ag::constant(site_onehot)}));
        std::vector<Index> roles(static_cast<std::size_t>(n), 0);
        roles.resize(static_cast<std::size_t>(n + m), 1);
        Var h = ag::add(ag::concat_rows({hb, hs}), ag::gather_rows(dec_role_, roles));
        Var pos = ag::concat_rows({zvec, ag::constant(site_centers)});
        DecoderContext ctx;
        ctx.edges = nn::knn_edges(pos.value(), cfg_.k_neighbors);
        for (const auto& layer : dec_layers_) {
            const auto a = layer.attn(h, pos, ctx.edges, Var());
            h = layer.ln_attn(ag::add(h, a.features));
            h = layer.ln_ffn(ag::add(h, layer.ffn(h)));
        }
        ctx.hidden = h;
        ctx.positions = pos;
        ctx.n_binder = n;
        return ctx;
    }

    Var type_logits(const Var& z) const { return type_head_(z); }

    /// Logits over {no bond, bond} for every binder pair i < j.
    Var bond_logits(const DecoderContext& ctx, std::vector<std::pair<Index, Index>>& pairs) const {
        pairs.clear();
        for (Index i = 0; i < ctx.n_binder; ++i) {
            for (Index j = i + 1; j < ctx.n_binder; ++j) pairs.emplace_back(i, j);
        }
        if (pairs.empty()) return Var();
        std::vector<Index> a;
        std::vector<Index> b;
        for (const auto& [i, j] : pairs) {
            a.push_back(i);
            b.push_back(j);
        }
        const Var hsum = ag::add(ag::gather_rows(ctx.hidden, a), ag::gather_rows(ctx.hidden, b));
        const Var d = ag::row_norm(ag::sub(ag::gather_rows(ctx.positions, a), ag::gather_rows(ctx.positions, b)), 1e-8);
        return bond_head_(ag::concat_cols({hsum, nn::rbf_expand(d, cfg_.n_rbf, cfg_.cutoff)}));
    }

    /// Velocity of each atom at positions x (A x 3) and per-atom times t (A x 1).
    Var velocity(const DecoderContext& ctx, const Var& zvec, const AtomBatch& atoms, const Var& x, const Matrix& t) const {
        const auto n_atoms = static_cast<Index>(atoms.owner.size());
        Matrix tfeat(n_atoms, kTimeFeatures);
        for (Index r = 0; r < n_atoms; ++r) tfeat.row(r) = nn::sinusoidal_embedding(t(r, 0), kTimeFeatures);
        const Var f = ag::add(ag::add(ag::gather_rows(ctx.hidden, atoms.owner), ag::gather_rows(slot_embed_, atoms.flat_slot)),
                              time_in_(ag::constant(tfeat)));
        auto rbf = [&](const Var& rel) { return nn::rbf_expand(ag::row_norm(rel, 1e-8), cfg_.n_rbf, cfg_.cutoff); };

        // pull towards the block's latent coordinate
        const Var r0 = ag::sub(ag::gather_rows(zvec, atoms.owner), x);
        Var v = ag::mul_col(r0, anchor_gate_(ag::concat_cols({f, rbf(r0)})));

        // neighbouring block anchors
        std::vector<Index> pa, pj;
        for (Index a = 0; a < n_atoms; ++a) {
            const Index owner = atoms.owner[static_cast<std::size_t>(a)];
            for (std::size_t e = 0; e < ctx.edges.size(); ++e) {
                if (ctx.edges.dst[e] == owner) {
                    pa.push_back(a);
                    pj.push_back(ctx.edges.src[e]);
                }
            }
        }
        if (!pa.empty()) {
            const Var rn = ag::sub(ag::gather_rows(ctx.positions, pj), ag::gather_rows(x, pa));
            const Var gate = neighbor_gate_(ag::concat_cols({ag::add(ag::gather_rows(f, pa), ag::gather_rows(ctx.hidden, pj)), rbf(rn)}));
            nn::EdgeIndex tmp;
            tmp.dst = pa;
            tmp.num_nodes = n_atoms;
            v = ag::add(v, ag::mul_col(ag::scatter_add_rows(ag::mul_col(rn, gate), pa, n_atoms), ag::constant(tmp.inverse_degree())));
        }

        // other atoms of the same block
        std::vector<Index> ia, ib;
        for (Index a = 0; a < n_atoms; ++a) {
            for (Index b = 0; b < n_atoms; ++b) {
                if (a != b && atoms.owner[static_cast<std::size_t>(a)] == atoms.owner[static_cast<std::size_t>(b)]) {
                    ia.push_back(a);
                    ib.push_back(b);
                }
            }
        }
        if (!ia.empty()) {
            const Var ri = ag::sub(ag::gather_rows(x, ib), ag::gather_rows(x, ia));
            const Var gate = intra_gate_(ag::concat_cols({ag::add(ag::gather_rows(f, ia), ag::gather_rows(f, ib)), rbf(ri)}));
            nn::EdgeIndex tmp;
            tmp.dst = ia;
            tmp.num_nodes = n_atoms;
            v = ag::add(v, ag::mul_col(ag::scatter_add_rows(ag::mul_col(ri, gate), ia, n_atoms), ag::constant(tmp.inverse_degree())));
        }
        return v;
    }

    /// Decodes latents into a binder graph. Prior noise for each atom is drawn
    /// from `rng` unless `prior_noise` (A x 3, template atom order) is given.
    MolecularGraph decode(const LatentCloud& zx, const LatentCloud& zy, const MolecularGraph& site, int steps, Rng& rng,
                          const Matrix* prior_noise = nullptr) const {
        if (zx.blocks.empty() || zy.blocks.empty()) throw std::invalid_argument("decode: empty latent cloud");
        if (zy.size() != site.size()) throw std::invalid_argument("decode: site latents do not match site graph");
        if (steps < 1) throw std::invalid_argument("decode: steps must be >= 1");
        const RigidTransform to_latent = zx.frame.inverse();
        const Var z = ag::constant(zx.z_matrix());
        const Var zvec = ag::constant(zx.zvec_matrix());
        const Var z_site = ag::constant(zy.z_matrix());
        const Matrix site_centers = to_latent.apply_rows(site.centers());
        const DecoderContext ctx = decoder_context(z, zvec, z_site, site_centers, site.types());

        std::vector<int> types;
        const Matrix logits = type_logits(z).value();
        for (Index i = 0; i < logits.rows(); ++i) {
            // UNK is an input-only type; decoded binders use the standard residues
            Index best = 0;
            logits.row(i).head(vocab::kNumStandard).maxCoeff(&best);
            types.push_back(static_cast<int>(best));
        }
        const AtomBatch atoms = template_atoms(types);
        const auto n_atoms = static_cast<Index>(atoms.owner.size());
        Matrix x(n_atoms, 3);
        for (Index a = 0; a < n_atoms; ++a) {
            const Vec3 eps = prior_noise ? Vec3(prior_noise->row(a).transpose()) : Vec3(rng.normal(), rng.normal(), rng.normal());
            x.row(a) = zx.zvec_matrix().row(atoms.owner[static_cast<std::size_t>(a)]) + eps.transpose();
        }
        x = integrate_euler(std::move(x), steps, [&](const Matrix& xs, double t) {
            return velocity(ctx, zvec, atoms, ag::constant(xs), Matrix::Constant(n_atoms, 1, t)).value();
        });
        x = zx.frame.apply_rows(x);

        MolecularGraph g;
        g.role = GraphRole::binder;
        for (std::size_t i = 0; i < types.size(); ++i) {
            Block b;
            b.block_type = types[i];
            b.chain_id = "A";
            b.residue_index = static_cast<int>(i) + 1;
            g.blocks.push_back(std::move(b));
        }
        for (Index a = 0; a < n_atoms; ++a) {
            auto& b = g.blocks[static_cast<std::size_t>(atoms.owner[static_cast<std::size_t>(a)])];
            const auto name = vocab::type(b.block_type).atoms[static_cast<std::size_t>(atoms.slot[static_cast<std::size_t>(a)])];
            b.atoms.push_back({vocab::element_of(name), std::string(name), Vec3(x.row(a).transpose())});
        }
        for (auto& b : g.blocks) b.intra_bonds = detect_intra_bonds(b.atoms);
        return build_block_graph(std::move(g), cfg_.k_neighbors);
    }

    // ------------------------------------------------------------------ losses

    struct TermVars {
        Var recon_type, recon_field, kl_scalar, kl_coord, bond, local_distance;
        Var pooled_key, pooled_value;
    };

    /// Per-complex loss terms (everything except the batch-level contrastive term).
    TermVars complex_terms(const ComplexRecord& rec, Rng& rng) const {
        const EncoderOutput eb = encode_vars(rec.binder);
        const EncoderOutput es = encode_vars(rec.site);
        const Index n = eb.mu.rows();
        const Index d = cfg_.latent_size;

        const Var zb = ag::add(eb.mu, ag::mul(eb.sigma, ag::constant(rng.normal_matrix(n, d))));
        const Var zvb = ag::add(eb.mu_vec, ag::mul(eb.sigma_vec, ag::constant(rng.normal_matrix(n, 3))));
        const Index m = es.mu.rows();
        const Var zs = ag::add(es.mu, ag::mul(es.sigma, ag::constant(rng.normal_matrix(m, d))));

        TermVars out;
        out.pooled_key = es.pooled;
        out.pooled_value = eb.pooled;
        out.kl_scalar = ag::scale(kl_term(eb.mu, eb.sigma, ag::constant(Matrix::Zero(n, d))), cfg_.kl_sequence_weight);
        out.kl_coord = ag::scale(kl_term(eb.mu_vec, eb.sigma_vec, ag::constant(eb.centers)), cfg_.kl_structure_weight);

        const std::vector<int> types = rec.binder.types();
        out.recon_type = ag::cross_entropy(type_logits(zb), std::vector<Index>(types.begin(), types.end()));

        const DecoderContext ctx = decoder_context(zb, zvb, zs, rec.site.centers(), rec.site.types());

        // bond presence between binder blocks
        std::vector<std::pair<Index, Index>> pairs;
        const Var bl = bond_logits(ctx, pairs);
        if (bl.defined()) {
            std::vector<Index> labels;
            for (const auto& [i, j] : pairs) {
                labels.push_back(inter_block_bond(rec.binder.blocks[static_cast<std::size_t>(i)], rec.binder.blocks[static_cast<std::size_t>(j)]));
            }
            out.bond = ag::cross_entropy(bl, labels);
        } else {
            out.bond = ag::scalar(0.0);
        }

        // flow matching on the linear path x_t = (1 - t) x0 + t x1
        const auto [atoms, x1] = graph_atoms(rec.binder);
        const auto n_atoms = static_cast<Index>(atoms.owner.size());
        Matrix t_block(n, 1);
        for (Index i = 0; i < n; ++i) t_block(i, 0) = rng.uniform();
        Matrix t(n_atoms, 1);
        for (Index a = 0; a < n_atoms; ++a) t(a, 0) = t_block(atoms.owner[static_cast<std::size_t>(a)], 0);
        const Var x0 = ag::add(ag::gather_rows(zvb, atoms.owner), ag::constant(rng.normal_matrix(n_atoms, 3)));
        const Var xt = ag::add(ag::mul_col(x0, ag::constant((1.0 - t.array()).matrix())),
                               ag::constant((x1.array().colwise() * t.col(0).array()).matrix()));
        const Var target = ag::sub(ag::constant(x1), x0);
        const Var pred = velocity(ctx, zvb, atoms, xt, t);
        out.recon_field = ag::mse(pred, target);

        // distances between reconstructed C-alpha atoms
        std::vector<Index> ca_atom(static_cast<std::size_t>(n), -1);
        for (Index a = 0; a < n_atoms; ++a) {
            if (atoms.slot[static_cast<std::size_t>(a)] == 1) ca_atom[static_cast<std::size_t>(atoms.owner[static_cast<std::size_t>(a)])] = a;
        }
        std::vector<Index> pi, pj;
        std::vector<double> dtrue;
        for (Index i = 0; i < n; ++i) {
            for (Index j = i + 1; j < n; ++j) {
                const Index a = ca_atom[static_cast<std::size_t>(i)];
                const Index b = ca_atom[static_cast<std::size_t>(j)];
                if (a < 0 || b < 0) continue;
                const double dd = (x1.row(a) - x1.row(b)).norm();
                if (dd < cfg_.local_distance_cutoff) {
                    pi.push_back(a);
                    pj.push_back(b);
                    dtrue.push_back(dd);
                }
            }
        }
        if (!pi.empty()) {
            const Var x_hat = ag::add(xt, ag::mul_col(pred, ag::constant((1.0 - t.array()).matrix())));
            const Var dist = ag::row_norm(ag::sub(ag::gather_rows(x_hat, pi), ag::gather_rows(x_hat, pj)), 1e-8);
            out.local_distance = ag::mse(dist, ag::constant(Eigen::Map<const Matrix>(dtrue.data(), static_cast<Index>(dtrue.size()), 1)));
        } else {
            out.local_distance = ag::scalar(0.0);
        }
        return out;
    }

    /// Eq.-5-style objective over a batch: component means over complexes plus
    /// the batch contrastive term. Returns the differentiable total and a report.
    std::pair<Var, VaeLossReport> total_loss(const std::vector<ComplexRecord>& batch, Rng& rng) const {
        if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
        std::vector<Var> rt, rf, ks, kc, bo, ld, keys, values;
        for (const auto& rec : batch) {
            const TermVars tv = complex_terms(rec, rng);
            rt.push_back(tv.recon_type);
            rf.push_back(tv.recon_field);
            ks.push_back(tv.kl_scalar);
            kc.push_back(tv.kl_coord);
            bo.push_back(tv.bond);
            ld.push_back(tv.local_distance);
            keys.push_back(tv.pooled_key);
            values.push_back(tv.pooled_value);
        }
        auto avg = [](const std::vector<Var>& v) { return ag::mean(ag::concat_rows(v)); };
        const Var recon_type = avg(rt), recon_field = avg(rf), kl_s = avg(ks), kl_c = avg(kc), bond = avg(bo), local = avg(ld);
        const Var contrastive = contrastive_var(ag::concat_rows(keys), ag::concat_rows(values), cfg_.tau);
        const Var total = ag::add(
            ag::add(ag::add(ag::scale(recon_type, cfg_.block_type_weight), ag::scale(recon_field, cfg_.atom_coord_weight)),
                    ag::add(kl_s, kl_c)),
            ag::add(ag::scale(contrastive, cfg_.contrastive_weight),
                    ag::add(ag::scale(local, cfg_.local_distance_weight), ag::scale(bond, cfg_.bond_weight))));
        VaeLossReport r;
        r.recon_type = recon_type.item();
        r.recon_field = recon_field.item();
        r.kl_scalar = kl_s.item();
        r.kl_coord = kl_c.item();
        r.contrastive = contrastive.item();
        r.bond = bond.item();
        r.local_distance = local.item();
        r.total = total.item();
        return {total, r};
    }

private:
    CvaeConfig cfg_;
    nn::ParamStore store_;
    nn::Linear enc_in_, enc_edge_, mu_head_, sigma_head_, sigma_vec_head_;
    std::vector<TransformerLayer> enc_layers_;
    nn::Linear dec_binder_in_, dec_site_in_, time_in_;
    Var dec_role_, slot_embed_;
    std::vector<TransformerLayer> dec_layers_;
    nn::Mlp type_head_, bond_head_, anchor_gate_, neighbor_gate_, intra_gate_;
};

}  // namespace radiance::cvae
