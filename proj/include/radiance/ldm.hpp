#pragma once

// Latent diffusion over per-block states u_i = [z_i, z⃗_i] with a
// time-conditioned equivariant denoiser and three ways of feeding retrieved
// template embeddings into it.

#include "radiance/cvae.hpp"
#include "radiance/equivariant.hpp"
#include "radiance/nn.hpp"
#include "radiance/retrievaldb.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace radiance::ldm {

using ag::Index;
using ag::Matrix;
using ag::Var;

enum class ConditioningMode { cross_attention, adaln_zero, in_context };

inline std::string to_string(ConditioningMode m) {
    switch (m) {
        case ConditioningMode::cross_attention: return "cross_attention";
        case ConditioningMode::adaln_zero: return "adaln_zero";
        case ConditioningMode::in_context: return "in_context";
    }
    return "?";
}

inline ConditioningMode conditioning_from_string(const std::string& s) {
    if (s == "cross_attention") return ConditioningMode::cross_attention;
    if (s == "adaln_zero") return ConditioningMode::adaln_zero;
    if (s == "in_context") return ConditioningMode::in_context;
    throw std::invalid_argument("unknown conditioning mode: " + s);
}

struct LdmConfig {
    int latent_size = 8;
    int hidden_size = 512;
    int n_layers = 6;
    int n_heads = 8;
    int cross_heads = 8;
    int n_rbf = 64;
    double cutoff = 3.0;
    int k_neighbors = 9;
    int T = 100;
    double schedule_offset = 0.008;
    ConditioningMode conditioning = ConditioningMode::cross_attention;
    int prompt_dim = 512;
    int time_features = 32;
    int position_features = 16;

    void validate() const {
        if (latent_size < 1 || hidden_size < 1 || prompt_dim < 1) throw std::invalid_argument("ldm config: sizes must be >= 1");
        if (n_heads < 1 || hidden_size % n_heads != 0) throw std::invalid_argument("ldm config: hidden_size % n_heads != 0");
        if (cross_heads < 1 || hidden_size % cross_heads != 0) throw std::invalid_argument("ldm config: hidden_size % cross_heads != 0");
        if (T < 1) throw std::invalid_argument("ldm config: T must be >= 1");
        if (n_layers < 0) throw std::invalid_argument("ldm config: n_layers must be >= 0");
        if (!(cutoff > 0.0) || n_rbf < 1) throw std::invalid_argument("ldm config: bad RBF settings");
    }
};

inline void to_json(nlohmann::json& j, const LdmConfig& c) {
    j = {{"latent_size", c.latent_size},     {"hidden_size", c.hidden_size},
         {"n_layers", c.n_layers},           {"n_heads", c.n_heads},
         {"cross_heads", c.cross_heads},     {"n_rbf", c.n_rbf},
         {"cutoff", c.cutoff},               {"k_neighbors", c.k_neighbors},
         {"T", c.T},                         {"schedule_offset", c.schedule_offset},
         {"conditioning_mode", to_string(c.conditioning)},
         {"prompt_dim", c.prompt_dim},       {"time_features", c.time_features},
         {"position_features", c.position_features}};
}

inline void from_json(const nlohmann::json& j, LdmConfig& c) {
    LdmConfig d;
    c.latent_size = j.value("latent_size", d.latent_size);
    c.hidden_size = j.value("hidden_size", d.hidden_size);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.cross_heads = j.value("cross_heads", d.cross_heads);
    c.n_rbf = j.value("n_rbf", d.n_rbf);
    c.cutoff = j.value("cutoff", d.cutoff);
    c.k_neighbors = j.value("k_neighbors", d.k_neighbors);
    c.T = j.value("T", d.T);
    c.schedule_offset = j.value("schedule_offset", d.schedule_offset);
    c.conditioning = conditioning_from_string(j.value("conditioning_mode", to_string(d.conditioning)));
    c.prompt_dim = j.value("prompt_dim", d.prompt_dim);
    c.time_features = j.value("time_features", d.time_features);
    c.position_features = j.value("position_features", d.position_features);
}

// ---------------------------------------------------------------------------
// Schedule and forward process

/// Timesteps are 1-based: beta(1) .. beta(T).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    double beta_at(int t) const { return beta.at(index(t)); }
    double alpha_at(int t) const { return 1.0 - beta_at(t); }
    double alpha_bar_at(int t) const { return alpha_bar.at(index(t)); }

private:
    std::size_t index(int t) const {
        if (t < 1 || t > T) throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
        return static_cast<std::size_t>(t - 1);
    }
};

/// Cosine schedule: f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), beta_t = 1 -
/// f(t)/f(t-1) clipped to 0.999. alpha_bar is the running product of the
/// clipped (1 - beta), so the product identity holds exactly.
inline NoiseSchedule cosine_schedule(int T, double s = 0.008) {
    if (T < 1) throw std::invalid_argument("cosine_schedule: T must be >= 1");
    const double half_pi = std::acos(-1.0) / 2.0;
    auto f = [&](int t) {
        const double c = std::cos(((static_cast<double>(t) / T + s) / (1.0 + s)) * half_pi);
        return c * c;
    };
    NoiseSchedule sched;
    sched.T = T;
    double running = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double b = std::min(1.0 - f(t) / f(t - 1), 0.999);
        sched.beta.push_back(b);
        running *= 1.0 - b;
        sched.alpha_bar.push_back(running);
    }
    return sched;
}

/// u_t = sqrt(alpha_bar_t) u_0 + sqrt(1 - alpha_bar_t) eps
inline Matrix forward_sample(const Matrix& u0, int t, const Matrix& eps, const NoiseSchedule& sched) {
    if (u0.rows() != eps.rows() || u0.cols() != eps.cols()) throw std::invalid_argument("forward_sample: shape mismatch");
    const double ab = sched.alpha_bar_at(t);
    return std::sqrt(ab) * u0 + std::sqrt(1.0 - ab) * eps;
}

/// (u_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
inline Matrix posterior_mean(const Matrix& ut, const Matrix& eps_hat, int t, const NoiseSchedule& sched) {
    const double b = sched.beta_at(t);
    return (ut - (b / std::sqrt(1.0 - sched.alpha_bar_at(t))) * eps_hat) / std::sqrt(1.0 - b);
}

// ---------------------------------------------------------------------------
// State types

struct DiffusionState {
    Matrix u;  // n x (d + 3)
    int t = 0;
    RigidTransform frame;
};

struct PromptSet {
    std::vector<Eigen::VectorXd> vectors;

    bool empty() const { return vectors.empty(); }
    std::size_t size() const { return vectors.size(); }

    Matrix matrix() const {
        if (vectors.empty()) return Matrix(0, 0);
        Matrix m(static_cast<Index>(vectors.size()), vectors.front().size());
        for (std::size_t i = 0; i < vectors.size(); ++i) {
            if (vectors[i].size() != m.cols()) throw std::invalid_argument("prompt vectors differ in dimension");
            m.row(static_cast<Index>(i)) = vectors[i].transpose();
        }
        return m;
    }
};

/// Binder and site latents in a frame centred on the site's latent centroid.
struct LatentInputs {
    Matrix u0;    // binder, n x (d + 3)
    Matrix site;  // m x (d + 3)
    RigidTransform frame;
};

/// Posterior means of both clouds, translated so the site coordinate latents
/// have zero mean.
inline LatentInputs center_latents(const cvae::LatentCloud& binder, const cvae::LatentCloud& site) {
    LatentInputs in;
    const Matrix site_vec = site.mu_vec_matrix();
    const Vec3 c = site_vec.colwise().mean().transpose();
    in.frame = RigidTransform::translation_only(c);
    auto pack = [&](const cvae::LatentCloud& cloud) {
        const Matrix mu = cloud.mu_matrix();
        Matrix u(mu.rows(), mu.cols() + 3);
        u.leftCols(mu.cols()) = mu;
        u.rightCols(3) = cloud.mu_vec_matrix().rowwise() - c.transpose();
        return u;
    };
    if (!binder.blocks.empty()) in.u0 = pack(binder);
    in.site = pack(site);
    return in;
}

/// Sampled binder state back to a latent cloud whose frame maps to the site's frame.
inline cvae::LatentCloud to_latent_cloud(const Matrix& u, const RigidTransform& frame, int latent_size) {
    cvae::LatentCloud cloud;
    cloud.frame = frame;
    for (Index i = 0; i < u.rows(); ++i) {
        cvae::LatentBlock b;
        b.z = u.row(i).head(latent_size).transpose();
        b.mu = b.z;
        b.sigma = Eigen::VectorXd::Ones(latent_size);
        b.z_vec = u.row(i).tail(3).transpose();
        b.mu_vec = b.z_vec;
        b.block_index = static_cast<int>(i);
        cloud.blocks.push_back(std::move(b));
    }
    return cloud;
}

// ---------------------------------------------------------------------------
// Attention over prompt vectors

/// Multi-head softmax(Q K^T / sqrt(d_head)) V with queries from the nodes and
/// keys/values from the prompt. When `weights` is given it receives the
/// attention matrix of every head stacked vertically ((heads * N) x n).
inline Var prompt_attention(const Var& q, const Var& k, const Var& v, Index heads, Matrix* weights = nullptr) {
    const Index h = q.cols();
    const Index dh = h / heads;
    std::vector<Var> outs;
    if (weights) weights->resize(0, k.rows());
    for (Index hd = 0; hd < heads; ++hd) {
        const Var qh = ag::slice_cols(q, hd * dh, dh);
        const Var kh = ag::slice_cols(k, hd * dh, dh);
        const Var vh = ag::slice_cols(v, hd * dh, dh);
        const Var a = ag::softmax_rows(ag::scale(ag::matmul(qh, ag::transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh))));
        if (weights) {
            Matrix stacked(weights->rows() + a.rows(), k.rows());
            stacked << *weights, a.value();
            *weights = std::move(stacked);
        }
        outs.push_back(ag::matmul(a, vh));
    }
    return ag::concat_cols(outs);
}

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserLayer {
    nn::GraphAttention attn;
    nn::Mlp ffn;
    // cross_attention
    nn::Projection cross_q, cross_k, cross_v;
    // adaln_zero: prompt mean -> (gamma1, beta1, alpha1, gamma2, beta2, alpha2)
    nn::Linear modulation;
    // in_context
    nn::Projection select_q, select_k;
    nn::Mlp fuse;
};

class Denoiser {
public:
    explicit Denoiser(LdmConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        // conditioning weights come from their own stream so the shared
        // weights are identical for every mode under the same seed
        Rng cond_rng = rng.split(1);
        const Index h = cfg_.hidden_size;
        const Index p = cfg_.prompt_dim;
        input_ = nn::Linear::create(store_, "input", cfg_.latent_size + 1 + cfg_.position_features, h, rng);
        time_ = nn::Linear::create(store_, "time", cfg_.time_features, h, rng);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::string name = "layer" + std::to_string(l);
            DenoiserLayer layer;
            layer.attn = nn::GraphAttention::create(store_, name + ".attn", h, cfg_.n_heads, 0, cfg_.n_rbf, cfg_.cutoff, rng);
            layer.ffn = nn::Mlp::create(store_, name + ".ffn", h, h, h, rng);
            switch (cfg_.conditioning) {
                case ConditioningMode::cross_attention:
                    layer.cross_q = nn::Projection::create(store_, name + ".cond.q", h, h, cond_rng);
                    layer.cross_k = nn::Projection::create(store_, name + ".cond.k", p, h, cond_rng);
                    layer.cross_v = nn::Projection::create(store_, name + ".cond.v", p, h, cond_rng);
                    break;
                case ConditioningMode::adaln_zero:
                    layer.modulation = nn::Linear::create(store_, name + ".cond.scale", p, 6 * h, cond_rng, /*zero_init=*/true);
                    break;
                case ConditioningMode::in_context:
                    layer.select_q = nn::Projection::create(store_, name + ".cond.q", h, p, cond_rng);
                    layer.select_k = nn::Projection::create(store_, name + ".cond.k", p, p, cond_rng);
                    layer.fuse = nn::Mlp::create(store_, name + ".cond.fuse", h + p, h, h, cond_rng);
                    break;
            }
            layers_.push_back(std::move(layer));
        }
        scalar_head_ = nn::Mlp::create(store_, "scalar_head", h, h, cfg_.latent_size, rng);
        // direct paths from u_t to the prediction; the normalised trunk loses
        // the input scale, which the t near T steps amplify. Zero init.
        scalar_skip_ = nn::Projection::create(store_, "scalar_skip", cfg_.latent_size, cfg_.latent_size, rng, true);
        coord_skip_ = nn::Linear::create(store_, "coord_skip", cfg_.time_features, 1, rng, true);
    }

    const LdmConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    /// Predicted noise for the binder rows of `ut` (n x (d + 3)) given the
    /// site latents (m x (d + 3)) in the same frame.
    Var predict_var(const Matrix& ut, const Matrix& site, const PromptSet& prompt, int t) const {
        const Index d = cfg_.latent_size;
        if (ut.cols() != d + 3 || (site.size() != 0 && site.cols() != d + 3)) throw std::invalid_argument("predict_noise: latent width mismatch");
        if (ut.rows() == 0) throw std::invalid_argument("predict_noise: no binder blocks");
        const Matrix pm = prompt.matrix();
        if (!prompt.empty() && pm.cols() != cfg_.prompt_dim) {
            throw std::invalid_argument("prompt dimension " + std::to_string(pm.cols()) + " does not match " + std::to_string(cfg_.prompt_dim));
        }
        const Index n = ut.rows();
        const Index m = site.rows();
        const Index total = n + m;

        Matrix feat = Matrix::Zero(total, d + 1 + cfg_.position_features);
        Matrix x0(total, 3);
        Matrix mask = Matrix::Zero(total, 1);
        for (Index i = 0; i < n; ++i) {
            feat.row(i).head(d) = ut.row(i).head(d);
            feat.row(i).tail(cfg_.position_features) = nn::sinusoidal_embedding(static_cast<double>(i), cfg_.position_features);
            x0.row(i) = ut.row(i).tail(3);
            mask(i, 0) = 1.0;
        }
        for (Index j = 0; j < m; ++j) {
            feat.row(n + j).head(d) = site.row(j).head(d);
            feat(n + j, d) = 1.0;
            x0.row(n + j) = site.row(j).tail(3);
        }
        const Var temb = ag::constant(nn::sinusoidal_embedding(static_cast<double>(t), cfg_.time_features));
        Var h = ag::add_row(input_(ag::constant(feat)), time_(temb));
        Var x = ag::constant(x0);
        const Var binder_mask = ag::constant(mask);
        const nn::EdgeIndex edges = nn::knn_edges(x0, cfg_.k_neighbors);
        const bool conditioned = !prompt.empty();
        const Var tv = conditioned ? ag::constant(pm) : Var();

        for (const auto& layer : layers_) {
            Var mod;
            if (conditioned && cfg_.conditioning == ConditioningMode::adaln_zero) {
                mod = layer.modulation(ag::col_mean(tv));
            }
            auto chunk = [&](int k) { return ag::add_scalar(ag::slice_cols(mod, k * cfg_.hidden_size, cfg_.hidden_size), k % 3 == 1 ? 0.0 : 1.0); };

            if (conditioned && cfg_.conditioning == ConditioningMode::in_context) {
                const Var scores = ag::matmul(layer.select_q(h), ag::transpose(layer.select_k(tv)));
                const Var sel = ag::matmul(ag::softmax_rows(ag::scale(scores, 1.0 / std::sqrt(static_cast<double>(cfg_.prompt_dim)))), tv);
                h = ag::add(h, layer.fuse(ag::concat_cols({h, sel})));
            }

            Var a = ag::layer_norm_rows(h);
            if (mod.defined()) a = ag::add_row(ag::mul_row(a, chunk(0)), chunk(1));
            const auto sa = layer.attn(a, x, edges, Var());
            Var upd = sa.features;
            if (mod.defined()) upd = ag::mul_row(upd, chunk(2));
            h = ag::layer_norm_rows(ag::add(h, upd));
            x = ag::add(x, ag::mul_col(sa.coord_update, binder_mask));

            if (conditioned && cfg_.conditioning == ConditioningMode::cross_attention) {
                const Var c = prompt_attention(layer.cross_q(h), layer.cross_k(tv), layer.cross_v(tv), cfg_.cross_heads);
                h = ag::layer_norm_rows(ag::add(h, c));
            }

            Var b = ag::layer_norm_rows(h);
            if (mod.defined()) b = ag::add_row(ag::mul_row(b, chunk(3)), chunk(4));
            Var f = layer.ffn(b);
            if (mod.defined()) f = ag::mul_row(f, chunk(5));
            h = ag::layer_norm_rows(ag::add(h, f));
        }
        const Var scalar = ag::add(scalar_head_(ag::slice_rows(h, 0, n)), scalar_skip_(ag::constant(ut.leftCols(d))));
        // relative to the site centroid so the skip is translation invariant
        const Eigen::RowVector3d origin = m > 0 ? Eigen::RowVector3d(x0.bottomRows(m).colwise().mean()) : Eigen::RowVector3d(x0.topRows(n).colwise().mean());
        const Matrix xb = x0.topRows(n).rowwise() - origin;
        const Var coord = ag::add(ag::sub(ag::slice_rows(x, 0, n), ag::constant(x0.topRows(n))),
                                  ag::mul(ag::broadcast_scalar(coord_skip_(temb), n, 3), ag::constant(xb)));
        return ag::concat_cols({scalar, coord});
    }

    Matrix predict_noise(const DiffusionState& state, const Matrix& site, const PromptSet& prompt) const {
        return predict_var(state.u, site, prompt, state.t).value();
    }

private:
    LdmConfig cfg_;
    nn::ParamStore store_;
    nn::Linear input_, time_;
    std::vector<DenoiserLayer> layers_;
    nn::Mlp scalar_head_;
    nn::Projection scalar_skip_;
    nn::Linear coord_skip_;  // time-dependent weight on the noisy coordinates
};

/// One reverse step: N(mean, beta_t I), or the mean itself at t = 1.
inline DiffusionState denoise_step(const DiffusionState& state, const Matrix& site, const PromptSet& prompt, const NoiseSchedule& sched,
                                   const Denoiser& model, Rng& rng) {
    const Matrix eps_hat = model.predict_noise(state, site, prompt);
    DiffusionState next = state;
    next.u = posterior_mean(state.u, eps_hat, state.t, sched);
    if (state.t > 1) next.u += std::sqrt(sched.beta_at(state.t)) * rng.normal_matrix(state.u.rows(), state.u.cols());
    next.t = state.t - 1;
    return next;
}

/// Full reverse chain from N(0, I) over T steps.
inline DiffusionState sample(const Denoiser& model, const Matrix& site, const PromptSet& prompt, Index n_blocks,
                             const NoiseSchedule& sched, Rng& rng, const RigidTransform& frame = {}) {
    if (n_blocks < 1) throw std::invalid_argument("sample: binder must have at least one block");
    DiffusionState s;
    s.u = rng.normal_matrix(n_blocks, model.config().latent_size + 3);
    s.t = sched.T;
    s.frame = frame;
    while (s.t >= 1) s = denoise_step(s, site, prompt, sched, model, rng);
    return s;
}

/// sum_i ||eps_i - eps_hat_i||^2 / n for one sample at timestep t.
inline Var diffusion_loss(const Denoiser& model, const Matrix& u0, const Matrix& site, const PromptSet& prompt, int t, const Matrix& eps,
                          const NoiseSchedule& sched) {
    const Matrix ut = forward_sample(u0, t, eps, sched);
    const Var pred = model.predict_var(ut, site, prompt, t);
    return ag::scale(ag::sum(ag::square(ag::sub(pred, ag::constant(eps)))), 1.0 / static_cast<double>(u0.rows()));
}

// ---------------------------------------------------------------------------
// Training step with retrieval

struct RetrievalSettings {
    db::QueryMode mode = db::QueryMode::top_n;
    int n = 10;
    std::optional<double> threshold;  // adaptive retrieval when set

    nlohmann::json to_json() const {
        nlohmann::json j = {{"mode", db::to_string(mode)}, {"n", n}};
        j["threshold"] = threshold ? nlohmann::json(*threshold) : nlohmann::json(nullptr);
        return j;
    }
    static RetrievalSettings from_json(const nlohmann::json& j) {
        RetrievalSettings s;
        s.mode = db::mode_from_string(j.value("mode", std::string("topN")));
        s.n = j.value("n", 10);
        if (j.contains("threshold") && !j["threshold"].is_null()) s.threshold = j["threshold"].get<double>();
        return s;
    }
};

/// Retrieves the prompt for `key`; `n` is capped at the number of available
/// entries, and an empty database gives an empty prompt.
inline db::RetrievalResult retrieve(const db::Database& database, const Eigen::VectorXd& key, const RetrievalSettings& settings,
                                    const std::set<std::string>& exclude, Rng& rng) {
    if (database.empty()) return {};
    if (settings.threshold) return database.query_adaptive(key, *settings.threshold, exclude);
    std::size_t available = 0;
    for (const auto& e : database.entries()) available += !exclude.count(e.id);
    const int n = std::min<int>(settings.n, static_cast<int>(available));
    return database.query_mode(key, settings.mode, n, exclude, rng);
}

inline PromptSet to_prompt(const db::RetrievalResult& r) { return PromptSet{r.prompt}; }

/// Encoded training example: centred latents plus the site key used for retrieval.
struct LdmSample {
    std::string id;
    LatentInputs latents;
    Eigen::VectorXd key;
};

inline LdmSample make_sample(const cvae::CvaeModel& encoder, const ComplexRecord& rec) {
    const auto [binder_cloud, value] = encoder.encode(rec.binder);
    const auto [site_cloud, key] = encoder.encode(rec.site);
    return {rec.id, center_latents(binder_cloud, site_cloud), key.vec};
}

inline std::uint64_t stable_hash(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

struct TrainStepResult {
    Var loss;
    std::vector<std::pair<std::string, db::RetrievalResult>> provenance;
};

/// Mean diffusion loss over the batch. Each sample draws its timestep, noise
/// and (for random retrieval) prompt from a stream keyed by its id, so the
/// result does not depend on batch order. A sample's own entry is always
/// excluded from its prompt.
inline TrainStepResult ldm_train_step(const Denoiser& model, const std::vector<LdmSample>& batch, const db::Database& database,
                                      const RetrievalSettings& settings, const NoiseSchedule& sched, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("ldm_train_step: empty batch");
    const Rng base(rng.engine()());
    TrainStepResult out;
    std::vector<Var> losses;
    for (const auto& s : batch) {
        Rng local = base.split(stable_hash(s.id));
        const auto r = retrieve(database, s.key, settings, {s.id}, local);
        const int t = static_cast<int>(local.uniform_int(1, sched.T));
        const Matrix eps = local.normal_matrix(s.latents.u0.rows(), s.latents.u0.cols());
        losses.push_back(diffusion_loss(model, s.latents.u0, s.latents.site, to_prompt(r), t, eps, sched));
        out.provenance.emplace_back(s.id, r);
    }
    out.loss = ag::scale(ag::sum(ag::concat_rows(losses)), 1.0 / static_cast<double>(losses.size()));
    return out;
}

}  // namespace radiance::ldm
