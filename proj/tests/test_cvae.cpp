#include "gradcheck.hpp"

#include "radiance/cvae.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace radiance;
using namespace radiance::cvae;

namespace {

CvaeConfig small_config() {
    CvaeConfig c;
    c.hidden_size = 16;
    c.edge_size = 8;
    c.n_layers = 2;
    c.n_heads = 2;
    c.n_rbf = 8;
    return c;
}

MolecularGraph transformed(MolecularGraph g, const RigidTransform& t) {
    for (auto& b : g.blocks) {
        for (auto& a : b.atoms) a.coord = t.apply(a.coord);
    }
    return g;
}

LatentBlock unit_block(int d) {
    LatentBlock lb;
    lb.mu = Eigen::VectorXd::Zero(d);
    lb.sigma = Eigen::VectorXd::Ones(d);
    lb.z = lb.mu;
    return lb;
}

}  // namespace

// ---------------------------------------------------------------- encode

TEST(Encode, RigidTransformInvariance) {
    const CvaeModel model(small_config(), 1);
    const ComplexRecord rec = prepare_complex(synth_complex(3, 8, 24));
    Rng rng(17);
    const auto [cloud, emb] = model.encode(rec.site);
    EXPECT_EQ(emb.kind, EmbeddingKind::key);
    EXPECT_EQ(cloud.size(), rec.site.size());
    for (int trial = 0; trial < 10; ++trial) {
        const RigidTransform g = random_rigid(rng);
        const auto [cloud2, emb2] = model.encode(transformed(rec.site, g));
        EXPECT_LE((emb.vec - emb2.vec).cwiseAbs().maxCoeff(), 1e-4);
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            EXPECT_LE((g.apply(cloud.blocks[i].mu_vec) - cloud2.blocks[i].mu_vec).cwiseAbs().maxCoeff(), 1e-4);
            EXPECT_LE((cloud.blocks[i].mu - cloud2.blocks[i].mu).cwiseAbs().maxCoeff(), 1e-4);
            EXPECT_LE((cloud.blocks[i].sigma_vec - cloud2.blocks[i].sigma_vec).cwiseAbs().maxCoeff(), 1e-4);
        }
    }
}

TEST(Encode, PermutationEquivariance) {
    const CvaeModel model(small_config(), 2);
    const ComplexRecord rec = prepare_complex(synth_complex(4, 7, 20));
    const MolecularGraph& g = rec.binder;
    std::vector<int> perm(g.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[0], perm[2]);
    MolecularGraph p;
    p.role = g.role;
    std::vector<int> inv(g.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        p.blocks.push_back(g.blocks[static_cast<std::size_t>(perm[i])]);
        inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    }
    for (const auto& e : g.edges) p.edges.push_back({inv[static_cast<std::size_t>(e.src)], inv[static_cast<std::size_t>(e.dst)], e.bond});
    const auto [c1, e1] = model.encode(g);
    const auto [c2, e2] = model.encode(p);
    EXPECT_EQ(e1.kind, EmbeddingKind::value);
    EXPECT_LE((e1.vec - e2.vec).cwiseAbs().maxCoeff(), 1e-9);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        EXPECT_LE((c2.blocks[i].mu - c1.blocks[static_cast<std::size_t>(perm[i])].mu).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(Encode, DistinctGraphsDistinctEmbeddings) {
    const CvaeModel model(small_config(), 3);
    const auto a = model.encode(prepare_complex(synth_complex(10, 8, 20)).site).second;
    const auto b = model.encode(prepare_complex(synth_complex(11, 8, 20)).site).second;
    EXPECT_GT((a.vec - b.vec).norm(), 1e-3);
}

TEST(Encode, EmptyGraphThrows) {
    const CvaeModel model(small_config(), 3);
    EXPECT_THROW(model.encode(MolecularGraph{}), std::invalid_argument);
}

TEST(Encode, PosteriorScalesPositive) {
    const CvaeModel model(small_config(), 4);
    const auto cloud = model.encode(prepare_complex(synth_complex(5, 8, 20)).binder).first;
    for (const auto& b : cloud.blocks) {
        EXPECT_GT(b.sigma.minCoeff(), 0.0);
        EXPECT_GT(b.sigma_vec.minCoeff(), 0.0);
        EXPECT_EQ(b.sigma_vec(0), b.sigma_vec(1));
    }
}

// ---------------------------------------------------------------- reparameterize

TEST(Reparameterize, ZeroSigmaGivesMean) {
    LatentBlock lb = unit_block(8);
    lb.mu.setConstant(0.7);
    lb.sigma.setZero();
    lb.mu_vec = Vec3(1, 2, 3);
    lb.sigma_vec.setZero();
    Rng rng(1);
    const LatentBlock s = reparameterize(lb, rng);
    EXPECT_LE((s.z - lb.mu).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_LE((s.z_vec - lb.mu_vec).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_GT(s.sigma.minCoeff(), 0.0);
}

TEST(Reparameterize, SampleMeanMatchesMu) {
    LatentBlock lb = unit_block(4);
    lb.mu << 0.5, -1.0, 2.0, 0.0;
    lb.sigma << 0.3, 1.0, 2.0, 0.1;
    lb.mu_vec = Vec3(1, -2, 0.5);
    lb.sigma_vec = Vec3::Constant(0.8);
    Rng rng(2);
    const int n = 100000;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(4);
    Vec3 acc_vec = Vec3::Zero();
    for (int i = 0; i < n; ++i) {
        const LatentBlock s = reparameterize(lb, rng);
        acc += s.z;
        acc_vec += s.z_vec;
    }
    acc /= n;
    acc_vec /= n;
    for (int k = 0; k < 4; ++k) EXPECT_LE(std::abs(acc(k) - lb.mu(k)), 3.0 * lb.sigma(k) / std::sqrt(n));
    for (int k = 0; k < 3; ++k) EXPECT_LE(std::abs(acc_vec(k) - lb.mu_vec(k)), 3.0 * lb.sigma_vec(k) / std::sqrt(n));
}

TEST(Reparameterize, SameSeedSameSample) {
    LatentBlock lb = unit_block(8);
    Rng a(9), b(9);
    EXPECT_EQ(reparameterize(lb, a).z, reparameterize(lb, b).z);
}

// ---------------------------------------------------------------- KL

TEST(KlLoss, ZeroForMatchingDistributions) {
    LatentBlock lb = unit_block(8);
    lb.mu_vec = Vec3(1, 2, 3);
    EXPECT_DOUBLE_EQ(kl_loss(lb, Vec3(1, 2, 3)), 0.0);
}

TEST(KlLoss, UnitShiftGivesHalfLambda) {
    LatentBlock lb = unit_block(8);
    lb.mu(0) = 1.0;
    EXPECT_NEAR(kl_loss(lb, Vec3::Zero()), 0.8 * 0.5, 1e-15);
    EXPECT_NEAR(kl_loss(lb, Vec3::Zero(), 0.3, 0.6), 0.3 * 0.5, 1e-15);
}

TEST(KlLoss, NonNegative) {
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        LatentBlock lb = unit_block(8);
        for (int k = 0; k < 8; ++k) {
            lb.mu(k) = rng.normal() * 2;
            lb.sigma(k) = std::exp(rng.normal());
        }
        lb.mu_vec = Vec3(rng.normal(), rng.normal(), rng.normal());
        lb.sigma_vec = Vec3::Constant(std::exp(rng.normal()));
        EXPECT_GE(kl_loss(lb, Vec3(rng.normal(), rng.normal(), rng.normal())), 0.0);
    }
}

TEST(KlLoss, MatchesMonteCarlo) {
    // E_q[log q(x) - log p(x)] estimated by sampling q
    LatentBlock lb = unit_block(3);
    lb.mu << 0.4, -0.9, 1.3;
    lb.sigma << 0.5, 1.4, 0.8;
    lb.mu_vec = Vec3(0.2, 0.1, -0.3);
    lb.sigma_vec = Vec3::Constant(0.6);
    const Vec3 center(0.5, -0.5, 0.0);
    Rng rng(5);
    const int n = 1000000;
    double sum_s = 0.0, sum_c = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < 3; ++k) {
            const double e = rng.normal();
            const double x = lb.mu(k) + lb.sigma(k) * e;
            sum_s += -std::log(lb.sigma(k)) - 0.5 * e * e + 0.5 * x * x;
            const double e2 = rng.normal();
            const double y = lb.mu_vec(k) + lb.sigma_vec(k) * e2;
            sum_c += -std::log(lb.sigma_vec(k)) - 0.5 * e2 * e2 + 0.5 * (y - center(k)) * (y - center(k));
        }
    }
    const double mc = 0.8 * sum_s / n + 0.6 * sum_c / n;
    const double closed = kl_loss(lb, center);
    EXPECT_LE(std::abs(mc - closed) / closed, 0.01);
}

// ---------------------------------------------------------------- contrastive

TEST(Contrastive, SinglePairIsZero) {
    GraphEmbedding k{Eigen::VectorXd::Constant(4, 2.0), EmbeddingKind::key};
    GraphEmbedding v{Eigen::VectorXd::Constant(4, -1.0), EmbeddingKind::value};
    EXPECT_EQ(contrastive_loss({k}, {v}, 0.07), 0.0);
}

TEST(Contrastive, DiagonalPairsClosedForm) {
    const double tau = 0.07;
    const double s = 10.0 * tau;
    std::vector<GraphEmbedding> keys(2), values(2);
    keys[0].vec = Eigen::Vector2d(std::sqrt(s), 0.0);
    keys[1].vec = Eigen::Vector2d(0.0, std::sqrt(s));
    values[0].vec = keys[0].vec;
    values[1].vec = keys[1].vec;
    const double expected = 2.0 * std::log1p(std::exp(-10.0));
    EXPECT_NEAR(contrastive_loss(keys, values, tau), expected, 1e-12);
    EXPECT_NEAR(expected, 9.08e-5, 1e-7);
}

TEST(Contrastive, PermutationInvariantAndTermsNonNegative) {
    Rng rng(6);
    std::vector<GraphEmbedding> keys(5), values(5);
    for (int i = 0; i < 5; ++i) {
        keys[static_cast<std::size_t>(i)].vec = rng.normal_matrix(6, 1).col(0);
        values[static_cast<std::size_t>(i)].vec = rng.normal_matrix(6, 1).col(0);
    }
    const double base = contrastive_loss(keys, values, 0.5);
    const std::vector<int> perm = {3, 0, 4, 1, 2};
    std::vector<GraphEmbedding> pk, pv;
    for (int p : perm) {
        pk.push_back(keys[static_cast<std::size_t>(p)]);
        pv.push_back(values[static_cast<std::size_t>(p)]);
    }
    EXPECT_NEAR(contrastive_loss(pk, pv, 0.5), base, 1e-12);
    const Matrix terms = contrastive_terms(ag::constant(stack_embeddings(keys)), ag::constant(stack_embeddings(values)), 0.5).value();
    EXPECT_GE(terms.minCoeff(), 0.0);
}

TEST(Contrastive, LengthMismatchThrows) {
    GraphEmbedding k{Eigen::VectorXd::Zero(3), EmbeddingKind::key};
    EXPECT_THROW(contrastive_loss({k, k}, {k}, 0.07), std::invalid_argument);
}

// ---------------------------------------------------------------- recon

TEST(ReconLoss, PerfectPrediction) {
    Matrix logits = Matrix::Zero(3, vocab::kSize);
    const std::vector<int> types = {1, 5, 20};
    for (int i = 0; i < 3; ++i) logits(i, types[static_cast<std::size_t>(i)]) = 1e6;
    const Matrix f = Rng(1).normal_matrix(10, 3);
    const auto [ce, mse] = recon_loss(logits, types, f, f);
    EXPECT_NEAR(ce, 0.0, 1e-12);
    EXPECT_EQ(mse, 0.0);
}

TEST(ReconLoss, UniformLogits) {
    const auto [ce, mse] = recon_loss(Matrix::Zero(4, vocab::kSize), {0, 1, 2, 3}, Matrix::Zero(1, 3), Matrix::Zero(1, 3));
    EXPECT_NEAR(ce, std::log(21.0), 1e-12);
    EXPECT_NEAR(ce, 3.045, 1e-3);
}

TEST(ReconLoss, MseMatchesBruteForce) {
    Rng rng(3);
    const Matrix a = rng.normal_matrix(7, 3);
    const Matrix b = rng.normal_matrix(7, 3);
    double sum = 0.0;
    for (int i = 0; i < 7; ++i) {
        for (int k = 0; k < 3; ++k) sum += (a(i, k) - b(i, k)) * (a(i, k) - b(i, k));
    }
    EXPECT_NEAR(recon_loss(Matrix::Zero(1, 21), {0}, a, b).second, sum / 21.0, 1e-12);
}

// ---------------------------------------------------------------- decode

TEST(Decode, EulerExactForConstantField) {
    Rng rng(4);
    const Matrix x0 = rng.normal_matrix(6, 3);
    const Matrix x1 = rng.normal_matrix(6, 3);
    const auto oracle = [&](const Matrix&, double) -> Matrix { return x1 - x0; };
    const Matrix end1 = integrate_euler(x0, 1, oracle);
    const Matrix end10 = integrate_euler(x0, 10, oracle);
    EXPECT_LE((end10 - x1).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((end1 - end10).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Decode, ProducesTemplateAtoms) {
    const CvaeModel model(small_config(), 5);
    const ComplexRecord rec = prepare_complex(synth_complex(6, 6, 20));
    const auto zx = model.encode(rec.binder).first;
    const auto zy = model.encode(rec.site).first;
    Rng rng(1);
    const MolecularGraph out = model.decode(zx, zy, rec.site, 10, rng);
    ASSERT_EQ(out.size(), rec.binder.size());
    for (const auto& b : out.blocks) {
        EXPECT_EQ(b.atoms.size(), vocab::type(b.block_type).atoms.size());
        for (const auto& a : b.atoms) EXPECT_TRUE(a.coord.allFinite());
    }
    EXPECT_FALSE(out.edges.empty());
}

TEST(Decode, RigidEquivariance) {
    const CvaeModel model(small_config(), 6);
    const ComplexRecord rec = prepare_complex(synth_complex(7, 5, 18));
    const auto zx = model.encode(rec.binder).first;
    const auto zy = model.encode(rec.site).first;
    std::size_t n_atoms = 0;
    {
        Rng r(0);
        for (const auto& b : model.decode(zx, zy, rec.site, 4, r).blocks) n_atoms += b.atoms.size();
    }
    Rng rng(8);
    const Matrix noise = rng.normal_matrix(static_cast<Index>(n_atoms), 3);
    Rng unused(0);
    const MolecularGraph base = model.decode(zx, zy, rec.site, 4, unused, &noise);
    for (int trial = 0; trial < 5; ++trial) {
        const RigidTransform g = random_rigid(rng);
        LatentCloud zx2 = zx;
        for (auto& b : zx2.blocks) b.z_vec = g.apply(b.z_vec);
        const Matrix noise2 = noise * g.rotation.transpose();
        const MolecularGraph moved = model.decode(zx2, zy, transformed(rec.site, g), 4, unused, &noise2);
        for (std::size_t i = 0; i < base.size(); ++i) {
            ASSERT_EQ(base.blocks[i].block_type, moved.blocks[i].block_type);
            for (std::size_t a = 0; a < base.blocks[i].atoms.size(); ++a) {
                EXPECT_LE((g.apply(base.blocks[i].atoms[a].coord) - moved.blocks[i].atoms[a].coord).cwiseAbs().maxCoeff(), 1e-3);
            }
        }
    }
}

TEST(Decode, FrameIsApplied) {
    const CvaeModel model(small_config(), 6);
    const ComplexRecord rec = prepare_complex(synth_complex(7, 5, 18));
    const auto zx = model.encode(rec.binder).first;
    const auto zy = model.encode(rec.site).first;
    Rng a(3), b(3);
    const MolecularGraph base = model.decode(zx, zy, rec.site, 3, a);
    // express latents in a centred frame and let the frame map them back
    const Vec3 shift(5.0, -2.0, 1.0);
    LatentCloud centred = zx;
    for (auto& blk : centred.blocks) blk.z_vec -= shift;
    centred.frame = RigidTransform::translation_only(shift);
    const MolecularGraph back = model.decode(centred, zy, rec.site, 3, b);
    for (std::size_t i = 0; i < base.size(); ++i) {
        for (std::size_t k = 0; k < base.blocks[i].atoms.size(); ++k) {
            EXPECT_LE((base.blocks[i].atoms[k].coord - back.blocks[i].atoms[k].coord).norm(), 1e-9);
        }
    }
}

// ---------------------------------------------------------------- total loss

TEST(TotalLoss, ReportBookkeeping) {
    const CvaeModel model(small_config(), 7);
    std::vector<ComplexRecord> batch = {prepare_complex(synth_complex(1, 6, 20)), prepare_complex(synth_complex(2, 5, 20))};
    Rng rng(1);
    const auto [total, r] = model.total_loss(batch, rng);
    EXPECT_NEAR(r.recompute_total(model.config()), r.total, 1e-9);
    EXPECT_DOUBLE_EQ(total.item(), r.total);
    EXPECT_GE(r.kl_scalar, 0.0);
    EXPECT_GE(r.kl_coord, 0.0);
    EXPECT_GT(r.local_distance, 0.0);
    EXPECT_GT(r.bond, 0.0);
    EXPECT_FALSE(r.first_non_finite().has_value());
    VaeLossReport zero;
    EXPECT_EQ(zero.recompute_total(model.config()), 0.0);
}

TEST(TotalLoss, NonFiniteComponentIsNamed) {
    VaeLossReport r;
    r.kl_coord = std::nan("");
    EXPECT_EQ(r.first_non_finite().value(), "kl_coord");
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
    CvaeConfig cfg = small_config();
    cfg.hidden_size = 8;
    cfg.edge_size = 4;
    cfg.n_rbf = 4;
    CvaeModel model(cfg, 8);
    // 2-block binders
    std::vector<ComplexRecord> batch = {prepare_complex(synth_complex(31, 2, 5)), prepare_complex(synth_complex(32, 2, 5))};
    const auto loss = [&] {
        Rng rng(99);
        return model.total_loss(batch, rng).first;
    };
    const auto r = check::grad_check(model.params(), loss, 1e-4, "", 1e-6, 3);
    EXPECT_LE(r.max_rel_error, 1e-3) << r.worst;
}

TEST(Config, JsonRoundTrip) {
    CvaeConfig c = small_config();
    c.tau = 0.2;
    nlohmann::json j = c;
    const CvaeConfig back = j.get<CvaeConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
    c.hidden_size = 15;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}
