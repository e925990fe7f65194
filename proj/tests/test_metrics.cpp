#include "radiance/metrics.hpp"
#include "radiance/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace radiance;
using namespace radiance::metrics;

namespace {

Block residue(const std::string& three, const std::string& chain, int index, std::vector<Atom> atoms) {
    Block b;
    b.block_type = vocab::from_three(three);
    b.chain_id = chain;
    b.residue_index = index;
    b.atoms = std::move(atoms);
    return b;
}

Atom atom(const std::string& name, double x, double y = 0.0, double z = 0.0) { return {std::string(1, name[0]), name, Vec3(x, y, z)}; }

InteractionRecord rec(InteractionType t, int site, int binder) { return {t, {"A", site}, {"B", binder}}; }

constexpr auto hb = InteractionType::hydrogen_bond;
constexpr auto hp = InteractionType::hydrophobic;
constexpr auto sb = InteractionType::salt_bridge;

}  // namespace

// ---------------------------------------------------------------- detection

TEST(DetectInteractions, DistantResiduesGiveNothing) {
    MolecularGraph site, binder;
    site.blocks.push_back(residue("LYS", "A", 1, {atom("NZ", 0)}));
    binder.blocks.push_back(residue("GLU", "B", 1, {atom("OE1", 20)}));
    EXPECT_TRUE(detect_interactions(binder, site).empty());
}

TEST(DetectInteractions, LysGluSaltBridgeAt38) {
    MolecularGraph site, binder;
    site.blocks.push_back(residue("LYS", "A", 5, {atom("NZ", 0)}));
    binder.blocks.push_back(residue("GLU", "B", 2, {atom("OE1", 3.8)}));
    const auto s = detect_interactions(binder, site);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s.records[0], (InteractionRecord{sb, {"A", 5}, {"B", 2}}));
    // beyond 4.0 the pair no longer counts
    binder.blocks[0].atoms[0].coord.x() = 4.1;
    EXPECT_TRUE(detect_interactions(binder, site).empty());
}

TEST(DetectInteractions, HydrogenBondNeedsDonorAndAcceptor) {
    MolecularGraph site, binder;
    site.blocks.push_back(residue("SER", "A", 1, {atom("OG", 0)}));
    binder.blocks.push_back(residue("ASN", "B", 1, {atom("OD1", 3.0)}));
    const auto s = detect_interactions(binder, site);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s.records[0].itype, hb);
    // two acceptors alone do not bond
    site.blocks[0] = residue("ASP", "A", 1, {atom("OD2", 0)});
    EXPECT_TRUE(detect_interactions(binder, site).empty());
}

TEST(DetectInteractions, HydrophobicOnlyBetweenHydrophobicResidues) {
    MolecularGraph site, binder;
    site.blocks.push_back(residue("LEU", "A", 1, {atom("CD1", 0)}));
    binder.blocks.push_back(residue("VAL", "B", 1, {atom("CG1", 3.9)}));
    ASSERT_EQ(detect_interactions(binder, site).size(), 1u);
    EXPECT_EQ(detect_interactions(binder, site).records[0].itype, hp);
    binder.blocks[0] = residue("SER", "B", 1, {atom("CB", 3.9)});
    EXPECT_TRUE(detect_interactions(binder, site).empty());
}

TEST(DetectInteractions, DuplicateContactsCollapse) {
    MolecularGraph site, binder;
    site.blocks.push_back(residue("ARG", "A", 1, {atom("NE", 0), atom("NH1", 0.5), atom("NH2", 1.0)}));
    binder.blocks.push_back(residue("ASP", "B", 1, {atom("OD1", 3.8), atom("OD2", 3.9, 0.5)}));
    const auto s = detect_interactions(binder, site);
    // several N-O pairs under 3.5 and 4.0: one hydrogen bond and one salt bridge
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s.records[0].itype, hb);
    EXPECT_EQ(s.records[1].itype, sb);
}

// ---------------------------------------------------------------- ISM / ITO

TEST(Ism, Examples) {
    const InteractionSet ref{{rec(hb, 10, 3), rec(hp, 12, 5)}};
    EXPECT_DOUBLE_EQ(ism({{rec(hb, 10, 3)}}, ref), 0.5);
    const InteractionSet four{{rec(hb, 1, 1), rec(hp, 2, 2), rec(sb, 3, 3), rec(hb, 4, 4)}};
    EXPECT_DOUBLE_EQ(ism(four, four), 1.0);
    EXPECT_TRUE(std::isnan(ism(four, {})));
}

TEST(Ism, StrictMatchRequiresAllThreeFields) {
    const InteractionSet ref{{rec(hb, 10, 3)}};
    EXPECT_DOUBLE_EQ(ism({{rec(hp, 10, 3)}}, ref), 0.0);
    EXPECT_DOUBLE_EQ(ism({{rec(hb, 11, 3)}}, ref), 0.0);
    EXPECT_DOUBLE_EQ(ism({{rec(hb, 10, 4)}}, ref), 0.0);
    EXPECT_DOUBLE_EQ(ism({{{hb, {"C", 10}, {"B", 3}}}}, ref), 0.0);
}

TEST(Ism, PermutationInvariant) {
    InteractionSet ref{{rec(hb, 1, 1), rec(hp, 2, 2), rec(sb, 3, 3)}};
    InteractionSet pred{{rec(sb, 3, 3), rec(hb, 1, 1)}};
    const double a = ism(pred, ref);
    std::reverse(ref.records.begin(), ref.records.end());
    std::reverse(pred.records.begin(), pred.records.end());
    EXPECT_DOUBLE_EQ(ism(pred, ref), a);
}

TEST(Ito, Examples) {
    const InteractionSet ref{{rec(hb, 1, 1), rec(hb, 2, 2), rec(hp, 3, 3)}};
    const InteractionSet pred{{rec(hb, 7, 7), rec(hp, 8, 8), rec(hp, 9, 9)}};
    EXPECT_DOUBLE_EQ(ito(pred, ref), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(ito(ref, ref), 1.0);
    const InteractionSet hb3{{rec(hb, 1, 1), rec(hb, 2, 2), rec(hb, 3, 3)}};
    InteractionSet sb5;
    for (int i = 0; i < 5; ++i) sb5.records.push_back(rec(sb, i, i));
    EXPECT_DOUBLE_EQ(ito(sb5, hb3), 0.0);
    EXPECT_TRUE(std::isnan(ito(sb5, {})));
}

TEST(Ito, MatchesBruteForceOnRandomMultisets) {
    // oracle: expand each multiset into per-type lists and pair them off one by one
    Rng rng(42);
    for (int trial = 0; trial < 100; ++trial) {
        InteractionSet a, b;
        const auto na = rng.uniform_int(0, 12), nb = rng.uniform_int(1, 12);
        for (int i = 0; i < na; ++i) a.records.push_back(rec(static_cast<InteractionType>(rng.uniform_int(0, 2)), static_cast<int>(rng.uniform_int(0, 5)), 0));
        for (int i = 0; i < nb; ++i) b.records.push_back(rec(static_cast<InteractionType>(rng.uniform_int(0, 2)), static_cast<int>(rng.uniform_int(0, 5)), 0));
        int paired = 0;
        std::vector<bool> used(a.records.size(), false);
        for (const auto& r : b.records) {
            for (std::size_t k = 0; k < a.records.size(); ++k) {
                if (!used[k] && a.records[k].itype == r.itype) {
                    used[k] = true;
                    ++paired;
                    break;
                }
            }
        }
        const double expected = static_cast<double>(paired) / static_cast<double>(b.size());
        EXPECT_DOUBLE_EQ(ito(a, b), expected);
        const double v = ito(a, b);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        auto shuffled = a;
        std::reverse(shuffled.records.begin(), shuffled.records.end());
        EXPECT_DOUBLE_EQ(ito(shuffled, b), v);
    }
}

// ---------------------------------------------------------------- AAR

namespace {

// Every global alignment of a and b with its affine score and identity count.
void enumerate_alignments(const std::string& a, const std::string& b, std::vector<std::pair<int, int>>& out) {
    std::function<void(std::size_t, std::size_t, int, int, int)> go = [&](std::size_t i, std::size_t j, int last, int score, int matches) {
        if (i == a.size() && j == b.size()) {
            out.emplace_back(score, matches);
            return;
        }
        if (i < a.size() && j < b.size()) {
            go(i + 1, j + 1, 0, score + blosum62(vocab::from_one(a[i]), vocab::from_one(b[j])), matches + (a[i] == b[j]));
        }
        if (i < a.size()) go(i + 1, j, 1, score + (last == 1 ? -1 : -10), matches);
        if (j < b.size()) go(i, j + 1, 2, score + (last == 2 ? -1 : -10), matches);
    };
    go(0, 0, 0, 0, 0);
}

}  // namespace

TEST(Aar, Examples) {
    EXPECT_DOUBLE_EQ(aar("ACDEFGHIK", "ACDEFGHIK"), 100.0);
    EXPECT_DOUBLE_EQ(aar("AAAA", "AAAG"), 75.0);
    EXPECT_DOUBLE_EQ(aar("ACDEF", "ACEF"), 80.0);
}

TEST(Aar, AlignmentAgreesWithExhaustiveSearch) {
    const std::vector<std::pair<std::string, std::string>> pairs = {
        {"ACDEF", "ACEF"}, {"WYKLM", "WKM"}, {"GGGA", "AGG"}, {"MKV", "MKVLT"}, {"PQRS", "SRQP"}, {"HC", "CHHC"}};
    for (const auto& [a, b] : pairs) {
        std::vector<std::pair<int, int>> all;
        enumerate_alignments(a, b, all);
        int best = std::numeric_limits<int>::min();
        for (const auto& [s, _] : all) best = std::max(best, s);
        std::set<int> optimal_matches;
        for (const auto& [s, m] : all) {
            if (s == best) optimal_matches.insert(m);
        }
        const auto al = align_global(a, b);
        EXPECT_EQ(al.score, best) << a << " / " << b;
        EXPECT_TRUE(optimal_matches.count(al.matches)) << a << " / " << b;
        std::string ua = al.a, ub = al.b;
        ua.erase(std::remove(ua.begin(), ua.end(), '-'), ua.end());
        ub.erase(std::remove(ub.begin(), ub.end(), '-'), ub.end());
        EXPECT_EQ(ua, a);
        EXPECT_EQ(ub, b);
    }
    std::vector<std::pair<int, int>> all;
    enumerate_alignments("ACDEF", "ACEF", all);
    int best = std::numeric_limits<int>::min(), matches = -1;
    for (const auto& [s, m] : all) {
        if (s > best) best = s, matches = m;
    }
    EXPECT_EQ(matches, 4);
}

TEST(Aar, NotSymmetricForUnequalLengths) {
    EXPECT_DOUBLE_EQ(aar("ACEF", "ACDEF"), 100.0);
    EXPECT_DOUBLE_EQ(aar("ACDEF", "ACEF"), 80.0);
}

TEST(Aar, RejectsNonAminoAcids) {
    EXPECT_THROW(aar("AC1", "ACD"), std::invalid_argument);
    EXPECT_THROW(aar("ACD", "AXD"), std::invalid_argument);
    EXPECT_THROW(aar("", "A"), std::invalid_argument);
}

TEST(Blosum62, Symmetric) {
    for (int i = 0; i < 20; ++i) {
        for (int j = 0; j < 20; ++j) EXPECT_EQ(blosum62(i, j), blosum62(j, i));
    }
    EXPECT_EQ(blosum62(vocab::from_one('W'), vocab::from_one('W')), 11);
}

// ---------------------------------------------------------------- RMSD

namespace {

MolecularGraph ca_chain(const std::vector<Vec3>& pts, const std::string& chain) {
    MolecularGraph g;
    for (std::size_t i = 0; i < pts.size(); ++i) g.blocks.push_back(residue("ALA", chain, static_cast<int>(i), {{"C", "CA", pts[i]}}));
    return g;
}

}  // namespace

TEST(RmsdCa, Examples) {
    const auto site = ca_chain({{0, 0, 0}, {3.8, 0, 0}, {3.8, 3.8, 0}, {0, 3.8, 1}}, "A");
    const auto ref = ca_chain({{1, 1, 5}, {4, 1, 6}}, "B");
    EXPECT_NEAR(rmsd_ca(ref, ref, site, site), 0.0, 1e-12);
    auto gen = ref;
    gen.transform(RigidTransform::translation_only(Vec3(1, 0, 0)));
    EXPECT_NEAR(rmsd_ca(gen, ref, site, site), 1.0, 1e-12);
}

TEST(RmsdCa, JointRigidInvariance) {
    Rng rng(3);
    const auto site = ca_chain({{0, 0, 0}, {3.8, 0, 0}, {3.8, 3.8, 0}, {0, 3.8, 1}, {2, 2, 3}}, "A");
    const auto ref = ca_chain({{1, 1, 5}, {4, 1, 6}, {6, 3, 6}}, "B");
    auto gen = ca_chain({{1.5, 1, 5}, {4, 0.2, 6}, {6, 3, 7}}, "B");
    const double base = rmsd_ca(gen, ref, site, site);
    for (int k = 0; k < 20; ++k) {
        const auto g = random_rigid(rng);
        auto gen2 = gen, site2 = site;
        gen2.transform(g);
        site2.transform(g);
        EXPECT_NEAR(rmsd_ca(gen2, ref, site2, site), base, 1e-9);
    }
}

TEST(RmsdCa, LengthMismatchThrows) {
    const auto site = ca_chain({{0, 0, 0}, {3.8, 0, 0}, {0, 3.8, 0}}, "A");
    EXPECT_THROW(rmsd_ca(ca_chain({{0, 0, 1}}, "B"), ca_chain({{0, 0, 1}, {1, 0, 1}}, "B"), site, site), std::invalid_argument);
}

// ---------------------------------------------------------------- diversity

TEST(Diversity, Extremes) {
    std::vector<DesignSample> same(7, DesignSample{"ACDEFGHIK", {}});
    EXPECT_DOUBLE_EQ(diversity(same), 1.0 / 7.0);
    const std::vector<DesignSample> distinct = {{"AAAAAA", {}}, {"CCCCCC", {}}, {"DDDDDD", {}}, {"EEEEEE", {}}};
    EXPECT_DOUBLE_EQ(diversity(distinct), 1.0);
    EXPECT_THROW(diversity({}), std::invalid_argument);
}

TEST(Diversity, HundredSamplesInSixFamilies) {
    Rng rng(7);
    const std::string alphabet = "ACDEFGHIKLMNPQRSTVWY";
    std::vector<std::string> bases;
    while (bases.size() < 6) {
        std::string s;
        for (int i = 0; i < 12; ++i) s.push_back(alphabet[static_cast<std::size_t>(rng.uniform_int(0, 19))]);
        bool far = true;
        for (const auto& b : bases) far = far && sequence_identity(s, b) <= 0.2;
        if (far) bases.push_back(s);
    }
    std::vector<DesignSample> samples;
    for (int k = 0; k < 100; ++k) {
        std::string s = bases[static_cast<std::size_t>(k % 6)];
        // two point mutations keep identity at or above 10/12 within a family
        for (int m = 0; m < 2; ++m) s[static_cast<std::size_t>(rng.uniform_int(0, 11))] = alphabet[static_cast<std::size_t>(rng.uniform_int(0, 19))];
        samples.push_back({s, {}});
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            const bool same_family = i % 6 == j % 6;
            ASSERT_EQ(sequence_identity(samples[i].sequence, samples[j].sequence) > kClusterIdentity, same_family) << i << "," << j;
        }
    }
    EXPECT_EQ(cluster_count(samples, DiversityCriterion::sequence), 6u);
    EXPECT_DOUBLE_EQ(diversity(samples), 0.06);
    EXPECT_NEAR(diversity(samples), 0.0593, 0.01);
}

TEST(Diversity, StructureVariant) {
    Rng rng(9);
    const Eigen::MatrixXd trace = rng.normal_matrix(6, 3) * 5.0;
    std::vector<DesignSample> samples;
    for (int i = 0; i < 4; ++i) samples.push_back({"AAAAAA", random_rigid(rng).apply_rows(trace + 0.1 * rng.normal_matrix(6, 3))});
    samples.push_back({"AAAAAA", rng.normal_matrix(6, 3) * 5.0});
    EXPECT_EQ(cluster_count(samples, DiversityCriterion::structure), 2u);
    EXPECT_EQ(cluster_count(samples, DiversityCriterion::sequence), 1u);
}

TEST(Aggregate, SkipsNaN) {
    const auto a = aggregate({1.0, std::nan(""), 0.5, std::nan("")});
    EXPECT_DOUBLE_EQ(a.mean, 0.75);
    EXPECT_EQ(a.count, 2u);
    EXPECT_EQ(a.excluded, 2u);
    EXPECT_TRUE(std::isnan(aggregate({std::nan("")}).mean));
}
