#pragma once

// Evaluation: geometric interaction detection, site-match and type-overlap
// scores, alignment-based sequence recovery, site-aligned C-alpha RMSD and
// cluster diversity.

#include "radiance/geometry.hpp"
#include "radiance/molgraph.hpp"
#include "radiance/vocab.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

namespace radiance::metrics {

enum class InteractionType { hydrogen_bond, hydrophobic, salt_bridge };

inline std::string to_string(InteractionType t) {
    switch (t) {
        case InteractionType::hydrogen_bond: return "hydrogen_bond";
        case InteractionType::hydrophobic: return "hydrophobic";
        case InteractionType::salt_bridge: return "salt_bridge";
    }
    return "?";
}

inline InteractionType interaction_from_string(const std::string& s) {
    if (s == "hydrogen_bond") return InteractionType::hydrogen_bond;
    if (s == "hydrophobic") return InteractionType::hydrophobic;
    if (s == "salt_bridge") return InteractionType::salt_bridge;
    throw std::invalid_argument("unknown interaction type: " + s);
}

struct ResidueId {
    std::string chain;
    int index = 0;

    auto tie() const { return std::tie(chain, index); }
    bool operator==(const ResidueId& o) const { return tie() == o.tie(); }
    bool operator<(const ResidueId& o) const { return tie() < o.tie(); }
};

struct InteractionRecord {
    InteractionType itype = InteractionType::hydrogen_bond;
    ResidueId site_residue;
    ResidueId binder_residue;

    auto tie() const { return std::tie(itype, site_residue, binder_residue); }
    bool operator==(const InteractionRecord& o) const { return tie() == o.tie(); }
    bool operator<(const InteractionRecord& o) const { return tie() < o.tie(); }
};

/// A multiset of interactions; order carries no meaning.
struct InteractionSet {
    std::vector<InteractionRecord> records;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
};

inline nlohmann::json to_json(const InteractionSet& s) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : s.records) {
        out.push_back({{"type", to_string(r.itype)},
                       {"site", {r.site_residue.chain, r.site_residue.index}},
                       {"binder", {r.binder_residue.chain, r.binder_residue.index}}});
    }
    return out;
}

// ---------------------------------------------------------------- detection

namespace detect_detail {

// N/O hydrogen-bond donors and acceptors. Backbone N donates (except proline),
// backbone O accepts; side-chain hydroxyls and histidine nitrogens do both.
inline bool is_donor(int type, std::string_view atom) {
    if (atom == "N") return vocab::type(type).three != "PRO";
    static const std::map<std::string_view, std::vector<std::string_view>> side = {
        {"ARG", {"NE", "NH1", "NH2"}}, {"ASN", {"ND2"}}, {"GLN", {"NE2"}}, {"HIS", {"ND1", "NE2"}}, {"LYS", {"NZ"}},
        {"SER", {"OG"}},               {"THR", {"OG1"}}, {"TRP", {"NE1"}}, {"TYR", {"OH"}},
    };
    auto it = side.find(vocab::type(type).three);
    return it != side.end() && std::find(it->second.begin(), it->second.end(), atom) != it->second.end();
}

inline bool is_acceptor(int type, std::string_view atom) {
    if (atom == "O" || atom == "OXT") return true;
    static const std::map<std::string_view, std::vector<std::string_view>> side = {
        {"ASN", {"OD1"}}, {"ASP", {"OD1", "OD2"}}, {"GLN", {"OE1"}}, {"GLU", {"OE1", "OE2"}},
        {"HIS", {"ND1", "NE2"}}, {"SER", {"OG"}}, {"THR", {"OG1"}}, {"TYR", {"OH"}},
    };
    auto it = side.find(vocab::type(type).three);
    return it != side.end() && std::find(it->second.begin(), it->second.end(), atom) != it->second.end();
}

inline bool is_hydrophobic_residue(int type) {
    static const std::string_view set = "AVLIMFWPY";
    return type >= 0 && type < vocab::kNumStandard && set.find(vocab::type(type).one) != std::string_view::npos;
}

// side-chain carbons only; CA and the carbonyl C carry polar neighbours
inline bool is_hydrophobic_carbon(std::string_view atom) { return !atom.empty() && atom.front() == 'C' && atom != "C" && atom != "CA"; }

inline bool is_positive(int type, std::string_view atom) {
    const auto three = vocab::type(type).three;
    if (three == "LYS") return atom == "NZ";
    if (three == "ARG") return atom == "NE" || atom == "NH1" || atom == "NH2";
    if (three == "HIS") return atom == "ND1" || atom == "NE2";
    return false;
}

inline bool is_negative(int type, std::string_view atom) {
    const auto three = vocab::type(type).three;
    if (three == "ASP") return atom == "OD1" || atom == "OD2";
    if (three == "GLU") return atom == "OE1" || atom == "OE2";
    return false;
}

}  // namespace detect_detail

inline constexpr double kHydrogenBondCutoff = 3.5;
inline constexpr double kHydrophobicCutoff = 4.0;
inline constexpr double kSaltBridgeCutoff = 4.0;

/// Residue-pair interactions between binder and site, one record per
/// (type, site residue, binder residue), sorted.
inline InteractionSet detect_interactions(const MolecularGraph& binder, const MolecularGraph& site) {
    using namespace detect_detail;
    std::set<InteractionRecord> found;
    for (const auto& sb : site.blocks) {
        if (sb.block_type < 0 || sb.block_type >= vocab::kNumStandard) continue;
        for (const auto& bb : binder.blocks) {
            if (bb.block_type < 0 || bb.block_type >= vocab::kNumStandard) continue;
            const ResidueId sid{sb.chain_id, sb.residue_index};
            const ResidueId bid{bb.chain_id, bb.residue_index};
            const bool hydrophobic_pair = is_hydrophobic_residue(sb.block_type) && is_hydrophobic_residue(bb.block_type);
            for (const auto& sa : sb.atoms) {
                for (const auto& ba : bb.atoms) {
                    const double d = (sa.coord - ba.coord).norm();
                    if (d > std::max({kHydrogenBondCutoff, kHydrophobicCutoff, kSaltBridgeCutoff})) continue;
                    if (d <= kHydrogenBondCutoff && ((is_donor(sb.block_type, sa.name) && is_acceptor(bb.block_type, ba.name)) ||
                                                     (is_acceptor(sb.block_type, sa.name) && is_donor(bb.block_type, ba.name)))) {
                        found.insert({InteractionType::hydrogen_bond, sid, bid});
                    }
                    if (hydrophobic_pair && d <= kHydrophobicCutoff && is_hydrophobic_carbon(sa.name) && is_hydrophobic_carbon(ba.name)) {
                        found.insert({InteractionType::hydrophobic, sid, bid});
                    }
                    if (d <= kSaltBridgeCutoff && ((is_positive(sb.block_type, sa.name) && is_negative(bb.block_type, ba.name)) ||
                                                   (is_negative(sb.block_type, sa.name) && is_positive(bb.block_type, ba.name)))) {
                        found.insert({InteractionType::salt_bridge, sid, bid});
                    }
                }
            }
        }
    }
    return {std::vector<InteractionRecord>(found.begin(), found.end())};
}

// ---------------------------------------------------------------- ISM / ITO

/// Fraction of reference records matched in type and both residues (multiset
/// matching); NaN for an empty reference.
inline double ism(const InteractionSet& pred, const InteractionSet& ref) {
    if (ref.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::map<InteractionRecord, int> available;
    for (const auto& r : pred.records) ++available[r];
    std::size_t matched = 0;
    for (const auto& r : ref.records) {
        auto it = available.find(r);
        if (it != available.end() && it->second > 0) {
            --it->second;
            ++matched;
        }
    }
    return static_cast<double>(matched) / static_cast<double>(ref.size());
}

inline std::map<InteractionType, int> type_counts(const InteractionSet& s) {
    std::map<InteractionType, int> c;
    for (const auto& r : s.records) ++c[r.itype];
    return c;
}

/// Sum over types of min(ref count, pred count), over the reference total;
/// NaN for an empty reference.
inline double ito(const InteractionSet& pred, const InteractionSet& ref) {
    if (ref.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto cp = type_counts(pred);
    const auto cr = type_counts(ref);
    int overlap = 0;
    for (const auto& [t, n] : cr) {
        auto it = cp.find(t);
        if (it != cp.end()) overlap += std::min(n, it->second);
    }
    return static_cast<double>(overlap) / static_cast<double>(ref.size());
}

// ---------------------------------------------------------------- sequence

/// BLOSUM62 in the vocabulary order ARNDCQEGHILKMFPSTWYV.
inline int blosum62(int a, int b) {
    static const std::array<std::array<int, 20>, 20> m = {{
        {4, -1, -2, -2, 0, -1, -1, 0, -2, -1, -1, -1, -1, -2, -1, 1, 0, -3, -2, 0},
        {-1, 5, 0, -2, -3, 1, 0, -2, 0, -3, -2, 2, -1, -3, -2, -1, -1, -3, -2, -3},
        {-2, 0, 6, 1, -3, 0, 0, 0, 1, -3, -3, 0, -2, -3, -2, 1, 0, -4, -2, -3},
        {-2, -2, 1, 6, -3, 0, 2, -1, -1, -3, -4, -1, -3, -3, -1, 0, -1, -4, -3, -3},
        {0, -3, -3, -3, 9, -3, -4, -3, -3, -1, -1, -3, -1, -2, -3, -1, -1, -2, -2, -1},
        {-1, 1, 0, 0, -3, 5, 2, -2, 0, -3, -2, 1, 0, -3, -1, 0, -1, -2, -1, -2},
        {-1, 0, 0, 2, -4, 2, 5, -2, 0, -3, -3, 1, -2, -3, -1, 0, -1, -3, -2, -2},
        {0, -2, 0, -1, -3, -2, -2, 6, -2, -4, -4, -2, -3, -3, -2, 0, -2, -2, -3, -3},
        {-2, 0, 1, -1, -3, 0, 0, -2, 8, -3, -3, -1, -2, -1, -2, -1, -2, -2, 2, -3},
        {-1, -3, -3, -3, -1, -3, -3, -4, -3, 4, 2, -3, 1, 0, -3, -2, -1, -3, -1, 3},
        {-1, -2, -3, -4, -1, -2, -3, -4, -3, 2, 4, -2, 2, 0, -3, -2, -1, -2, -1, 1},
        {-1, 2, 0, -1, -3, 1, 1, -2, -1, -3, -2, 5, -1, -3, -1, 0, -1, -3, -2, -2},
        {-1, -1, -2, -3, -1, 0, -2, -3, -2, 1, 2, -1, 5, 0, -2, -1, -1, -1, -1, 1},
        {-2, -3, -3, -3, -2, -3, -3, -3, -1, 0, 0, -3, 0, 6, -4, -2, -2, 1, 3, -1},
        {-1, -2, -2, -1, -3, -1, -1, -2, -2, -3, -3, -1, -2, -4, 7, -1, -1, -4, -3, -2},
        {1, -1, 1, 0, -1, 0, 0, 0, -1, -2, -2, 0, -1, -2, -1, 4, 1, -3, -2, -2},
        {0, -1, 0, -1, -1, -1, -1, -2, -2, -1, -1, -1, -1, -2, -1, 1, 5, -2, -2, 0},
        {-3, -3, -4, -4, -2, -2, -3, -2, -2, -3, -2, -3, -1, 1, -4, -3, -2, 11, 2, -3},
        {-2, -2, -2, -3, -2, -1, -2, -3, 2, -1, -1, -2, -1, 3, -3, -2, -2, 2, 7, -1},
        {0, -3, -3, -3, -1, -2, -2, -3, -3, 3, 1, -2, 1, -1, -2, -2, 0, -3, -1, 4},
    }};
    return m.at(static_cast<std::size_t>(a)).at(static_cast<std::size_t>(b));
}

inline std::vector<int> encode_sequence(const std::string& seq) {
    std::vector<int> out;
    out.reserve(seq.size());
    for (char c : seq) {
        const int t = vocab::from_one(c);
        if (t < 0) throw std::invalid_argument(std::string("not an amino acid symbol: '") + c + "'");
        out.push_back(t);
    }
    return out;
}

struct Alignment {
    int score = 0;
    int matches = 0;  // aligned pairs with identical residues
    std::string a, b; // gapped rows
};

inline constexpr int kGapOpen = -10;
inline constexpr int kGapExtend = -1;

/// Global alignment with affine gaps: a gap of length L scores
/// open + (L - 1) * extend, end gaps included. Traceback prefers
/// substitutions, then gaps in `b`, then gaps in `a`.
inline Alignment align_global(const std::string& sa, const std::string& sb, int open = kGapOpen, int extend = kGapExtend) {
    const auto a = encode_sequence(sa);
    const auto b = encode_sequence(sb);
    const std::size_t n = a.size(), m = b.size();
    constexpr int kNeg = std::numeric_limits<int>::min() / 4;
    // M: a_i ~ b_j, X: a_i ~ gap, Y: gap ~ b_j
    std::vector<std::vector<int>> M(n + 1, std::vector<int>(m + 1, kNeg)), X = M, Y = M;
    M[0][0] = 0;
    for (std::size_t i = 1; i <= n; ++i) X[i][0] = open + static_cast<int>(i - 1) * extend;
    for (std::size_t j = 1; j <= m; ++j) Y[0][j] = open + static_cast<int>(j - 1) * extend;
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            M[i][j] = std::max({M[i - 1][j - 1], X[i - 1][j - 1], Y[i - 1][j - 1]}) + blosum62(a[i - 1], b[j - 1]);
            X[i][j] = std::max({M[i - 1][j] + open, X[i - 1][j] + extend, Y[i - 1][j] + open});
            Y[i][j] = std::max({M[i][j - 1] + open, X[i][j - 1] + open, Y[i][j - 1] + extend});
        }
    }
    Alignment out;
    int state = 0;
    out.score = M[n][m];
    if (X[n][m] > out.score) out.score = X[n][m], state = 1;
    if (Y[n][m] > out.score) out.score = Y[n][m], state = 2;
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (state == 0) {
            const int prev = M[i][j] - blosum62(a[i - 1], b[j - 1]);
            out.matches += a[i - 1] == b[j - 1];
            out.a.push_back(sa[i - 1]);
            out.b.push_back(sb[j - 1]);
            --i, --j;
            state = M[i][j] == prev ? 0 : X[i][j] == prev ? 1 : 2;
        } else if (state == 1) {
            const int cur = X[i][j];
            out.a.push_back(sa[i - 1]);
            out.b.push_back('-');
            --i;
            if (i == 0 && j == 0) break;
            state = M[i][j] + open == cur ? 0 : X[i][j] + extend == cur ? 1 : 2;
        } else {
            const int cur = Y[i][j];
            out.a.push_back('-');
            out.b.push_back(sb[j - 1]);
            --j;
            if (i == 0 && j == 0) break;
            state = M[i][j] + open == cur ? 0 : X[i][j] + open == cur ? 1 : 2;
        }
    }
    std::reverse(out.a.begin(), out.a.end());
    std::reverse(out.b.begin(), out.b.end());
    return out;
}

/// Amino-acid recovery in percent: identical aligned positions over the
/// generated length. Equal lengths compare position by position.
inline double aar(const std::string& gen, const std::string& ref) {
    if (gen.empty() || ref.empty()) throw std::invalid_argument("aar: empty sequence");
    encode_sequence(gen);
    encode_sequence(ref);
    int matches = 0;
    if (gen.size() == ref.size()) {
        for (std::size_t i = 0; i < gen.size(); ++i) matches += gen[i] == ref[i];
    } else {
        matches = align_global(gen, ref).matches;
    }
    return 100.0 * matches / static_cast<double>(gen.size());
}

/// Symmetric identity used for clustering: aligned identical positions over
/// the longer length.
inline double sequence_identity(const std::string& a, const std::string& b) {
    if (a.empty() || b.empty()) return 0.0;
    int matches = 0;
    if (a.size() == b.size()) {
        for (std::size_t i = 0; i < a.size(); ++i) matches += a[i] == b[i];
    } else {
        matches = align_global(a, b).matches;
    }
    return static_cast<double>(matches) / static_cast<double>(std::max(a.size(), b.size()));
}

// ---------------------------------------------------------------- structure

/// Superimposes site_gen onto site_ref, carries gen along and reports the
/// binder C-alpha RMSD in order.
inline double rmsd_ca(const MolecularGraph& gen, const MolecularGraph& ref, const MolecularGraph& site_gen, const MolecularGraph& site_ref) {
    if (gen.blocks.size() != ref.blocks.size()) {
        throw std::invalid_argument("rmsd_ca: binder lengths differ (" + std::to_string(gen.blocks.size()) + " vs " +
                                    std::to_string(ref.blocks.size()) + ")");
    }
    if (site_gen.blocks.size() != site_ref.blocks.size()) throw std::invalid_argument("rmsd_ca: site lengths differ");
    if (gen.blocks.empty()) throw std::invalid_argument("rmsd_ca: empty binder");
    const RigidTransform g = kabsch(site_gen.ca_coords(), site_ref.ca_coords());
    return rmsd_rows(g.apply_rows(gen.ca_coords()), ref.ca_coords());
}

/// RMSD after optimal superposition of two equally long C-alpha traces.
inline double superposed_rmsd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return rmsd_rows(kabsch(a, b).apply_rows(a), b);
}

// ---------------------------------------------------------------- diversity

enum class DiversityCriterion { sequence, structure };

struct DesignSample {
    std::string sequence;
    Eigen::MatrixXd ca;  // binder C-alpha trace (n x 3), may be empty for sequence-only use
};

inline constexpr double kClusterIdentity = 0.40;
inline constexpr double kClusterRmsd = 2.0;

/// Single-linkage cluster count over samples. Sequence variant links pairs
/// with identity above 40 %, structure variant pairs of equal length with
/// superposed C-alpha RMSD below 2 Å.
inline std::size_t cluster_count(const std::vector<DesignSample>& samples, DiversityCriterion criterion) {
    const std::size_t n = samples.size();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    auto linked = [&](const DesignSample& a, const DesignSample& b) {
        if (criterion == DiversityCriterion::sequence) return sequence_identity(a.sequence, b.sequence) > kClusterIdentity;
        if (a.ca.rows() != b.ca.rows() || a.ca.rows() == 0) return false;
        return superposed_rmsd(a.ca, b.ca) < kClusterRmsd;
    };
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            const std::size_t ri = find(i), rj = find(j);
            if (ri != rj && linked(samples[i], samples[j])) parent[ri] = rj;
        }
    }
    std::size_t clusters = 0;
    for (std::size_t i = 0; i < n; ++i) clusters += find(i) == i;
    return clusters;
}

/// Clusters over generations, in [1/N, 1].
inline double diversity(const std::vector<DesignSample>& samples, DiversityCriterion criterion = DiversityCriterion::sequence) {
    if (samples.empty()) throw std::invalid_argument("diversity: no samples");
    return static_cast<double>(cluster_count(samples, criterion)) / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------- aggregation

struct Aggregate {
    double mean = std::numeric_limits<double>::quiet_NaN();
    std::size_t count = 0;     // values averaged
    std::size_t excluded = 0;  // NaN values skipped
};

inline Aggregate aggregate(const std::vector<double>& values) {
    Aggregate a;
    double sum = 0.0;
    for (double v : values) {
        if (std::isnan(v)) {
            ++a.excluded;
        } else {
            sum += v;
            ++a.count;
        }
    }
    if (a.count > 0) a.mean = sum / static_cast<double>(a.count);
    return a;
}

inline nlohmann::json to_json(const Aggregate& a) {
    return {{"mean", a.count > 0 ? nlohmann::json(a.mean) : nlohmann::json(nullptr)}, {"count", a.count}, {"nan_excluded", a.excluded}};
}

}  // namespace radiance::metrics
