#pragma once

// Molecular data model: atoms grouped into residue blocks, block graphs with
// kNN connectivity, PDB ingestion/export, binding-site extraction and a
// deterministic generator of toy complexes.

#include "radiance/geometry.hpp"
#include "radiance/rng.hpp"
#include "radiance/vocab.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace radiance {

class MissingChainError : public std::runtime_error {
public:
    explicit MissingChainError(const std::string& chain)
        : std::runtime_error("chain '" + chain + "' not found in structure"), chain_(chain) {}
    const std::string& chain() const { return chain_; }

private:
    std::string chain_;
};

class PdbParseError : public std::runtime_error {
public:
    PdbParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct Atom {
    std::string element;
    std::string name;
    Vec3 coord = Vec3::Zero();

    bool operator==(const Atom& o) const { return element == o.element && name == o.name && coord == o.coord; }
};

struct Block {
    int block_type = vocab::kUnk;
    std::vector<Atom> atoms;
    std::string chain_id;
    int residue_index = 0;
    std::string insertion_code;
    std::vector<std::pair<int, int>> intra_bonds;

    const Atom* find_atom(std::string_view name) const {
        for (const auto& a : atoms) {
            if (a.name == name) return &a;
        }
        return nullptr;
    }

    /// Unweighted mean of heavy-atom coordinates.
    Vec3 center() const {
        Vec3 c = Vec3::Zero();
        for (const auto& a : atoms) c += a.coord;
        return atoms.empty() ? c : Vec3(c / static_cast<double>(atoms.size()));
    }

    /// Cβ, falling back to Cα (glycine or unresolved Cβ), then to the centre.
    Vec3 cb_proxy() const {
        if (const Atom* cb = find_atom("CB")) return cb->coord;
        if (const Atom* ca = find_atom("CA")) return ca->coord;
        return center();
    }

    Vec3 ca_or_center() const {
        if (const Atom* ca = find_atom("CA")) return ca->coord;
        return center();
    }

    bool operator==(const Block& o) const {
        return block_type == o.block_type && atoms == o.atoms && chain_id == o.chain_id &&
               residue_index == o.residue_index && insertion_code == o.insertion_code && intra_bonds == o.intra_bonds;
    }
};

enum class GraphRole { binder, binding_site };

inline std::string to_string(GraphRole r) { return r == GraphRole::binder ? "binder" : "binding_site"; }

inline GraphRole role_from_string(const std::string& s) {
    if (s == "binder") return GraphRole::binder;
    if (s == "binding_site") return GraphRole::binding_site;
    throw std::invalid_argument("unknown graph role: " + s);
}

struct Edge {
    int src = 0;
    int dst = 0;
    int bond = 0;  // 0 = no covalent link, 1 = inter-residue covalent bond

    bool operator==(const Edge& o) const { return src == o.src && dst == o.dst && bond == o.bond; }
};

struct MolecularGraph {
    std::vector<Block> blocks;
    std::vector<Edge> edges;
    GraphRole role = GraphRole::binder;

    std::size_t size() const { return blocks.size(); }
    bool empty() const { return blocks.empty(); }

    Eigen::MatrixXd centers() const {
        Eigen::MatrixXd c(static_cast<Eigen::Index>(blocks.size()), 3);
        for (std::size_t i = 0; i < blocks.size(); ++i) c.row(static_cast<Eigen::Index>(i)) = blocks[i].center().transpose();
        return c;
    }

    Eigen::MatrixXd ca_coords() const {
        Eigen::MatrixXd c(static_cast<Eigen::Index>(blocks.size()), 3);
        for (std::size_t i = 0; i < blocks.size(); ++i) c.row(static_cast<Eigen::Index>(i)) = blocks[i].ca_or_center().transpose();
        return c;
    }

    std::vector<int> types() const {
        std::vector<int> t;
        t.reserve(blocks.size());
        for (const auto& b : blocks) t.push_back(b.block_type);
        return t;
    }

    std::string sequence() const { return vocab::sequence_of(types()); }

    void transform(const RigidTransform& g) {
        for (auto& b : blocks) {
            for (auto& a : b.atoms) a.coord = g.apply(a.coord);
        }
    }

    bool operator==(const MolecularGraph& o) const { return blocks == o.blocks && edges == o.edges && role == o.role; }
};

enum class DomainTag { peptide, antibody, protfrag, synthetic };

inline std::string to_string(DomainTag d) {
    switch (d) {
        case DomainTag::peptide: return "peptide";
        case DomainTag::antibody: return "antibody";
        case DomainTag::protfrag: return "protfrag";
        case DomainTag::synthetic: return "synthetic";
    }
    return "synthetic";
}

inline DomainTag domain_from_string(const std::string& s) {
    if (s == "peptide") return DomainTag::peptide;
    if (s == "antibody") return DomainTag::antibody;
    if (s == "protfrag") return DomainTag::protfrag;
    if (s == "synthetic") return DomainTag::synthetic;
    throw std::invalid_argument("unknown domain tag: " + s);
}

/// A binder with its target. After parse_pdb `site` holds the full target
/// chains; preparation replaces it with the extracted binding site.
struct ComplexRecord {
    std::string id;
    MolecularGraph binder;
    MolecularGraph site;
    DomainTag domain_tag = DomainTag::synthetic;
    std::string source;

    bool operator==(const ComplexRecord& o) const {
        return id == o.id && binder == o.binder && site == o.site && domain_tag == o.domain_tag && source == o.source;
    }
};

// ---------------------------------------------------------------------------
// Block construction helpers

inline constexpr double kBondCutoff = 1.9;

inline std::vector<std::pair<int, int>> detect_intra_bonds(const std::vector<Atom>& atoms) {
    std::vector<std::pair<int, int>> bonds;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
        for (std::size_t j = i + 1; j < atoms.size(); ++j) {
            if ((atoms[i].coord - atoms[j].coord).norm() <= kBondCutoff) {
                bonds.emplace_back(static_cast<int>(i), static_cast<int>(j));
            }
        }
    }
    return bonds;
}

/// Covalent link between two residues (backbone C-N peptide bond either way).
inline int inter_block_bond(const Block& a, const Block& b) {
    if (a.chain_id != b.chain_id) return 0;
    const Atom* ca = a.find_atom("C");
    const Atom* nb = b.find_atom("N");
    if (ca && nb && (ca->coord - nb->coord).norm() <= kBondCutoff) return 1;
    const Atom* na = a.find_atom("N");
    const Atom* cb = b.find_atom("C");
    if (na && cb && (na->coord - cb->coord).norm() <= kBondCutoff) return 1;
    return 0;
}

/// Symmetrized k-nearest-neighbour graph over block centres. Ties resolve to
/// the lower index. Existing edges are replaced.
inline MolecularGraph build_block_graph(MolecularGraph graph, int k_neighbors = 9) {
    if (graph.blocks.empty()) throw std::invalid_argument("build_block_graph: graph has no blocks");
    const auto n = static_cast<int>(graph.blocks.size());
    const Eigen::MatrixXd c = graph.centers();
    std::set<std::pair<int, int>> pairs;
    for (int i = 0; i < n; ++i) {
        std::vector<std::pair<double, int>> d;
        d.reserve(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            if (j != i) d.emplace_back((c.row(i) - c.row(j)).squaredNorm(), j);
        }
        std::sort(d.begin(), d.end());
        const int take = std::min<int>(k_neighbors, static_cast<int>(d.size()));
        for (int r = 0; r < take; ++r) {
            const int j = d[static_cast<std::size_t>(r)].second;
            pairs.emplace(i, j);
            pairs.emplace(j, i);
        }
    }
    graph.edges.clear();
    graph.edges.reserve(pairs.size());
    for (const auto& [i, j] : pairs) {
        graph.edges.push_back({i, j, inter_block_bond(graph.blocks[static_cast<std::size_t>(i)], graph.blocks[static_cast<std::size_t>(j)])});
    }
    return graph;
}

/// Target residues whose Cβ proxy lies within `cutoff` (inclusive) of any
/// binder Cβ proxy, in original order.
inline MolecularGraph extract_binding_site(const ComplexRecord& complex, double cutoff = 10.0) {
    std::vector<Vec3> binder_proxies;
    binder_proxies.reserve(complex.binder.blocks.size());
    for (const auto& b : complex.binder.blocks) binder_proxies.push_back(b.cb_proxy());
    MolecularGraph site;
    site.role = GraphRole::binding_site;
    for (const auto& blk : complex.site.blocks) {
        const Vec3 p = blk.cb_proxy();
        const bool hit = std::any_of(binder_proxies.begin(), binder_proxies.end(),
                                     [&](const Vec3& q) { return (p - q).norm() <= cutoff; });
        if (hit) site.blocks.push_back(blk);
    }
    if (site.blocks.empty()) throw std::runtime_error("no contact residues within cutoff");
    return site;
}

// ---------------------------------------------------------------------------
// PDB ingestion

namespace pdb_detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline std::string_view field(std::string_view line, std::size_t start, std::size_t len) {
    if (start >= line.size()) return {};
    return line.substr(start, std::min(len, line.size() - start));
}

inline double parse_double(std::string_view s, std::size_t line_no, const char* what) {
    const std::string t = trim(s);
    if (t.empty()) throw PdbParseError(line_no, std::string("missing ") + what);
    try {
        std::size_t used = 0;
        const double v = std::stod(t, &used);
        if (used != t.size() || !std::isfinite(v)) throw std::invalid_argument(t);
        return v;
    } catch (const std::exception&) {
        throw PdbParseError(line_no, std::string("bad ") + what + " '" + t + "'");
    }
}

struct RawAtom {
    std::string name;
    std::string element;
    char altloc = ' ';
    double occupancy = 1.0;
    Vec3 coord;
    std::size_t order = 0;
};

struct RawResidue {
    std::string resname;
    std::string chain;
    int resseq = 0;
    std::string icode;
    std::vector<RawAtom> atoms;
};

}  // namespace pdb_detail

inline std::vector<std::string> split_chains(const std::string& spec) {
    std::vector<std::string> out;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = pdb_detail::trim(tok);
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

/// Parses PDB text (first model only) into a complex with the given binder and
/// target chains. Residue names outside the standard vocabulary become UNK;
/// alternate locations keep the highest-occupancy (then first) conformer.
inline ComplexRecord parse_pdb_text(const std::string& text, const std::vector<std::string>& binder_chains,
                                    const std::vector<std::string>& target_chains, const std::string& source = "") {
    using namespace pdb_detail;
    std::map<std::string, std::vector<RawResidue>> chains;
    std::vector<std::string> chain_order;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::size_t atom_count = 0;
    std::size_t order = 0;
    bool seen_model = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string rec = trim(field(line, 0, 6));
        if (rec == "MODEL") {
            if (seen_model) break;
            seen_model = true;
            continue;
        }
        if (rec == "ENDMDL") break;
        if (rec != "ATOM" && rec != "HETATM") continue;
        if (line.size() < 54) throw PdbParseError(line_no, "truncated coordinate record");
        RawAtom a;
        a.name = trim(field(line, 12, 4));
        a.altloc = line.size() > 16 ? line[16] : ' ';
        const std::string resname = trim(field(line, 17, 3));
        const std::string chain = trim(field(line, 21, 1));
        const std::string resseq_s = trim(field(line, 22, 4));
        const std::string icode = trim(field(line, 26, 1));
        if (a.name.empty()) throw PdbParseError(line_no, "missing atom name");
        int resseq = 0;
        try {
            std::size_t used = 0;
            resseq = std::stoi(resseq_s, &used);
            if (used != resseq_s.size()) throw std::invalid_argument(resseq_s);
        } catch (const std::exception&) {
            throw PdbParseError(line_no, "bad residue number '" + resseq_s + "'");
        }
        a.coord = Vec3(parse_double(field(line, 30, 8), line_no, "x coordinate"),
                       parse_double(field(line, 38, 8), line_no, "y coordinate"),
                       parse_double(field(line, 46, 8), line_no, "z coordinate"));
        const std::string occ = trim(field(line, 54, 6));
        a.occupancy = occ.empty() ? 1.0 : parse_double(occ, line_no, "occupancy");
        a.element = trim(field(line, 76, 2));
        if (a.element.empty()) a.element = vocab::element_of(a.name);
        if (a.element == "H" || a.element == "D") continue;
        if (resname == "HOH" || resname == "WAT") continue;
        a.order = order++;
        ++atom_count;

        if (!chains.count(chain)) chain_order.push_back(chain);
        auto& residues = chains[chain];
        if (residues.empty() || residues.back().resseq != resseq || residues.back().icode != icode ||
            residues.back().resname != resname) {
            residues.push_back({resname, chain, resseq, icode, {}});
        }
        residues.back().atoms.push_back(std::move(a));
    }
    if (atom_count == 0) throw std::runtime_error("no atoms parsed");

    auto build_graph = [&](const std::vector<std::string>& wanted, GraphRole role) {
        MolecularGraph g;
        g.role = role;
        for (const auto& c : wanted) {
            auto it = chains.find(c);
            if (it == chains.end()) throw MissingChainError(c);
            std::vector<RawResidue> residues = it->second;
            std::stable_sort(residues.begin(), residues.end(), [](const RawResidue& x, const RawResidue& y) {
                return std::tie(x.resseq, x.icode) < std::tie(y.resseq, y.icode);
            });
            for (const auto& r : residues) {
                Block b;
                b.block_type = vocab::from_three(r.resname);
                b.chain_id = r.chain;
                b.residue_index = r.resseq;
                b.insertion_code = r.icode;
                const auto& tmpl = vocab::type(b.block_type).atoms;
                for (const auto& name : tmpl) {
                    const RawAtom* best = nullptr;
                    for (const auto& a : r.atoms) {
                        if (a.name != name) continue;
                        if (!best || a.occupancy > best->occupancy) best = &a;
                    }
                    if (best) b.atoms.push_back({best->element, best->name, best->coord});
                }
                if (b.atoms.empty() || !b.find_atom("CA")) continue;
                b.intra_bonds = detect_intra_bonds(b.atoms);
                g.blocks.push_back(std::move(b));
            }
        }
        return g;
    };

    ComplexRecord rec;
    rec.binder = build_graph(binder_chains, GraphRole::binder);
    rec.site = build_graph(target_chains, GraphRole::binding_site);
    if (rec.binder.empty()) throw std::runtime_error("binder chains contain no residues");
    if (rec.site.empty()) throw std::runtime_error("target chains contain no residues");
    rec.source = source;
    rec.domain_tag = DomainTag::protfrag;
    return rec;
}

inline ComplexRecord parse_pdb(const std::string& path, const std::vector<std::string>& binder_chains,
                               const std::vector<std::string>& target_chains) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open PDB file: " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    ComplexRecord rec = parse_pdb_text(buf.str(), binder_chains, target_chains, path);
    std::string stem = path;
    if (auto slash = stem.find_last_of('/'); slash != std::string::npos) stem = stem.substr(slash + 1);
    if (auto dot = stem.find_last_of('.'); dot != std::string::npos) stem = stem.substr(0, dot);
    rec.id = stem;
    return rec;
}

/// Writes blocks as ATOM records (3-decimal coordinates, occupancy 1.00).
inline void write_pdb_blocks(std::ostream& out, const MolecularGraph& g, int& serial) {
    char buf[96];
    for (const auto& b : g.blocks) {
        const auto three = vocab::type(b.block_type).three;
        for (const auto& a : b.atoms) {
            const std::string name = a.name.size() < 4 ? " " + a.name : a.name;
            std::snprintf(buf, sizeof(buf), "ATOM  %5d %-4s %3.3s %1.1s%4d%1.1s   %8.3f%8.3f%8.3f%6.2f%6.2f          %2s\n",
                          serial++ % 100000, name.c_str(), std::string(three).c_str(), b.chain_id.c_str(),
                          b.residue_index, b.insertion_code.c_str(), a.coord.x(), a.coord.y(), a.coord.z(), 1.0, 0.0,
                          a.element.c_str());
            out << buf;
        }
    }
    out << "TER\n";
}

inline std::string to_pdb(const ComplexRecord& rec) {
    std::ostringstream out;
    int serial = 1;
    write_pdb_blocks(out, rec.binder, serial);
    write_pdb_blocks(out, rec.site, serial);
    out << "END\n";
    return out.str();
}

inline std::vector<std::string> chain_ids(const MolecularGraph& g) {
    std::vector<std::string> ids;
    for (const auto& b : g.blocks) {
        if (std::find(ids.begin(), ids.end(), b.chain_id) == ids.end()) ids.push_back(b.chain_id);
    }
    return ids;
}

// ---------------------------------------------------------------------------
// JSON serialization

inline nlohmann::json to_json(const MolecularGraph& g) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : g.blocks) {
        nlohmann::json atoms = nlohmann::json::array();
        for (const auto& a : b.atoms) {
            atoms.push_back({{"name", a.name}, {"element", a.element}, {"coord", {a.coord.x(), a.coord.y(), a.coord.z()}}});
        }
        nlohmann::json bonds = nlohmann::json::array();
        for (const auto& [i, j] : b.intra_bonds) bonds.push_back({i, j});
        blocks.push_back({{"type", std::string(vocab::type(b.block_type).three)},
                          {"chain", b.chain_id},
                          {"residue_index", b.residue_index},
                          {"icode", b.insertion_code},
                          {"atoms", atoms},
                          {"intra_bonds", bonds}});
    }
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& e : g.edges) edges.push_back({e.src, e.dst, e.bond});
    return {{"role", to_string(g.role)}, {"blocks", blocks}, {"edges", edges}};
}

inline MolecularGraph graph_from_json(const nlohmann::json& j) {
    MolecularGraph g;
    g.role = role_from_string(j.at("role").get<std::string>());
    for (const auto& jb : j.at("blocks")) {
        Block b;
        b.block_type = vocab::from_three(jb.at("type").get<std::string>());
        b.chain_id = jb.value("chain", std::string{});
        b.residue_index = jb.value("residue_index", 0);
        b.insertion_code = jb.value("icode", std::string{});
        for (const auto& ja : jb.at("atoms")) {
            const auto& c = ja.at("coord");
            Atom a{ja.value("element", std::string{}), ja.at("name").get<std::string>(),
                   Vec3(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>())};
            if (a.element.empty()) a.element = vocab::element_of(a.name);
            if (!a.coord.allFinite()) throw std::invalid_argument("non-finite atom coordinate");
            b.atoms.push_back(std::move(a));
        }
        if (jb.contains("intra_bonds")) {
            for (const auto& p : jb.at("intra_bonds")) b.intra_bonds.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
        }
        if (b.atoms.empty()) throw std::invalid_argument("block without atoms");
        g.blocks.push_back(std::move(b));
    }
    if (j.contains("edges")) {
        const auto n = static_cast<int>(g.blocks.size());
        for (const auto& e : j.at("edges")) {
            Edge ed{e.at(0).get<int>(), e.at(1).get<int>(), e.size() > 2 ? e.at(2).get<int>() : 0};
            if (ed.src < 0 || ed.dst < 0 || ed.src >= n || ed.dst >= n || ed.src == ed.dst) {
                throw std::invalid_argument("edge references invalid block index");
            }
            g.edges.push_back(ed);
        }
    }
    return g;
}

inline constexpr int kComplexSchemaVersion = 1;

inline nlohmann::json to_json(const ComplexRecord& r) {
    return {{"schema_version", kComplexSchemaVersion},
            {"id", r.id},
            {"domain_tag", to_string(r.domain_tag)},
            {"source", r.source},
            {"binder", to_json(r.binder)},
            {"site", to_json(r.site)}};
}

inline ComplexRecord complex_from_json(const nlohmann::json& j) {
    if (j.value("schema_version", kComplexSchemaVersion) != kComplexSchemaVersion) {
        throw std::invalid_argument("unsupported complex schema version");
    }
    ComplexRecord r;
    r.id = j.at("id").get<std::string>();
    r.domain_tag = domain_from_string(j.value("domain_tag", std::string("synthetic")));
    r.source = j.value("source", std::string{});
    r.binder = graph_from_json(j.at("binder"));
    r.site = graph_from_json(j.at("site"));
    if (r.binder.empty() || r.site.empty()) throw std::invalid_argument("complex " + r.id + " has an empty graph");
    return r;
}

inline void save_complex(const ComplexRecord& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << to_json(r).dump(1) << '\n';
}

inline ComplexRecord load_complex(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    return complex_from_json(j);
}

// ---------------------------------------------------------------------------
// Synthetic complexes

namespace synth_detail {

/// Places d given a, b, c with |cd| = bond, angle bcd, dihedral abcd (NeRF).
inline Vec3 place(const Vec3& a, const Vec3& b, const Vec3& c, double bond, double angle, double torsion) {
    const Vec3 bc = (c - b).normalized();
    Vec3 n = (b - a).cross(bc);
    if (n.norm() < 1e-9) n = bc.unitOrthogonal();
    n.normalize();
    const Vec3 m = n.cross(bc);
    const Vec3 d2(-bond * std::cos(angle), bond * std::sin(angle) * std::cos(torsion), bond * std::sin(angle) * std::sin(torsion));
    return c + bc * d2.x() + m * d2.y() + n * d2.z();
}

/// Cα trace mixing helix-like and strand-like segments; consecutive spacing
/// 3.8 +- 0.15 Å.
inline std::vector<Vec3> ca_trace(Rng& rng, int n) {
    std::vector<Vec3> ca;
    ca.reserve(static_cast<std::size_t>(n));
    const double pi = 3.14159265358979323846;
    auto step = [&] { return 3.8 + rng.uniform(-0.15, 0.15); };
    ca.emplace_back(0.0, 0.0, 0.0);
    if (n > 1) ca.emplace_back(step(), 0.0, 0.0);
    if (n > 2) {
        const double ang = rng.uniform(95.0, 120.0) * pi / 180.0;
        const double s = step();
        ca.push_back(ca[1] + Vec3(-std::cos(ang), std::sin(ang), 0.0) * s);
    }
    bool helix = rng.uniform() < 0.5;
    int remaining = static_cast<int>(rng.uniform_int(3, 7));
    for (int i = 3; i < n; ++i) {
        if (--remaining <= 0) {
            helix = !helix;
            remaining = static_cast<int>(rng.uniform_int(3, 7));
        }
        const double angle = (helix ? rng.uniform(88.0, 94.0) : rng.uniform(115.0, 125.0)) * pi / 180.0;
        const double torsion = (helix ? rng.uniform(45.0, 55.0) : rng.uniform(-175.0, -160.0)) * pi / 180.0;
        ca.push_back(place(ca[static_cast<std::size_t>(i) - 3], ca[static_cast<std::size_t>(i) - 2],
                           ca[static_cast<std::size_t>(i) - 1], step(), angle, torsion));
    }
    return ca;
}

struct Frame {
    Vec3 inward;  // bisector towards the local curvature centre
    Vec3 normal;
};

inline std::vector<Frame> frames(const std::vector<Vec3>& ca) {
    const std::size_t n = ca.size();
    std::vector<Frame> f(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (i > 0 && i + 1 < n) {
            const Vec3 u = (ca[i + 1] - ca[i]).normalized();
            const Vec3 w = (ca[i - 1] - ca[i]).normalized();
            Vec3 b = u + w;
            Vec3 nrm = u.cross(w);
            if (b.norm() < 1e-6 || nrm.norm() < 1e-6) {
                nrm = u.unitOrthogonal();
                b = nrm.cross(u);
            }
            f[i] = {b.normalized(), nrm.normalized()};
        }
    }
    if (n == 1) {
        f[0] = {Vec3::UnitY(), Vec3::UnitZ()};
    } else if (n == 2) {
        const Vec3 u = (ca[1] - ca[0]).normalized();
        const Vec3 nrm = u.unitOrthogonal();
        f[0] = f[1] = {nrm.cross(u).normalized(), nrm};
    } else {
        f[0] = f[1];
        f[n - 1] = f[n - 2];
    }
    return f;
}

/// Builds template-ordered atoms for a chain given types and a Cα trace.
inline std::vector<Block> build_chain(const std::vector<Vec3>& ca, const std::vector<int>& types, const std::string& chain,
                                      int first_index) {
    const std::size_t n = ca.size();
    const auto fr = frames(ca);
    std::vector<Vec3> seg_dir(n > 1 ? n - 1 : 1, Vec3::UnitX());
    std::vector<Vec3> seg_nrm(seg_dir.size(), Vec3::UnitZ());
    for (std::size_t i = 0; i + 1 < n; ++i) {
        seg_dir[i] = (ca[i + 1] - ca[i]).normalized();
        Vec3 m = fr[i].normal + fr[i + 1].normal;
        m -= m.dot(seg_dir[i]) * seg_dir[i];
        if (m.norm() < 1e-6) m = seg_dir[i].unitOrthogonal();
        seg_nrm[i] = m.normalized();
    }
    std::vector<Block> blocks;
    for (std::size_t i = 0; i < n; ++i) {
        Block b;
        b.block_type = types[i];
        b.chain_id = chain;
        b.residue_index = first_index + static_cast<int>(i);
        const std::size_t in_seg = i > 0 ? i - 1 : 0;
        const std::size_t out_seg = (i + 1 < n) ? i : (n > 1 ? n - 2 : 0);
        const Vec3 n_atom = ca[i] - 1.2 * seg_dir[in_seg] + 0.8 * seg_nrm[in_seg];
        const Vec3 c_atom = ca[i] + 1.2 * seg_dir[out_seg] + 0.95 * seg_nrm[out_seg];
        const Vec3 o_atom = c_atom + 1.23 * seg_nrm[out_seg];
        const Vec3 out_dir = (-fr[i].inward + 0.5 * fr[i].normal).normalized();
        const Vec3 cb = ca[i] + 1.53 * out_dir;
        const Vec3 zig = fr[i].normal.cross(out_dir).normalized();
        const auto& names = vocab::type(types[i]).atoms;
        Vec3 prev = cb;
        for (std::size_t k = 0; k < names.size(); ++k) {
            Vec3 p;
            switch (k) {
                case 0: p = n_atom; break;
                case 1: p = ca[i]; break;
                case 2: p = c_atom; break;
                case 3: p = o_atom; break;
                case 4: p = cb; break;
                default: {
                    const double side = (k % 2 == 0) ? 0.6 : -0.6;
                    p = prev + 1.5 * (out_dir + side * zig).normalized();
                    prev = p;
                }
            }
            b.atoms.push_back({vocab::element_of(names[k]), std::string(names[k]), p});
        }
        b.intra_bonds = detect_intra_bonds(b.atoms);
        blocks.push_back(std::move(b));
    }
    return blocks;
}

/// Cβ proxy that a residue of any non-glycine type would get from build_chain.
inline std::vector<Vec3> would_be_cb(const std::vector<Vec3>& ca) {
    const auto fr = frames(ca);
    std::vector<Vec3> out;
    for (std::size_t i = 0; i < ca.size(); ++i) out.push_back(ca[i] + 1.53 * (-fr[i].inward + 0.5 * fr[i].normal).normalized());
    return out;
}

}  // namespace synth_detail

/// Deterministic toy complex: target chain "B" of `site_len` residues with a
/// binder chain "A" of `binder_len` residues docked against it. Target residues
/// near the binder carry types complementary to their nearest binder residue
/// with probability 0.8, which plants a learnable site/binder correlation.
inline ComplexRecord synth_complex(std::uint64_t seed, int binder_len, int site_len) {
    if (binder_len < 1 || site_len < 1) throw std::invalid_argument("synth_complex: lengths must be >= 1");
    Rng rng(seed);
    const auto target_ca = synth_detail::ca_trace(rng, site_len);
    auto binder_ca = synth_detail::ca_trace(rng, binder_len);

    const Mat3 rot = random_rotation(rng);
    Vec3 binder_centroid = Vec3::Zero();
    for (const auto& p : binder_ca) binder_centroid += p;
    binder_centroid /= static_cast<double>(binder_ca.size());
    for (auto& p : binder_ca) p = rot * (p - binder_centroid);

    Vec3 target_centroid = Vec3::Zero();
    for (const auto& p : target_ca) target_centroid += p;
    target_centroid /= static_cast<double>(target_ca.size());
    const auto anchor = static_cast<std::size_t>(rng.uniform_int(0, site_len - 1));
    Vec3 outward = target_ca[anchor] - target_centroid;
    if (outward.norm() < 1e-6) outward = Vec3(rng.normal(), rng.normal(), rng.normal());
    outward.normalize();

    std::vector<int> binder_types(static_cast<std::size_t>(binder_len));
    for (auto& t : binder_types) t = static_cast<int>(rng.uniform_int(0, vocab::kNumStandard - 1));
    std::vector<double> coin(static_cast<std::size_t>(site_len));
    std::vector<int> random_types(static_cast<std::size_t>(site_len));
    for (int i = 0; i < site_len; ++i) {
        coin[static_cast<std::size_t>(i)] = rng.uniform();
        random_types[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(0, vocab::kNumStandard - 1));
    }

    ComplexRecord rec;
    rec.id = "synth_" + std::to_string(seed);
    rec.domain_tag = DomainTag::synthetic;
    rec.source = "synth_complex(seed=" + std::to_string(seed) + ")";
    for (double offset = 8.0;; offset -= 1.0) {
        std::vector<Vec3> placed = binder_ca;
        const Vec3 shift = target_ca[anchor] + outward * std::max(offset, 0.0);
        for (auto& p : placed) p += shift;
        const auto binder_cb = synth_detail::would_be_cb(placed);
        const auto target_cb = synth_detail::would_be_cb(target_ca);
        std::vector<int> target_types = random_types;
        for (std::size_t i = 0; i < target_cb.size(); ++i) {
            double best = 1e300;
            std::size_t nearest = 0;
            for (std::size_t j = 0; j < binder_cb.size(); ++j) {
                const double d = (target_cb[i] - binder_cb[j]).norm();
                if (d < best) {
                    best = d;
                    nearest = j;
                }
            }
            if (best <= 10.0 && coin[i] < 0.8) target_types[i] = vocab::complement(binder_types[nearest]);
        }
        rec.binder.role = GraphRole::binder;
        rec.binder.blocks = synth_detail::build_chain(placed, binder_types, "A", 1);
        rec.site.role = GraphRole::binding_site;
        rec.site.blocks = synth_detail::build_chain(target_ca, target_types, "B", 1);
        bool ok = true;
        try {
            (void)extract_binding_site(rec);
        } catch (const std::runtime_error&) {
            ok = false;
        }
        if (ok || offset <= 0.0) break;
    }
    return rec;
}

/// Copy of `rec` with every atom jittered by isotropic Gaussian noise.
inline ComplexRecord perturb_complex(const ComplexRecord& rec, std::uint64_t seed, double sigma, const std::string& new_id) {
    Rng rng(seed);
    ComplexRecord out = rec;
    out.id = new_id;
    for (auto* g : {&out.binder, &out.site}) {
        for (auto& b : g->blocks) {
            for (auto& a : b.atoms) a.coord += Vec3(rng.normal(), rng.normal(), rng.normal()) * sigma;
        }
        g->edges.clear();
    }
    return out;
}

/// Replaces the target with its extracted binding site and builds kNN graphs
/// on both sides.
inline ComplexRecord prepare_complex(ComplexRecord rec, double cutoff = 10.0, int k_neighbors = 9) {
    MolecularGraph site = extract_binding_site(rec, cutoff);
    rec.site = build_block_graph(std::move(site), k_neighbors);
    rec.binder = build_block_graph(std::move(rec.binder), k_neighbors);
    rec.binder.role = GraphRole::binder;
    return rec;
}

}  // namespace radiance
