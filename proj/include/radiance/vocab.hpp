#pragma once

// Block vocabulary: the 20 standard amino acids plus UNK, each with a fixed
// heavy-atom template in PDB naming order.

#include <array>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace radiance::vocab {

struct ResidueType {
    std::string_view three;
    char one;
    std::vector<std::string_view> atoms;
};

inline const std::vector<ResidueType>& table() {
    static const std::vector<ResidueType> t = {
        {"ALA", 'A', {"N", "CA", "C", "O", "CB"}},
        {"ARG", 'R', {"N", "CA", "C", "O", "CB", "CG", "CD", "NE", "CZ", "NH1", "NH2"}},
        {"ASN", 'N', {"N", "CA", "C", "O", "CB", "CG", "OD1", "ND2"}},
        {"ASP", 'D', {"N", "CA", "C", "O", "CB", "CG", "OD1", "OD2"}},
        {"CYS", 'C', {"N", "CA", "C", "O", "CB", "SG"}},
        {"GLN", 'Q', {"N", "CA", "C", "O", "CB", "CG", "CD", "OE1", "NE2"}},
        {"GLU", 'E', {"N", "CA", "C", "O", "CB", "CG", "CD", "OE1", "OE2"}},
        {"GLY", 'G', {"N", "CA", "C", "O"}},
        {"HIS", 'H', {"N", "CA", "C", "O", "CB", "CG", "ND1", "CD2", "CE1", "NE2"}},
        {"ILE", 'I', {"N", "CA", "C", "O", "CB", "CG1", "CG2", "CD1"}},
        {"LEU", 'L', {"N", "CA", "C", "O", "CB", "CG", "CD1", "CD2"}},
        {"LYS", 'K', {"N", "CA", "C", "O", "CB", "CG", "CD", "CE", "NZ"}},
        {"MET", 'M', {"N", "CA", "C", "O", "CB", "CG", "SD", "CE"}},
        {"PHE", 'F', {"N", "CA", "C", "O", "CB", "CG", "CD1", "CD2", "CE1", "CE2", "CZ"}},
        {"PRO", 'P', {"N", "CA", "C", "O", "CB", "CG", "CD"}},
        {"SER", 'S', {"N", "CA", "C", "O", "CB", "OG"}},
        {"THR", 'T', {"N", "CA", "C", "O", "CB", "OG1", "CG2"}},
        {"TRP", 'W', {"N", "CA", "C", "O", "CB", "CG", "CD1", "CD2", "NE1", "CE2", "CE3", "CZ2", "CZ3", "CH2"}},
        {"TYR", 'Y', {"N", "CA", "C", "O", "CB", "CG", "CD1", "CD2", "CE1", "CE2", "CZ", "OH"}},
        {"VAL", 'V', {"N", "CA", "C", "O", "CB", "CG1", "CG2"}},
        {"UNK", 'X', {"N", "CA", "C", "O", "CB"}},
    };
    return t;
}

inline constexpr int kNumStandard = 20;
inline constexpr int kUnk = 20;
inline constexpr int kSize = 21;
inline constexpr int kMaxAtoms = 14;
inline constexpr int kGly = 7;

inline const ResidueType& type(int idx) {
    if (idx < 0 || idx >= kSize) throw std::out_of_range("block type index " + std::to_string(idx));
    return table()[static_cast<std::size_t>(idx)];
}

inline int from_three(std::string_view three) {
    for (int i = 0; i < kNumStandard; ++i) {
        if (table()[static_cast<std::size_t>(i)].three == three) return i;
    }
    return kUnk;
}

/// Returns -1 for characters outside the standard alphabet.
inline int from_one(char c) {
    for (int i = 0; i < kNumStandard; ++i) {
        if (table()[static_cast<std::size_t>(i)].one == c) return i;
    }
    return -1;
}

inline int atom_slot(int type_idx, std::string_view atom_name) {
    const auto& atoms = type(type_idx).atoms;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
        if (atoms[i] == atom_name) return static_cast<int>(i);
    }
    return -1;
}

/// Offset of (type, slot) in a flat enumeration of all template atoms.
inline int flat_slot(int type_idx, int slot) {
    static const std::array<int, kSize + 1> offsets = [] {
        std::array<int, kSize + 1> o{};
        for (int i = 0; i < kSize; ++i) o[static_cast<std::size_t>(i) + 1] = o[static_cast<std::size_t>(i)] + static_cast<int>(table()[static_cast<std::size_t>(i)].atoms.size());
        return o;
    }();
    return offsets[static_cast<std::size_t>(type_idx)] + slot;
}

inline int flat_slot_count() { return flat_slot(kSize - 1, 0) + static_cast<int>(type(kSize - 1).atoms.size()); }

inline std::string element_of(std::string_view atom_name) { return std::string(1, atom_name.front()); }

/// Pairing of residue types used to plant site/binder complementarity in
/// synthetic complexes. An involution over the 20 standard types.
inline int complement(int type_idx) {
    static const std::array<int, kNumStandard> pairs = {
        19,  // ALA-VAL
        3,   // ARG-ASP
        5,   // ASN-GLN
        1,   // ASP-ARG
        12,  // CYS-MET
        2,   // GLN-ASN
        11,  // GLU-LYS
        14,  // GLY-PRO
        17,  // HIS-TRP
        10,  // ILE-LEU
        9,   // LEU-ILE
        6,   // LYS-GLU
        4,   // MET-CYS
        18,  // PHE-TYR
        7,   // PRO-GLY
        16,  // SER-THR
        15,  // THR-SER
        8,   // TRP-HIS
        13,  // TYR-PHE
        0,   // VAL-ALA
    };
    if (type_idx < 0 || type_idx >= kNumStandard) return kUnk;
    return pairs[static_cast<std::size_t>(type_idx)];
}

inline std::string sequence_of(const std::vector<int>& types) {
    std::string s;
    s.reserve(types.size());
    for (int t : types) s.push_back(type(t).one);
    return s;
}

}  // namespace radiance::vocab
