#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace voxcell {

inline constexpr int kMaxAtomicNumber = 118;

inline constexpr std::array<std::string_view, kMaxAtomicNumber + 1> kElementSymbols = {
    "",   "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
    "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
    "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
    "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac",
    "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf",
    "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
};

/// Accepts CIF-style labels too: "Fe2+" and "O1" resolve by their leading letters.
inline std::optional<int> atomic_number(std::string_view symbol) {
    std::string letters;
    for (char c : symbol) {
        if ((c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z'))
            letters.push_back(c);
        else
            break;
    }
    if (letters.empty() || letters.size() > 2) return std::nullopt;
    letters[0] = static_cast<char>(letters[0] >= 'a' ? letters[0] - 'a' + 'A' : letters[0]);
    if (letters.size() == 2 && letters[1] < 'a')
        letters[1] = static_cast<char>(letters[1] - 'A' + 'a');
    for (int z = 1; z <= kMaxAtomicNumber; ++z)
        if (kElementSymbols[static_cast<std::size_t>(z)] == letters) return z;
    return std::nullopt;
}

inline std::string_view element_symbol(int z) {
    if (z < 1 || z > kMaxAtomicNumber) return "";
    return kElementSymbols[static_cast<std::size_t>(z)];
}

}  // namespace voxcell
