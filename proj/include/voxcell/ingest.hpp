#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "elements.hpp"
#include "error.hpp"
#include "lattice.hpp"

namespace voxcell {

struct CrystalSite {
    std::string symbol;
    int atomic_number = 0;
    Vec3 frac;
};

/// A parsed crystal file. Fractional coordinates are kept as written;
/// wrapping into [0,1) happens in to_unit_cell().
struct CrystalFile {
    std::string id;
    std::string path;  // empty unless loaded from disk
    LatticeParams cell;
    std::vector<CrystalSite> sites;

    double max_side() const { return std::max({cell.a, cell.b, cell.c}); }
};

namespace detail {

// CIF tokens: bare words, quoted strings, and ';' text fields; '#' starts a comment.
inline std::vector<std::string> cif_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    bool line_start = true;
    while (i < n) {
        const char c = text[i];
        if (c == '\n') {
            line_start = true;
            ++i;
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        if (c == '#') {
            while (i < n && text[i] != '\n') ++i;
            continue;
        }
        if (c == ';' && line_start) {
            const std::size_t end = text.find("\n;", i + 1);
            const std::size_t stop = end == std::string_view::npos ? n : end;
            out.emplace_back(text.substr(i + 1, stop - i - 1));
            i = end == std::string_view::npos ? n : end + 2;
            line_start = false;
            continue;
        }
        line_start = false;
        if (c == '\'' || c == '"') {
            std::size_t j = i + 1;
            // A closing quote only counts when followed by whitespace or EOF.
            while (j < n && !(text[j] == c &&
                              (j + 1 == n || std::isspace(static_cast<unsigned char>(text[j + 1])))))
                ++j;
            out.emplace_back(text.substr(i + 1, j - i - 1));
            i = j + 1;
            continue;
        }
        std::size_t j = i;
        while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
        out.emplace_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

inline std::string lower(std::string_view s) {
    std::string r(s);
    for (auto& ch : r) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return r;
}

// CIF numbers may carry a standard uncertainty suffix: "4.123(5)".
inline double cif_number(const std::string& token, const std::string& what) {
    std::string t = token.substr(0, token.find('('));
    double value = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
        fail(ErrorKind::MalformedFile, "cannot parse number for " + what + ": '" + token + "'");
    return value;
}

inline std::string strip_spaces(std::string_view s) {
    std::string r;
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) r.push_back(c);
    return lower(r);
}

inline bool is_identity_symop(std::string_view op) {
    const std::string s = strip_spaces(op);
    return s == "x,y,z" || s == "+x,+y,+z";
}

}  // namespace detail

/// Reads the CIF subset: cell lengths and angles, an optional P1 symmetry
/// declaration, and one atom-site loop with a symbol column and fractional
/// coordinates.
inline CrystalFile parse_crystal_file(std::string_view text) {
    const auto tokens = detail::cif_tokens(text);
    CrystalFile file;
    double cell_values[6];
    bool have_cell[6] = {false, false, false, false, false, false};
    static constexpr std::string_view cell_tags[6] = {
        "_cell_length_a",   "_cell_length_b",  "_cell_length_c",
        "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma"};
    bool have_sites = false;

    std::size_t i = 0;
    while (i < tokens.size()) {
        const std::string tag = detail::lower(tokens[i]);
        if (tag.rfind("data_", 0) == 0) {
            file.id = tokens[i].substr(5);
            ++i;
            continue;
        }
        if (tag == "loop_") {
            ++i;
            std::vector<std::string> columns;
            while (i < tokens.size() && tokens[i].starts_with('_')) columns.push_back(detail::lower(tokens[i++]));
            std::vector<std::string> values;
            while (i < tokens.size() && !tokens[i].starts_with('_') &&
                   detail::lower(tokens[i]) != "loop_" && detail::lower(tokens[i]).rfind("data_", 0) != 0)
                values.push_back(tokens[i++]);
            if (columns.empty()) fail(ErrorKind::MalformedFile, "loop_ without column tags");
            if (values.size() % columns.size() != 0)
                fail(ErrorKind::MalformedFile, "loop value count is not a multiple of its columns");
            const std::size_t rows = values.size() / columns.size();
            auto column = [&](std::string_view name) -> long {
                const auto it = std::find(columns.begin(), columns.end(), name);
                return it == columns.end() ? -1 : static_cast<long>(it - columns.begin());
            };

            long symop = column("_symmetry_equiv_pos_as_xyz");
            if (symop < 0) symop = column("_space_group_symop_operation_xyz");
            if (symop >= 0) {
                for (std::size_t r = 0; r < rows; ++r)
                    if (!detail::is_identity_symop(values[r * columns.size() + static_cast<std::size_t>(symop)]))
                        fail(ErrorKind::NonP1Symmetry,
                             "symmetry operation '" + values[r * columns.size() + static_cast<std::size_t>(symop)] +
                                 "' present; sites must be pre-expanded to P1");
                continue;
            }

            const long fx = column("_atom_site_fract_x");
            if (fx < 0) continue;
            const long fy = column("_atom_site_fract_y");
            const long fz = column("_atom_site_fract_z");
            long sym = column("_atom_site_type_symbol");
            if (sym < 0) sym = column("_atom_site_label");
            if (fy < 0 || fz < 0 || sym < 0)
                fail(ErrorKind::MalformedFile, "atom-site loop lacks a symbol or coordinate column");
            for (std::size_t r = 0; r < rows; ++r) {
                const auto at = [&](long c) { return values[r * columns.size() + static_cast<std::size_t>(c)]; };
                CrystalSite site;
                site.symbol = at(sym);
                const auto z = atomic_number(site.symbol);
                if (!z) fail(ErrorKind::UnknownElement, "unknown element symbol '" + site.symbol + "'");
                site.atomic_number = *z;
                site.frac = {detail::cif_number(at(fx), "_atom_site_fract_x"),
                             detail::cif_number(at(fy), "_atom_site_fract_y"),
                             detail::cif_number(at(fz), "_atom_site_fract_z")};
                for (std::size_t k = 0; k < 3; ++k)
                    if (!std::isfinite(site.frac[k]))
                        fail(ErrorKind::MalformedFile, "non-finite fractional coordinate");
                file.sites.push_back(std::move(site));
            }
            have_sites = true;
            continue;
        }
        if (tag == "_symmetry_space_group_name_h-m" || tag == "_space_group_name_h-m_alt") {
            if (i + 1 >= tokens.size()) fail(ErrorKind::MalformedFile, "missing value for " + tag);
            const std::string group = detail::strip_spaces(tokens[i + 1]);
            if (group != "p1")
                fail(ErrorKind::NonP1Symmetry, "space group '" + tokens[i + 1] + "' is not P1");
            i += 2;
            continue;
        }
        bool matched = false;
        for (int k = 0; k < 6; ++k) {
            if (tag == cell_tags[k]) {
                if (i + 1 >= tokens.size()) fail(ErrorKind::MalformedFile, "missing value for " + tag);
                cell_values[k] = detail::cif_number(tokens[i + 1], tag);
                have_cell[k] = true;
                i += 2;
                matched = true;
                break;
            }
        }
        if (matched) continue;
        // Unrecognised data item: skip the tag and its value.
        i += tokens[i].starts_with('_') && i + 1 < tokens.size() && !tokens[i + 1].starts_with('_') ? 2 : 1;
    }

    for (int k = 0; k < 6; ++k)
        if (!have_cell[k])
            fail(ErrorKind::MalformedFile, std::string("missing cell parameter ") + std::string(cell_tags[k]));
    if (!have_sites) fail(ErrorKind::MalformedFile, "missing atom-site loop");

    file.cell = {cell_values[0], cell_values[1], cell_values[2],
                 cell_values[3], cell_values[4], cell_values[5]};
    if (!(file.cell.a > 0 && file.cell.b > 0 && file.cell.c > 0))
        fail(ErrorKind::MalformedFile, "cell side lengths must be positive");
    for (double ang : {file.cell.alpha, file.cell.beta, file.cell.gamma})
        if (!(ang > 0 && ang < 180)) fail(ErrorKind::MalformedFile, "cell angle outside (0, 180)");
    return file;
}

inline std::string serialize_crystal_file(const CrystalFile& file) {
    std::ostringstream out;
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    out << "data_" << (file.id.empty() ? "crystal" : file.id) << "\n";
    out << "_symmetry_space_group_name_H-M   'P 1'\n";
    out << "_cell_length_a    " << num(file.cell.a) << "\n";
    out << "_cell_length_b    " << num(file.cell.b) << "\n";
    out << "_cell_length_c    " << num(file.cell.c) << "\n";
    out << "_cell_angle_alpha " << num(file.cell.alpha) << "\n";
    out << "_cell_angle_beta  " << num(file.cell.beta) << "\n";
    out << "_cell_angle_gamma " << num(file.cell.gamma) << "\n";
    out << "loop_\n _atom_site_type_symbol\n _atom_site_fract_x\n _atom_site_fract_y\n _atom_site_fract_z\n";
    for (const auto& s : file.sites)
        out << "  " << s.symbol << " " << num(s.frac.x) << " " << num(s.frac.y) << " " << num(s.frac.z)
            << "\n";
    return out.str();
}

inline CrystalFile load_crystal_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    CrystalFile file = parse_crystal_file(ss.str());
    file.path = path;
    if (file.id.empty()) file.id = path;
    return file;
}

inline UnitCell to_unit_cell(const CrystalFile& file) {
    std::vector<AtomSite> sites;
    sites.reserve(file.sites.size());
    for (const auto& s : file.sites) sites.push_back({s.atomic_number, s.frac});
    return UnitCell(file.cell, std::move(sites));
}

/// Keeps exactly the files whose longest side is strictly below the cutoff.
inline std::vector<CrystalFile> filter_by_size(const std::vector<CrystalFile>& files,
                                               double max_side_angstrom) {
    require(max_side_angstrom > 0, ErrorKind::InvalidArgument, "size cutoff must be positive");
    std::vector<CrystalFile> kept;
    for (const auto& f : files)
        if (f.max_side() < max_side_angstrom) kept.push_back(f);
    return kept;
}

enum class Representation { SingleCell, RepeatedLattice };

inline std::string_view to_string(Representation r) {
    return r == Representation::SingleCell ? "single" : "repeated";
}

inline Representation parse_representation(std::string_view s) {
    if (s == "single") return Representation::SingleCell;
    if (s == "repeated") return Representation::RepeatedLattice;
    fail(ErrorKind::InvalidArgument, "representation must be 'single' or 'repeated'");
}

enum class Split { Train, Test };

struct ManifestEntry {
    std::string path;
    Split split = Split::Train;
    std::vector<std::uint32_t> seeds;
};

struct DatasetManifest {
    static constexpr int kVersion = 1;

    std::vector<ManifestEntry> entries;
    Representation representation = Representation::SingleCell;
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    int rotations_per_cell = 3;
    int offsets_per_cell = 2;

    /// Samples drawn per entry: one per rotation, or the origin-aligned cube
    /// plus the extra random offsets.
    int samples_per_entry() const {
        return representation == Representation::SingleCell ? rotations_per_cell : 1 + offsets_per_cell;
    }
};

struct ManifestOptions {
    Representation representation = Representation::SingleCell;
    int rotations_per_cell = 3;
    int offsets_per_cell = 2;
    double max_side_angstrom = 10.0;
};

/// Filters out oversized cells, then splits deterministically for a seed.
/// Entries keep their input order; only the split tags are shuffled.
inline DatasetManifest build_manifest(const std::vector<CrystalFile>& files, double train_fraction,
                                      std::uint64_t seed, const ManifestOptions& opts = {}) {
    require(train_fraction > 0 && train_fraction < 1, ErrorKind::InvalidArgument,
            "train_fraction must lie strictly between 0 and 1");
    require(opts.rotations_per_cell >= 1, ErrorKind::InvalidArgument, "rotations_per_cell must be >= 1");
    require(opts.offsets_per_cell >= 0, ErrorKind::InvalidArgument, "offsets_per_cell must be >= 0");

    const auto kept = filter_by_size(files, opts.max_side_angstrom);
    if (kept.empty()) fail(ErrorKind::EmptyDataset, "no crystal files survive the size filter");

    DatasetManifest m;
    m.representation = opts.representation;
    m.train_fraction = train_fraction;
    m.seed = seed;
    m.rotations_per_cell = opts.rotations_per_cell;
    m.offsets_per_cell = opts.offsets_per_cell;

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(kept.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order[i - 1], order[pick(rng)]);
    }
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(kept.size())));
    std::vector<Split> tags(kept.size(), Split::Test);
    for (std::size_t i = 0; i < n_train && i < order.size(); ++i) tags[order[i]] = Split::Train;

    std::uniform_int_distribution<std::uint32_t> seed_dist;
    for (std::size_t i = 0; i < kept.size(); ++i) {
        ManifestEntry e;
        e.path = kept[i].path.empty() ? kept[i].id : kept[i].path;
        e.split = tags[i];
        std::set<std::uint32_t> used;
        while (e.seeds.size() < static_cast<std::size_t>(m.samples_per_entry())) {
            const auto s = seed_dist(rng);
            if (used.insert(s).second) e.seeds.push_back(s);
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["version"] = DatasetManifest::kVersion;
    j["representation"] = std::string(to_string(m.representation));
    j["train_fraction"] = m.train_fraction;
    j["seed"] = m.seed;
    j["rotations_per_cell"] = m.rotations_per_cell;
    j["offsets_per_cell"] = m.offsets_per_cell;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : m.entries)
        j["entries"].push_back({{"path", e.path},
                                {"split", e.split == Split::Train ? "train" : "test"},
                                {"seeds", e.seeds}});
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    try {
        DatasetManifest m;
        if (j.at("version").get<int>() != DatasetManifest::kVersion)
            fail(ErrorKind::MalformedFile, "unsupported manifest version");
        m.representation = parse_representation(j.at("representation").get<std::string>());
        m.train_fraction = j.at("train_fraction").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.rotations_per_cell = j.value("rotations_per_cell", 3);
        m.offsets_per_cell = j.value("offsets_per_cell", 2);
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.path = je.at("path").get<std::string>();
            const auto split = je.at("split").get<std::string>();
            if (split != "train" && split != "test") fail(ErrorKind::MalformedFile, "bad split tag " + split);
            e.split = split == "train" ? Split::Train : Split::Test;
            e.seeds = je.at("seeds").get<std::vector<std::uint32_t>>();
            m.entries.push_back(std::move(e));
        }
        return m;
    } catch (const nlohmann::json::exception& ex) {
        fail(ErrorKind::MalformedFile, std::string("manifest: ") + ex.what());
    }
}

}  // namespace voxcell
