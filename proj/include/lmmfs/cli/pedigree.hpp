#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lmmfs/cli/csv.hpp"
#include "lmmfs/cli/spec_file.hpp"
#include "lmmfs/constraints.hpp"
#include "lmmfs/errors.hpp"
#include "lmmfs/model.hpp"

namespace lmmfs::cli {

/// Pedigree table with columns family, member_a, member_b, relation and
/// reared_together. A row with an empty member_b only declares member_a. An
/// empty reared_together means the pair was reared together.
///
///     family,member_a,member_b,relation,reared_together
///     f1,a,b,MZ,yes
///     f2,c,d,DZ,no
///     f3,e,,,
inline std::vector<FamilyDescription> read_pedigree_table(const ObservationTable& t, const std::string& source = "pedigree") {
    for (const char* col : {"family", "member_a", "member_b", "relation", "reared_together"})
        if (!t.has(col)) throw ParseError(source + ": missing column '" + std::string(col) + "'");
    const auto& fam = t.labels("family");
    const auto& ma = t.labels("member_a");
    const auto& mb = t.labels("member_b");
    const auto& rel = t.labels("relation");
    const auto& rt = t.labels("reared_together");

    std::vector<FamilyDescription> out;
    std::map<std::string, std::size_t> index;
    auto member = [](FamilyDescription& f, const std::string& id) {
        for (std::size_t i = 0; i < f.members.size(); ++i)
            if (f.members[i] == id) return static_cast<Index>(i);
        f.members.push_back(id);
        return static_cast<Index>(f.members.size() - 1);
    };
    for (std::size_t r = 0; r < fam.size(); ++r) {
        const std::string where = source + " record " + std::to_string(r + 2);
        if (fam[r].empty() || ma[r].empty()) throw PedigreeError(where + ": family and member_a are required");
        auto [it, fresh] = index.emplace(fam[r], out.size());
        if (fresh) out.push_back({fam[r], {}, {}});
        FamilyDescription& f = out[it->second];
        const Index a = member(f, ma[r]);
        if (mb[r].empty()) {
            if (!rel[r].empty()) throw PedigreeError(where + ": relation given without member_b");
            continue;
        }
        if (rel[r].empty()) throw PedigreeError(where + ": relation missing for '" + ma[r] + "' and '" + mb[r] + "'");
        FamilyDescription::Pair p;
        p.a = a;
        p.b = member(f, mb[r]);
        try {
            p.relation = parse_relation(rel[r]);
            p.reared_together = rt[r].empty() ? true : detail::parse_bool(rt[r], where);
        } catch (const ParseError& e) {
            throw PedigreeError(e.what());
        }
        f.pairs.push_back(p);
    }
    for (const auto& f : out) (void)relation_tables(f);
    return out;
}

inline std::vector<FamilyDescription> read_pedigree(const std::string& path) {
    return read_pedigree_table(read_csv(path), path);
}

/// Joins the data table to the pedigree through the spec's family and member
/// columns. Subjects absent from the pedigree become single-member families;
/// pedigree members without data are dropped.
inline AceData assemble_ace_data(const ObservationTable& table, const ModelSpec& spec,
                                 std::vector<FamilyDescription> families) {
    if (spec.family_column.empty() || spec.member_column.empty())
        throw ParseError("the ACE spec needs 'family' and 'member' columns");
    if (!spec.design.random.empty()) throw ParseError("random terms are not used by the ACE model");
    const ModelData base = build_design(table, spec.design);
    const auto& fam_col = table.labels(spec.family_column);
    const auto& mem_col = table.labels(spec.member_column);

    std::map<std::pair<std::string, std::string>, std::pair<std::size_t, std::size_t>> where;
    for (std::size_t f = 0; f < families.size(); ++f)
        for (std::size_t i = 0; i < families[f].members.size(); ++i)
            where[{families[f].id, families[f].members[i]}] = {f, i};

    std::vector<std::vector<Index>> rows(families.size());
    for (std::size_t f = 0; f < families.size(); ++f) rows[f].assign(families[f].members.size(), -1);
    for (std::size_t r = 0; r < fam_col.size(); ++r) {
        const auto key = std::make_pair(fam_col[r], mem_col[r]);
        auto it = where.find(key);
        if (it == where.end()) {
            families.push_back({fam_col[r] + "/" + mem_col[r], {mem_col[r]}, {}});
            rows.push_back({-1});
            it = where.emplace(key, std::make_pair(families.size() - 1, std::size_t{0})).first;
        }
        Index& slot = rows[it->second.first][it->second.second];
        if (slot >= 0) {
            throw PedigreeError("subject '" + mem_col[r] + "' of family '" + fam_col[r] + "' appears on data rows " +
                                std::to_string(slot + 2) + " and " + std::to_string(r + 2));
        }
        slot = static_cast<Index>(r);
    }
    AceData data = build_ace_data(base.y, base.X, families, rows, base.fixed_names);
    data.warnings.insert(data.warnings.end(), base.warnings.begin(), base.warnings.end());
    return data;
}

}  // namespace lmmfs::cli
