#pragma once

// Synthetic twin and sibling families for the ACE tests.

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lmmfs/constraints.hpp"
#include "support/random.hpp"

namespace lmmfs::test {

struct TwinSample {
    std::vector<FamilyDescription> families;
    std::vector<std::vector<Index>> rows;
    Vec y;
    Mat X;
};

/// One family template: relations between members, all reared together unless
/// stated.
inline FamilyDescription family_template(int kind, const std::string& id) {
    FamilyDescription f;
    f.id = id;
    auto add = [&](Index a, Index b, Relation r, bool together = true) { f.pairs.push_back({a, b, r, together}); };
    switch (kind) {
        case 0:  // MZ pair
            f.members = {"t1", "t2"};
            add(0, 1, Relation::MZ);
            break;
        case 1:  // DZ pair
            f.members = {"t1", "t2"};
            add(0, 1, Relation::DZ);
            break;
        case 2:  // DZ pair and a full sibling
            f.members = {"t1", "t2", "s"};
            add(0, 1, Relation::DZ);
            add(0, 2, Relation::Full);
            add(1, 2, Relation::Full);
            break;
        case 3:  // MZ pair and a half sibling
            f.members = {"t1", "t2", "h"};
            add(0, 1, Relation::MZ);
            add(0, 2, Relation::Half);
            add(1, 2, Relation::Half);
            break;
        case 4:  // full siblings reared apart
            f.members = {"s1", "s2"};
            add(0, 1, Relation::Full, false);
            break;
        default:  // singleton
            f.members = {"only"};
            break;
    }
    for (auto& m : f.members) m = id + "." + m;
    return f;
}

/// Families drawn from `kinds` (cycled), members listed in shuffled order,
/// responses drawn from N(Xβ, σ²_a K^a + σ²_c K^c + σ²_e I) per family.
inline TwinSample simulate_twins(const std::vector<int>& kinds, Index families, Index p, double s2a, double s2c,
                                 double s2e, std::mt19937_64& rng) {
    TwinSample out;
    std::vector<Vec> ys;
    std::vector<Mat> xs;
    Index row = 0;
    const Vec beta = Vec::LinSpaced(p, 1.0, 2.0);
    for (Index f = 0; f < families; ++f) {
        FamilyDescription fam = family_template(kinds[static_cast<std::size_t>(f) % kinds.size()], "f" + std::to_string(f));
        // Shuffle the member listing and remap the declarations.
        std::vector<Index> perm(fam.members.size());
        std::iota(perm.begin(), perm.end(), Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        FamilyDescription shuffled = fam;
        std::vector<Index> where(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            shuffled.members[i] = fam.members[static_cast<std::size_t>(perm[i])];
            where[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
        }
        for (auto& pr : shuffled.pairs) {
            pr.a = where[static_cast<std::size_t>(pr.a)];
            pr.b = where[static_cast<std::size_t>(pr.b)];
        }
        const KinshipPair k = kinship_matrices(shuffled);
        const auto q = static_cast<Index>(shuffled.members.size());
        const Mat cov = s2a * k.additive + s2c * k.environment + s2e * Mat::Identity(q, q);
        const Mat l = cov.llt().matrixL();
        Mat x = random_matrix(q, p, rng);
        x.col(0).setOnes();
        xs.push_back(x);
        ys.push_back(x * beta + l * random_matrix(q, 1, rng));
        std::vector<Index> r;
        for (Index i = 0; i < q; ++i) r.push_back(row++);
        out.rows.push_back(r);
        out.families.push_back(shuffled);
    }
    out.y.resize(row);
    out.X.resize(row, p);
    Index pos = 0;
    for (std::size_t f = 0; f < ys.size(); ++f) {
        out.y.segment(pos, ys[f].size()) = ys[f];
        out.X.middleRows(pos, xs[f].rows()) = xs[f];
        pos += ys[f].size();
    }
    return out;
}

inline AceData twin_data(const TwinSample& s) { return build_ace_data(s.y, s.X, s.families, s.rows); }

}  // namespace lmmfs::test
