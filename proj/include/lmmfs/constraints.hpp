#pragma once

// Constrained covariance structures: per-factor structures (diagonal,
// variance components, Toeplitz, compound symmetry, AR(1)), parameterizations
// shared across factors, and the ACE twin model.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "lmmfs/errors.hpp"
#include "lmmfs/estimators.hpp"
#include "lmmfs/likelihood.hpp"
#include "lmmfs/matrix_kernels.hpp"
#include "lmmfs/model.hpp"

namespace lmmfs {

// ---------------------------------------------------------------------------
// Per-factor structures

enum class StructureKind { Unstructured, Diagonal, VarianceComponents, Toeplitz, CompoundSymmetry, AR1 };

inline const char* to_string(StructureKind k) {
    switch (k) {
        case StructureKind::Unstructured: return "unstructured";
        case StructureKind::Diagonal: return "diagonal";
        case StructureKind::VarianceComponents: return "variance_components";
        case StructureKind::Toeplitz: return "toeplitz";
        case StructureKind::CompoundSymmetry: return "compound_symmetry";
        case StructureKind::AR1: return "ar1";
    }
    return "?";
}

inline StructureKind parse_structure(const std::string& s) {
    static const std::map<std::string, StructureKind> names{
        {"unstructured", StructureKind::Unstructured},
        {"diagonal", StructureKind::Diagonal},
        {"variance_components", StructureKind::VarianceComponents},
        {"vc", StructureKind::VarianceComponents},
        {"toeplitz", StructureKind::Toeplitz},
        {"compound_symmetry", StructureKind::CompoundSymmetry},
        {"cs", StructureKind::CompoundSymmetry},
        {"ar1", StructureKind::AR1},
    };
    const auto it = names.find(s);
    if (it == names.end()) throw ParseError("unknown covariance structure '" + s + "'");
    return it->second;
}

/// A parameterization D_k = decode(u) of one q_k × q_k covariance block.
///
/// The constraint matrix has one row per parameter and one column per entry of
/// vec(D_k): C[j, i] = ∂vec(D_k)_i / ∂u_j.
class Structure {
public:
    Structure(StructureKind kind, Index q) : kind_(kind), q_(q) {
        if (q < 1) throw std::invalid_argument("structure dimension must be positive");
        if ((kind == StructureKind::CompoundSymmetry || kind == StructureKind::AR1) && q < 2)
            throw std::invalid_argument(std::string(to_string(kind)) + " needs at least two random effects");
    }

    StructureKind kind() const { return kind_; }
    Index q() const { return q_; }

    Index size() const {
        switch (kind_) {
            case StructureKind::Unstructured: return vech_size(q_);
            case StructureKind::Diagonal: return 1;
            case StructureKind::VarianceComponents: return q_;
            case StructureKind::Toeplitz: return q_;
            case StructureKind::CompoundSymmetry: return 1;
            case StructureKind::AR1: return 1;
        }
        return 0;
    }

    Mat decode(const Vec& u) const {
        check(u);
        switch (kind_) {
            case StructureKind::Unstructured: return unvech(u);
            case StructureKind::Diagonal: return u[0] * Mat::Identity(q_, q_);
            case StructureKind::VarianceComponents: return u.asDiagonal();
            case StructureKind::Toeplitz: {
                Mat d(q_, q_);
                for (Index i = 0; i < q_; ++i)
                    for (Index j = 0; j < q_; ++j) d(i, j) = u[std::abs(i - j)];
                return d;
            }
            case StructureKind::CompoundSymmetry: {
                Mat d = Mat::Constant(q_, q_, u[0]);
                d.diagonal().setOnes();
                return d;
            }
            case StructureKind::AR1: {
                Mat d(q_, q_);
                for (Index i = 0; i < q_; ++i)
                    for (Index j = 0; j < q_; ++j) d(i, j) = std::pow(u[0], static_cast<double>(std::abs(i - j)));
                return d;
            }
        }
        return {};
    }

    /// Reads the parameters back from a matrix that has the structure:
    /// the unique entries in order of first appearance in column-major order.
    Vec encode(const Mat& d) const {
        if (d.rows() != q_ || d.cols() != q_) throw std::invalid_argument("encode: dimension mismatch");
        switch (kind_) {
            case StructureKind::Unstructured: return vech(d);
            case StructureKind::Diagonal: return Vec::Constant(1, d(0, 0));
            case StructureKind::VarianceComponents: return d.diagonal();
            case StructureKind::Toeplitz: return d.col(0);
            case StructureKind::CompoundSymmetry:
            case StructureKind::AR1: return Vec::Constant(1, d(1, 0));
        }
        return {};
    }

    Mat constraint_matrix(const Vec& u) const {
        check(u);
        const Index m = size();
        Mat c = Mat::Zero(m, q_ * q_);
        auto at = [&](Index i, Index j) { return j * q_ + i; };
        switch (kind_) {
            case StructureKind::Unstructured: return duplication_matrix(q_).transpose();
            case StructureKind::Diagonal:
                for (Index i = 0; i < q_; ++i) c(0, at(i, i)) = 1.0;
                break;
            case StructureKind::VarianceComponents:
                for (Index i = 0; i < q_; ++i) c(i, at(i, i)) = 1.0;
                break;
            case StructureKind::Toeplitz:
                for (Index i = 0; i < q_; ++i)
                    for (Index j = 0; j < q_; ++j) c(std::abs(i - j), at(i, j)) = 1.0;
                break;
            case StructureKind::CompoundSymmetry:
                for (Index i = 0; i < q_; ++i)
                    for (Index j = 0; j < q_; ++j)
                        if (i != j) c(0, at(i, j)) = 1.0;
                break;
            case StructureKind::AR1:
                for (Index i = 0; i < q_; ++i)
                    for (Index j = 0; j < q_; ++j) {
                        const Index lag = std::abs(i - j);
                        if (lag > 0) c(0, at(i, j)) = static_cast<double>(lag) * std::pow(u[0], static_cast<double>(lag - 1));
                    }
                break;
        }
        return c;
    }

    /// Parameters whose decoded matrix is closest (Frobenius) to `d`, used to
    /// carry unstructured starting values over to the structure.
    Vec nearest(const Mat& d) const {
        const Mat s = symmetrize(d);
        switch (kind_) {
            case StructureKind::Unstructured: return vech(s);
            case StructureKind::Diagonal: return Vec::Constant(1, s.diagonal().mean());
            case StructureKind::VarianceComponents: return s.diagonal();
            case StructureKind::Toeplitz: {
                Vec u = Vec::Zero(q_);
                for (Index lag = 0; lag < q_; ++lag) {
                    double sum = 0.0;
                    for (Index i = 0; i + lag < q_; ++i) sum += s(i + lag, i);
                    u[lag] = sum / static_cast<double>(q_ - lag);
                }
                return u;
            }
            case StructureKind::CompoundSymmetry:
            case StructureKind::AR1: {
                // Mean correlation at lag one (CS: over all pairs).
                double sum = 0.0;
                Index count = 0;
                for (Index i = 0; i < q_; ++i)
                    for (Index j = 0; j < i; ++j) {
                        if (kind_ == StructureKind::AR1 && i - j != 1) continue;
                        const double scale = std::sqrt(std::max(s(i, i), 0.0) * std::max(s(j, j), 0.0));
                        sum += scale > 0.0 ? s(i, j) / scale : 0.0;
                        ++count;
                    }
                return Vec::Constant(1, sum / static_cast<double>(count));
            }
        }
        return {};
    }

    /// Maps parameters onto the feasible set after a scoring step.
    Vec project(const Vec& u) const {
        check(u);
        switch (kind_) {
            case StructureKind::Unstructured: return vech(project_psd(unvech(u)));
            case StructureKind::Diagonal:
            case StructureKind::VarianceComponents: return u.cwiseMax(0.0);
            case StructureKind::Toeplitz: {
                // Alternating projections between the PSD cone and the
                // Toeplitz subspace.
                Vec cur = u;
                for (int it = 0; it < 100; ++it) {
                    const Mat d = decode(cur);
                    if (min_eigenvalue(d) >= -1e-12 * std::max(1.0, std::abs(cur[0]))) break;
                    cur = nearest(project_psd(d));
                }
                return cur;
            }
            case StructureKind::CompoundSymmetry: {
                const double lo = -1.0 / static_cast<double>(q_ - 1);
                return Vec::Constant(1, std::clamp(u[0], lo, 1.0));
            }
            case StructureKind::AR1: return Vec::Constant(1, std::clamp(u[0], -1.0 + 1e-6, 1.0 - 1e-6));
        }
        return u;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        switch (kind_) {
            case StructureKind::Unstructured:
                for (Index j = 0; j < q_; ++j)
                    for (Index i = j; i < q_; ++i) out.push_back("d" + std::to_string(i + 1) + std::to_string(j + 1));
                break;
            case StructureKind::Diagonal: out = {"variance"}; break;
            case StructureKind::VarianceComponents:
                for (Index i = 0; i < q_; ++i) out.push_back("variance" + std::to_string(i + 1));
                break;
            case StructureKind::Toeplitz:
                for (Index i = 0; i < q_; ++i) out.push_back("lag" + std::to_string(i));
                break;
            case StructureKind::CompoundSymmetry: out = {"covariance"}; break;
            case StructureKind::AR1: out = {"rho"}; break;
        }
        return out;
    }

private:
    void check(const Vec& u) const {
        if (u.size() != size())
            throw std::invalid_argument(std::string(to_string(kind_)) + ": expected " + std::to_string(size()) +
                                        " parameters, got " + std::to_string(u.size()));
    }

    StructureKind kind_;
    Index q_;
};

// ---------------------------------------------------------------------------
// Covariance models over all factors

/// Maps one parameter vector ρ to every D_k. The constraint matrix is the
/// Jacobian of the stacked v(D) = [vec(D_1); …; vec(D_r)] with one row per ρ
/// coordinate.
class CovarianceModel {
public:
    virtual ~CovarianceModel() = default;
    virtual const FactorDims& dims() const = 0;
    virtual Index size() const = 0;
    virtual std::vector<Mat> decode(const Vec& rho) const = 0;
    virtual Mat constraint_matrix(const Vec& rho) const = 0;
    virtual Vec project(const Vec& rho) const = 0;
    /// Starting parameters derived from unstructured starting blocks.
    virtual Vec initial(const std::vector<Mat>& unstructured) const = 0;
    virtual std::vector<std::string> names() const = 0;
};

/// Independent structures per factor; C is block diagonal.
class FactorwiseModel : public CovarianceModel {
public:
    FactorwiseModel(FactorDims dims, std::vector<Structure> structures)
        : dims_(std::move(dims)), structures_(std::move(structures)) {
        if (static_cast<Index>(structures_.size()) != dims_.r()) throw std::invalid_argument("one structure per factor required");
        for (Index k = 0; k < dims_.r(); ++k)
            if (structures_[static_cast<std::size_t>(k)].q() != dims_.qk(k))
                throw std::invalid_argument("structure dimension does not match factor " + std::to_string(k + 1));
        Index pos = 0;
        for (const Structure& s : structures_) {
            offsets_.push_back(pos);
            pos += s.size();
        }
        size_ = pos;
    }

    /// Every factor unstructured; ρ is then the stacked vech(D_k).
    static FactorwiseModel unstructured(const FactorDims& dims) {
        std::vector<Structure> s;
        for (Index k = 0; k < dims.r(); ++k) s.emplace_back(StructureKind::Unstructured, dims.qk(k));
        return {dims, s};
    }

    const FactorDims& dims() const override { return dims_; }
    Index size() const override { return size_; }
    const std::vector<Structure>& structures() const { return structures_; }

    Vec segment(const Vec& rho, Index k) const {
        return rho.segment(offsets_[static_cast<std::size_t>(k)], structures_[static_cast<std::size_t>(k)].size());
    }

    std::vector<Mat> decode(const Vec& rho) const override {
        check(rho);
        std::vector<Mat> out;
        for (Index k = 0; k < dims_.r(); ++k) out.push_back(structures_[static_cast<std::size_t>(k)].decode(segment(rho, k)));
        return out;
    }

    Mat constraint_matrix(const Vec& rho) const override {
        check(rho);
        Mat c = Mat::Zero(size_, dims_.vec_total());
        Index col = 0;
        for (Index k = 0; k < dims_.r(); ++k) {
            const Structure& s = structures_[static_cast<std::size_t>(k)];
            c.block(offsets_[static_cast<std::size_t>(k)], col, s.size(), s.q() * s.q()) = s.constraint_matrix(segment(rho, k));
            col += s.q() * s.q();
        }
        return c;
    }

    Vec project(const Vec& rho) const override {
        check(rho);
        Vec out(size_);
        for (Index k = 0; k < dims_.r(); ++k)
            out.segment(offsets_[static_cast<std::size_t>(k)], structures_[static_cast<std::size_t>(k)].size()) =
                structures_[static_cast<std::size_t>(k)].project(segment(rho, k));
        return out;
    }

    Vec initial(const std::vector<Mat>& unstructured) const override {
        Vec out(size_);
        for (Index k = 0; k < dims_.r(); ++k) {
            const Structure& s = structures_[static_cast<std::size_t>(k)];
            out.segment(offsets_[static_cast<std::size_t>(k)], s.size()) =
                s.project(s.nearest(unstructured[static_cast<std::size_t>(k)]));
        }
        return out;
    }

    std::vector<std::string> names() const override {
        std::vector<std::string> out;
        for (Index k = 0; k < dims_.r(); ++k)
            for (const std::string& n : structures_[static_cast<std::size_t>(k)].names())
                out.push_back("factor" + std::to_string(k + 1) + "." + n);
        return out;
    }

private:
    void check(const Vec& rho) const {
        if (rho.size() != size_) throw std::invalid_argument("covariance parameter length mismatch");
    }

    FactorDims dims_;
    std::vector<Structure> structures_;
    std::vector<Index> offsets_;
    Index size_ = 0;
};

// ---------------------------------------------------------------------------
// Kinship

enum class Relation { MZ, DZ, Full, Half, Unrelated };

inline Relation parse_relation(const std::string& s) {
    std::string t;
    for (char ch : s) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    if (t == "mz") return Relation::MZ;
    if (t == "dz") return Relation::DZ;
    if (t == "full" || t == "full_sibling" || t == "sibling") return Relation::Full;
    if (t == "half" || t == "half_sibling") return Relation::Half;
    if (t == "unrelated" || t == "none") return Relation::Unrelated;
    throw ParseError("unknown relationship '" + s + "'");
}

inline const char* to_string(Relation r) {
    switch (r) {
        case Relation::MZ: return "MZ";
        case Relation::DZ: return "DZ";
        case Relation::Full: return "full";
        case Relation::Half: return "half";
        case Relation::Unrelated: return "unrelated";
    }
    return "?";
}

inline double additive_kinship(Relation r) {
    switch (r) {
        case Relation::MZ: return 1.0;
        case Relation::DZ:
        case Relation::Full: return 0.5;
        case Relation::Half: return 0.25;
        case Relation::Unrelated: return 0.0;
    }
    return 0.0;
}

/// One family unit: members plus pairwise declarations between them.
/// Undeclared pairs are unrelated and reared apart.
struct FamilyDescription {
    struct Pair {
        Index a = 0;
        Index b = 0;
        Relation relation = Relation::Unrelated;
        bool reared_together = false;
    };
    std::string id;
    std::vector<std::string> members;
    std::vector<Pair> pairs;
};

struct KinshipPair {
    Mat additive;
    Mat environment;
};

/// Resolves the declarations into full relation and rearing tables, rejecting
/// contradictions.
inline std::pair<std::vector<std::vector<Relation>>, std::vector<std::vector<bool>>> relation_tables(
    const FamilyDescription& fam) {
    const auto q = fam.members.size();
    std::vector<std::vector<Relation>> rel(q, std::vector<Relation>(q, Relation::Unrelated));
    std::vector<std::vector<bool>> reared(q, std::vector<bool>(q, false));
    std::vector<std::vector<bool>> seen(q, std::vector<bool>(q, false));
    const std::string where = "family '" + fam.id + "'";
    for (const auto& p : fam.pairs) {
        if (p.a < 0 || p.b < 0 || static_cast<std::size_t>(p.a) >= q || static_cast<std::size_t>(p.b) >= q)
            throw PedigreeError(where + ": relationship refers to an unknown member");
        const auto a = static_cast<std::size_t>(p.a), b = static_cast<std::size_t>(p.b);
        if (a == b) throw PedigreeError(where + ": member '" + fam.members[a] + "' is related to itself");
        if (seen[a][b] && (rel[a][b] != p.relation || reared[a][b] != p.reared_together))
            throw PedigreeError(where + ": conflicting declarations for '" + fam.members[a] + "' and '" + fam.members[b] +
                                "' (" + to_string(rel[a][b]) + " vs " + to_string(p.relation) + ")");
        rel[a][b] = rel[b][a] = p.relation;
        reared[a][b] = reared[b][a] = p.reared_together;
        seen[a][b] = seen[b][a] = true;
    }
    // Identical twins share every other relationship.
    for (std::size_t a = 0; a < q; ++a)
        for (std::size_t b = a + 1; b < q; ++b) {
            if (rel[a][b] != Relation::MZ) continue;
            for (std::size_t c = 0; c < q; ++c) {
                if (c == a || c == b) continue;
                if (rel[a][c] != rel[b][c])
                    throw PedigreeError(where + ": MZ twins '" + fam.members[a] + "' and '" + fam.members[b] +
                                        "' have different relationships to '" + fam.members[c] + "'");
            }
        }
    return {rel, reared};
}

/// Additive-genetic and common-environment matrices in the order of
/// `fam.members`.
inline KinshipPair kinship_matrices(const FamilyDescription& fam) {
    const auto [rel, reared] = relation_tables(fam);
    const auto q = static_cast<Index>(fam.members.size());
    KinshipPair k{Mat::Identity(q, q), Mat::Identity(q, q)};
    for (Index a = 0; a < q; ++a)
        for (Index b = 0; b < q; ++b) {
            if (a == b) continue;
            const auto sa = static_cast<std::size_t>(a), sb = static_cast<std::size_t>(b);
            k.additive(a, b) = additive_kinship(rel[sa][sb]);
            k.environment(a, b) = reared[sa][sb] ? 1.0 : 0.0;
        }
    return k;
}

/// Member order putting twins first, then full siblings, then half siblings,
/// then everyone else; ties are broken by the ordering that gives the
/// lexicographically smallest kinship encoding so that families with the same
/// structure get identical matrices.
inline std::vector<Index> canonical_member_order(const FamilyDescription& fam) {
    const auto [rel, reared] = relation_tables(fam);
    const auto q = static_cast<Index>(fam.members.size());
    auto role = [&](Index i) {
        int best = 3;
        for (Index j = 0; j < q; ++j) {
            if (i == j) continue;
            const Relation r = rel[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            if (r == Relation::MZ || r == Relation::DZ) best = std::min(best, 0);
            if (r == Relation::Full) best = std::min(best, 1);
            if (r == Relation::Half) best = std::min(best, 2);
        }
        return best;
    };
    std::vector<Index> order(static_cast<std::size_t>(q));
    std::iota(order.begin(), order.end(), Index{0});
    std::vector<int> roles;
    for (Index i = 0; i < q; ++i) roles.push_back(role(i));
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return roles[static_cast<std::size_t>(a)] < roles[static_cast<std::size_t>(b)]; });
    if (q > 8) return order;

    auto encode = [&](const std::vector<Index>& ord) {
        std::vector<double> key;
        for (Index a : ord)
            for (Index b : ord) {
                const auto sa = static_cast<std::size_t>(a), sb = static_cast<std::size_t>(b);
                key.push_back(a == b ? 1.0 : additive_kinship(rel[sa][sb]));
                key.push_back(a == b ? 1.0 : (reared[sa][sb] ? 1.0 : 0.0));
            }
        return key;
    };
    // Permute within each role group; the groups themselves stay in order.
    std::vector<Index> best = order;
    std::vector<double> best_key = encode(order);
    std::vector<std::pair<std::size_t, std::size_t>> groups;
    for (std::size_t s = 0; s < order.size();) {
        std::size_t e = s;
        while (e < order.size() && roles[static_cast<std::size_t>(order[e])] == roles[static_cast<std::size_t>(order[s])]) ++e;
        groups.emplace_back(s, e);
        s = e;
    }
    std::vector<Index> cur = order;
    for (auto& [s, e] : groups) std::sort(cur.begin() + static_cast<std::ptrdiff_t>(s), cur.begin() + static_cast<std::ptrdiff_t>(e));
    // Odometer over the permutations of every group.
    while (true) {
        const auto key = encode(cur);
        if (key < best_key) {
            best_key = key;
            best = cur;
        }
        std::size_t g = 0;
        for (; g < groups.size(); ++g) {
            auto [s, e] = groups[g];
            if (std::next_permutation(cur.begin() + static_cast<std::ptrdiff_t>(s), cur.begin() + static_cast<std::ptrdiff_t>(e))) break;
        }
        if (g == groups.size()) break;
    }
    return best;
}

// ---------------------------------------------------------------------------
// ACE

/// D_k = τ_a² K^a_k + τ_c² K^c_k with ρ = τ = (τ_a, τ_c), so that
/// σ²_a = τ_a² σ²_e and σ²_c = τ_c² σ²_e.
class AceModel : public CovarianceModel {
public:
    AceModel(FactorDims dims, std::vector<KinshipPair> kin) : dims_(std::move(dims)), kin_(std::move(kin)) {
        if (static_cast<Index>(kin_.size()) != dims_.r()) throw std::invalid_argument("one kinship pair per family type required");
        for (Index k = 0; k < dims_.r(); ++k) {
            const KinshipPair& p = kin_[static_cast<std::size_t>(k)];
            if (p.additive.rows() != dims_.qk(k) || p.environment.rows() != dims_.qk(k))
                throw std::invalid_argument("kinship dimension does not match family type " + std::to_string(k + 1));
        }
    }

    const FactorDims& dims() const override { return dims_; }
    Index size() const override { return 2; }
    const std::vector<KinshipPair>& kinship() const { return kin_; }

    std::vector<Mat> decode(const Vec& tau) const override {
        std::vector<Mat> out;
        for (const KinshipPair& p : kin_) out.push_back(tau[0] * tau[0] * p.additive + tau[1] * tau[1] * p.environment);
        return out;
    }

    /// (1_{1×r} ⊗ diag(2τ_a, 2τ_c)) · ⊕_k [vec(K^a_k)'; vec(K^c_k)'].
    Mat constraint_matrix(const Vec& tau) const override {
        Mat c = Mat::Zero(2, dims_.vec_total());
        Index col = 0;
        for (const KinshipPair& p : kin_) {
            const Index len = p.additive.size();
            c.block(0, col, 1, len) = 2.0 * tau[0] * vec(p.additive).transpose();
            c.block(1, col, 1, len) = 2.0 * tau[1] * vec(p.environment).transpose();
            col += len;
        }
        return c;
    }

    Vec project(const Vec& tau) const override { return tau.cwiseAbs(); }

    Vec initial(const std::vector<Mat>&) const override { return Vec::Ones(2); }

    std::vector<std::string> names() const override { return {"tau_a", "tau_c"}; }

private:
    FactorDims dims_;
    std::vector<KinshipPair> kin_;
};

// ---------------------------------------------------------------------------
// Constrained score and information

/// Constrained parameter state θ^con = (β, σ², ρ).
struct ConstrainedState {
    Vec beta;
    double sigma2 = 1.0;
    Vec rho;

    ParamState full(const CovarianceModel& model) const {
        return ParamState::from_covariances(beta, sigma2, model.decode(rho), Repr::Full);
    }
    Vec pack() const {
        Vec v(beta.size() + 1 + rho.size());
        v << beta, sigma2, rho;
        return v;
    }
};

/// T = diag(I_p, 1, C') mapping constrained to full coordinates.
inline Mat constrained_transform(const CovarianceModel& model, const ConstrainedState& s) {
    const Index p = s.beta.size();
    const Mat c = model.constraint_matrix(s.rho);
    Mat t = Mat::Zero(p + 1 + c.cols(), p + 1 + c.rows());
    t.topLeftCorner(p + 1, p + 1).setIdentity();
    t.bottomRightCorner(c.cols(), c.rows()) = c.transpose();
    return t;
}

/// Score over (β, σ², ρ): the ρ part is C·∂l/∂v(D).
inline Vec constrained_score(const ProductForms& pf, const CovarianceModel& model, const ConstrainedState& s,
                             Criterion crit) {
    const ParamState f = s.full(model);
    return constrained_transform(model, s).transpose() * score(pf, f, crit);
}

/// Fisher Information over (β, σ², ρ): T' I^f T.
inline Mat constrained_information(const ProductForms& pf, const CovarianceModel& model, const ConstrainedState& s) {
    const ParamState f = s.full(model);
    const Mat t = constrained_transform(model, s);
    return t.transpose() * fisher_info(pf, f, InfoKind::FisherFull).m * t;
}

inline double constrained_criterion(const ProductForms& pf, const CovarianceModel& model, const ConstrainedState& s,
                                    Criterion crit) {
    return criterion_value(pf, s.full(model), crit);
}

struct ConstrainedFitResult : FitResult {
    Vec rho;
    std::vector<std::string> rho_names;
};

namespace detail {

/// Shared loop for constrained fits: GLS for (β, σ²), then one scoring step on
/// ρ with step halving and projection. `eval` returns the criterion (or
/// nullopt when invalid), `gls` the closed-form (β, σ²), and `step_terms` the
/// ρ score and information at the post-GLS state.
template <class Eval, class Gls, class StepTerms>
void constrained_loop(ConstrainedFitResult& res, ConstrainedState state, const FitConfig& cfg, Eval eval, Gls gls,
                      StepTerms step_terms, const std::function<Vec(const Vec&)>& project) {
    bool warned = false;
    const auto v0 = eval(state);
    if (!v0) throw NumericalError("criterion is not finite at the initial values");
    double value = *v0;
    res.trace.push_back({0, value, 0.0});
    for (int it = 1; it <= cfg.max_iter; ++it) {
        const double previous = value;
        ConstrainedState g = state;
        std::tie(g.beta, g.sigma2) = gls(state);
        const auto vg = eval(g);
        if (!vg) throw NumericalError("criterion is not finite after the GLS update");
        const auto [score_rho, info_rho] = step_terms(g);
        const Vec dir = scoring_direction(info_rho, score_rho, res.warnings, warned);

        double alpha = 1.0;
        std::optional<std::pair<ConstrainedState, double>> accepted, last_valid;
        while (true) {
            ConstrainedState cand = g;
            cand.rho = project(g.rho + alpha * dir);
            const auto v = eval(cand);
            if (v && not_decreased(*v, *vg)) {
                accepted.emplace(std::move(cand), *v);
                break;
            }
            if (v) last_valid.emplace(std::move(cand), *v);
            alpha *= 0.5;
            if (alpha < cfg.min_step) break;
        }
        bool floor_hit = false;
        if (!accepted) {
            floor_hit = true;
            accepted = last_valid ? *last_valid : std::make_pair(g, *vg);
            if (!last_valid) alpha = 0.0;
        }
        state = accepted->first;
        value = accepted->second;
        res.iterations = it;
        res.trace.push_back({it, value, alpha});
        if (floor_hit) {
            res.step_floor_hit = true;
            res.warnings.push_back("step halving reached its floor at iteration " + std::to_string(it));
            break;
        }
        if (std::abs(value - previous) < cfg.tol) {
            res.converged = true;
            break;
        }
    }
    // Closed-form β and σ² at the final covariance parameters.
    ConstrainedState polished = state;
    try {
        std::tie(polished.beta, polished.sigma2) = gls(state);
        const auto v = eval(polished);
        if (v && *v >= value) {
            state = polished;
            value = *v;
        }
    } catch (const Error&) {
    }
    res.rho = state.rho;
    res.loglik = value;
    res.theta.repr = Repr::Half;
    res.theta.beta = state.beta;
    res.theta.sigma2 = state.sigma2;
}

}  // namespace detail

/// Fisher Scoring for a constrained covariance model: GLS updates for β and σ²
/// and a scoring step on ρ with the constrained information C I^f C'.
inline ConstrainedFitResult fit_constrained(const ProductForms& pf, const CovarianceModel& model, const FitConfig& cfg,
                                            std::optional<Vec> rho_start = std::nullopt) {
    if (!(model.dims() == pf.dims)) throw std::invalid_argument("covariance model does not match the design");
    ConstrainedFitResult res;
    res.method = cfg.method;
    res.criterion = cfg.criterion;
    res.rho_names = model.names();
    const Criterion crit = cfg.criterion;

    ConstrainedState state;
    state.rho = rho_start ? model.project(*rho_start)
                          : model.initial(initial_values(pf, &res.warnings).covariances());
    std::tie(state.beta, state.sigma2) = gls_updates(pf, model.decode(state.rho), crit);
    auto eval = [&](const ConstrainedState& s) -> std::optional<double> {
        if (!(s.sigma2 > 0.0) || !s.pack().allFinite()) return std::nullopt;
        try {
            const double v = constrained_criterion(pf, model, s, crit);
            return std::isfinite(v) ? std::optional<double>(v) : std::nullopt;
        } catch (const Error&) {
            return std::nullopt;
        }
    };
    auto gls = [&](const ConstrainedState& s) { return gls_updates(pf, model.decode(s.rho), crit); };
    auto terms = [&](const ConstrainedState& s) {
        const Vec g = constrained_score(pf, model, s, crit);
        const Mat info = constrained_information(pf, model, s);
        const Index m = model.size();
        return std::make_pair(Vec(g.tail(m)), Mat(info.bottomRightCorner(m, m)));
    };
    detail::constrained_loop(res, state, cfg, eval, gls, terms, [&](const Vec& r) { return model.project(r); });

    for (const Mat& d : model.decode(res.rho)) res.theta.blocks.push_back(vech(d));
    const ModelEval ev(pf, res.theta);
    res.se_beta = (ev.sigma2 * ev.Ainv).diagonal().cwiseSqrt();
    ConstrainedState fin{res.theta.beta, res.theta.sigma2, res.rho};
    res.score_norm = constrained_score(pf, model, fin, crit).norm();
    return res;
}

// ---------------------------------------------------------------------------
// ACE data layout and the efficient evaluation path

/// Observations grouped by family type (factor) and family (level), members in
/// canonical order within each family; Z is the identity in this order.
struct AceData {
    Vec y;
    Mat X;
    FactorDims dims;
    std::vector<KinshipPair> kin;
    /// Row of the original table for each position in (type, family, member) order.
    std::vector<Index> order;
    std::vector<std::string> fixed_names;
    std::vector<std::string> family_ids;  // per (type, family) in order
    std::vector<std::string> warnings;

    Index n() const { return y.size(); }
    Index p() const { return X.cols(); }

    /// The generic-path design: Z = I in (type, family, member) order.
    ModelData as_model_data() const {
        ModelData m;
        m.y = y;
        m.X = X;
        m.Z = Mat::Identity(n(), n());
        m.fs.dims = dims;
        m.fixed_names = fixed_names;
        return m;
    }
};

/// Groups the families given (each with its data rows) into family types.
/// `rows[f][i]` is the data row of member i of family f; -1 means no data.
inline AceData build_ace_data(const Vec& y, const Mat& X, const std::vector<FamilyDescription>& families,
                              const std::vector<std::vector<Index>>& rows, std::vector<std::string> fixed_names = {}) {
    struct TypeBucket {
        KinshipPair kin;
        std::vector<std::vector<Index>> fams;  // rows per family, canonical order
        std::vector<std::string> ids;
    };
    std::vector<TypeBucket> types;
    auto same = [](const KinshipPair& a, const KinshipPair& b) {
        return a.additive.rows() == b.additive.rows() && a.additive == b.additive && a.environment == b.environment;
    };
    AceData out;
    for (std::size_t f = 0; f < families.size(); ++f) {
        // Drop members without data before typing the family.
        FamilyDescription fam;
        fam.id = families[f].id;
        std::vector<Index> keep_rows, remap(families[f].members.size(), -1);
        for (std::size_t i = 0; i < families[f].members.size(); ++i) {
            if (rows[f][i] < 0) continue;
            remap[i] = static_cast<Index>(fam.members.size());
            fam.members.push_back(families[f].members[i]);
            keep_rows.push_back(rows[f][i]);
        }
        if (fam.members.empty()) continue;
        (void)relation_tables(families[f]);
        for (const auto& pr : families[f].pairs) {
            const Index a = remap[static_cast<std::size_t>(pr.a)], b = remap[static_cast<std::size_t>(pr.b)];
            if (a >= 0 && b >= 0) fam.pairs.push_back({a, b, pr.relation, pr.reared_together});
        }
        const std::vector<Index> ord = canonical_member_order(fam);
        FamilyDescription canon = fam;
        canon.members.clear();
        std::vector<Index> inv(ord.size());
        std::vector<Index> canon_rows;
        for (std::size_t i = 0; i < ord.size(); ++i) {
            canon.members.push_back(fam.members[static_cast<std::size_t>(ord[i])]);
            inv[static_cast<std::size_t>(ord[i])] = static_cast<Index>(i);
            canon_rows.push_back(keep_rows[static_cast<std::size_t>(ord[i])]);
        }
        for (auto& pr : canon.pairs) {
            pr.a = inv[static_cast<std::size_t>(pr.a)];
            pr.b = inv[static_cast<std::size_t>(pr.b)];
        }
        const KinshipPair kin = kinship_matrices(canon);
        auto it = std::find_if(types.begin(), types.end(), [&](const TypeBucket& t) { return same(t.kin, kin); });
        if (it == types.end()) {
            types.push_back({kin, {}, {}});
            it = std::prev(types.end());
        }
        it->fams.push_back(canon_rows);
        it->ids.push_back(fam.id);
    }
    if (types.empty()) throw DegenerateDataError("no observations belong to any family");

    std::vector<Index> q, l;
    for (const TypeBucket& t : types) {
        q.push_back(t.kin.additive.rows());
        l.push_back(static_cast<Index>(t.fams.size()));
        out.kin.push_back(t.kin);
        for (const auto& fr : t.fams) out.order.insert(out.order.end(), fr.begin(), fr.end());
        out.family_ids.insert(out.family_ids.end(), t.ids.begin(), t.ids.end());
    }
    out.dims = FactorDims{q, l};
    std::set<Index> used(out.order.begin(), out.order.end());
    if (used.size() != out.order.size()) throw PedigreeError("a subject appears in more than one family");
    const auto n = static_cast<Index>(out.order.size());
    out.y.resize(n);
    out.X.resize(n, X.cols());
    for (Index i = 0; i < n; ++i) {
        out.y[i] = y[out.order[static_cast<std::size_t>(i)]];
        out.X.row(i) = X.row(out.order[static_cast<std::size_t>(i)]);
    }
    out.fixed_names = std::move(fixed_names);
    require_full_rank(out.X);
    return out;
}

/// Whether σ²_a and σ²_c can be told apart from each other and from σ²_e:
/// the span of {I, K^a_k, K^c_k} stacked over family types.
struct AceIdentifiability {
    bool additive = true;
    bool environment = true;
};

inline AceIdentifiability ace_identifiability(const std::vector<KinshipPair>& kin) {
    Index len = 0;
    for (const KinshipPair& k : kin) len += k.additive.size();
    Mat basis(len, 3);
    Index pos = 0;
    for (const KinshipPair& k : kin) {
        const Index m = k.additive.size();
        basis.block(pos, 0, m, 1) = vec(Mat::Identity(k.additive.rows(), k.additive.rows()));
        basis.block(pos, 1, m, 1) = vec(k.additive);
        basis.block(pos, 2, m, 1) = vec(k.environment);
        pos += m;
    }
    auto rank = [](const Mat& m) {
        Eigen::ColPivHouseholderQR<Mat> qr(m);
        qr.setThreshold(1e-10);
        return qr.rank();
    };
    AceIdentifiability id;
    id.additive = rank(basis.leftCols(2)) == 2;
    Mat ic(len, 2);
    ic << basis.col(0), basis.col(2);
    id.environment = rank(ic) == 2 && (!id.additive || rank(basis) == 3);
    return id;
}

/// Product-form free evaluation for the ACE layout (Z = I): every V-weighted
/// quantity reduces to per-family-type sums against D̄_k^{-1}, D̄_k = I + D_k,
/// using Σ_j X_j'⊗X_j' and its analogues precomputed once.
class AceEvaluator {
public:
    explicit AceEvaluator(const AceData& data) : data_(&data) {
        const Index p = data.p();
        Index row = 0;
        for (Index k = 0; k < data.dims.r(); ++k) {
            const Index qk = data.dims.qk(k), lk = data.dims.lk(k);
            Mat pk = Mat::Zero(p * p, qk * qk), qq = Mat::Zero(p, qk * qk);
            Vec sk = Vec::Zero(qk * qk);
            Mat yk(qk, lk);
            for (Index j = 0; j < lk; ++j, row += qk) {
                const Mat xj = data.X.middleRows(row, qk);
                const Vec yj = data.y.segment(row, qk);
                pk += kron(xj.transpose(), xj.transpose());
                qq += kron(yj.transpose(), xj.transpose());
                sk += vec(yj * yj.transpose());
                yk.col(j) = yj;
            }
            P_.push_back(pk);
            Q_.push_back(qq);
            S_.push_back(sk);
        }
    }

    struct Forms {
        std::vector<Mat> dbar_inv;
        double log_det_V = 0.0;
        Mat A;
        Vec XtViY;
        double YtViY = 0.0;
    };

    Forms forms(const std::vector<Mat>& D) const {
        const Index p = data_->p();
        Forms f;
        f.A = Mat::Zero(p, p);
        f.XtViY = Vec::Zero(p);
        for (Index k = 0; k < data_->dims.r(); ++k) {
            const auto ks = static_cast<std::size_t>(k);
            const Index qk = data_->dims.qk(k);
            const Mat dbar = Mat::Identity(qk, qk) + D[ks];
            const Eigen::LLT<Mat> llt(dbar);
            if (llt.info() != Eigen::Success) throw NumericalError("I + D_k is not positive definite");
            const Mat inv = llt.solve(Mat::Identity(qk, qk));
            double ld = 0.0;
            for (Index i = 0; i < qk; ++i) ld += 2.0 * std::log(llt.matrixLLT()(i, i));
            f.log_det_V += static_cast<double>(data_->dims.lk(k)) * ld;
            const Vec vi = vec(inv);
            f.A += unvec(P_[ks] * vi, p, p);
            f.XtViY += Q_[ks] * vi;
            f.YtViY += S_[ks].dot(vi);
            f.dbar_inv.push_back(inv);
        }
        return f;
    }

    static double e_Vi_e(const Forms& f, const Vec& beta) {
        return f.YtViY - 2.0 * beta.dot(f.XtViY) + beta.dot(f.A * beta);
    }

    double criterion(const Vec& beta, double sigma2, const std::vector<Mat>& D, Criterion crit) const {
        if (!(sigma2 > 0.0)) throw NumericalError("sigma^2 must be positive");
        const Forms f = forms(D);
        const double n = static_cast<double>(data_->n());
        double l = -0.5 * (n * std::log(sigma2) + e_Vi_e(f, beta) / sigma2 + f.log_det_V);
        if (crit == Criterion::ReML && data_->p() > 0) {
            const Eigen::LLT<Mat> llt(f.A);
            if (llt.info() != Eigen::Success) throw NumericalError("X'V^{-1}X is singular");
            double ld = 0.0;
            for (Index i = 0; i < f.A.rows(); ++i) ld += 2.0 * std::log(llt.matrixLLT()(i, i));
            l -= 0.5 * (-static_cast<double>(data_->p()) * std::log(sigma2) + ld);
        }
        return l;
    }

    std::pair<Vec, double> gls(const std::vector<Mat>& D, Criterion crit) const {
        const Forms f = forms(D);
        const Eigen::LDLT<Mat> ldlt(f.A);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) throw NumericalError("X'V^{-1}X is singular in the GLS update");
        const Vec beta = ldlt.solve(f.XtViY);
        const double denom = static_cast<double>(crit == Criterion::ML ? data_->n() : data_->n() - data_->p());
        if (denom <= 0) throw DegenerateDataError("no residual degrees of freedom");
        const double s2 = e_Vi_e(f, beta) / denom;
        if (!(s2 > 0.0)) throw NumericalError("GLS variance estimate is not positive");
        return {beta, s2};
    }

    /// ∂l/∂vec(D_k) for every family type:
    /// ½ vec(D̄⁻¹(E_kE_k'/σ² − l_k D̄ + [ReML] Σ_j X_j A⁻¹ X_j') D̄⁻¹).
    std::vector<Vec> vec_scores(const Vec& beta, double sigma2, const std::vector<Mat>& D, Criterion crit) const {
        const Forms f = forms(D);
        const Index p = data_->p();
        Mat ainv;
        if (crit == Criterion::ReML) ainv = f.A.ldlt().solve(Mat::Identity(p, p));
        std::vector<Vec> out;
        for (Index k = 0; k < data_->dims.r(); ++k) {
            const auto ks = static_cast<std::size_t>(k);
            const Index qk = data_->dims.qk(k);
            const Mat& inv = f.dbar_inv[ks];
            const Mat dbar = Mat::Identity(qk, qk) + D[ks];
            Mat inner = residual_outer(k, beta) / sigma2 - static_cast<double>(data_->dims.lk(k)) * dbar;
            if (crit == Criterion::ReML) inner += unvec(P_[ks].transpose() * vec(ainv), qk, qk);
            out.push_back(0.5 * vec(inv * inner * inv));
        }
        return out;
    }

    /// F_vec(D_k) = ½ l_k (D̄_k⁻¹ ⊗ D̄_k⁻¹); the types are uncoupled.
    std::vector<Mat> vec_information(const std::vector<Mat>& D) const {
        std::vector<Mat> out;
        for (Index k = 0; k < data_->dims.r(); ++k) {
            const Index qk = data_->dims.qk(k);
            const Mat inv = (Mat::Identity(qk, qk) + D[static_cast<std::size_t>(k)]).llt().solve(Mat::Identity(qk, qk));
            out.push_back(0.5 * static_cast<double>(data_->dims.lk(k)) * kron(inv, inv));
        }
        return out;
    }

    /// Score over τ: 2τ ⊙ Σ_k K_k ∂l/∂vec(D_k), with K_k = [vec(K^a_k)'; vec(K^c_k)'].
    Vec tau_score(const Vec& beta, double sigma2, const Vec& tau, Criterion crit) const {
        const auto d = AceModel(data_->dims, data_->kin).decode(tau);
        const auto g = vec_scores(beta, sigma2, d, crit);
        Vec s = Vec::Zero(2);
        for (Index k = 0; k < data_->dims.r(); ++k) s += stacked_kinship(k) * g[static_cast<std::size_t>(k)];
        return 2.0 * tau.cwiseProduct(s);
    }

    /// Information over τ: 4ττ' ⊙ Σ_k K_k F_k K_k'.
    Mat tau_information(const Vec& tau) const {
        const auto d = AceModel(data_->dims, data_->kin).decode(tau);
        const auto f = vec_information(d);
        Mat s = Mat::Zero(2, 2);
        for (Index k = 0; k < data_->dims.r(); ++k) {
            const Mat kk = stacked_kinship(k);
            s += kk * f[static_cast<std::size_t>(k)] * kk.transpose();
        }
        return 4.0 * (tau * tau.transpose()).cwiseProduct(s);
    }

    /// Σ_j e_j e_j' over the families of type k.
    Mat residual_outer(Index k, const Vec& beta) const {
        const auto ks = static_cast<std::size_t>(k);
        const Index qk = data_->dims.qk(k);
        const Mat m = unvec(Q_[ks].transpose() * beta, qk, qk);
        return unvec(S_[ks], qk, qk) - m - m.transpose() + unvec(P_[ks].transpose() * vec(Mat(beta * beta.transpose())), qk, qk);
    }

    /// Σ_j X_j M X_j' over the families of type k, for p × p M.
    Mat sandwich(Index k, const Mat& m) const {
        const Index qk = data_->dims.qk(k);
        return unvec(P_[static_cast<std::size_t>(k)].transpose() * vec(m), qk, qk);
    }

    /// Σ_{j1 ∈ k1, j2 ∈ k2} (X_{j1} M X_{j2}') ⊗ (X_{j1} M X_{j2}') = P_{k1}'(M ⊗ M)P_{k2}.
    Mat cross_kron(Index k1, Index k2, const Mat& m) const {
        return P_[static_cast<std::size_t>(k1)].transpose() * kron(m, m) * P_[static_cast<std::size_t>(k2)];
    }

    Mat stacked_kinship(Index k) const {
        const KinshipPair& kp = data_->kin[static_cast<std::size_t>(k)];
        Mat kk(2, kp.additive.size());
        kk.row(0) = vec(kp.additive).transpose();
        kk.row(1) = vec(kp.environment).transpose();
        return kk;
    }

    const AceData& data() const { return *data_; }

private:
    const AceData* data_;
    std::vector<Mat> P_, Q_;
    std::vector<Vec> S_;
};

struct AceRestart {
    Vec tau_start;
    double loglik = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
    bool failed = false;
    std::string message;
};

struct AceFitResult : ConstrainedFitResult {
    double sigma2_a = 0.0;
    double sigma2_c = 0.0;
    double sigma2_e = 0.0;
    AceIdentifiability identified;
    std::vector<AceRestart> restarts;
    std::size_t best_restart = 0;
};

/// Starting τ values of the restart schedule: τ_a ≈ 0, τ_c ≈ 0, both nonzero.
inline std::vector<Vec> ace_restart_points() {
    return {(Vec(2) << 1e-4, 1.0).finished(), (Vec(2) << 1.0, 1e-4).finished(), (Vec(2) << 1.0, 1.0).finished()};
}

namespace detail {

inline void fill_ace_summary(AceFitResult& res, const AceData& data) {
    const double t2a = res.rho[0] * res.rho[0], t2c = res.rho[1] * res.rho[1];
    res.sigma2_e = res.theta.sigma2;
    res.sigma2_a = t2a * res.theta.sigma2;
    res.sigma2_c = t2c * res.theta.sigma2;
    res.theta.blocks.clear();
    for (const KinshipPair& k : data.kin) res.theta.blocks.push_back(vech(t2a * k.additive + t2c * k.environment));
}

}  // namespace detail

/// ACE fit through the efficient per-family-type path, ReML by default.
/// Components that the pedigree cannot identify are held at zero.
inline AceFitResult ace_fit(const AceData& data, FitConfig cfg = {Method::FSFS, Criterion::ReML}) {
    const AceEvaluator evaluator(data);
    const AceModel model(data.dims, data.kin);
    const AceIdentifiability id = ace_identifiability(data.kin);
    const Criterion crit = cfg.criterion;
    Vec mask = Vec::Ones(2);
    if (!id.additive) mask[0] = 0.0;
    if (!id.environment) mask[1] = 0.0;

    auto eval = [&](const ConstrainedState& s) -> std::optional<double> {
        if (!(s.sigma2 > 0.0) || !s.pack().allFinite()) return std::nullopt;
        try {
            const double v = evaluator.criterion(s.beta, s.sigma2, model.decode(s.rho), crit);
            return std::isfinite(v) ? std::optional<double>(v) : std::nullopt;
        } catch (const Error&) {
            return std::nullopt;
        }
    };
    auto gls = [&](const ConstrainedState& s) { return evaluator.gls(model.decode(s.rho), crit); };
    auto terms = [&](const ConstrainedState& s) {
        Vec g = evaluator.tau_score(s.beta, s.sigma2, s.rho, crit);
        Mat info = evaluator.tau_information(s.rho);
        // Held components get a unit diagonal and zero score so they stay put.
        for (Index i = 0; i < 2; ++i)
            if (mask[i] == 0.0) {
                g[i] = 0.0;
                info.row(i).setZero();
                info.col(i).setZero();
                info(i, i) = 1.0;
            }
        return std::make_pair(g, info);
    };
    auto project = [&](const Vec& t) { return Vec(model.project(t).cwiseProduct(mask)); };

    AceFitResult best;
    bool have_best = false;
    std::vector<AceRestart> restarts;
    std::vector<Vec> starts = ace_restart_points();
    if (mask.minCoeff() == 0.0) starts = {mask.cwiseProduct(Vec::Ones(2))};
    for (std::size_t i = 0; i < starts.size(); ++i) {
        AceRestart rs;
        rs.tau_start = project(starts[i]);
        AceFitResult r;
        r.method = cfg.method;
        r.criterion = crit;
        r.rho_names = model.names();
        try {
            ConstrainedState st;
            st.rho = rs.tau_start;
            std::tie(st.beta, st.sigma2) = gls(st);
            detail::constrained_loop(r, st, cfg, eval, gls, terms, project);
            rs.loglik = r.loglik;
            rs.iterations = r.iterations;
            rs.converged = r.converged;
        } catch (const Error& e) {
            rs.failed = true;
            rs.message = e.what();
        }
        restarts.push_back(rs);
        if (rs.failed) continue;
        // Best criterion wins; earlier restarts win ties.
        const bool better = !have_best || (r.converged && !best.converged) ||
                            (r.converged == best.converged && r.loglik > best.loglik + 1e-12);
        if (better) {
            best = std::move(r);
            best.best_restart = i;
            have_best = true;
        }
    }
    if (!have_best) throw NumericalError("every ACE restart failed: " + restarts.front().message);
    best.restarts = restarts;
    best.identified = id;
    if (!id.additive)
        best.warnings.push_back("the pedigree carries no information separating the additive genetic component; it is held at zero");
    if (!id.environment)
        best.warnings.push_back("the pedigree carries no information separating the common environment component; it is held at zero");
    detail::fill_ace_summary(best, data);
    const auto f = evaluator.forms(model.decode(best.rho));
    best.se_beta = (best.theta.sigma2 * f.A.ldlt().solve(Mat::Identity(data.p(), data.p()))).diagonal().cwiseSqrt();
    best.score_norm = evaluator.tau_score(best.theta.beta, best.theta.sigma2, best.rho, crit).cwiseProduct(mask).norm();
    return best;
}

/// The same restart schedule through the generic constrained path (Z = I
/// product forms); used to check the efficient path.
inline AceFitResult ace_fit_generic(const AceData& data, FitConfig cfg = {Method::FSFS, Criterion::ReML}) {
    const ModelData m = data.as_model_data();
    const ProductForms pf = product_forms(m);
    const AceModel model(data.dims, data.kin);
    AceFitResult best;
    bool have_best = false;
    for (const Vec& start : ace_restart_points()) {
        AceRestart rs;
        rs.tau_start = start;
        try {
            ConstrainedFitResult r = fit_constrained(pf, model, cfg, start);
            rs.loglik = r.loglik;
            rs.iterations = r.iterations;
            rs.converged = r.converged;
            const bool better = !have_best || (r.converged && !best.converged) ||
                                (r.converged == best.converged && r.loglik > best.loglik + 1e-12);
            if (better) {
                static_cast<ConstrainedFitResult&>(best) = std::move(r);
                best.best_restart = best.restarts.size();
                have_best = true;
            }
        } catch (const Error& e) {
            rs.failed = true;
            rs.message = e.what();
        }
        best.restarts.push_back(rs);
    }
    if (!have_best) throw NumericalError("every ACE restart failed");
    best.identified = ace_identifiability(data.kin);
    detail::fill_ace_summary(best, data);
    return best;
}

}  // namespace lmmfs
