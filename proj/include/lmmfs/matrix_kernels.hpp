#pragma once

// Dense linear-algebra primitives shared by every other module: the vec /
// vech family of reshapes, the duplication, elimination, commutation and
// symmetrizer matrices, the generalised vectorisation used to collapse
// per-level sums, and the non-negative-definite projection.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <stdexcept>
#include <vector>

#include "lmmfs/errors.hpp"

namespace lmmfs {

using Index = Eigen::Index;
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr double kSymmetryTolerance = 1e-10;

inline bool all_finite(const Eigen::Ref<const Mat>& a) {
    return a.allFinite();
}

inline void require_finite(const Eigen::Ref<const Mat>& a, const char* what) {
    if (!a.allFinite()) {
        throw NumericalError(std::string("non-finite entries in ") + what);
    }
}

// ---------------------------------------------------------------------------
// Permutations

/// A permutation stored as an index vector. `apply(x)[i] == x[indices()[i]]`,
/// i.e. the dense form P has P(i, indices()[i]) = 1.
class PermutationVector {
public:
    PermutationVector() = default;
    explicit PermutationVector(std::vector<Index> idx) : idx_(std::move(idx)) {}

    static PermutationVector identity(Index size) {
        std::vector<Index> idx(static_cast<std::size_t>(size));
        std::iota(idx.begin(), idx.end(), Index{0});
        return PermutationVector(std::move(idx));
    }

    Index size() const { return static_cast<Index>(idx_.size()); }
    const std::vector<Index>& indices() const { return idx_; }
    Index operator[](Index i) const { return idx_[static_cast<std::size_t>(i)]; }

    bool is_bijection() const {
        std::vector<char> seen(idx_.size(), 0);
        for (Index v : idx_) {
            if (v < 0 || v >= size() || seen[static_cast<std::size_t>(v)]) return false;
            seen[static_cast<std::size_t>(v)] = 1;
        }
        return true;
    }

    Vec apply(const Eigen::Ref<const Vec>& x) const {
        if (x.size() != size()) throw std::invalid_argument("permutation size mismatch");
        Vec y(x.size());
        for (Index i = 0; i < size(); ++i) y[i] = x[idx_[static_cast<std::size_t>(i)]];
        return y;
    }

    /// Row permutation P·M.
    Mat apply_rows(const Eigen::Ref<const Mat>& m) const {
        if (m.rows() != size()) throw std::invalid_argument("permutation size mismatch");
        Mat out(m.rows(), m.cols());
        for (Index i = 0; i < size(); ++i) out.row(i) = m.row(idx_[static_cast<std::size_t>(i)]);
        return out;
    }

    /// Column permutation M·P.
    Mat apply_cols(const Eigen::Ref<const Mat>& m) const {
        if (m.cols() != size()) throw std::invalid_argument("permutation size mismatch");
        Mat out(m.rows(), m.cols());
        for (Index i = 0; i < size(); ++i) out.col(idx_[static_cast<std::size_t>(i)]) = m.col(i);
        return out;
    }

    PermutationVector inverse() const {
        std::vector<Index> inv(idx_.size());
        for (std::size_t i = 0; i < idx_.size(); ++i) inv[static_cast<std::size_t>(idx_[i])] = static_cast<Index>(i);
        return PermutationVector(std::move(inv));
    }

    /// (I_left ⊗ P ⊗ I_right)
    PermutationVector kron_identity(Index left, Index right) const {
        std::vector<Index> out;
        out.reserve(static_cast<std::size_t>(left * size() * right));
        for (Index a = 0; a < left; ++a)
            for (Index b = 0; b < size(); ++b)
                for (Index c = 0; c < right; ++c)
                    out.push_back((a * size() + (*this)[b]) * right + c);
        return PermutationVector(std::move(out));
    }

    Mat to_dense() const {
        Mat p = Mat::Zero(size(), size());
        for (Index i = 0; i < size(); ++i) p(i, idx_[static_cast<std::size_t>(i)]) = 1.0;
        return p;
    }

private:
    std::vector<Index> idx_;
};

// ---------------------------------------------------------------------------
// vec / vech

inline Vec vec(const Eigen::Ref<const Mat>& a) {
    Vec v(a.size());
    Index pos = 0;
    for (Index j = 0; j < a.cols(); ++j)
        for (Index i = 0; i < a.rows(); ++i) v[pos++] = a(i, j);
    return v;
}

inline Mat unvec(const Eigen::Ref<const Vec>& v, Index rows, Index cols) {
    if (v.size() != rows * cols) throw std::invalid_argument("unvec: size mismatch");
    return Eigen::Map<const Mat>(v.data(), rows, cols);
}

inline Index vech_size(Index k) { return k * (k + 1) / 2; }

/// Inverse of vech_size; throws when `len` is not triangular.
inline Index vech_dim(Index len) {
    const auto k = static_cast<Index>(std::llround((std::sqrt(8.0 * static_cast<double>(len) + 1.0) - 1.0) / 2.0));
    if (vech_size(k) != len) throw std::invalid_argument("vector length is not triangular");
    return k;
}

inline Vec vech(const Eigen::Ref<const Mat>& a) {
    if (a.rows() != a.cols()) throw std::invalid_argument("vech requires a square matrix");
    const Index k = a.rows();
    Vec v(vech_size(k));
    Index pos = 0;
    for (Index j = 0; j < k; ++j)
        for (Index i = j; i < k; ++i) v[pos++] = a(i, j);
    return v;
}

/// Symmetric matrix whose lower triangle is `v`.
inline Mat unvech(const Eigen::Ref<const Vec>& v) {
    const Index k = vech_dim(v.size());
    Mat a(k, k);
    Index pos = 0;
    for (Index j = 0; j < k; ++j)
        for (Index i = j; i < k; ++i) {
            a(i, j) = v[pos];
            a(j, i) = v[pos];
            ++pos;
        }
    return a;
}

/// Lower-triangular matrix whose lower triangle is `v`.
inline Mat unvech_lower(const Eigen::Ref<const Vec>& v) {
    const Index k = vech_dim(v.size());
    Mat a = Mat::Zero(k, k);
    Index pos = 0;
    for (Index j = 0; j < k; ++j)
        for (Index i = j; i < k; ++i) a(i, j) = v[pos++];
    return a;
}

// ---------------------------------------------------------------------------
// Special matrices

/// D_k: vec(S) = D_k vech(S) for symmetric S.
inline Mat duplication_matrix(Index k) {
    if (k < 1) throw std::invalid_argument("duplication_matrix: k >= 1 required");
    Mat d = Mat::Zero(k * k, vech_size(k));
    Index col = 0;
    for (Index j = 0; j < k; ++j)
        for (Index i = j; i < k; ++i) {
            d(j * k + i, col) = 1.0;
            d(i * k + j, col) = 1.0;
            ++col;
        }
    return d;
}

/// L_k: vech(A) = L_k vec(A).
inline Mat elimination_matrix(Index k) {
    if (k < 1) throw std::invalid_argument("elimination_matrix: k >= 1 required");
    Mat l = Mat::Zero(vech_size(k), k * k);
    Index row = 0;
    for (Index j = 0; j < k; ++j)
        for (Index i = j; i < k; ++i) l(row++, j * k + i) = 1.0;
    return l;
}

/// K_{m,n}: vec(A) = K_{m,n} vec(A') for A of shape (m x n).
inline PermutationVector commutation_matrix(Index m, Index n) {
    if (m < 1 || n < 1) throw std::invalid_argument("commutation_matrix: m,n >= 1 required");
    std::vector<Index> idx(static_cast<std::size_t>(m * n));
    for (Index j = 0; j < n; ++j)
        for (Index i = 0; i < m; ++i) idx[static_cast<std::size_t>(j * m + i)] = i * n + j;
    return PermutationVector(std::move(idx));
}

/// Dense N_k = (I + K_{k,k}) / 2. Internal code uses the permutation helpers below.
inline Mat symmetrizer(Index k) {
    if (k < 1) throw std::invalid_argument("symmetrizer: k >= 1 required");
    return 0.5 * (Mat::Identity(k * k, k * k) + commutation_matrix(k, k).to_dense());
}

/// M·N_k without forming N_k.
inline Mat right_symmetrize(const Eigen::Ref<const Mat>& m, Index k) {
    return 0.5 * (m + commutation_matrix(k, k).apply_cols(m));
}

/// N_k·M without forming N_k.
inline Mat left_symmetrize(const Eigen::Ref<const Mat>& m, Index k) {
    return 0.5 * (m + commutation_matrix(k, k).apply_rows(m));
}

inline Mat kron(const Eigen::Ref<const Mat>& a, const Eigen::Ref<const Mat>& b) {
    Mat out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

// ---------------------------------------------------------------------------
// Generalised vectorisation and block sums

/// vec_m: splits M into cols/m blocks of width m and stacks them vertically.
inline Mat vec_m(const Eigen::Ref<const Mat>& m, Index width) {
    if (width < 1 || m.cols() % width != 0)
        throw std::invalid_argument("vec_m: column count not divisible by block width");
    const Index blocks = m.cols() / width;
    Mat out(m.rows() * blocks, width);
    for (Index b = 0; b < blocks; ++b) out.middleRows(b * m.rows(), m.rows()) = m.middleCols(b * width, width);
    return out;
}

/// Σ_i A_i B_i' where A and B are vertical stacks of (block_rows x c) blocks,
/// evaluated as vec_m(A')' vec_m(B') with a single matrix product.
inline Mat sum_block_outer(const Eigen::Ref<const Mat>& a, const Eigen::Ref<const Mat>& b, Index block_rows) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("sum_block_outer: shape mismatch");
    const Mat at = a.transpose();
    const Mat bt = b.transpose();
    return vec_m(at, block_rows).transpose() * vec_m(bt, block_rows);
}

/// Row-stacked vec of every (n1 x n2) block of M, blocks taken row by row.
inline Mat tilde_transform(const Eigen::Ref<const Mat>& m, Index n1, Index n2) {
    const Index c1 = m.rows() / n1;
    const Index c2 = m.cols() / n2;
    Mat out(c1 * c2, n1 * n2);
    for (Index i = 0; i < c1; ++i)
        for (Index j = 0; j < c2; ++j) {
            const Index row = i * c2 + j;
            for (Index cc = 0; cc < n2; ++cc)
                for (Index rr = 0; rr < n1; ++rr) out(row, cc * n1 + rr) = m(i * n1 + rr, j * n2 + cc);
        }
    return out;
}

/// Σ_{i,j} G_{ij} ⊗ H_{ij} for identically partitioned G and H.
///
/// Uses vec(Σ G_ij ⊗ H_ij) = (I_{n2} ⊗ K_{n1,n2} ⊗ I_{n1}) vec(H̃'G̃): one
/// matrix product plus an index permutation, independent of the block count.
inline Mat kron_block_sum(const Eigen::Ref<const Mat>& g, const Eigen::Ref<const Mat>& h, Index n1, Index n2) {
    if (n1 < 1 || n2 < 1 || g.rows() != h.rows() || g.cols() != h.cols() || g.rows() % n1 != 0 ||
        g.cols() % n2 != 0) {
        throw std::invalid_argument("kron_block_sum: partition mismatch");
    }
    const Mat gt = tilde_transform(g, n1, n2);
    const Mat ht = tilde_transform(h, n1, n2);
    const Mat prod = ht.transpose() * gt;
    const PermutationVector perm = commutation_matrix(n1, n2).kron_identity(n2, n1);
    const Vec v = perm.apply(Eigen::Map<const Vec>(prod.data(), prod.size()));
    return unvec(v, n1 * n1, n2 * n2);
}

/// Σ_j M_{(j,j)} over the diagonal (b x b) blocks of a square matrix.
inline Mat sum_diagonal_blocks(const Eigen::Ref<const Mat>& m, Index b) {
    Mat acc = Mat::Zero(b, b);
    for (Index j = 0; j + b <= m.rows(); j += b) acc += m.block(j, j, b, b);
    return acc;
}

// ---------------------------------------------------------------------------
// Symmetric projections and inverses

inline double max_asymmetry(const Eigen::Ref<const Mat>& s) {
    return (s - s.transpose()).cwiseAbs().maxCoeff();
}

inline Mat symmetrize(const Eigen::Ref<const Mat>& s) {
    return 0.5 * (s + s.transpose());
}

/// Projects onto the non-negative-definite cone by clamping eigenvalues at 0.
inline Mat project_psd(const Eigen::Ref<const Mat>& s) {
    if (s.rows() != s.cols()) throw std::invalid_argument("project_psd requires a square matrix");
    require_finite(s, "project_psd input");
    const Mat sym = max_asymmetry(s) > kSymmetryTolerance ? symmetrize(s) : Mat(s);
    Eigen::SelfAdjointEigenSolver<Mat> eig(sym);
    if (eig.info() != Eigen::Success) throw NumericalError("eigendecomposition failed in project_psd");
    const Vec clamped = eig.eigenvalues().cwiseMax(0.0);
    Mat out = eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
    return symmetrize(out);
}

inline double min_eigenvalue(const Eigen::Ref<const Mat>& s) {
    Eigen::SelfAdjointEigenSolver<Mat> eig(symmetrize(s), Eigen::EigenvaluesOnly);
    return eig.eigenvalues().minCoeff();
}

/// Moore-Penrose inverse via SVD with the usual max(m,n)·eps·σ_max cut-off.
inline Mat pseudo_inverse(const Eigen::Ref<const Mat>& a) {
    if (a.size() == 0) return Mat::Zero(a.cols(), a.rows());
    Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vec& sv = svd.singularValues();
    const double cutoff =
        static_cast<double>(std::max(a.rows(), a.cols())) * std::numeric_limits<double>::epsilon() *
        (sv.size() > 0 ? sv[0] : 0.0);
    Vec inv = Vec::Zero(sv.size());
    for (Index i = 0; i < sv.size(); ++i)
        if (sv[i] > cutoff) inv[i] = 1.0 / sv[i];
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Solves a symmetric system, falling back to the pseudo-inverse when the
/// matrix is singular. `singular` reports whether the fallback was used.
inline Vec solve_symmetric(const Eigen::Ref<const Mat>& a, const Eigen::Ref<const Vec>& b, bool* singular = nullptr) {
    Eigen::LDLT<Mat> ldlt(a);
    bool ok = ldlt.info() == Eigen::Success && ldlt.isPositive();
    if (ok) {
        const Vec d = ldlt.vectorD();
        const double dmax = d.cwiseAbs().maxCoeff();
        ok = dmax > 0 && d.cwiseAbs().minCoeff() > 1e-13 * dmax;
    }
    if (singular) *singular = !ok;
    if (ok) return ldlt.solve(b);
    return pseudo_inverse(a) * b;
}

}  // namespace lmmfs
