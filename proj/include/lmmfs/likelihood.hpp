#pragma once

// Log-likelihood, restricted log-likelihood, score vectors and Fisher
// Information matrices for the half (vech D_k), full (vec D_k) and Cholesky
// (vech Λ_k) parameterizations. Every quantity is evaluated from the product
// forms; nothing here touches an n-length vector.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "lmmfs/errors.hpp"
#include "lmmfs/matrix_kernels.hpp"
#include "lmmfs/model.hpp"

namespace lmmfs {

enum class Repr { Half, Full, Cholesky };
enum class Criterion { ML, ReML };

inline const char* to_string(Repr r) {
    switch (r) {
        case Repr::Half: return "half";
        case Repr::Full: return "full";
        case Repr::Cholesky: return "cholesky";
    }
    return "?";
}

inline const char* to_string(Criterion c) { return c == Criterion::ML ? "ML" : "ReML"; }

/// Lower-triangular Λ with ΛΛ' = D for symmetric positive semi-definite D.
/// Columns whose pivot vanishes are set to zero, then any zero diagonal entry
/// is replaced by `diagonal_floor`.
inline Mat semidefinite_cholesky(const Mat& d, double diagonal_floor = 0.0) {
    const Index k = d.rows();
    Mat lam = Mat::Zero(k, k);
    const double tol = 1e-12 * std::max(1.0, d.diagonal().cwiseAbs().maxCoeff());
    for (Index j = 0; j < k; ++j) {
        double piv = d(j, j) - lam.row(j).head(j).squaredNorm();
        if (piv > tol) {
            const double s = std::sqrt(piv);
            lam(j, j) = s;
            for (Index i = j + 1; i < k; ++i) lam(i, j) = (d(i, j) - lam.row(i).head(j).dot(lam.row(j).head(j))) / s;
        }
    }
    for (Index j = 0; j < k; ++j)
        if (lam(j, j) == 0.0) lam(j, j) = diagonal_floor;
    return lam;
}

/// β, σ² and one covariance block per factor, in one of three representations.
struct ParamState {
    Repr repr = Repr::Half;
    Vec beta;
    double sigma2 = 1.0;
    std::vector<Vec> blocks;

    static ParamState from_covariances(const Vec& beta, double sigma2, const std::vector<Mat>& D,
                                       Repr repr = Repr::Half, double chol_floor = 0.0) {
        ParamState s;
        s.repr = repr;
        s.beta = beta;
        s.sigma2 = sigma2;
        for (const Mat& d : D) {
            switch (repr) {
                case Repr::Half: s.blocks.push_back(vech(d)); break;
                case Repr::Full: s.blocks.push_back(vec(d)); break;
                case Repr::Cholesky: s.blocks.push_back(vech(semidefinite_cholesky(symmetrize(d), chol_floor))); break;
            }
        }
        return s;
    }

    Index r() const { return static_cast<Index>(blocks.size()); }

    Index block_dim(Index k) const {
        const Vec& b = blocks[static_cast<std::size_t>(k)];
        if (repr == Repr::Full) {
            const auto q = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(b.size()))));
            if (q * q != b.size()) throw std::invalid_argument("full block length is not a square");
            return q;
        }
        return vech_dim(b.size());
    }

    Mat lambda(Index k) const {
        if (repr != Repr::Cholesky) throw std::logic_error("lambda() requires the Cholesky representation");
        return unvech_lower(blocks[static_cast<std::size_t>(k)]);
    }

    Mat covariance(Index k) const {
        const Vec& b = blocks[static_cast<std::size_t>(k)];
        switch (repr) {
            case Repr::Half: return unvech(b);
            case Repr::Full: {
                const Index q = block_dim(k);
                return unvec(b, q, q);
            }
            case Repr::Cholesky: {
                const Mat l = unvech_lower(b);
                return l * l.transpose();
            }
        }
        return {};
    }

    std::vector<Mat> covariances() const {
        std::vector<Mat> out;
        for (Index k = 0; k < r(); ++k) out.push_back(covariance(k));
        return out;
    }

    ParamState to(Repr target, double chol_floor = 0.0) const {
        if (target == repr) return *this;
        std::vector<Mat> d = covariances();
        for (Mat& m : d) m = symmetrize(m);
        return from_covariances(beta, sigma2, d, target, chol_floor);
    }

    Index size() const {
        Index s = beta.size() + 1;
        for (const Vec& b : blocks) s += b.size();
        return s;
    }

    Vec pack() const {
        Vec v(size());
        v.head(beta.size()) = beta;
        v[beta.size()] = sigma2;
        Index pos = beta.size() + 1;
        for (const Vec& b : blocks) {
            v.segment(pos, b.size()) = b;
            pos += b.size();
        }
        return v;
    }

    /// Same layout and representation as `*this`, values taken from `v`.
    ParamState unpacked(const Vec& v) const {
        if (v.size() != size()) throw std::invalid_argument("parameter vector length mismatch");
        ParamState s = *this;
        s.beta = v.head(beta.size());
        s.sigma2 = v[beta.size()];
        Index pos = beta.size() + 1;
        for (Vec& b : s.blocks) {
            b = v.segment(pos, b.size());
            pos += b.size();
        }
        return s;
    }
};

// ---------------------------------------------------------------------------
// Evaluation cache

/// Every V^{-1}-weighted quantity needed by scores and information matrices
/// at one parameter value.
struct ModelEval {
    ModelEval(const ProductForms& pf_, const Vec& beta_, double sigma2_, const std::vector<Mat>& D_)
        : pf(&pf_), beta(beta_), sigma2(sigma2_), D(D_), vf(pf_, D_) {
        if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) throw NumericalError("sigma^2 must be positive and finite");
        A = vf.XtViX();
        lu_A = Eigen::PartialPivLU<Mat>(A);
        if (A.rows() > 0 && !(lu_A.rcond() > 1e-14)) throw NumericalError("X'V^{-1}X is singular");
        Ainv = A.rows() > 0 ? Mat(lu_A.inverse()) : Mat(0, 0);
        ZtViX = vf.ZtViX();
        e_Vi_e = vf.eVie(beta);
        w = vf.ZtViY() - ZtViX * beta;
    }

    ModelEval(const ProductForms& pf_, const ParamState& s) : ModelEval(pf_, s.beta, s.sigma2, s.covariances()) {}

    /// Z'V^{-1}Z, computed on first use.
    const Mat& ZtViZ() const {
        if (ZtViZ_.size() == 0 && pf->q() > 0) ZtViZ_ = vf.ZtViZ();
        return ZtViZ_;
    }

    double log_det_A() const {
        double s = 0.0;
        const Mat& lu = lu_A.matrixLU();
        for (Index i = 0; i < lu.rows(); ++i) s += std::log(std::abs(lu(i, i)));
        return s;
    }

    const ProductForms* pf;
    Vec beta;
    double sigma2;
    std::vector<Mat> D;
    VinvForms vf;
    Mat A;
    Eigen::PartialPivLU<Mat> lu_A;
    Mat Ainv;
    Mat ZtViX;
    double e_Vi_e = 0.0;
    Vec w;

private:
    mutable Mat ZtViZ_;
};

// ---------------------------------------------------------------------------
// Likelihoods

inline double log_likelihood(const ModelEval& ev) {
    const double n = static_cast<double>(ev.pf->n);
    return -0.5 * (n * std::log(ev.sigma2) + ev.e_Vi_e / ev.sigma2 + ev.vf.log_det_V());
}

inline double reml_log_likelihood(const ModelEval& ev) {
    const double p = static_cast<double>(ev.pf->p());
    return log_likelihood(ev) - 0.5 * (-p * std::log(ev.sigma2) + ev.log_det_A());
}

inline double criterion_value(const ModelEval& ev, Criterion c) {
    return c == Criterion::ML ? log_likelihood(ev) : reml_log_likelihood(ev);
}

/// Criterion value without the score-only quantities ModelEval prepares.
inline double criterion_value(const ProductForms& pf, const ParamState& s, Criterion c) {
    if (!(s.sigma2 > 0.0) || !std::isfinite(s.sigma2)) throw NumericalError("sigma^2 must be positive and finite");
    const VinvForms vf(pf, s.covariances());
    const double n = static_cast<double>(pf.n);
    const double l = -0.5 * (n * std::log(s.sigma2) + vf.eVie(s.beta) / s.sigma2 + vf.log_det_V());
    if (c == Criterion::ML || pf.p() == 0) return l;
    const Eigen::PartialPivLU<Mat> lu(vf.XtViX());
    if (!(lu.rcond() > 1e-14)) throw NumericalError("X'V^{-1}X is singular");
    double log_det_a = 0.0;
    for (Index i = 0; i < lu.rows(); ++i) log_det_a += std::log(std::abs(lu.matrixLU()(i, i)));
    return l - 0.5 * (-static_cast<double>(pf.p()) * std::log(s.sigma2) + log_det_a);
}

inline double log_likelihood(const ProductForms& pf, const ParamState& s) {
    return criterion_value(pf, s, Criterion::ML);
}

inline double reml_log_likelihood(const ProductForms& pf, const ParamState& s) {
    return criterion_value(pf, s, Criterion::ReML);
}

// ---------------------------------------------------------------------------
// Scores

/// Σ_j over levels of factor k of the diagonal (q_k × q_k) blocks of a q×q matrix.
inline Mat factor_diagonal_sum(const Mat& m, const FactorDims& dims, Index k) {
    return sum_diagonal_blocks(factor_block(m, dims, k, k), dims.qk(k));
}

/// ∂l/∂D_k as a q_k × q_k matrix (symmetric at symmetric D).
inline Mat factor_gradient(const ModelEval& ev, Index k, Criterion crit) {
    const FactorDims& dims = ev.pf->dims;
    const Index qk = dims.qk(k);
    const Mat wk = ev.w.segment(dims.offset(k), dims.width(k));
    Mat g = sum_block_outer(wk, wk, qk) / ev.sigma2 - factor_diagonal_sum(ev.ZtViZ(), dims, k);
    if (crit == Criterion::ReML) {
        const Mat hk = factor_rows(ev.ZtViX, dims, k);
        g += sum_block_outer(hk * ev.Ainv, hk, qk);
    }
    return 0.5 * g;
}

inline Vec score_beta(const ModelEval& ev) { return (ev.vf.XtViY() - ev.A * ev.beta) / ev.sigma2; }

inline double score_sigma2(const ModelEval& ev, Criterion crit) {
    const double n = static_cast<double>(ev.pf->n);
    double s = -0.5 * n / ev.sigma2 + 0.5 * ev.e_Vi_e / (ev.sigma2 * ev.sigma2);
    if (crit == Criterion::ReML) s += 0.5 * static_cast<double>(ev.pf->p()) / ev.sigma2;
    return s;
}

/// ∂vech(ΛΛ')/∂vech(Λ) laid out with rows indexed by vech(Λ) and columns by vech(D).
inline Mat chol_jacobian(const Mat& lambda) {
    const Index q = lambda.rows();
    if (lambda.cols() != q) throw std::invalid_argument("chol_jacobian requires a square factor");
    const Mat lk = elimination_matrix(q);
    const Mat a = kron(lambda.transpose(), Mat::Identity(q, q));
    const Mat a_ik = a + commutation_matrix(q, q).apply_cols(a);
    return lk * a_ik * lk.transpose();
}

/// Score vector laid out like `s.pack()`.
inline Vec score(const ModelEval& ev, const ParamState& s, Criterion crit) {
    Vec out(s.size());
    const Index p = s.beta.size();
    out.head(p) = score_beta(ev);
    out[p] = score_sigma2(ev, crit);
    Index pos = p + 1;
    for (Index k = 0; k < s.r(); ++k) {
        const Mat g = factor_gradient(ev, k, crit);
        const Index qk = g.rows();
        Vec block;
        switch (s.repr) {
            case Repr::Full: block = vec(g); break;
            case Repr::Half: block = duplication_matrix(qk).transpose() * vec(g); break;
            case Repr::Cholesky:
                block = chol_jacobian(s.lambda(k)) * (duplication_matrix(qk).transpose() * vec(g));
                break;
        }
        out.segment(pos, block.size()) = block;
        pos += block.size();
    }
    return out;
}

inline Vec score(const ProductForms& pf, const ParamState& s, Criterion crit) {
    return score(ModelEval(pf, s), s, crit);
}

// ---------------------------------------------------------------------------
// Fisher Information

enum class InfoKind { FisherHalf, FisherFull, FFull, FisherChol };

struct InfoMatrix {
    Mat m;
    InfoKind kind = InfoKind::FisherHalf;
};

/// Information over (σ², block_1, …, block_r) built from a q×q matrix M playing
/// the role of Z'V^{-1}Z, with I_{σ²} = n_eff/(2σ⁴).
///
/// `kind` selects the block coordinates: vech (FisherHalf), vec with the
/// symmetrizer applied (FisherFull), or vec without it (FFull). FisherChol is
/// not handled here.
inline Mat variance_information(const Mat& M, const FactorDims& dims, double sigma2, double n_eff, InfoKind kind) {
    const bool half = kind == InfoKind::FisherHalf;
    std::vector<Index> len, start;
    Index total = 1;
    for (Index k = 0; k < dims.r(); ++k) {
        start.push_back(total);
        len.push_back(half ? vech_size(dims.qk(k)) : dims.qk(k) * dims.qk(k));
        total += len.back();
    }
    std::vector<Mat> dup;
    for (Index k = 0; k < dims.r(); ++k) dup.push_back(duplication_matrix(dims.qk(k)));

    Mat info = Mat::Zero(total, total);
    info(0, 0) = 0.5 * n_eff / (sigma2 * sigma2);
    for (Index k = 0; k < dims.r(); ++k) {
        const auto ks = static_cast<std::size_t>(k);
        const Vec diag_sum = vec(sum_diagonal_blocks(factor_block(M, dims, k, k), dims.qk(k)));
        Vec row = 0.5 / sigma2 * diag_sum;
        if (half) row = dup[ks].transpose() * row;
        info.block(0, start[ks], 1, len[ks]) = row.transpose();
        info.block(start[ks], 0, len[ks], 1) = row;
        for (Index k2 = k; k2 < dims.r(); ++k2) {
            const auto k2s = static_cast<std::size_t>(k2);
            const Mat g = factor_block(M, dims, k, k2);
            Mat kbs = 0.5 * kron_block_sum(g, g, dims.qk(k), dims.qk(k2));
            if (half) kbs = dup[ks].transpose() * kbs * dup[k2s];
            if (kind == InfoKind::FisherFull) kbs = right_symmetrize(kbs, dims.qk(k2));
            info.block(start[ks], start[k2s], len[ks], len[k2s]) = kbs;
            if (k2 != k) info.block(start[k2s], start[ks], len[k2s], len[ks]) = kbs.transpose();
        }
    }
    return info;
}

/// Fisher Information (or the F matrix) laid out like `s.pack()`.
/// The same matrix serves ML and ReML.
inline InfoMatrix fisher_info(const ModelEval& ev, const ParamState& s, InfoKind kind) {
    const Index p = s.beta.size();
    const FactorDims& dims = ev.pf->dims;
    const InfoKind base = kind == InfoKind::FisherChol ? InfoKind::FisherHalf : kind;
    Mat var = variance_information(ev.ZtViZ(), dims, ev.sigma2, static_cast<double>(ev.pf->n), base);
    if (kind == InfoKind::FisherChol) {
        Mat j = Mat::Identity(var.rows(), var.cols());
        Index pos = 1;
        for (Index k = 0; k < dims.r(); ++k) {
            const Index len = vech_size(dims.qk(k));
            j.block(pos, pos, len, len) = chol_jacobian(s.lambda(k));
            pos += len;
        }
        var = j * var * j.transpose();
    }
    InfoMatrix out;
    out.kind = kind;
    out.m = Mat::Zero(p + var.rows(), p + var.cols());
    out.m.topLeftCorner(p, p) = ev.A / ev.sigma2;
    out.m.bottomRightCorner(var.rows(), var.cols()) = var;
    return out;
}

inline InfoMatrix fisher_info(const ProductForms& pf, const ParamState& s, InfoKind kind) {
    return fisher_info(ModelEval(pf, s), s, kind);
}

/// Block-diagonal Ñ: identity on β and σ², N_{q_k} on each vec(D_k) block.
inline Mat symmetrizer_tilde(Index p, const FactorDims& dims) {
    Index total = p + 1 + dims.vec_total();
    Mat n = Mat::Identity(total, total);
    Index pos = p + 1;
    for (Index k = 0; k < dims.r(); ++k) {
        const Index len = dims.qk(k) * dims.qk(k);
        n.block(pos, pos, len, len) = symmetrizer(dims.qk(k));
        pos += len;
    }
    return n;
}

}  // namespace lmmfs
