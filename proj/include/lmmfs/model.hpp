#pragma once

// Crossed-factor model representation: factor layout, design matrices, the
// block-diagonal random-effects covariance, the n-free product forms and the
// Woodbury-style evaluation of every V^{-1}-weighted cross product.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <locale>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmmfs/errors.hpp"
#include "lmmfs/matrix_kernels.hpp"

namespace lmmfs {

/// Per-factor dimensions: q_k random effects and l_k levels for each factor.
/// Random-design columns are ordered factor, then level, then effect.
struct FactorDims {
    std::vector<Index> q;
    std::vector<Index> l;

    Index r() const { return static_cast<Index>(q.size()); }
    Index width(Index k) const { return q[static_cast<std::size_t>(k)] * l[static_cast<std::size_t>(k)]; }
    Index qk(Index k) const { return q[static_cast<std::size_t>(k)]; }
    Index lk(Index k) const { return l[static_cast<std::size_t>(k)]; }

    Index offset(Index k) const {
        Index off = 0;
        for (Index i = 0; i < k; ++i) off += width(i);
        return off;
    }

    /// First column of level j of factor k.
    Index column(Index k, Index j) const { return offset(k) + j * qk(k); }

    Index total() const { return offset(r()); }

    /// Σ_k q_k², the length of the stacked vec(D_k).
    Index vec_total() const {
        Index t = 0;
        for (Index k = 0; k < r(); ++k) t += qk(k) * qk(k);
        return t;
    }

    Index vech_total() const {
        Index t = 0;
        for (Index k = 0; k < r(); ++k) t += vech_size(qk(k));
        return t;
    }

    bool operator==(const FactorDims&) const = default;
};

struct FactorStructure {
    FactorDims dims;
    /// level_of[k][i]: zero-based level of observation i for factor k.
    std::vector<std::vector<Index>> level_of;
};

/// Raw tabular data: named string columns of equal length.
class ObservationTable {
public:
    ObservationTable() = default;
    ObservationTable(std::vector<std::string> header, std::vector<std::vector<std::string>> columns)
        : header_(std::move(header)), columns_(std::move(columns)) {
        if (header_.size() != columns_.size()) throw ParseError("header/column count mismatch");
        for (const auto& c : columns_)
            if (c.size() != columns_.front().size()) throw ParseError("ragged table columns");
    }

    Index rows() const { return columns_.empty() ? 0 : static_cast<Index>(columns_.front().size()); }
    const std::vector<std::string>& header() const { return header_; }

    bool has(const std::string& name) const {
        return std::find(header_.begin(), header_.end(), name) != header_.end();
    }

    const std::vector<std::string>& labels(const std::string& name) const {
        const auto it = std::find(header_.begin(), header_.end(), name);
        if (it == header_.end()) throw ParseError("unknown column '" + name + "'");
        return columns_[static_cast<std::size_t>(it - header_.begin())];
    }

    Vec numeric(const std::string& name) const {
        const auto& cells = labels(name);
        Vec v(static_cast<Index>(cells.size()));
        for (std::size_t i = 0; i < cells.size(); ++i) {
            std::istringstream in(cells[i]);
            in.imbue(std::locale::classic());
            double x = 0.0;
            in >> x;
            if (in.fail() || !in.eof() || !std::isfinite(x)) {
                throw ParseError("column '" + name + "' row " + std::to_string(i + 2) + ": '" + cells[i] +
                                 "' is not a finite number");
            }
            v[static_cast<Index>(i)] = x;
        }
        return v;
    }

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> columns_;
};

struct RandomTermSpec {
    std::string factor;
    std::vector<std::string> covariates;
    bool intercept = true;
    std::string structure = "unstructured";
};

struct DesignSpec {
    std::string response;
    std::vector<std::string> fixed;
    bool intercept = true;
    std::vector<RandomTermSpec> random;
};

struct ModelData {
    Vec y;
    Mat X;
    Mat Z;
    FactorStructure fs;
    std::vector<std::string> fixed_names;
    std::vector<std::string> factor_names;
    std::vector<std::vector<std::string>> effect_names;
    std::vector<std::vector<std::string>> level_labels;
    std::vector<std::string> warnings;

    Index n() const { return y.size(); }
    Index p() const { return X.cols(); }
};

/// Throws DegenerateDataError unless X has full column rank
/// (rank-revealing QR with threshold 1e-8·‖X‖).
inline void require_full_rank(const Mat& X) {
    if (X.cols() == 0) return;
    if (X.rows() < X.cols()) throw DegenerateDataError("fixed design has fewer rows than columns");
    Eigen::ColPivHouseholderQR<Mat> qr(X);
    const double norm = X.norm();
    Index rank = 0;
    for (Index i = 0; i < X.cols(); ++i)
        if (std::abs(qr.matrixR()(i, i)) > 1e-8 * norm) ++rank;
    if (rank < X.cols()) {
        throw DegenerateDataError("fixed design is rank deficient (rank " + std::to_string(rank) + " < p = " +
                                  std::to_string(X.cols()) + ")");
    }
}

/// Places each observation's per-factor covariates into the columns of its level.
inline Mat build_random_design(const FactorStructure& fs, const std::vector<Mat>& covariates) {
    const FactorDims& d = fs.dims;
    if (static_cast<Index>(covariates.size()) != d.r() || static_cast<Index>(fs.level_of.size()) != d.r())
        throw std::invalid_argument("factor count mismatch");
    const Index n = d.r() > 0 ? static_cast<Index>(fs.level_of[0].size()) : 0;
    Mat z = Mat::Zero(n, d.total());
    for (Index k = 0; k < d.r(); ++k) {
        const Mat& c = covariates[static_cast<std::size_t>(k)];
        if (c.rows() != n || c.cols() != d.qk(k)) throw std::invalid_argument("covariate block shape mismatch");
        const auto& lev = fs.level_of[static_cast<std::size_t>(k)];
        for (Index i = 0; i < n; ++i) {
            const Index j = lev[static_cast<std::size_t>(i)];
            if (j < 0 || j >= d.lk(k)) throw std::invalid_argument("level index out of range");
            z.block(i, d.column(k, j), 1, d.qk(k)) = c.row(i);
        }
    }
    return z;
}

/// Builds Y, X and Z from a table. Levels are numbered by first appearance.
inline ModelData build_design(const ObservationTable& raw, const DesignSpec& spec) {
    ModelData m;
    const Index n = raw.rows();
    if (n == 0) throw ParseError("data table has no rows");
    m.y = raw.numeric(spec.response);

    std::vector<Vec> fixed_cols;
    if (spec.intercept) {
        fixed_cols.push_back(Vec::Ones(n));
        m.fixed_names.push_back("(Intercept)");
    }
    for (const auto& name : spec.fixed) {
        fixed_cols.push_back(raw.numeric(name));
        m.fixed_names.push_back(name);
    }
    m.X.resize(n, static_cast<Index>(fixed_cols.size()));
    for (std::size_t j = 0; j < fixed_cols.size(); ++j) m.X.col(static_cast<Index>(j)) = fixed_cols[j];
    require_full_rank(m.X);

    std::vector<Mat> covariates;
    for (const auto& term : spec.random) {
        const auto& labels = raw.labels(term.factor);
        std::unordered_map<std::string, Index> index;
        std::vector<std::string> order;
        std::vector<Index> level_of(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            const auto& lab = labels[static_cast<std::size_t>(i)];
            auto [it, inserted] = index.emplace(lab, static_cast<Index>(order.size()));
            if (inserted) order.push_back(lab);
            level_of[static_cast<std::size_t>(i)] = it->second;
        }
        std::vector<std::string> names;
        std::vector<Vec> cols;
        if (term.intercept) {
            cols.push_back(Vec::Ones(n));
            names.push_back("(Intercept)");
        }
        for (const auto& c : term.covariates) {
            cols.push_back(raw.numeric(c));
            names.push_back(c);
        }
        if (cols.empty()) throw ParseError("random term for '" + term.factor + "' has no effects");
        Mat c(n, static_cast<Index>(cols.size()));
        for (std::size_t j = 0; j < cols.size(); ++j) c.col(static_cast<Index>(j)) = cols[j];
        if (order.size() == 1) m.warnings.push_back("factor '" + term.factor + "' has a single level");

        m.fs.dims.q.push_back(c.cols());
        m.fs.dims.l.push_back(static_cast<Index>(order.size()));
        m.fs.level_of.push_back(std::move(level_of));
        m.factor_names.push_back(term.factor);
        m.effect_names.push_back(std::move(names));
        m.level_labels.push_back(std::move(order));
        covariates.push_back(std::move(c));
    }
    m.Z = build_random_design(m.fs, covariates);
    return m;
}

/// The six cross products P=X'X, Q=X'Y, R=X'Z, S=Y'Y, T=Z'Y, U=Z'Z.
/// T is stored as a column (Z'Y) rather than the row Y'Z.
struct ProductForms {
    Mat P;
    Vec Q;
    Mat R;
    double S = 0.0;
    Vec T;
    Mat U;
    Index n = 0;
    FactorDims dims;

    Index p() const { return P.rows(); }
    Index q() const { return U.rows(); }
};

inline ProductForms product_forms(const Vec& y, const Mat& X, const Mat& Z, const FactorDims& dims) {
    if (Z.cols() != dims.total()) throw std::invalid_argument("Z width does not match factor layout");
    ProductForms pf;
    pf.P = X.transpose() * X;
    pf.Q = X.transpose() * y;
    pf.R = X.transpose() * Z;
    pf.S = y.squaredNorm();
    pf.T = Z.transpose() * y;
    pf.U = Z.transpose() * Z;
    pf.n = y.size();
    pf.dims = dims;
    return pf;
}

inline ProductForms product_forms(const ModelData& data) {
    return product_forms(data.y, data.X, data.Z, data.fs.dims);
}

/// D = ⊕_k (I_{l_k} ⊗ D_k).
inline Mat assemble_D(const std::vector<Mat>& blocks, const FactorDims& dims) {
    if (static_cast<Index>(blocks.size()) != dims.r()) throw std::invalid_argument("assemble_D: factor count mismatch");
    Mat d = Mat::Zero(dims.total(), dims.total());
    for (Index k = 0; k < dims.r(); ++k) {
        const Mat& b = blocks[static_cast<std::size_t>(k)];
        if (b.rows() != dims.qk(k) || b.cols() != dims.qk(k)) throw std::invalid_argument("assemble_D: block shape");
        for (Index j = 0; j < dims.lk(k); ++j) d.block(dims.column(k, j), dims.column(k, j), dims.qk(k), dims.qk(k)) = b;
    }
    return d;
}

/// Rows of the factor-k partition of a q-row matrix.
inline auto factor_rows(const Mat& m, const FactorDims& dims, Index k) {
    return m.middleRows(dims.offset(k), dims.width(k));
}

inline auto factor_block(const Mat& m, const FactorDims& dims, Index k1, Index k2) {
    return m.block(dims.offset(k1), dims.offset(k2), dims.width(k1), dims.width(k2));
}

/// The (k1,j1),(k2,j2) sub-block of a q×q matrix.
inline auto level_block(const Mat& m, const FactorDims& dims, Index k1, Index j1, Index k2, Index j2) {
    return m.block(dims.column(k1, j1), dims.column(k2, j2), dims.qk(k1), dims.qk(k2));
}

/// M·R for block-diagonal R = ⊕_k (I_{l_k} ⊗ R_k).
inline Mat times_block_diagonal(const Mat& m, const std::vector<Mat>& roots, const FactorDims& dims) {
    Mat out(m.rows(), m.cols());
    for (Index k = 0; k < dims.r(); ++k) {
        const Mat& rk = roots[static_cast<std::size_t>(k)];
        for (Index j = 0; j < dims.lk(k); ++j) {
            const Index c = dims.column(k, j);
            out.middleCols(c, dims.qk(k)).noalias() = m.middleCols(c, dims.qk(k)) * rk;
        }
    }
    return out;
}

/// R'·M for block-diagonal R = ⊕_k (I_{l_k} ⊗ R_k).
inline Mat transpose_times_block_diagonal(const std::vector<Mat>& roots, const Mat& m, const FactorDims& dims) {
    Mat out(m.rows(), m.cols());
    for (Index k = 0; k < dims.r(); ++k) {
        const Mat& rk = roots[static_cast<std::size_t>(k)];
        for (Index j = 0; j < dims.lk(k); ++j) {
            const Index c = dims.column(k, j);
            out.middleRows(c, dims.qk(k)).noalias() = rk.transpose() * m.middleRows(c, dims.qk(k));
        }
    }
    return out;
}

/// Cross products weighted by V^{-1} = (I + Z D Z')^{-1}, evaluated from the
/// product forms only.
///
/// When every D_k is symmetric non-negative definite, D = RR' with R block
/// diagonal and V^{-1} = I − ZR C^{-1} R'Z' for C = I + R'UR, so
/// A'V^{-1}B = A'B − G_A'G_B with G_B = L^{-1}R'Z'B and C = LL'. Otherwise
/// (non-symmetric or indefinite D, as produced by finite differences or some
/// constrained structures) the general form A'V^{-1}B = A'B − (A'Z) W (Z'B)
/// with W = (I_q + DU)^{-1} D is used. In both cases log|V| = log|I_q + DU|.
class VinvForms {
public:
    VinvForms(const ProductForms& pf, const std::vector<Mat>& blocks) : pf_(&pf) {
        const FactorDims& dims = pf.dims;
        if (static_cast<Index>(blocks.size()) != dims.r()) throw std::invalid_argument("factor count mismatch");
        for (const Mat& b : blocks) require_finite(b, "random-effects covariance");
        if (!try_root_path(blocks)) general_path(blocks);
    }

    const ProductForms& pf() const { return *pf_; }
    double log_det_V() const { return log_det_V_; }

    /// W = (I_q + DU)^{-1} D.
    const Mat& W() const {
        if (!W_) {
            if (root_) {
                const Mat rt = assemble_D(roots_, pf_->dims).transpose();
                const Mat half = llt_.matrixL().solve(rt);
                W_ = half.transpose() * half;
            } else {
                W_ = lu_.solve(D_);
            }
        }
        return *W_;
    }

    Mat ZtViZ() const {
        if (root_) {
            const Mat& gz = GZ();
            Mat out = pf_->U;
            out.selfadjointView<Eigen::Lower>().rankUpdate(gz.transpose(), -1.0);
            return out.selfadjointView<Eigen::Lower>();
        }
        return pf_->U - pf_->U * W() * pf_->U;
    }

    /// Z'V^{-1}X (q × p)
    Mat ZtViX() const {
        if (root_) return pf_->R.transpose() - GZ().transpose() * gx_;
        return pf_->R.transpose() - pf_->U * W() * pf_->R.transpose();
    }

    Mat XtViX() const {
        if (root_) return pf_->P - gx_.transpose() * gx_;
        return pf_->P - pf_->R * W() * pf_->R.transpose();
    }

    Vec XtViY() const {
        if (root_) return pf_->Q - gx_.transpose() * gt_;
        return pf_->Q - pf_->R * W() * pf_->T;
    }

    /// Y'V^{-1}X as a column.
    Vec YtViX() const {
        if (root_) return XtViY();
        return pf_->Q - pf_->R * W().transpose() * pf_->T;
    }

    double YtViY() const {
        if (root_) return pf_->S - gt_.squaredNorm();
        return pf_->S - pf_->T.dot(W() * pf_->T);
    }

    Vec ZtViY() const {
        if (root_) return pf_->T - GZ().transpose() * gt_;
        return pf_->T - pf_->U * W() * pf_->T;
    }

    /// Z'V^{-1}e for e = Y − Xβ.
    Vec ZtVie(const Vec& beta) const { return ZtViY() - ZtViX() * beta; }
    Vec XtVie(const Vec& beta) const { return XtViY() - XtViX() * beta; }

    double eVie(const Vec& beta) const {
        if (root_) return e_e(beta) - (gt_ - gx_ * beta).squaredNorm();
        return YtViY() - beta.dot(XtViY()) - YtViX().dot(beta) + beta.dot(XtViX() * beta);
    }

    bool uses_root_form() const { return root_; }

private:
    double e_e(const Vec& beta) const { return pf_->S - 2.0 * beta.dot(pf_->Q) + beta.dot(pf_->P * beta); }

    bool try_root_path(const std::vector<Mat>& blocks) {
        const FactorDims& dims = pf_->dims;
        for (const Mat& b : blocks) {
            const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
            if (max_asymmetry(b) > 1e-14 * scale) return false;
            Eigen::SelfAdjointEigenSolver<Mat> eig(b);
            if (eig.info() != Eigen::Success) return false;
            if (eig.eigenvalues().size() > 0 && eig.eigenvalues().minCoeff() < -1e-13 * scale) return false;
            roots_.push_back(eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal());
        }
        const Index q = pf_->q();
        const Mat rtu = transpose_times_block_diagonal(roots_, pf_->U, dims);
        Mat c = times_block_diagonal(rtu, roots_, dims);
        c.diagonal().array() += 1.0;
        llt_.compute(c);
        if (llt_.info() != Eigen::Success) return false;
        double logdet = 0.0;
        for (Index i = 0; i < q; ++i) logdet += std::log(llt_.matrixLLT()(i, i));
        log_det_V_ = 2.0 * logdet;
        gx_ = llt_.matrixL().solve(transpose_times_block_diagonal(roots_, pf_->R.transpose(), dims));
        gt_ = llt_.matrixL().solve(transpose_times_block_diagonal(roots_, Mat(pf_->T), dims));
        rtu_ = rtu;
        root_ = true;
        return true;
    }

    void general_path(const std::vector<Mat>& blocks) {
        D_ = assemble_D(blocks, pf_->dims);
        const Index q = pf_->q();
        const Mat m = Mat::Identity(q, q) + D_ * pf_->U;
        lu_.compute(m);
        const double rc = q > 0 ? lu_.rcond() : 1.0;
        if (!(rc > 1e-14)) {
            std::ostringstream msg;
            msg << "I + DU is singular (reciprocal condition estimate " << rc << ")";
            throw NumericalError(msg.str());
        }
        double logdet = 0.0;
        int sign = lu_.permutationP().determinant();
        const Mat& lum = lu_.matrixLU();
        for (Index i = 0; i < q; ++i) {
            const double u = lum(i, i);
            if (u < 0) sign = -sign;
            logdet += std::log(std::abs(u));
        }
        if (sign < 0) throw NumericalError("V is not positive definite (negative determinant)");
        log_det_V_ = logdet;
    }

    /// L^{-1} R'U, computed on first use.
    const Mat& GZ() const {
        if (!gz_) gz_ = llt_.matrixL().solve(rtu_);
        return *gz_;
    }

    const ProductForms* pf_;
    bool root_ = false;
    double log_det_V_ = 0.0;
    // Root form.
    std::vector<Mat> roots_;
    Eigen::LLT<Mat> llt_;
    Mat gx_;
    Vec gt_;
    Mat rtu_;
    mutable std::optional<Mat> gz_;
    // General form.
    Mat D_;
    Eigen::PartialPivLU<Mat> lu_;
    mutable std::optional<Mat> W_;
};

}  // namespace lmmfs
