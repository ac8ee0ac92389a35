#pragma once

// Approximate T and F tests on fixed-effect contrasts with Satterthwaite
// degrees of freedom computed from closed-form derivatives of the contrast
// variance S² = σ² L (X'V⁻¹X)⁻¹ L'.
//
// Var(S²) is approximated by g' I⁻¹ g, where g = dS²/dη and I is the expected
// information of the variance parameters η for the criterion the model was
// fitted with. Under ReML that is the restricted information, which uses
// Z'PZ (P = V⁻¹ − V⁻¹X A⁻¹ X'V⁻¹) in place of Z'V⁻¹Z and n − p in place of n.

#include <Eigen/Dense>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lmmfs/constraints.hpp"
#include "lmmfs/errors.hpp"
#include "lmmfs/estimators.hpp"
#include "lmmfs/likelihood.hpp"
#include "lmmfs/matrix_kernels.hpp"
#include "lmmfs/model.hpp"

namespace lmmfs {

// ---------------------------------------------------------------------------
// Tail probabilities

/// Two-sided tail probability of Student's t.
inline double p_value_t(double t, double df) {
    if (!std::isfinite(t)) throw NumericalError("t statistic is not finite");
    if (!(df > 0.0)) throw NumericalError("degrees of freedom must be positive");
    const boost::math::students_t dist(df);
    return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

/// Upper tail probability of F(r, df).
inline double p_value_f(double f, double r, double df) {
    if (!std::isfinite(f)) throw NumericalError("F statistic is not finite");
    if (!(df > 0.0) || !(r > 0.0)) throw NumericalError("degrees of freedom must be positive");
    if (f <= 0.0) return 1.0;
    const boost::math::fisher_f dist(r, df);
    return boost::math::cdf(boost::math::complement(dist, f));
}

// ---------------------------------------------------------------------------
// F denominator rule

/// Denominator df of an F statistic built from r independent squared T
/// statistics with per-row dfs `v`.
inline double combine_f_df(const Vec& v) {
    const Index r = v.size();
    if (r == 0) throw std::invalid_argument("empty contrast");
    if (r == 1) return v[0];
    if (r == 2) return 2.0;
    double s = 0.0;
    for (Index i = 0; i < r; ++i) {
        const double vi = std::max(v[i], 2.0 + 1e-6);
        s += vi / (vi - 2.0);
    }
    return 2.0 * s / (s - static_cast<double>(r));
}

struct TestReport {
    std::string name;
    bool is_f = false;
    /// Lβ̂ (one entry per contrast row).
    Vec estimate;
    double statistic = 0.0;
    /// Numerator df: 1 for t, rank(L) for F.
    Index rank = 1;
    double df = 0.0;
    double p_value = 1.0;
    /// Contrast variance and its approximate variance; set for t tests only.
    std::optional<double> S2;
    std::optional<double> var_S2;
    /// Per-row dfs of the rotated contrast; F tests only.
    std::vector<double> row_df;
};

// ---------------------------------------------------------------------------
// Engines

/// Everything needed to test contrasts at one fitted value: β̂, σ̂², A⁻¹ and
/// the information of the variance parameters. Subclasses fix the variance
/// coordinates and provide dS²/dη in them.
class DfEngine {
public:
    virtual ~DfEngine() = default;

    const Vec& beta() const { return beta_; }
    double sigma2() const { return sigma2_; }
    const Mat& A_inv() const { return a_inv_; }
    Mat cov_beta() const { return sigma2_ * a_inv_; }
    /// Information over the variance coordinates.
    const Mat& information() const { return info_; }
    const std::vector<std::string>& warnings() const { return warnings_; }
    Criterion criterion() const { return crit_; }

    double s2(const Vec& l) const {
        check_row(l);
        return sigma2_ * l.dot(a_inv_ * l);
    }

    /// dS²/dη for one contrast row, in this engine's coordinates.
    virtual Vec s2_gradient(const Vec& l) const = 0;

    /// g' I⁻¹ g. Coordinates with no information (a component held at zero
    /// through a squared parameterization) carry no gradient either and are
    /// left out.
    double var_s2(const Vec& l) const {
        const Vec g = s2_gradient(l);
        Vec ga(static_cast<Index>(active_.size()));
        for (std::size_t i = 0; i < active_.size(); ++i) ga[static_cast<Index>(i)] = g[active_[i]];
        const double v = ga.dot(info_ldlt_.solve(ga));
        if (!(v > 0.0) || !std::isfinite(v)) throw NumericalError("estimated Var(S^2) is not positive");
        return v;
    }

    double df_t(const Vec& l) const {
        const double s = s2(l);
        return 2.0 * s * s / var_s2(l);
    }

    TestReport t_test(const Vec& l, std::string name = {}) const {
        TestReport rep;
        rep.name = std::move(name);
        const double s = s2(l);
        if (!(s > 0.0)) throw NumericalError("contrast variance is not positive");
        rep.estimate = Vec::Constant(1, l.dot(beta_));
        rep.statistic = rep.estimate[0] / std::sqrt(s);
        rep.S2 = s;
        rep.var_S2 = var_s2(l);
        rep.df = 2.0 * s * s / *rep.var_S2;
        rep.p_value = p_value_t(rep.statistic, rep.df);
        return rep;
    }

    /// F test of Lβ = 0 for a c × p contrast of full row rank.
    TestReport f_test(const Mat& L, std::string name = {}) const {
        if (L.cols() != beta_.size()) throw std::invalid_argument("contrast has the wrong number of columns");
        if (L.rows() == 0) throw std::invalid_argument("empty contrast");
        TestReport rep;
        rep.name = std::move(name);
        rep.is_f = true;
        rep.rank = L.rows();
        rep.estimate = L * beta_;
        const Mat cov = L * cov_beta() * L.transpose();
        const Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (cov + cov.transpose()));
        const Vec& lambda = es.eigenvalues();
        if (!(lambda.minCoeff() > 1e-12 * std::max(1.0, lambda.maxCoeff())))
            throw DegenerateDataError("contrast matrix is not of full row rank");
        const Mat rotated = es.eigenvectors().transpose() * L;
        Vec v(rep.rank);
        double q = 0.0;
        for (Index i = 0; i < rep.rank; ++i) {
            const Vec row = rotated.row(i).transpose();
            v[i] = df_t(row);
            const double e = row.dot(beta_);
            q += e * e / lambda[i];
            rep.row_df.push_back(v[i]);
        }
        rep.statistic = q / static_cast<double>(rep.rank);
        rep.df = combine_f_df(v);
        rep.p_value = p_value_f(rep.statistic, static_cast<double>(rep.rank), rep.df);
        return rep;
    }

protected:
    void init(const Vec& beta, double sigma2, const Mat& a_inv, Mat info, Criterion crit) {
        beta_ = beta;
        sigma2_ = sigma2;
        a_inv_ = a_inv;
        info_ = std::move(info);
        crit_ = crit;
        if (crit == Criterion::ML)
            warnings_.push_back("degrees of freedom computed from ML estimates are biased low; ReML is recommended");
        const double scale = info_.size() > 0 ? info_.diagonal().cwiseAbs().maxCoeff() : 0.0;
        for (Index i = 0; i < info_.rows(); ++i)
            if (info_(i, i) > 1e-12 * scale) active_.push_back(i);
        Mat sub(static_cast<Index>(active_.size()), static_cast<Index>(active_.size()));
        for (std::size_t i = 0; i < active_.size(); ++i)
            for (std::size_t j = 0; j < active_.size(); ++j)
                sub(static_cast<Index>(i), static_cast<Index>(j)) = info_(active_[i], active_[j]);
        info_ldlt_.compute(sub);
        if (info_ldlt_.info() != Eigen::Success || !info_ldlt_.isPositive() ||
            !(info_ldlt_.vectorD().minCoeff() > 1e-14 * scale))
            throw NumericalError("variance-parameter information is singular");
    }

    void check_row(const Vec& l) const {
        if (l.size() != beta_.size()) throw std::invalid_argument("contrast has the wrong number of columns");
    }

private:
    Vec beta_;
    double sigma2_ = 1.0;
    Mat a_inv_;
    Mat info_;
    Criterion crit_ = Criterion::ReML;
    std::vector<Index> active_;
    Eigen::LDLT<Mat> info_ldlt_;
    std::vector<std::string> warnings_;
};

/// Z'V⁻¹Z for ML, Z'PZ for ReML.
inline Mat information_kernel(const ModelEval& ev, Criterion crit) {
    if (crit == Criterion::ML) return ev.ZtViZ();
    return ev.ZtViZ() - ev.ZtViX * ev.Ainv * ev.ZtViX.transpose();
}

/// Expected information over (σ², D blocks) for the given criterion.
inline Mat criterion_variance_information(const ModelEval& ev, Criterion crit, InfoKind kind) {
    const ProductForms& pf = *ev.pf;
    const double n_eff = static_cast<double>(crit == Criterion::ML ? pf.n : pf.n - pf.p());
    if (!(n_eff > 0.0)) throw DegenerateDataError("no residual degrees of freedom");
    return variance_information(information_kernel(ev, crit), pf.dims, ev.sigma2, n_eff, kind);
}

/// Σ_j vec(B_(k,j) B_(k,j)') for b = Z'V⁻¹X A⁻¹ l, per factor.
inline std::vector<Mat> contrast_level_outer(const ModelEval& ev, const Vec& l) {
    const FactorDims& dims = ev.pf->dims;
    const Vec b = ev.ZtViX * (ev.Ainv * l);
    std::vector<Mat> out;
    for (Index k = 0; k < dims.r(); ++k) {
        const Index qk = dims.qk(k);
        Mat acc = Mat::Zero(qk, qk);
        for (Index j = 0; j < dims.lk(k); ++j) {
            const auto seg = b.segment(dims.column(k, j), qk);
            acc.noalias() += seg * seg.transpose();
        }
        out.push_back(acc);
    }
    return out;
}

/// Unstructured model in the half representation η = (σ², vech D_1, …, vech D_r).
class HalfDf : public DfEngine {
public:
    HalfDf(const ProductForms& pf, const ParamState& theta, Criterion crit)
        : ev_(pf, theta.to(Repr::Half)) {
        init(ev_.beta, ev_.sigma2, ev_.Ainv, criterion_variance_information(ev_, crit, InfoKind::FisherHalf), crit);
    }
    HalfDf(const ProductForms& pf, const FitResult& fit) : HalfDf(pf, fit.theta, fit.criterion) {}

    Vec s2_gradient(const Vec& l) const override {
        check_row(l);
        const FactorDims& dims = ev_.pf->dims;
        Vec g(1 + dims.vech_total());
        g[0] = l.dot(ev_.Ainv * l);
        const auto outer = contrast_level_outer(ev_, l);
        Index pos = 1;
        for (Index k = 0; k < dims.r(); ++k) {
            const Index len = vech_size(dims.qk(k));
            g.segment(pos, len) = ev_.sigma2 * (duplication_matrix(dims.qk(k)).transpose() * vec(outer[static_cast<std::size_t>(k)]));
            pos += len;
        }
        return g;
    }

    const ModelEval& eval() const { return ev_; }

private:
    ModelEval ev_;
};

/// Structured covariance model in coordinates η = (σ², ρ): the gradient is
/// C·dS²/dvec(D) and the information C I^f C'.
class ConstrainedDf : public DfEngine {
public:
    ConstrainedDf(const ProductForms& pf, const CovarianceModel& model, const ConstrainedState& s, Criterion crit)
        : ev_(pf, s.full(model)) {
        const Mat c = model.constraint_matrix(s.rho);
        t_ = Mat::Zero(1 + c.cols(), 1 + c.rows());
        t_(0, 0) = 1.0;
        t_.bottomRightCorner(c.cols(), c.rows()) = c.transpose();
        const Mat full = criterion_variance_information(ev_, crit, InfoKind::FisherFull);
        init(ev_.beta, ev_.sigma2, ev_.Ainv, t_.transpose() * full * t_, crit);
    }
    ConstrainedDf(const ProductForms& pf, const CovarianceModel& model, const ConstrainedFitResult& fit)
        : ConstrainedDf(pf, model, ConstrainedState{fit.theta.beta, fit.theta.sigma2, fit.rho}, fit.criterion) {}

    /// Gradient over (σ², vec D_1, …, vec D_r) before the constraint map.
    Vec full_gradient(const Vec& l) const {
        check_row(l);
        const FactorDims& dims = ev_.pf->dims;
        Vec g(1 + dims.vec_total());
        g[0] = l.dot(ev_.Ainv * l);
        const auto outer = contrast_level_outer(ev_, l);
        Index pos = 1;
        for (Index k = 0; k < dims.r(); ++k) {
            const Index len = dims.qk(k) * dims.qk(k);
            g.segment(pos, len) = ev_.sigma2 * vec(outer[static_cast<std::size_t>(k)]);
            pos += len;
        }
        return g;
    }

    Vec s2_gradient(const Vec& l) const override { return t_.transpose() * full_gradient(l); }

private:
    ModelEval ev_;
    Mat t_;
};

/// ACE model through the per-family-type forms; coordinates (σ²_e, τ_a, τ_c).
/// Every V⁻¹ block is D̄_k⁻¹ = (I + D_k)⁻¹, so nothing of size n is formed.
class AceDf : public DfEngine {
public:
    AceDf(const AceEvaluator& ev, const Vec& beta, double sigma2, const Vec& tau, Criterion crit)
        : ev_(&ev), tau_(tau) {
        const AceData& data = ev.data();
        const FactorDims& dims = data.dims;
        const AceModel model(dims, data.kin);
        const auto f = ev.forms(model.decode(tau));
        const Index p = data.p();
        const Eigen::LDLT<Mat> ldlt(f.A);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) throw NumericalError("X'V^{-1}X is singular");
        const Mat a_inv = ldlt.solve(Mat::Identity(p, p));
        dbar_inv_ = f.dbar_inv;

        const bool reml = crit == Criterion::ReML;
        const double n_eff = static_cast<double>(reml ? data.n() - p : data.n());
        if (!(n_eff > 0.0)) throw DegenerateDataError("no residual degrees of freedom");
        const Index r = dims.r();

        // Blocks of the information over (σ², vec D_1, …, vec D_r).
        std::vector<Vec> cross;
        std::vector<Mat> w;
        for (Index k = 0; k < r; ++k) {
            const Mat& g = dbar_inv_[static_cast<std::size_t>(k)];
            Mat wk = Mat::Zero(g.rows(), g.cols());
            if (reml) wk = g * ev.sandwich(k, a_inv) * g;
            w.push_back(wk);
            cross.push_back(0.5 / sigma2 * vec(static_cast<double>(dims.lk(k)) * g - wk));
        }
        std::vector<Mat> ck;
        for (Index k = 0; k < r; ++k) ck.push_back(2.0 * tau.asDiagonal() * ev.stacked_kinship(k));

        Mat info = Mat::Zero(3, 3);
        info(0, 0) = 0.5 * n_eff / (sigma2 * sigma2);
        Vec st = Vec::Zero(2);
        Mat tt = Mat::Zero(2, 2);
        for (Index k1 = 0; k1 < r; ++k1) {
            const auto k1s = static_cast<std::size_t>(k1);
            st += ck[k1s] * cross[k1s];
            const Mat& g1 = dbar_inv_[k1s];
            for (Index k2 = 0; k2 < r; ++k2) {
                const auto k2s = static_cast<std::size_t>(k2);
                const Mat& g2 = dbar_inv_[k2s];
                Mat blk = Mat::Zero(g1.size(), g2.size());
                if (k1 == k2) {
                    blk = static_cast<double>(dims.lk(k1)) * kron(g1, g1);
                    if (reml) blk -= kron(g1, w[k1s]) + kron(w[k1s], g1);
                }
                if (reml) blk += kron(g1, g1) * ev.cross_kron(k1, k2, a_inv) * kron(g2, g2);
                tt += ck[k1s] * (0.5 * blk) * ck[k2s].transpose();
            }
        }
        info.block(0, 1, 1, 2) = st.transpose();
        info.block(1, 0, 2, 1) = st;
        info.bottomRightCorner(2, 2) = tt;
        init(beta, sigma2, a_inv, info, crit);
    }

    AceDf(const AceEvaluator& ev, const AceFitResult& fit)
        : AceDf(ev, fit.theta.beta, fit.theta.sigma2, fit.rho, fit.criterion) {}

    Vec s2_gradient(const Vec& l) const override {
        check_row(l);
        const Vec a = A_inv() * l;
        const Mat aa = a * a.transpose();
        Vec g = Vec::Zero(3);
        g[0] = l.dot(a);
        Vec s = Vec::Zero(2);
        for (Index k = 0; k < ev_->data().dims.r(); ++k) {
            const Mat& d = dbar_inv_[static_cast<std::size_t>(k)];
            s += ev_->stacked_kinship(k) * vec(sigma2() * d * ev_->sandwich(k, aa) * d);
        }
        g.tail(2) = 2.0 * tau_.cwiseProduct(s);
        return g;
    }

private:
    const AceEvaluator* ev_;
    Vec tau_;
    std::vector<Mat> dbar_inv_;
};

// ---------------------------------------------------------------------------
// Convenience entry points on an unstructured fit

inline double t_statistic(const FitResult& fit, const Vec& l, const ProductForms& pf) {
    return HalfDf(pf, fit).t_test(l).statistic;
}

inline Vec dS2_dEta(const FitResult& fit, const Vec& l, const ProductForms& pf) {
    return HalfDf(pf, fit).s2_gradient(l);
}

inline double satterthwaite_df_t(const FitResult& fit, const Vec& l, const ProductForms& pf) {
    return HalfDf(pf, fit).df_t(l);
}

inline double satterthwaite_df_t(const FitResult& fit, const Vec& l, const ProductForms& pf, Criterion crit) {
    return HalfDf(pf, fit.theta, crit).df_t(l);
}

inline double satterthwaite_df_f(const FitResult& fit, const Mat& L, const ProductForms& pf) {
    return HalfDf(pf, fit).f_test(L).df;
}

}  // namespace lmmfs
