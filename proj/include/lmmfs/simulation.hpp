#pragma once

// Simulation harness: the three crossed designs, data generation, method
// comparison metrics and the moment-matching degrees-of-freedom baseline.
//
// Every replicate draws from its own generator, seeded from (seed, stream,
// replicate) through splitmix64, so results do not depend on how replicates
// are scheduled across threads.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "lmmfs/errors.hpp"
#include "lmmfs/estimators.hpp"
#include "lmmfs/inference.hpp"
#include "lmmfs/likelihood.hpp"
#include "lmmfs/model.hpp"

namespace lmmfs {

// ---------------------------------------------------------------------------
// Random streams and accumulation

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent generator for one (seed, stream, replicate) triple.
inline std::mt19937_64 replicate_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t rep) {
    const std::uint64_t s = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ rep);
    std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
    return std::mt19937_64(seq);
}

/// Pairwise summation; the result depends only on the order of `v`.
inline double pairwise_sum(const double* v, std::size_t n) {
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += v[i];
        return s;
    }
    const std::size_t h = n / 2;
    return pairwise_sum(v, h) + pairwise_sum(v + h, n - h);
}

inline double pairwise_sum(const std::vector<double>& v) { return pairwise_sum(v.data(), v.size()); }

inline double pairwise_mean(const std::vector<double>& v) {
    return v.empty() ? std::nan("") : pairwise_sum(v) / static_cast<double>(v.size());
}

/// Unbiased sample variance, two-pass.
inline double sample_variance(const std::vector<double>& v) {
    if (v.size() < 2) return std::nan("");
    const double m = pairwise_mean(v);
    std::vector<double> d(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) d[i] = (v[i] - m) * (v[i] - m);
    return pairwise_sum(d) / static_cast<double>(v.size() - 1);
}

/// Runs body(i) for i in [0, count) on up to `jobs` threads.
inline void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, jobs)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) body(i);
        });
    for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Settings

struct SimSetting {
    std::string label;
    FactorDims dims;
    Index n = 0;
    Vec beta;
    double sigma2 = 1.0;
    std::vector<Mat> D;

    Index p() const { return beta.size(); }
};

/// Fraction of the full-size designs (n = 1000) used by default.
inline constexpr double kDeskScale = 0.5;

/// The three designs. Level counts and n shrink with `scale`; the true
/// parameters are fixed here and do not change with it.
inline SimSetting make_setting(const std::string& label, double scale = kDeskScale) {
    if (!(scale > 0.0) || scale > 1.0) throw std::invalid_argument("scale must lie in (0, 1]");
    auto scaled = [&](Index v) { return std::max<Index>(2, static_cast<Index>(std::llround(static_cast<double>(v) * scale))); };
    SimSetting s;
    s.label = label;
    s.n = scaled(1000);
    s.beta = (Vec(5) << 1.0, -0.5, 0.25, 0.8, 0.0).finished();
    s.sigma2 = 1.0;
    Mat d1, d2, d3;
    if (label == "S1") {
        s.dims = {{2}, {scaled(50)}};
        d1.resize(2, 2);
        d1 << 1.0, 0.5, 0.5, 2.0;
        s.D = {d1};
    } else if (label == "S2") {
        s.dims = {{3, 2}, {scaled(100), scaled(50)}};
        d1.resize(3, 3);
        d1 << 1.0, 0.5, 0.0,
              0.5, 2.0, 0.0,
              0.0, 0.0, 0.5;
        d2.resize(2, 2);
        d2 << 1.5, 0.0, 0.0, 0.7;
        s.D = {d1, d2};
    } else if (label == "S3") {
        s.dims = {{4, 3, 2}, {scaled(100), scaled(50), scaled(10)}};
        d1.resize(4, 4);
        d1 << 1.0, 0.5, 0.0, 0.0,
              0.5, 2.0, 0.0, 0.3,
              0.0, 0.0, 0.5, 0.0,
              0.0, 0.3, 0.0, 1.0;
        d2.resize(3, 3);
        d2 << 1.5, 0.0, 0.4,
              0.0, 0.7, 0.0,
              0.4, 0.0, 1.0;
        d3.resize(2, 2);
        d3 << 0.8, 0.2, 0.2, 0.5;
        s.D = {d1, d2, d3};
    } else {
        throw ParseError("unknown simulation setting '" + label + "' (expected S1, S2 or S3)");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Generation

/// Fixed part of a simulated design: X, Z and level assignments.
inline ModelData generate_design(const SimSetting& s, std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    const Index n = s.n, p = s.p();
    ModelData m;
    m.X.resize(n, p);
    for (Index j = 0; j < p; ++j)
        for (Index i = 0; i < n; ++i) m.X(i, j) = j == 0 ? 1.0 : z(rng);
    m.fs.dims = s.dims;
    std::vector<Mat> cov;
    for (Index k = 0; k < s.dims.r(); ++k) {
        const Index lk = s.dims.lk(k);
        if (lk > n) throw std::invalid_argument("more levels than observations");
        std::uniform_int_distribution<Index> level(0, lk - 1);
        std::vector<Index> lev(static_cast<std::size_t>(n));
        // Redraw the whole assignment until every level is occupied.
        for (;;) {
            std::vector<int> seen(static_cast<std::size_t>(lk), 0);
            for (auto& v : lev) {
                v = level(rng);
                seen[static_cast<std::size_t>(v)] = 1;
            }
            if (std::all_of(seen.begin(), seen.end(), [](int x) { return x != 0; })) break;
        }
        m.fs.level_of.push_back(lev);
        Mat c(n, s.dims.qk(k));
        for (Index j = 0; j < c.cols(); ++j)
            for (Index i = 0; i < n; ++i) c(i, j) = j == 0 ? 1.0 : z(rng);
        cov.push_back(c);
    }
    m.Z = build_random_design(m.fs, cov);
    for (Index j = 0; j < p; ++j) m.fixed_names.push_back(j == 0 ? "intercept" : "x" + std::to_string(j));
    return m;
}

/// Y = Xβ + Zb + ε with b ~ N(0, σ²D) and ε ~ N(0, σ²I).
inline Vec simulate_response(const SimSetting& s, const ModelData& design, std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    const double sd = std::sqrt(s.sigma2);
    Vec b(s.dims.total());
    for (Index k = 0; k < s.dims.r(); ++k) {
        const Eigen::SelfAdjointEigenSolver<Mat> es(s.D[static_cast<std::size_t>(k)]);
        const Mat root = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
        Vec u(s.dims.qk(k));
        for (Index j = 0; j < s.dims.lk(k); ++j) {
            for (Index i = 0; i < u.size(); ++i) u[i] = z(rng);
            b.segment(s.dims.column(k, j), u.size()) = sd * root * u;
        }
    }
    Vec e(s.n);
    for (Index i = 0; i < s.n; ++i) e[i] = sd * z(rng);
    return design.X * s.beta + design.Z * b + e;
}

inline ModelData generate(const SimSetting& s, std::mt19937_64& rng) {
    ModelData m = generate_design(s, rng);
    m.y = simulate_response(s, m, rng);
    return m;
}

/// Stream identifiers keep design, response and baseline draws apart.
enum class SimStream : std::uint64_t { Replicate = 1, BaselineDesign = 2, BaselineResponse = 3 };

inline ModelData generate(const SimSetting& s, std::uint64_t seed, std::uint64_t rep = 0) {
    auto rng = replicate_rng(seed, static_cast<std::uint64_t>(SimStream::Replicate), rep);
    return generate(s, rng);
}

// ---------------------------------------------------------------------------
// Comparison metrics

/// MAE = mean |a − b| and MRD = mean 2|a − b| / (|a| + |b| + 1e-12), over
/// the entries of one parameter block.
struct ComparisonMetrics {
    double mae = 0.0;
    double mrd = 0.0;
};

inline ComparisonMetrics compare_blocks(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw std::invalid_argument("blocks differ in length");
    std::vector<double> ae(static_cast<std::size_t>(a.size())), re(static_cast<std::size_t>(a.size()));
    for (Index i = 0; i < a.size(); ++i) {
        const double d = std::abs(a[i] - b[i]);
        ae[static_cast<std::size_t>(i)] = d;
        re[static_cast<std::size_t>(i)] = 2.0 * d / (std::abs(a[i]) + std::abs(b[i]) + 1e-12);
    }
    return {pairwise_mean(ae), pairwise_mean(re)};
}

/// σ² vech(D_k), stacked over factors.
inline Vec variance_product(const ParamState& theta) {
    const ParamState h = theta.to(Repr::Half);
    Index len = 0;
    for (const Vec& b : h.blocks) len += b.size();
    Vec v(len);
    Index pos = 0;
    for (const Vec& b : h.blocks) {
        v.segment(pos, b.size()) = h.sigma2 * b;
        pos += b.size();
    }
    return v;
}

inline Vec variance_product(const SimSetting& s) {
    return variance_product(ParamState::from_covariances(s.beta, s.sigma2, s.D));
}

/// One fit inside a replicate.
struct FitRecord {
    bool ok = false;
    std::string error;
    bool converged = false;
    bool flagged = false;  // non-convergence, step floor or a warning
    int iterations = 0;
    double loglik = std::nan("");
    double seconds = 0.0;
    Vec beta;
    Vec var_product;
};

struct SimConfig {
    std::vector<Method> methods{Method::FS, Method::FFS, Method::SFS, Method::FSFS, Method::CSFS};
    std::vector<Criterion> criteria{Criterion::ML, Criterion::ReML};
    double tol = 1e-6;
    int max_iter = 200;
    int jobs = 1;
};

/// Per replicate: records[criterion][method].
struct ReplicateRecord {
    std::vector<std::vector<FitRecord>> fits;
};

struct PairSummary {
    Criterion criterion = Criterion::ML;
    std::string a, b;  // method names, or "truth"
    Index used = 0;
    ComparisonMetrics beta_mean, var_mean;
    double beta_mae_max = 0.0;
    double var_mae_max = 0.0;
    double loglik_gap_max = 0.0;  // |l_a − l_b|, NaN when one side is the truth
};

struct MethodSummary {
    Criterion criterion = Criterion::ML;
    Method method = Method::FS;
    Index fits = 0;
    Index errors = 0;
    Index nonconverged = 0;
    Index flagged = 0;
    double mean_iterations = 0.0;
    double mean_seconds = 0.0;
};

struct ComparisonTable {
    SimSetting setting;
    Index reps = 0;
    std::uint64_t seed = 0;
    std::vector<ReplicateRecord> replicates;
    std::vector<MethodSummary> methods;
    std::vector<PairSummary> pairs;
};

inline FitRecord run_one(const ProductForms& pf, Method m, Criterion c, const SimConfig& cfg) {
    FitRecord rec;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        FitConfig fc;
        fc.method = m;
        fc.criterion = c;
        fc.tol = cfg.tol;
        fc.max_iter = cfg.max_iter;
        const FitResult r = fit(pf, fc);
        rec.ok = true;
        rec.converged = r.converged;
        rec.flagged = !r.converged || r.step_floor_hit || !r.warnings.empty();
        rec.iterations = r.iterations;
        rec.loglik = r.loglik;
        rec.beta = r.theta.beta;
        rec.var_product = variance_product(r.theta);
    } catch (const Error& e) {
        rec.error = e.what();
        rec.flagged = true;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

inline ComparisonTable compare_methods(const SimSetting& s, Index reps, std::uint64_t seed, const SimConfig& cfg = {}) {
    ComparisonTable out;
    out.setting = s;
    out.reps = reps;
    out.seed = seed;
    out.replicates.resize(static_cast<std::size_t>(reps));
    parallel_for(static_cast<std::size_t>(reps), cfg.jobs, [&](std::size_t rep) {
        const ModelData m = generate(s, seed, rep);
        const ProductForms pf = product_forms(m);
        ReplicateRecord rr;
        for (Criterion c : cfg.criteria) {
            std::vector<FitRecord> row;
            for (Method meth : cfg.methods) row.push_back(run_one(pf, meth, c, cfg));
            rr.fits.push_back(std::move(row));
        }
        out.replicates[rep] = std::move(rr);
    });

    const Vec truth_beta = s.beta;
    const Vec truth_var = variance_product(s);
    for (std::size_t ci = 0; ci < cfg.criteria.size(); ++ci) {
        for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
            MethodSummary ms;
            ms.criterion = cfg.criteria[ci];
            ms.method = cfg.methods[mi];
            std::vector<double> its, secs;
            for (const auto& rr : out.replicates) {
                const FitRecord& f = rr.fits[ci][mi];
                ++ms.fits;
                if (!f.ok) {
                    ++ms.errors;
                    ++ms.flagged;
                    continue;
                }
                if (!f.converged) ++ms.nonconverged;
                if (f.flagged) ++ms.flagged;
                its.push_back(static_cast<double>(f.iterations));
                secs.push_back(f.seconds);
            }
            ms.mean_iterations = pairwise_mean(its);
            ms.mean_seconds = pairwise_mean(secs);
            out.methods.push_back(ms);
        }
        // Method pairs, then each method against the truth.
        const std::size_t nm = cfg.methods.size();
        for (std::size_t a = 0; a < nm; ++a) {
            for (std::size_t b = a; b <= nm; ++b) {
                if (b == a) continue;
                const bool vs_truth = b == nm;
                PairSummary ps;
                ps.criterion = cfg.criteria[ci];
                ps.a = to_string(cfg.methods[a]);
                ps.b = vs_truth ? "truth" : to_string(cfg.methods[b]);
                std::vector<double> bmae, bmrd, vmae, vmrd;
                for (const auto& rr : out.replicates) {
                    const FitRecord& fa = rr.fits[ci][a];
                    if (!fa.ok) continue;
                    const Vec& beta_b = vs_truth ? truth_beta : rr.fits[ci][b].beta;
                    const Vec& var_b = vs_truth ? truth_var : rr.fits[ci][b].var_product;
                    if (!vs_truth && !rr.fits[ci][b].ok) continue;
                    const ComparisonMetrics mb = compare_blocks(fa.beta, beta_b);
                    const ComparisonMetrics mv = compare_blocks(fa.var_product, var_b);
                    bmae.push_back(mb.mae);
                    bmrd.push_back(mb.mrd);
                    vmae.push_back(mv.mae);
                    vmrd.push_back(mv.mrd);
                    ps.beta_mae_max = std::max(ps.beta_mae_max, mb.mae);
                    ps.var_mae_max = std::max(ps.var_mae_max, mv.mae);
                    if (!vs_truth) ps.loglik_gap_max = std::max(ps.loglik_gap_max, std::abs(fa.loglik - rr.fits[ci][b].loglik));
                }
                if (vs_truth) ps.loglik_gap_max = std::nan("");
                ps.used = static_cast<Index>(bmae.size());
                ps.beta_mean = {pairwise_mean(bmae), pairwise_mean(bmrd)};
                ps.var_mean = {pairwise_mean(vmae), pairwise_mean(vmrd)};
                out.pairs.push_back(ps);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Moment-matching degrees-of-freedom baseline

struct DfBaseline {
    /// mean over instances of 2(S²)², divided by the empirical Var(S²).
    double truth = 0.0;
    double var_s2 = 0.0;
    double mean_numerator = 0.0;
    /// Direct-SW estimates on the same instances.
    double direct_mean = 0.0;
    double direct_sd = 0.0;
    Index sims = 0;
    Index instances = 0;
    Index failed = 0;
};

struct BaselineConfig {
    Index sims = 100000;
    /// The first `instances` simulations also get a direct-SW estimate.
    Index instances = 1000;
    Method method = Method::FSFS;
    Criterion criterion = Criterion::ReML;
    double tol = 1e-6;
    int jobs = 1;
};

/// Fixed X and Z, fresh b and ε per simulation. Var(S²) comes from all
/// simulations; the numerator 2(S²)² and the direct-SW estimates are averaged
/// over the first `instances`.
inline DfBaseline df_baseline(const SimSetting& s, const ModelData& design, const Vec& l, std::uint64_t seed,
                              const BaselineConfig& cfg = {}) {
    const Index n_inst = std::min(cfg.instances, cfg.sims);
    ProductForms base = product_forms(Vec::Zero(design.X.rows()), design.X, design.Z, design.fs.dims);
    std::vector<double> s2(static_cast<std::size_t>(cfg.sims), std::nan(""));
    std::vector<double> direct(static_cast<std::size_t>(n_inst), std::nan(""));
    parallel_for(static_cast<std::size_t>(cfg.sims), cfg.jobs, [&](std::size_t i) {
        auto rng = replicate_rng(seed, static_cast<std::uint64_t>(SimStream::BaselineResponse), i);
        const Vec y = simulate_response(s, design, rng);
        ProductForms pf = base;
        pf.Q = design.X.transpose() * y;
        pf.S = y.squaredNorm();
        pf.T = design.Z.transpose() * y;
        try {
            FitConfig fc;
            fc.method = cfg.method;
            fc.criterion = cfg.criterion;
            fc.tol = cfg.tol;
            const FitResult r = fit(pf, fc);
            if (!r.converged) return;
            const HalfDf eng(pf, r);
            s2[i] = eng.s2(l);
            if (static_cast<Index>(i) < n_inst) direct[i] = eng.df_t(l);
        } catch (const Error&) {
        }
    });
    DfBaseline out;
    out.sims = cfg.sims;
    std::vector<double> ok, num, dir;
    for (std::size_t i = 0; i < s2.size(); ++i) {
        if (std::isnan(s2[i])) {
            ++out.failed;
            continue;
        }
        ok.push_back(s2[i]);
        if (static_cast<Index>(i) < n_inst && !std::isnan(direct[i])) {
            num.push_back(2.0 * s2[i] * s2[i]);
            dir.push_back(direct[i]);
        }
    }
    if (ok.size() < 2 || num.empty()) throw NumericalError("too few successful refits for the df baseline");
    out.instances = static_cast<Index>(num.size());
    out.var_s2 = sample_variance(ok);
    out.mean_numerator = pairwise_mean(num);
    out.truth = out.mean_numerator / out.var_s2;
    out.direct_mean = pairwise_mean(dir);
    out.direct_sd = std::sqrt(sample_variance(dir));
    return out;
}

inline DfBaseline df_baseline(const SimSetting& s, const Vec& l, std::uint64_t seed, const BaselineConfig& cfg = {}) {
    auto rng = replicate_rng(seed, static_cast<std::uint64_t>(SimStream::BaselineDesign), 0);
    const ModelData design = generate_design(s, rng);
    return df_baseline(s, design, l, seed, cfg);
}

}  // namespace lmmfs
