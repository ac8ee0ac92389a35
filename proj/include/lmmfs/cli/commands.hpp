#pragma once

#include <array>
#include <exception>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lmmfs/cli/csv.hpp"
#include "lmmfs/cli/pedigree.hpp"
#include "lmmfs/cli/report.hpp"
#include "lmmfs/cli/spec_file.hpp"
#include "lmmfs/constraints.hpp"
#include "lmmfs/estimators.hpp"
#include "lmmfs/inference.hpp"
#include "lmmfs/simulation.hpp"

namespace lmmfs::cli {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitParse = 2,
    kExitDegenerate = 3,
    kExitNonConvergence = 4,
    kExitNumerical = 5,
    kExitPedigree = 6,
};

/// Maps the library's error hierarchy onto exit codes. Invalid arguments
/// reaching the library come from user input, so they count as parse errors.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const PedigreeError*>(&e)) return kExitPedigree;
    if (dynamic_cast<const ParseError*>(&e)) return kExitParse;
    if (dynamic_cast<const DegenerateDataError*>(&e)) return kExitDegenerate;
    if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
    if (dynamic_cast<const std::invalid_argument*>(&e)) return kExitParse;
    if (dynamic_cast<const nlohmann::json::exception*>(&e)) return kExitParse;
    return kExitNumerical;
}

/// A finished command: the report document and the exit code it implies.
struct Outcome {
    Json doc;
    int exit_code = kExitOk;
};

/// Fit settings given on the command line; they override the spec file.
struct FitOverrides {
    std::optional<std::string> method;
    std::optional<std::string> criterion;
    std::optional<double> tol;
    std::optional<int> max_iter;
    std::vector<std::string> contrasts;
};

inline void apply_overrides(ModelSpec& spec, const FitOverrides& o) {
    if (o.method) spec.method = parse_method(*o.method);
    if (o.criterion) spec.criterion = parse_criterion(*o.criterion);
    if (o.tol) {
        if (!(*o.tol > 0.0)) throw ParseError("--tol must be positive");
        spec.tol = *o.tol;
    }
    if (o.max_iter) {
        if (*o.max_iter < 1) throw ParseError("--max-iter must be positive");
        spec.max_iter = *o.max_iter;
    }
    for (const auto& c : o.contrasts) {
        ContrastSpec cs = parse_contrast_flag(c);
        for (const auto& prev : spec.contrasts)
            if (prev.name == cs.name) throw ParseError("contrast '" + cs.name + "' defined twice");
        spec.contrasts.push_back(std::move(cs));
    }
}

namespace detail {

struct NamedContrast {
    std::string name;
    Mat L;
};

/// One t test per fixed effect, then the named contrasts.
inline std::vector<NamedContrast> all_contrasts(const ModelSpec& spec, const std::vector<std::string>& fixed_names) {
    std::vector<NamedContrast> out;
    const auto p = static_cast<Index>(fixed_names.size());
    for (Index j = 0; j < p; ++j) out.push_back({fixed_names[static_cast<std::size_t>(j)], Vec::Unit(p, j).transpose()});
    for (const auto& c : spec.contrasts) {
        for (const auto& prev : out)
            if (prev.name == c.name) throw ParseError("contrast '" + c.name + "' clashes with a fixed-effect name");
        out.push_back({c.name, resolve_contrast(c, fixed_names)});
    }
    return out;
}

inline TestReport run_test(const DfEngine& engine, const NamedContrast& c) {
    if (c.L.rows() == 1) return engine.t_test(c.L.row(0).transpose(), c.name);
    return engine.f_test(c.L, c.name);
}

inline Json tests_json(const DfEngine& engine, const std::vector<NamedContrast>& contrasts) {
    Json tests = Json::array();
    for (const auto& c : contrasts) tests.push_back(test_json(run_test(engine, c), c.L));
    return tests;
}

inline Json settings_json(const std::string& method, const FitConfig& cfg) {
    Json s;
    s["method"] = method;
    s["criterion"] = to_string(cfg.criterion);
    s["tol"] = cfg.tol;
    s["max_iter"] = cfg.max_iter;
    return s;
}

inline Json fit_json(const FitResult& res) {
    Json f;
    f["converged"] = res.converged;
    f["iterations"] = res.iterations;
    f["loglik"] = number(res.loglik);
    f["step_floor_hit"] = res.step_floor_hit;
    f["score_norm"] = number(res.score_norm);
    return f;
}

inline Json fixed_json(const std::vector<std::string>& names, const Vec& beta, const Vec& se) {
    Json a = Json::array();
    for (std::size_t j = 0; j < names.size(); ++j) {
        Json b;
        b["name"] = names[j];
        b["estimate"] = number(beta[static_cast<Index>(j)]);
        b["se"] = number(se[static_cast<Index>(j)]);
        a.push_back(b);
    }
    return a;
}

inline void append_warnings(Json& doc, const std::vector<std::string>& w) {
    for (const auto& s : w) {
        if (std::find(doc["warnings"].begin(), doc["warnings"].end(), Json(s)) == doc["warnings"].end())
            doc["warnings"].push_back(s);
    }
}

inline std::vector<Structure> structures_for(const ModelSpec& spec, const FactorDims& dims) {
    std::vector<Structure> st;
    for (Index k = 0; k < dims.r(); ++k) {
        const auto& term = spec.design.random[static_cast<std::size_t>(k)];
        try {
            st.emplace_back(parse_structure(term.structure), dims.qk(k));
        } catch (const std::invalid_argument& e) {
            throw ParseError("factor '" + term.factor + "': " + e.what());
        }
    }
    return st;
}

/// Standard errors of σ²_e, σ²_a = τ_a²σ²_e and σ²_c = τ_c²σ²_e by the delta
/// method on the (σ²_e, τ_a, τ_c) information. A component whose τ carries no
/// information (held at zero, or estimated on the boundary) gets no SE.
inline std::array<std::optional<double>, 3> ace_component_se(const Mat& info, double sigma2, const Vec& tau) {
    std::vector<Index> active;
    const double scale = info.diagonal().cwiseAbs().maxCoeff();
    for (Index i = 0; i < 3; ++i)
        if (info(i, i) > 1e-12 * scale) active.push_back(i);
    std::array<std::optional<double>, 3> se{};
    if (active.empty() || active.front() != 0) return se;
    const auto m = static_cast<Index>(active.size());
    Mat sub(m, m);
    for (Index a = 0; a < m; ++a)
        for (Index b = 0; b < m; ++b) sub(a, b) = info(active[static_cast<std::size_t>(a)], active[static_cast<std::size_t>(b)]);
    const Eigen::LDLT<Mat> ldlt(sub);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return se;
    auto delta = [&](const Vec& g) -> std::optional<double> {
        Vec ga(m);
        for (Index a = 0; a < m; ++a) ga[a] = g[active[static_cast<std::size_t>(a)]];
        const double v = ga.dot(ldlt.solve(ga));
        return v >= 0.0 && std::isfinite(v) ? std::optional<double>(std::sqrt(v)) : std::nullopt;
    };
    auto is_active = [&](Index i) { return std::find(active.begin(), active.end(), i) != active.end(); };
    se[0] = delta(Vec::Unit(3, 0));
    for (Index c = 0; c < 2; ++c) {
        if (!is_active(c + 1)) continue;
        Vec g = Vec::Zero(3);
        g[0] = tau[c] * tau[c];
        g[c + 1] = 2.0 * tau[c] * sigma2;
        se[static_cast<std::size_t>(c + 1)] = delta(g);
    }
    return se;
}

inline Json header(const std::string& command) {
    Json doc;
    doc["format"] = kReportFormat;
    doc["command"] = command;
    return doc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// fit

inline Outcome cmd_fit(const std::string& data_path, const std::string& spec_path, const FitOverrides& o = {}) {
    const ObservationTable table = read_csv(data_path);
    ModelSpec spec = read_spec(spec_path);
    apply_overrides(spec, o);
    if (!spec.family_column.empty() || !spec.member_column.empty())
        throw ParseError("'family' and 'member' belong to ACE specs; use the ace command");
    const FitConfig cfg = spec.fit_config(Method::FSFS, Criterion::ReML);
    const ModelData data = build_design(table, spec.design);
    const ProductForms pf = product_forms(data);
    const auto contrasts = detail::all_contrasts(spec, data.fixed_names);
    const FactorDims& dims = data.fs.dims;
    const bool structured = spec.structured();

    Json doc = detail::header("fit");
    doc["inputs"] = {{"data", data_path}, {"spec", spec_path}};
    Json model;
    model["n"] = data.n();
    model["p"] = data.p();
    model["response"] = spec.design.response;
    model["fixed"] = data.fixed_names;
    doc["model"] = model;
    doc["warnings"] = Json::array();

    FitResult res;
    std::unique_ptr<DfEngine> engine;
    std::unique_ptr<FactorwiseModel> cov_model;
    Vec rho;
    if (structured) {
        cov_model = std::make_unique<FactorwiseModel>(dims, detail::structures_for(spec, dims));
        ConstrainedFitResult cres = fit_constrained(pf, *cov_model, cfg);
        engine = std::make_unique<ConstrainedDf>(pf, *cov_model, cres);
        rho = cres.rho;
        res = std::move(cres);
        if (spec.method) doc["warnings"].push_back("the method setting does not apply to structured covariance models");
    } else {
        res = fit(pf, cfg);
        engine = std::make_unique<HalfDf>(pf, res);
    }

    doc["settings"] = detail::settings_json(structured ? "constrained" : to_string(cfg.method), cfg);
    doc["fit"] = detail::fit_json(res);
    doc["fixed_effects"] = detail::fixed_json(data.fixed_names, res.theta.beta, res.se_beta);
    doc["sigma2"] = number(res.theta.sigma2);

    Json random = Json::array();
    Index rho_pos = 0;
    for (Index k = 0; k < dims.r(); ++k) {
        const auto sk = static_cast<std::size_t>(k);
        const Mat d = res.theta.covariance(k);
        Json f;
        f["factor"] = data.factor_names[sk];
        f["levels"] = dims.lk(k);
        f["effects"] = data.effect_names[sk];
        f["structure"] = to_string(parse_structure(spec.design.random[sk].structure));
        f["D"] = to_json(d);
        f["covariance"] = to_json(Mat(res.theta.sigma2 * d));
        if (structured) {
            Json params;
            const Structure& st = cov_model->structures()[sk];
            const auto names = st.names();
            for (Index j = 0; j < st.size(); ++j) params[names[static_cast<std::size_t>(j)]] = number(rho[rho_pos + j]);
            rho_pos += st.size();
            f["parameters"] = params;
        }
        random.push_back(f);
    }
    doc["random_effects"] = random;

    Json theta;
    theta["beta"] = to_json(res.theta.beta);
    theta["sigma2"] = number(res.theta.sigma2);
    theta["vech"] = Json::array();
    for (const Vec& b : res.theta.blocks) theta["vech"].push_back(to_json(b));
    if (structured) theta["rho"] = to_json(rho);
    doc["theta"] = theta;

    doc["tests"] = detail::tests_json(*engine, contrasts);
    detail::append_warnings(doc, data.warnings);
    detail::append_warnings(doc, res.warnings);
    detail::append_warnings(doc, engine->warnings());
    return {doc, res.converged ? kExitOk : kExitNonConvergence};
}

// ---------------------------------------------------------------------------
// ace

inline Outcome cmd_ace(const std::string& data_path, const std::string& pedigree_path, const std::string& spec_path,
                       const FitOverrides& o = {}) {
    const ObservationTable table = read_csv(data_path);
    ModelSpec spec = read_spec(spec_path);
    apply_overrides(spec, o);
    const auto families = read_pedigree(pedigree_path);
    const AceData data = assemble_ace_data(table, spec, families);
    const FitConfig cfg = spec.fit_config(Method::FSFS, Criterion::ReML);
    const auto contrasts = detail::all_contrasts(spec, data.fixed_names);

    const AceFitResult res = ace_fit(data, cfg);
    const AceEvaluator ev(data);
    const AceDf engine(ev, res);

    Json doc = detail::header("ace");
    doc["inputs"] = {{"data", data_path}, {"pedigree", pedigree_path}, {"spec", spec_path}};
    Json model;
    model["n"] = data.n();
    model["p"] = data.p();
    model["response"] = spec.design.response;
    model["fixed"] = data.fixed_names;
    doc["model"] = model;
    doc["warnings"] = Json::array();
    if (spec.method) doc["warnings"].push_back("the method setting does not apply to the ACE model");
    doc["settings"] = detail::settings_json("constrained", cfg);
    doc["fit"] = detail::fit_json(res);

    Json fam;
    fam["count"] = data.family_ids.size();
    fam["types"] = Json::array();
    for (Index k = 0; k < data.dims.r(); ++k)
        fam["types"].push_back({{"size", data.dims.qk(k)}, {"families", data.dims.lk(k)}});
    doc["families"] = fam;

    doc["fixed_effects"] = detail::fixed_json(data.fixed_names, res.theta.beta, res.se_beta);
    const auto se = detail::ace_component_se(engine.information(), res.theta.sigma2, res.rho);
    auto component = [&](double est, const std::optional<double>& s, bool identified) {
        return Json{{"estimate", number(est)}, {"se", number(s)}, {"identified", identified}};
    };
    Json vc;
    vc["additive"] = component(res.sigma2_a, se[1], res.identified.additive);
    vc["common"] = component(res.sigma2_c, se[2], res.identified.environment);
    vc["residual"] = component(res.sigma2_e, se[0], true);
    doc["variance_components"] = vc;

    Json restarts = Json::array();
    for (const AceRestart& r : res.restarts) {
        Json j;
        j["tau_start"] = to_json(r.tau_start);
        j["loglik"] = number(r.loglik);
        j["iterations"] = r.iterations;
        j["converged"] = r.converged;
        j["failed"] = r.failed;
        j["message"] = r.message;
        restarts.push_back(j);
    }
    doc["restarts"] = restarts;
    doc["best_restart"] = res.best_restart;

    Json theta;
    theta["beta"] = to_json(res.theta.beta);
    theta["sigma2"] = number(res.theta.sigma2);
    theta["tau"] = to_json(res.rho);
    doc["theta"] = theta;

    doc["tests"] = detail::tests_json(engine, contrasts);
    detail::append_warnings(doc, data.warnings);
    detail::append_warnings(doc, res.warnings);
    detail::append_warnings(doc, engine.warnings());
    return {doc, res.converged ? kExitOk : kExitNonConvergence};
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateOptions {
    std::string label;
    double scale = kDeskScale;
    std::uint64_t seed = 1;
    Index reps = 20;
    int jobs = 1;
    std::optional<std::string> method;
    std::optional<std::string> criterion;
    double tol = 1e-6;
    int max_iter = 200;
    Index baseline_sims = 1000;
    Index baseline_instances = 100;
    std::optional<std::string> contrast;
    bool timings = false;
};

/// Pairs among the four unconstrained-step variants must agree to this level
/// in both the final criterion and β.
inline constexpr double kAgreementTolerance = 1e-5;

inline Outcome cmd_simulate(const SimulateOptions& o) {
    const SimSetting s = make_setting(o.label, o.scale);
    if (o.reps < 1) throw ParseError("--reps must be positive");
    if (o.jobs < 1) throw ParseError("--jobs must be positive");
    if (!(o.tol > 0.0) || o.max_iter < 1) throw ParseError("--tol and --max-iter must be positive");
    SimConfig cfg;
    if (o.method) cfg.methods = {parse_method(*o.method)};
    if (o.criterion) cfg.criteria = {parse_criterion(*o.criterion)};
    cfg.tol = o.tol;
    cfg.max_iter = o.max_iter;
    cfg.jobs = o.jobs;

    std::vector<std::string> fixed_names;
    for (Index j = 0; j < s.p(); ++j) fixed_names.push_back(j == 0 ? "intercept" : "x" + std::to_string(j));
    Vec l = Vec::Unit(s.p(), s.p() - 1);
    std::string contrast_name = fixed_names.back();
    if (o.contrast) {
        const ContrastSpec c = parse_contrast_flag(*o.contrast);
        const Mat L = resolve_contrast(c, fixed_names);
        if (L.rows() != 1) throw ParseError("the baseline contrast must have a single row");
        l = L.row(0).transpose();
        contrast_name = c.name;
    }

    const ComparisonTable t = compare_methods(s, o.reps, o.seed, cfg);

    Json doc = detail::header("simulate");
    Json setting;
    setting["label"] = s.label;
    setting["scale"] = o.scale;
    setting["n"] = s.n;
    setting["p"] = s.p();
    setting["factors"] = Json::array();
    for (Index k = 0; k < s.dims.r(); ++k) setting["factors"].push_back({{"q", s.dims.qk(k)}, {"levels", s.dims.lk(k)}});
    setting["beta"] = to_json(s.beta);
    setting["sigma2"] = s.sigma2;
    setting["D"] = Json::array();
    for (const Mat& d : s.D) setting["D"].push_back(to_json(d));
    doc["setting"] = setting;
    doc["seed"] = o.seed;
    doc["reps"] = o.reps;
    Json config;
    config["methods"] = Json::array();
    for (Method m : cfg.methods) config["methods"].push_back(to_string(m));
    config["criteria"] = Json::array();
    for (Criterion c : cfg.criteria) config["criteria"].push_back(to_string(c));
    config["tol"] = cfg.tol;
    config["max_iter"] = cfg.max_iter;
    doc["config"] = config;

    Json methods = Json::array();
    for (const MethodSummary& m : t.methods) {
        Json j;
        j["criterion"] = to_string(m.criterion);
        j["method"] = to_string(m.method);
        j["fits"] = m.fits;
        j["errors"] = m.errors;
        j["nonconverged"] = m.nonconverged;
        j["flagged"] = m.flagged;
        j["mean_iterations"] = number(m.mean_iterations);
        if (o.timings) j["mean_seconds"] = number(m.mean_seconds);
        methods.push_back(j);
    }
    doc["methods"] = methods;

    const std::vector<std::string> agreeing{"FS", "FFS", "SFS", "FSFS"};
    auto in_set = [&](const std::string& m) { return std::find(agreeing.begin(), agreeing.end(), m) != agreeing.end(); };
    bool pass = true, compared = false;
    double worst_gap = 0.0, worst_beta = 0.0;
    Json pairs = Json::array();
    for (const PairSummary& p : t.pairs) {
        Json j;
        j["criterion"] = to_string(p.criterion);
        j["a"] = p.a;
        j["b"] = p.b;
        j["used"] = p.used;
        j["beta"] = {{"mae", number(p.beta_mean.mae)}, {"mrd", number(p.beta_mean.mrd)}};
        j["variance"] = {{"mae", number(p.var_mean.mae)}, {"mrd", number(p.var_mean.mrd)}};
        j["beta_mae_max"] = number(p.beta_mae_max);
        j["var_mae_max"] = number(p.var_mae_max);
        j["loglik_gap_max"] = number(p.loglik_gap_max);
        pairs.push_back(j);
        if (!in_set(p.a) || !in_set(p.b) || p.a == p.b) continue;
        compared = true;
        worst_gap = std::max(worst_gap, p.loglik_gap_max);
        worst_beta = std::max(worst_beta, p.beta_mean.mae);
        if (p.used != o.reps || !(p.loglik_gap_max < kAgreementTolerance) || !(p.beta_mean.mae < kAgreementTolerance))
            pass = false;
    }
    doc["pairs"] = pairs;
    Json ag;
    ag["methods"] = agreeing;
    ag["rule"] = "every pair fits all replicates, max log-likelihood gap < 1e-05 and mean MAE(beta) < 1e-05";
    ag["compared"] = compared;
    ag["worst_loglik_gap"] = number(worst_gap);
    ag["worst_beta_mae"] = number(worst_beta);
    ag["pass"] = compared && pass;
    doc["agreement"] = ag;

    if (o.baseline_sims > 0) {
        BaselineConfig bc;
        bc.sims = o.baseline_sims;
        bc.instances = std::min(o.baseline_instances, o.baseline_sims);
        bc.tol = o.tol;
        bc.jobs = o.jobs;
        const DfBaseline b = df_baseline(s, l, o.seed, bc);
        Json j;
        j["contrast"] = contrast_name;
        j["L"] = to_json(l);
        j["sims"] = b.sims;
        j["instances"] = b.instances;
        j["method"] = to_string(bc.method);
        j["criterion"] = to_string(bc.criterion);
        j["truth"] = number(b.truth);
        j["var_S2"] = number(b.var_s2);
        j["mean_numerator"] = number(b.mean_numerator);
        j["direct_mean"] = number(b.direct_mean);
        j["direct_sd"] = number(b.direct_sd);
        j["relative_difference"] = number((b.direct_mean - b.truth) / b.truth);
        j["failed"] = b.failed;
        doc["baseline"] = j;
    } else {
        doc["baseline"] = nullptr;
    }
    doc["definitions"] = {
        {"MAE", "MAE = mean |a - b| over the entries of a parameter block"},
        {"MRD", "MRD = mean 2|a - b| / (|a| + |b| + 1e-12) over the entries of a parameter block"},
    };
    return {doc, kExitOk};
}

// ---------------------------------------------------------------------------
// report

struct Verification {
    Index checked = 0;
    std::vector<std::string> mismatches;
};

/// Recomputes every test in a fit or ACE report from the θ̂ stored in the
/// report and compares the statistics bit for bit.
inline Verification verify_report(const Json& doc, const std::string& data_path, const std::string& spec_path,
                                  const std::string& pedigree_path = {}) {
    const std::string cmd = doc.at("command").get<std::string>();
    const ObservationTable table = read_csv(data_path);
    const ModelSpec spec = read_spec(spec_path);
    const Json& th = doc.at("theta");
    const Vec beta = vec_from_json(th.at("beta"));
    const double sigma2 = get_number(th.at("sigma2"));
    const Criterion crit = parse_criterion(doc.at("settings").at("criterion").get<std::string>());

    Verification v;
    auto check = [&](const DfEngine& engine) {
        for (const Json& t : doc.at("tests")) {
            const detail::NamedContrast c{t.at("name").get<std::string>(), mat_from_json(t.at("L"))};
            if (c.L.cols() != beta.size()) throw ParseError("report: contrast width does not match the model");
            const TestReport r = detail::run_test(engine, c);
            auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
            const bool ok = same(r.statistic, get_number(t.at("statistic"))) && same(r.df, get_number(t.at("df"))) &&
                            same(r.p_value, get_number(t.at("p_value")));
            ++v.checked;
            if (!ok) v.mismatches.push_back(c.name);
        }
    };

    if (cmd == "fit") {
        const ModelData data = build_design(table, spec.design);
        const ProductForms pf = product_forms(data);
        if (beta.size() != data.p()) throw ParseError("report: the data do not match the stored model");
        if (th.contains("rho")) {
            const FactorwiseModel model(data.fs.dims, detail::structures_for(spec, data.fs.dims));
            check(ConstrainedDf(pf, model, ConstrainedState{beta, sigma2, vec_from_json(th.at("rho"))}, crit));
        } else {
            ParamState s;
            s.beta = beta;
            s.sigma2 = sigma2;
            for (const Json& b : th.at("vech")) s.blocks.push_back(vec_from_json(b));
            if (s.r() != data.fs.dims.r()) throw ParseError("report: the data do not match the stored model");
            check(HalfDf(pf, s, crit));
        }
    } else if (cmd == "ace") {
        if (pedigree_path.empty()) throw ParseError("verifying an ACE report needs --pedigree");
        const AceData data = assemble_ace_data(table, spec, read_pedigree(pedigree_path));
        if (beta.size() != data.p()) throw ParseError("report: the data do not match the stored model");
        const AceEvaluator ev(data);
        check(AceDf(ev, beta, sigma2, vec_from_json(th.at("tau")), crit));
    } else {
        throw ParseError("only fit and ace reports can be verified");
    }
    return v;
}

inline Json read_report(const std::string& path) {
    try {
        return Json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Entry point

namespace detail {

/// Writes the document as requested: JSON to a file (or to `out` for "-"),
/// and the table to `out` unless the JSON went there.
inline void emit(const Json& doc, const std::string& json_path, std::ostream& out) {
    if (json_path == "-") {
        out << dump(doc);
        return;
    }
    if (!json_path.empty()) {
        std::ofstream f(json_path, std::ios::binary);
        if (!f) throw ParseError("cannot write '" + json_path + "'");
        f << dump(doc);
    }
    render_table(doc, out);
}

inline void add_fit_flags(CLI::App* cmd, FitOverrides& o, std::string& json) {
    cmd->add_option("--method", o.method, "FS, FFS, SFS, FSFS or CSFS (default FSFS)");
    cmd->add_option("--criterion", o.criterion, "ML or ReML (default ReML)");
    cmd->add_option("--tol", o.tol, "convergence tolerance on the criterion");
    cmd->add_option("--max-iter", o.max_iter, "iteration limit");
    cmd->add_option("--contrast", o.contrasts, "extra contrast, NAME=ROW[;ROW...]")->take_all();
    cmd->add_option("--json", json, "write the machine-readable report here ('-' for standard output)");
}

}  // namespace detail

/// Runs the command line; returns the process exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Linear mixed models by Fisher scoring", "lmmfs"};
    app.require_subcommand(1);

    FitOverrides fo;
    std::string data, spec, pedigree, json, report_path;

    auto* fit_cmd = app.add_subcommand("fit", "fit a linear mixed model");
    fit_cmd->add_option("data", data, "CSV data file")->required();
    fit_cmd->add_option("spec", spec, "model spec file")->required();
    detail::add_fit_flags(fit_cmd, fo, json);

    auto* ace_cmd = app.add_subcommand("ace", "fit the ACE twin model");
    ace_cmd->add_option("data", data, "CSV data file")->required();
    ace_cmd->add_option("pedigree", pedigree, "pedigree CSV file")->required();
    ace_cmd->add_option("spec", spec, "model spec file")->required();
    detail::add_fit_flags(ace_cmd, fo, json);

    SimulateOptions so;
    bool paper_scale = false;
    auto* sim_cmd = app.add_subcommand("simulate", "compare the scoring methods on a simulated setting");
    sim_cmd->add_option("setting", so.label, "S1, S2 or S3")->required();
    sim_cmd->add_option("--scale", so.scale, "fraction of the full design size (default 0.5)");
    sim_cmd->add_option("--seed", so.seed, "random seed (default 1)");
    sim_cmd->add_option("--reps", so.reps, "replicates (default 20)");
    sim_cmd->add_option("--jobs", so.jobs, "worker threads (default 1)");
    sim_cmd->add_option("--method", so.method, "run a single method instead of all five");
    sim_cmd->add_option("--criterion", so.criterion, "run a single criterion instead of both");
    sim_cmd->add_option("--tol", so.tol, "convergence tolerance (default 1e-6)");
    sim_cmd->add_option("--max-iter", so.max_iter, "iteration limit (default 200)");
    sim_cmd->add_option("--contrast", so.contrast, "baseline contrast, NAME=ROW (default: the last coefficient)");
    sim_cmd->add_option("--baseline-sims", so.baseline_sims, "simulations for the df baseline, 0 to skip (default 1000)");
    sim_cmd->add_option("--baseline-instances", so.baseline_instances, "instances with a direct df estimate (default 100)");
    sim_cmd->add_flag("--paper-scale", paper_scale, "full-size design with 10^6 baseline simulations");
    sim_cmd->add_flag("--timings", so.timings, "include mean fit times (output is then not reproducible)");
    sim_cmd->add_option("--json", json, "write the machine-readable report here ('-' for standard output)");

    auto* rep_cmd = app.add_subcommand("report", "print a saved report, optionally verifying its tests");
    rep_cmd->add_option("report", report_path, "JSON report")->required();
    rep_cmd->add_option("--data", data, "data file to verify against");
    rep_cmd->add_option("--spec", spec, "spec file to verify against");
    rep_cmd->add_option("--pedigree", pedigree, "pedigree file (ACE reports)");

    std::vector<const char*> argv{"lmmfs"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "lmmfs: " << e.what() << '\n';
        return kExitParse;
    }

    try {
        Outcome r;
        if (*fit_cmd) {
            r = cmd_fit(data, spec, fo);
        } else if (*ace_cmd) {
            r = cmd_ace(data, pedigree, spec, fo);
        } else if (*sim_cmd) {
            if (paper_scale) {
                so.scale = 1.0;
                so.baseline_sims = 1000000;
                so.baseline_instances = 1000;
            }
            r = cmd_simulate(so);
        } else {
            const Json doc = read_report(report_path);
            render_table(doc, out);
            if (data.empty() != spec.empty()) throw ParseError("--data and --spec go together");
            if (!data.empty()) {
                const Verification v = verify_report(doc, data, spec, pedigree);
                if (!v.mismatches.empty()) {
                    err << "lmmfs: " << v.mismatches.size() << " of " << v.checked << " tests do not reproduce:";
                    for (const auto& m : v.mismatches) err << ' ' << m;
                    err << '\n';
                    return kExitFailure;
                }
                out << "\nVerified: all " << v.checked << " tests reproduce exactly from the stored estimates\n";
            }
            return kExitOk;
        }
        detail::emit(r.doc, json, out);
        if (r.exit_code == kExitNonConvergence) err << "lmmfs: the fit did not converge\n";
        return r.exit_code;
    } catch (const std::exception& e) {
        err << "lmmfs: error: " << e.what() << '\n';
        return exit_code_for(e);
    }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, out, err);
}

}  // namespace lmmfs::cli
