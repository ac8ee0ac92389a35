#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <locale>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmmfs/inference.hpp"
#include "lmmfs/matrix_kernels.hpp"

namespace lmmfs::cli {

/// Reports keep keys in insertion order so that output is stable.
using Json = nlohmann::ordered_json;

inline constexpr int kReportFormat = 1;

// ---------------------------------------------------------------------------
// Encoding
//
// Numbers are written in the shortest form that reads back to the same
// double; non-finite values become null.

inline Json number(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

inline Json number(const std::optional<double>& x) { return x ? number(*x) : Json(nullptr); }

inline Json to_json(const Vec& v) {
    Json a = Json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(number(v[i]));
    return a;
}

/// Row-major nested arrays.
inline Json to_json(const Mat& m) {
    Json a = Json::array();
    for (Index i = 0; i < m.rows(); ++i) a.push_back(to_json(Vec(m.row(i).transpose())));
    return a;
}

inline Json to_json(const std::vector<std::string>& v) { return Json(v); }

inline double get_number(const Json& j) {
    if (j.is_null()) return std::nan("");
    if (!j.is_number()) throw ParseError("report: expected a number");
    return j.get<double>();
}

inline Vec vec_from_json(const Json& j) {
    if (!j.is_array()) throw ParseError("report: expected an array");
    Vec v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = get_number(j[i]);
    return v;
}

inline Mat mat_from_json(const Json& j) {
    if (!j.is_array() || j.empty()) throw ParseError("report: expected a non-empty nested array");
    Mat m(static_cast<Index>(j.size()), static_cast<Index>(j[0].size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        const Vec row = vec_from_json(j[i]);
        if (row.size() != m.cols()) throw ParseError("report: ragged matrix");
        m.row(static_cast<Index>(i)) = row.transpose();
    }
    return m;
}

inline Json test_json(const TestReport& t, const Mat& L) {
    Json j;
    j["name"] = t.name;
    j["type"] = t.is_f ? "F" : "t";
    j["L"] = to_json(L);
    j["estimate"] = to_json(t.estimate);
    j["statistic"] = number(t.statistic);
    j["numerator_df"] = t.rank;
    j["df"] = number(t.df);
    j["p_value"] = number(t.p_value);
    j["S2"] = number(t.S2);
    j["var_S2"] = number(t.var_S2);
    if (t.is_f) {
        Json rows = Json::array();
        for (double v : t.row_df) rows.push_back(number(v));
        j["row_df"] = rows;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Display

inline std::string fmt(double x, int digits = 6) {
    if (std::isnan(x)) return "NA";
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os << std::setprecision(digits) << x;
    return os.str();
}

inline std::string fmt(const Json& j, int digits = 6) {
    if (j.is_null()) return "NA";
    if (j.is_boolean()) return j.get<bool>() ? "yes" : "no";
    if (j.is_number_integer()) return std::to_string(j.get<long long>());
    if (j.is_number()) return fmt(j.get<double>(), digits);
    if (j.is_string()) return j.get<std::string>();
    return j.dump();
}

/// Columns padded to their widest cell; numeric columns right aligned.
class TextTable {
public:
    explicit TextTable(std::vector<std::string> header, std::vector<bool> right = {})
        : header_(std::move(header)), right_(std::move(right)) {
        right_.resize(header_.size(), false);
    }

    void add(std::vector<std::string> row) {
        row.resize(header_.size());
        rows_.push_back(std::move(row));
    }

    void print(std::ostream& os, const std::string& indent = "  ") const {
        std::vector<std::size_t> w(header_.size(), 0);
        for (std::size_t c = 0; c < header_.size(); ++c) {
            w[c] = header_[c].size();
            for (const auto& r : rows_) w[c] = std::max(w[c], r[c].size());
        }
        auto line = [&](const std::vector<std::string>& r) {
            std::string s = indent;
            for (std::size_t c = 0; c < r.size(); ++c) {
                const std::string pad(w[c] - r[c].size(), ' ');
                s += right_[c] ? pad + r[c] : r[c] + pad;
                if (c + 1 < r.size()) s += "  ";
            }
            while (!s.empty() && s.back() == ' ') s.pop_back();
            os << s << '\n';
        };
        line(header_);
        for (const auto& r : rows_) line(r);
    }

private:
    std::vector<std::string> header_;
    std::vector<bool> right_;
    std::vector<std::vector<std::string>> rows_;
};

namespace detail {

inline void print_tests(const Json& tests, std::ostream& os) {
    if (tests.empty()) return;
    os << "\nTests (Satterthwaite degrees of freedom)\n";
    TextTable t({"name", "type", "estimate", "statistic", "num df", "den df", "p-value"},
                {false, false, true, true, true, true, true});
    for (const Json& x : tests) {
        std::string est;
        for (std::size_t i = 0; i < x.at("estimate").size(); ++i) est += (i ? ", " : "") + fmt(x.at("estimate").at(i));
        t.add({x.at("name").get<std::string>(), x.at("type").get<std::string>(), est, fmt(x.at("statistic")),
               fmt(x.at("numerator_df")), fmt(x.at("df")), fmt(x.at("p_value"), 4)});
    }
    t.print(os);
}

inline void print_fixed(const Json& fixed, std::ostream& os) {
    os << "\nFixed effects\n";
    TextTable t({"name", "estimate", "se"}, {false, true, true});
    for (const Json& b : fixed) t.add({b.at("name").get<std::string>(), fmt(b.at("estimate")), fmt(b.at("se"))});
    t.print(os);
}

inline void print_warnings(const Json& doc, std::ostream& os) {
    if (!doc.contains("warnings") || doc.at("warnings").empty()) return;
    os << "\nWarnings\n";
    for (const Json& w : doc.at("warnings")) os << "  - " << w.get<std::string>() << '\n';
}

inline void print_fit_header(const Json& doc, const std::string& title, std::ostream& os) {
    const Json& s = doc.at("settings");
    const Json& f = doc.at("fit");
    const bool reml = s.at("criterion") == "ReML";
    os << title << " (" << s.at("criterion").get<std::string>() << ", " << s.at("method").get<std::string>() << ")\n";
    os << "  n = " << fmt(doc.at("model").at("n")) << ", p = " << fmt(doc.at("model").at("p"))
       << ", response = " << doc.at("model").at("response").get<std::string>() << '\n';
    os << "  " << (f.at("converged").get<bool>() ? "converged" : "NOT converged") << " after " << fmt(f.at("iterations"))
       << " iterations; " << (reml ? "restricted " : "") << "log-likelihood " << fmt(f.at("loglik"), 10) << '\n';
}

inline void render_fit(const Json& doc, std::ostream& os) {
    print_fit_header(doc, "Linear mixed model", os);
    print_fixed(doc.at("fixed_effects"), os);
    os << "\nResidual variance " << fmt(doc.at("sigma2")) << '\n';
    for (const Json& r : doc.at("random_effects")) {
        os << "\nFactor " << r.at("factor").get<std::string>() << " (" << fmt(r.at("levels")) << " levels, "
           << r.at("structure").get<std::string>() << "), random-effect covariance\n";
        const Json& names = r.at("effects");
        std::vector<std::string> header{""};
        for (const Json& n : names) header.push_back(n.get<std::string>());
        TextTable t(header, std::vector<bool>(header.size(), true));
        for (std::size_t i = 0; i < names.size(); ++i) {
            std::vector<std::string> row{names.at(i).get<std::string>()};
            for (std::size_t j = 0; j <= i; ++j) row.push_back(fmt(r.at("covariance").at(i).at(j)));
            t.add(row);
        }
        t.print(os);
        if (r.contains("parameters")) {
            os << "  parameters:";
            for (auto it = r.at("parameters").begin(); it != r.at("parameters").end(); ++it)
                os << ' ' << it.key() << '=' << fmt(it.value());
            os << '\n';
        }
    }
    print_tests(doc.at("tests"), os);
    print_warnings(doc, os);
}

inline void render_ace(const Json& doc, std::ostream& os) {
    print_fit_header(doc, "ACE twin model", os);
    const Json& fam = doc.at("families");
    os << "  " << fmt(fam.at("count")) << " families in " << fam.at("types").size() << " family types\n";
    print_fixed(doc.at("fixed_effects"), os);
    os << "\nVariance components\n";
    TextTable t({"component", "estimate", "se", "identified"}, {false, true, true, false});
    const Json& vc = doc.at("variance_components");
    for (const char* k : {"additive", "common", "residual"}) {
        const Json& c = vc.at(k);
        t.add({k, fmt(c.at("estimate")), fmt(c.at("se")), fmt(c.at("identified"))});
    }
    t.print(os);
    os << "\nRestarts\n";
    TextTable rs({"start", "loglik", "iterations", "converged", "note"}, {false, true, true, false, false});
    for (std::size_t i = 0; i < doc.at("restarts").size(); ++i) {
        const Json& r = doc.at("restarts").at(i);
        std::string start = "(" + fmt(r.at("tau_start").at(0)) + ", " + fmt(r.at("tau_start").at(1)) + ")";
        std::string note = r.at("failed").get<bool>() ? r.at("message").get<std::string>() : "";
        if (doc.at("best_restart").get<std::size_t>() == i) note = note.empty() ? "selected" : note + "; selected";
        rs.add({start, fmt(r.at("loglik"), 10), fmt(r.at("iterations")), fmt(r.at("converged")), note});
    }
    rs.print(os);
    print_tests(doc.at("tests"), os);
    print_warnings(doc, os);
}

inline void render_simulate(const Json& doc, std::ostream& os) {
    const Json& s = doc.at("setting");
    os << "Simulation " << s.at("label").get<std::string>() << " (scale " << fmt(s.at("scale")) << ", n = " << fmt(s.at("n"))
       << "), " << fmt(doc.at("reps")) << " replicates, seed " << fmt(doc.at("seed")) << '\n';

    os << "\nMethods\n";
    const bool timed = !doc.at("methods").empty() && doc.at("methods").at(0).contains("mean_seconds");
    std::vector<std::string> head{"criterion", "method", "fits", "errors", "nonconverged", "flagged", "mean iterations"};
    if (timed) head.push_back("mean seconds");
    TextTable m(head, {false, false, true, true, true, true, true, true});
    for (const Json& x : doc.at("methods")) {
        std::vector<std::string> row{x.at("criterion").get<std::string>(), x.at("method").get<std::string>(), fmt(x.at("fits")),
                                     fmt(x.at("errors")),    fmt(x.at("nonconverged")),           fmt(x.at("flagged")),
                                     fmt(x.at("mean_iterations"), 4)};
        if (timed) row.push_back(fmt(x.at("mean_seconds"), 4));
        m.add(row);
    }
    m.print(os);

    os << "\nPairwise comparisons (MAE and MRD averaged over replicates)\n";
    TextTable p({"criterion", "a", "b", "used", "beta MAE", "beta MRD", "var MAE", "var MRD", "max beta MAE", "max loglik gap"},
                {false, false, false, true, true, true, true, true, true, true});
    for (const Json& x : doc.at("pairs")) {
        p.add({x.at("criterion").get<std::string>(), x.at("a").get<std::string>(), x.at("b").get<std::string>(), fmt(x.at("used")),
               fmt(x.at("beta").at("mae"), 3), fmt(x.at("beta").at("mrd"), 3), fmt(x.at("variance").at("mae"), 3),
               fmt(x.at("variance").at("mrd"), 3), fmt(x.at("beta_mae_max"), 3), fmt(x.at("loglik_gap_max"), 3)});
    }
    p.print(os);

    const Json& ag = doc.at("agreement");
    os << "\nAgreement of " << ag.at("methods").dump() << ": " << (ag.at("pass").get<bool>() ? "PASS" : "FAIL") << " ("
       << ag.at("rule").get<std::string>() << ")\n";

    if (!doc.at("baseline").is_null()) {
        const Json& b = doc.at("baseline");
        os << "\nDegrees of freedom for " << b.at("contrast").get<std::string>() << " (" << fmt(b.at("sims"))
           << " simulations, " << fmt(b.at("instances")) << " instances)\n";
        TextTable t({"moment-matching", "direct mean", "direct sd", "relative difference", "failed"},
                    {true, true, true, true, true});
        t.add({fmt(b.at("truth")), fmt(b.at("direct_mean")), fmt(b.at("direct_sd")), fmt(b.at("relative_difference"), 4),
               fmt(b.at("failed"))});
        t.print(os);
    }
    os << "\n" << doc.at("definitions").at("MAE").get<std::string>() << "\n" << doc.at("definitions").at("MRD").get<std::string>() << '\n';
}

}  // namespace detail

/// Human-readable table for any report document.
inline void render_table(const Json& doc, std::ostream& os) {
    const std::string cmd = doc.value("command", "");
    if (cmd == "fit") {
        detail::render_fit(doc, os);
    } else if (cmd == "ace") {
        detail::render_ace(doc, os);
    } else if (cmd == "simulate") {
        detail::render_simulate(doc, os);
    } else {
        throw ParseError("report: unknown command '" + cmd + "'");
    }
}

inline std::string dump(const Json& doc) { return doc.dump(2) + "\n"; }

}  // namespace lmmfs::cli
