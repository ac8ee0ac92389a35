#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <locale>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lmmfs/cli/csv.hpp"
#include "lmmfs/constraints.hpp"
#include "lmmfs/errors.hpp"
#include "lmmfs/estimators.hpp"
#include "lmmfs/model.hpp"

namespace lmmfs::cli {

struct ContrastSpec {
    std::string name;
    /// Unresolved rows; see resolve_contrast.
    std::vector<std::string> rows;
};

/// Model configuration read from a spec file.
///
///     # comment
///     response = score
///     fixed = hours, age
///     intercept = true
///     random = student, teacher
///     random.teacher.covariates = hours
///     random.teacher.intercept = false
///     random.teacher.structure = diagonal
///     method = FSFS
///     criterion = ReML
///     tol = 1e-6
///     max_iter = 200
///     contrast.hours = hours
///     contrast.joint = hours; age
///     family = family_id
///     member = subject
///
/// Keys are case sensitive. Lists are comma separated; contrast rows are
/// separated by ';'.
struct ModelSpec {
    DesignSpec design;
    std::optional<Method> method;
    std::optional<Criterion> criterion;
    std::optional<double> tol;
    std::optional<int> max_iter;
    std::vector<ContrastSpec> contrasts;
    /// ACE only: data columns identifying the family and the subject.
    std::string family_column;
    std::string member_column;

    bool structured() const {
        return std::any_of(design.random.begin(), design.random.end(),
                           [](const RandomTermSpec& t) { return parse_structure(t.structure) != StructureKind::Unstructured; });
    }

    FitConfig fit_config(Method default_method, Criterion default_criterion) const {
        FitConfig cfg;
        cfg.method = method.value_or(default_method);
        cfg.criterion = criterion.value_or(default_criterion);
        if (tol) cfg.tol = *tol;
        if (max_iter) cfg.max_iter = *max_iter;
        return cfg;
    }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(trim(cur));
    if (out.size() == 1 && out.front().empty()) out.clear();
    return out;
}

inline std::optional<double> parse_number(const std::string& s) {
    std::istringstream in(s);
    in.imbue(std::locale::classic());
    double x = 0.0;
    in >> x;
    if (in.fail() || !in.eof() || !std::isfinite(x)) return std::nullopt;
    return x;
}

inline bool parse_bool(const std::string& s, const std::string& where) {
    std::string t;
    for (char ch : s) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    if (t == "true" || t == "yes" || t == "1") return true;
    if (t == "false" || t == "no" || t == "0") return false;
    throw ParseError(where + ": expected true or false, found '" + s + "'");
}

}  // namespace detail

/// Parses "name=row; row" or a bare row list as given to --contrast.
inline ContrastSpec parse_contrast_flag(const std::string& text) {
    ContrastSpec c;
    const auto eq = text.find('=');
    const std::string body = eq == std::string::npos ? text : text.substr(eq + 1);
    c.name = detail::trim(eq == std::string::npos ? text : text.substr(0, eq));
    c.rows = detail::split_list(body, ';');
    if (c.name.empty() || c.rows.empty()) throw ParseError("malformed contrast '" + text + "'");
    return c;
}

inline ModelSpec parse_spec_text(const std::string& text, const std::string& source = "spec") {
    ModelSpec spec;
    std::map<std::string, std::size_t> scalar_line;
    std::map<std::string, RandomTermSpec> terms;
    std::vector<std::string> order;
    bool have_response = false;

    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        if (line_no == 1 && raw.compare(0, 3, "\xEF\xBB\xBF") == 0) raw.erase(0, 3);
        if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
        const std::string line = detail::trim(raw);
        if (line.empty() || line == "\r") continue;
        const std::string where = source + " line " + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(where + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (!value.empty() && value.back() == '\r') value = detail::trim(value.substr(0, value.size() - 1));

        const bool repeatable = key == "random" || key.rfind("contrast.", 0) == 0;
        if (!repeatable) {
            auto [it, fresh] = scalar_line.emplace(key, line_no);
            if (!fresh) throw ParseError(where + ": '" + key + "' already set on line " + std::to_string(it->second));
        }

        if (key == "response") {
            if (value.empty()) throw ParseError(where + ": response column is empty");
            spec.design.response = value;
            have_response = true;
        } else if (key == "fixed") {
            spec.design.fixed = detail::split_list(value, ',');
        } else if (key == "intercept") {
            spec.design.intercept = detail::parse_bool(value, where);
        } else if (key == "random") {
            for (const std::string& f : detail::split_list(value, ',')) {
                if (f.empty()) throw ParseError(where + ": empty factor name");
                if (std::find(order.begin(), order.end(), f) != order.end())
                    throw ParseError(where + ": factor '" + f + "' declared twice");
                order.push_back(f);
                terms[f].factor = f;
            }
        } else if (key.rfind("random.", 0) == 0) {
            const auto dot = key.rfind('.');
            const std::string factor = key.substr(7, dot - 7), field = key.substr(dot + 1);
            if (dot <= 7 || factor.empty() || std::find(order.begin(), order.end(), factor) == order.end())
                throw ParseError(where + ": '" + key + "' refers to an undeclared factor");
            RandomTermSpec& t = terms[factor];
            if (field == "covariates") {
                t.covariates = detail::split_list(value, ',');
            } else if (field == "intercept") {
                t.intercept = detail::parse_bool(value, where);
            } else if (field == "structure") {
                (void)parse_structure(value);
                t.structure = value;
            } else {
                throw ParseError(where + ": unknown key '" + key + "'");
            }
        } else if (key == "method") {
            spec.method = parse_method(value);
        } else if (key == "criterion") {
            spec.criterion = parse_criterion(value);
        } else if (key == "tol") {
            const auto x = detail::parse_number(value);
            if (!x || !(*x > 0.0)) throw ParseError(where + ": tol must be a positive number");
            spec.tol = *x;
        } else if (key == "max_iter") {
            int v = 0;
            const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
            if (ec != std::errc() || ptr != value.data() + value.size() || v < 1)
                throw ParseError(where + ": max_iter must be a positive integer");
            spec.max_iter = v;
        } else if (key.rfind("contrast.", 0) == 0) {
            ContrastSpec c{key.substr(9), detail::split_list(value, ';')};
            if (c.name.empty() || c.rows.empty()) throw ParseError(where + ": malformed contrast");
            for (const auto& prev : spec.contrasts)
                if (prev.name == c.name) throw ParseError(where + ": contrast '" + c.name + "' defined twice");
            spec.contrasts.push_back(std::move(c));
        } else if (key == "family") {
            spec.family_column = value;
        } else if (key == "member") {
            spec.member_column = value;
        } else {
            throw ParseError(where + ": unknown key '" + key + "'");
        }
    }
    if (!have_response) throw ParseError(source + ": missing 'response'");
    for (const auto& f : order) spec.design.random.push_back(terms[f]);
    return spec;
}

inline ModelSpec read_spec(const std::string& path) { return parse_spec_text(read_file(path), path); }

/// Resolves one contrast row against the fixed-effect names. A row is either p
/// numbers separated by commas, or a signed combination of effect names such
/// as "hours - 0.5*age". Terms and signs are separated by blanks, so names may
/// contain '-'.
inline Vec resolve_contrast_row(const std::string& row, const std::vector<std::string>& names) {
    const auto p = static_cast<Index>(names.size());
    const auto cells = detail::split_list(row, ',');
    if (!cells.empty() && std::all_of(cells.begin(), cells.end(), [](const std::string& c) { return detail::parse_number(c).has_value(); })) {
        if (static_cast<Index>(cells.size()) != p) {
            throw ParseError("contrast row '" + row + "' has " + std::to_string(cells.size()) + " entries; the model has " +
                             std::to_string(p) + " fixed effects");
        }
        Vec l(p);
        for (Index j = 0; j < p; ++j) l[j] = *detail::parse_number(cells[static_cast<std::size_t>(j)]);
        return l;
    }

    // Whitespace-separated tokens: a lone '+' or '-' sets the sign of the next
    // term, and a term may carry its own leading sign and a "coef*" prefix.
    Vec l = Vec::Zero(p);
    std::vector<std::pair<double, std::string>> terms;
    std::istringstream in(row);
    std::string tok;
    double sign = 1.0;
    bool pending = false;
    while (in >> tok) {
        if (tok == "+" || tok == "-") {
            if (pending) throw ParseError("malformed contrast row '" + row + "'");
            sign = tok == "-" ? -1.0 : 1.0;
            pending = true;
            continue;
        }
        if (!terms.empty() && !pending) throw ParseError("missing '+' or '-' in contrast row '" + row + "'");
        if (tok.size() > 1 && (tok[0] == '+' || tok[0] == '-')) {
            if (tok[0] == '-') sign = -sign;
            tok.erase(0, 1);
        }
        double coef = 1.0;
        if (const auto star = tok.find('*'); star != std::string::npos) {
            const auto c = detail::parse_number(tok.substr(0, star));
            if (!c) throw ParseError("bad coefficient in contrast row '" + row + "'");
            coef = *c;
            tok.erase(0, star + 1);
        }
        terms.emplace_back(sign * coef, tok);
        sign = 1.0;
        pending = false;
    }
    if (terms.empty() || pending) throw ParseError("malformed contrast row '" + row + "'");
    for (const auto& [coef, name] : terms) {
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw ParseError("contrast refers to unknown fixed effect '" + name + "'");
        l[it - names.begin()] += coef;
    }
    return l;
}

inline Mat resolve_contrast(const ContrastSpec& c, const std::vector<std::string>& names) {
    Mat L(static_cast<Index>(c.rows.size()), static_cast<Index>(names.size()));
    for (std::size_t i = 0; i < c.rows.size(); ++i) L.row(static_cast<Index>(i)) = resolve_contrast_row(c.rows[i], names).transpose();
    return L;
}

}  // namespace lmmfs::cli
