#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <locale>
#include <random>
#include <sstream>

#include <unistd.h>

#include "lmmfs/cli/commands.hpp"

using namespace lmmfs;
using namespace lmmfs::cli;

namespace {

namespace fs = std::filesystem;

const std::string kExamples = LMMFS_EXAMPLES_DIR;

std::string example(const std::string& name) { return kExamples + "/" + name; }

/// Scratch directory removed at the end of each test.
class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = fs::temp_directory_path() /
                ("lmmfs_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }

    std::string write(const std::string& name, const std::string& text) const {
        const fs::path p = path_ / name;
        std::ofstream(p, std::ios::binary) << text;
        return p.string();
    }
    std::string path(const std::string& name) const { return (path_ / name).string(); }

private:
    fs::path path_;
};

struct RunResult {
    int code;
    std::string out;
    std::string err;
};

RunResult run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

/// Decimal comma, to check that parsing ignores the global locale.
struct CommaDecimal : std::numpunct<char> {
    char do_decimal_point() const override { return ','; }
    char do_thousands_sep() const override { return '.'; }
    std::string do_grouping() const override { return "\3"; }
};

}  // namespace

// ---------------------------------------------------------------------------
// CSV

TEST(Csv, QuotedFieldsAndLineEndings) {
    const std::string text = "\xEF\xBB\xBF" "a,b,c\r\n1,\"x, y\",\"say \"\"hi\"\"\"\r\n\r\n 2 ,\"multi\nline\",\n";
    const ObservationTable t = read_csv_text(text);
    EXPECT_EQ(t.header(), (std::vector<std::string>{"a", "b", "c"}));
    ASSERT_EQ(t.rows(), 2);
    EXPECT_EQ(t.labels("b")[0], "x, y");
    EXPECT_EQ(t.labels("c")[0], "say \"hi\"");
    EXPECT_EQ(t.labels("a")[1], "2");
    EXPECT_EQ(t.labels("b")[1], "multi\nline");
    EXPECT_EQ(t.labels("c")[1], "");
}

TEST(Csv, MalformedInputIsAParseError) {
    EXPECT_THROW(read_csv_text(""), ParseError);
    EXPECT_THROW(read_csv_text("a,b\n1\n"), ParseError);
    EXPECT_THROW(read_csv_text("a,a\n1,2\n"), ParseError);
    EXPECT_THROW(read_csv_text("a,b\n\"1,2\n"), ParseError);
    EXPECT_THROW(read_csv_text("a,b\n\"1\"x,2\n"), ParseError);
    EXPECT_THROW(read_csv("/nonexistent/file.csv"), ParseError);
}

TEST(Csv, NumbersIgnoreTheGlobalLocale) {
    const std::locale saved = std::locale::global(std::locale(std::locale::classic(), new CommaDecimal));
    const ObservationTable t = read_csv_text("x\n1.5\n-2e-3\n");
    const Vec v = t.numeric("x");
    std::locale::global(saved);
    EXPECT_EQ(v[0], 1.5);
    EXPECT_EQ(v[1], -2e-3);
    EXPECT_THROW(read_csv_text("x\n1,5\n").numeric("x"), ParseError);
}

// ---------------------------------------------------------------------------
// Spec files and contrasts

TEST(SpecFile, FullExample) {
    const ModelSpec s = parse_spec_text(
        "# comment\n"
        "response = y   # trailing comment\n"
        "fixed = a, b\n"
        "intercept = no\n"
        "random = g1\n"
        "random = g2\n"
        "random.g2.covariates = a\n"
        "random.g2.intercept = false\n"
        "random.g2.structure = ar1\n"
        "method = CSFS\n"
        "criterion = ML\n"
        "tol = 1e-8\n"
        "max_iter = 50\n"
        "contrast.j = a; b\n");
    EXPECT_EQ(s.design.response, "y");
    EXPECT_EQ(s.design.fixed, (std::vector<std::string>{"a", "b"}));
    EXPECT_FALSE(s.design.intercept);
    ASSERT_EQ(s.design.random.size(), 2u);
    EXPECT_EQ(s.design.random[0].factor, "g1");
    EXPECT_TRUE(s.design.random[0].intercept);
    EXPECT_EQ(s.design.random[1].covariates, (std::vector<std::string>{"a"}));
    EXPECT_FALSE(s.design.random[1].intercept);
    EXPECT_TRUE(s.structured());
    const FitConfig cfg = s.fit_config(Method::FS, Criterion::ReML);
    EXPECT_EQ(cfg.method, Method::CSFS);
    EXPECT_EQ(cfg.criterion, Criterion::ML);
    EXPECT_EQ(cfg.tol, 1e-8);
    EXPECT_EQ(cfg.max_iter, 50);
    ASSERT_EQ(s.contrasts.size(), 1u);
    EXPECT_EQ(s.contrasts[0].rows.size(), 2u);
}

TEST(SpecFile, DefaultsAreIntercepts) {
    const ModelSpec s = parse_spec_text("response = y\nrandom = g\n");
    EXPECT_TRUE(s.design.intercept);
    EXPECT_TRUE(s.design.fixed.empty());
    EXPECT_TRUE(s.design.random[0].intercept);
    EXPECT_EQ(s.design.random[0].structure, "unstructured");
    EXPECT_FALSE(s.structured());
}

TEST(SpecFile, Errors) {
    EXPECT_THROW(parse_spec_text("fixed = a\n"), ParseError);
    EXPECT_THROW(parse_spec_text("response = y\ncolour = red\n"), ParseError);
    EXPECT_THROW(parse_spec_text("response = y\nresponse = z\n"), ParseError);
    EXPECT_THROW(parse_spec_text("response = y\nrandom.g.structure = ar1\nrandom = g\n"), ParseError);
    EXPECT_THROW(parse_spec_text("response = y\nrandom = g\nrandom.g.structure = spiral\n"), ParseError);
    EXPECT_THROW(parse_spec_text("response = y\nmethod = Newton\n"), ParseError);
    EXPECT_THROW(parse_spec_text("response = y\nmax_iter = 2.5\n"), ParseError);
    EXPECT_THROW(parse_spec_text("response = y\njust text\n"), ParseError);
    EXPECT_THROW(parse_spec_text("response = y\nrandom = g, g\n"), ParseError);
}

TEST(Contrasts, NumericAndNamedRows) {
    const std::vector<std::string> names{"(Intercept)", "x", "x-squared"};
    EXPECT_EQ(resolve_contrast_row("0, 1, -1", names), (Vec(3) << 0, 1, -1).finished());
    EXPECT_EQ(resolve_contrast_row("x", names), (Vec(3) << 0, 1, 0).finished());
    EXPECT_EQ(resolve_contrast_row("x - 0.5*x-squared", names), (Vec(3) << 0, 1, -0.5).finished());
    EXPECT_EQ(resolve_contrast_row("-x + 2*(Intercept)", names), (Vec(3) << 2, -1, 0).finished());
    EXPECT_THROW(resolve_contrast_row("0, 1", names), ParseError);
    EXPECT_THROW(resolve_contrast_row("z", names), ParseError);
    EXPECT_THROW(resolve_contrast_row("x x", names), ParseError);
    EXPECT_THROW(resolve_contrast_row("x -", names), ParseError);
    const ContrastSpec c = parse_contrast_flag("both = x; x-squared");
    EXPECT_EQ(c.name, "both");
    EXPECT_EQ(resolve_contrast(c, names).rows(), 2);
}

// ---------------------------------------------------------------------------
// Pedigrees

TEST(Pedigree, ReadsPairsAndDeclarations) {
    const auto fams = read_pedigree_table(read_csv_text(
        "family,member_a,member_b,relation,reared_together\n"
        "f1,a,b,MZ,\n"
        "f1,a,c,full,no\n"
        "f1,b,c,full,no\n"
        "f2,d,,,\n"));
    ASSERT_EQ(fams.size(), 2u);
    EXPECT_EQ(fams[0].members, (std::vector<std::string>{"a", "b", "c"}));
    ASSERT_EQ(fams[0].pairs.size(), 3u);
    EXPECT_TRUE(fams[0].pairs[0].reared_together);
    EXPECT_FALSE(fams[0].pairs[1].reared_together);
    EXPECT_EQ(fams[1].members.size(), 1u);
}

TEST(Pedigree, InconsistentDeclarationsArePedigreeErrors) {
    const std::string head = "family,member_a,member_b,relation,reared_together\n";
    EXPECT_THROW(read_pedigree_table(read_csv_text(head + "f,a,b,MZ,yes\nf,b,a,unrelated,yes\n")), PedigreeError);
    EXPECT_THROW(read_pedigree_table(read_csv_text(head + "f,a,b,cousin,yes\n")), PedigreeError);
    EXPECT_THROW(read_pedigree_table(read_csv_text(head + "f,a,b,,yes\n")), PedigreeError);
    EXPECT_THROW(read_pedigree_table(read_csv_text(head + "f,a,b,MZ,maybe\n")), PedigreeError);
    EXPECT_THROW(read_pedigree_table(read_csv_text(head + "f,a,b,MZ,yes\nf,a,c,DZ,yes\nf,b,c,half,yes\n")),
                 PedigreeError);
    EXPECT_THROW(read_pedigree_table(read_csv_text("family,member_a\nf,a\n")), ParseError);
}

TEST(Pedigree, DataJoinMakesSingletonsAndRejectsDuplicates) {
    const auto fams = read_pedigree_table(read_csv_text(
        "family,member_a,member_b,relation,reared_together\nf1,a,b,MZ,yes\nf1,z,,,\n"));
    const ModelSpec spec = parse_spec_text("response = y\nfamily = fam\nmember = id\n");
    const AceData d = assemble_ace_data(read_csv_text("fam,id,y\nf1,a,1\nf1,b,2\nf9,q,3\nf1,c,4\n"), spec, fams);
    EXPECT_EQ(d.n(), 4);
    // One MZ pair plus two singletons (q and c), z has no data.
    EXPECT_EQ(d.family_ids.size(), 3u);
    EXPECT_THROW(assemble_ace_data(read_csv_text("fam,id,y\nf1,a,1\nf1,a,2\n"), spec, fams), PedigreeError);
    EXPECT_THROW(assemble_ace_data(read_csv_text("fam,id,y\nf1,a,1\n"), parse_spec_text("response = y\n"), fams),
                 ParseError);
}

// ---------------------------------------------------------------------------
// fit

TEST(FitCommand, NoRandomTermsGivesOls) {
    TempDir dir;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> z;
    const Index n = 40;
    Mat X(n, 3);
    Vec y(n);
    std::ostringstream csv;
    csv.precision(17);
    csv << "y,u,v\n";
    for (Index i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        X(i, 1) = z(rng);
        X(i, 2) = z(rng);
        y[i] = 1.0 + 2.0 * X(i, 1) - X(i, 2) + z(rng);
        csv << y[i] << ',' << X(i, 1) << ',' << X(i, 2) << '\n';
    }
    const std::string data = dir.write("d.csv", csv.str());
    const std::string spec = dir.write("m.spec", "response = y\nfixed = u, v\n");
    const Outcome r = cmd_fit(data, spec);
    EXPECT_EQ(r.exit_code, kExitOk);

    const Mat xtx = X.transpose() * X;
    const Vec ols = xtx.ldlt().solve(X.transpose() * y);
    const Vec resid = y - X * ols;
    const double s2 = resid.squaredNorm() / static_cast<double>(n - 3);
    const Vec se = (s2 * xtx.inverse()).diagonal().cwiseSqrt();
    for (Index j = 0; j < 3; ++j) {
        const Json& b = r.doc["fixed_effects"][static_cast<std::size_t>(j)];
        EXPECT_NEAR(b["estimate"].get<double>(), ols[j], 1e-10);
        EXPECT_NEAR(b["se"].get<double>(), se[j], 1e-10);
        // Residual df for every coefficient when there are no random effects.
        EXPECT_NEAR(r.doc["tests"][static_cast<std::size_t>(j)]["df"].get<double>(), n - 3.0, 1e-6);
    }
    EXPECT_NEAR(r.doc["sigma2"].get<double>(), s2, 1e-10);
    EXPECT_TRUE(r.doc["random_effects"].empty());
}

TEST(FitCommand, UnknownColumnExitsWithParseError) {
    TempDir dir;
    const std::string data = dir.write("d.csv", "y,x\n1,2\n3,4\n5,7\n");
    const std::string spec = dir.write("m.spec", "response = y\nfixed = x, wobble\n");
    const RunResult r = run_cli({"fit", data, spec});
    EXPECT_EQ(r.code, kExitParse);
    EXPECT_NE(r.err.find("wobble"), std::string::npos);
}

TEST(FitCommand, RankDeficientDesignExitsDegenerate) {
    TempDir dir;
    const std::string data = dir.write("d.csv", "y,a,b\n1,1,2\n2,2,4\n4,3,6\n3,5,10\n");
    const std::string spec = dir.write("m.spec", "response = y\nfixed = a, b\n");
    EXPECT_EQ(run_cli({"fit", data, spec}).code, kExitDegenerate);
}

TEST(FitCommand, SatExampleHasTwoCrossedFactors) {
    const Outcome r = cmd_fit(example("sat.csv"), example("sat.spec"));
    EXPECT_EQ(r.exit_code, kExitOk);
    const Json& re = r.doc["random_effects"];
    ASSERT_EQ(re.size(), 2u);
    EXPECT_EQ(re[0]["levels"].get<int>(), 122);
    EXPECT_EQ(re[1]["levels"].get<int>(), 12);
    for (const Json& f : re) {
        EXPECT_EQ(f["effects"].size(), 1u);
        EXPECT_GT(f["covariance"][0][0].get<double>(), 0.0);
    }
    EXPECT_TRUE(r.doc["fit"]["converged"].get<bool>());
    // Three coefficient tests plus the joint F test from the spec.
    ASSERT_EQ(r.doc["tests"].size(), 4u);
    const Json& f = r.doc["tests"][3];
    EXPECT_EQ(f["type"], "F");
    EXPECT_EQ(f["numerator_df"].get<int>(), 2);
    EXPECT_EQ(f["df"].get<double>(), 2.0);
}

TEST(FitCommand, StructuredCovarianceAndFlagOverrides) {
    TempDir dir;
    std::mt19937_64 rng(9);
    std::normal_distribution<double> z;
    std::ostringstream csv;
    csv.precision(17);
    csv << "y,x,g\n";
    for (int g = 0; g < 30; ++g) {
        const double b0 = z(rng), b1 = 0.5 * z(rng);
        for (int i = 0; i < 6; ++i) {
            const double x = z(rng);
            csv << 1.0 + x + b0 + b1 * x + 0.7 * z(rng) << ',' << x << ",g" << g << '\n';
        }
    }
    const std::string data = dir.write("d.csv", csv.str());
    const std::string spec = dir.write("m.spec",
                                       "response = y\nfixed = x\nrandom = g\nrandom.g.covariates = x\n"
                                       "random.g.structure = diagonal\n");
    FitOverrides o;
    o.criterion = "ML";
    o.contrasts = {"slope=x"};
    const Outcome r = cmd_fit(data, spec, o);
    EXPECT_EQ(r.exit_code, kExitOk);
    EXPECT_EQ(r.doc["settings"]["criterion"], "ML");
    EXPECT_EQ(r.doc["settings"]["method"], "constrained");
    const Json& cov = r.doc["random_effects"][0]["covariance"];
    EXPECT_EQ(cov[0][1].get<double>(), 0.0);
    EXPECT_GT(cov[1][1].get<double>(), 0.0);
    // One shared variance for the diagonal structure.
    EXPECT_EQ(r.doc["random_effects"][0]["parameters"].size(), 1u);
    EXPECT_EQ(r.doc["tests"].back()["name"], "slope");
    EXPECT_EQ(r.doc["tests"].back()["statistic"], r.doc["tests"][1]["statistic"]);
}

TEST(FitCommand, NonConvergenceStillEmitsTheReport) {
    const RunResult r = run_cli({"fit", example("sat.csv"), example("sat.spec"), "--max-iter", "1"});
    EXPECT_EQ(r.code, kExitNonConvergence);
    EXPECT_NE(r.out.find("NOT converged"), std::string::npos);
    EXPECT_NE(r.out.find("Fixed effects"), std::string::npos);
}

TEST(FitCommand, BadFlagsAreUsageErrors) {
    EXPECT_EQ(run_cli({"fit", example("sat.csv")}).code, kExitParse);
    EXPECT_EQ(run_cli({"fit", example("sat.csv"), example("sat.spec"), "--method", "Newton"}).code, kExitParse);
    EXPECT_EQ(run_cli({"fit", example("sat.csv"), example("sat.spec"), "--tol", "abc"}).code, kExitParse);
    EXPECT_EQ(run_cli({"--help"}).code, kExitOk);
}

// ---------------------------------------------------------------------------
// Reports

TEST(Report, StoredEstimatesReproduceEveryTest) {
    TempDir dir;
    const std::string json = dir.path("r.json");
    ASSERT_EQ(run_cli({"fit", example("sat.csv"), example("sat.spec"), "--json", json, "--contrast", "d=year - lunch"}).code,
              kExitOk);
    const RunResult ok =
        run_cli({"report", json, "--data", example("sat.csv"), "--spec", example("sat.spec")});
    EXPECT_EQ(ok.code, kExitOk) << ok.err;
    EXPECT_NE(ok.out.find("all 5 tests reproduce"), std::string::npos);

    // A perturbed statistic no longer matches.
    Json doc = read_report(json);
    const double t = doc["tests"][1]["statistic"].get<double>();
    doc["tests"][1]["statistic"] = std::nextafter(t, 0.0);
    const std::string bad = dir.write("bad.json", dump(doc));
    EXPECT_EQ(run_cli({"report", bad, "--data", example("sat.csv"), "--spec", example("sat.spec")}).code, kExitFailure);
}

TEST(Report, JsonRoundTripsDoublesExactly) {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-1e6, 1e6);
    Vec v(200);
    for (Index i = 0; i < v.size(); ++i) v[i] = u(rng) * std::pow(10.0, static_cast<double>(i % 40) - 20.0);
    const Json j = Json::parse(to_json(v).dump());
    EXPECT_EQ(vec_from_json(j), v);
}

TEST(Report, RenderingTheSavedDocumentMatchesTheCommandOutput) {
    TempDir dir;
    const std::string json = dir.path("r.json");
    const RunResult fit = run_cli({"fit", example("sat.csv"), example("sat.spec"), "--json", json});
    const RunResult rep = run_cli({"report", json});
    EXPECT_EQ(rep.code, kExitOk);
    EXPECT_EQ(fit.out, rep.out);
    EXPECT_EQ(run_cli({"report", dir.write("junk.json", "{not json")}).code, kExitParse);
    EXPECT_EQ(run_cli({"report", dir.write("odd.json", "{\"command\": \"fit\"}")}).code, kExitParse);
}

// ---------------------------------------------------------------------------
// ace

TEST(AceCommand, TwinExampleRecoversAllThreeComponents) {
    const Outcome r = cmd_ace(example("twins.csv"), example("twins_pedigree.csv"), example("twins.spec"));
    EXPECT_EQ(r.exit_code, kExitOk);
    const Json& vc = r.doc["variance_components"];
    const double a = vc["additive"]["estimate"], c = vc["common"]["estimate"], e = vc["residual"]["estimate"];
    EXPECT_GT(a, 0.0);
    EXPECT_GT(c, 0.0);
    EXPECT_GT(e, 0.0);
    for (const char* k : {"additive", "common", "residual"}) EXPECT_TRUE(vc[k]["se"].is_number()) << k;

    // Total variance of the age-adjusted score.
    const ObservationTable t = read_csv(example("twins.csv"));
    const Vec y = t.numeric("score"), age = t.numeric("age");
    Mat X(y.size(), 2);
    X << Vec::Ones(y.size()), age;
    const Vec res = y - X * (X.transpose() * X).ldlt().solve(X.transpose() * y);
    const double total = res.squaredNorm() / static_cast<double>(y.size() - 2);
    EXPECT_NEAR(a + c + e, total, 0.1 * total);
    EXPECT_EQ(r.doc["restarts"].size(), 3u);
    EXPECT_EQ(r.doc["settings"]["criterion"], "ReML");
}

TEST(AceCommand, SingletonPedigreeFlagsTheGeneticComponent) {
    TempDir dir;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> z;
    std::ostringstream data, ped;
    data.precision(17);
    data << "fam,id,y\n";
    ped << "family,member_a,member_b,relation,reared_together\n";
    for (int i = 0; i < 60; ++i) {
        data << "f" << i << ",m" << i << ',' << 2.0 + z(rng) << '\n';
        ped << "f" << i << ",m" << i << ",,,\n";
    }
    const Outcome r = cmd_ace(dir.write("d.csv", data.str()), dir.write("p.csv", ped.str()),
                              dir.write("m.spec", "response = y\nfamily = fam\nmember = id\n"));
    const Json& vc = r.doc["variance_components"];
    EXPECT_FALSE(vc["additive"]["identified"].get<bool>());
    EXPECT_EQ(vc["additive"]["estimate"].get<double>(), 0.0);
    EXPECT_TRUE(vc["additive"]["se"].is_null());
    bool flagged = false;
    for (const Json& w : r.doc["warnings"])
        flagged = flagged || w.get<std::string>().find("additive genetic") != std::string::npos;
    EXPECT_TRUE(flagged);
    // The residual variance then is the sample variance.
    const double df = r.doc["tests"][0]["df"];
    EXPECT_NEAR(df, 59.0, 1e-6);
}

TEST(AceCommand, MalformedRelationshipExitsSix) {
    TempDir dir;
    const std::string data = dir.write("d.csv", "fam,id,y\nf,a,1\nf,b,2\ng,c,3\ng,d,5\n");
    const std::string ped = dir.write("p.csv",
                                      "family,member_a,member_b,relation,reared_together\n"
                                      "f,a,b,MZ,yes\nf,b,a,unrelated,yes\ng,c,d,DZ,yes\n");
    const std::string spec = dir.write("m.spec", "response = y\nfamily = fam\nmember = id\n");
    const RunResult r = run_cli({"ace", data, ped, spec});
    EXPECT_EQ(r.code, kExitPedigree);
    EXPECT_NE(r.err.find("family 'f'"), std::string::npos);
}

TEST(AceCommand, ReportVerification) {
    TempDir dir;
    const std::string json = dir.path("a.json");
    ASSERT_EQ(run_cli({"ace", example("twins.csv"), example("twins_pedigree.csv"), example("twins.spec"), "--json", json})
                  .code,
              kExitOk);
    const RunResult r = run_cli({"report", json, "--data", example("twins.csv"), "--spec", example("twins.spec"),
                                 "--pedigree", example("twins_pedigree.csv")});
    EXPECT_EQ(r.code, kExitOk) << r.err;
}

// ---------------------------------------------------------------------------
// simulate

TEST(SimulateCommand, SingleReplicateIsByteReproducible) {
    const std::vector<std::string> args{"simulate", "S2", "--scale", "0.2", "--reps", "1", "--seed", "99",
                                        "--baseline-sims", "50", "--baseline-instances", "5", "--json", "-"};
    const RunResult a = run_cli(args), b = run_cli(args);
    EXPECT_EQ(a.code, kExitOk);
    EXPECT_EQ(a.out, b.out);
    EXPECT_FALSE(a.out.empty());
    EXPECT_EQ(a.out.find("seconds"), std::string::npos);
}

TEST(SimulateCommand, DeskScaleS1AgreementPasses) {
    SimulateOptions o;
    o.label = "S1";
    o.reps = 2;
    o.seed = 4;
    o.baseline_sims = 0;
    const Outcome r = cmd_simulate(o);
    EXPECT_TRUE(r.doc["agreement"]["pass"].get<bool>());
    EXPECT_EQ(r.doc["setting"]["n"].get<int>(), 500);
    EXPECT_TRUE(r.doc["baseline"].is_null());
    EXPECT_EQ(r.doc["methods"].size(), 10u);
}

TEST(SimulateCommand, UnknownSettingIsAUsageError) {
    const RunResult r = run_cli({"simulate", "S7"});
    EXPECT_EQ(r.code, kExitParse);
    EXPECT_NE(r.err.find("S7"), std::string::npos);
    EXPECT_EQ(run_cli({"simulate", "S1", "--scale", "1.5"}).code, kExitParse);
    EXPECT_EQ(run_cli({"simulate", "S1", "--reps", "0"}).code, kExitParse);
}

TEST(SimulateCommand, BaselineContrastByName) {
    SimulateOptions o;
    o.label = "S1";
    o.scale = 0.1;
    o.reps = 1;
    o.method = "FS";
    o.criterion = "ReML";
    o.baseline_sims = 40;
    o.baseline_instances = 4;
    o.contrast = "slope=x1";
    const Outcome r = cmd_simulate(o);
    EXPECT_EQ(r.doc["baseline"]["contrast"], "slope");
    EXPECT_EQ(r.doc["baseline"]["L"][1].get<double>(), 1.0);
    EXPECT_EQ(r.doc["methods"].size(), 1u);
    // A single method has no pairs to agree on.
    EXPECT_FALSE(r.doc["agreement"]["pass"].get<bool>());
}
