// Command-line front end: certify, oracle, simulate, fixture, fp-cost.
// Exit codes: 0 certified (or no refutation), 1 refuted, 2 inconclusive,
// 3 input error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include <bbcert/certify.hpp>

using namespace bbcert;

namespace {

constexpr int kInputError = 3;

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

int run_certify(const std::string& file, const std::string& report_path, bool json_stdout, std::optional<int> samples,
                std::optional<std::uint64_t> seed, std::optional<double> radius) {
    LoadedProblem lp = load_problem(file);
    CertifyOptions opt = lp.options;
    if (samples) opt.samples = *samples;
    if (seed) opt.seed = *seed;
    if (radius) opt.radius = *radius;
    CertificateReport r = certify(lp, opt);
    const std::string doc = report_json(r).dump(2) + "\n";
    if (!report_path.empty()) {
        std::ofstream out(report_path);
        if (!out) throw InputError(report_path + ": cannot write");
        out << doc;
    }
    if (json_stdout)
        std::cout << doc;
    else
        std::cout << report_summary(r);
    return exit_code(r.verdict);
}

int run_oracle(const std::string& file, std::optional<double> radius, std::optional<int> samples,
               std::optional<std::uint64_t> seed) {
    LoadedProblem lp = load_problem(file);
    Reference ref(lp.problem, lp.extremal);
    OracleResult o = brute_force_oracle(ref, radius.value_or(lp.options.radius), samples.value_or(lp.options.samples),
                                        seed.value_or(lp.options.seed));
    std::printf("radius %g samples %d seed %llu\n", o.radius, o.samples, static_cast<unsigned long long>(o.seed));
    std::printf("accepted %d rejected %d\n", o.accepted, o.rejected);
    std::printf("min gap %.6e\nmin gap (|d| > %g) %.6e\n", o.min_gap, o.large_norm, o.min_gap_large);
    if (lp.extremal.p0 == 0) std::printf("samples away from the reference %d\n", o.isolated_violations);
    std::cout << "worst perturbation";
    for (int i = 0; i < o.worst.size(); ++i) std::printf(" %.17g", o.worst[i]);
    std::cout << "\n";
    if (!o.message.empty()) std::cout << o.message << "\n";
    if (o.accepted == 0) return 2;
    return o.min_gap < -1e-10 || o.isolated_violations > 0 ? 1 : 0;
}

int run_simulate(const std::string& file, const std::vector<double>& perturb, const std::string& out_path, int grid) {
    LoadedProblem lp = load_problem(file);
    Reference ref(lp.problem, lp.extremal);
    std::vector<FlowSample> s;
    try {
        s = simulate_maximized(ref, to_vec(perturb), grid);
    } catch (const OracleError& e) {
        throw InputError(e.what());
    }
    if (out_path.empty() || out_path == "-") {
        write_trajectory(std::cout, s);
    } else {
        std::ofstream out(out_path);
        if (!out) throw InputError(out_path + ": cannot write");
        write_trajectory(out, s);
    }
    return 0;
}

int run_fixture(const std::string& recipe, std::uint64_t seed, int J0, int J1, const std::string& out_path) {
    FixtureRecipe r;
    r.name = recipe;
    r.seed = seed;
    r.J0 = J0;
    r.J1 = J1;
    FixtureCheck chk;
    ProblemFile f;
    try {
        f = construct_fixture(r, &chk);
    } catch (const FixtureError& e) {
        throw InputError(e.what());
    }
    if (out_path.empty() || out_path == "-")
        std::cout << to_json(f).dump(2) << "\n";
    else
        save_problem(f, out_path);
    std::fprintf(stderr, "%s: accepted after %d draw(s)\n", recipe.c_str(), chk.attempts);
    return 0;
}

int run_fp_cost(const std::string& file, const std::vector<double>& dx, const std::vector<double>& delta,
                const std::vector<double>& eps) {
    LoadedProblem lp = load_problem(file);
    Reference ref(lp.problem, lp.extremal);
    const FPLayout L = FPLayout::of(ref);
    Vec x = dx.empty() ? Vec(Vec::Zero(L.n)) : to_vec(dx);
    Vec d = delta.empty() ? Vec(Vec::Zero(L.J0 + L.J1)) : to_vec(delta);
    Vec e = eps.empty() ? Vec(Vec::Zero(2)) : to_vec(eps);
    if (d.size() != L.J0 + L.J1) throw InputError("--delta needs J0 + J1 = " + std::to_string(L.J0 + L.J1) + " values");
    BoundaryPenalty pen = make_penalty(ref, lp.options);
    double c = 0.0;
    try {
        c = fp_cost_oracle(ref, pen, x, d.head(L.J0), e, d.tail(L.J1));
    } catch (const OracleError& err) {
        throw InputError(err.what());
    }
    std::printf("%.17g\n", c);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Certify strong local optimality of bang-bang extremals with one double switch"};
    app.require_subcommand(1);

    std::string file, report_path, out_path, recipe;
    bool json_stdout = false;
    std::optional<int> samples;
    std::optional<std::uint64_t> seed;
    std::optional<double> radius;
    std::vector<double> perturb, dx, delta, eps;
    std::uint64_t fixture_seed = 1;
    int J0 = 0, J1 = 0, grid = 400;

    auto* c = app.add_subcommand("certify", "run the full certification pipeline");
    c->add_option("file", file, "problem file")->required();
    c->add_option("--report", report_path, "write the JSON report here");
    c->add_flag("--json", json_stdout, "print the JSON report instead of the summary");
    c->add_option("--samples", samples, "oracle samples (0 skips the oracle)");
    c->add_option("--seed", seed, "RNG seed");
    c->add_option("--radius", radius, "oracle radius");

    auto* o = app.add_subcommand("oracle", "brute-force cost comparison around the reference");
    o->add_option("file", file, "problem file")->required();
    o->add_option("--radius", radius, "perturbation radius");
    o->add_option("--samples", samples, "number of samples");
    o->add_option("--seed", seed, "RNG seed");

    auto* s = app.add_subcommand("simulate", "dump the maximized flow from a perturbed covector");
    s->add_option("file", file, "problem file")->required();
    s->add_option("--perturb", perturb, "dp (n values) or dp dx (2n values)")->delimiter(',');
    s->add_option("--out", out_path, "output path, - for stdout");
    s->add_option("--grid", grid, "uniform samples besides the switching instants")->check(CLI::PositiveNumber);

    auto* f = app.add_subcommand("fixture", "construct a verified synthetic problem");
    f->add_option("recipe", recipe, "normal-generic, abnormal, commuting-f1f2, coercivity-broken or degenerate-dtau")->required();
    f->add_option("--seed", fixture_seed, "RNG seed");
    f->add_option("--J0", J0, "simple switches before the double switch")->check(CLI::Range(0, 1));
    f->add_option("--J1", J1, "simple switches after the double switch")->check(CLI::Range(0, 1));
    f->add_option("--out", out_path, "output path, - for stdout");

    auto* p = app.add_subcommand("fp-cost", "cost of the finite-dimensional subproblem");
    p->add_option("file", file, "problem file")->required();
    p->add_option("--dx", dx, "initial point shift (n values)")->delimiter(',');
    p->add_option("--delta", delta, "simple-switch shifts, before then after the double switch")->delimiter(',');
    p->add_option("--eps", eps, "the two shifts of the double switch")->delimiter(',')->expected(2);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kInputError;
    }

    try {
        if (*c) return run_certify(file, report_path, json_stdout, samples, seed, radius);
        if (*o) return run_oracle(file, radius, samples, seed);
        if (*s) return run_simulate(file, perturb, out_path, grid);
        if (*f) return run_fixture(recipe, fixture_seed, J0, J1, out_path);
        if (*p) return run_fp_cost(file, dx, delta, eps);
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kInputError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return kInputError;
}
