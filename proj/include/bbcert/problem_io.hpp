#pragma once
// Problem files: a JSON document holding the expressions, the reference
// extremal and the certification options.

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flows.hpp"

namespace bbcert {

using json = nlohmann::json;

class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CertifyOptions {
    double rtol = 1e-10, atol = 1e-10;
    double margin_rel = 1e-7;     // strict inequalities pass above margin_rel * max(1, |lambda|_inf)
    double residual_rel = 1e-8;   // equalities pass below residual_rel * max(1, |lambda|_inf)
    double gap_fraction = 1e-3;   // exclusion window around switches, as a fraction of T
    double legendre_agree = 1e-7; // relative agreement of the three Legendre formulations
    double coercivity_rel = 1e-6; // min eigenvalue must exceed coercivity_rel * |Q|_2
    double cone_tol = 1e-12;
    double degenerate_rel = 1e-8;
    double validity_r0 = 1e-2;    // first radius probed for the maximized-flow ball
    int validity_probes = 200;
    std::uint64_t seed = 12345;
    double radius = 1e-2;         // brute-force oracle radius
    int samples = 2000;
    std::optional<Mat> d2alpha, d2beta;
};

// The raw document, kept as text so that fixtures can be written back verbatim.
struct ProblemFile {
    int dimension = 0, controls = 0;
    double horizon = 0.0;
    std::vector<std::string> drift;
    std::vector<std::vector<std::string>> fields;
    std::string cost_initial = "0", cost_final = "0";
    std::vector<std::string> manifold_initial, manifold_final;
    std::vector<double> x0, lambda0;
    int p0 = 1;
    std::vector<double> theta0, theta1;
    double tau = 0.0;
    std::vector<std::vector<double>> arc_controls;
    json options = json::object();
};

struct LoadedProblem {
    ControlAffineProblem problem;
    ReferenceExtremal extremal;
    CertifyOptions options;
};

inline json to_json(const ProblemFile& f) {
    json j;
    j["dimension"] = f.dimension;
    j["controls"] = f.controls;
    j["horizon"] = f.horizon;
    j["drift"] = f.drift;
    j["fields"] = f.fields;
    j["cost_initial"] = f.cost_initial;
    j["cost_final"] = f.cost_final;
    j["manifold_initial"] = f.manifold_initial;
    j["manifold_final"] = f.manifold_final;
    j["x0"] = f.x0;
    j["lambda0"] = f.lambda0;
    j["p0"] = f.p0;
    j["schedule"] = {{"theta0", f.theta0}, {"tau", f.tau}, {"theta1", f.theta1}, {"arc_controls", f.arc_controls}};
    j["options"] = f.options;
    return j;
}

namespace detail {

template <class T>
T get_field(const json& j, const std::string& key, const std::string& path) {
    if (!j.contains(key)) throw InputError(path + key + ": missing");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InputError(path + key + ": " + e.what());
    }
}

inline Mat matrix_field(const json& j, const std::string& path, int n) {
    Mat M(n, n);
    if (!j.is_array() || static_cast<int>(j.size()) != n) throw InputError(path + ": expected " + std::to_string(n) + " rows");
    for (int i = 0; i < n; ++i) {
        if (!j[i].is_array() || static_cast<int>(j[i].size()) != n)
            throw InputError(path + "[" + std::to_string(i) + "]: expected " + std::to_string(n) + " entries");
        for (int k = 0; k < n; ++k) M(i, k) = j[i][k].get<double>();
    }
    if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, M.cwiseAbs().maxCoeff()))
        throw InputError(path + ": matrix must be symmetric");
    return M;
}

}  // namespace detail

inline ProblemFile problem_file_from_json(const json& j) {
    using detail::get_field;
    ProblemFile f;
    f.dimension = get_field<int>(j, "dimension", "");
    f.controls = get_field<int>(j, "controls", "");
    f.horizon = get_field<double>(j, "horizon", "");
    f.drift = get_field<std::vector<std::string>>(j, "drift", "");
    f.fields = get_field<std::vector<std::vector<std::string>>>(j, "fields", "");
    f.cost_initial = j.contains("cost_initial") ? get_field<std::string>(j, "cost_initial", "") : "0";
    f.cost_final = j.contains("cost_final") ? get_field<std::string>(j, "cost_final", "") : "0";
    if (j.contains("manifold_initial")) f.manifold_initial = get_field<std::vector<std::string>>(j, "manifold_initial", "");
    if (j.contains("manifold_final")) f.manifold_final = get_field<std::vector<std::string>>(j, "manifold_final", "");
    f.x0 = get_field<std::vector<double>>(j, "x0", "");
    f.lambda0 = get_field<std::vector<double>>(j, "lambda0", "");
    f.p0 = get_field<int>(j, "p0", "");
    if (!j.contains("schedule")) throw InputError("schedule: missing");
    const json& s = j.at("schedule");
    f.theta0 = s.contains("theta0") ? get_field<std::vector<double>>(s, "theta0", "schedule.") : std::vector<double>{};
    f.theta1 = s.contains("theta1") ? get_field<std::vector<double>>(s, "theta1", "schedule.") : std::vector<double>{};
    f.tau = get_field<double>(s, "tau", "schedule.");
    f.arc_controls = get_field<std::vector<std::vector<double>>>(s, "arc_controls", "schedule.");
    if (j.contains("options")) f.options = j.at("options");
    return f;
}

inline CertifyOptions options_from_json(const json& o, int n) {
    CertifyOptions opt;
    auto num = [&](const json& src, const char* key, double& dst, const std::string& path) {
        if (src.contains(key)) {
            if (!src.at(key).is_number()) throw InputError(path + key + ": expected a number");
            dst = src.at(key).get<double>();
        }
    };
    if (o.contains("tolerances")) {
        const json& t = o.at("tolerances");
        const std::string p = "options.tolerances.";
        num(t, "rtol", opt.rtol, p);
        num(t, "atol", opt.atol, p);
        num(t, "margin", opt.margin_rel, p);
        num(t, "residual", opt.residual_rel, p);
        num(t, "gap_fraction", opt.gap_fraction, p);
        num(t, "legendre_agreement", opt.legendre_agree, p);
        num(t, "coercivity", opt.coercivity_rel, p);
        num(t, "cone", opt.cone_tol, p);
        num(t, "degenerate", opt.degenerate_rel, p);
    }
    if (o.contains("seed")) opt.seed = o.at("seed").get<std::uint64_t>();
    num(o, "radius", opt.radius, "options.");
    num(o, "validity_radius", opt.validity_r0, "options.");
    if (o.contains("samples")) opt.samples = o.at("samples").get<int>();
    if (o.contains("d2alpha")) opt.d2alpha = detail::matrix_field(o.at("d2alpha"), "options.d2alpha", n);
    if (o.contains("d2beta")) opt.d2beta = detail::matrix_field(o.at("d2beta"), "options.d2beta", n);
    return opt;
}

inline LoadedProblem build_problem(const ProblemFile& f) {
    LoadedProblem lp;
    const int n = f.dimension, m = f.controls;
    if (n <= 0) throw InputError("dimension: must be positive");
    if (m <= 0) throw InputError("controls: must be positive");
    if (m < 2) throw InputError("controls: a double switch requires at least two controls (m >= 2)");
    if (!(f.horizon > 0.0)) throw InputError("horizon: must be positive");
    auto expr = [&](const std::string& src, const std::string& path) {
        try {
            return parse_expr(src, n);
        } catch (const ParseError& e) {
            throw InputError(path + ": " + e.what());
        }
    };
    auto field = [&](const std::vector<std::string>& comps, const std::string& path) {
        if (static_cast<int>(comps.size()) != n)
            throw InputError(path + ": expected " + std::to_string(n) + " components");
        std::vector<NodePtr> c;
        for (int i = 0; i < n; ++i) c.push_back(expr(comps[i], path + "[" + std::to_string(i) + "]"));
        return VectorFieldSpec(std::move(c), n);
    };
    ControlAffineProblem& pb = lp.problem;
    pb.n = n;
    pb.m = m;
    pb.T = f.horizon;
    pb.f0 = field(f.drift, "drift");
    if (static_cast<int>(f.fields.size()) != m) throw InputError("fields: expected " + std::to_string(m) + " fields");
    for (int s = 0; s < m; ++s) pb.f.push_back(field(f.fields[s], "fields[" + std::to_string(s) + "]"));
    pb.c0 = ScalarFunction(expr(f.cost_initial, "cost_initial"), n);
    pb.cf = ScalarFunction(expr(f.cost_final, "cost_final"), n);
    for (size_t i = 0; i < f.manifold_initial.size(); ++i)
        pb.N0.emplace_back(expr(f.manifold_initial[i], "manifold_initial[" + std::to_string(i) + "]"), n);
    for (size_t i = 0; i < f.manifold_final.size(); ++i)
        pb.Nf.emplace_back(expr(f.manifold_final[i], "manifold_final[" + std::to_string(i) + "]"), n);

    ReferenceExtremal& ex = lp.extremal;
    if (static_cast<int>(f.x0.size()) != n) throw InputError("x0: expected " + std::to_string(n) + " entries");
    if (static_cast<int>(f.lambda0.size()) != n) throw InputError("lambda0: expected " + std::to_string(n) + " entries");
    ex.x0hat = Eigen::Map<const Vec>(f.x0.data(), n);
    ex.lambda0hat = Eigen::Map<const Vec>(f.lambda0.data(), n);
    if (f.p0 != 0 && f.p0 != 1) throw InputError("p0: must be 0 or 1");
    ex.p0 = f.p0;
    if (ex.p0 == 0 && ex.lambda0hat.cwiseAbs().maxCoeff() == 0.0)
        throw InputError("lambda0: (p0, lambda0) must not vanish together");
    auto& sc = ex.schedule;
    sc.J0 = static_cast<int>(f.theta0.size());
    sc.J1 = static_cast<int>(f.theta1.size());
    sc.theta0 = f.theta0;
    sc.theta1 = f.theta1;
    sc.tau = f.tau;
    for (size_t k = 0; k < f.arc_controls.size(); ++k) {
        if (static_cast<int>(f.arc_controls[k].size()) != m)
            throw InputError("schedule.arc_controls[" + std::to_string(k) + "]: expected " + std::to_string(m) + " entries");
        sc.arc_controls.push_back(Eigen::Map<const Vec>(f.arc_controls[k].data(), m));
    }
    try {
        sc.validate(m, f.horizon);
    } catch (const std::invalid_argument& e) {
        throw InputError(std::string("schedule: ") + e.what());
    }
    try {
        pb.validate();
    } catch (const std::invalid_argument& e) {
        throw InputError(e.what());
    }
    // Submanifold regularity at the reference end points.
    Mat J0 = constraint_jacobian(pb.N0, ex.x0hat, n);
    if (numeric_rank(J0) != J0.rows()) throw InputError("manifold_initial: constraint Jacobian is rank deficient at x0");
    for (size_t i = 0; i < pb.N0.size(); ++i)
        if (std::fabs(pb.N0[i].value(ex.x0hat)) > 1e-8)
            throw InputError("manifold_initial[" + std::to_string(i) + "]: x0 does not satisfy the constraint");
    lp.options = options_from_json(f.options, n);
    return lp;
}

inline LoadedProblem load_problem_json(const json& j) {
    try {
        return build_problem(problem_file_from_json(j));
    } catch (const json::exception& e) {
        throw InputError(std::string("malformed problem document: ") + e.what());
    }
}

inline LoadedProblem load_problem(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError(path + ": cannot open");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw InputError(path + ": " + e.what());
    }
    return load_problem_json(j);
}

inline void save_problem(const ProblemFile& f, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError(path + ": cannot write");
    out << to_json(f).dump(2) << "\n";
}

// %.17g text for a double; negative values are parenthesized for the grammar.
inline std::string num_text(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::string s(buf);
    if (v < 0) return "(" + s + ")";
    return s;
}

}  // namespace bbcert
