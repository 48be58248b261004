#pragma once
// The certification pipeline: necessary conditions, second variation,
// invertibility of the flow, the final Hessian cross-check and the oracles,
// aggregated into one report.

#include <sstream>
#include <string>
#include <vector>

#include "conditions.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"
#include "plinv.hpp"
#include "problem_io.hpp"
#include "secondvar.hpp"

namespace bbcert {

enum class Verdict { CertifiedStrong, CertifiedAbnormal, Refuted, Inconclusive };

inline const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::CertifiedStrong: return "certified-strict-strong-local-min";
        case Verdict::CertifiedAbnormal: return "certified-abnormal-isolated";
        case Verdict::Refuted: return "refuted-by-oracle";
        default: return "inconclusive";
    }
}

inline int exit_code(Verdict v) {
    switch (v) {
        case Verdict::CertifiedStrong:
        case Verdict::CertifiedAbnormal: return 0;
        case Verdict::Refuted: return 1;
        default: return 2;
    }
}

// Positivity of J''_nu on the representatives of N n V^perp parametrized by
// dx: a, b given by the switching-time gradients, endpoint in T N_f.
struct FinalHessian {
    int nu = 1;
    int dimension = 0;
    double min_eigenvalue = INFINITY;
    double threshold = 0.0;
    bool pass = false;
    // max over basis vectors of |pairing - J''| / |J''|, where pairing is
    // (w^T D^2 beta_hat w + <V_p, w>) / 2 for w = pi V the pulled-back endpoint.
    double pairing_mismatch = 0.0;
};

inline FinalHessian final_hessian_check(const Reference& ref, const PulledBackFields& pf, const SwitchingGradients& gr,
                                        const BoundaryPenalty& pen, int nu, double rel = 1e-6) {
    const FPLayout L = FPLayout::of(ref);
    const int n = L.n, J0 = L.J0, J1 = L.J1;
    Mat Ja(2 * n, n);
    Ja.topRows(n) = pen.d2alpha();
    Ja.bottomRows(n) = Mat::Identity(n, n);
    std::vector<Vec> th0(J0 + 2, Vec::Zero(2 * n));
    for (int j = 1; j <= J0; ++j) th0[j] = gr.dtheta0[j - 1];
    th0[J0 + 1] = gr.dtau[nu - 1];
    std::vector<Vec> th1(J1 + 1);
    th1[0] = gr.dtheta10[nu - 1];
    for (int j = 1; j <= J1; ++j) th1[j] = gr.dtheta1[nu - 1][j - 1];

    Mat R = Mat::Zero(L.size(), n);
    R.topRows(n) = Mat::Identity(n, n);
    for (int s = 0; s <= J0; ++s) R.row(L.a0(s)) = ((th0[s + 1] - th0[s]).transpose() * Ja);
    R.row(L.b()) = ((th1[0] - th0[J0 + 1]).transpose() * Ja);
    for (int s = 0; s < J1; ++s) R.row(L.a1(s)) = ((th1[s + 1] - th1[s]).transpose() * Ja);
    R.row(L.a1(J1)) = -(th1[J1].transpose() * Ja);

    const Mat E = endpoint_matrix(pf, L, nu);
    const Mat Jf = constraint_jacobian(ref.problem().Nf, ref.xf(), n);
    Mat K = Jf.rows() > 0 ? kernel_basis(Jf * ref.node_M(ref.schedule().arcs()) * E * R, n) : Mat(Mat::Identity(n, n));
    const Mat Q = assemble_second_variation(pf, pen, L, nu);
    const Mat H = R.transpose() * Q * R;

    FinalHessian fh;
    fh.nu = nu;
    CoercivityResult c = coercivity_check(H, K, rel);
    fh.dimension = c.dimension;
    fh.min_eigenvalue = c.min_eigenvalue;
    fh.threshold = c.threshold;
    fh.pass = c.pass;

    // Lifted combination V = dalpha_* dx + sum a G + b H_nu.
    const auto of = detail::ordered_fields(pf, L, nu);
    std::vector<Vec> lifted;
    for (const Vec& g : gr.G0) lifted.push_back(g);
    lifted.push_back(gr.H[nu - 1]);
    for (const Vec& g : gr.G1) lifted.push_back(g);
    for (int k = 0; k < K.cols(); ++k) {
        const Vec d = R * K.col(k);
        Vec V = Ja * d.head(n);
        for (size_t i = 0; i < lifted.size(); ++i) V += d[of.var[i]] * lifted[i];
        const Vec w = E * d;
        const double pairing = 0.5 * (w.dot(pen.d2beta_hat * w) + V.head(n).dot(w));
        const double direct = d.dot(Q * d);
        fh.pairing_mismatch = std::max(fh.pairing_mismatch, std::fabs(pairing - direct) / std::max(std::fabs(direct), 1e-300));
    }
    fh.pass = fh.pass && fh.pairing_mismatch <= 1e-6;
    return fh;
}

// ---------------------------------------------------------------------------
// Report.

struct CertificateReport {
    Verdict verdict = Verdict::Inconclusive;
    std::string message;
    std::vector<std::string> completed;  // stages run to the end, in order
    std::string failed_stage;

    std::optional<ConditionReport> pmp, regularity, legendre_simple, legendre_double;
    std::optional<double> tautheta_residual;
    std::optional<HestenesResult> hestenes;
    CoercivityResult coercivity_N0[2];
    std::vector<ChainReport> chain;
    std::optional<InvertibilityReport> invertibility;
    std::vector<FinalHessian> final_hessian;
    std::optional<ValidityBall> validity;
    std::optional<OracleResult> oracle;
    CertifyOptions options;
    int p0 = 1;
};

namespace detail {

inline json num_json(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json condition_json(const ConditionReport& r) {
    json j{{"pass", r.pass},
           {"margin", num_json(r.margin)},
           {"margin_threshold", num_json(r.margin_threshold)},
           {"margin_at", r.margin_at},
           {"residual", num_json(r.residual)},
           {"residual_threshold", num_json(r.residual_threshold)},
           {"residual_at", r.residual_at}};
    if (!r.entries.empty()) {
        j["agreement"] = num_json(r.agreement);
        json e = json::array();
        for (const auto& x : r.entries)
            e.push_back({{"label", x.label},
                         {"t", num_json(x.t)},
                         {"trace_fd", num_json(x.trace_fd)},
                         {"bracket", num_json(x.bracket)},
                         {"pulled", num_json(x.pulled)},
                         {"disagreement", num_json(x.disagreement)}});
        j["entries"] = e;
    }
    return j;
}

inline json coercivity_json(const CoercivityResult& c) {
    return {{"dimension", c.dimension},
            {"min_eigenvalue", num_json(c.min_eigenvalue)},
            {"threshold", num_json(c.threshold)},
            {"pass", c.pass}};
}

inline json vec_json(const Vec& v) {
    json a = json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(num_json(v[i]));
    return a;
}

}  // namespace detail

inline json report_json(const CertificateReport& r) {
    using detail::num_json;
    json j;
    j["verdict"] = to_string(r.verdict);
    j["exit_code"] = exit_code(r.verdict);
    j["message"] = r.message;
    j["completed_stages"] = r.completed;
    j["failed_stage"] = r.failed_stage;
    json st = json::object();
    if (r.pmp) st["pmp"] = detail::condition_json(*r.pmp);
    if (r.regularity) st["regularity"] = detail::condition_json(*r.regularity);
    if (r.legendre_simple) st["legendre_simple"] = detail::condition_json(*r.legendre_simple);
    if (r.legendre_double) st["legendre_double"] = detail::condition_json(*r.legendre_double);
    j["conditions"] = st;
    if (r.tautheta_residual) j["gradients"] = {{"tautheta_residual", num_json(*r.tautheta_residual)}};
    if (r.hestenes) {
        json sv;
        sv["coercivity_N0"] = {detail::coercivity_json(r.coercivity_N0[0]), detail::coercivity_json(r.coercivity_N0[1])};
        sv["hestenes"] = {{"success", r.hestenes->success}, {"rho", num_json(r.hestenes->rho)}, {"message", r.hestenes->message}};
        sv["coercivity_N"] = {detail::coercivity_json(r.hestenes->coercivity[0]),
                              detail::coercivity_json(r.hestenes->coercivity[1])};
        json ch = json::array();
        for (const auto& c : r.chain) {
            json steps = json::array();
            for (const auto& s : c.steps)
                steps.push_back({{"label", s.label},
                                 {"dimension", s.dimension},
                                 {"expected_dimension", s.expected_dimension},
                                 {"characterization_residual", num_json(s.characterization_residual)},
                                 {"closed_form", num_json(s.closed_form)},
                                 {"direct", num_json(s.direct)},
                                 {"min_eigenvalue", num_json(s.min_eigenvalue)}});
            ch.push_back({{"nu", c.nu},
                          {"dimensions_ok", c.dimensions_ok},
                          {"all_positive", c.all_positive},
                          {"max_relative_mismatch", num_json(c.max_relative_mismatch)},
                          {"steps", steps}});
        }
        sv["subspace_chain"] = ch;
        j["second_variation"] = sv;
    }
    if (r.invertibility) {
        json sw = json::array();
        for (const auto& s : r.invertibility->switches) {
            json d = json::array();
            for (double x : s.determinants) d.push_back(num_json(x));
            sw.push_back({{"switch", s.label},
                          {"route", s.route},
                          {"status", to_string(s.status)},
                          {"determinants", d},
                          {"min_hull_determinant", num_json(s.min_hull_determinant)},
                          {"preimages", s.preimages},
                          {"seed", s.seed},
                          {"message", s.message}});
        }
        j["invertibility"] = {{"aggregate", to_string(r.invertibility->aggregate)},
                              {"seed", r.invertibility->seed},
                              {"switches", sw}};
    }
    if (!r.final_hessian.empty()) {
        json fh = json::array();
        for (const auto& f : r.final_hessian)
            fh.push_back({{"nu", f.nu},
                          {"dimension", f.dimension},
                          {"min_eigenvalue", num_json(f.min_eigenvalue)},
                          {"threshold", num_json(f.threshold)},
                          {"pass", f.pass},
                          {"pairing_mismatch", num_json(f.pairing_mismatch)}});
        j["final_hessian"] = fh;
    }
    if (r.validity)
        j["validity_ball"] = {{"radius", num_json(r.validity->radius)},
                              {"halvings", r.validity->halvings},
                              {"probes", r.validity->probes},
                              {"last_failure", r.validity->last_failure}};
    if (r.oracle) {
        const auto& o = *r.oracle;
        j["oracle"] = {{"radius", num_json(o.radius)},
                       {"samples", o.samples},
                       {"seed", o.seed},
                       {"accepted", o.accepted},
                       {"rejected", o.rejected},
                       {"min_gap", num_json(o.min_gap)},
                       {"min_gap_large", num_json(o.min_gap_large)},
                       {"large_norm", num_json(o.large_norm)},
                       {"worst_perturbation", o.worst.size() ? detail::vec_json(o.worst) : json::array()},
                       {"isolated_violations", o.isolated_violations},
                       {"reference_cost", num_json(o.reference_cost)},
                       {"message", o.message}};
    }
    const auto& op = r.options;
    j["thresholds"] = {{"rtol", op.rtol},
                       {"atol", op.atol},
                       {"margin_rel", op.margin_rel},
                       {"residual_rel", op.residual_rel},
                       {"gap_fraction", op.gap_fraction},
                       {"legendre_agree", op.legendre_agree},
                       {"coercivity_rel", op.coercivity_rel},
                       {"cone_tol", op.cone_tol},
                       {"degenerate_rel", op.degenerate_rel},
                       {"oracle_floor", 1e-10}};
    j["seed"] = op.seed;
    j["p0"] = r.p0;
    return j;
}

inline std::string report_summary(const CertificateReport& r) {
    std::ostringstream os;
    char buf[200];
    os << "verdict: " << to_string(r.verdict) << "\n";
    if (!r.message.empty()) os << "  " << r.message << "\n";
    auto cond = [&](const char* name, const std::optional<ConditionReport>& c) {
        if (!c) return;
        std::snprintf(buf, sizeof buf, "%-16s %s  margin %.3e  residual %.3e\n", name, c->pass ? "pass" : "FAIL", c->margin,
                      c->residual);
        os << buf;
    };
    cond("pmp", r.pmp);
    cond("regularity", r.regularity);
    cond("legendre-simple", r.legendre_simple);
    cond("legendre-double", r.legendre_double);
    if (r.hestenes) {
        for (int nu = 0; nu < 2; ++nu) {
            std::snprintf(buf, sizeof buf, "coercivity nu=%d  N0 min eig %.3e  N min eig %.3e (rho %g)\n", nu + 1,
                          r.coercivity_N0[nu].min_eigenvalue, r.hestenes->coercivity[nu].min_eigenvalue, r.hestenes->rho);
            os << buf;
        }
        if (!r.hestenes->success && !r.hestenes->message.empty()) os << "  " << r.hestenes->message << "\n";
    }
    for (const auto& c : r.chain) {
        std::snprintf(buf, sizeof buf, "subspace chain nu=%d  %s  mismatch %.2e\n", c.nu,
                      c.dimensions_ok && c.all_positive ? "pass" : "FAIL", c.max_relative_mismatch);
        os << buf;
    }
    if (r.invertibility) {
        for (const auto& s : r.invertibility->switches) {
            std::snprintf(buf, sizeof buf, "invertibility %-10s %-18s %s\n", s.label.c_str(), s.route.c_str(), to_string(s.status));
            os << buf;
        }
    }
    for (const auto& f : r.final_hessian) {
        std::snprintf(buf, sizeof buf, "final hessian nu=%d  %s  min eig %.3e\n", f.nu, f.pass ? "pass" : "FAIL", f.min_eigenvalue);
        os << buf;
    }
    if (r.validity) {
        std::snprintf(buf, sizeof buf, "validity radius %.3e\n", r.validity->radius);
        os << buf;
    }
    if (r.oracle) {
        std::snprintf(buf, sizeof buf, "oracle r=%g  accepted %d  min gap %.3e  min gap (|d| > %g) %.3e\n", r.oracle->radius,
                      r.oracle->accepted, r.oracle->min_gap, r.oracle->large_norm, r.oracle->min_gap_large);
        os << buf;
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline.

inline CertificateReport certify(const LoadedProblem& lp, const CertifyOptions& opt) {
    CertificateReport r;
    r.options = opt;
    r.p0 = lp.extremal.p0;
    FlowOptions fo;
    fo.rtol = opt.rtol;
    fo.atol = opt.atol;
    std::optional<Reference> ref;
    try {
        ref.emplace(lp.problem, lp.extremal, fo);
    } catch (const std::exception& e) {
        r.failed_stage = "reference";
        r.message = e.what();
        return r;
    }
    r.completed.push_back("reference");

    auto fail = [&](const std::string& stage, const std::string& why) {
        if (r.failed_stage.empty()) {
            r.failed_stage = stage;
            r.message = why;
        }
    };

    // Stages; the first hard failure skips the remaining analysis.
    [&] {
        try {
            SwitchingFunctions sf = switching_functions(*ref);
            r.pmp = check_pmp(*ref, sf, opt);
            if (!r.pmp->pass) return fail("pmp", "PMP residual above threshold");
            r.completed.push_back("pmp");
            r.regularity = check_regularity(*ref, sf, opt);
            if (!r.regularity->pass) return fail("regularity", "a switching function has the wrong sign or vanishes off its switches");
            r.completed.push_back("regularity");
        } catch (const std::exception& e) {
            return fail("pmp", e.what());
        }
        PulledBackFields pf = pull_back_fields(*ref);
        try {
            r.legendre_simple = check_legendre_simple(*ref, pf, opt);
            r.legendre_double = check_legendre_double(*ref, pf, opt);
        } catch (const FormulationMismatch& e) {
            (r.legendre_simple ? r.legendre_double : r.legendre_simple) = e.report;
            return fail("legendre", e.what());
        }
        if (!r.legendre_simple->pass) return fail("legendre", "simple-switch Legendre condition fails");
        if (!r.legendre_double->pass) return fail("legendre", "double-switch Legendre condition fails");
        r.completed.push_back("legendre");

        SwitchingGradients gr;
        try {
            gr = switching_time_gradients(*ref, pf);
        } catch (const std::exception& e) {
            return fail("gradients", e.what());
        }
        r.tautheta_residual = std::max(gr.tautheta_residual[0], gr.tautheta_residual[1]);
        r.completed.push_back("gradients");

        BoundaryPenalty pen = make_penalty(*ref, opt);
        const FPLayout L = FPLayout::of(*ref);
        for (int nu = 1; nu <= 2; ++nu)
            r.coercivity_N0[nu - 1] = coercivity_check(assemble_second_variation(pf, pen, L, nu), kernel_space(*ref, pf, true, nu),
                                                       opt.coercivity_rel);
        try {
            r.hestenes = hestenes_penalty_search(*ref, pf, pen, opt);
        } catch (const PreconditionError& e) {
            r.hestenes = HestenesResult{};
            r.hestenes->message = e.what();
            return fail("second-variation", e.what());
        }
        if (!r.hestenes->success) return fail("second-variation", r.hestenes->message);
        const BoundaryPenalty& P = r.hestenes->penalty;
        for (int nu = 1; nu <= 2; ++nu) r.chain.push_back(subspace_chain(*ref, pf, P, gr, nu));
        for (const auto& c : r.chain)
            if (!c.dimensions_ok || !c.all_positive) return fail("second-variation", "subspace chain inconsistent with coercivity");
        r.completed.push_back("second-variation");

        r.invertibility = flow_invertibility_check(*ref, gr, P, opt);
        if (r.invertibility->aggregate != Invertibility::Invertible)
            return fail("invertibility", std::string("flow invertibility ") + to_string(r.invertibility->aggregate));
        r.completed.push_back("invertibility");

        for (int nu = 1; nu <= 2; ++nu) r.final_hessian.push_back(final_hessian_check(*ref, pf, gr, P, nu, opt.coercivity_rel));
        for (const auto& f : r.final_hessian)
            if (!f.pass) return fail("final-hessian", "final Hessian not positive definite");
        r.completed.push_back("final-hessian");

        r.validity = probe_validity_radius(*ref, opt.validity_r0, opt.validity_probes, opt.seed);
        if (!(r.validity->radius > 0.0)) return fail("validity", "no ball with an ordered switching chain: " + r.validity->last_failure);
        r.completed.push_back("validity");
    }();

    // The oracle runs whenever the reference exists: it can refute what the
    // analysis could not decide.
    if (opt.samples > 0) {
        r.oracle = brute_force_oracle(*ref, opt.radius, opt.samples, opt.seed);
        r.completed.push_back("oracle");
        const bool refuted = r.oracle->min_gap < -1e-10 || r.oracle->isolated_violations > 0;
        if (refuted) {
            r.verdict = Verdict::Refuted;
            r.message = r.p0 == 0 ? "oracle found admissible trajectories away from the reference"
                                  : "oracle found a cheaper admissible neighbour";
            return r;
        }
    }
    if (r.failed_stage.empty()) r.verdict = r.p0 == 0 ? Verdict::CertifiedAbnormal : Verdict::CertifiedStrong;
    return r;
}

// ---------------------------------------------------------------------------
// Fixture construction with re-verification.

struct FixtureCheck {
    int attempts = 0;
    double degeneracy = NAN;         // |d(tau1 - tau2)|_Lambda| / |dtau1|_Lambda|
    double q_difference = NAN;       // |Q1 - Q2| / |Q1| on the (delta, eps) layout
    double min_N0_eigenvalue = NAN;  // min over nu of the coercivity eigenvalue on N0
    std::string last_rejection;
};

// Draws parameters until the fixture has the requested structure and its
// prescribed margins pass the condition checks; up to 50 draws.
inline ProblemFile construct_fixture(const FixtureRecipe& r, FixtureCheck* info = nullptr) {
    static const std::vector<std::string> recipes{"normal-generic", "abnormal", "commuting-f1f2", "coercivity-broken",
                                                  "degenerate-dtau"};
    if (std::find(recipes.begin(), recipes.end(), r.name) == recipes.end()) throw FixtureError("unknown recipe " + r.name);
    std::mt19937_64 rng(r.seed);
    FixtureCheck chk;
    for (int attempt = 0; attempt < 50; ++attempt) {
        chk.attempts = attempt + 1;
        FixtureParams q = draw_fixture_params(r.name, rng);
        try {
            ProblemFile f = fixture_from_params(r, q);
            LoadedProblem lp = build_problem(f);
            const CertifyOptions& opt = lp.options;
            Reference ref(lp.problem, lp.extremal);
            SwitchingFunctions sf = switching_functions(ref);
            if (!check_pmp(ref, sf, opt).pass) throw FixtureError("PMP check failed");
            if (!check_regularity(ref, sf, opt).pass) throw FixtureError("regularity check failed");
            PulledBackFields pf = pull_back_fields(ref);
            if (!check_legendre_simple(ref, pf, opt).pass || !check_legendre_double(ref, pf, opt).pass)
                throw FixtureError("Legendre check failed");
            SwitchingGradients gr = switching_time_gradients(ref, pf);
            BoundaryPenalty pen = make_penalty(ref, opt);
            FPVariation v = build_fp_variation(ref, pf, pen);
            chk.q_difference = (v.Q_de(1) - v.Q_de(2)).norm() / v.Q_de(1).norm();
            chk.min_N0_eigenvalue = INFINITY;
            for (int nu = 1; nu <= 2; ++nu)
                chk.min_N0_eigenvalue =
                    std::min(chk.min_N0_eigenvalue, coercivity_check(v.Q[nu - 1], v.kernel_N0[nu - 1], opt.coercivity_rel).min_eigenvalue);
            const bool broken = r.name == "coercivity-broken";
            std::optional<HestenesResult> H;
            try {
                H = hestenes_penalty_search(ref, pf, pen, opt);
            } catch (const PreconditionError&) {
                if (!broken) throw FixtureError("second variation not coercive on N0");
            }
            if (broken) {
                if (H && H->success) throw FixtureError("second variation unexpectedly coercive");
            } else {
                if (!H || !H->success) throw FixtureError("no Hestenes penalty found");
                SwitchLinearization lin = build_switch_linearization(ref, gr, H->penalty, ref.schedule().J0, opt.degenerate_rel);
                chk.degeneracy = lin.degeneracy;
                const bool want_degenerate = r.name == "degenerate-dtau";
                if (want_degenerate != lin.degenerate && r.name != "commuting-f1f2")
                    throw FixtureError(want_degenerate ? "dtau not degenerate" : "dtau unexpectedly degenerate");
                if (r.name == "commuting-f1f2" && !(chk.q_difference <= 1e-8))
                    throw FixtureError("branch forms differ on a commuting pair");
                if (flow_invertibility_check(ref, gr, H->penalty, opt).aggregate != Invertibility::Invertible)
                    throw FixtureError("flow invertibility not certified");
            }
            if (info) *info = chk;
            return f;
        } catch (const std::exception& e) {
            chk.last_rejection = e.what();
        }
    }
    if (info) *info = chk;
    throw FixtureError("recipe " + r.name + " infeasible after 50 draws: " + chk.last_rejection);
}

}  // namespace bbcert
