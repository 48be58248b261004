#pragma once
// PMP residuals, regularity of the switching functions, and the strong
// bang-bang Legendre conditions at simple and double switches. Every Legendre
// quantity is computed three ways (finite differences of traces, bracket along
// the reference, bracket of pulled-back fields at x0) and the three must agree.

#include <algorithm>
#include <boost/numeric/odeint.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "flows.hpp"
#include "problem_io.hpp"

namespace bbcert {

class ConditionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// One Legendre quantity in its three formulations.
struct LegendreEntry {
    std::string label;
    double t = 0.0;
    double trace_fd = 0.0;  // derivative of the switching difference along the reference
    double bracket = 0.0;   // <lambda(t), [k, k'](xi(t))>
    double pulled = 0.0;    // <lambda0, [g, g'](x0)>
    double disagreement = 0.0;
};

// pass == (margin > margin_threshold && residual < residual_threshold).
struct ConditionReport {
    std::string name;
    bool pass = false;
    double margin = INFINITY;
    double residual = 0.0;
    double margin_threshold = 0.0, residual_threshold = 0.0;
    std::string margin_at, residual_at;  // worst-case locations
    std::vector<LegendreEntry> entries;
    double agreement = 0.0;  // largest relative disagreement among formulations

    void note_margin(double v, const std::string& where) {
        if (v < margin) {
            margin = v;
            margin_at = where;
        }
    }
    void note_residual(double v, const std::string& where) {
        if (v > residual || residual_at.empty()) {
            residual = std::max(residual, v);
            residual_at = where;
        }
    }
    void finish() { pass = margin > margin_threshold && residual < residual_threshold; }
};

class FormulationMismatch : public ConditionError {
public:
    FormulationMismatch(const std::string& what, ConditionReport r) : ConditionError(what), report(std::move(r)) {}
    ConditionReport report;
};

// max(1, sup_t |lambda(t)|_inf) over the trace.
inline double lambda_scale(const AdjointTrace& tr) {
    double s = 1.0;
    for (const Vec& p : tr.p) s = std::max(s, p.cwiseAbs().maxCoeff());
    return s;
}

namespace detail {

inline std::string at_time(double t) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "t=%.9g", t);
    return buf;
}

// Re-integrates the adjoint with an adaptive Dormand-Prince stepper and
// returns the largest deviation from the stored arc-start covectors.
inline double adjoint_reintegration_gap(const Reference& ref) {
    namespace ode = boost::numeric::odeint;
    const int n = ref.n();
    const auto& sc = ref.schedule();
    Vec x = ref.extremal().x0hat, p = ref.extremal().lambda0hat;
    double gap = 0.0;
    for (int k = 0; k < sc.arcs(); ++k) {
        LiftedSystem sys{&ref.arc(k), n, true, false};
        State z = pack(x, &p, nullptr);
        double len = ref.arc_length(k);
        auto stepper = ode::make_controlled(1e-12, 1e-12, ode::runge_kutta_dopri5<State>());
        ode::integrate_adaptive(stepper, sys, z, 0.0, len, len / 50.0);
        unpack(z, n, x, &p, nullptr);
        gap = std::max(gap, (p - ref.node_p(k + 1)).cwiseAbs().maxCoeff());
    }
    return gap;
}

// d/dt of phi(lambda(t)) at the arc boundary t0 = arc_start(k_node), where the
// trace is followed along field k for t on the side dir = -1 (left) or +1
// (right). One-sided three-point stencils at h and h/2, Richardson-combined.
template <class Phi>
inline double one_sided_derivative(const Reference& ref, int k_node, const ArcField& k, double dir, Phi&& phi) {
    const Vec &x0 = ref.node_x(k_node), &p0 = ref.node_p(k_node);
    const double h0 = 1e-3 * ref.T();
    auto sample = [&](double d) {
        Vec x = x0, p = p0;
        if (d != 0.0) ref.lift_flow(k, p, x, dir * d, 8);
        return phi(p, x);
    };
    const double f0 = sample(0.0);
    auto stencil = [&](double h) { return dir * (-3.0 * f0 + 4.0 * sample(h) - sample(2.0 * h)) / (2.0 * h); };
    double D1 = stencil(h0), D2 = stencil(0.5 * h0);
    return (4.0 * D2 - D1) / 3.0;
}

inline double pulled_bracket(const PulledField& g, const PulledField& gp, const Vec& lambda0) {
    return lambda0.dot(gp.jac0 * g.value0 - g.jac0 * gp.value0);
}

inline double relative_spread(double a, double b, double c) {
    double lo = std::min({a, b, c}), hi = std::max({a, b, c});
    double scale = std::max({1.0, std::fabs(a), std::fabs(b), std::fabs(c)});
    return (hi - lo) / scale;
}

inline void finish_legendre(ConditionReport& r, const CertifyOptions& opt) {
    for (auto& e : r.entries) {
        e.disagreement = relative_spread(e.trace_fd, e.bracket, e.pulled);
        r.agreement = std::max(r.agreement, e.disagreement);
        r.note_margin(e.bracket, e.label + " " + at_time(e.t));
    }
    r.finish();
    if (r.agreement > opt.legendre_agree)
        throw FormulationMismatch(r.name + ": Legendre formulations disagree (relative spread " +
                                      std::to_string(r.agreement) + ")",
                                  r);
}

}  // namespace detail

inline ConditionReport check_pmp(const Reference& ref, const SwitchingFunctions& sf, const CertifyOptions& opt = {}) {
    const auto& pb = ref.problem();
    const auto& ext = ref.extremal();
    const int n = pb.n;
    const double scale = lambda_scale(sf.trace);
    ConditionReport r;
    r.name = "pmp";
    r.margin_threshold = -INFINITY;  // equalities only
    r.margin = 0.0;
    r.residual_threshold = opt.residual_rel * scale;

    if (ext.p0 == 0 && ext.lambda0hat.cwiseAbs().maxCoeff() == 0.0)
        throw ConditionError("trivial multiplier: p0 = 0 and lambda0 = 0");

    r.note_residual(detail::adjoint_reintegration_gap(ref), "adjoint re-integration");

    const Vec& x0 = ext.x0hat;
    const Vec& xf = ref.xf();
    auto transversality = [&](const std::vector<ScalarFunction>& cs, const Vec& x, const Vec& w, const char* where) {
        Mat J = constraint_jacobian(cs, x, n);
        if (J.rows() > 0 && numeric_rank(J) < J.rows())
            throw ConditionError(std::string("constraint Jacobian is rank deficient at ") + where);
        for (size_t i = 0; i < cs.size(); ++i)
            r.note_residual(std::fabs(cs[i].value(x)), std::string("constraint ") + std::to_string(i) + " at " + where);
        Mat V = kernel_basis(J, n);
        if (V.cols() > 0) r.note_residual((V.transpose() * w).cwiseAbs().maxCoeff(), std::string("transversality at ") + where);
    };
    transversality(pb.N0, x0, ext.lambda0hat - ext.p0 * pb.c0.gradient(x0), "t=0");
    transversality(pb.Nf, xf, ref.lambdaT() + ext.p0 * pb.cf.gradient(xf), "t=T");

    // Maximality: H - F_t = sum_s (|F_s| - u_s F_s) >= 0, zero when signs agree.
    const auto& tr = sf.trace;
    const auto& sc = ref.schedule();
    for (size_t i = 0; i < tr.t.size(); ++i) {
        const Vec& u = sc.arc_controls[tr.arc[i]];
        double gap = 0.0;
        for (int s = 0; s < pb.m; ++s) gap += std::fabs(sf.sigma[s][i]) - u[s] * sf.sigma[s][i];
        r.note_residual(gap, "maximality " + detail::at_time(tr.t[i]));
    }
    r.finish();
    return r;
}

inline ConditionReport check_regularity(const Reference& ref, const SwitchingFunctions& sf,
                                        const CertifyOptions& opt = {}) {
    const auto& pb = ref.problem();
    const auto& sc = ref.schedule();
    const double scale = lambda_scale(sf.trace);
    const double dt = opt.gap_fraction * ref.T();
    ConditionReport r;
    r.name = "regularity";
    r.margin_threshold = opt.margin_rel * scale;
    r.residual_threshold = opt.residual_rel * scale;

    // Switching instants of each component.
    std::vector<std::vector<double>> own(pb.m);
    int simple = 0;
    for (int k = 1; k < sc.arcs(); ++k) {
        double t = sc.arc_start(k);
        if (k == sc.J0 + 1) {
            own[sc.double1].push_back(t);
            own[sc.double2].push_back(t);
        } else {
            own[sc.switch_component[simple++]].push_back(t);
        }
    }
    const auto& tr = sf.trace;
    for (int s = 0; s < pb.m; ++s) {
        for (size_t i = 0; i < tr.t.size(); ++i) {
            bool near = false;
            for (double ts : own[s]) near = near || std::fabs(tr.t[i] - ts) < dt;
            if (near) continue;
            double v = sc.arc_controls[tr.arc[i]][s] * sf.sigma[s][i];
            r.note_margin(v, "u" + std::to_string(s + 1) + " sigma" + std::to_string(s + 1) + " " +
                                 detail::at_time(tr.t[i]));
        }
    }
    simple = 0;
    for (size_t a = 0; a < sf.at_switch.size(); ++a) {
        const auto& w = sf.at_switch[a];
        int k = static_cast<int>(a) + 1;
        if (k == sc.J0 + 1) {
            r.note_residual(std::fabs(w.value[sc.double1]), "sigma" + std::to_string(sc.double1 + 1) + " at tau");
            r.note_residual(std::fabs(w.value[sc.double2]), "sigma" + std::to_string(sc.double2 + 1) + " at tau");
        } else {
            int s = sc.switch_component[simple++];
            r.note_residual(std::fabs(w.value[s]), "sigma" + std::to_string(s + 1) + " " + detail::at_time(w.t));
        }
    }
    r.finish();
    return r;
}

// Throws FormulationMismatch when the three formulations disagree.
inline ConditionReport check_legendre_simple(const Reference& ref, const PulledBackFields& pf,
                                             const CertifyOptions& opt = {}) {
    const auto& sc = ref.schedule();
    const Vec& l0 = ref.extremal().lambda0hat;
    ConditionReport r;
    r.name = "legendre-simple";
    double scale = 1.0;
    for (int k = 0; k <= sc.arcs(); ++k) scale = std::max(scale, ref.node_p(k).cwiseAbs().maxCoeff());
    r.margin_threshold = opt.margin_rel * scale;
    r.residual_threshold = INFINITY;

    auto add = [&](int k, const PulledField& g_prev, const PulledField& g_next, const std::string& label) {
        const ArcField &a = ref.arc(k - 1), &b = ref.arc(k);
        LegendreEntry e;
        e.label = label;
        e.t = sc.arc_start(k);
        auto diff = [&](const Vec& p, const Vec& x) { return p.dot(b.value(x) - a.value(x)); };
        e.trace_fd = detail::one_sided_derivative(ref, k, a, -1.0, diff);
        e.bracket = ref.node_p(k).dot(bracket(a, b, ref.node_x(k)));
        e.pulled = detail::pulled_bracket(g_prev, g_next, l0);
        r.entries.push_back(e);
    };
    for (int j = 1; j <= sc.J0; ++j) add(j, pf.g0[j - 1], pf.g0[j], "theta_0" + std::to_string(j));
    for (int j = 1; j <= sc.J1; ++j) add(sc.J0 + 1 + j, pf.g1[j - 1], pf.g1[j], "theta_1" + std::to_string(j));
    if (r.entries.empty()) r.margin = INFINITY;
    detail::finish_legendre(r, opt);
    return r;
}

// The four quantities <lambda(tau), [k_0J0, k_nu]> and <lambda(tau), [k_nu, k_10]>.
inline ConditionReport check_legendre_double(const Reference& ref, const PulledBackFields& pf,
                                             const CertifyOptions& opt = {}) {
    const auto& sc = ref.schedule();
    const Vec& l0 = ref.extremal().lambda0hat;
    const int kd = sc.J0 + 1;
    const Vec &xd = ref.node_x(kd), &pd = ref.node_p(kd);
    ConditionReport r;
    r.name = "legendre-double";
    double scale = std::max({1.0, pd.cwiseAbs().maxCoeff(), l0.cwiseAbs().maxCoeff()});
    r.margin_threshold = opt.margin_rel * scale;
    r.residual_threshold = INFINITY;

    const ArcField &before = ref.arc(sc.J0), &after = ref.arc(kd);
    for (int nu = 1; nu <= 2; ++nu) {
        const ArcField& knu = ref.k_nu(nu);
        LegendreEntry in;
        in.label = "[k_0J0, k_" + std::to_string(nu) + "]";
        in.t = sc.tau;
        in.trace_fd = detail::one_sided_derivative(ref, kd, before, -1.0,
                                                   [&](const Vec& p, const Vec& x) { return p.dot(knu.value(x) - before.value(x)); });
        in.bracket = pd.dot(bracket(before, knu, xd));
        in.pulled = detail::pulled_bracket(pf.g0.back(), pf.h[nu - 1], l0);
        r.entries.push_back(in);

        LegendreEntry out;
        out.label = "[k_" + std::to_string(nu) + ", k_10]";
        out.t = sc.tau;
        out.trace_fd = detail::one_sided_derivative(ref, kd, after, +1.0,
                                                    [&](const Vec& p, const Vec& x) { return p.dot(after.value(x) - knu.value(x)); });
        out.bracket = pd.dot(bracket(knu, after, xd));
        out.pulled = detail::pulled_bracket(pf.h[nu - 1], pf.g1.front(), l0);
        r.entries.push_back(out);
    }
    detail::finish_legendre(r, opt);
    return r;
}

}  // namespace bbcert
