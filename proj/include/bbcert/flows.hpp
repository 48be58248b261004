#pragma once
// Reference flow, adjoint, pulled-back fields, the maximized flow and the exact
// gradients of its switching times.
//
// Integration uses frozen step plans: each reference arc is probed once with an
// adaptive RKF78 run, then every later integration of that arc (perturbed
// durations, perturbed initial data, backward durations) uses the same number
// of uniform RKF78 steps. The discrete flow is then a smooth function of the
// initial point and of the duration, so root solves and finite differences
// through it are free of step-selection noise.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "geometry.hpp"

namespace bbcert {

class FlowError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SwitchingSchedule {
    int J0 = 0, J1 = 0;
    std::vector<double> theta0;  // J0 times before tau
    double tau = 0.0;
    std::vector<double> theta1;  // J1 times after tau
    std::vector<Vec> arc_controls;  // J0 + J1 + 2 control vectors in {-1, +1}^m

    // Derived by validate().
    std::vector<int> switch_component;  // 0-based component flipping at each simple switch, pre then post
    int double1 = 0, double2 = 1;       // 0-based components flipping at tau
    double sign1 = 1.0, sign2 = 1.0;    // (u_after - u_before)/2 for those components

    int arcs() const { return J0 + J1 + 2; }
    int first_post_arc() const { return J0 + 1; }

    double arc_start(int k) const {
        if (k == 0) return 0.0;
        if (k <= J0) return theta0[k - 1];
        if (k == J0 + 1) return tau;
        return theta1[k - J0 - 2];
    }
    double arc_end(int k, double T) const { return k + 1 < arcs() ? arc_start(k + 1) : T; }

    void validate(int m, double T) {
        if (m < 2) throw std::invalid_argument("a double switch requires at least two controls");
        if (static_cast<int>(theta0.size()) != J0 || static_cast<int>(theta1.size()) != J1)
            throw std::invalid_argument("switch counts do not match the listed times");
        if (static_cast<int>(arc_controls.size()) != arcs())
            throw std::invalid_argument("need " + std::to_string(arcs()) + " arc control vectors");
        double prev = 0.0;
        for (int k = 1; k < arcs(); ++k) {
            double t = arc_start(k);
            if (!(t > prev)) throw std::invalid_argument("switching times must satisfy 0 < theta0 < tau < theta1 < T");
            prev = t;
        }
        if (!(T > prev)) throw std::invalid_argument("switching times must satisfy 0 < theta0 < tau < theta1 < T");
        for (const Vec& u : arc_controls) {
            if (u.size() != m) throw std::invalid_argument("arc control vectors must have m entries");
            for (int s = 0; s < m; ++s)
                if (u[s] != 1.0 && u[s] != -1.0) throw std::invalid_argument("arc controls must be +1 or -1");
        }
        switch_component.clear();
        for (int k = 1; k < arcs(); ++k) {
            std::vector<int> diff;
            for (int s = 0; s < m; ++s)
                if (arc_controls[k][s] != arc_controls[k - 1][s]) diff.push_back(s);
            if (k == J0 + 1) {
                if (diff.size() != 2) throw std::invalid_argument("exactly two components must flip at tau");
                double1 = diff[0];
                double2 = diff[1];
                sign1 = (arc_controls[k][double1] - arc_controls[k - 1][double1]) / 2.0;
                sign2 = (arc_controls[k][double2] - arc_controls[k - 1][double2]) / 2.0;
            } else {
                if (diff.size() != 1)
                    throw std::invalid_argument("exactly one component must flip at simple switch " + std::to_string(k));
                switch_component.push_back(diff[0]);
            }
        }
    }
};

struct ReferenceExtremal {
    Vec x0hat;
    Vec lambda0hat;
    int p0 = 1;
    SwitchingSchedule schedule;
};

struct FlowResult {
    Vec x;
    Mat transition;
    Vec p;  // empty unless requested
};

struct FlowOptions {
    double rtol = 1e-10;
    double atol = 1e-10;
    int min_steps = 10;
    int inserted_steps = 8;
    double blowup = 1e8;
};

namespace detail {

using State = std::vector<double>;

// State layout: x (n), then p (n) if with_p, then M (n*n, row-major) if with_M.
struct LiftedSystem {
    const ArcField* k;
    int n;
    bool with_p, with_M;

    void operator()(const State& z, State& dz, double) const {
        const double* x = z.data();
        k->value(x, dz.data());
        if (!with_p && !with_M) return;
        double J[256];
        k->jacobian(x, J);
        int off = n;
        if (with_p) {
            const double* p = z.data() + off;
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) acc += p[i] * J[i * n + j];
                dz[off + j] = -acc;
            }
            off += n;
        }
        if (with_M) {
            const double* M = z.data() + off;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int l = 0; l < n; ++l) acc += J[i * n + l] * M[l * n + j];
                    dz[off + i * n + j] = acc;
                }
        }
    }
};

inline void fixed_steps(const ArcField& k, int n, bool with_p, bool with_M, State& z, double duration, int steps) {
    if (duration == 0.0 || steps <= 0) return;
    boost::numeric::odeint::runge_kutta_fehlberg78<State> stepper;
    LiftedSystem sys{&k, n, with_p, with_M};
    const double dt = duration / steps;
    double t = 0.0;
    for (int i = 0; i < steps; ++i) {
        stepper.do_step(sys, z, t, dt);
        t += dt;
    }
}

inline int adaptive_step_count(const ArcField& k, int n, State z, double duration, double rtol, double atol) {
    namespace odeint = boost::numeric::odeint;
    if (duration <= 0.0) return 0;
    LiftedSystem sys{&k, n, true, true};
    auto stepper = odeint::make_controlled<odeint::runge_kutta_fehlberg78<State>>(atol, rtol);
    return static_cast<int>(odeint::integrate_adaptive(stepper, sys, z, 0.0, duration, duration / 20.0));
}

inline State pack(const Vec& x, const Vec* p, const Mat* M) {
    const Eigen::Index n = x.size();
    State z(n + (p ? n : 0) + (M ? n * n : 0));
    for (Eigen::Index i = 0; i < n; ++i) z[i] = x[i];
    Eigen::Index off = n;
    if (p) {
        for (Eigen::Index i = 0; i < n; ++i) z[off + i] = (*p)[i];
        off += n;
    }
    if (M)
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) z[off + i * n + j] = (*M)(i, j);
    return z;
}

inline void unpack(const State& z, int n, Vec& x, Vec* p, Mat* M) {
    x = Eigen::Map<const Vec>(z.data(), n);
    int off = n;
    if (p) {
        *p = Eigen::Map<const Vec>(z.data() + off, n);
        off += n;
    }
    if (M) {
        M->resize(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) (*M)(i, j) = z[off + i * n + j];
    }
}

}  // namespace detail

// The integrated reference extremal: arc fields, frozen step plans, and the
// states (x, p, transition) at every arc start. Owns a copy of the problem so
// that the arc fields keep a stable address.
class Reference {
public:
    Reference(const ControlAffineProblem& problem, const ReferenceExtremal& ext, FlowOptions opt = {})
        : pb_(std::make_unique<ControlAffineProblem>(problem)), ext_(ext), opt_(opt) {
        const auto& sc = ext_.schedule;
        const int n = pb_->n;
        for (const Vec& u : sc.arc_controls) arcs_.emplace_back(pb_.get(), u);
        const Vec& u0J0 = sc.arc_controls[sc.J0];
        for (int nu = 0; nu < 2; ++nu) {
            Vec u = u0J0;
            int s = nu == 0 ? sc.double1 : sc.double2;
            u[s] = sc.arc_controls[sc.J0 + 1][s];
            knu_[nu] = ArcField(pb_.get(), u);
            Vec e = Vec::Zero(pb_->m);
            e[s] = nu == 0 ? sc.sign1 : sc.sign2;
            fnu_[nu] = ArcField(pb_.get(), e, 0.0);
        }
        Vec x = ext_.x0hat, p = ext_.lambda0hat;
        Mat M = Mat::Identity(n, n);
        node_x_.push_back(x);
        node_p_.push_back(p);
        node_M_.push_back(M);
        for (int k = 0; k < sc.arcs(); ++k) {
            double len = arc_length(k);
            detail::State z = detail::pack(x, &p, &M);
            int count = detail::adaptive_step_count(arcs_[k], n, z, len, opt_.rtol, opt_.atol);
            steps_.push_back(std::max(opt_.min_steps, 2 * count));
            detail::fixed_steps(arcs_[k], n, true, true, z, len, steps_.back());
            detail::unpack(z, n, x, &p, &M);
            check(x, p, "reference arc " + std::to_string(k));
            node_x_.push_back(x);
            node_p_.push_back(p);
            node_M_.push_back(M);
        }
    }

    const ControlAffineProblem& problem() const { return *pb_; }
    const ReferenceExtremal& extremal() const { return ext_; }
    const SwitchingSchedule& schedule() const { return ext_.schedule; }
    const FlowOptions& options() const { return opt_; }
    int n() const { return pb_->n; }
    double T() const { return pb_->T; }

    const ArcField& arc(int k) const { return arcs_[k]; }
    // k_nu = k_{0J0} + 2 f_nu, nu in {1, 2}.
    const ArcField& k_nu(int nu) const { return knu_[nu - 1]; }
    // The normalized f_nu with k_10 - k_0J0 = 2 f_1 + 2 f_2.
    const ArcField& f_nu(int nu) const { return fnu_[nu - 1]; }
    int steps(int k) const { return steps_[k]; }
    double arc_length(int k) const { return schedule().arc_end(k, pb_->T) - schedule().arc_start(k); }

    // Arc index containing t; switching instants belong to the arc they start.
    int arc_at(double t) const {
        const auto& sc = schedule();
        int k = 0;
        while (k + 1 < sc.arcs() && t >= sc.arc_start(k + 1)) ++k;
        return k;
    }

    const Vec& node_x(int k) const { return node_x_[k]; }
    const Vec& node_p(int k) const { return node_p_[k]; }
    const Mat& node_M(int k) const { return node_M_[k]; }
    const Vec& xd() const { return node_x_[schedule().J0 + 1]; }
    const Vec& xf() const { return node_x_.back(); }
    const Vec& lambdaT() const { return node_p_.back(); }

    // Number of frozen steps for a partial run of arc k over duration d.
    int partial_steps(int k, double d) const {
        double len = arc_length(k);
        return std::max(1, static_cast<int>(std::ceil(steps_[k] * std::fabs(d) / len - 1e-9)));
    }

    // Reference state at time t, integrating from the stored start of its arc.
    FlowResult state_at(double t, bool with_p = true) const {
        if (t < 0.0 || t > pb_->T) throw std::out_of_range("time outside [0, T]");
        int k = arc_at(t);
        if (t == pb_->T) k = schedule().arcs() - 1;
        double d = t - schedule().arc_start(k);
        Vec x = node_x_[k], p = node_p_[k];
        Mat M = node_M_[k];
        if (d > 0.0) {
            detail::State z = detail::pack(x, &p, &M);
            detail::fixed_steps(arcs_[k], n(), true, true, z, d, partial_steps(k, d));
            detail::unpack(z, n(), x, &p, &M);
        }
        FlowResult r{x, M, {}};
        if (with_p) r.p = p;
        return r;
    }

    // S_t(x) and its transition for the reference control, from an arbitrary x.
    FlowResult flow_from(const Vec& x0, double t, bool with_M = true) const {
        const auto& sc = schedule();
        Vec x = x0;
        Mat M = Mat::Identity(n(), n());
        for (int k = 0; k < sc.arcs(); ++k) {
            double a = sc.arc_start(k), b = sc.arc_end(k, pb_->T);
            if (t <= a) break;
            double d = std::min(t, b) - a;
            int N = d >= b - a ? steps_[k] : partial_steps(k, d);
            detail::State z = with_M ? detail::pack(x, nullptr, &M) : detail::pack(x, nullptr, nullptr);
            detail::fixed_steps(arcs_[k], n(), false, with_M, z, d, N);
            detail::unpack(z, n(), x, nullptr, with_M ? &M : nullptr);
        }
        check(x, Vec::Zero(n()), "flow from perturbed point");
        return {x, with_M ? M : Mat(), {}};
    }

    // Lifted flow of one arc field from (p, x) over a (possibly negative) duration.
    void lift_flow(const ArcField& k, Vec& p, Vec& x, double duration, int steps) const {
        detail::State z = detail::pack(x, &p, nullptr);
        detail::fixed_steps(k, n(), true, false, z, duration, steps);
        detail::unpack(z, n(), x, &p, nullptr);
        check(x, p, "lifted flow");
    }

    // State-only flow of one arc field.
    Vec state_flow(const ArcField& k, const Vec& x0, double duration, int steps) const {
        detail::State z = detail::pack(x0, nullptr, nullptr);
        detail::fixed_steps(k, n(), false, false, z, duration, steps);
        Vec x;
        detail::unpack(z, n(), x, nullptr, nullptr);
        check(x, Vec::Zero(n()), "state flow");
        return x;
    }

private:
    std::unique_ptr<ControlAffineProblem> pb_;
    ReferenceExtremal ext_;
    FlowOptions opt_;
    std::vector<ArcField> arcs_;
    ArcField knu_[2], fnu_[2];
    std::vector<int> steps_;
    std::vector<Vec> node_x_, node_p_;
    std::vector<Mat> node_M_;

    void check(const Vec& x, const Vec& p, const std::string& where) const {
        if (!x.allFinite() || !p.allFinite()) throw FlowError("integrator produced non-finite values in " + where);
        if (x.norm() > opt_.blowup || p.norm() > opt_.blowup) throw FlowError("state blow-up in " + where);
    }
};

inline FlowResult integrate_reference(const Reference& ref, double t) { return ref.state_at(t, false); }

inline FlowResult integrate_reference(const ControlAffineProblem& pb, const ReferenceExtremal& ext, double t) {
    return Reference(pb, ext).state_at(t, false);
}

struct AdjointTrace {
    std::vector<double> t;
    std::vector<Vec> x, p;
    std::vector<int> arc;  // arc index of each sample (samples at arc starts belong to that arc)
};

// Dense samples of (x, p) on every arc; spacing is at most T / min_samples.
inline AdjointTrace integrate_adjoint(const Reference& ref, int min_samples = 2000) {
    AdjointTrace tr;
    const auto& sc = ref.schedule();
    for (int k = 0; k < sc.arcs(); ++k) {
        double len = ref.arc_length(k);
        int S = std::max(4, static_cast<int>(std::ceil(min_samples * len / ref.T())));
        int q = std::max(1, static_cast<int>(std::ceil(static_cast<double>(ref.steps(k)) / S)));
        Vec x = ref.node_x(k), p = ref.node_p(k);
        double a = sc.arc_start(k);
        for (int i = 0; i <= S; ++i) {
            if (i > 0) ref.lift_flow(ref.arc(k), p, x, len / S, q);
            if (i == S && k + 1 < sc.arcs()) break;  // next arc records the shared instant
            tr.t.push_back(i == S ? a + len : a + len * i / S);
            tr.x.push_back(x);
            tr.p.push_back(p);
            tr.arc.push_back(k);
        }
    }
    return tr;
}

inline AdjointTrace integrate_adjoint(const ControlAffineProblem& pb, const ReferenceExtremal& ext) {
    return integrate_adjoint(Reference(pb, ext));
}

struct SwitchingFunctions {
    AdjointTrace trace;
    std::vector<std::vector<double>> sigma;  // sigma[s][i] on trace samples
    // At each switching instant (arc starts 1..arcs-1), for each component s:
    // exact value and one-sided derivatives <p, [k_left, f_s]> and <p, [k_right, f_s]>.
    struct AtSwitch {
        double t;
        Vec value, left_derivative, right_derivative;
    };
    std::vector<AtSwitch> at_switch;
};

inline SwitchingFunctions switching_functions(const Reference& ref, int min_samples = 2000) {
    SwitchingFunctions sf;
    sf.trace = integrate_adjoint(ref, min_samples);
    const auto& pb = ref.problem();
    sf.sigma.assign(pb.m, {});
    for (int s = 0; s < pb.m; ++s)
        for (size_t i = 0; i < sf.trace.t.size(); ++i)
            sf.sigma[s].push_back(sf.trace.p[i].dot(pb.f[s].value(sf.trace.x[i])));
    const auto& sc = ref.schedule();
    for (int k = 1; k < sc.arcs(); ++k) {
        SwitchingFunctions::AtSwitch a;
        a.t = sc.arc_start(k);
        const Vec &x = ref.node_x(k), &p = ref.node_p(k);
        a.value.resize(pb.m);
        a.left_derivative.resize(pb.m);
        a.right_derivative.resize(pb.m);
        for (int s = 0; s < pb.m; ++s) {
            a.value[s] = p.dot(pb.f[s].value(x));
            a.left_derivative[s] = p.dot(bracket(ref.arc(k - 1), pb.f[s], x));
            a.right_derivative[s] = p.dot(bracket(ref.arc(k), pb.f[s], x));
        }
        sf.at_switch.push_back(a);
    }
    return sf;
}

// ---------------------------------------------------------------------------
// Pulled-back fields g(x) = M(theta; x)^{-1} k(S_theta(x)).

struct PulledField {
    ArcField k;
    double theta = 0.0;
    Vec value0;  // at x0hat
    Mat jac0;    // central finite differences at x0hat
};

inline Vec pulled_value(const Reference& ref, const ArcField& k, double theta, const Vec& x) {
    if (theta == 0.0) return k.value(x);
    FlowResult r = ref.flow_from(x, theta, true);
    Eigen::FullPivLU<Mat> lu(r.transition);
    if (!lu.isInvertible()) throw FlowError("non-invertible transition while pulling back a field");
    return lu.solve(k.value(r.x));
}

inline Mat pulled_jacobian(const Reference& ref, const ArcField& k, double theta, const Vec& x) {
    const int n = ref.n();
    Mat J(n, n);
    for (int j = 0; j < n; ++j) {
        double h = 1e-5 * (1.0 + std::fabs(x[j]));
        Vec xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        J.col(j) = (pulled_value(ref, k, theta, xp) - pulled_value(ref, k, theta, xm)) / (2.0 * h);
    }
    return J;
}

inline PulledField make_pulled(const Reference& ref, const ArcField& k, double theta) {
    const Vec& x0 = ref.extremal().x0hat;
    return {k, theta, pulled_value(ref, k, theta, x0), pulled_jacobian(ref, k, theta, x0)};
}

struct PulledBackFields {
    std::vector<PulledField> g0;  // g_00 .. g_0J0
    std::vector<PulledField> g1;  // g_10 .. g_1J1
    PulledField h[2];             // h_1, h_2
    PulledField ft[2];            // normalized f_1, f_2 pulled back from tau

    // Arcs of branch nu in time order: g_00..g_0J0, h_nu, g_10..g_1J1.
    std::vector<const PulledField*> ordered(int nu) const {
        std::vector<const PulledField*> v;
        for (const auto& g : g0) v.push_back(&g);
        v.push_back(&h[nu - 1]);
        for (const auto& g : g1) v.push_back(&g);
        return v;
    }
};

inline PulledBackFields pull_back_fields(const Reference& ref) {
    const auto& sc = ref.schedule();
    PulledBackFields pf;
    for (int j = 0; j <= sc.J0; ++j) pf.g0.push_back(make_pulled(ref, ref.arc(j), sc.arc_start(j)));
    for (int j = 0; j <= sc.J1; ++j) {
        int k = sc.J0 + 1 + j;
        pf.g1.push_back(make_pulled(ref, ref.arc(k), sc.arc_start(k)));
    }
    for (int nu = 1; nu <= 2; ++nu) {
        pf.h[nu - 1] = make_pulled(ref, ref.k_nu(nu), sc.tau);
        pf.ft[nu - 1] = make_pulled(ref, ref.f_nu(nu), sc.tau);
    }
    return pf;
}

// Hamiltonian field of the lift of a pulled-back field at (lambda0, x0).
inline Vec lifted_at(const PulledField& g, const Vec& lambda0) {
    const Eigen::Index n = lambda0.size();
    Vec v(2 * n);
    v.head(n) = -(lambda0.transpose() * g.jac0).transpose();
    v.tail(n) = g.value0;
    return v;
}

// ---------------------------------------------------------------------------
// Maximized flow.

struct MaximizedFlowState {
    std::vector<double> theta0;  // theta_00 = 0, theta_01 .. theta_0J0
    double tau[2] = {0.0, 0.0};
    double theta10_nu[2] = {0.0, 0.0};
    int nu = 1;
    double theta0_last = 0.0;  // theta_{0,J0+1} = tau_nu
    double theta10 = 0.0;      // theta^nu_10
    std::vector<double> theta1;  // theta^nu_11 .. theta^nu_1J1 for the selected branch
    // Cotangent points at the switching instants.
    std::vector<CotangentPoint> phi0;  // phi_0j at theta_0j, j = 0..J0
    CotangentPoint phi_tau[2];         // at tau_nu along the k_0J0 arc
    CotangentPoint phi10[2];           // at theta^nu_10 along the k_nu arc
    std::vector<CotangentPoint> phi1;  // phi^nu_1j at theta^nu_1j, j = 0..J1 (phi1[0] = phi10[nu])
    int newton_iterations = 0;

    // Checks 0 < theta_01 < ... < theta_0,J0+1 <= theta_10 < theta_11 < ... < T.
    bool ordering_ok(double T, std::string* why = nullptr) const {
        std::vector<std::pair<double, std::string>> chain;
        for (size_t j = 0; j < theta0.size(); ++j) chain.emplace_back(theta0[j], "theta_0" + std::to_string(j));
        chain.emplace_back(theta0_last, "theta_0,J0+1");
        chain.emplace_back(theta10, "theta_10");
        for (size_t j = 0; j < theta1.size(); ++j) chain.emplace_back(theta1[j], "theta_1" + std::to_string(j + 1));
        chain.emplace_back(T, "T");
        for (size_t i = 1; i < chain.size(); ++i) {
            bool weak = chain[i].second == "theta_10";
            bool ok = weak ? chain[i - 1].first <= chain[i].first : chain[i - 1].first < chain[i].first;
            if (!ok) {
                if (why) *why = chain[i - 1].second + " vs " + chain[i].second;
                return false;
            }
        }
        return true;
    }
};

class NewtonFailure : public FlowError {
public:
    using FlowError::FlowError;
};

class MaximizedFlow {
public:
    explicit MaximizedFlow(const Reference& ref) : ref_(&ref) {}

    const Reference& reference() const { return *ref_; }

    // Resolves every switching time for the covector l = (p, x). With
    // forced_nu in {1, 2} the post-switch chain follows that branch whatever the
    // order of tau_1, tau_2.
    MaximizedFlowState resolve(const CotangentPoint& l, int forced_nu = 0) const {
        const Reference& R = *ref_;
        const auto& sc = R.schedule();
        MaximizedFlowState st;
        st.theta0.push_back(0.0);
        st.phi0.push_back(l);
        for (int j = 1; j <= sc.J0; ++j) {
            const CotangentPoint& start = st.phi0.back();
            double ts = st.theta0.back();
            CotangentPoint at;
            double t = root(R.arc(j - 1), R.arc(j), start, ts, sc.arc_start(j), R.steps(j - 1), at, st);
            st.theta0.push_back(t);
            st.phi0.push_back(at);
        }
        const int kJ0 = sc.J0;
        for (int nu = 1; nu <= 2; ++nu) {
            CotangentPoint at;
            st.tau[nu - 1] = root(R.arc(kJ0), R.k_nu(nu), st.phi0.back(), st.theta0.back(), sc.tau, R.steps(kJ0), at, st);
            st.phi_tau[nu - 1] = at;
        }
        for (int nu = 1; nu <= 2; ++nu) {
            CotangentPoint at;
            st.theta10_nu[nu - 1] = root(R.k_nu(nu), R.arc(sc.J0 + 1), st.phi_tau[nu - 1], st.tau[nu - 1],
                                         st.tau[nu - 1], R.options().inserted_steps, at, st);
            st.phi10[nu - 1] = at;
        }
        st.nu = forced_nu ? forced_nu : (st.tau[0] <= st.tau[1] ? 1 : 2);
        st.theta0_last = st.tau[st.nu - 1];
        st.theta10 = st.theta10_nu[st.nu - 1];
        post_chain(st, st.nu);
        return st;
    }

    // theta^nu_1j for the requested branch, independent of the natural order.
    std::vector<double> branch_times(const CotangentPoint& l, int nu) const { return resolve(l, nu).theta1; }

    // H_t(l): the flow value at time t following the resolved branch.
    CotangentPoint evaluate(const CotangentPoint& l, double t, MaximizedFlowState* out = nullptr) const {
        MaximizedFlowState st = resolve(l);
        if (out) *out = st;
        return evaluate(st, t);
    }

    CotangentPoint evaluate(const MaximizedFlowState& st, double t) const {
        const Reference& R = *ref_;
        const auto& sc = R.schedule();
        auto run = [&](const ArcField& k, CotangentPoint c, double d, int steps) {
            if (d != 0.0) R.lift_flow(k, c.p, c.x, d, steps);
            return c;
        };
        if (t < st.theta0_last) {
            int j = sc.J0;
            while (j > 0 && t < st.theta0[j]) --j;
            double d = t - st.theta0[j];
            return run(R.arc(j), st.phi0[j], d, R.partial_steps(j, d));
        }
        if (t < st.theta10)
            return run(R.k_nu(st.nu), st.phi_tau[st.nu - 1], t - st.theta0_last, R.options().inserted_steps);
        int j = sc.J1;
        while (j > 0 && t < st.theta1[j - 1]) --j;
        double tj = j == 0 ? st.theta10 : st.theta1[j - 1];
        int k = sc.J0 + 1 + j;
        return run(R.arc(k), st.phi1[j], t - tj, R.partial_steps(k, t - tj));
    }

private:
    const Reference* ref_;

    void post_chain(MaximizedFlowState& st, int nu) const {
        const Reference& R = *ref_;
        const auto& sc = R.schedule();
        st.phi1.clear();
        st.theta1.clear();
        st.phi1.push_back(st.phi10[nu - 1]);
        double ts = st.theta10_nu[nu - 1];
        for (int j = 1; j <= sc.J1; ++j) {
            int k = sc.J0 + 1 + j;
            CotangentPoint at;
            double t = root(R.arc(k - 1), R.arc(k), st.phi1.back(), ts, sc.arc_start(k), R.steps(k - 1), at, st);
            st.theta1.push_back(t);
            st.phi1.push_back(at);
            ts = t;
        }
    }

    // Root in t of (K_new - K_old) along the lifted k_old flow started at
    // (start, ts). The whole run from ts uses the arc's frozen step count.
    double root(const ArcField& k_old, const ArcField& k_new, const CotangentPoint& start, double ts, double seed,
                int steps, CotangentPoint& at, MaximizedFlowState& st) const {
        const Reference& R = *ref_;
        auto state_at = [&](double t) {
            CotangentPoint c = start;
            double d = t - ts;
            if (d != 0.0) R.lift_flow(k_old, c.p, c.x, d, steps);
            return c;
        };
        auto phi = [&](const CotangentPoint& c) { return c.p.dot(k_new.value(c.x) - k_old.value(c.x)); };
        auto dphi = [&](const CotangentPoint& c) { return c.p.dot(bracket(k_old, k_new, c.x)); };

        double t = seed;
        CotangentPoint c = state_at(t);
        double f = phi(c);
        // Bracket [lo, hi] with phi(lo) < 0 < phi(hi) once found; phi increases through the root.
        double lo = -INFINITY, hi = INFINITY;
        double last_step = INFINITY;
        for (int it = 0; it < 100; ++it) {
            ++st.newton_iterations;
            if (f < 0.0) lo = std::max(lo, t);
            if (f > 0.0) hi = std::min(hi, t);
            if (f == 0.0) break;
            double d = dphi(c);
            double tn = d > 0.0 ? t - f / d : NAN;
            // A Newton step below the resolution of t means t is the root.
            if (std::isfinite(tn) && std::fabs(tn - t) <= 4e-16 * std::max(1.0, std::fabs(t))) break;
            if (!std::isfinite(tn) || (std::isfinite(lo) && tn <= lo) || (std::isfinite(hi) && tn >= hi)) {
                if (std::isfinite(lo) && std::isfinite(hi))
                    tn = 0.5 * (lo + hi);
                else
                    throw NewtonFailure("switching-time root solve lost its bracket");
            }
            double step = std::fabs(tn - t);
            t = tn;
            c = state_at(t);
            f = phi(c);
            // Continue past 1e-12 until the step stops shrinking: finite
            // differences through these roots need full precision.
            if (step < 1e-12 * std::max(1.0, std::fabs(t)) && (step >= 0.5 * last_step || step == 0.0)) break;
            if (step < 1e-15 * std::max(1.0, std::fabs(t))) break;
            last_step = step;
            if (it == 99) throw NewtonFailure("switching-time root solve did not converge");
        }
        if (std::fabs(t - seed) > 0.5 * R.T()) throw NewtonFailure("switching-time root left the validity neighbourhood");
        at = c;
        return t;
    }
};

inline std::pair<CotangentPoint, MaximizedFlowState> maximized_flow(const MaximizedFlow& mf, const CotangentPoint& l,
                                                                    double t) {
    MaximizedFlowState st = mf.resolve(l);
    return {mf.evaluate(st, t), st};
}

// ---------------------------------------------------------------------------
// Gradients at lambda0 of the switching-time functions. Row vectors act on
// stacked tangent vectors (dp, dx); Delta matrices are endomorphisms of R^{2n}.

struct SwitchingGradients {
    int n = 0;
    std::vector<Vec> G0, G1;  // lifted fields of g_0j, g_1j at lambda0
    Vec H[2];
    std::vector<Vec> dtheta0;  // j = 1..J0 (index j-1)
    std::vector<Mat> Delta0;   // j = 0..J0
    Vec dtau[2];
    Vec dtheta10[2];
    std::vector<Vec> dtheta1[2];  // j = 1..J1 (index j-1)
    std::vector<Mat> Delta1[2];   // j = 0..J1
    double tautheta_residual[2] = {0.0, 0.0};
    // Denominators, all positive under the Legendre conditions.
    std::vector<double> den0, den1;
    double den_tau[2] = {0.0, 0.0}, den_10[2] = {0.0, 0.0};
};

class ZeroDenominator : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline SwitchingGradients switching_time_gradients(const Reference& ref, const PulledBackFields& pf) {
    const auto& sc = ref.schedule();
    const int n = ref.n();
    const Vec& l0 = ref.extremal().lambda0hat;
    const Mat O = omega_matrix(n);
    SwitchingGradients gr;
    gr.n = n;
    for (const auto& g : pf.g0) gr.G0.push_back(lifted_at(g, l0));
    for (const auto& g : pf.g1) gr.G1.push_back(lifted_at(g, l0));
    for (int nu = 0; nu < 2; ++nu) gr.H[nu] = lifted_at(pf.h[nu], l0);
    const Mat I = Mat::Identity(2 * n, 2 * n);

    // Row vector r with r . dl = -sigma(D dl, w) / den.
    auto quotient = [&](const Mat& D, const Vec& w, double den, const char* what) -> Vec {
        if (!(std::fabs(den) > 0.0)) throw ZeroDenominator(std::string("zero denominator in ") + what);
        return -(D.transpose() * (O * w)) / den;
    };

    gr.Delta0.push_back(I);
    for (int j = 1; j <= sc.J0; ++j) {
        const Vec &a = gr.G0[j - 1], &b = gr.G0[j];
        double den = sigma(a, b);
        gr.den0.push_back(den);
        Vec r = quotient(gr.Delta0.back(), b - a, den, "dtheta_0j");
        gr.dtheta0.push_back(r);
        gr.Delta0.push_back(gr.Delta0.back() - (b - a) * r.transpose());
    }
    const Mat& DJ = gr.Delta0.back();
    const Vec& GJ = gr.G0.back();
    for (int nu = 0; nu < 2; ++nu) {
        const Vec& Hn = gr.H[nu];
        gr.den_tau[nu] = sigma(GJ, Hn);
        gr.dtau[nu] = quotient(DJ, Hn - GJ, gr.den_tau[nu], "dtau_nu");
        Mat Dp = DJ - (Hn - GJ) * gr.dtau[nu].transpose();
        gr.den_10[nu] = sigma(Hn, gr.G1[0]);
        gr.dtheta10[nu] = quotient(Dp, gr.G1[0] - Hn, gr.den_10[nu], "dtheta^nu_10");
        Mat D = Dp - (gr.G1[0] - Hn) * gr.dtheta10[nu].transpose();
        gr.Delta1[nu].push_back(D);
        for (int j = 1; j <= sc.J1; ++j) {
            const Vec &a = gr.G1[j - 1], &b = gr.G1[j];
            double den = sigma(a, b);
            if (nu == 0) gr.den1.push_back(den);
            Vec r = quotient(gr.Delta1[nu].back(), b - a, den, "dtheta^nu_1j");
            gr.dtheta1[nu].push_back(r);
            gr.Delta1[nu].push_back(gr.Delta1[nu].back() - (b - a) * r.transpose());
        }
    }
    // dtheta^1_10 = dtau_1 - d(tau_1 - tau_2) sigma(G_0J0, H_2) / sigma(H_1, G_10), and symmetrically.
    for (int nu = 0; nu < 2; ++nu) {
        int o = 1 - nu;
        Vec pred = gr.dtau[nu] - (gr.dtau[nu] - gr.dtau[o]) * sigma(GJ, gr.H[o]) / sigma(gr.H[nu], gr.G1[0]);
        gr.tautheta_residual[nu] = (pred - gr.dtheta10[nu]).cwiseAbs().maxCoeff();
    }
    return gr;
}

}  // namespace bbcert
