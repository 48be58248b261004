#pragma once
// Synthetic planar problems with a prescribed double switch.
//
// Construction: the double switch sits at x_d = 0 with lambda(tau) = (0, 1).
// With f1 = (1, 0), f2 = (kappa + gamma x2, b1 x1) and
// f0 = (a0 + omega x2 + mu x1^2, a1 x1 + a2 x2), the double-switch Legendre
// quantities at tau are 2 d1, 2 d2, 2 (d2 + 2 c), 2 (d1 - 2 c) with
//   c = b1, d1 = b1 - a1, d2 = b1 (a0 - 1) - a1 kappa.
// An optional third control f3 = (0, 1) has sigma_3 = p2, which vanishes a
// quarter period away from tau and supplies the simple switches. The extremal is
// then the maximized flow integrated both ways from (x_d, lambda(tau)).

#include <random>
#include <string>
#include <vector>

#include "problem_io.hpp"

namespace bbcert {

struct FixtureRecipe {
    std::string name = "normal-generic";  // normal-generic, abnormal, commuting-f1f2, coercivity-broken, degenerate-dtau
    std::uint64_t seed = 1;
    int J0 = 0, J1 = 0;
};

class FixtureError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FixtureParams {
    double a0, a1, a2, omega, mu, kappa, b1, gamma, C;
};

namespace detail {

inline ControlAffineProblem planar_problem(const ProblemFile& f) {
    ControlAffineProblem pb;
    pb.n = f.dimension;
    pb.m = f.controls;
    pb.T = 1.0;
    pb.f0 = VectorFieldSpec::from_strings(f.drift, pb.n);
    for (const auto& g : f.fields) pb.f.push_back(VectorFieldSpec::from_strings(g, pb.n));
    pb.c0 = ScalarFunction("0", pb.n);
    pb.cf = ScalarFunction("0", pb.n);
    return pb;
}

struct SwitchEvent {
    double t;
    int component;
    Vec x, p;
};

// Integrates the maximized flow from (x, p) at t = 0 in direction dir = +-1 up
// to |t| = horizon, flipping u_s whenever sigma_s changes sign. Returns the
// switches in order of increasing |t| and the state at the horizon.
inline std::vector<SwitchEvent> maximized_sweep(const ControlAffineProblem& pb, Vec x, Vec p, Vec u, double dir,
                                                double horizon, int max_events) {
    const int n = pb.n;
    const double h = 2e-3;
    std::vector<SwitchEvent> ev;
    auto sig = [&](const Vec& xx, const Vec& pp, int s) { return pp.dot(pb.f[s].value(xx)); };
    auto step = [&](const Vec& u_, const Vec& xa, const Vec& pa, double dt, Vec& xb, Vec& pb_) {
        ArcField k(&pb, u_);
        State z = pack(xa, &pa, nullptr);
        fixed_steps(k, n, true, false, z, dt, 1);
        unpack(z, n, xb, &pb_, nullptr);
    };
    double t = 0.0;
    bool first = true;
    while (std::fabs(t) < horizon && static_cast<int>(ev.size()) < max_events) {
        Vec xb, pb_;
        step(u, x, p, dir * h, xb, pb_);
        int hit = -1;
        double best = h;
        if (!first) {
            for (int s = 0; s < pb.m; ++s) {
                if (u[s] * sig(xb, pb_, s) >= 0.0) continue;
                // Bisection on the step length for the root of sigma_s.
                double lo = 0.0, hi = h;
                for (int it = 0; it < 80; ++it) {
                    double mid = 0.5 * (lo + hi);
                    Vec xm, pm;
                    step(u, x, p, dir * mid, xm, pm);
                    if (u[s] * sig(xm, pm, s) >= 0.0)
                        lo = mid;
                    else
                        hi = mid;
                }
                if (hi < best) {
                    best = hi;
                    hit = s;
                }
            }
        }
        first = false;
        if (hit < 0) {
            x = xb;
            p = pb_;
            t += dir * h;
            continue;
        }
        step(u, x, p, dir * best, x, p);
        t += dir * best;
        u[hit] = -u[hit];
        ev.push_back({t, hit, x, p});
    }
    return ev;
}

inline Vec flow_maximized(const ControlAffineProblem& pb, Vec& x, Vec& p, Vec u, double duration) {
    ArcField k(&pb, u);
    int N = std::max(1, static_cast<int>(std::ceil(std::fabs(duration) / 2e-3)));
    State z = pack(x, &p, nullptr);
    fixed_steps(k, pb.n, true, false, z, duration, N);
    unpack(z, pb.n, x, &p, nullptr);
    return x;
}

inline double uniform(std::mt19937_64& rng, double a, double b) {
    return a + (b - a) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace detail

inline FixtureParams draw_fixture_params(const std::string& recipe, std::mt19937_64& rng) {
    using detail::uniform;
    FixtureParams q;
    q.a0 = uniform(rng, 1.3, 1.7);
    q.a1 = uniform(rng, -1.2, -0.8);
    q.a2 = uniform(rng, -0.15, 0.15);
    q.omega = uniform(rng, 1.6, 2.4);
    q.mu = uniform(rng, -0.1, 0.1);
    q.kappa = uniform(rng, 0.5, 0.7);
    q.b1 = uniform(rng, 0.12, 0.25);
    q.gamma = uniform(rng, -0.15, 0.15);
    q.C = uniform(rng, 0.5, 1.5);
    if (recipe == "commuting-f1f2") q.b1 = 0.0;
    if (recipe == "degenerate-dtau") {
        q.b1 = 0.0;
        q.gamma = 0.0;
    }
    if (recipe == "coercivity-broken") q.C = uniform(rng, -20.0, -10.0);
    return q;
}

// Builds the problem document for one parameter draw; throws FixtureError when
// the draw does not produce the requested switching structure.
inline ProblemFile fixture_from_params(const FixtureRecipe& r, const FixtureParams& q) {
    const bool simple = r.J0 + r.J1 > 0;
    ProblemFile f;
    f.dimension = 2;
    f.controls = simple ? 3 : 2;
    f.drift = {num_text(q.a0) + " + " + num_text(q.omega) + "*x2 + " + num_text(q.mu) + "*x1^2",
               num_text(q.a1) + "*x1 + " + num_text(q.a2) + "*x2"};
    f.fields = {{"1", "0"}, {num_text(q.kappa) + " + " + num_text(q.gamma) + "*x2", num_text(q.b1) + "*x1"}};
    if (simple) f.fields.push_back({"0", "1"});

    const ControlAffineProblem pb = detail::planar_problem(f);
    const Vec xd = Vec::Zero(2);
    Vec ld(2);
    ld << 0.0, 1.0;
    Vec u_after = Vec::Ones(f.controls), u_before = Vec::Ones(f.controls);
    u_before[0] = u_before[1] = -1.0;

    const double horizon = 8.0;
    auto back = detail::maximized_sweep(pb, xd, ld, u_before, -1.0, horizon, r.J0 + 1);
    auto fwd = detail::maximized_sweep(pb, xd, ld, u_after, +1.0, horizon, r.J1 + 1);
    auto check_events = [&](const std::vector<detail::SwitchEvent>& ev, int J, const char* side) {
        if (static_cast<int>(ev.size()) < J) throw FixtureError(std::string("too few simple switches ") + side);
        for (int j = 0; j < J; ++j)
            if (ev[j].component != 2) throw FixtureError(std::string("unexpected switch of a double-switch control ") + side);
    };
    check_events(back, r.J0, "before tau");
    check_events(fwd, r.J1, "after tau");

    // End points: halfway between the last kept switch and the next event, capped.
    auto end_offset = [&](const std::vector<detail::SwitchEvent>& ev, int J) {
        double last = J > 0 ? std::fabs(ev[J - 1].t) : 0.0;
        double next = static_cast<int>(ev.size()) > J ? std::fabs(ev[J].t) : horizon;
        double gap = std::min(0.5 * (next - last), 1.2);
        if (gap < 0.2) throw FixtureError("switches too close together");
        return last + gap;
    };
    const double tb = end_offset(back, r.J0), tf = end_offset(fwd, r.J1);
    for (int j = 1; j < r.J0; ++j)
        if (std::fabs(back[j].t - back[j - 1].t) < 0.2) throw FixtureError("switches too close together");
    for (int j = 1; j < r.J1; ++j)
        if (std::fabs(fwd[j].t - fwd[j - 1].t) < 0.2) throw FixtureError("switches too close together");

    // Controls arc by arc in forward time.
    std::vector<Vec> pre;  // pre[0] is the arc starting at 0
    {
        Vec u = u_before;
        std::vector<Vec> rev{u};
        for (int j = 0; j < r.J0; ++j) {
            u[back[j].component] = -u[back[j].component];
            rev.push_back(u);
        }
        pre.assign(rev.rbegin(), rev.rend());
    }
    std::vector<Vec> post{u_after};
    for (int j = 0; j < r.J1; ++j) {
        Vec u = post.back();
        u[fwd[j].component] = -u[fwd[j].component];
        post.push_back(u);
    }

    // Initial and final cotangent points.
    Vec x0 = r.J0 > 0 ? back[r.J0 - 1].x : xd, p0v = r.J0 > 0 ? back[r.J0 - 1].p : ld;
    double t_from = r.J0 > 0 ? std::fabs(back[r.J0 - 1].t) : 0.0;
    detail::flow_maximized(pb, x0, p0v, pre.front(), -(tb - t_from));
    Vec xf = r.J1 > 0 ? fwd[r.J1 - 1].x : xd, pf = r.J1 > 0 ? fwd[r.J1 - 1].p : ld;
    double s_from = r.J1 > 0 ? fwd[r.J1 - 1].t : 0.0;
    detail::flow_maximized(pb, xf, pf, post.back(), tf - s_from);

    f.horizon = tb + tf;
    f.tau = tb;
    for (int j = r.J0 - 1; j >= 0; --j) f.theta0.push_back(tb + back[j].t);
    for (int j = 0; j < r.J1; ++j) f.theta1.push_back(tb + fwd[j].t);
    for (const Vec& u : pre) f.arc_controls.emplace_back(u.data(), u.data() + u.size());
    for (const Vec& u : post) f.arc_controls.emplace_back(u.data(), u.data() + u.size());
    f.x0 = {x0[0], x0[1]};
    f.lambda0 = {p0v[0], p0v[1]};
    f.manifold_initial = {"x1 - " + num_text(x0[0]), "x2 - " + num_text(x0[1])};

    auto sq = [&](int i) { return "(x" + std::to_string(i + 1) + " - " + num_text(xf[i]) + ")^2"; };
    const std::string dist2 = "(" + sq(0) + " + " + sq(1) + ")";
    const std::string lin = num_text(pf[0]) + "*(x1 - " + num_text(xf[0]) + ") + " + num_text(pf[1]) + "*(x2 - " +
                            num_text(xf[1]) + ")";
    if (r.name == "abnormal") {
        // N_f: <lambda_T, x - x_f> - C/2 |x - x_f|^2 = 0; then beta = -(that) vanishes on N_f.
        f.p0 = 0;
        f.cost_initial = "0";
        f.cost_final = "0";
        f.manifold_final = {lin + " - " + num_text(0.5 * q.C) + "*" + dist2};
        f.options["d2beta"] = {{q.C, 0.0}, {0.0, q.C}};
    } else {
        // c_f = -<lambda_T, x - x_f> + C/2 |x - x_f|^2 gives lambda_T = -dc_f(x_f).
        f.p0 = 1;
        f.cost_initial = "0";
        f.cost_final = "-(" + lin + ") + " + num_text(0.5 * q.C) + "*" + dist2;
    }
    f.options["seed"] = r.seed;
    return f;
}

}  // namespace bbcert
