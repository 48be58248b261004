#pragma once
// Independent numerical checks of the certificate's conclusions: the exact
// subproblem cost, brute-force sampling of switching-time perturbations,
// maximized-flow dumps and probing of the ball where the switching-time chain
// stays ordered.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "flows.hpp"
#include "secondvar.hpp"

namespace bbcert {

class OracleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

// Independent stream per (seed, index).
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq sq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(sq);
}

}  // namespace detail

// Cost alpha(x(0)) + beta(x(T)) of the subproblem trajectory with initial
// point x0hat + dx, simple-switch shifts delta and split double switch eps.
inline double fp_cost_oracle(const Reference& ref, const BoundaryPenalty& pen, const Vec& dx, const Vec& delta0,
                             const Vec& eps, const Vec& delta1) {
    const FPLayout L = FPLayout::of(ref);
    if (dx.size() != L.n || delta0.size() != L.J0 || eps.size() != 2 || delta1.size() != L.J1)
        throw OracleError("fp-cost: perturbation of the wrong size");
    Vec de(L.de_size());
    de << dx, delta0, eps, delta1;
    try {
        return fp_cost(ref, pen, de);
    } catch (const SecondVariationError& e) {
        throw OracleError(std::string("fp-cost: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// Brute force.

struct OracleResult {
    double min_gap = INFINITY;         // min over accepted samples of C - C_ref
    double min_gap_large = INFINITY;   // same, over perturbations of norm > large_norm
    double large_norm = 1e-4;
    Vec worst;                         // (dx, delta0, eps, delta1) attaining min_gap
    int accepted = 0, rejected = 0;
    int isolated_violations = 0;       // abnormal case: admissible samples away from the reference
    double reference_cost = 0.0;
    double radius = 0.0;
    int samples = 0;
    std::uint64_t seed = 0;
    std::string message;
};

namespace detail {

inline double true_cost(const ControlAffineProblem& pb, int p0, const Vec& x0, const Vec& xT) {
    return p0 == 0 ? 0.0 : pb.c0.value(x0) + pb.cf.value(xT);
}

inline Vec admissibility_residual(const ControlAffineProblem& pb, const Vec& x0, const Vec& xT) {
    Vec r(pb.N0.size() + pb.Nf.size());
    for (size_t i = 0; i < pb.N0.size(); ++i) r[i] = pb.N0[i].value(x0);
    for (size_t i = 0; i < pb.Nf.size(); ++i) r[pb.N0.size() + i] = pb.Nf[i].value(xT);
    return r;
}

}  // namespace detail

// Samples subproblem perturbations in the cube of half-side `radius` (scaled
// by a log-uniform factor in [1e-3, 1] so small perturbations are covered),
// projects each onto the admissible set by minimal-norm Gauss-Newton, and
// compares the true cost with the reference cost.
inline OracleResult brute_force_oracle(const Reference& ref, double radius, int samples, std::uint64_t seed,
                                       double tol = 1e-8) {
    const auto& pb = ref.problem();
    const int p0 = ref.extremal().p0;
    const FPLayout L = FPLayout::of(ref);
    const int D = L.de_size();
    const Vec& x0hat = ref.extremal().x0hat;
    OracleResult res;
    res.radius = radius;
    res.samples = samples;
    res.seed = seed;
    res.reference_cost = detail::true_cost(pb, p0, x0hat, ref.xf());

    auto endpoint = [&](const Vec& de) { return fp_trajectory(ref, de).xT; };
    auto residual = [&](const Vec& de) { return detail::admissibility_residual(pb, x0hat + de.head(L.n), endpoint(de)); };
    const bool constrained = !pb.N0.empty() || !pb.Nf.empty();

    auto project = [&](Vec de, bool& ok) {
        ok = true;
        if (!constrained) return de;
        ok = false;
        for (int it = 0; it < 25; ++it) {
            Vec F = residual(de);
            if (F.cwiseAbs().maxCoeff() <= tol) {
                ok = true;
                return de;
            }
            Mat Jm(F.size(), D);
            for (int k = 0; k < D; ++k) {
                const double h = 1e-7;
                Vec dp = de, dm = de;
                dp[k] += h;
                dm[k] -= h;
                Jm.col(k) = (residual(dp) - residual(dm)) / (2.0 * h);
            }
            de -= Jm.completeOrthogonalDecomposition().solve(F);
        }
        return de;
    };

    if (radius == 0.0) {
        res.min_gap = 0.0;
        res.worst = Vec::Zero(D);
        res.accepted = samples > 0 ? 1 : 0;
        return res;
    }
    for (int s = 0; s < samples; ++s) {
        auto rng = detail::stream(seed, s);
        std::uniform_real_distribution<double> U(-1.0, 1.0), E(-3.0, 0.0);
        const double scale = radius * std::pow(10.0, E(rng));
        Vec de(D);
        for (int k = 0; k < D; ++k) de[k] = scale * U(rng);
        try {
            bool ok = false;
            de = project(de, ok);
            if (!ok || de.cwiseAbs().maxCoeff() > 2.0 * radius) {
                ++res.rejected;
                continue;
            }
            const Vec xT = endpoint(de);
            const double gap = detail::true_cost(pb, p0, x0hat + de.head(L.n), xT) - res.reference_cost;
            ++res.accepted;
            if (gap < res.min_gap) {
                res.min_gap = gap;
                res.worst = de;
            }
            if (de.norm() > res.large_norm) res.min_gap_large = std::min(res.min_gap_large, gap);
            if (p0 == 0 && de.norm() > 1e-3) ++res.isolated_violations;
        } catch (const std::exception&) {
            ++res.rejected;
        }
    }
    if (res.accepted == 0) res.message = "no admissible sample found: radius too small relative to the reachable part of N_f";
    return res;
}

// ---------------------------------------------------------------------------
// Maximized-flow dumps and the validity ball.

struct FlowSample {
    double t;
    Vec x, p;
};

// The maximized flow from lambda0hat + dl (dl = (dp) or (dp, dx)) sampled on a
// uniform grid plus every switching instant.
inline std::vector<FlowSample> simulate_maximized(const Reference& ref, const Vec& perturb, int grid = 400) {
    const int n = ref.n();
    CotangentPoint l{ref.extremal().lambda0hat, ref.extremal().x0hat};
    if (perturb.size() == n) {
        l.p += perturb;
    } else if (perturb.size() == 2 * n) {
        l.p += perturb.head(n);
        l.x += perturb.tail(n);
    } else if (perturb.size() != 0) {
        throw OracleError("perturbation must have n or 2n entries");
    }
    MaximizedFlow mf(ref);
    MaximizedFlowState st = mf.resolve(l);
    std::vector<double> ts;
    for (int i = 0; i <= grid; ++i) ts.push_back(ref.T() * i / grid);
    for (double t : st.theta0) ts.push_back(t);
    ts.push_back(st.theta0_last);
    ts.push_back(st.theta10);
    for (double t : st.theta1) ts.push_back(t);
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    std::vector<FlowSample> out;
    for (double t : ts) {
        if (t < 0.0 || t > ref.T()) continue;
        CotangentPoint c = mf.evaluate(st, t);
        out.push_back({t, c.x, c.p});
    }
    return out;
}

// One line per sample: t, x_1..x_n, p_1..p_n.
inline void write_trajectory(std::ostream& os, const std::vector<FlowSample>& s) {
    char buf[40];
    for (const auto& r : s) {
        std::snprintf(buf, sizeof buf, "%.17g", r.t);
        os << buf;
        for (int i = 0; i < r.x.size(); ++i) {
            std::snprintf(buf, sizeof buf, " %.17g", r.x[i]);
            os << buf;
        }
        for (int i = 0; i < r.p.size(); ++i) {
            std::snprintf(buf, sizeof buf, " %.17g", r.p[i]);
            os << buf;
        }
        os << "\n";
    }
}

struct ValidityBall {
    double radius = 0.0;
    int halvings = 0;
    int probes = 0;
    std::string last_failure;
};

// Random point of the ball of radius r around (lambda0hat, x0hat) in T*M.
inline CotangentPoint ball_point(const Reference& ref, double r, std::mt19937_64& rng) {
    const int n = ref.n();
    std::normal_distribution<double> N(0.0, 1.0);
    Vec u(2 * n);
    for (int i = 0; i < 2 * n; ++i) u[i] = N(rng);
    u /= u.norm();
    std::uniform_real_distribution<double> U(0.0, 1.0);
    u *= r * std::pow(U(rng), 1.0 / (2 * n));
    return {ref.extremal().lambda0hat + u.head(n), ref.extremal().x0hat + u.tail(n)};
}

// Largest r = r0 / 2^k for which `probes` random covectors of the ball all
// resolve with a correctly ordered switching chain.
inline ValidityBall probe_validity_radius(const Reference& ref, double r0, int probes, std::uint64_t seed) {
    MaximizedFlow mf(ref);
    ValidityBall b;
    b.probes = probes;
    double r = r0;
    for (int k = 0; k < 40; ++k, r *= 0.5) {
        std::mt19937_64 rng(seed + k);
        bool ok = true;
        for (int i = 0; i < probes && ok; ++i) {
            try {
                MaximizedFlowState st = mf.resolve(ball_point(ref, r, rng));
                std::string why;
                if (!st.ordering_ok(ref.T(), &why)) {
                    ok = false;
                    b.last_failure = "ordering violated: " + why;
                }
            } catch (const std::exception& e) {
                ok = false;
                b.last_failure = e.what();
            }
        }
        if (ok) {
            b.radius = r;
            b.halvings = k;
            return b;
        }
    }
    b.radius = 0.0;
    b.halvings = 40;
    return b;
}

// Moves l along the direction w until tau_1(l) = tau_2(l), by secant
// iteration on the difference. w should be transversal to the diagonal, e.g.
// the gradient of tau_1 - tau_2. Returns false if the iteration fails.
inline bool project_to_diagonal(const MaximizedFlow& mf, CotangentPoint& l, const Vec& w, double max_step = 1.0) {
    const int n = static_cast<int>(l.p.size());
    auto diff = [&](double s) {
        CotangentPoint c{l.p + s * w.head(n), l.x + s * w.tail(n)};
        MaximizedFlowState st = mf.resolve(c);
        return st.tau[0] - st.tau[1];
    };
    try {
        double s0 = 0.0, s1 = 1e-6;
        double f0 = diff(s0), f1 = diff(s1);
        for (int it = 0; it < 50; ++it) {
            if (std::fabs(f1) < 1e-14) break;
            if (f1 == f0) return false;
            double s2 = s1 - f1 * (s1 - s0) / (f1 - f0);
            if (std::fabs(s2) > max_step) return false;
            s0 = s1;
            f0 = f1;
            s1 = s2;
            f1 = diff(s1);
        }
        if (std::fabs(f1) > 1e-12) return false;
        l.p += s1 * w.head(n);
        l.x += s1 * w.tail(n);
        return true;
    } catch (const FlowError&) {
        return false;
    }
}

}  // namespace bbcert
