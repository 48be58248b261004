#pragma once
// Test-side oracles, independent of the library routes they check: cached
// fixtures, sampled injectivity of glued linear maps, the planar 5-cone
// example, finite differences through the maximized-flow root solves and a
// Richardson second difference of the subproblem cost.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <bbcert/certify.hpp>

namespace bbcert::testing {

inline std::string fixture_path(const std::string& name) { return std::string(BBCERT_FIXTURE_DIR) + "/" + name; }

// Constructed (and re-verified) fixtures, built once per process.
inline const LoadedProblem& fixture(const std::string& recipe, int J0 = 0, int J1 = 0, std::uint64_t seed = 1) {
    static std::map<std::tuple<std::string, int, int, std::uint64_t>, LoadedProblem> cache;
    auto key = std::make_tuple(recipe, J0, J1, seed);
    auto it = cache.find(key);
    if (it == cache.end()) {
        FixtureRecipe r;
        r.name = recipe;
        r.J0 = J0;
        r.J1 = J1;
        r.seed = seed;
        it = cache.emplace(key, build_problem(construct_fixture(r))).first;
    }
    return it->second;
}

// Everything downstream of a fixture that the tests need.
struct Pipeline {
    Reference ref;
    PulledBackFields pf;
    SwitchingGradients gr;
    BoundaryPenalty pen;  // after the Hestenes search when it succeeds
    explicit Pipeline(const LoadedProblem& lp)
        : ref(lp.problem, lp.extremal), pf(pull_back_fields(ref)), gr(switching_time_gradients(ref, pf)),
          pen(make_penalty(ref, lp.options)) {
        try {
            HestenesResult h = hestenes_penalty_search(ref, pf, pen, lp.options);
            if (h.success) pen = h.penalty;
        } catch (const PreconditionError&) {
        }
    }
};

inline Vec gaussian(int d, std::mt19937_64& rng) {
    std::normal_distribution<double> N(0.0, 1.0);
    Vec v(d);
    for (int i = 0; i < d; ++i) v[i] = N(rng);
    return v;
}

inline Mat gaussian(int r, int c, std::mt19937_64& rng) {
    std::normal_distribution<double> N(0.0, 1.0);
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = N(rng);
    return m;
}

// ---------------------------------------------------------------------------
// Glued pairs x -> (v.x >= 0 ? A x : B x).

struct AgreeingPair {
    Mat A, B;
    Vec v;
};

// B = A + u v^T agrees with A on v^perp; the sign of det B is random.
inline AgreeingPair random_agreeing_pair(int d, std::mt19937_64& rng) {
    AgreeingPair p;
    p.A = gaussian(d, d, rng);
    p.v = gaussian(d, rng).normalized();
    p.B = p.A + gaussian(d, rng) * p.v.transpose() * 3.0;
    return p;
}

// Injectivity of the glued map by counting preimages of random targets: one
// candidate per half-space, by solving each linear piece; a target with two
// distinct preimages is a witness of non-injectivity.
inline bool sampled_injective(const AgreeingPair& p, std::mt19937_64& rng, int targets = 400) {
    Eigen::PartialPivLU<Mat> la(p.A), lb(p.B);
    for (int i = 0; i < targets; ++i) {
        Vec y = gaussian(static_cast<int>(p.v.size()), rng);
        Vec xa = la.solve(y), xb = lb.solve(y);
        const bool in_a = p.v.dot(xa) > 1e-12 * xa.norm();
        const bool in_b = p.v.dot(xb) < -1e-12 * xb.norm();
        if (in_a && in_b && (xa - xb).norm() > 1e-9 * (xa.norm() + xb.norm())) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// The planar 5-cone example: cones between consecutive rays at -90, 0, 67.5,
// 135, 202.5, 270 degrees, with the printed matrices.

inline PiecewiseLinearMap five_cone_map() {
    const double s2 = std::sqrt(2.0);
    auto M2 = [](double a, double b, double c, double d) {
        Mat m(2, 2);
        m << a, b, c, d;
        return m;
    };
    std::vector<Mat> L{M2(1, 0, 0, 1), M2(1, -s2, 0, s2 - 1), M2(-s2, -s2 + 1, 1, 0), M2(0, 1, -s2 + 1, -s2),
                       M2(s2 - 1, 0, -s2, 1)};
    const double ang[6] = {-90, 0, 67.5, 135, 202.5, 270};
    std::vector<PolyhedralCone> C;
    for (int i = 0; i < 5; ++i) {
        const double a = ang[i] * M_PI / 180, b = ang[i + 1] * M_PI / 180;
        Vec na(2), nb(2);
        na << -std::sin(a), std::cos(a);
        nb << std::sin(b), -std::cos(b);
        C.emplace_back(2, std::vector<Vec>{na, nb});
    }
    return PiecewiseLinearMap(2, C, L);
}

// Preimage count of y under a fan map by per-cone solves, independent of
// plinv::preimages: candidates are merged at 1e-9 relative distance.
inline int count_preimages(const PiecewiseLinearMap& G, const Vec& y) {
    std::vector<Vec> found;
    for (int i = 0; i < G.pieces(); ++i) {
        Vec x = G.piece(i).partialPivLu().solve(y);
        if (!G.cone(i).contains(x, 1e-10)) continue;
        bool dup = false;
        for (const Vec& z : found) dup = dup || (z - x).norm() <= 1e-9 * std::max(1.0, x.norm());
        if (!dup) found.push_back(x);
    }
    return static_cast<int>(found.size());
}

// ---------------------------------------------------------------------------
// Maximized flow.

inline CotangentPoint shifted(const Reference& ref, const Vec& dl, double h) {
    const int n = ref.n();
    return {ref.extremal().lambda0hat + h * dl.head(n), ref.extremal().x0hat + h * dl.tail(n)};
}

// Central differences of every resolved switching time along dl, with the
// branch forced so both tau_nu-dependent chains are differentiable.
struct TimeDerivatives {
    std::vector<double> theta0;     // j = 1..J0
    double tau[2];
    double theta10[2];
    std::vector<double> theta1[2];  // j = 1..J1
};

inline TimeDerivatives fd_switch_times(const MaximizedFlow& mf, const Vec& dl, double h = 1e-6) {
    const Reference& ref = mf.reference();
    TimeDerivatives d;
    for (int nu = 1; nu <= 2; ++nu) {
        MaximizedFlowState p = mf.resolve(shifted(ref, dl, h), nu), m = mf.resolve(shifted(ref, dl, -h), nu);
        if (nu == 1)
            for (size_t j = 1; j < p.theta0.size(); ++j) d.theta0.push_back((p.theta0[j] - m.theta0[j]) / (2 * h));
        d.tau[nu - 1] = (p.tau[nu - 1] - m.tau[nu - 1]) / (2 * h);
        d.theta10[nu - 1] = (p.theta10_nu[nu - 1] - m.theta10_nu[nu - 1]) / (2 * h);
        for (size_t j = 0; j < p.theta1.size(); ++j) d.theta1[nu - 1].push_back((p.theta1[j] - m.theta1[j]) / (2 * h));
    }
    return d;
}

inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

// ---------------------------------------------------------------------------
// Subproblem cost.

// Second-order coefficient of s -> C(s de) - C(0) from the quadratic
// Richardson table over h0, h0/2, h0/4, h0/8 (one-sided, so the
// eps-ordering half-space of de is kept).
inline double richardson_second(const Reference& ref, const BoundaryPenalty& pen, const Vec& de, double h0 = 8e-3) {
    const FPLayout L = FPLayout::of(ref);
    auto cost = [&](const Vec& v) {
        return fp_cost_oracle(ref, pen, v.head(L.n), v.segment(L.n, L.J0), v.segment(L.eps(1), 2), v.tail(L.J1));
    };
    const double c0 = cost(Vec::Zero(de.size()));
    double T[4];
    for (int k = 0; k < 4; ++k) {
        const double h = h0 / (1 << k);
        T[k] = (cost(h * de) - c0) / (h * h);
    }
    // The quotient is q + c1 h + c2 h^2 + ...; eliminate c1, then c2, then c3.
    for (int lev = 1, f = 2; lev < 4; ++lev, f *= 2)
        for (int k = 3; k >= lev; --k) T[k] = (f * T[k] - T[k - 1]) / (f - 1);
    return T[3];
}

}  // namespace bbcert::testing
