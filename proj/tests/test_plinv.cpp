#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace bbcert;
using namespace bbcert::testing;

namespace {

Mat diag2(double a, double b) {
    Mat m = Mat::Zero(2, 2);
    m(0, 0) = a;
    m(1, 1) = b;
    return m;
}

Vec e(int d, int i) { return Vec::Unit(d, i); }

PiecewiseLinearMap half_planes(const Mat& A, const Mat& B, const Vec& v) {
    return PiecewiseLinearMap(static_cast<int>(v.size()),
                              {PolyhedralCone(static_cast<int>(v.size()), {v}), PolyhedralCone(static_cast<int>(v.size()), {Vec(-v)})},
                              {A, B});
}

}  // namespace

TEST(HyperplanePair, Examples) {
    PairVerdict p = hyperplane_pair_invertible(Mat::Identity(2, 2), Mat::Identity(2, 2), Vec::Ones(2));
    EXPECT_TRUE(p.invertible);
    EXPECT_EQ(p.detA, 1.0);
    EXPECT_EQ(p.detB, 1.0);
    p = hyperplane_pair_invertible(Mat::Identity(2, 2), diag2(1, -1), e(2, 1));
    EXPECT_FALSE(p.invertible);
    EXPECT_EQ(p.detB, -1.0);
    // Witness: both half-planes map onto the upper half-plane.
    PiecewiseLinearMap G = half_planes(Mat::Identity(2, 2), diag2(1, -1), e(2, 1));
    Vec up(2), down(2);
    up << 0.3, 1.0;
    down << 0.3, -1.0;
    EXPECT_EQ(count_preimages(G, up), 2);
    EXPECT_EQ(count_preimages(G, down), 0);
    EXPECT_THROW(hyperplane_pair_invertible(Mat::Identity(2, 2), diag2(2, 1), e(2, 1)), PlinvPrecondition);

    std::mt19937_64 rng(1);
    for (int k = 0; k < 20; ++k) {
        Mat A = gaussian(3, 3, rng);
        if (A.determinant() < 0) A.row(0) *= -1;
        Vec v = gaussian(3, rng).normalized();
        AgreeingPair q{A, A + std::exp(gaussian(1, rng)[0]) * (A * v) * v.transpose(), v};
        EXPECT_TRUE(hyperplane_pair_invertible(q.A, q.B, q.v).invertible);
        EXPECT_TRUE(sampled_injective(q, rng));
    }
}

TEST(DetConvexIdentity, Examples) {
    EXPECT_EQ(det_convex_identity(Mat::Identity(2, 2), diag2(1, -1), e(2, 1), 0.5), 0.0);
    std::mt19937_64 rng(2);
    AgreeingPair p = random_agreeing_pair(4, rng);
    EXPECT_EQ(det_convex_identity(p.A, p.B, p.v, 1.0), 0.0);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
        AgreeingPair q = random_agreeing_pair(5, rng);
        const double s = std::max({std::fabs(q.A.determinant()), std::fabs(q.B.determinant()), 1.0});
        for (double t : {-2.0, -0.5, 0.3, 1.7, 3.0}) worst = std::max(worst, det_convex_identity(q.A, q.B, q.v, t) / s);
    }
    EXPECT_LE(worst, 1e-10);
}

TEST(Property, PairInvertibilityMatchesSampledInjectivity) {
    std::mt19937_64 rng(3);
    int positive = 0;
    for (int k = 0; k < 200; ++k) {
        AgreeingPair p = random_agreeing_pair(std::uniform_int_distribution<int>(2, 4)(rng), rng);
        const bool inv = hyperplane_pair_invertible(p.A, p.B, p.v).invertible;
        positive += inv;
        ASSERT_EQ(sampled_injective(p, rng), inv) << "pair " << k;
        if (!inv) continue;
        for (int i = 0; i <= 20; ++i) {
            const double t = i / 20.0;
            EXPECT_GT(p.A.determinant() * (t * p.A + (1 - t) * p.B).determinant(), 0.0);
        }
    }
    // Both directions are exercised.
    EXPECT_GT(positive, 20);
    EXPECT_LT(positive, 180);
}

TEST(Degree, IdentityAndReflection) {
    PiecewiseLinearMap I(2, {PolyhedralCone(2, {})}, {Mat::Identity(2, 2)});
    EXPECT_EQ(plm_degree(I).degree, 1);
    // Mixed orientation: the signed count over a regular value is zero.
    PiecewiseLinearMap R = half_planes(Mat::Identity(2, 2), diag2(1, -1), e(2, 1));
    EXPECT_EQ(plm_degree(R).degree, 0);
    EXPECT_THROW(local_homeo_certificate(R), PlinvPrecondition);
}

TEST(Degree, FiveConeExample) {
    PiecewiseLinearMap G = five_cone_map();
    for (double d : G.determinants()) EXPECT_GT(d, 0.0);
    std::mt19937_64 rng(4);
    EXPECT_LE(G.continuity(rng).max_residual, 1e-10);
    EXPECT_EQ(G.covering(rng), 1.0);
    // The printed matrices wind twice around the origin: every regular value
    // has two preimages, so the degree is 2 and not the singleton of the text.
    const int deg = plm_degree(G).degree;
    EXPECT_EQ(deg, 2);
    for (std::uint64_t s = 1; s <= 10; ++s) {
        DegreeResult r = plm_degree(G, s);
        EXPECT_EQ(r.degree, deg);
        EXPECT_EQ(count_preimages(G, r.probe), r.preimage_count);
    }
}

TEST(HomeoCertificate, LinearAndPerturbedCases) {
    std::mt19937_64 rng(6);
    Mat A = gaussian(3, 3, rng);
    if (A.determinant() < 0) A.row(0) *= -1;
    PiecewiseLinearMap F(3, {PolyhedralCone(3, {})}, {A});
    auto lin = [&](const Vec& x) { return Vec(A * x); };
    HomeoCertificate c = local_homeo_certificate(F, std::nullopt, lin, Vec::Zero(3));
    EXPECT_EQ(c.status, HomeoCertificate::Granted);
    EXPECT_EQ(c.preimage_count, 1);

    // Quadratic perturbation of the 5-cone map: the remainder decays like
    // |x|^2 but no value has a singleton preimage.
    PiecewiseLinearMap G = five_cone_map();
    auto f = [&](const Vec& x) { return Vec(G(x) + x.squaredNorm() * Vec::Ones(2)); };
    EXPECT_NEAR(expansion_order(f, Vec::Zero(2), G), 2.0, 0.05);
    c = local_homeo_certificate(G, std::nullopt, f, Vec::Zero(2));
    EXPECT_EQ(c.status, HomeoCertificate::Inconclusive);
    EXPECT_EQ(c.preimage_count, 2);

    PiecewiseLinearMap N(2, {PolyhedralCone(2, {})}, {diag2(1, -1)});
    EXPECT_THROW(local_homeo_certificate(N), PlinvPrecondition);
}

TEST(SwitchLinearization, FacetContinuityOnFixtures) {
    for (std::string recipe : {"normal-generic", "abnormal"})
        for (auto [J0, J1] : {std::pair{0, 0}, std::pair{1, 1}}) {
            Pipeline P(fixture(recipe, J0, J1));
            auto lins = build_switch_linearizations(P.ref, P.gr, P.pen);
            EXPECT_EQ(static_cast<int>(lins.size()), J0 + J1 + 1);
            std::mt19937_64 rng(8);
            for (const auto& s : lins) {
                if (!s.map) continue;
                FacetCheck fc = s.map->continuity(rng);
                EXPECT_GT(fc.facets, 0) << s.label;
                EXPECT_LE(fc.max_residual, 1e-10 * (1 + s.pieces[0].norm())) << recipe << " " << s.label;
                EXPECT_EQ(s.map->covering(rng), 1.0) << s.label;
            }
        }
}

TEST(SwitchLinearization, DegenerateSubCases) {
    Pipeline P(fixture("normal-generic", 1, 1));
    // Constant first switching time: the two pieces coincide. The gradient
    // record is edited consistently, Delta_01 = Delta_00 - (G_01 - G_00) dtheta_01^T.
    SwitchingGradients g = P.gr;
    g.dtheta0[0].setZero();
    g.Delta0[1] = g.Delta0[0];
    SwitchLinearization s = build_switch_linearization(P.ref, g, P.pen, 0);
    ASSERT_EQ(s.kind, SwitchLinearization::PreDouble);
    EXPECT_LE((s.pieces[0] - s.pieces[1]).norm(), 1e-14 * s.pieces[0].norm());
    EXPECT_EQ(check_switch(s, 1).status, Invertibility::Invertible);

    // All double-switch times constant: every piece is L0.
    g = P.gr;
    for (int nu = 0; nu < 2; ++nu) {
        g.dtau[nu].setZero();
        g.dtheta10[nu].setZero();
        g.Delta1[nu][0] = g.Delta0.back();
    }
    s = build_switch_linearization(P.ref, g, P.pen, 1);
    ASSERT_EQ(s.kind, SwitchLinearization::Double);
    EXPECT_TRUE(s.degenerate);
    for (const Mat& L : s.pieces) EXPECT_LE((L - s.pieces[0]).norm(), 1e-12 * s.pieces[0].norm());

    // The degenerate fixture takes the convex-hull route.
    Pipeline D(fixture("degenerate-dtau"));
    InvertibilityReport r = flow_invertibility_check(D.ref, D.gr, D.pen, fixture("degenerate-dtau").options);
    ASSERT_EQ(r.switches.size(), 1u);
    EXPECT_EQ(r.switches[0].route, "clarke-hull");
    EXPECT_EQ(r.aggregate, Invertibility::Invertible);
}

TEST(Invertibility, Aggregation) {
    EXPECT_EQ(aggregate_invertibility({}), Invertibility::Invertible);
    SwitchVerdict ok, bad, unk;
    ok.status = Invertibility::Invertible;
    bad.status = Invertibility::NotInvertible;
    unk.status = Invertibility::Inconclusive;
    EXPECT_EQ(aggregate_invertibility({ok, ok}), Invertibility::Invertible);
    EXPECT_EQ(aggregate_invertibility({ok, bad}), Invertibility::NotInvertible);
    EXPECT_EQ(aggregate_invertibility({bad, unk}), Invertibility::Inconclusive);
    EXPECT_EQ(std::string(to_string(Invertibility::Inconclusive)), "inconclusive");
}

TEST(Property, CoercivityImpliesInvertibilityWithOneOrientation) {
    // Raw parameter draws, before the fixture acceptance filter.
    int linked = 0;
    for (std::string recipe : {"normal-generic", "abnormal"})
        for (auto [J0, J1] : {std::pair{0, 0}, std::pair{1, 0}, std::pair{0, 1}})
            for (std::uint64_t seed = 1; seed <= 6; ++seed) {
                FixtureRecipe r;
                r.name = recipe;
                r.J0 = J0;
                r.J1 = J1;
                std::mt19937_64 rng(seed);
                std::optional<LoadedProblem> lp;
                try {
                    lp = build_problem(fixture_from_params(r, draw_fixture_params(recipe, rng)));
                } catch (const std::exception&) {
                    continue;
                }
                Reference ref(lp->problem, lp->extremal);
                SwitchingFunctions sf = switching_functions(ref);
                PulledBackFields pf = pull_back_fields(ref);
                try {
                    if (!check_pmp(ref, sf).pass || !check_regularity(ref, sf).pass ||
                        !check_legendre_simple(ref, pf).pass || !check_legendre_double(ref, pf).pass)
                        continue;
                    HestenesResult h = hestenes_penalty_search(ref, pf, make_penalty(ref, lp->options), lp->options);
                    if (!h.success) continue;
                    SwitchingGradients gr = switching_time_gradients(ref, pf);
                    InvertibilityReport inv = flow_invertibility_check(ref, gr, h.penalty, lp->options);
                    EXPECT_EQ(inv.aggregate, Invertibility::Invertible) << recipe << " seed " << seed;
                    for (const auto& s : inv.switches)
                        for (double d : s.determinants) EXPECT_GT(d, 0.0) << recipe << " " << s.label;
                    ++linked;
                } catch (const ConditionError&) {
                } catch (const PreconditionError&) {
                }
            }
    EXPECT_GE(linked, 10);
}
