#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace bbcert;
using namespace bbcert::testing;

namespace {

// Basis of the (delta, eps) directions with eps_1 = eps_2.
Mat diagonal_basis(const FPLayout& L) {
    const int N = L.de_size();
    Mat S = Mat::Zero(N, N - 1);
    int c = 0;
    for (int k = 0; k < N; ++k) {
        if (k == L.eps(2)) continue;
        S(k, c) = 1.0;
        if (k == L.eps(1)) S(L.eps(2), c) = 1.0;
        ++c;
    }
    return S;
}

double quad(const FPVariation& v, const Vec& de) {
    auto [ab, nu] = v.layout.to_ab(de);
    return ab.dot(v.Q[nu - 1] * ab);
}

double min_eig(const Mat& Q, const Mat& B) {
    Mat R = B.transpose() * Q * B;
    return Eigen::SelfAdjointEigenSolver<Mat>(0.5 * (R + R.transpose())).eigenvalues()[0];
}

int dense_nullity(const Mat& C) {
    Eigen::FullPivLU<Mat> lu(C);
    lu.setThreshold(1e-10);
    return static_cast<int>(C.cols()) - static_cast<int>(lu.rank());
}

}  // namespace

TEST(LinearizedEndpoint, ZeroBranchIndependenceAndClosedForm) {
    const LoadedProblem& lp = fixture("normal-generic", 1, 1);
    Pipeline P(lp);
    const FPLayout L = FPLayout::of(P.ref);
    std::mt19937_64 rng(3);
    Vec dx = gaussian(L.n, rng);
    Vec z = Vec::Zero(L.de_size());
    z.head(L.n) = dx;
    EXPECT_EQ(linearized_endpoint(P.pf, L, z), dx);
    for (int k = 0; k < 20; ++k) {
        Vec de = gaussian(L.de_size(), rng);
        Vec e = linearized_endpoint(P.pf, L, de);
        for (int nu = 1; nu <= 2; ++nu)
            EXPECT_LE((linearized_endpoint(P.pf, L, L.to_ab_matrix(nu) * de, nu) - e).norm(), 1e-12 * (1 + e.norm()));
        // Direct summation over the switching-time shifts.
        const double d01 = de[L.d0(1)], d11 = de[L.d1(1)];
        Vec want = de.head(L.n) + d01 * P.pf.g0[0].value0 + (d11 - d01) * P.pf.g0[1].value0 +
                   2 * (d11 - de[L.eps(1)]) * P.pf.ft[0].value0 + 2 * (d11 - de[L.eps(2)]) * P.pf.ft[1].value0 -
                   d11 * P.pf.g1[1].value0;
        EXPECT_LE((e - want).norm(), 1e-12 * (1 + e.norm()));
    }
}

TEST(SecondVariation, VanishingFieldsLeaveTheBoundaryBlock) {
    const LoadedProblem& lp = fixture("normal-generic");
    Pipeline P(lp);
    PulledBackFields pf = P.pf;
    for (auto* g : {&pf.g0, &pf.g1})
        for (auto& f : *g) f.value0.setZero(), f.jac0.setZero();
    for (auto& f : pf.h) f.value0.setZero(), f.jac0.setZero();
    const FPLayout L = FPLayout::of(P.ref);
    Mat Q = assemble_second_variation(pf, P.pen, L, 1);
    Mat want = Mat::Zero(L.size(), L.size());
    want.topLeftCorner(L.n, L.n) = 0.5 * P.pen.d2gamma();
    EXPECT_LE((Q - want).norm(), 1e-12 * want.norm());
}

TEST(SecondVariation, HamiltonianFormAgrees) {
    for (std::string recipe : {"normal-generic", "abnormal", "commuting-f1f2", "degenerate-dtau", "coercivity-broken"})
        for (auto [J0, J1] : {std::pair{0, 0}, std::pair{1, 1}}) {
            Pipeline P(fixture(recipe, J0, J1));
            FPVariation v = build_fp_variation(P.ref, P.pf, P.pen);
            for (int nu = 0; nu < 2; ++nu)
                EXPECT_LE((v.Q[nu] - v.Qham[nu]).norm(), 1e-8 * v.Q[nu].norm()) << recipe;
        }
}

TEST(SecondVariation, BranchesAgreeOnTheDiagonal) {
    for (std::string recipe : {"normal-generic", "abnormal", "degenerate-dtau"})
        for (auto [J0, J1] : {std::pair{0, 0}, std::pair{1, 1}}) {
            Pipeline P(fixture(recipe, J0, J1));
            FPVariation v = build_fp_variation(P.ref, P.pf, P.pen);
            const Mat S = diagonal_basis(v.layout);
            const Mat D = S.transpose() * (v.Q_de(1) - v.Q_de(2)) * S;
            EXPECT_LE(D.norm(), 1e-10 * v.Q[0].norm()) << recipe;
        }
}

TEST(SecondVariation, BranchesCoincideIffFieldsCommuteAtTau) {
    for (auto [recipe, commuting] : {std::pair{"commuting-f1f2", true}, std::pair{"normal-generic", false},
                                     std::pair{"abnormal", false}}) {
        const LoadedProblem& lp = fixture(recipe);
        Pipeline P(lp);
        const Vec& xd = P.ref.xd();
        const Vec& pd = P.ref.node_p(P.ref.schedule().J0 + 1);
        const double s = pd.dot(lie_bracket(lp.problem.f[0], lp.problem.f[1], xd));
        FPVariation v = build_fp_variation(P.ref, P.pf, P.pen);
        const double gap = (v.Q_de(1) - v.Q_de(2)).norm();
        EXPECT_EQ(gap <= 1e-8 * v.Q_de(1).norm(), commuting) << recipe << " gap " << gap;
        EXPECT_EQ(std::fabs(s) <= 1e-8 * pd.norm(), commuting) << recipe << " bracket " << s;
    }
}

TEST(SecondVariation, FirstVariationVanishesOnEitherBranch) {
    for (std::string recipe : {"normal-generic", "abnormal"}) {
        Pipeline P(fixture(recipe, 1, 1));
        const FPLayout L = FPLayout::of(P.ref);
        Vec g1 = first_variation(P.pf, P.pen, L, 1), g2 = first_variation(P.pf, P.pen, L, 2);
        EXPECT_LE((g1 - g2).norm(), 1e-12 * (1 + g1.norm())) << recipe;
        EXPECT_LE(g1.cwiseAbs().maxCoeff(), 1e-8 * (1 + P.pen.lambda0.norm())) << recipe;
    }
}

TEST(SecondVariation, MatchesRichardsonDifferenceOfTrueCost) {
    for (auto [J0, J1] : {std::pair{0, 0}, std::pair{1, 1}}) {
        Pipeline P(fixture("normal-generic", J0, J1));
        FPVariation v = build_fp_variation(P.ref, P.pf, P.pen);
        std::mt19937_64 rng(99 + J0);
        const Mat& K = v.kernel_de_N0;
        double worst = 0.0;
        for (int k = 0; k < 50; ++k) {
            Vec de = K * gaussian(static_cast<int>(K.cols()), rng);
            de /= de.norm();
            worst = std::max(worst, rel_err(richardson_second(P.ref, P.pen, de), quad(v, de)));
        }
        EXPECT_LE(worst, 1e-3) << "J0 = " << J0;
    }
}

TEST(SecondVariation, LibraryDifferenceAgreesWithOracle) {
    Pipeline P(fixture("normal-generic", 1, 1));
    FPVariation v = build_fp_variation(P.ref, P.pf, P.pen);
    std::mt19937_64 rng(12);
    for (int k = 0; k < 5; ++k) {
        Vec de = gaussian(v.layout.de_size(), rng).normalized();
        EXPECT_LE(rel_err(fp_second_difference(P.ref, P.pen, de), richardson_second(P.ref, P.pen, de)), 1e-3);
        EXPECT_LE(rel_err(fp_cost(P.ref, P.pen, 1e-3 * de),
                          fp_cost_oracle(P.ref, P.pen, 1e-3 * de.head(v.layout.n), 1e-3 * de.segment(v.layout.n, 1),
                                         1e-3 * de.segment(v.layout.eps(1), 2), 1e-3 * de.tail(1)),
                          1e-12),
                  1e-8);
    }
}

TEST(SecondVariation, MinEigenvalueMatchesFiniteDifferenceHessian) {
    Pipeline P(fixture("normal-generic"));
    FPVariation v = build_fp_variation(P.ref, P.pf, P.pen);
    // Diagonal directions inside N0: both branches give the same form there.
    const Mat& K = v.kernel_de_N0;
    Mat C = K.row(v.layout.eps(1)) - K.row(v.layout.eps(2));
    const Mat W = K * kernel_basis(C, static_cast<int>(K.cols()));
    const int d = static_cast<int>(W.cols());
    ASSERT_GT(d, 0);
    Mat H(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            const Vec p = W.col(i) + W.col(j), m = W.col(i) - W.col(j);
            H(i, j) = H(j, i) = (richardson_second(P.ref, P.pen, p) - richardson_second(P.ref, P.pen, m)) / 4;
        }
    const double fd = Eigen::SelfAdjointEigenSolver<Mat>(H).eigenvalues()[0];
    EXPECT_LE(rel_err(fd, min_eig(v.Q_de(1), W)), 1e-4);
}

TEST(Kernel, DimensionCounts) {
    for (std::string recipe : {"normal-generic", "abnormal", "degenerate-dtau"})
        for (auto [J0, J1] : {std::pair{0, 0}, std::pair{1, 1}}) {
            Pipeline P(fixture(recipe, J0, J1));
            FPVariation v = build_fp_variation(P.ref, P.pf, P.pen);
            for (int nu = 0; nu < 2; ++nu) {
                EXPECT_EQ(v.kernel_N[nu].cols(), dense_nullity(v.constraints_N[nu])) << recipe;
                EXPECT_LE((v.constraints_N[nu] * v.kernel_N[nu]).norm(), 1e-10 * (1 + v.constraints_N[nu].norm()));
                const Mat& K = v.kernel_N[nu];
                EXPECT_LE((K.transpose() * K - Mat::Identity(K.cols(), K.cols())).norm(), 1e-12);
            }
            // Free final state leaves only the sum constraint.
            if (P.ref.problem().Nf.empty()) {
                EXPECT_EQ(v.kernel_N[0].cols(), v.layout.size() - 1);
            }
        }
}

TEST(Coercivity, Examples) {
    std::mt19937_64 rng(5);
    Mat B = gaussian(6, 3, rng).householderQr().householderQ() * Mat::Identity(6, 3);
    CoercivityResult r = coercivity_check(Mat::Identity(6, 6), B);
    EXPECT_NEAR(r.min_eigenvalue, 1.0, 1e-14);
    EXPECT_TRUE(r.pass);
    Mat Q = Mat::Identity(6, 6);
    Q -= B.col(1) * B.col(1).transpose();
    r = coercivity_check(Q, B);
    EXPECT_NEAR(r.min_eigenvalue, 0.0, 1e-14);
    EXPECT_FALSE(r.pass);
}

TEST(Coercivity, ConvexCombinationsStayDefinite) {
    for (std::string recipe : {"normal-generic", "abnormal", "degenerate-dtau"}) {
        Pipeline P(fixture(recipe, 1, 1));
        FPVariation v = build_fp_variation(P.ref, P.pf, P.pen);
        const Mat& K = v.kernel_de_N;
        const Mat Q1 = v.Q_de(1), Q2 = v.Q_de(2);
        if (!(min_eig(Q1, K) > 0 && min_eig(Q2, K) > 0)) continue;
        for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) EXPECT_GT(min_eig(t * Q1 + (1 - t) * Q2, K), 0.0) << recipe << " t " << t;
    }
}

TEST(Hestenes, Behaviour) {
    // Free initial point: nothing to penalize, the base penalty comes back.
    {
        const LoadedProblem& lp = fixture("normal-generic");
        Reference ref(lp.problem, lp.extremal);
        PulledBackFields pf = pull_back_fields(ref);
        BoundaryPenalty base = make_penalty(ref, lp.options);
        HestenesResult h = hestenes_penalty_search(ref, pf, base, lp.options);
        ASSERT_TRUE(h.success);
        if (lp.problem.N0.empty()) {
            EXPECT_EQ(base.P.norm(), 0.0);
            EXPECT_EQ(h.rho, 0.0);
        } else if (h.rho > 0.0) {
            // The returned rho is the first grid point that works.
            const double prev = h.rho == 1.0 ? 0.0 : h.rho / 10;
            const FPLayout L = FPLayout::of(ref);
            bool ok = true;
            for (int nu = 1; nu <= 2; ++nu)
                ok = ok && coercivity_check(assemble_second_variation(pf, base.with_rho(prev), L, nu),
                                            kernel_space(ref, pf, false, nu), lp.options.coercivity_rel)
                               .pass;
            EXPECT_FALSE(ok);
        }
        for (int nu = 0; nu < 2; ++nu) EXPECT_TRUE(h.coercivity[nu].pass);
    }
    {
        const LoadedProblem& lp = fixture("coercivity-broken");
        Reference ref(lp.problem, lp.extremal);
        PulledBackFields pf = pull_back_fields(ref);
        EXPECT_THROW(hestenes_penalty_search(ref, pf, make_penalty(ref, lp.options), lp.options), PreconditionError);
    }
}

TEST(Hestenes, MinEigenvalueGrowsWithRho) {
    const LoadedProblem& lp = fixture("normal-generic", 1, 1);
    Reference ref(lp.problem, lp.extremal);
    PulledBackFields pf = pull_back_fields(ref);
    BoundaryPenalty base = make_penalty(ref, lp.options);
    if (base.P.norm() == 0.0) GTEST_SKIP() << "free initial point";
    const FPLayout L = FPLayout::of(ref);
    const Mat K = kernel_space(ref, pf, false, 1);
    double prev = -INFINITY;
    for (double rho : {0.0, 1.0, 10.0, 100.0}) {
        const double e = min_eig(assemble_second_variation(pf, base.with_rho(rho), L, 1), K);
        EXPECT_GE(e, prev - 1e-10);
        prev = e;
    }
}

TEST(SubspaceChain, StepsMatchDirectEvaluation) {
    for (auto [J0, J1] : {std::pair{0, 0}, std::pair{1, 1}})
        for (std::string recipe : {"normal-generic", "abnormal"}) {
            Pipeline P(fixture(recipe, J0, J1));
            for (int nu = 1; nu <= 2; ++nu) {
                ChainReport c = subspace_chain(P.ref, P.pf, P.pen, P.gr, nu);
                EXPECT_TRUE(c.dimensions_ok) << recipe;
                EXPECT_TRUE(c.all_positive) << recipe;
                EXPECT_LE(c.max_relative_mismatch, 1e-8) << recipe;
                if (J0 == 0 && J1 == 0) {
                    // Only the double-switch step and the final complement in N.
                    ASSERT_GE(c.steps.size(), 1u);
                    EXPECT_EQ(c.steps[0].dimension, 2);
                }
                for (const auto& s : c.steps) {
                    EXPECT_EQ(s.dimension, s.expected_dimension) << s.label;
                    EXPECT_GT(s.min_eigenvalue, 0.0) << s.label;
                }
            }
        }
}
