#pragma once
// The finite-dimensional subproblem: boundary penalties alpha and beta, the
// linearized endpoint, both second variations (classical and Hamiltonian
// assembly), kernels, coercivity, the Hestenes penalty search and the
// subspace-chain decomposition.
//
// Two coordinate systems on the variations:
//   (a, b) layout:   (dx [n], a_00..a_0J0, a_10..a_1J1 [A = J0 + J1 + 2], b [1]),
//                    with the sum constraint b + sum a = 0 imposed separately;
//                    the branch nu is an extra discrete choice.
//   (delta, eps) layout: (dx [n], delta_01..delta_0J0, eps_1, eps_2, delta_11..delta_1J1),
//                    one coordinate fewer; the sum constraint is built in and
//                    nu = 1 iff eps_1 <= eps_2.
// The map T_nu from (delta, eps) to (a, b) is linear on each branch.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "conditions.hpp"
#include "flows.hpp"
#include "problem_io.hpp"

namespace bbcert {

class SecondVariationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Layout.

struct FPLayout {
    int n = 0, J0 = 0, J1 = 0;

    int A() const { return J0 + J1 + 2; }
    int size() const { return n + A() + 1; }   // (a, b) layout
    int de_size() const { return n + J0 + 2 + J1; }
    int a0(int j) const { return n + j; }            // a_0j, j = 0..J0
    int a1(int j) const { return n + J0 + 1 + j; }   // a_1j, j = 0..J1
    int b() const { return n + A(); }
    int d0(int j) const { return n + j - 1; }        // delta_0j, j = 1..J0
    int eps(int nu) const { return n + J0 + nu - 1; }
    int d1(int j) const { return n + J0 + 2 + j - 1; }  // delta_1j, j = 1..J1

    static FPLayout of(const Reference& ref) { return {ref.n(), ref.schedule().J0, ref.schedule().J1}; }

    // T_nu: (delta, eps) -> (a, b).
    Mat to_ab_matrix(int nu) const {
        Mat T = Mat::Zero(size(), de_size());
        T.topLeftCorner(n, n) = Mat::Identity(n, n);
        const int lo = eps(nu), hi = eps(3 - nu);
        // delta_0j as rows over (delta, eps); delta_00 = 0, delta_0,J0+1 = eps_nu.
        auto d0row = [&](int j) {
            Vec r = Vec::Zero(de_size());
            if (j >= 1 && j <= J0) r[d0(j)] = 1.0;
            if (j == J0 + 1) r[lo] = 1.0;
            return r;
        };
        // delta_10 = eps_{3-nu}, delta_1,J1+1 = 0.
        auto d1row = [&](int j) {
            Vec r = Vec::Zero(de_size());
            if (j == 0) r[hi] = 1.0;
            if (j >= 1 && j <= J1) r[d1(j)] = 1.0;
            return r;
        };
        for (int j = 0; j <= J0; ++j) T.row(a0(j)) = (d0row(j + 1) - d0row(j)).transpose();
        for (int j = 0; j <= J1; ++j) T.row(a1(j)) = (d1row(j + 1) - d1row(j)).transpose();
        T(b(), hi) = 1.0;
        T(b(), lo) = -1.0;
        return T;
    }

    // Inverse of T_nu on the sum-constraint space (the last a_1J1 is implied).
    Vec to_delta_eps(const Vec& v, int nu) const {
        Vec de = Vec::Zero(de_size());
        de.head(n) = v.head(n);
        double d = 0.0;
        for (int j = 0; j <= J0; ++j) {
            d += v[a0(j)];
            if (j + 1 <= J0) de[d0(j + 1)] = d;
        }
        de[eps(nu)] = d;
        d += v[b()];
        de[eps(3 - nu)] = d;
        for (int j = 0; j < J1; ++j) {
            d += v[a1(j)];
            de[d1(j + 1)] = d;
        }
        return de;
    }

    std::pair<Vec, int> to_ab(const Vec& de) const {
        int nu = de[eps(1)] <= de[eps(2)] ? 1 : 2;
        return {to_ab_matrix(nu) * de, nu};
    }

    // Row of the sum constraint in the (a, b) layout.
    Vec sum_row() const {
        Vec r = Vec::Zero(size());
        r.segment(n, A() + 1).setOnes();
        return r;
    }
};

// ---------------------------------------------------------------------------
// Boundary penalties.
//
// alpha(x) = p0 c0(x) + <lambda0 - p0 dc0(x0), x - x0> + 1/2 (x - x0)^T (A_user + rho P)(x - x0)
// beta(y)  = p0 cf(y) + <-lambdaT - p0 dcf(xf), y - xf> + 1/2 (y - xf)^T B_user (y - xf)

struct BoundaryPenalty {
    const ControlAffineProblem* pb = nullptr;
    int p0 = 1;
    Vec x0, lambda0, xf, lambdaT;
    Mat d2alpha_user, d2beta_user;
    double rho = 0.0;
    Mat P;            // projector onto the normal space of N0 at x0
    Mat d2beta_hat;   // D^2 (beta o S_T)(x0)
    Vec dbeta_hat;    // d (beta o S_T)(x0); equals -lambda0 on an extremal

    double alpha(const Vec& x) const {
        Vec d = x - x0;
        return p0 * pb->c0.value(x) + (lambda0 - p0 * pb->c0.gradient(x0)).dot(d) +
               0.5 * d.dot((d2alpha_user + rho * P) * d);
    }
    Vec grad_alpha(const Vec& x) const {
        return p0 * pb->c0.gradient(x) + (lambda0 - p0 * pb->c0.gradient(x0)) + (d2alpha_user + rho * P) * (x - x0);
    }
    double beta(const Vec& y) const {
        Vec d = y - xf;
        return p0 * pb->cf.value(y) + (-lambdaT - p0 * pb->cf.gradient(xf)).dot(d) + 0.5 * d.dot(d2beta_user * d);
    }
    Vec grad_beta(const Vec& y) const {
        return p0 * pb->cf.gradient(y) + (-lambdaT - p0 * pb->cf.gradient(xf)) + d2beta_user * (y - xf);
    }
    Mat d2alpha() const {
        Mat H = d2alpha_user + rho * P;
        if (p0 != 0) H += p0 * pb->c0.hessian(x0);
        return H;
    }
    Mat d2gamma() const { return d2alpha() + d2beta_hat; }

    BoundaryPenalty with_rho(double r) const {
        BoundaryPenalty q = *this;
        q.rho = r;
        return q;
    }
};

// Gradient of beta o S_T at x: M_T(x)^T grad beta(S_T(x)).
inline Vec beta_hat_gradient(const Reference& ref, const BoundaryPenalty& pen, const Vec& x) {
    FlowResult r = ref.flow_from(x, ref.T(), true);
    return r.transition.transpose() * pen.grad_beta(r.x);
}

inline BoundaryPenalty make_penalty(const Reference& ref, const CertifyOptions& opt = {}) {
    const auto& pb = ref.problem();
    const int n = pb.n;
    BoundaryPenalty pen;
    pen.pb = &ref.problem();
    pen.p0 = ref.extremal().p0;
    pen.x0 = ref.extremal().x0hat;
    pen.lambda0 = ref.extremal().lambda0hat;
    pen.xf = ref.xf();
    pen.lambdaT = ref.lambdaT();
    pen.d2alpha_user = opt.d2alpha ? *opt.d2alpha : Mat::Zero(n, n);
    pen.d2beta_user = opt.d2beta ? *opt.d2beta : Mat::Zero(n, n);
    Mat V = kernel_basis(constraint_jacobian(pb.N0, pen.x0, n), n);
    pen.P = Mat::Identity(n, n) - V * V.transpose();

    pen.dbeta_hat = beta_hat_gradient(ref, pen, pen.x0);
    Mat H(n, n);
    for (int j = 0; j < n; ++j) {
        double h = 1e-5 * (1.0 + std::fabs(pen.x0[j]));
        Vec xp = pen.x0, xm = pen.x0;
        xp[j] += h;
        xm[j] -= h;
        H.col(j) = (beta_hat_gradient(ref, pen, xp) - beta_hat_gradient(ref, pen, xm)) / (2.0 * h);
    }
    pen.d2beta_hat = 0.5 * (H + H.transpose());
    return pen;
}

struct PenaltyResiduals {
    double alpha_gradient = 0.0;  // |d alpha(x0) - lambda0|
    double beta_gradient = 0.0;   // |d beta(xf) + lambdaT|
    double gamma_gradient = 0.0;  // |d gamma(x0)|, zero by the PMP
};

inline PenaltyResiduals penalty_residuals(const BoundaryPenalty& pen) {
    PenaltyResiduals r;
    r.alpha_gradient = (pen.grad_alpha(pen.x0) - pen.lambda0).cwiseAbs().maxCoeff();
    r.beta_gradient = (pen.grad_beta(pen.xf) + pen.lambdaT).cwiseAbs().maxCoeff();
    r.gamma_gradient = (pen.grad_alpha(pen.x0) + pen.dbeta_hat).cwiseAbs().maxCoeff();
    return r;
}

// ---------------------------------------------------------------------------
// Linearized endpoint (in pulled-back coordinates at x0).

// The form with no branch dependence, from (delta, eps).
inline Vec linearized_endpoint(const PulledBackFields& pf, const FPLayout& L, const Vec& de) {
    const int J0 = L.J0, J1 = L.J1;
    auto d0 = [&](int j) { return j == 0 ? 0.0 : de[L.d0(j)]; };
    auto d1 = [&](int j) { return j == J1 + 1 ? 0.0 : de[L.d1(j)]; };
    const double d11 = J1 >= 1 ? d1(1) : 0.0;
    Vec out = de.head(L.n);
    for (int j = 0; j < J0; ++j) out += (d0(j + 1) - d0(j)) * pf.g0[j].value0;
    out += (d11 - d0(J0)) * pf.g0[J0].value0;
    out += 2.0 * (d11 - de[L.eps(1)]) * pf.ft[0].value0;
    out += 2.0 * (d11 - de[L.eps(2)]) * pf.ft[1].value0;
    for (int j = 1; j <= J1; ++j) out += (d1(j + 1) - d1(j)) * pf.g1[j].value0;
    return out;
}

// dx + sum a g + b h_nu, the branch form in the (a, b) layout.
inline Vec linearized_endpoint(const PulledBackFields& pf, const FPLayout& L, const Vec& v, int nu) {
    Vec out = v.head(L.n);
    for (int j = 0; j <= L.J0; ++j) out += v[L.a0(j)] * pf.g0[j].value0;
    out += v[L.b()] * pf.h[nu - 1].value0;
    for (int j = 0; j <= L.J1; ++j) out += v[L.a1(j)] * pf.g1[j].value0;
    return out;
}

inline Mat endpoint_matrix(const PulledBackFields& pf, const FPLayout& L, int nu) {
    Mat E(L.n, L.size());
    for (int k = 0; k < L.size(); ++k) E.col(k) = linearized_endpoint(pf, L, Vec::Unit(L.size(), k), nu);
    return E;
}

inline Mat endpoint_matrix_de(const PulledBackFields& pf, const FPLayout& L) {
    Mat E(L.n, L.de_size());
    for (int k = 0; k < L.de_size(); ++k) E.col(k) = linearized_endpoint(pf, L, Vec::Unit(L.de_size(), k));
    return E;
}

// ---------------------------------------------------------------------------
// Second variations.

namespace detail {

struct OrderedFields {
    std::vector<Vec> v;  // values at x0
    std::vector<Mat> J;  // Jacobians at x0
    std::vector<int> var;  // variable index in the (a, b) layout
};

inline OrderedFields ordered_fields(const PulledBackFields& pf, const FPLayout& L, int nu) {
    OrderedFields o;
    auto push = [&](const PulledField& g, int idx) {
        o.v.push_back(g.value0);
        o.J.push_back(g.jac0);
        o.var.push_back(idx);
    };
    for (int j = 0; j <= L.J0; ++j) push(pf.g0[j], L.a0(j));
    push(pf.h[nu - 1], L.b());
    for (int j = 0; j <= L.J1; ++j) push(pf.g1[j], L.a1(j));
    return o;
}

inline Mat symmetrize(const Mat& B) { return 0.5 * (B + B.transpose()); }

}  // namespace detail

// Classical bilinear form: for d = (dx, w), d' = (dy, w') with W = sum w_i g_i,
// 2 B(d, d') = D2gamma(dx, dy) + dy(W beta) + dx(W' beta) + W'(W beta)
//              + sum_{i<j} w_i w'_j [g_i, g_j] beta,
// where v(w beta) = D2beta(w, v) + dbeta Dw v. Returns the symmetric matrix Q
// with J''[d]^2 = d^T Q d.
inline Mat assemble_second_variation(const PulledBackFields& pf, const BoundaryPenalty& pen, const FPLayout& L,
                                     int nu) {
    const int n = L.n, N = L.size();
    const auto o = detail::ordered_fields(pf, L, nu);
    const int F = static_cast<int>(o.v.size());
    const Mat& D = pen.d2beta_hat;
    const Vec& db = pen.dbeta_hat;
    const Mat G = pen.d2gamma();
    auto field = [&](const Vec& d, Vec& W, Mat& DW) {
        W = Vec::Zero(n);
        DW = Mat::Zero(n, n);
        for (int i = 0; i < F; ++i) {
            W += d[o.var[i]] * o.v[i];
            DW += d[o.var[i]] * o.J[i];
        }
    };
    auto lie2 = [&](const Vec& v, const Vec& w, const Mat& Dw) { return w.dot(D * v) + db.dot(Dw * v); };
    Mat B(N, N);
    for (int r = 0; r < N; ++r) {
        Vec d = Vec::Unit(N, r);
        Vec W;
        Mat DW;
        field(d, W, DW);
        for (int c = 0; c < N; ++c) {
            Vec e = Vec::Unit(N, c);
            Vec Wc;
            Mat DWc;
            field(e, Wc, DWc);
            Vec dx = d.head(n), dy = e.head(n);
            double s = dx.dot(G * dy) + lie2(dy, W, DW) + lie2(dx, Wc, DWc) + lie2(Wc, W, DW);
            for (int i = 0; i < F; ++i)
                for (int j = i + 1; j < F; ++j) {
                    double wij = d[o.var[i]] * e[o.var[j]];
                    if (wij == 0.0) continue;
                    s += wij * db.dot(o.J[j] * o.v[i] - o.J[i] * o.v[j]);
                }
            B(r, c) = 0.5 * s;
        }
    }
    return detail::symmetrize(B);
}

// Hamiltonian assembly through iota(w, dx) = (-w - D2beta dx, dx) and the
// linear Hamiltonians G''(w, y) = <w, g> + y(g beta). The displayed
// Hamiltonian expression equals 2 J'' identically, so the returned matrix is
// half of it and is directly comparable with assemble_second_variation.
inline Mat assemble_hamiltonian_form(const PulledBackFields& pf, const BoundaryPenalty& pen, const FPLayout& L,
                                     int nu) {
    const int n = L.n, N = L.size();
    const auto o = detail::ordered_fields(pf, L, nu);
    const int F = static_cast<int>(o.v.size());
    const Mat& D = pen.d2beta_hat;
    const Vec& db = pen.dbeta_hat;
    const Vec& l0 = pen.lambda0;
    const Mat G = pen.d2gamma();
    // Lifted fields G''_i = (J_i^T lambda0 - D v_i, v_i).
    std::vector<Vec> Gw(F);
    for (int i = 0; i < F; ++i) Gw[i] = o.J[i].transpose() * l0 - D * o.v[i];
    auto ham = [&](int i, const Vec& w, const Vec& y) { return w.dot(o.v[i]) + o.v[i].dot(D * y) + db.dot(o.J[i] * y); };

    Mat B(N, N);
    for (int r = 0; r < N; ++r) {
        Vec d = Vec::Unit(N, r);
        const Vec dx = d.head(n);
        Vec w0 = -G * dx;
        for (int c = 0; c < N; ++c) {
            Vec e = Vec::Unit(N, c);
            Vec tgt = e.head(n);
            for (int i = 0; i < F; ++i) tgt += e[o.var[i]] * o.v[i];
            Vec wnu = w0;
            for (int i = 0; i < F; ++i) wnu += d[o.var[i]] * Gw[i];
            double s = -wnu.dot(tgt);
            // Running point dl + sum_{i<j} w_i G''_i; its dx part never moves.
            Vec w = w0, y = dx;
            for (int j = 0; j < F; ++j) {
                s += e[o.var[j]] * ham(j, w, y);
                w += d[o.var[j]] * Gw[j];
                y += d[o.var[j]] * o.v[j];
            }
            B(r, c) = s;
        }
    }
    return 0.5 * detail::symmetrize(B);
}

// ---------------------------------------------------------------------------
// Kernels.

// Orthonormal basis of N0 (constrained) or N in the (a, b) layout for branch nu.
inline Mat kernel_space(const Reference& ref, const PulledBackFields& pf, bool constrained, int nu = 1) {
    const auto& pb = ref.problem();
    const FPLayout L = FPLayout::of(ref);
    const int n = L.n;
    Mat Jf = constraint_jacobian(pb.Nf, ref.xf(), n);
    if (Jf.rows() > 0 && numeric_rank(Jf) < Jf.rows()) throw SecondVariationError("final constraint Jacobian is rank deficient");
    Mat J0 = constraint_jacobian(pb.N0, ref.extremal().x0hat, n);
    if (J0.rows() > 0 && numeric_rank(J0) < J0.rows())
        throw SecondVariationError("initial constraint Jacobian is rank deficient");
    const Mat& MT = ref.node_M(ref.schedule().arcs());
    int rows = 1 + static_cast<int>(Jf.rows()) + (constrained ? static_cast<int>(J0.rows()) : 0);
    Mat C = Mat::Zero(rows, L.size());
    C.row(0) = L.sum_row().transpose();
    if (Jf.rows() > 0) C.middleRows(1, Jf.rows()) = Jf * MT * endpoint_matrix(pf, L, nu);
    if (constrained && J0.rows() > 0) C.bottomRows(J0.rows()).leftCols(n) = J0;
    return kernel_basis(C, L.size());
}

// The same kernels in the (delta, eps) layout, which carry no branch label.
inline Mat kernel_space_de(const Reference& ref, const PulledBackFields& pf, bool constrained) {
    const auto& pb = ref.problem();
    const FPLayout L = FPLayout::of(ref);
    const int n = L.n;
    Mat Jf = constraint_jacobian(pb.Nf, ref.xf(), n);
    Mat J0 = constraint_jacobian(pb.N0, ref.extremal().x0hat, n);
    const Mat& MT = ref.node_M(ref.schedule().arcs());
    int rows = static_cast<int>(Jf.rows()) + (constrained ? static_cast<int>(J0.rows()) : 0);
    Mat C = Mat::Zero(rows, L.de_size());
    if (Jf.rows() > 0) C.topRows(Jf.rows()) = Jf * MT * endpoint_matrix_de(pf, L);
    if (constrained && J0.rows() > 0) C.bottomRows(J0.rows()).leftCols(n) = J0;
    return kernel_basis(C, L.de_size());
}

// ---------------------------------------------------------------------------
// Coercivity.

struct CoercivityResult {
    double min_eigenvalue = INFINITY;
    double threshold = 0.0;
    int dimension = 0;
    bool pass = true;
};

// Smallest eigenvalue of B^T Q B; pass iff it exceeds rel * |Q|_2.
inline CoercivityResult coercivity_check(const Mat& Q, const Mat& basis, double rel = 1e-6) {
    CoercivityResult r;
    r.dimension = static_cast<int>(basis.cols());
    r.threshold = rel * Eigen::JacobiSVD<Mat>(Q).singularValues()[0];
    if (r.dimension == 0) return r;
    Mat R = basis.transpose() * Q * basis;
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (R + R.transpose()));
    r.min_eigenvalue = es.eigenvalues()[0];
    r.pass = r.min_eigenvalue > r.threshold;
    return r;
}

// ---------------------------------------------------------------------------
// The assembled subproblem.

struct FPVariation {
    FPLayout layout;
    Mat constraints_N[2];   // sum row and endpoint rows per branch
    Mat Q[2];               // classical assembly, nu = 1, 2
    Mat Qham[2];            // Hamiltonian assembly, nu = 1, 2
    Mat kernel_N[2], kernel_N0[2];
    Mat kernel_de_N, kernel_de_N0;  // (delta, eps) layout

    // T_nu^T Q_nu T_nu: the branch forms on the (delta, eps) layout.
    Mat Q_de(int nu) const {
        Mat T = layout.to_ab_matrix(nu);
        return T.transpose() * Q[nu - 1] * T;
    }
};

inline FPVariation build_fp_variation(const Reference& ref, const PulledBackFields& pf, const BoundaryPenalty& pen) {
    FPVariation v;
    v.layout = FPLayout::of(ref);
    const auto& pb = ref.problem();
    Mat Jf = constraint_jacobian(pb.Nf, ref.xf(), v.layout.n);
    const Mat& MT = ref.node_M(ref.schedule().arcs());
    for (int nu = 1; nu <= 2; ++nu) {
        Mat C(1 + Jf.rows(), v.layout.size());
        C.row(0) = v.layout.sum_row().transpose();
        if (Jf.rows() > 0) C.bottomRows(Jf.rows()) = Jf * MT * endpoint_matrix(pf, v.layout, nu);
        v.constraints_N[nu - 1] = C;
        v.Q[nu - 1] = assemble_second_variation(pf, pen, v.layout, nu);
        v.Qham[nu - 1] = assemble_hamiltonian_form(pf, pen, v.layout, nu);
        v.kernel_N[nu - 1] = kernel_space(ref, pf, false, nu);
        v.kernel_N0[nu - 1] = kernel_space(ref, pf, true, nu);
    }
    v.kernel_de_N = kernel_space_de(ref, pf, false);
    v.kernel_de_N0 = kernel_space_de(ref, pf, true);
    return v;
}

// First variation on the (delta, eps) layout computed through branch nu; the
// result does not depend on nu.
inline Vec first_variation(const PulledBackFields& pf, const BoundaryPenalty& pen, const FPLayout& L, int nu) {
    Mat E = endpoint_matrix(pf, L, nu) * L.to_ab_matrix(nu);
    Vec g = (pen.dbeta_hat.transpose() * E).transpose();
    g.head(L.n) += pen.grad_alpha(pen.x0);
    return g;
}

// ---------------------------------------------------------------------------
// Hestenes penalty search.

struct HestenesResult {
    bool success = false;
    double rho = 0.0;
    BoundaryPenalty penalty;
    CoercivityResult coercivity[2];
    std::string message;
};

class PreconditionError : public SecondVariationError {
public:
    using SecondVariationError::SecondVariationError;
};

// Tries rho = 0 and then rho = 10^k, k = 0..12, adding rho P to D2alpha until
// both branch forms are positive definite on N.
inline HestenesResult hestenes_penalty_search(const Reference& ref, const PulledBackFields& pf,
                                              const BoundaryPenalty& base, const CertifyOptions& opt = {}) {
    const FPLayout L = FPLayout::of(ref);
    HestenesResult res;
    Mat K0[2], K[2];
    for (int nu = 1; nu <= 2; ++nu) {
        K0[nu - 1] = kernel_space(ref, pf, true, nu);
        K[nu - 1] = kernel_space(ref, pf, false, nu);
        Mat Q = assemble_second_variation(pf, base, L, nu);
        if (!coercivity_check(Q, K0[nu - 1], opt.coercivity_rel).pass)
            throw PreconditionError("second variation is not coercive on the constrained kernel for nu = " +
                                    std::to_string(nu));
    }
    std::vector<double> grid{0.0};
    if (base.P.norm() > 0.0)
        for (int k = 0; k <= 12; ++k) grid.push_back(std::pow(10.0, k));
    for (double rho : grid) {
        BoundaryPenalty pen = base.with_rho(base.rho + rho);
        bool ok = true;
        CoercivityResult cr[2];
        for (int nu = 1; nu <= 2; ++nu) {
            cr[nu - 1] = coercivity_check(assemble_second_variation(pf, pen, L, nu), K[nu - 1], opt.coercivity_rel);
            ok = ok && cr[nu - 1].pass;
        }
        if (ok) {
            res.success = true;
            res.rho = rho;
            res.penalty = pen;
            res.coercivity[0] = cr[0];
            res.coercivity[1] = cr[1];
            return res;
        }
    }
    res.penalty = base;
    res.message = "no rho in {0, 10^0, ..., 10^12} makes both second variations positive definite on N";
    return res;
}

// ---------------------------------------------------------------------------
// Subspace chain V_01 c ... c V_1J1 = V c N.

struct ChainStep {
    std::string label;
    int dimension = 0;            // dim of the J''-orthogonal complement
    int expected_dimension = 0;
    double characterization_residual = 0.0;
    double closed_form = 0.0;     // value from the characterization formula, in J'' units
    double literal_display = NAN; // double-switch step only: b (H'' - G''_0J0) + a_10 (G''_10 - H'')
    double direct = 0.0;          // d^T Q d on the same representative
    double min_eigenvalue = 0.0;  // of Q on the complement
};

struct ChainReport {
    int nu = 1;
    std::vector<ChainStep> steps;
    double max_relative_mismatch = 0.0;
    bool dimensions_ok = true;
    bool all_positive = true;
};

namespace detail {

// Basis of {d in span(S) : d^T Q s = 0 for s in span(P)}, with P inside S.
inline Mat orthogonal_complement_in(const Mat& S, const Mat& Pm, const Mat& Q) {
    if (Pm.cols() == 0) return S;
    Mat C = Pm.transpose() * Q * S;  // conditions on the coefficients in S
    Mat Z = kernel_basis(C, static_cast<int>(S.cols()), 1e-9);
    return S * Z;
}

}  // namespace detail

inline ChainReport subspace_chain(const Reference& ref, const PulledBackFields& pf, const BoundaryPenalty& pen,
                                  const SwitchingGradients& gr, int nu) {
    const FPLayout L = FPLayout::of(ref);
    const int n = L.n, N = L.size(), J0 = L.J0, J1 = L.J1;
    const Mat Q = assemble_second_variation(pf, pen, L, nu);
    const Mat E = endpoint_matrix(pf, L, nu);
    const Mat D2a = pen.d2alpha();
    const Vec& l0 = pen.lambda0;

    // Lifted fields at lambda0 in time order of branch nu.
    std::vector<Vec> G0 = gr.G0, G1 = gr.G1;
    const Vec& H = gr.H[nu - 1];

    // dtheta rows: theta_00 = 0, theta_0,J0+1 = tau_nu, theta_10 = theta^nu_10.
    std::vector<Vec> th0(J0 + 2, Vec::Zero(2 * n));
    for (int j = 1; j <= J0; ++j) th0[j] = gr.dtheta0[j - 1];
    th0[J0 + 1] = gr.dtau[nu - 1];
    std::vector<Vec> th1(J1 + 1);
    th1[0] = gr.dtheta10[nu - 1];
    for (int j = 1; j <= J1; ++j) th1[j] = gr.dtheta1[nu - 1][j - 1];

    auto dalpha = [&](const Vec& d) {
        Vec v(2 * n);
        v.head(n) = D2a * d.head(n);
        v.tail(n) = d.head(n);
        return v;
    };

    // Subspace of V with a given set of free variables (others zero).
    auto subspace = [&](const std::vector<int>& free) {
        // Coordinates: dx and the free variables; constraints sum = 0, L = 0.
        Mat S = Mat::Zero(N, n + free.size());
        S.topLeftCorner(n, n) = Mat::Identity(n, n);
        for (size_t i = 0; i < free.size(); ++i) S(free[i], n + i) = 1.0;
        Mat C(1 + n, N);
        C.row(0) = L.sum_row().transpose();
        C.bottomRows(n) = E;
        Mat Z = kernel_basis(C * S, static_cast<int>(S.cols()), 1e-10);
        return Mat(S * Z);
    };

    ChainReport rep;
    rep.nu = nu;
    auto record = [&](ChainStep st, const Mat& comp, const std::function<double(const Vec&)>& closed,
                      const std::function<double(const Vec&)>& charact,
                      const std::function<double(const Vec&)>& literal = nullptr) {
        st.dimension = static_cast<int>(comp.cols());
        if (st.dimension != st.expected_dimension) rep.dimensions_ok = false;
        if (st.dimension > 0) {
            Mat R = comp.transpose() * Q * comp;
            st.min_eigenvalue = Eigen::SelfAdjointEigenSolver<Mat>(0.5 * (R + R.transpose())).eigenvalues()[0];
            if (!(st.min_eigenvalue > 0.0)) rep.all_positive = false;
            // A generic representative: fixed combination of the basis.
            Vec c = Vec::LinSpaced(st.dimension, 1.0, 0.5 + st.dimension);
            Vec d = comp * c / c.norm();
            st.direct = d.dot(Q * d);
            // The Hamiltonian displays are in the units of 2 J''.
            st.closed_form = 0.5 * closed(d);
            if (literal) st.literal_display = 0.5 * literal(d);
            st.characterization_residual = charact(d);
            double scale = std::max(std::fabs(st.direct), 1e-300);
            rep.max_relative_mismatch = std::max(rep.max_relative_mismatch, std::fabs(st.closed_form - st.direct) / scale);
        }
        rep.steps.push_back(st);
    };

    // Characterization residual: a_0s = <d(theta_0,s+1 - theta_0s), dalpha dx> for s < smax, etc.
    auto char_pre = [&](const Vec& d, int smax) {
        double r = 0.0;
        Vec v = dalpha(d);
        for (int s = 0; s < smax; ++s) r = std::max(r, std::fabs(d[L.a0(s)] - (th0[s + 1] - th0[s]).dot(v)));
        return r;
    };
    auto char_post = [&](const Vec& d, int s1max) {
        Vec v = dalpha(d);
        double r = char_pre(d, J0 + 1);
        r = std::max(r, std::fabs(d[L.b()] - (th1[0] - th0[J0 + 1]).dot(v)));
        for (int s = 0; s < s1max; ++s) r = std::max(r, std::fabs(d[L.a1(s)] - (th1[s + 1] - th1[s]).dot(v)));
        return r;
    };

    std::vector<int> free;
    Mat prev(N, 0);
    // Pre-double chain.
    free.push_back(L.a0(0));
    for (int j = 1; j <= J0; ++j) {
        free.push_back(L.a0(j));
        Mat Vj = subspace(free);
        Mat comp = detail::orthogonal_complement_in(Vj, prev, Q);
        ChainStep st;
        st.label = "V_0" + std::to_string(j);
        st.expected_dimension = 1;
        record(
            st, comp,
            [&, j](const Vec& d) {
                Vec acc = dalpha(d);
                for (int s = 0; s < j; ++s) acc += d[L.a0(s)] * G0[s];
                return -d[L.a0(j)] * sigma(acc, G0[j] - G0[j - 1]);
            },
            [&, j](const Vec& d) { return char_pre(d, j - 1); });
        prev = Vj;
    }
    if (J0 == 0) prev = subspace(free);  // V_00 holds dx with a_00 = 0 forced by the sum

    // The double switch: b and a_10 enter together.
    free.push_back(L.b());
    free.push_back(L.a1(0));
    {
        Mat V10 = subspace(free);
        Mat comp = detail::orthogonal_complement_in(V10, prev, Q);
        ChainStep st;
        st.label = "V_10";
        st.expected_dimension = 2;
        record(
            st, comp,
            [&](const Vec& d) {
                // b (H'' - G''_0J0) + a_10 (G''_10 - G''_0J0), each Hamiltonian at
                // its own running point. Measuring a_10 against H'' instead is
                // exact only where H'' and G''_0J0 agree, which the two-dimensional
                // complement does not enforce; that variant is kept as literal_display.
                Vec pre = dalpha(d);
                for (int s = 0; s < J0; ++s) pre += d[L.a0(s)] * G0[s];
                Vec acc = pre + d[L.a0(J0)] * G0[J0];
                double P = -sigma(pre, G0[J0]), PH = -sigma(acc, H);
                double P10 = -sigma(acc + d[L.b()] * H, G1[0]);
                return d[L.b()] * (PH - P) + d[L.a1(0)] * (P10 - P);
            },
            [&](const Vec& d) { return char_pre(d, J0); },
            [&](const Vec& d) {
                Vec acc = dalpha(d);
                for (int s = 0; s <= J0; ++s) acc += d[L.a0(s)] * G0[s];
                double v = -d[L.b()] * sigma(acc, H - G0[J0]);
                acc += d[L.b()] * H;
                return v - d[L.a1(0)] * sigma(acc, G1[0] - H);
            });
        prev = V10;
    }
    for (int j = 1; j <= J1; ++j) {
        free.push_back(L.a1(j));
        Mat Vj = subspace(free);
        Mat comp = detail::orthogonal_complement_in(Vj, prev, Q);
        ChainStep st;
        st.label = "V_1" + std::to_string(j);
        st.expected_dimension = 1;
        record(
            st, comp,
            [&, j](const Vec& d) {
                Vec acc = dalpha(d);
                for (int s = 0; s <= J0; ++s) acc += d[L.a0(s)] * G0[s];
                acc += d[L.b()] * H;
                for (int s = 0; s < j; ++s) acc += d[L.a1(s)] * G1[s];
                return -d[L.a1(j)] * sigma(acc, G1[j] - G1[j - 1]);
            },
            [&, j](const Vec& d) { return char_post(d, j - 1); });
        prev = Vj;
    }

    // N inside V^perp.
    {
        Mat K = kernel_space(ref, pf, false, nu);
        Mat comp = detail::orthogonal_complement_in(K, prev, Q);
        ChainStep st;
        st.label = "N";
        st.expected_dimension = static_cast<int>(K.cols() - prev.cols());
        const auto o = detail::ordered_fields(pf, L, nu);
        const Mat G = pen.d2gamma();
        const Mat& Db = pen.d2beta_hat;
        record(
            st, comp,
            [&](const Vec& d) {
                Vec w = -G * d.head(n);
                Vec tgt = d.head(n);
                for (size_t i = 0; i < o.v.size(); ++i) {
                    w += d[o.var[i]] * (o.J[i].transpose() * l0 - Db * o.v[i]);
                    tgt += d[o.var[i]] * o.v[i];
                }
                return -w.dot(tgt);
            },
            [&](const Vec& d) { return char_post(d, J1); });
    }
    return rep;
}

// ---------------------------------------------------------------------------
// The subproblem itself: trajectories and cost for (dx, delta, eps).

struct FPTrajectory {
    std::vector<double> t;
    std::vector<Vec> x;
    std::vector<int> arc;  // -1 marks the inserted k_nu arc
    Vec xT;
};

// Integrates the subproblem trajectory from x0hat + dx with switching times
// theta_0j + delta_0j, tau + min eps, tau + max eps, theta_1j + delta_1j. Each
// arc uses the reference step count, so the endpoint is smooth in the times.
inline FPTrajectory fp_trajectory(const Reference& ref, const Vec& de, int samples_per_arc = 0) {
    const FPLayout L = FPLayout::of(ref);
    const auto& sc = ref.schedule();
    const double e1 = de[L.eps(1)], e2 = de[L.eps(2)];
    const int nu = e1 <= e2 ? 1 : 2;
    struct Piece {
        const ArcField* k;
        double a, b;
        int steps, arc;
    };
    std::vector<double> t0{0.0};
    for (int j = 1; j <= L.J0; ++j) t0.push_back(sc.theta0[j - 1] + de[L.d0(j)]);
    const double tmin = sc.tau + std::min(e1, e2), tmax = sc.tau + std::max(e1, e2);
    std::vector<Piece> pieces;
    for (int j = 0; j <= L.J0; ++j)
        pieces.push_back({&ref.arc(j), t0[j], j < L.J0 ? t0[j + 1] : tmin, ref.steps(j), j});
    pieces.push_back({&ref.k_nu(nu), tmin, tmax, ref.options().inserted_steps, -1});
    std::vector<double> t1{tmax};
    for (int j = 1; j <= L.J1; ++j) t1.push_back(sc.theta1[j - 1] + de[L.d1(j)]);
    t1.push_back(ref.T());
    for (int j = 0; j <= L.J1; ++j) {
        int k = L.J0 + 1 + j;
        pieces.push_back({&ref.arc(k), t1[j], t1[j + 1], ref.steps(k), k});
    }
    for (const auto& p : pieces)
        if (p.b < p.a) throw SecondVariationError("perturbed switching times are out of order");

    FPTrajectory tr;
    Vec x = ref.extremal().x0hat + de.head(L.n);
    for (const auto& p : pieces) {
        const int S = std::max(1, samples_per_arc);
        const int per = std::max(1, (p.steps + S - 1) / S);
        for (int s = 0; s < S; ++s) {
            if (samples_per_arc > 0) {
                tr.t.push_back(p.a + (p.b - p.a) * s / S);
                tr.x.push_back(x);
                tr.arc.push_back(p.arc);
            }
            x = ref.state_flow(*p.k, x, (p.b - p.a) / S, samples_per_arc > 0 ? per : p.steps);
        }
    }
    if (samples_per_arc > 0) {
        tr.t.push_back(ref.T());
        tr.x.push_back(x);
        tr.arc.push_back(pieces.back().arc);
    }
    tr.xT = x;
    return tr;
}

inline double fp_cost(const Reference& ref, const BoundaryPenalty& pen, const Vec& de) {
    const Vec x0 = ref.extremal().x0hat + de.head(ref.n());
    return pen.alpha(x0) + pen.beta(fp_trajectory(ref, de).xT);
}

// Richardson-extrapolated (J(h d) - J(0)) / h^2 over h0, h0/2, h0/4.
inline double fp_second_difference(const Reference& ref, const BoundaryPenalty& pen, const Vec& de, double h0 = 1e-2) {
    const double J0 = fp_cost(ref, pen, Vec::Zero(de.size()));
    auto D = [&](double h) { return (fp_cost(ref, pen, h * de) - J0) / (h * h); };
    double D1 = D(h0), D2 = D(0.5 * h0), D4 = D(0.25 * h0);
    double R1 = 2.0 * D2 - D1, R2 = 2.0 * D4 - D2;
    return (4.0 * R2 - R1) / 3.0;
}

}  // namespace bbcert
