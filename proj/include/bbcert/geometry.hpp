#pragma once
// Single-chart geometry of T*R^n: brackets, Hamiltonian lifts and fields, and
// the symplectic pairing.
//
// Tangent vectors to T*R^n are stacked as (dp, dx), covector part first.
// With Omega = [[0, I], [-I, 0]] the two-form is sigma(u, v) = u^T Omega v, and
// the Hamiltonian field of G(l) = <p, g(x)> is (-p Dg, g). These choices give
// sigma(F, G) = <p, [f, g]> and dG(V) = sigma(V, G).

#include <stdexcept>
#include <vector>

#include "exprlang.hpp"

namespace bbcert {

struct CotangentPoint {
    Vec p;
    Vec x;
};

struct ControlAffineProblem {
    int n = 0;
    int m = 0;
    VectorFieldSpec f0;
    std::vector<VectorFieldSpec> f;  // f[s-1] is f_s
    ScalarFunction c0, cf;
    std::vector<ScalarFunction> N0, Nf;  // empty list means the whole space
    double T = 0.0;

    void validate() const {
        if (n <= 0 || m <= 0) throw std::invalid_argument("dimension and control count must be positive");
        if (static_cast<int>(f.size()) != m) throw std::invalid_argument("need one field per control");
        if (f0.dim() != n || c0.dim() != n || cf.dim() != n)
            throw std::invalid_argument("drift and costs must share the state dimension");
        for (const auto& g : f)
            if (g.dim() != n) throw std::invalid_argument("control fields must share the state dimension");
        for (const auto& c : N0)
            if (c.dim() != n) throw std::invalid_argument("initial constraints must share the state dimension");
        for (const auto& c : Nf)
            if (c.dim() != n) throw std::invalid_argument("final constraints must share the state dimension");
        if (!(T > 0.0)) throw std::invalid_argument("horizon must be positive");
    }
};

// Row i is the gradient of constraint i.
inline Mat constraint_jacobian(const std::vector<ScalarFunction>& cs, const Vec& x, int n) {
    Mat J(cs.size(), n);
    for (size_t i = 0; i < cs.size(); ++i) J.row(i) = cs[i].gradient(x).transpose();
    return J;
}

// Orthonormal basis (columns) of the kernel of J; J has n columns.
inline Mat kernel_basis(const Mat& J, int n, double rel_tol = 1e-10) {
    if (J.rows() == 0) return Mat::Identity(n, n);
    Eigen::JacobiSVD<Mat> svd(J, Eigen::ComputeFullV);
    const Vec& s = svd.singularValues();
    double smax = s.size() ? s[0] : 0.0;
    int rank = 0;
    for (int i = 0; i < s.size(); ++i)
        if (s[i] > rel_tol * std::max(1.0, smax)) ++rank;
    return svd.matrixV().rightCols(n - rank);
}

inline int numeric_rank(const Mat& J, double rel_tol = 1e-10) {
    if (J.rows() == 0 || J.cols() == 0) return 0;
    Eigen::JacobiSVD<Mat> svd(J);
    const Vec& s = svd.singularValues();
    int rank = 0;
    for (int i = 0; i < s.size(); ++i)
        if (s[i] > rel_tol * std::max(1.0, s[0])) ++rank;
    return rank;
}

inline Vec lie_bracket(const VectorFieldSpec& f, const VectorFieldSpec& g, const Vec& x) {
    return g.jacobian(x) * f.value(x) - f.jacobian(x) * g.value(x);
}

inline double hamiltonian_lift(const VectorFieldSpec& f, const CotangentPoint& l) {
    return l.p.dot(f.value(l.x));
}

inline CotangentPoint hamiltonian_vector_field(const VectorFieldSpec& f, const CotangentPoint& l) {
    return {-(l.p.transpose() * f.jacobian(l.x)).transpose(), f.value(l.x)};
}

inline double symplectic_pairing(const VectorFieldSpec& f, const VectorFieldSpec& g, const CotangentPoint& l) {
    return l.p.dot(lie_bracket(f, g, l.x));
}

// sigma on stacked tangent vectors (dp, dx) of length 2n.
inline double sigma(const Vec& u, const Vec& v) {
    const Eigen::Index n = u.size() / 2;
    return u.head(n).dot(v.tail(n)) - v.head(n).dot(u.tail(n));
}

// Omega with sigma(u, v) = u^T Omega v.
inline Mat omega_matrix(int n) {
    Mat O = Mat::Zero(2 * n, 2 * n);
    O.topRightCorner(n, n) = Mat::Identity(n, n);
    O.bottomLeftCorner(n, n) = -Mat::Identity(n, n);
    return O;
}

// The arc field k_u = f0 + sum_s u_s f_s for a fixed control vector u.
class ArcField {
public:
    ArcField() = default;
    // drift = 0 gives the plain combination sum_s u_s f_s (used for f_nu alone).
    ArcField(const ControlAffineProblem* pb, Vec u, double drift = 1.0)
        : pb_(pb), u_(std::move(u)), drift_(drift) {
        if (pb_->n > 16) throw std::invalid_argument("state dimension above 16 is not supported");
    }

    const Vec& control() const { return u_; }
    int dim() const { return pb_->n; }

    Vec value(const Vec& x) const {
        Vec v = drift_ * pb_->f0.value(x);
        for (int s = 0; s < pb_->m; ++s)
            if (u_[s] != 0.0) v += u_[s] * pb_->f[s].value(x);
        return v;
    }
    Mat jacobian(const Vec& x) const {
        Mat J = drift_ * pb_->f0.jacobian(x);
        for (int s = 0; s < pb_->m; ++s)
            if (u_[s] != 0.0) J += u_[s] * pb_->f[s].jacobian(x);
        return J;
    }
    void value(const double* x, double* out) const;
    void jacobian(const double* x, double* out_rowmajor) const;

private:
    const ControlAffineProblem* pb_ = nullptr;
    Vec u_;
    double drift_ = 1.0;
};

inline void ArcField::value(const double* x, double* out) const {
    const int n = pb_->n;
    pb_->f0.value(x, out);
    for (int i = 0; i < n; ++i) out[i] *= drift_;
    double buf[16];
    for (int s = 0; s < pb_->m; ++s) {
        if (u_[s] == 0.0) continue;
        pb_->f[s].value(x, buf);
        for (int i = 0; i < n; ++i) out[i] += u_[s] * buf[i];
    }
}

inline void ArcField::jacobian(const double* x, double* out) const {
    const int n = pb_->n;
    pb_->f0.jacobian(x, out);
    for (int k = 0; k < n * n; ++k) out[k] *= drift_;
    double buf[256];
    for (int s = 0; s < pb_->m; ++s) {
        if (u_[s] == 0.0) continue;
        pb_->f[s].jacobian(x, buf);
        for (int k = 0; k < n * n; ++k) out[k] += u_[s] * buf[k];
    }
}

template <class F, class G>
inline Vec bracket(const F& f, const G& g, const Vec& x) {
    return g.jacobian(x) * f.value(x) - f.jacobian(x) * g.value(x);
}

// Hamiltonian field of the lift of any object with value/jacobian.
template <class F>
inline Vec lifted_field(const F& f, const Vec& p, const Vec& x) {
    const Eigen::Index n = x.size();
    Vec out(2 * n);
    out.head(n) = -(p.transpose() * f.jacobian(x)).transpose();
    out.tail(n) = f.value(x);
    return out;
}

}  // namespace bbcert
