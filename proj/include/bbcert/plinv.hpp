#pragma once
// Continuous piecewise-linear maps on cone fans, their degree and the local
// invertibility of the maximized flow at every switching time.
//
// Tangent vectors to the Lagrangian manifold Lambda = graph(d alpha) are
// parametrized by dx: dl = (D^2 alpha dx, dx). Every map below acts on these
// coordinates and lands in the tangent space of M at the reference point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "flows.hpp"
#include "secondvar.hpp"

namespace bbcert {

class PlinvError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raised when a map violates the hypotheses of the test being applied.
class PlinvPrecondition : public PlinvError {
public:
    using PlinvError::PlinvError;
};

namespace detail {

inline Vec gaussian_vec(std::mt19937_64& rng, int d) {
    std::normal_distribution<double> N(0.0, 1.0);
    Vec v(d);
    for (int i = 0; i < d; ++i) v[i] = N(rng);
    return v;
}

inline Vec unit_vec(std::mt19937_64& rng, int d) {
    Vec v = gaussian_vec(rng, d);
    return v / v.norm();
}

// Orthonormal basis (columns) of the hyperplane v^perp.
inline Mat hyperplane_basis(const Vec& v) {
    const int d = static_cast<int>(v.size());
    Eigen::HouseholderQR<Mat> qr(v);
    Mat Qm = qr.householderQ() * Mat::Identity(d, d);
    return Qm.rightCols(d - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cones and piecewise-linear maps.

// {x : <v_k, x> >= 0 for all k}. Normals are stored normalized; zero normals
// impose nothing and are dropped. A unit interior point is kept.
class PolyhedralCone {
public:
    PolyhedralCone() = default;

    PolyhedralCone(int d, const std::vector<Vec>& normals, const std::optional<Vec>& hint = std::nullopt,
                   std::uint64_t seed = 7)
        : d_(d) {
        for (const Vec& v : normals) {
            if (v.size() != d) throw PlinvError("cone normal of wrong dimension");
            double nv = v.norm();
            if (nv > 0.0) normals_.push_back(v / nv);
        }
        find_interior(hint, seed);
    }

    int dimension() const { return d_; }
    const std::vector<Vec>& normals() const { return normals_; }
    const Vec& interior_point() const { return interior_; }
    // min_k <v_k, interior>: radius of a ball around the interior point inside the cone.
    double inradius() const { return inradius_; }

    // Smallest normalized margin min_k <v_k, x> / |x|; +inf without normals.
    double margin(const Vec& x) const {
        double m = INFINITY, nx = x.norm();
        if (nx == 0.0) return 0.0;
        for (const Vec& v : normals_) m = std::min(m, v.dot(x) / nx);
        return m;
    }
    // Closed membership.
    bool contains(const Vec& x, double tol = 1e-12) const { return margin(x) >= -tol; }
    bool interior_contains(const Vec& x, double tol = 1e-12) const { return margin(x) > tol; }

    // A random point strictly inside, of unit scale.
    Vec random_interior(std::mt19937_64& rng) const {
        Vec u = detail::unit_vec(rng, d_);
        std::uniform_real_distribution<double> U(0.0, 0.9);
        double r = std::isfinite(inradius_) ? inradius_ * U(rng) : 1.0;
        return interior_ + r * u;
    }

private:
    int d_ = 0;
    std::vector<Vec> normals_;
    Vec interior_;
    double inradius_ = INFINITY;

    double unit_margin(const Vec& x) const {
        double m = INFINITY;
        for (const Vec& v : normals_) m = std::min(m, v.dot(x));
        return m;
    }

    // Maximizes min_k <v_k, x> over the unit sphere: best of a few seeds and
    // random directions, then projected subgradient ascent.
    void find_interior(const std::optional<Vec>& hint, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::vector<Vec> cand;
        if (hint && hint->norm() > 0.0) cand.push_back(*hint / hint->norm());
        if (!normals_.empty()) {
            Vec s = Vec::Zero(d_);
            for (const Vec& v : normals_) s += v;
            if (s.norm() > 0.0) cand.push_back(s / s.norm());
        }
        for (int i = 0; i < 4000; ++i) cand.push_back(detail::unit_vec(rng, d_));
        Vec best = cand.front();
        double bm = unit_margin(best);
        for (const Vec& c : cand) {
            double m = unit_margin(c);
            if (m > bm) {
                bm = m;
                best = c;
            }
        }
        if (!normals_.empty()) {
            double step = 0.1;
            for (int it = 0; it < 400; ++it) {
                int arg = 0;
                double m = INFINITY;
                for (size_t k = 0; k < normals_.size(); ++k) {
                    double t = normals_[k].dot(best);
                    if (t < m) {
                        m = t;
                        arg = static_cast<int>(k);
                    }
                }
                Vec trial = best + step * normals_[arg];
                trial /= trial.norm();
                if (unit_margin(trial) > m)
                    best = trial;
                else
                    step *= 0.7;
            }
            bm = unit_margin(best);
        }
        if (!(bm > 1e-12)) throw PlinvError("polyhedral cone has empty interior");
        interior_ = best;
        inradius_ = normals_.empty() ? INFINITY : bm;
    }
};

struct FacetCheck {
    double max_residual = 0.0;  // max |L_i x - L_j x| / |x| over shared facet samples
    int facets = 0;             // cone pairs with a sampled common facet
    int samples = 0;
};

class PiecewiseLinearMap {
public:
    PiecewiseLinearMap() = default;
    PiecewiseLinearMap(int d, std::vector<PolyhedralCone> cones, std::vector<Mat> pieces, std::vector<std::string> names = {})
        : d_(d), cones_(std::move(cones)), L_(std::move(pieces)), names_(std::move(names)) {
        if (cones_.size() != L_.size() || cones_.empty()) throw PlinvError("piecewise-linear map needs one matrix per cone");
        for (const Mat& L : L_)
            if (L.rows() != d_ || L.cols() != d_) throw PlinvError("piece of wrong size");
        if (names_.size() != L_.size()) {
            names_.clear();
            for (size_t i = 0; i < L_.size(); ++i) names_.push_back("S" + std::to_string(i + 1));
        }
    }

    int dimension() const { return d_; }
    int pieces() const { return static_cast<int>(L_.size()); }
    const PolyhedralCone& cone(int i) const { return cones_[i]; }
    const Mat& piece(int i) const { return L_[i]; }
    const std::string& name(int i) const { return names_[i]; }

    std::vector<double> determinants() const {
        std::vector<double> d;
        for (const Mat& L : L_) d.push_back(L.determinant());
        return d;
    }

    // Index of the first cone containing x, or -1.
    int locate(const Vec& x, double tol = 1e-12) const {
        for (int i = 0; i < pieces(); ++i)
            if (cones_[i].contains(x, tol)) return i;
        return -1;
    }
    Vec operator()(const Vec& x) const {
        int i = locate(x, 1e-9);
        if (i < 0) throw PlinvError("point outside every cone");
        return L_[i] * x;
    }

    // Samples each hyperplane carrying a normal of some cone, keeps points lying
    // in two cones at once, and compares the two pieces there.
    FacetCheck continuity(std::mt19937_64& rng, int per_facet = 50) const {
        FacetCheck fc;
        const double tol = 1e-10;
        for (int i = 0; i < pieces(); ++i) {
            for (int j = i + 1; j < pieces(); ++j) {
                int got = 0;
                for (const Vec& v : cones_[i].normals()) {
                    Mat B = detail::hyperplane_basis(v);
                    for (int tries = 0; tries < 40 * per_facet && got < per_facet; ++tries) {
                        Vec x = B * detail::unit_vec(rng, d_ - 1);
                        if (!cones_[i].contains(x, tol) || !cones_[j].contains(x, tol)) continue;
                        double r = (L_[i] * x - L_[j] * x).norm() / x.norm();
                        fc.max_residual = std::max(fc.max_residual, r);
                        ++got;
                    }
                    if (got >= per_facet) break;
                }
                if (got > 0) {
                    ++fc.facets;
                    fc.samples += got;
                }
            }
        }
        return fc;
    }

    // Fraction of random directions lying in at least one cone.
    double covering(std::mt19937_64& rng, int samples = 1000) const {
        int hit = 0;
        for (int s = 0; s < samples; ++s)
            if (locate(detail::unit_vec(rng, d_)) >= 0) ++hit;
        return static_cast<double>(hit) / samples;
    }

private:
    int d_ = 0;
    std::vector<PolyhedralCone> cones_;
    std::vector<Mat> L_;
    std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Pairs of linear maps glued along a hyperplane.

struct PairVerdict {
    bool invertible = false;
    double detA = 0.0, detB = 0.0;
    double agreement = 0.0;  // max |(A - B) e| over an orthonormal basis of v^perp
};

namespace detail {

inline double hyperplane_disagreement(const Mat& A, const Mat& B, const Vec& v) {
    if (A.rows() != A.cols() || A.rows() != B.rows() || B.rows() != B.cols() || v.size() != A.rows())
        throw PlinvError("matrix pair of inconsistent size");
    if (v.norm() == 0.0) throw PlinvPrecondition("zero hyperplane normal");
    if (A.rows() == 1) return 0.0;
    return ((A - B) * hyperplane_basis(v)).cwiseAbs().maxCoeff();
}

inline void require_agreement(const Mat& A, const Mat& B, const Vec& v, double& out) {
    out = hyperplane_disagreement(A, B, v);
    double scale = std::max({1.0, A.cwiseAbs().maxCoeff(), B.cwiseAbs().maxCoeff()});
    if (out > 1e-10 * scale) throw PlinvPrecondition("maps disagree on the common hyperplane");
}

}  // namespace detail

// The map x -> A x on <v,x> >= 0, B x on <v,x> <= 0 is a homeomorphism iff
// det A det B > 0.
inline PairVerdict hyperplane_pair_invertible(const Mat& A, const Mat& B, const Vec& v) {
    PairVerdict r;
    detail::require_agreement(A, B, v, r.agreement);
    r.detA = A.determinant();
    r.detB = B.determinant();
    r.invertible = r.detA * r.detB > 0.0;
    return r;
}

// |det(tA + (1-t)B) - t det A - (1-t) det B|; the determinant is affine in t
// because A - B has rank one.
inline double det_convex_identity(const Mat& A, const Mat& B, const Vec& v, double t) {
    double dis = 0.0;
    detail::require_agreement(A, B, v, dis);
    Mat C = t * A + (1.0 - t) * B;
    return std::fabs(C.determinant() - t * A.determinant() - (1.0 - t) * B.determinant());
}

// ---------------------------------------------------------------------------
// Degree and preimages.

struct Preimage {
    Vec point;
    std::vector<int> cones;  // every cone containing the point (closed, tolerance)
};

// All preimages of y: per-cone solves kept when the solution lies in the cone.
inline std::vector<Preimage> preimages(const PiecewiseLinearMap& G, const Vec& y, double tol = 1e-12) {
    std::vector<Preimage> out;
    for (int i = 0; i < G.pieces(); ++i) {
        Eigen::FullPivLU<Mat> lu(G.piece(i));
        if (!lu.isInvertible()) throw PlinvPrecondition("singular piece " + G.name(i));
        Vec z = lu.solve(y);
        if (!G.cone(i).contains(z, tol)) continue;
        bool merged = false;
        for (Preimage& p : out) {
            if ((p.point - z).norm() <= 1e-9 * std::max(1e-300, z.norm())) {
                p.cones.push_back(i);
                merged = true;
                break;
            }
        }
        if (!merged) out.push_back({z, {i}});
    }
    return out;
}

struct DegreeResult {
    int degree = 0;
    int preimage_count = 0;
    int retries = 0;
    Vec probe;
};

// Degree at a regular value: a probe L_1 x with x random inside S_1, accepted
// when no per-cone solution lies within the boundary band of its cone.
inline DegreeResult plm_degree(const PiecewiseLinearMap& G, std::uint64_t seed = 1, int max_retries = 100) {
    const auto dets = G.determinants();
    for (int i = 0; i < G.pieces(); ++i)
        if (!(std::fabs(dets[i]) > 0.0)) throw PlinvPrecondition("singular piece " + G.name(i));
    std::mt19937_64 rng(seed);
    const double band = 1e-9, tol = 1e-12;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        Vec y = G.piece(0) * G.cone(0).random_interior(rng);
        DegreeResult r;
        r.probe = y;
        r.retries = attempt;
        bool regular = true;
        for (int i = 0; i < G.pieces() && regular; ++i) {
            Vec z = G.piece(i).fullPivLu().solve(y);
            double m = G.cone(i).margin(z);
            if (m > tol && m < band) regular = false;
            if (std::fabs(m) <= tol) regular = false;
            if (m > tol) {
                ++r.preimage_count;
                r.degree += dets[i] > 0.0 ? 1 : -1;
            }
        }
        if (regular) return r;
    }
    throw PlinvError("no regular probe value found");
}

struct HomeoCertificate {
    enum Status { Granted, Inconclusive };
    Status status = Inconclusive;
    int preimage_count = 0;
    int cones_at_preimage = 0;
    Vec probe;             // the value whose preimage was enumerated
    double expansion_slope = NAN;  // fitted order of the first-order remainder, if f was given
    std::string message;
};

// Order p of the remainder |f(x0 + h) - f(x0) - F(h)| ~ |h|^p, fitted on
// random directions at radii 1e-1 .. 1e-1/32.
inline double expansion_order(const std::function<Vec(const Vec&)>& f, const Vec& x0, const PiecewiseLinearMap& F,
                              std::uint64_t seed = 3) {
    std::mt19937_64 rng(seed);
    const int d = F.dimension();
    std::vector<Vec> dirs;
    for (int k = 0; k < 10; ++k) dirs.push_back(detail::unit_vec(rng, d));
    const Vec f0 = f(x0);
    std::vector<double> lr, le;
    double worst = 0.0;
    for (int s = 0; s < 6; ++s) {
        double r = 1e-1 / std::pow(2.0, s);
        double e = 0.0;
        for (const Vec& u : dirs) e = std::max(e, (f(x0 + r * u) - f0 - F(r * u)).norm());
        worst = std::max(worst, e / r);
        lr.push_back(std::log(r));
        le.push_back(std::log(std::max(e, 1e-300)));
    }
    if (worst <= 1e-12) return INFINITY;
    double mx = 0, my = 0;
    for (size_t i = 0; i < lr.size(); ++i) {
        mx += lr[i];
        my += le[i];
    }
    mx /= lr.size();
    my /= lr.size();
    double sxy = 0, sxx = 0;
    for (size_t i = 0; i < lr.size(); ++i) {
        sxy += (lr[i] - mx) * (le[i] - my);
        sxx += (lr[i] - mx) * (lr[i] - mx);
    }
    return sxy / sxx;
}

// Granted when some value has a single preimage lying in at most two cones;
// with every piece orientation preserving this forces degree one. The
// supplied probe point is tried first, then images of random interior points.
inline HomeoCertificate local_homeo_certificate(const PiecewiseLinearMap& F, const std::optional<Vec>& probe_point = std::nullopt,
                                                const std::function<Vec(const Vec&)>& f = nullptr,
                                                const std::optional<Vec>& x0 = std::nullopt, std::uint64_t seed = 5,
                                                int max_probes = 100) {
    for (int i = 0; i < F.pieces(); ++i)
        if (!(F.piece(i).determinant() > 0.0)) throw PlinvPrecondition("piece " + F.name(i) + " is not orientation preserving");
    HomeoCertificate c;
    if (f) {
        c.expansion_slope = expansion_order(f, x0 ? *x0 : Vec::Zero(F.dimension()), F, seed);
        if (!(c.expansion_slope > 1.5)) {
            c.message = "first-order expansion residual does not vanish faster than |x - x0|";
            return c;
        }
    }
    std::mt19937_64 rng(seed);
    for (int k = 0; k <= max_probes; ++k) {
        Vec y;
        if (k == 0 && probe_point) {
            y = F(*probe_point);
        } else {
            int i = std::uniform_int_distribution<int>(0, F.pieces() - 1)(rng);
            y = F.piece(i) * F.cone(i).random_interior(rng);
        }
        auto pre = preimages(F, y);
        c.probe = y;
        c.preimage_count = static_cast<int>(pre.size());
        c.cones_at_preimage = pre.size() == 1 ? static_cast<int>(pre[0].cones.size()) : 0;
        if (pre.size() == 1 && pre[0].cones.size() <= 2) {
            c.status = HomeoCertificate::Granted;
            c.message = k == 0 && probe_point ? "singleton preimage at the supplied probe" : "singleton preimage at a random probe";
            return c;
        }
    }
    c.message = "no probe value with a singleton preimage";
    return c;
}

// ---------------------------------------------------------------------------
// Linearizations of the maximized flow at the switching times.

struct SwitchLinearization {
    enum Kind { PreDouble, Double, PostDouble };
    Kind kind = PreDouble;
    int j = 0;  // simple-switch index within its side
    std::string label;
    double time = 0.0;
    Mat M;      // transition of the reference flow at the switch
    // PreDouble: pieces {A, B}, normal {dtheta_0j}.
    // Double: pieces {L0, L11, L21, L12, L22}, normals {dtau1, dtau2, dtheta^1_10, dtheta^2_10}.
    // PostDouble: pieces {A1, A2, B1, B2}, normals {dtau1, dtau2, dtheta^1_1j, dtheta^2_1j}.
    std::vector<Mat> pieces;
    std::vector<std::string> names;
    std::vector<Vec> normals;  // switching-time gradients restricted to Lambda
    // |d(tau1 - tau2)|_Lambda| / |dtau1|_Lambda|; NaN for pre-double switches.
    double degeneracy = NAN;
    bool degenerate = false;
    std::optional<PiecewiseLinearMap> map;  // the cone fan, absent on degenerate branches
};

namespace detail {

inline PolyhedralCone cone(int n, std::vector<Vec> normals, std::uint64_t seed) {
    return PolyhedralCone(n, normals, std::nullopt, seed);
}

}  // namespace detail

// Builds the linearization at switch `which`, counted in time order over
// theta_01..theta_0J0, tau, theta_11..theta_1J1.
inline SwitchLinearization build_switch_linearization(const Reference& ref, const SwitchingGradients& gr,
                                                      const BoundaryPenalty& pen, int which,
                                                      double degenerate_rel = 1e-8) {
    const auto& sc = ref.schedule();
    const int n = ref.n();
    if (which < 0 || which > sc.J0 + sc.J1) throw PlinvError("switch index out of range");
    Mat Ja(2 * n, n);
    Ja.topRows(n) = pen.d2alpha();
    Ja.bottomRows(n) = Mat::Identity(n, n);
    // pi D dalpha_* in dx coordinates, pushed to the switch by M.
    auto push = [&](const Mat& Mt, const Mat& D) { return Mat(Mt * D.bottomRows(n) * Ja); };
    auto restrict = [&](const Vec& row) { return Vec(Ja.transpose() * row); };

    SwitchLinearization s;
    if (which < sc.J0) {
        const int j = which + 1;
        s.kind = SwitchLinearization::PreDouble;
        s.j = j;
        s.label = "theta_0" + std::to_string(j);
        s.time = sc.theta0[j - 1];
        s.M = ref.node_M(j);
        s.pieces = {push(s.M, gr.Delta0[j - 1]), push(s.M, gr.Delta0[j])};
        s.names = {"A", "B"};
        s.normals = {restrict(gr.dtheta0[j - 1])};
        if (s.normals[0].norm() > 0.0) {
            s.map.emplace(n,
                          std::vector<PolyhedralCone>{detail::cone(n, {s.normals[0]}, 11 + j),
                                                      detail::cone(n, {Vec(-s.normals[0])}, 13 + j)},
                          s.pieces, s.names);
        }
        return s;
    }

    const Vec t1 = restrict(gr.dtau[0]), t2 = restrict(gr.dtau[1]);
    s.degeneracy = (t1 - t2).norm() / std::max(t1.norm(), 1e-300);
    s.degenerate = t1.norm() == 0.0 || (t1 - t2).norm() < degenerate_rel * t1.norm();

    if (which == sc.J0) {
        s.kind = SwitchLinearization::Double;
        s.label = "tau";
        s.time = sc.tau;
        s.M = ref.node_M(sc.J0 + 1);
        const Mat& DJ = gr.Delta0.back();
        const Vec& GJ = gr.G0.back();
        Mat D11 = DJ - (gr.H[0] - GJ) * gr.dtau[0].transpose();
        Mat D21 = DJ - (gr.H[1] - GJ) * gr.dtau[1].transpose();
        s.pieces = {push(s.M, DJ), push(s.M, D11), push(s.M, D21), push(s.M, gr.Delta1[0][0]),
                    push(s.M, gr.Delta1[1][0])};
        s.names = {"L0", "L11", "L21", "L12", "L22"};
        const Vec h1 = restrict(gr.dtheta10[0]), h2 = restrict(gr.dtheta10[1]);
        s.normals = {t1, t2, h1, h2};
        if (!s.degenerate) {
            std::vector<PolyhedralCone> cones{
                detail::cone(n, {t1, t2}, 21),
                detail::cone(n, {Vec(-t1), h1, Vec(t2 - t1)}, 22),
                detail::cone(n, {Vec(-t2), h2, Vec(t1 - t2)}, 23),
                detail::cone(n, {Vec(h1 - t1), Vec(-h1), Vec(t2 - t1)}, 24),
                detail::cone(n, {Vec(h2 - t2), Vec(-h2), Vec(t1 - t2)}, 25),
            };
            s.map.emplace(n, std::move(cones), s.pieces, s.names);
        }
        return s;
    }

    const int j = which - sc.J0;
    s.kind = SwitchLinearization::PostDouble;
    s.j = j;
    s.label = "theta_1" + std::to_string(j);
    s.time = sc.theta1[j - 1];
    s.M = ref.node_M(sc.J0 + 1 + j);
    s.pieces = {push(s.M, gr.Delta1[0][j - 1]), push(s.M, gr.Delta1[1][j - 1]), push(s.M, gr.Delta1[0][j]),
                push(s.M, gr.Delta1[1][j])};
    s.names = {"A1", "A2", "B1", "B2"};
    const Vec q1 = restrict(gr.dtheta1[0][j - 1]), q2 = restrict(gr.dtheta1[1][j - 1]);
    s.normals = {t1, t2, q1, q2};
    if (!s.degenerate) {
        std::vector<PolyhedralCone> cones{
            detail::cone(n, {Vec(t2 - t1), q1}, 31),
            detail::cone(n, {Vec(t1 - t2), q2}, 32),
            detail::cone(n, {Vec(t2 - t1), Vec(-q1)}, 33),
            detail::cone(n, {Vec(t1 - t2), Vec(-q2)}, 34),
        };
        s.map.emplace(n, std::move(cones), s.pieces, s.names);
    }
    return s;
}

inline std::vector<SwitchLinearization> build_switch_linearizations(const Reference& ref, const SwitchingGradients& gr,
                                                                    const BoundaryPenalty& pen,
                                                                    double degenerate_rel = 1e-8) {
    std::vector<SwitchLinearization> v;
    const auto& sc = ref.schedule();
    for (int w = 0; w <= sc.J0 + sc.J1; ++w) v.push_back(build_switch_linearization(ref, gr, pen, w, degenerate_rel));
    return v;
}

// ---------------------------------------------------------------------------
// Invertibility verdicts.

enum class Invertibility { Invertible, NotInvertible, Inconclusive };

inline const char* to_string(Invertibility v) {
    switch (v) {
        case Invertibility::Invertible: return "invertible";
        case Invertibility::NotInvertible: return "not-invertible";
        default: return "inconclusive";
    }
}

struct SwitchVerdict {
    std::string label;
    std::string route;  // lemalg, differentiable, topological-degree, clarke-hull
    Invertibility status = Invertibility::Inconclusive;
    std::vector<double> determinants;  // per piece, target orientation fixed by the first piece
    double min_hull_determinant = NAN; // smallest normalized determinant over the sampled hull / convex path
    int preimages = 0;
    std::uint64_t seed = 0;
    std::string message;
};

struct InvertibilityReport {
    std::vector<SwitchVerdict> switches;
    Invertibility aggregate = Invertibility::Invertible;
    std::uint64_t seed = 0;
};

// Invertible only if every switch is; any inconclusive switch makes the whole
// verdict inconclusive.
inline Invertibility aggregate_invertibility(const std::vector<SwitchVerdict>& v) {
    bool inconclusive = false, failed = false;
    for (const auto& s : v) {
        inconclusive |= s.status == Invertibility::Inconclusive;
        failed |= s.status == Invertibility::NotInvertible;
    }
    if (inconclusive) return Invertibility::Inconclusive;
    return failed ? Invertibility::NotInvertible : Invertibility::Invertible;
}

namespace detail {

inline std::vector<double> dets_of(const std::vector<Mat>& P) {
    std::vector<double> d;
    for (const Mat& L : P) d.push_back(L.determinant());
    return d;
}

// Determinants of (P0)^{-1} (sum t_i P_i) at the vertices and at random convex
// weights; the minimum is returned.
inline double hull_min_determinant(const std::vector<Mat>& P, std::mt19937_64& rng, int random_points) {
    Eigen::FullPivLU<Mat> lu(P[0]);
    if (!lu.isInvertible()) return 0.0;
    std::vector<Mat> R;
    for (const Mat& L : P) R.push_back(lu.solve(L));
    double mn = INFINITY;
    for (const Mat& Ri : R) mn = std::min(mn, Ri.determinant());
    std::exponential_distribution<double> E(1.0);
    for (int s = 0; s < random_points; ++s) {
        std::vector<double> w(P.size());
        double tot = 0.0;
        for (double& x : w) tot += (x = E(rng));
        Mat C = Mat::Zero(P[0].rows(), P[0].cols());
        for (size_t i = 0; i < P.size(); ++i) C += (w[i] / tot) * R[i];
        mn = std::min(mn, C.determinant());
    }
    return mn;
}

}  // namespace detail

inline SwitchVerdict check_switch(const SwitchLinearization& s, std::uint64_t seed) {
    SwitchVerdict v;
    v.label = s.label;
    v.seed = seed;
    std::mt19937_64 rng(seed);
    // Fix the target orientation so that the first piece preserves it.
    std::vector<Mat> P = s.pieces;
    if (P[0].determinant() < 0.0)
        for (Mat& L : P) L.row(0) *= -1.0;
    v.determinants = detail::dets_of(P);
    for (double d : v.determinants) {
        if (!(std::fabs(d) > 0.0)) {
            v.status = Invertibility::NotInvertible;
            v.route = "determinants";
            v.message = "singular linearization";
            return v;
        }
    }

    if (s.kind == SwitchLinearization::PreDouble) {
        const Vec& nrm = s.normals[0];
        if (nrm.norm() == 0.0) {
            v.route = "differentiable";
            v.status = Invertibility::Invertible;
            v.message = "switching time constant on Lambda: A = B";
            return v;
        }
        v.route = "lemalg";
        PairVerdict pv;
        try {
            pv = hyperplane_pair_invertible(P[0], P[1], nrm);
        } catch (const PlinvPrecondition& e) {
            v.message = e.what();
            return v;
        }
        // Monotone determinant along the segment tA + (1-t)B.
        double mn = INFINITY;
        for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            Mat C = t * P[0] + (1.0 - t) * P[1];
            mn = std::min(mn, pv.detA * C.determinant() / (pv.detA * pv.detA));
        }
        v.min_hull_determinant = mn;
        v.status = pv.invertible && mn > 0.0 ? Invertibility::Invertible : Invertibility::NotInvertible;
        v.message = pv.invertible ? "orientations agree" : "orientations differ across the switching hyperplane";
        return v;
    }

    if (s.degenerate) {
        v.route = "clarke-hull";
        v.min_hull_determinant = detail::hull_min_determinant(P, rng, 20);
        v.status = v.min_hull_determinant > 0.0 ? Invertibility::Invertible : Invertibility::NotInvertible;
        v.message = v.status == Invertibility::Invertible ? "generalized Jacobian of maximal rank"
                                                          : "generalized Jacobian contains a singular element";
        return v;
    }

    v.route = "topological-degree";
    for (double d : v.determinants) {
        if (d < 0.0) {
            v.status = Invertibility::NotInvertible;
            v.message = "pieces with opposite orientation";
            return v;
        }
    }
    std::vector<PolyhedralCone> cones;
    for (int i = 0; i < s.map->pieces(); ++i) cones.push_back(s.map->cone(i));
    const PiecewiseLinearMap F(s.map->dimension(), std::move(cones), P, s.names);
    // Probe on the diagonal <dtau1, dl> = <dtau2, dl> > 0.
    std::optional<Vec> probe;
    {
        const Vec &t1 = s.normals[0], &t2 = s.normals[1];
        Mat C(2, t1.size());
        C.row(0) = (t1 - t2).transpose();
        C.row(1) = t1.transpose();
        Vec rhs(2);
        rhs << 0.0, 1.0;
        Vec z = C.completeOrthogonalDecomposition().solve(rhs);
        if ((C * z - rhs).norm() < 1e-10) probe = z;
    }
    try {
        HomeoCertificate hc = local_homeo_certificate(F, probe, nullptr, std::nullopt, seed);
        v.preimages = hc.preimage_count;
        v.status = hc.status == HomeoCertificate::Granted ? Invertibility::Invertible : Invertibility::Inconclusive;
        v.message = hc.message;
    } catch (const PlinvError& e) {
        v.status = Invertibility::Inconclusive;
        v.message = e.what();
    }
    return v;
}

inline InvertibilityReport flow_invertibility_check(const std::vector<SwitchLinearization>& lins, std::uint64_t seed = 12345) {
    InvertibilityReport r;
    r.seed = seed;
    for (size_t i = 0; i < lins.size(); ++i)
        r.switches.push_back(check_switch(lins[i], seed + 0x9E3779B97F4A7C15ULL * (i + 1)));
    r.aggregate = aggregate_invertibility(r.switches);
    return r;
}

inline InvertibilityReport flow_invertibility_check(const Reference& ref, const SwitchingGradients& gr,
                                                    const BoundaryPenalty& pen, const CertifyOptions& opt = {}) {
    return flow_invertibility_check(build_switch_linearizations(ref, gr, pen, opt.degenerate_rel), opt.seed);
}

}  // namespace bbcert
