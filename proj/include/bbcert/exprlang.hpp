#pragma once
// Scalar expression language: parse, print, evaluate, differentiate.
//
// Trees are immutable and shared; every derivative is exact and constant-folded.

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace bbcert {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& msg, int line, int column)
        : std::runtime_error(msg + " at line " + std::to_string(line) + ", column " +
                             std::to_string(column)),
          line_(line), column_(column) {}
    int line() const { return line_; }
    int column() const { return column_; }

private:
    int line_;
    int column_;
};

class DomainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Op { Const, Var, Neg, Sin, Cos, Exp, Log, Sqrt, Add, Sub, Mul, Div, Pow };

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
    Op op;
    double value = 0.0;  // Const
    int index = 0;       // Var: 1-based variable; Pow: integer exponent
    NodePtr a, b;
};

std::string print(const NodePtr& e);

namespace detail {

inline NodePtr make(Op op, NodePtr a = nullptr, NodePtr b = nullptr, double v = 0.0, int idx = 0) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->value = v;
    n->index = idx;
    n->a = std::move(a);
    n->b = std::move(b);
    return n;
}

inline bool is_const(const NodePtr& e, double v) { return e->op == Op::Const && e->value == v; }
inline bool is_const(const NodePtr& e) { return e->op == Op::Const; }

}  // namespace detail

// Smart constructors. They fold constant subtrees and drop additive zeros and
// multiplicative ones; no other rewriting happens.
inline NodePtr constant(double v) { return detail::make(Op::Const, nullptr, nullptr, v); }
inline NodePtr variable(int i) { return detail::make(Op::Var, nullptr, nullptr, 0.0, i); }

inline NodePtr neg(NodePtr a) {
    if (detail::is_const(a)) return constant(-a->value);
    return detail::make(Op::Neg, std::move(a));
}

inline NodePtr add(NodePtr a, NodePtr b) {
    if (detail::is_const(a) && detail::is_const(b)) return constant(a->value + b->value);
    if (detail::is_const(a, 0.0)) return b;
    if (detail::is_const(b, 0.0)) return a;
    return detail::make(Op::Add, std::move(a), std::move(b));
}

inline NodePtr sub(NodePtr a, NodePtr b) {
    if (detail::is_const(a) && detail::is_const(b)) return constant(a->value - b->value);
    if (detail::is_const(b, 0.0)) return a;
    if (detail::is_const(a, 0.0)) return neg(std::move(b));
    return detail::make(Op::Sub, std::move(a), std::move(b));
}

inline NodePtr mul(NodePtr a, NodePtr b) {
    if (detail::is_const(a) && detail::is_const(b)) return constant(a->value * b->value);
    if (detail::is_const(a, 0.0) || detail::is_const(b, 0.0)) return constant(0.0);
    if (detail::is_const(a, 1.0)) return b;
    if (detail::is_const(b, 1.0)) return a;
    return detail::make(Op::Mul, std::move(a), std::move(b));
}

inline NodePtr div(NodePtr a, NodePtr b) {
    if (detail::is_const(a) && detail::is_const(b) && b->value != 0.0)
        return constant(a->value / b->value);
    if (detail::is_const(a, 0.0) && !detail::is_const(b, 0.0)) return constant(0.0);
    if (detail::is_const(b, 1.0)) return a;
    return detail::make(Op::Div, std::move(a), std::move(b));
}

inline NodePtr pow(NodePtr a, int k) {
    if (k == 0) return constant(1.0);
    if (k == 1) return a;
    if (detail::is_const(a)) return constant(std::pow(a->value, k));
    return detail::make(Op::Pow, std::move(a), nullptr, 0.0, k);
}

inline NodePtr unary(Op op, NodePtr a) {
    if (detail::is_const(a)) {
        double v = a->value;
        switch (op) {
            case Op::Sin: return constant(std::sin(v));
            case Op::Cos: return constant(std::cos(v));
            case Op::Exp: return constant(std::exp(v));
            case Op::Log:
                if (v > 0.0) return constant(std::log(v));
                break;
            case Op::Sqrt:
                if (v >= 0.0) return constant(std::sqrt(v));
                break;
            default: break;
        }
    }
    if (op == Op::Neg) return neg(std::move(a));
    return detail::make(op, std::move(a));
}

inline bool equal(const NodePtr& x, const NodePtr& y) {
    if (x == y) return true;
    if (!x || !y) return false;
    if (x->op != y->op) return false;
    switch (x->op) {
        case Op::Const: return x->value == y->value;
        case Op::Var: return x->index == y->index;
        case Op::Pow: return x->index == y->index && equal(x->a, y->a);
        default: return equal(x->a, y->a) && equal(x->b, y->b);
    }
}

inline int max_variable(const NodePtr& e) {
    if (!e) return 0;
    if (e->op == Op::Var) return e->index;
    return std::max(max_variable(e->a), max_variable(e->b));
}

// ---------------------------------------------------------------------------
// Parser. Recursive descent over the grammar
//   expr := term (('+'|'-') term)*
//   term := factor (('*'|'/') factor)*
//   factor := base ('^' int)?
//   base := number | 'x' int | func '(' expr ')' | '(' expr ')' | '-' base

namespace detail {

class Parser {
public:
    Parser(std::string_view src, int n) : s_(src), n_(n) {}

    NodePtr run() {
        NodePtr e = expr();
        skip();
        if (pos_ != s_.size()) fail("unexpected character '" + std::string(1, s_[pos_]) + "'");
        return e;
    }

private:
    std::string_view s_;
    int n_;
    size_t pos_ = 0;

    [[noreturn]] void fail(const std::string& msg) const { fail_at(msg, pos_); }

    [[noreturn]] void fail_at(const std::string& msg, size_t at) const {
        int line = 1, col = 1;
        for (size_t i = 0; i < at && i < s_.size(); ++i) {
            if (s_[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ParseError(msg, line, col);
    }

    void skip() {
        while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }

    bool eat(char c) {
        skip();
        if (pos_ < s_.size() && s_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    NodePtr expr() {
        NodePtr lhs = term();
        for (;;) {
            if (eat('+'))
                lhs = detail::make(Op::Add, lhs, term());
            else if (eat('-'))
                lhs = detail::make(Op::Sub, lhs, term());
            else
                return lhs;
        }
    }

    NodePtr term() {
        NodePtr lhs = factor();
        for (;;) {
            if (eat('*'))
                lhs = detail::make(Op::Mul, lhs, factor());
            else if (eat('/'))
                lhs = detail::make(Op::Div, lhs, factor());
            else
                return lhs;
        }
    }

    NodePtr factor() {
        NodePtr b = base();
        if (eat('^')) {
            skip();
            size_t start = pos_;
            while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
            if (start == pos_) fail("expected integer exponent");
            int k = std::stoi(std::string(s_.substr(start, pos_ - start)));
            return detail::make(Op::Pow, b, nullptr, 0.0, k);
        }
        return b;
    }

    NodePtr base() {
        skip();
        if (pos_ >= s_.size()) fail("unexpected end of input");
        char c = s_[pos_];
        if (c == '-') {
            ++pos_;
            return detail::make(Op::Neg, base());
        }
        if (c == '(') {
            ++pos_;
            NodePtr e = expr();
            if (!eat(')')) fail("expected ')'");
            return e;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number();
        if (std::isalpha(static_cast<unsigned char>(c))) {
            size_t start = pos_;
            while (pos_ < s_.size() && std::isalnum(static_cast<unsigned char>(s_[pos_]))) ++pos_;
            std::string word(s_.substr(start, pos_ - start));
            if (word.size() > 1 && word[0] == 'x' &&
                word.find_first_not_of("0123456789", 1) == std::string::npos) {
                int i = std::stoi(word.substr(1));
                if (i < 1 || i > n_)
                    fail_at("variable index out of range: " + word + " (dimension " +
                                std::to_string(n_) + ")",
                            start);
                return variable(i);
            }
            Op op;
            if (word == "sin")
                op = Op::Sin;
            else if (word == "cos")
                op = Op::Cos;
            else if (word == "exp")
                op = Op::Exp;
            else if (word == "log")
                op = Op::Log;
            else if (word == "sqrt")
                op = Op::Sqrt;
            else
                fail_at("unknown identifier '" + word + "'", start);
            if (!eat('(')) fail("expected '(' after " + word);
            NodePtr arg = expr();
            if (!eat(')')) fail("expected ')'");
            return detail::make(op, arg);
        }
        fail("unexpected character '" + std::string(1, c) + "'");
    }

    NodePtr number() {
        size_t start = pos_;
        while (pos_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.'))
            ++pos_;
        if (pos_ < s_.size() && (s_[pos_] == 'e' || s_[pos_] == 'E')) {
            size_t save = pos_;
            ++pos_;
            if (pos_ < s_.size() && (s_[pos_] == '+' || s_[pos_] == '-')) ++pos_;
            size_t digits = pos_;
            while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
            if (digits == pos_) pos_ = save;
        }
        std::string text(s_.substr(start, pos_ - start));
        size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(text, &used);
        } catch (const std::exception&) {
            fail_at("malformed number '" + text + "'", start);
        }
        if (used != text.size()) fail_at("malformed number '" + text + "'", start);
        return constant(v);
    }
};

}  // namespace detail

inline NodePtr parse_expr(std::string_view source, int n) { return detail::Parser(source, n).run(); }

// Fully parenthesised, so parse(print(e)) rebuilds any tree the parser produced.
// Folded negative constants print as "(-c)" and reparse as neg(c).
inline std::string print(const NodePtr& e) {
    switch (e->op) {
        case Op::Const: {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", std::fabs(e->value));
            std::string s(buf);
            if (s.find_first_of(".en") == std::string::npos) s += ".0";
            if (std::signbit(e->value)) return "(-" + s + ")";
            return s;
        }
        case Op::Var: return "x" + std::to_string(e->index);
        case Op::Neg: return "-(" + print(e->a) + ")";
        case Op::Sin: return "sin(" + print(e->a) + ")";
        case Op::Cos: return "cos(" + print(e->a) + ")";
        case Op::Exp: return "exp(" + print(e->a) + ")";
        case Op::Log: return "log(" + print(e->a) + ")";
        case Op::Sqrt: return "sqrt(" + print(e->a) + ")";
        case Op::Add: return "(" + print(e->a) + " + " + print(e->b) + ")";
        case Op::Sub: return "(" + print(e->a) + " - " + print(e->b) + ")";
        case Op::Mul: return "(" + print(e->a) + " * " + print(e->b) + ")";
        case Op::Div: return "(" + print(e->a) + " / " + print(e->b) + ")";
        case Op::Pow: return "(" + print(e->a) + ")^" + std::to_string(e->index);
    }
    return {};
}

inline double eval_expr(const NodePtr& e, const double* x) {
    switch (e->op) {
        case Op::Const: return e->value;
        case Op::Var: return x[e->index - 1];
        case Op::Neg: return -eval_expr(e->a, x);
        case Op::Sin: return std::sin(eval_expr(e->a, x));
        case Op::Cos: return std::cos(eval_expr(e->a, x));
        case Op::Exp: return std::exp(eval_expr(e->a, x));
        case Op::Log: {
            double v = eval_expr(e->a, x);
            if (!(v > 0.0)) throw DomainError("log of nonpositive value in " + print(e));
            return std::log(v);
        }
        case Op::Sqrt: {
            double v = eval_expr(e->a, x);
            if (v < 0.0) throw DomainError("sqrt of negative value in " + print(e));
            return std::sqrt(v);
        }
        case Op::Add: return eval_expr(e->a, x) + eval_expr(e->b, x);
        case Op::Sub: return eval_expr(e->a, x) - eval_expr(e->b, x);
        case Op::Mul: return eval_expr(e->a, x) * eval_expr(e->b, x);
        case Op::Div: {
            double d = eval_expr(e->b, x);
            if (d == 0.0) throw DomainError("division by zero in " + print(e));
            return eval_expr(e->a, x) / d;
        }
        case Op::Pow: {
            double v = eval_expr(e->a, x);
            if (e->index < 0 && v == 0.0) throw DomainError("zero to negative power in " + print(e));
            return std::pow(v, e->index);
        }
    }
    return 0.0;
}

inline double eval_expr(const NodePtr& e, const Vec& x) { return eval_expr(e, x.data()); }

inline NodePtr differentiate(const NodePtr& e, int i) {
    switch (e->op) {
        case Op::Const: return constant(0.0);
        case Op::Var: return constant(e->index == i ? 1.0 : 0.0);
        case Op::Neg: return neg(differentiate(e->a, i));
        case Op::Sin: return mul(unary(Op::Cos, e->a), differentiate(e->a, i));
        case Op::Cos: return mul(neg(unary(Op::Sin, e->a)), differentiate(e->a, i));
        case Op::Exp: return mul(e, differentiate(e->a, i));
        case Op::Log: return div(differentiate(e->a, i), e->a);
        case Op::Sqrt: return div(differentiate(e->a, i), mul(constant(2.0), e));
        case Op::Add: return add(differentiate(e->a, i), differentiate(e->b, i));
        case Op::Sub: return sub(differentiate(e->a, i), differentiate(e->b, i));
        case Op::Mul:
            return add(mul(differentiate(e->a, i), e->b), mul(e->a, differentiate(e->b, i)));
        case Op::Div: {
            // (u/v)' = u'/v - u v' / v^2
            NodePtr du = differentiate(e->a, i), dv = differentiate(e->b, i);
            return sub(div(du, e->b), div(mul(e->a, dv), pow(e->b, 2)));
        }
        case Op::Pow: {
            int k = e->index;
            return mul(mul(constant(static_cast<double>(k)), pow(e->a, k - 1)), differentiate(e->a, i));
        }
    }
    return constant(0.0);
}

// ---------------------------------------------------------------------------
// Flat postfix program for the hot evaluation paths (ODE right-hand sides).
// Same arithmetic in the same order as eval_expr, so results are bit-identical.

class Compiled {
public:
    Compiled() = default;
    explicit Compiled(const NodePtr& e) : root_(e) { emit(e); }

    double operator()(const double* x) const {
        double stack[64];
        double* sp = stack;
        for (const Instr& in : code_) {
            switch (in.op) {
                case Op::Const: *sp++ = in.value; break;
                case Op::Var: *sp++ = x[in.index - 1]; break;
                case Op::Neg: sp[-1] = -sp[-1]; break;
                case Op::Sin: sp[-1] = std::sin(sp[-1]); break;
                case Op::Cos: sp[-1] = std::cos(sp[-1]); break;
                case Op::Exp: sp[-1] = std::exp(sp[-1]); break;
                case Op::Log:
                    if (!(sp[-1] > 0.0)) throw DomainError("log of nonpositive value in " + print(in.node));
                    sp[-1] = std::log(sp[-1]);
                    break;
                case Op::Sqrt:
                    if (sp[-1] < 0.0) throw DomainError("sqrt of negative value in " + print(in.node));
                    sp[-1] = std::sqrt(sp[-1]);
                    break;
                case Op::Add: --sp; sp[-1] = sp[-1] + sp[0]; break;
                case Op::Sub: --sp; sp[-1] = sp[-1] - sp[0]; break;
                case Op::Mul: --sp; sp[-1] = sp[-1] * sp[0]; break;
                case Op::Div:
                    --sp;
                    if (sp[0] == 0.0) throw DomainError("division by zero in " + print(in.node));
                    sp[-1] = sp[-1] / sp[0];
                    break;
                case Op::Pow: sp[-1] = std::pow(sp[-1], in.index); break;
            }
        }
        return stack[0];
    }
    double operator()(const Vec& x) const { return (*this)(x.data()); }
    const NodePtr& expr() const { return root_; }

private:
    struct Instr {
        Op op;
        double value;
        int index;
        NodePtr node;
    };
    NodePtr root_;
    std::vector<Instr> code_;
    int depth_ = 0, max_depth_ = 0;

    void emit(const NodePtr& e) {
        if (e->a) emit(e->a);
        if (e->b) emit(e->b);
        // Only nodes that can raise keep a handle for the diagnostic.
        bool can_fail = e->op == Op::Log || e->op == Op::Sqrt || e->op == Op::Div;
        code_.push_back({e->op, e->value, e->index, can_fail ? e : nullptr});
        if (e->op == Op::Const || e->op == Op::Var) {
            if (++depth_ > max_depth_) max_depth_ = depth_;
        } else if (e->b) {
            --depth_;
        }
        if (max_depth_ > 64) throw std::length_error("expression too deep to compile");
    }
};

// A scalar function of n variables with its exact gradient and Hessian.
class ScalarFunction {
public:
    ScalarFunction() = default;
    ScalarFunction(NodePtr e, int n) : n_(n), expr_(std::move(e)), value_(expr_) {
        grad_.reserve(n);
        hess_.reserve(static_cast<size_t>(n) * n);
        std::vector<NodePtr> d(n);
        for (int i = 0; i < n; ++i) {
            d[i] = differentiate(expr_, i + 1);
            grad_.emplace_back(d[i]);
        }
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) hess_.emplace_back(differentiate(d[i], j + 1));
    }
    ScalarFunction(std::string_view src, int n) : ScalarFunction(parse_expr(src, n), n) {}

    int dim() const { return n_; }
    const NodePtr& expr() const { return expr_; }
    double value(const Vec& x) const { return value_(x); }
    Vec gradient(const Vec& x) const {
        Vec g(n_);
        for (int i = 0; i < n_; ++i) g[i] = grad_[i](x);
        return g;
    }
    Mat hessian(const Vec& x) const {
        Mat h(n_, n_);
        for (int i = 0; i < n_; ++i)
            for (int j = 0; j < n_; ++j) h(i, j) = hess_[i * n_ + j](x);
        return h;
    }

private:
    int n_ = 0;
    NodePtr expr_;
    Compiled value_;
    std::vector<Compiled> grad_, hess_;
};

// n components, each a function of x1..xn. Jacobian expressions are built once.
class VectorFieldSpec {
public:
    VectorFieldSpec() = default;
    VectorFieldSpec(std::vector<NodePtr> comps, int n) : n_(n), comps_(std::move(comps)) {
        if (static_cast<int>(comps_.size()) != n)
            throw std::invalid_argument("vector field needs exactly " + std::to_string(n) + " components");
        for (const auto& c : comps_) {
            if (max_variable(c) > n) throw std::invalid_argument("component references a variable beyond x" + std::to_string(n));
            value_.emplace_back(c);
        }
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) jac_.emplace_back(differentiate(comps_[i], j + 1));
    }
    static VectorFieldSpec from_strings(const std::vector<std::string>& src, int n) {
        std::vector<NodePtr> c;
        for (const auto& s : src) c.push_back(parse_expr(s, n));
        return VectorFieldSpec(std::move(c), n);
    }

    int dim() const { return n_; }
    const std::vector<NodePtr>& components() const { return comps_; }
    Vec value(const Vec& x) const {
        Vec v(n_);
        for (int i = 0; i < n_; ++i) v[i] = value_[i](x);
        return v;
    }
    Mat jacobian(const Vec& x) const {
        Mat J(n_, n_);
        for (int i = 0; i < n_; ++i)
            for (int j = 0; j < n_; ++j) J(i, j) = jac_[i * n_ + j](x);
        return J;
    }
    // Raw-pointer variants for integrator inner loops.
    void value(const double* x, double* out) const {
        for (int i = 0; i < n_; ++i) out[i] = value_[i](x);
    }
    void jacobian(const double* x, double* out_rowmajor) const {
        for (int k = 0; k < n_ * n_; ++k) out_rowmajor[k] = jac_[k](x);
    }

private:
    int n_ = 0;
    std::vector<NodePtr> comps_;
    std::vector<Compiled> value_, jac_;
};

inline Mat jacobian(const VectorFieldSpec& v, const Vec& x) { return v.jacobian(x); }

}  // namespace bbcert
