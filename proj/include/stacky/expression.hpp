#pragma once

#include "stacky/common.hpp"

#include <cctype>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace stacky {

/// Small arithmetic expression over variables x1..xn and t.
/// Grammar: + - * / ^ (right assoc), unary minus, parentheses,
/// functions sin cos exp sqrt, numeric literals. No code execution:
/// scenario files stay data.
class Expression {
public:
  Expression() = default;

  static Expression parse(const std::string& text) {
    Parser p(text);
    Expression e;
    e.root_ = p.parse_expr();
    p.skip_ws();
    if (!p.at_end()) throw ParseError("trailing characters in expression '" + text + "'");
    e.text_ = text;
    return e;
  }

  /// Evaluate with point coordinates `x` (bound to x1..xn) and parameter `t`.
  double eval(const Vec& x, double t = 0.0) const {
    if (!root_) throw ParseError("empty expression");
    return root_->eval(x, t);
  }

  double eval_t(double t) const { return eval(Vec(), t); }

  const std::string& text() const { return text_; }
  bool valid() const { return root_ != nullptr; }

private:
  struct Node {
    virtual ~Node() = default;
    virtual double eval(const Vec& x, double t) const = 0;
  };
  using NodePtr = std::shared_ptr<const Node>;

  struct Const : Node {
    double value;
    explicit Const(double v) : value(v) {}
    double eval(const Vec&, double) const override { return value; }
  };
  struct Var : Node {
    int index;  // -1 means t
    explicit Var(int i) : index(i) {}
    double eval(const Vec& x, double t) const override {
      if (index < 0) return t;
      if (index >= x.size())
        throw ParseError("variable x" + std::to_string(index + 1) + " out of range");
      return x[index];
    }
  };
  struct Unary : Node {
    char op;  // '-', 's'(sin), 'c'(cos), 'e'(exp), 'q'(sqrt)
    NodePtr arg;
    Unary(char o, NodePtr a) : op(o), arg(std::move(a)) {}
    double eval(const Vec& x, double t) const override {
      double v = arg->eval(x, t);
      switch (op) {
        case '-': return -v;
        case 's': return std::sin(v);
        case 'c': return std::cos(v);
        case 'e': return std::exp(v);
        case 'q': return std::sqrt(v);
      }
      return 0.0;
    }
  };
  struct Binary : Node {
    char op;
    NodePtr lhs, rhs;
    Binary(char o, NodePtr l, NodePtr r) : op(o), lhs(std::move(l)), rhs(std::move(r)) {}
    double eval(const Vec& x, double t) const override {
      double a = lhs->eval(x, t), b = rhs->eval(x, t);
      switch (op) {
        case '+': return a + b;
        case '-': return a - b;
        case '*': return a * b;
        case '/': return a / b;
        case '^': return std::pow(a, b);
      }
      return 0.0;
    }
  };

  class Parser {
  public:
    explicit Parser(const std::string& s) : s_(s) {}

    NodePtr parse_expr() {  // additive
      NodePtr lhs = parse_term();
      while (true) {
        skip_ws();
        if (accept('+')) lhs = std::make_shared<Binary>('+', lhs, parse_term());
        else if (accept('-')) lhs = std::make_shared<Binary>('-', lhs, parse_term());
        else return lhs;
      }
    }

    void skip_ws() {
      while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    }
    bool at_end() const { return pos_ >= s_.size(); }

  private:
    NodePtr parse_term() {  // multiplicative
      NodePtr lhs = parse_unary();
      while (true) {
        skip_ws();
        if (accept('*')) lhs = std::make_shared<Binary>('*', lhs, parse_unary());
        else if (accept('/')) lhs = std::make_shared<Binary>('/', lhs, parse_unary());
        else return lhs;
      }
    }

    NodePtr parse_unary() {
      skip_ws();
      if (accept('-')) return std::make_shared<Unary>('-', parse_unary());
      if (accept('+')) return parse_unary();
      return parse_power();
    }

    NodePtr parse_power() {
      NodePtr base = parse_atom();
      skip_ws();
      if (accept('^')) {
        // right associative; exponent may carry a unary minus
        NodePtr exp = parse_unary_power();
        return std::make_shared<Binary>('^', base, exp);
      }
      return base;
    }

    NodePtr parse_unary_power() {
      skip_ws();
      if (accept('-')) return std::make_shared<Unary>('-', parse_unary_power());
      return parse_power();
    }

    NodePtr parse_atom() {
      skip_ws();
      if (at_end()) throw ParseError("unexpected end of expression");
      char c = s_[pos_];
      if (c == '(') {
        ++pos_;
        NodePtr inner = parse_expr();
        skip_ws();
        if (!accept(')')) throw ParseError("missing ')'");
        return inner;
      }
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
      if (std::isalpha(static_cast<unsigned char>(c))) return parse_ident();
      throw ParseError(std::string("unexpected character '") + c + "'");
    }

    NodePtr parse_number() {
      std::size_t end = pos_;
      std::size_t n = 0;
      double v = std::stod(s_.substr(pos_), &n);
      end += n;
      pos_ = end;
      return std::make_shared<Const>(v);
    }

    NodePtr parse_ident() {
      std::size_t start = pos_;
      while (pos_ < s_.size() &&
             (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_'))
        ++pos_;
      std::string name = s_.substr(start, pos_ - start);
      if (name == "t") return std::make_shared<Var>(-1);
      if (name.size() >= 2 && name[0] == 'x') {
        bool digits = true;
        for (std::size_t i = 1; i < name.size(); ++i)
          digits = digits && std::isdigit(static_cast<unsigned char>(name[i]));
        if (digits) return std::make_shared<Var>(std::stoi(name.substr(1)) - 1);
      }
      char fn = 0;
      if (name == "sin") fn = 's';
      else if (name == "cos") fn = 'c';
      else if (name == "exp") fn = 'e';
      else if (name == "sqrt") fn = 'q';
      if (fn) {
        skip_ws();
        if (!accept('(')) throw ParseError("expected '(' after " + name);
        NodePtr arg = parse_expr();
        skip_ws();
        if (!accept(')')) throw ParseError("missing ')' after " + name + " argument");
        return std::make_shared<Unary>(fn, arg);
      }
      throw ParseError("unknown identifier '" + name + "'");
    }

    bool accept(char c) {
      if (pos_ < s_.size() && s_[pos_] == c) {
        ++pos_;
        return true;
      }
      return false;
    }

    const std::string& s_;
    std::size_t pos_ = 0;
  };

  NodePtr root_;
  std::string text_;
};

}  // namespace stacky
