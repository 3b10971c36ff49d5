#include "stldp/stl.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

namespace stldp::stl {

Schema::Schema(std::vector<ChannelDecl> channels) : channels_(std::move(channels)) {}

std::optional<std::size_t> Schema::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < channels_.size(); ++i) {
    if (channels_[i].name == name) return i;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Construction

namespace {

Formula make(Node n) { return std::make_shared<const Node>(std::move(n)); }

void check_interval(Interval w) {
  if (w.lo < 0 || w.hi < 0) throw std::invalid_argument("temporal interval bounds must be >= 0");
  if (w.lo > w.hi) {
    throw std::invalid_argument("malformed interval [" + std::to_string(w.lo) + "," +
                                std::to_string(w.hi) + "]: lower bound exceeds upper bound");
  }
}

Formula nary(Op op, std::vector<Formula> fs) {
  if (fs.empty()) throw std::invalid_argument("empty conjunction/disjunction");
  if (fs.size() == 1) return fs.front();
  Node n;
  n.op = op;
  for (auto& f : fs) {
    // Flatten nested nodes of the same kind; min/max are associative.
    if (f->op == op) {
      n.children.insert(n.children.end(), f->children.begin(), f->children.end());
    } else {
      n.children.push_back(std::move(f));
    }
  }
  return make(std::move(n));
}

}  // namespace

Formula top() { return make(Node{}); }

Formula atom(std::size_t channel, std::string name, Cmp cmp, double threshold) {
  Node n;
  n.op = Op::Atom;
  n.channel = channel;
  n.channel_name = std::move(name);
  n.cmp = cmp;
  n.threshold = threshold;
  return make(std::move(n));
}

Formula atom(const Schema& schema, const std::string& channel, Cmp cmp, double threshold) {
  auto idx = schema.index_of(channel);
  if (!idx) throw std::invalid_argument("unknown channel '" + channel + "'");
  return atom(*idx, channel, cmp, threshold);
}

Formula negate(Formula f) {
  Node n;
  n.op = Op::Not;
  n.children.push_back(std::move(f));
  return make(std::move(n));
}

Formula conj(std::vector<Formula> fs) { return nary(Op::And, std::move(fs)); }
Formula conj(Formula a, Formula b) { return conj(std::vector<Formula>{std::move(a), std::move(b)}); }
Formula disj(std::vector<Formula> fs) { return nary(Op::Or, std::move(fs)); }
Formula disj(Formula a, Formula b) { return disj(std::vector<Formula>{std::move(a), std::move(b)}); }

Formula imply(Formula a, Formula b) {
  Node n;
  n.op = Op::Imply;
  n.children = {std::move(a), std::move(b)};
  return make(std::move(n));
}

Formula eventually(Interval w, Formula f) {
  check_interval(w);
  Node n;
  n.op = Op::Eventually;
  n.window = w;
  n.children.push_back(std::move(f));
  return make(std::move(n));
}

Formula always(Interval w, Formula f) {
  check_interval(w);
  Node n;
  n.op = Op::Always;
  n.window = w;
  n.children.push_back(std::move(f));
  return make(std::move(n));
}

Formula until(Interval w, Formula lhs, Formula rhs) {
  check_interval(w);
  Node n;
  n.op = Op::Until;
  n.window = w;
  n.children = {std::move(lhs), std::move(rhs)};
  return make(std::move(n));
}

Formula within(std::size_t channel, const std::string& name, double lo, double hi) {
  return conj(atom(channel, name, Cmp::Ge, lo), atom(channel, name, Cmp::Le, hi));
}

std::size_t depth(const Formula& f) {
  std::size_t d = 0;
  for (const auto& c : f->children) d = std::max(d, depth(c));
  return d + 1;
}

// ---------------------------------------------------------------------------
// Parser

ParseError::ParseError(const std::string& what, int line, int column)
    : std::runtime_error(what + " at line " + std::to_string(line) + ", column " +
                         std::to_string(column)),
      line_(line),
      column_(column) {}

namespace {

enum class Tok { Ident, Number, LParen, RParen, LBracket, RBracket, Comma, Ge, Le, Arrow, End };

struct Token {
  Tok kind = Tok::End;
  std::string text;
  int line = 1;
  int column = 1;
};

std::vector<Token> tokenize(const std::string& src) {
  std::vector<Token> out;
  int line = 1, col = 1;
  std::size_t i = 0;
  auto advance = [&](std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) {
      if (src[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
      ++i;
    }
  };
  while (i < src.size()) {
    const char c = src[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance(1);
      continue;
    }
    Token t;
    t.line = line;
    t.column = col;
    auto starts_number = [&](std::size_t at) {
      return at < src.size() && (std::isdigit(static_cast<unsigned char>(src[at])) || src[at] == '.');
    };
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < src.size() && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_')) ++j;
      t.kind = Tok::Ident;
      t.text = src.substr(i, j - i);
      advance(j - i);
    } else if (starts_number(i) || ((c == '-' || c == '+') && starts_number(i + 1))) {
      std::size_t j = i + 1;
      while (j < src.size()) {
        const char d = src[j];
        if (std::isdigit(static_cast<unsigned char>(d)) || d == '.') {
          ++j;
        } else if ((d == 'e' || d == 'E') && j + 1 < src.size()) {
          ++j;
          if (src[j] == '+' || src[j] == '-') ++j;
        } else {
          break;
        }
      }
      t.kind = Tok::Number;
      t.text = src.substr(i, j - i);
      advance(j - i);
    } else if (src.compare(i, 2, ">=") == 0) {
      t.kind = Tok::Ge;
      t.text = ">=";
      advance(2);
    } else if (src.compare(i, 2, "<=") == 0) {
      t.kind = Tok::Le;
      t.text = "<=";
      advance(2);
    } else if (src.compare(i, 2, "->") == 0) {
      t.kind = Tok::Arrow;
      t.text = "->";
      advance(2);
    } else {
      switch (c) {
        case '(': t.kind = Tok::LParen; break;
        case ')': t.kind = Tok::RParen; break;
        case '[': t.kind = Tok::LBracket; break;
        case ']': t.kind = Tok::RBracket; break;
        case ',': t.kind = Tok::Comma; break;
        default: throw ParseError(std::string("unexpected character '") + c + "'", line, col);
      }
      t.text = std::string(1, c);
      advance(1);
    }
    out.push_back(std::move(t));
  }
  Token end;
  end.kind = Tok::End;
  end.line = line;
  end.column = col;
  out.push_back(end);
  return out;
}

class Parser {
 public:
  Parser(const std::string& text, const Schema& schema) : toks_(tokenize(text)), schema_(schema) {}

  Formula parse_all() {
    Formula f = implication();
    if (peek().kind != Tok::End) fail("unexpected token '" + peek().text + "'");
    return f;
  }

 private:
  const Token& peek(std::size_t ahead = 0) const {
    return toks_[std::min(pos_ + ahead, toks_.size() - 1)];
  }
  const Token& next() {
    const Token& t = toks_[pos_];
    if (pos_ + 1 < toks_.size()) ++pos_;
    return t;
  }
  [[noreturn]] void fail(const std::string& what) const {
    const Token& t = peek();
    if (t.kind == Tok::End) throw ParseError(what.empty() ? "unexpected end of input" : what + " (end of input)", t.line, t.column);
    throw ParseError(what, t.line, t.column);
  }
  void expect(Tok kind, const char* what) {
    if (peek().kind != kind) {
      if (peek().kind == Tok::End) fail("unexpected end of input, expected " + std::string(what));
      fail(std::string("expected ") + what + ", found '" + peek().text + "'");
    }
    next();
  }
  bool is_keyword(const char* kw) const { return peek().kind == Tok::Ident && peek().text == kw; }

  Formula implication() {
    Formula lhs = disjunction();
    if (peek().kind == Tok::Arrow) {
      next();
      return imply(lhs, implication());
    }
    return lhs;
  }

  Formula disjunction() {
    std::vector<Formula> parts{conjunction()};
    while (is_keyword("or")) {
      next();
      parts.push_back(conjunction());
    }
    return parts.size() == 1 ? parts.front() : disj(std::move(parts));
  }

  Formula conjunction() {
    std::vector<Formula> parts{unary()};
    while (is_keyword("and")) {
      next();
      parts.push_back(unary());
    }
    return parts.size() == 1 ? parts.front() : conj(std::move(parts));
  }

  Formula unary() {
    if (is_keyword("not")) {
      next();
      return negate(unary());
    }
    return primary();
  }

  int integer() {
    const Token& t = peek();
    if (t.kind != Tok::Number) fail(t.kind == Tok::End ? "" : "expected integer timestep, found '" + t.text + "'");
    int value = 0;
    auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), value);
    if (ec != std::errc() || ptr != t.text.data() + t.text.size() || value < 0) {
      fail("expected non-negative integer timestep, found '" + t.text + "'");
    }
    next();
    return value;
  }

  double number() {
    const Token& t = peek();
    if (t.kind != Tok::Number) fail(t.kind == Tok::End ? "" : "expected number, found '" + t.text + "'");
    std::istringstream in(t.text);
    in.imbue(std::locale::classic());
    double v = 0.0;
    in >> v;
    if (in.fail()) fail("malformed number '" + t.text + "'");
    next();
    return v;
  }

  Interval interval() {
    expect(Tok::LBracket, "'['");
    const Token at = peek();
    Interval w;
    w.lo = integer();
    expect(Tok::Comma, "','");
    w.hi = integer();
    expect(Tok::RBracket, "']'");
    if (w.lo > w.hi) {
      throw ParseError("malformed interval [" + std::to_string(w.lo) + "," + std::to_string(w.hi) +
                           "]: lower bound exceeds upper bound",
                       at.line, at.column);
    }
    return w;
  }

  Formula primary() {
    const Token& t = peek();
    if (t.kind == Tok::LParen) {
      next();
      Formula f = implication();
      expect(Tok::RParen, "')'");
      return f;
    }
    if (t.kind != Tok::Ident) fail(t.kind == Tok::End ? "" : "unexpected token '" + t.text + "'");
    if (t.text == "TOP") {
      next();
      return top();
    }
    if ((t.text == "G" || t.text == "F" || t.text == "U") && peek(1).kind == Tok::LBracket) {
      const std::string op = next().text;
      Interval w = interval();
      expect(Tok::LParen, "'('");
      Formula a = implication();
      if (op == "U") {
        expect(Tok::Comma, "','");
        Formula b = implication();
        expect(Tok::RParen, "')'");
        return until(w, a, b);
      }
      expect(Tok::RParen, "')'");
      return op == "G" ? always(w, a) : eventually(w, a);
    }
    return comparison();
  }

  Formula comparison() {
    const Token name = next();
    const Token& cmp_tok = peek();
    if (cmp_tok.kind != Tok::Ge && cmp_tok.kind != Tok::Le) {
      fail(cmp_tok.kind == Tok::End ? "" : "expected '>=' or '<=' after '" + name.text + "'");
    }
    const Cmp cmp = cmp_tok.kind == Tok::Ge ? Cmp::Ge : Cmp::Le;
    next();
    const double value = number();

    if (auto idx = schema_.index_of(name.text)) return atom(*idx, name.text, cmp, value);
    const std::string prefix = "abs_";
    if (name.text.rfind(prefix, 0) == 0) {
      const std::string base = name.text.substr(prefix.size());
      if (auto idx = schema_.index_of(base)) {
        if (cmp != Cmp::Le) throw ParseError("'" + name.text + "' only supports '<='", name.line, name.column);
        return conj(atom(*idx, base, Cmp::Le, value), atom(*idx, base, Cmp::Ge, -value));
      }
    }
    throw ParseError("unknown channel '" + name.text + "'", name.line, name.column);
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
  const Schema& schema_;
};

std::string number_text(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string interval_text(Interval w) {
  return "[" + std::to_string(w.lo) + "," + std::to_string(w.hi) + "]";
}

}  // namespace

Formula parse(const std::string& text, const Schema& schema) { return Parser(text, schema).parse_all(); }

std::string format(const Formula& f) {
  switch (f->op) {
    case Op::True: return "TOP";
    case Op::Atom:
      return f->channel_name + (f->cmp == Cmp::Ge ? " >= " : " <= ") + number_text(f->threshold);
    case Op::Not: return "not (" + format(f->children[0]) + ")";
    case Op::And:
    case Op::Or: {
      std::string out = "(";
      for (std::size_t i = 0; i < f->children.size(); ++i) {
        if (i) out += f->op == Op::And ? " and " : " or ";
        out += format(f->children[i]);
      }
      return out + ")";
    }
    case Op::Imply: return "(" + format(f->children[0]) + " -> " + format(f->children[1]) + ")";
    case Op::Eventually: return "F" + interval_text(f->window) + "(" + format(f->children[0]) + ")";
    case Op::Always: return "G" + interval_text(f->window) + "(" + format(f->children[0]) + ")";
    case Op::Until:
      return "U" + interval_text(f->window) + "(" + format(f->children[0]) + ", " +
             format(f->children[1]) + ")";
  }
  return {};
}

// ---------------------------------------------------------------------------
// Validation

namespace {

void check_horizon_impl(const Node& n, int horizon, int tmax) {
  switch (n.op) {
    case Op::Eventually:
    case Op::Always:
    case Op::Until: {
      if (tmax + n.window.lo > horizon) {
        throw std::invalid_argument("temporal window " + interval_text(n.window) + " evaluated at step " +
                                    std::to_string(tmax) + " starts past the signal horizon " +
                                    std::to_string(horizon));
      }
      const int child_tmax = std::min(tmax + n.window.hi, horizon);
      for (const auto& c : n.children) check_horizon_impl(*c, horizon, child_tmax);
      return;
    }
    default:
      for (const auto& c : n.children) check_horizon_impl(*c, horizon, tmax);
  }
}

}  // namespace

void check_horizon(const Formula& f, int horizon, int t) {
  if (t < 0 || t > horizon) throw std::invalid_argument("evaluation time outside the signal");
  check_horizon_impl(*f, horizon, t);
}

void check_channels(const Formula& f, std::size_t channels) {
  if (f->op == Op::Atom && f->channel >= channels) {
    throw std::invalid_argument("atom references channel '" + f->channel_name + "' missing from the signal");
  }
  for (const auto& c : f->children) check_channels(c, channels);
}

namespace {

void validate(const Formula& f, const Signal& s, int t) {
  if (s.values.rows() < 1) throw std::invalid_argument("empty signal");
  check_channels(f, static_cast<std::size_t>(s.values.cols()));
  check_horizon(f, s.horizon(), t);
}

// Window [t+lo, min(t+hi, T)]; returns false when it would start past T.
inline bool window_at(Interval w, int t, int T, int& first, int& last) {
  first = t + w.lo;
  last = std::min(t + w.hi, T);
  return first <= T;
}

// ---------------------------------------------------------------------------
// Boolean semantics (direct quantifier evaluation).

std::vector<char> eval_bool_all(const Node& n, const Signal& s) {
  const int T = s.horizon();
  std::vector<char> out(static_cast<std::size_t>(T + 1), 0);
  int first = 0, last = 0;
  switch (n.op) {
    case Op::True: std::fill(out.begin(), out.end(), 1); break;
    case Op::Atom: {
      const auto x = s.channel(n.channel);
      for (int t = 0; t <= T; ++t) {
        out[t] = n.cmp == Cmp::Ge ? (x[t] >= n.threshold) : (x[t] <= n.threshold);
      }
      break;
    }
    case Op::Not: {
      auto c = eval_bool_all(*n.children[0], s);
      for (int t = 0; t <= T; ++t) out[t] = !c[t];
      break;
    }
    case Op::And:
    case Op::Or: {
      const bool is_and = n.op == Op::And;
      std::fill(out.begin(), out.end(), is_and ? 1 : 0);
      for (const auto& child : n.children) {
        auto c = eval_bool_all(*child, s);
        for (int t = 0; t <= T; ++t) out[t] = is_and ? (out[t] && c[t]) : (out[t] || c[t]);
      }
      break;
    }
    case Op::Imply: {
      auto a = eval_bool_all(*n.children[0], s);
      auto b = eval_bool_all(*n.children[1], s);
      for (int t = 0; t <= T; ++t) out[t] = !a[t] || b[t];
      break;
    }
    case Op::Eventually:
    case Op::Always: {
      auto c = eval_bool_all(*n.children[0], s);
      const bool exists = n.op == Op::Eventually;
      for (int t = 0; t <= T; ++t) {
        if (!window_at(n.window, t, T, first, last)) continue;
        bool acc = !exists;
        for (int k = first; k <= last; ++k) acc = exists ? (acc || c[k]) : (acc && c[k]);
        out[t] = acc;
      }
      break;
    }
    case Op::Until: {
      auto a = eval_bool_all(*n.children[0], s);
      auto b = eval_bool_all(*n.children[1], s);
      for (int t = 0; t <= T; ++t) {
        if (!window_at(n.window, t, T, first, last)) continue;
        bool found = false;
        for (int k = first; k <= last && !found; ++k) {
          if (!b[k]) continue;
          bool holds = true;
          for (int j = t; j <= k; ++j) holds = holds && a[j];
          found = holds;
        }
        out[t] = found;
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact robustness over all timesteps. Entries whose window starts past T are
// left at 0; validation guarantees they are never consumed.

Eigen::VectorXd robust_all(const Node& n, const Signal& s) {
  const int T = s.horizon();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(T + 1);
  int first = 0, last = 0;
  switch (n.op) {
    case Op::True: out.setOnes(); break;
    case Op::Atom: {
      const auto x = s.channel(n.channel);
      if (n.cmp == Cmp::Ge) {
        out = x.array() - n.threshold;
      } else {
        out = n.threshold - x.array();
      }
      break;
    }
    case Op::Not: out = -robust_all(*n.children[0], s); break;
    case Op::And:
    case Op::Or: {
      out = robust_all(*n.children[0], s);
      for (std::size_t i = 1; i < n.children.size(); ++i) {
        Eigen::VectorXd c = robust_all(*n.children[i], s);
        if (n.op == Op::And) {
          out = out.cwiseMin(c);
        } else {
          out = out.cwiseMax(c);
        }
      }
      break;
    }
    case Op::Imply: {
      Eigen::VectorXd a = robust_all(*n.children[0], s);
      Eigen::VectorXd b = robust_all(*n.children[1], s);
      out = (-a).cwiseMax(b);
      break;
    }
    case Op::Eventually:
    case Op::Always: {
      Eigen::VectorXd c = robust_all(*n.children[0], s);
      for (int t = 0; t <= T; ++t) {
        if (!window_at(n.window, t, T, first, last)) continue;
        const auto seg = c.segment(first, last - first + 1);
        out[t] = n.op == Op::Always ? seg.minCoeff() : seg.maxCoeff();
      }
      break;
    }
    case Op::Until: {
      Eigen::VectorXd a = robust_all(*n.children[0], s);
      Eigen::VectorXd b = robust_all(*n.children[1], s);
      for (int t = 0; t <= T; ++t) {
        if (!window_at(n.window, t, T, first, last)) continue;
        double best = -std::numeric_limits<double>::infinity();
        double running = std::numeric_limits<double>::infinity();
        for (int k = t; k <= last; ++k) {
          running = std::min(running, a[k]);
          if (k >= first) best = std::max(best, std::min(b[k], running));
        }
        out[t] = best;
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Smooth robustness. The forward pass records every node's value array in a
// trace tree mirroring the formula; the backward pass recomputes soft-max
// weights as exp(beta (x_i - smax)) from the stored values.

inline double lse_max(const double* xs, int n, double beta) {
  double m = xs[0];
  for (int i = 1; i < n; ++i) m = std::max(m, xs[i]);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::exp(beta * (xs[i] - m));
  return m + std::log(acc) / beta;
}

inline double lse_min(const double* xs, int n, double beta) {
  double m = xs[0];
  for (int i = 1; i < n; ++i) m = std::min(m, xs[i]);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += std::exp(-beta * (xs[i] - m));
  return m - std::log(acc) / beta;
}

struct Trace {
  Eigen::VectorXd value;
  std::vector<Trace> kids;
};

Trace smooth_forward(const Node& n, const Signal& s, double beta) {
  const int T = s.horizon();
  Trace tr;
  tr.value = Eigen::VectorXd::Zero(T + 1);
  int first = 0, last = 0;
  std::vector<double> buf;
  switch (n.op) {
    case Op::True: tr.value.setOnes(); break;
    case Op::Atom: {
      const auto x = s.channel(n.channel);
      if (n.cmp == Cmp::Ge) {
        tr.value = x.array() - n.threshold;
      } else {
        tr.value = n.threshold - x.array();
      }
      break;
    }
    case Op::Not:
      tr.kids.push_back(smooth_forward(*n.children[0], s, beta));
      tr.value = -tr.kids[0].value;
      break;
    case Op::And:
    case Op::Or:
    case Op::Imply: {
      for (const auto& c : n.children) tr.kids.push_back(smooth_forward(*c, s, beta));
      const int k = static_cast<int>(tr.kids.size());
      buf.resize(k);
      for (int t = 0; t <= T; ++t) {
        for (int i = 0; i < k; ++i) buf[i] = tr.kids[i].value[t];
        if (n.op == Op::Imply) buf[0] = -buf[0];
        tr.value[t] = n.op == Op::And ? lse_min(buf.data(), k, beta) : lse_max(buf.data(), k, beta);
      }
      break;
    }
    case Op::Eventually:
    case Op::Always: {
      tr.kids.push_back(smooth_forward(*n.children[0], s, beta));
      const Eigen::VectorXd& c = tr.kids[0].value;
      for (int t = 0; t <= T; ++t) {
        if (!window_at(n.window, t, T, first, last)) continue;
        const int len = last - first + 1;
        tr.value[t] = n.op == Op::Always ? lse_min(c.data() + first, len, beta)
                                         : lse_max(c.data() + first, len, beta);
      }
      break;
    }
    case Op::Until: {
      tr.kids.push_back(smooth_forward(*n.children[0], s, beta));
      tr.kids.push_back(smooth_forward(*n.children[1], s, beta));
      const Eigen::VectorXd& a = tr.kids[0].value;
      const Eigen::VectorXd& b = tr.kids[1].value;
      std::vector<double> inner;
      for (int t = 0; t <= T; ++t) {
        if (!window_at(n.window, t, T, first, last)) continue;
        inner.clear();
        for (int k = first; k <= last; ++k) {
          buf.assign(a.data() + t, a.data() + k + 1);
          buf.push_back(b[k]);
          inner.push_back(lse_min(buf.data(), static_cast<int>(buf.size()), beta));
        }
        tr.value[t] = lse_max(inner.data(), static_cast<int>(inner.size()), beta);
      }
      break;
    }
  }
  return tr;
}

void smooth_backward(const Node& n, const Trace& tr, const Eigen::VectorXd& cot, const Signal& s,
                     double beta, Eigen::MatrixXd& grad) {
  const int T = s.horizon();
  int first = 0, last = 0;
  switch (n.op) {
    case Op::True: return;
    case Op::Atom: {
      auto col = grad.col(static_cast<Eigen::Index>(n.channel));
      if (n.cmp == Cmp::Ge) {
        col += cot;
      } else {
        col -= cot;
      }
      return;
    }
    case Op::Not: smooth_backward(*n.children[0], tr.kids[0], -cot, s, beta, grad); return;
    case Op::And:
    case Op::Or:
    case Op::Imply: {
      for (std::size_t i = 0; i < tr.kids.size(); ++i) {
        Eigen::VectorXd child_cot = Eigen::VectorXd::Zero(T + 1);
        const double sign = (n.op == Op::Imply && i == 0) ? -1.0 : 1.0;
        for (int t = 0; t <= T; ++t) {
          if (cot[t] == 0.0) continue;
          const double x = sign * tr.kids[i].value[t];
          const double w = n.op == Op::And ? std::exp(beta * (tr.value[t] - x))
                                           : std::exp(beta * (x - tr.value[t]));
          child_cot[t] = sign * cot[t] * w;
        }
        smooth_backward(*n.children[i], tr.kids[i], child_cot, s, beta, grad);
      }
      return;
    }
    case Op::Eventually:
    case Op::Always: {
      const Eigen::VectorXd& c = tr.kids[0].value;
      Eigen::VectorXd child_cot = Eigen::VectorXd::Zero(T + 1);
      for (int t = 0; t <= T; ++t) {
        if (cot[t] == 0.0 || !window_at(n.window, t, T, first, last)) continue;
        for (int k = first; k <= last; ++k) {
          const double w = n.op == Op::Always ? std::exp(beta * (tr.value[t] - c[k]))
                                              : std::exp(beta * (c[k] - tr.value[t]));
          child_cot[k] += cot[t] * w;
        }
      }
      smooth_backward(*n.children[0], tr.kids[0], child_cot, s, beta, grad);
      return;
    }
    case Op::Until: {
      const Eigen::VectorXd& a = tr.kids[0].value;
      const Eigen::VectorXd& b = tr.kids[1].value;
      Eigen::VectorXd cot_a = Eigen::VectorXd::Zero(T + 1);
      Eigen::VectorXd cot_b = Eigen::VectorXd::Zero(T + 1);
      std::vector<double> buf;
      for (int t = 0; t <= T; ++t) {
        if (cot[t] == 0.0 || !window_at(n.window, t, T, first, last)) continue;
        for (int k = first; k <= last; ++k) {
          buf.assign(a.data() + t, a.data() + k + 1);
          buf.push_back(b[k]);
          const double m = lse_min(buf.data(), static_cast<int>(buf.size()), beta);
          const double outer = cot[t] * std::exp(beta * (m - tr.value[t]));
          for (int j = t; j <= k; ++j) cot_a[j] += outer * std::exp(beta * (m - a[j]));
          cot_b[k] += outer * std::exp(beta * (m - b[k]));
        }
      }
      smooth_backward(*n.children[0], tr.kids[0], cot_a, s, beta, grad);
      smooth_backward(*n.children[1], tr.kids[1], cot_b, s, beta, grad);
      return;
    }
  }
}

double gap_bound_impl(const Node& n, int horizon, int tmax) {
  switch (n.op) {
    case Op::True:
    case Op::Atom: return 0.0;
    case Op::Not: return gap_bound_impl(*n.children[0], horizon, tmax);
    case Op::And:
    case Op::Or:
    case Op::Imply: {
      double worst = 0.0;
      for (const auto& c : n.children) worst = std::max(worst, gap_bound_impl(*c, horizon, tmax));
      return std::log(static_cast<double>(n.children.size())) + worst;
    }
    case Op::Eventually:
    case Op::Always:
    case Op::Until: {
      const int child_tmax = std::min(tmax + n.window.hi, horizon);
      const int fan = std::min(n.window.hi - n.window.lo + 1, horizon + 1);
      double worst = 0.0;
      for (const auto& c : n.children) worst = std::max(worst, gap_bound_impl(*c, horizon, child_tmax));
      double level = std::log(static_cast<double>(fan));
      if (n.op == Op::Until) level += std::log(static_cast<double>(std::min(n.window.hi, horizon) + 2));
      return level + worst;
    }
  }
  return 0.0;
}

}  // namespace

bool eval_bool(const Formula& f, const Signal& s, int t) {
  validate(f, s, t);
  return eval_bool_all(*f, s)[static_cast<std::size_t>(t)] != 0;
}

double robustness(const Formula& f, const Signal& s, int t) {
  validate(f, s, t);
  return robust_all(*f, s)[t];
}

SmoothResult robustness_smooth(const Formula& f, const Signal& s, double beta, int t) {
  if (!(beta > 0.0)) throw std::invalid_argument("smoothing temperature must be positive");
  validate(f, s, t);
  const Trace tr = smooth_forward(*f, s, beta);
  SmoothResult out;
  out.value = tr.value[t];
  out.grad = Eigen::MatrixXd::Zero(s.values.rows(), s.values.cols());
  Eigen::VectorXd cot = Eigen::VectorXd::Zero(s.horizon() + 1);
  cot[t] = 1.0;
  smooth_backward(*f, tr, cot, s, beta, out.grad);
  return out;
}

double robustness_smooth_value(const Formula& f, const Signal& s, double beta, int t) {
  if (!(beta > 0.0)) throw std::invalid_argument("smoothing temperature must be positive");
  validate(f, s, t);
  return smooth_forward(*f, s, beta).value[t];
}

double smooth_gap_bound(const Formula& f, int horizon, int t) { return gap_bound_impl(*f, horizon, t); }

double smooth_max(const std::vector<double>& xs, double beta) {
  if (xs.empty()) throw std::invalid_argument("smooth_max of an empty set");
  return lse_max(xs.data(), static_cast<int>(xs.size()), beta);
}

double smooth_min(const std::vector<double>& xs, double beta) {
  if (xs.empty()) throw std::invalid_argument("smooth_min of an empty set");
  return lse_min(xs.data(), static_cast<int>(xs.size()), beta);
}

}  // namespace stldp::stl
