#pragma once

// Signal temporal logic: formula AST, textual front-end, boolean semantics,
// exact robustness and a log-sum-exp smoothed robustness with signal
// gradients.
//
// Time is discrete. A temporal operator with window [a,b] evaluated at step t
// ranges over [t+a, min(t+b, T)] where T is the last index of the signal.
// Windows that would start past T are rejected up front (see check_horizon).

#include <Eigen/Core>

#include <cstddef>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace stldp::stl {

struct ChannelDecl {
  std::string name;
  std::string unit;
};

class Schema {
 public:
  Schema() = default;
  explicit Schema(std::vector<ChannelDecl> channels);

  std::size_t size() const { return channels_.size(); }
  const ChannelDecl& operator[](std::size_t i) const { return channels_[i]; }
  const std::vector<ChannelDecl>& channels() const { return channels_; }
  std::optional<std::size_t> index_of(const std::string& name) const;

 private:
  std::vector<ChannelDecl> channels_;
};

using SchemaPtr = std::shared_ptr<const Schema>;

/// A sampled multi-channel signal: one row per timestep, one column per
/// channel of the schema.
struct Signal {
  SchemaPtr schema;
  Eigen::MatrixXd values;
  double dt = 0.5;

  int horizon() const { return static_cast<int>(values.rows()) - 1; }
  Eigen::Ref<const Eigen::VectorXd> channel(std::size_t i) const {
    return values.col(static_cast<Eigen::Index>(i));
  }
};

enum class Op { True, Atom, Not, And, Or, Imply, Eventually, Always, Until };
enum class Cmp { Ge, Le };

struct Interval {
  int lo = 0;
  int hi = 0;
};

struct Node;
using Formula = std::shared_ptr<const Node>;

struct Node {
  Op op = Op::True;
  // Atom: channel <cmp> threshold, i.e. mu(x) = x - c (Ge) or c - x (Le).
  std::size_t channel = 0;
  std::string channel_name;
  Cmp cmp = Cmp::Ge;
  double threshold = 0.0;
  // Temporal operators.
  Interval window;
  // Not: 1 child, And/Or: >= 2, Imply/Until: 2 (lhs, rhs), F/G: 1.
  std::vector<Formula> children;
};

// Constructors. Temporal constructors throw std::invalid_argument when
// lo > hi or lo < 0.
Formula top();
Formula atom(const Schema& schema, const std::string& channel, Cmp cmp, double threshold);
Formula atom(std::size_t channel, std::string name, Cmp cmp, double threshold);
Formula negate(Formula f);
Formula conj(std::vector<Formula> fs);
Formula conj(Formula a, Formula b);
Formula disj(std::vector<Formula> fs);
Formula disj(Formula a, Formula b);
Formula imply(Formula a, Formula b);
Formula eventually(Interval w, Formula f);
Formula always(Interval w, Formula f);
Formula until(Interval w, Formula lhs, Formula rhs);
/// lo <= channel <= hi as a conjunction of two atoms.
Formula within(std::size_t channel, const std::string& name, double lo, double hi);

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, int line, int column);
  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

/// Parses the ASCII grammar
///   TOP | <chan> (>=|<=) <num> | abs_<chan> <= <num> | not E | E and E
///   | E or E | E -> E | G[a,b](E) | F[a,b](E) | U[a,b](E, E)
/// with precedence not > and > or > -> (implication is right associative).
Formula parse(const std::string& text, const Schema& schema);

/// Fully parenthesized text that parses back to an equivalent formula.
std::string format(const Formula& f);

/// Throws std::invalid_argument if evaluating `f` at `t` on a signal whose
/// last index is `horizon` would open a window starting past the horizon,
/// or if an atom references a channel outside `channels`.
void check_horizon(const Formula& f, int horizon, int t = 0);
void check_channels(const Formula& f, std::size_t channels);

bool eval_bool(const Formula& f, const Signal& s, int t = 0);
double robustness(const Formula& f, const Signal& s, int t = 0);

struct SmoothResult {
  double value = 0.0;
  Eigen::MatrixXd grad;  // same shape as Signal::values
};

/// Robustness with max/min replaced by (1/beta) log-sum-exp and its dual.
SmoothResult robustness_smooth(const Formula& f, const Signal& s, double beta, int t = 0);
/// Value only; cheaper when no gradient is needed.
double robustness_smooth_value(const Formula& f, const Signal& s, double beta, int t = 0);

/// Sum of log(fan-in) along the worst root-to-leaf path for evaluation at
/// `t` on a signal with last index `horizon`. |smooth - exact| <= this / beta.
double smooth_gap_bound(const Formula& f, int horizon, int t = 0);

/// Max-shifted log-sum-exp smooth maximum (1/beta) log sum exp(beta x_i).
double smooth_max(const std::vector<double>& xs, double beta);
double smooth_min(const std::vector<double>& xs, double beta);

std::size_t depth(const Formula& f);

}  // namespace stldp::stl
