#pragma once

// Polynomial network (pi-net V1): affine stages joined by Hadamard products,
// no activation functions. Stage recurrence on input x (m) with width w:
//
//   p_1 = A_1 x + b_1
//   p_k = (A_k x + b_k) o p_{k-1} + p_{k-1},   k = 2..D
//   out = C p_D + c
//
// Every output is a polynomial of total degree <= D in x.

#include "stiffnode/autodiff.hpp"
#include "stiffnode/densela.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace stiffnode {

class NonFiniteValue : public std::runtime_error {
public:
  explicit NonFiniteValue(const std::string &what) : std::runtime_error(what) {}
};

struct PiNetShape {
  int inputs = 1;   // m
  int degree = 1;   // D
  int width = 2;    // w
  int outputs = 1;  // m_out

  /// D (w m + w) + m_out w + m_out.
  Index param_count() const;
  /// Number of monomials of total degree <= D in m variables.
  static int default_width(int inputs, int degree);
  static PiNetShape with_default_width(int inputs, int degree);
  void validate() const;
};

struct ParamSlice {
  std::string name;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;
};

/// Layout registry: A_1, b_1, ..., A_D, b_D, C, c, each stored column-major.
std::vector<ParamSlice> param_layout(const PiNetShape &shape);

template <typename M>
struct NetWeights {
  std::vector<M> A;
  std::vector<M> b;
  M C;
  M c;
};

template <typename M>
NetWeights<M> unflatten(const PiNetShape &shape, const M &theta) {
  using ad::slice;
  NetWeights<M> w;
  const auto layout = param_layout(shape);
  for (int k = 0; k < shape.degree; ++k) {
    const auto &a = layout[static_cast<std::size_t>(2 * k)];
    const auto &b = layout[static_cast<std::size_t>(2 * k + 1)];
    w.A.push_back(slice(theta, a.offset, a.rows, a.cols));
    w.b.push_back(slice(theta, b.offset, b.rows, b.cols));
  }
  const auto &C = layout[layout.size() - 2];
  const auto &c = layout[layout.size() - 1];
  w.C = slice(theta, C.offset, C.rows, C.cols);
  w.c = slice(theta, c.offset, c.rows, c.cols);
  return w;
}

ParamVector flatten(const PiNetShape &shape, const NetWeights<ad::Mat> &weights);

/// Batched forward pass, one sample per column of X.
template <typename M>
M pinet_forward(const NetWeights<M> &w, const M &X) {
  using ad::add_colwise;
  using ad::hadamard;
  M p = add_colwise(w.A[0] * X, w.b[0]);
  for (std::size_t k = 1; k < w.A.size(); ++k) {
    const M q = add_colwise(w.A[k] * X, w.b[k]);
    p = hadamard(q, p) + p;
  }
  return add_colwise(w.C * p, w.c);
}

template <typename M>
struct ForwardWithJacobian {
  M value;
  /// columns[j] holds d out / d x_j for every sample (m_out x S).
  std::vector<M> columns;
};

/// Forward pass with forward-mode state tangents carried through each stage.
template <typename M>
ForwardWithJacobian<M> pinet_forward_jacobian(const NetWeights<M> &w, const M &X) {
  using ad::add_colwise;
  using ad::add_scalar;
  using ad::broadcast_cols;
  using ad::col;
  using ad::hadamard;
  const Index samples = X.cols();
  const Index m = X.rows();
  M p = add_colwise(w.A[0] * X, w.b[0]);
  std::vector<M> tangents;
  for (Index j = 0; j < m; ++j) tangents.push_back(broadcast_cols(col(w.A[0], j), samples));
  for (std::size_t k = 1; k < w.A.size(); ++k) {
    const M q = add_colwise(w.A[k] * X, w.b[k]);
    const M q1 = add_scalar(q, 1.0);
    for (Index j = 0; j < m; ++j) {
      auto &t = tangents[static_cast<std::size_t>(j)];
      t = hadamard(broadcast_cols(col(w.A[k], j), samples), p) + hadamard(q1, t);
    }
    p = hadamard(q, p) + p;
  }
  ForwardWithJacobian<M> out;
  out.value = add_colwise(w.C * p, w.c);
  for (auto &t : tangents) out.columns.push_back(w.C * t);
  return out;
}

/// Closed-form part of a hybrid vector field, f = f_known + net.
struct KnownDynamics {
  std::function<ad::Mat(const ad::Mat &)> value;              // batched, one state per column
  std::function<DenseMatrix(const StateVector &)> jacobian;  // d f_known / d y
};

class PiNet {
public:
  PiNet() = default;
  PiNet(PiNetShape shape, ParamVector params, std::optional<KnownDynamics> known = std::nullopt);

  const PiNetShape &shape() const { return shape_; }
  const ParamVector &params() const { return params_; }
  void set_params(ParamVector params);

  bool hybrid() const { return known_.has_value(); }
  const KnownDynamics *known() const { return known_ ? &*known_ : nullptr; }

  NetWeights<ad::Mat> weights() const { return unflatten<ad::Mat>(shape_, params_); }

  /// Vector field value; includes the known term in hybrid mode.
  /// Throws NonFiniteValue on NaN/Inf output.
  StateVector forward(const StateVector &x) const;
  ad::Mat forward_batch(const ad::Mat &X) const;
  /// d field / d y at x via forward tangents.
  DenseMatrix jacobian(const StateVector &x) const;

private:
  PiNetShape shape_;
  ParamVector params_;
  std::optional<KnownDynamics> known_;
};

/// Network output without the known term (what extract_polynomial describes).
StateVector pinet_forward(const PiNet &net, const StateVector &x);

/// d net / d y at (y, theta), one reverse sweep per output row.
DenseMatrix jacobian_wrt_state(const PiNet &net, const StateVector &y, const ParamVector &theta);

/// Uniform(-scale, scale) weights and zero biases from a 64-bit seed.
ParamVector init_params(const PiNetShape &shape, std::uint64_t seed, double scale);

// ---------------------------------------------------------------------------
// Symbolic polynomials

using Exponents = std::vector<int>;
using Polynomial = std::map<Exponents, double>;

struct RecoveredModel {
  int variables = 0;
  int degree = 0;
  std::vector<Polynomial> equations;
  std::string provenance;

  StateVector evaluate(const StateVector &x) const;
  /// Coefficient of a monomial, 0 when absent.
  double coefficient(std::size_t equation, const Exponents &exps) const;
};

/// All exponent tuples in m variables with total degree <= D, in graded
/// lexicographic order (constant first).
std::vector<Exponents> monomials_up_to(int variables, int degree);

/// "e1,e2,...,em".
std::string exponent_key(const Exponents &exps);
Exponents parse_exponent_key(const std::string &key, int variables);

/// Human-readable form, e.g. "-10000*y0 + 3.8*y1^2".
std::string to_string(const Polynomial &poly, const std::vector<std::string> &names);

/// Exact polynomial computed by the network (coefficient arithmetic in
/// double precision). Every monomial up to degree D is reported, zeros included.
RecoveredModel extract_polynomial(const PiNet &net);

// File formats.
nlohmann::json recovered_to_json(const RecoveredModel &model);
RecoveredModel recovered_from_json(const nlohmann::json &j, int degree = -1);

struct Checkpoint {
  PiNetShape shape;
  std::uint64_t seed = 0;
  ParamVector params;
};
nlohmann::json checkpoint_to_json(const Checkpoint &ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json &j);

}  // namespace stiffnode
