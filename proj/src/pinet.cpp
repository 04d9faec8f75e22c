#include "stiffnode/pinet.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>

namespace stiffnode {

Index PiNetShape::param_count() const {
  const Index m = inputs, w = width, out = outputs;
  return Index{degree} * (w * m + w) + out * w + out;
}

int PiNetShape::default_width(int inputs, int degree) {
  // C(m + D, D)
  long long count = 1;
  for (int k = 1; k <= degree; ++k) count = count * (inputs + k) / k;
  return static_cast<int>(count);
}

PiNetShape PiNetShape::with_default_width(int inputs, int degree) {
  return PiNetShape{inputs, degree, default_width(inputs, degree), inputs};
}

void PiNetShape::validate() const {
  if (inputs < 1 || degree < 1 || width < 1 || outputs < 1) {
    throw std::invalid_argument("PiNetShape: inputs, degree, width and outputs must all be >= 1");
  }
}

std::vector<ParamSlice> param_layout(const PiNetShape &shape) {
  shape.validate();
  std::vector<ParamSlice> layout;
  Index offset = 0;
  auto add = [&](std::string name, Index rows, Index cols) {
    layout.push_back(ParamSlice{std::move(name), offset, rows, cols});
    offset += rows * cols;
  };
  for (int k = 1; k <= shape.degree; ++k) {
    add("A" + std::to_string(k), shape.width, shape.inputs);
    add("b" + std::to_string(k), shape.width, 1);
  }
  add("C", shape.outputs, shape.width);
  add("c", shape.outputs, 1);
  return layout;
}

ParamVector flatten(const PiNetShape &shape, const NetWeights<ad::Mat> &weights) {
  ParamVector theta(shape.param_count());
  const auto layout = param_layout(shape);
  auto put = [&](const ParamSlice &s, const ad::Mat &m) {
    if (m.rows() != s.rows || m.cols() != s.cols) throw ShapeMismatch("flatten: block " + s.name + " has wrong shape");
    Eigen::Map<ad::Mat>(theta.data() + s.offset, s.rows, s.cols) = m;
  };
  for (int k = 0; k < shape.degree; ++k) {
    put(layout[static_cast<std::size_t>(2 * k)], weights.A[static_cast<std::size_t>(k)]);
    put(layout[static_cast<std::size_t>(2 * k + 1)], weights.b[static_cast<std::size_t>(k)]);
  }
  put(layout[layout.size() - 2], weights.C);
  put(layout[layout.size() - 1], weights.c);
  return theta;
}

PiNet::PiNet(PiNetShape shape, ParamVector params, std::optional<KnownDynamics> known)
    : shape_(shape), known_(std::move(known)) {
  shape_.validate();
  set_params(std::move(params));
}

void PiNet::set_params(ParamVector params) {
  if (params.size() != shape_.param_count()) {
    throw ShapeMismatch("PiNet: expected " + std::to_string(shape_.param_count()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  params_ = std::move(params);
}

ad::Mat PiNet::forward_batch(const ad::Mat &X) const {
  if (X.rows() != shape_.inputs) throw ShapeMismatch("PiNet: input dimension mismatch");
  ad::Mat out = pinet_forward(weights(), X);
  if (known_) out += known_->value(X);
  return out;
}

StateVector PiNet::forward(const StateVector &x) const {
  StateVector out = forward_batch(x);
  if (!out.allFinite()) throw NonFiniteValue("PiNet: non-finite output");
  return out;
}

DenseMatrix PiNet::jacobian(const StateVector &x) const {
  if (x.size() != shape_.inputs) throw ShapeMismatch("PiNet: input dimension mismatch");
  const auto fj = pinet_forward_jacobian(weights(), ad::Mat(x));
  DenseMatrix J(shape_.outputs, shape_.inputs);
  for (Index j = 0; j < shape_.inputs; ++j) J.col(j) = fj.columns[static_cast<std::size_t>(j)].col(0);
  if (known_) J += known_->jacobian(x);
  return J;
}

StateVector pinet_forward(const PiNet &net, const StateVector &x) {
  if (x.size() != net.shape().inputs) throw ShapeMismatch("pinet_forward: input dimension mismatch");
  StateVector out = pinet_forward(net.weights(), ad::Mat(x));
  if (!out.allFinite()) throw NonFiniteValue("pinet_forward: non-finite output");
  return out;
}

DenseMatrix jacobian_wrt_state(const PiNet &net, const StateVector &y, const ParamVector &theta) {
  const auto &shape = net.shape();
  if (y.size() != shape.inputs) throw ShapeMismatch("jacobian_wrt_state: input dimension mismatch");
  ad::Tape tape;
  const ad::Var th = tape.constant(theta);
  const ad::Var x = tape.variable(y);
  const ad::Var out = pinet_forward(unflatten(shape, th), x);
  DenseMatrix J(shape.outputs, shape.inputs);
  for (Index i = 0; i < shape.outputs; ++i) {
    ad::Mat seed = ad::Mat::Zero(shape.outputs, 1);
    seed(i, 0) = 1.0;
    tape.backward(out, seed);
    J.row(i) = tape.adjoint(x).col(0).transpose();
  }
  if (!J.allFinite()) throw NonFiniteValue("jacobian_wrt_state: non-finite entries");
  return J;
}

ParamVector init_params(const PiNetShape &shape, std::uint64_t seed, double scale) {
  if (!(scale >= 0.0)) throw std::invalid_argument("init_params: scale must be non-negative");
  ParamVector theta = ParamVector::Zero(shape.param_count());
  if (scale == 0.0) return theta;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (const auto &s : param_layout(shape)) {
    if (s.name[0] == 'b' || s.name == "c") continue;
    for (Index k = 0; k < s.rows * s.cols; ++k) theta(s.offset + k) = dist(rng);
  }
  return theta;
}

// ---------------------------------------------------------------------------

namespace {

Polynomial add(const Polynomial &a, const Polynomial &b) {
  Polynomial out = a;
  for (const auto &[e, c] : b) out[e] += c;
  return out;
}

Polynomial multiply(const Polynomial &a, const Polynomial &b, int max_degree) {
  Polynomial out;
  for (const auto &[ea, ca] : a) {
    for (const auto &[eb, cb] : b) {
      Exponents e(ea.size());
      int total = 0;
      for (std::size_t i = 0; i < e.size(); ++i) {
        e[i] = ea[i] + eb[i];
        total += e[i];
      }
      if (total > max_degree) throw std::logic_error("extract_polynomial: degree overflow");
      out[e] += ca * cb;
    }
  }
  return out;
}

// Affine form sum_j A(i, j) x_j + b(i) for each row i.
std::vector<Polynomial> affine(const ad::Mat &A, const ad::Mat &b) {
  const auto m = static_cast<std::size_t>(A.cols());
  std::vector<Polynomial> out(static_cast<std::size_t>(A.rows()));
  for (Index i = 0; i < A.rows(); ++i) {
    auto &p = out[static_cast<std::size_t>(i)];
    p[Exponents(m, 0)] = b(i, 0);
    for (Index j = 0; j < A.cols(); ++j) {
      Exponents e(m, 0);
      e[static_cast<std::size_t>(j)] = 1;
      p[e] = A(i, j);
    }
  }
  return out;
}

}  // namespace

StateVector RecoveredModel::evaluate(const StateVector &x) const {
  if (x.size() != variables) throw ShapeMismatch("RecoveredModel: input dimension mismatch");
  StateVector out = StateVector::Zero(static_cast<Index>(equations.size()));
  for (std::size_t k = 0; k < equations.size(); ++k) {
    double acc = 0.0;
    for (const auto &[e, c] : equations[k]) {
      double term = c;
      for (std::size_t i = 0; i < e.size(); ++i) {
        for (int p = 0; p < e[i]; ++p) term *= x(static_cast<Index>(i));
      }
      acc += term;
    }
    out(static_cast<Index>(k)) = acc;
  }
  return out;
}

double RecoveredModel::coefficient(std::size_t equation, const Exponents &exps) const {
  const auto &poly = equations.at(equation);
  const auto it = poly.find(exps);
  return it == poly.end() ? 0.0 : it->second;
}

std::vector<Exponents> monomials_up_to(int variables, int degree) {
  std::vector<Exponents> out;
  Exponents e(static_cast<std::size_t>(variables), 0);
  // Enumerate by total degree, then lexicographically descending in the first variable.
  std::function<void(std::size_t, int)> rec = [&](std::size_t i, int remaining) {
    if (i + 1 == e.size()) {
      e[i] = remaining;
      out.push_back(e);
      return;
    }
    for (int p = remaining; p >= 0; --p) {
      e[i] = p;
      rec(i + 1, remaining - p);
    }
  };
  for (int total = 0; total <= degree; ++total) rec(0, total);
  return out;
}

std::string exponent_key(const Exponents &exps) {
  std::string key;
  for (std::size_t i = 0; i < exps.size(); ++i) {
    if (i) key += ',';
    key += std::to_string(exps[i]);
  }
  return key;
}

Exponents parse_exponent_key(const std::string &key, int variables) {
  Exponents e;
  std::stringstream ss(key);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size() || v < 0) throw std::invalid_argument("bad exponent key '" + key + "'");
    e.push_back(v);
  }
  if (static_cast<int>(e.size()) != variables) {
    throw std::invalid_argument("exponent key '" + key + "' does not have " + std::to_string(variables) + " entries");
  }
  return e;
}

std::string to_string(const Polynomial &poly, const std::vector<std::string> &names) {
  std::ostringstream os;
  os.precision(12);
  bool first = true;
  // Highest degree first, matching the usual printed form.
  for (auto it = poly.rbegin(); it != poly.rend(); ++it) {
    const auto &[e, c] = *it;
    if (!first) os << (c < 0 ? " - " : " + ");
    else if (c < 0) os << "-";
    os << std::abs(c);
    for (std::size_t i = 0; i < e.size(); ++i) {
      if (e[i] == 0) continue;
      os << "*" << names.at(i);
      if (e[i] > 1) os << "^" << e[i];
    }
    first = false;
  }
  return os.str();
}

RecoveredModel extract_polynomial(const PiNet &net) {
  const auto &shape = net.shape();
  const auto w = net.weights();
  std::vector<Polynomial> p = affine(w.A[0], w.b[0]);
  for (int k = 1; k < shape.degree; ++k) {
    const auto q = affine(w.A[static_cast<std::size_t>(k)], w.b[static_cast<std::size_t>(k)]);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = add(multiply(q[i], p[i], k + 1), p[i]);
  }

  RecoveredModel model;
  model.variables = shape.inputs;
  model.degree = shape.degree;
  const auto basis = monomials_up_to(shape.inputs, shape.degree);
  for (Index r = 0; r < shape.outputs; ++r) {
    Polynomial eq;
    for (const auto &e : basis) eq[e] = 0.0;
    eq[Exponents(static_cast<std::size_t>(shape.inputs), 0)] = w.c(r, 0);
    for (Index i = 0; i < shape.width; ++i) {
      const double weight = w.C(r, i);
      for (const auto &[e, c] : p[static_cast<std::size_t>(i)]) eq[e] += weight * c;
    }
    model.equations.push_back(std::move(eq));
  }
  return model;
}

nlohmann::json recovered_to_json(const RecoveredModel &model) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t k = 0; k < model.equations.size(); ++k) {
    nlohmann::json eq = nlohmann::json::object();
    for (const auto &[e, c] : model.equations[k]) eq[exponent_key(e)] = c;
    j[std::to_string(k)] = eq;
  }
  return j;
}

RecoveredModel recovered_from_json(const nlohmann::json &j, int degree) {
  if (!j.is_object() || j.empty()) throw std::invalid_argument("recovered model: expected a non-empty JSON object");
  RecoveredModel model;
  model.equations.resize(j.size());
  int variables = -1;
  int max_degree = 0;
  for (const auto &[key, eq] : j.items()) {
    std::size_t used = 0;
    const int index = std::stoi(key, &used);
    if (used != key.size() || index < 0 || static_cast<std::size_t>(index) >= j.size()) {
      throw std::invalid_argument("recovered model: bad equation index '" + key + "'");
    }
    if (!eq.is_object()) throw std::invalid_argument("recovered model: equation " + key + " is not an object");
    Polynomial poly;
    for (const auto &[mono, coef] : eq.items()) {
      if (variables < 0) variables = static_cast<int>(std::count(mono.begin(), mono.end(), ',')) + 1;
      const Exponents e = parse_exponent_key(mono, variables);
      int total = 0;
      for (int v : e) total += v;
      max_degree = std::max(max_degree, total);
      poly[e] = coef.get<double>();
    }
    model.equations[static_cast<std::size_t>(index)] = std::move(poly);
  }
  model.variables = std::max(variables, 0);
  model.degree = degree >= 0 ? degree : max_degree;
  return model;
}

nlohmann::json checkpoint_to_json(const Checkpoint &ckpt) {
  nlohmann::json j;
  j["shape"] = {{"m", ckpt.shape.inputs}, {"D", ckpt.shape.degree}, {"w", ckpt.shape.width}, {"m_out", ckpt.shape.outputs}};
  j["seed"] = ckpt.seed;
  j["params"] = std::vector<double>(ckpt.params.data(), ckpt.params.data() + ckpt.params.size());
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json &j) {
  Checkpoint ckpt;
  const auto &s = j.at("shape");
  ckpt.shape = PiNetShape{s.at("m").get<int>(), s.at("D").get<int>(), s.at("w").get<int>(), s.at("m_out").get<int>()};
  ckpt.shape.validate();
  ckpt.seed = j.value("seed", std::uint64_t{0});
  const auto params = j.at("params").get<std::vector<double>>();
  if (static_cast<Index>(params.size()) != ckpt.shape.param_count()) {
    throw std::invalid_argument("checkpoint: parameter count does not match shape");
  }
  ckpt.params = Eigen::Map<const ParamVector>(params.data(), static_cast<Index>(params.size()));
  return ckpt;
}

}  // namespace stiffnode
