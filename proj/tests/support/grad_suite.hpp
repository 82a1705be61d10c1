#pragma once

// Gradient-check cases shared by the unit tests and the acceptance runner.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lsemvae/gradcheck.hpp"
#include "lsemvae/nets.hpp"
#include "lsemvae/objectives.hpp"
#include "lsemvae/train.hpp"

namespace lsemvae::testing {

inline Tensor<double> random_tensor(CounterRng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

struct NodeCase {
  std::string name;
  ParamStore<double> params;
  LossBuilder build;
};

// Reduce an op output to a scalar through a fixed random projection so every
// output coordinate carries a distinct weight.
inline Var project(Tape<double>& t, Var y, std::uint64_t seed) {
  CounterRng rng(seed ^ 0xabcdef);
  const Var r = t.constant(random_tensor(rng, t.shape(y)));
  return t.sum(t.mul(y, r));
}

inline std::vector<NodeCase> node_cases(std::uint64_t seed) {
  CounterRng rng(seed);
  std::vector<NodeCase> cases;
  auto unary = [&](const std::string& name, double lo, double hi, std::function<Var(Tape<double>&, Var)> op) {
    NodeCase c{name, {}, {}};
    c.params.add("a", random_tensor(rng, {3, 4}, lo, hi));
    c.build = [op, seed](ParamBinder<double>& p) {
      auto& t = p.tape();
      return project(t, op(t, p("a")), seed);
    };
    cases.push_back(std::move(c));
  };
  auto binary = [&](const std::string& name, double lo, double hi, std::function<Var(Tape<double>&, Var, Var)> op) {
    NodeCase c{name, {}, {}};
    c.params.add("a", random_tensor(rng, {2, 5}));
    c.params.add("b", random_tensor(rng, {2, 5}, lo, hi));
    c.build = [op, seed](ParamBinder<double>& p) {
      auto& t = p.tape();
      return project(t, op(t, p("a"), p("b")), seed);
    };
    cases.push_back(std::move(c));
  };

  binary("add", -1, 1, [](Tape<double>& t, Var a, Var b) { return t.add(a, b); });
  binary("sub", -1, 1, [](Tape<double>& t, Var a, Var b) { return t.sub(a, b); });
  binary("mul", -1, 1, [](Tape<double>& t, Var a, Var b) { return t.mul(a, b); });
  binary("div", 0.5, 2, [](Tape<double>& t, Var a, Var b) { return t.div(a, b); });
  unary("add_scalar", -1, 1, [](Tape<double>& t, Var a) { return t.add_scalar(a, 0.7); });
  unary("mul_scalar", -1, 1, [](Tape<double>& t, Var a) { return t.mul_scalar(a, -1.3); });
  unary("exp", -1, 1, [](Tape<double>& t, Var a) { return t.exp(a); });
  unary("log", 0.2, 3, [](Tape<double>& t, Var a) { return t.log(a); });
  unary("sqrt", 0.2, 3, [](Tape<double>& t, Var a) { return t.sqrt(a); });
  unary("square", -1, 1, [](Tape<double>& t, Var a) { return t.square(a); });
  unary("relu", -1, 1, [](Tape<double>& t, Var a) { return t.relu(a); });
  unary("clamp", -1, 1, [](Tape<double>& t, Var a) { return t.clamp(a, -0.5, 0.5); });
  unary("sum", -1, 1, [](Tape<double>& t, Var a) { return t.mul_scalar(t.sum(t.square(a)), 0.5); });
  unary("mean", -1, 1, [](Tape<double>& t, Var a) { return t.mean(t.exp(a)); });
  unary("logsumexp", -2, 2, [](Tape<double>& t, Var a) { return t.logsumexp(a); });
  unary("softmax", -2, 2, [](Tape<double>& t, Var a) { return t.softmax(t.reshape(a, Shape{12})); });
  unary("slice", -1, 1, [](Tape<double>& t, Var a) { return t.slice(a, 3, 6); });
  unary("reshape", -1, 1, [](Tape<double>& t, Var a) { return t.reshape(a, Shape{4, 3}); });
  unary("dropout", -1, 1, [seed](Tape<double>& t, Var a) {
    CounterRng drop(seed + 17);
    return t.dropout(a, 0.5, drop);
  });

  {
    NodeCase c{"scale", {}, {}};
    c.params.add("a", random_tensor(rng, {6}));
    c.params.add("s", random_tensor(rng, {1}));
    c.build = [seed](ParamBinder<double>& p) {
      auto& t = p.tape();
      return project(t, t.scale(p("a"), p("s")), seed);
    };
    cases.push_back(std::move(c));
  }
  {
    NodeCase c{"concat", {}, {}};
    c.params.add("a", random_tensor(rng, {3}));
    c.params.add("b", random_tensor(rng, {2, 2}));
    c.build = [seed](ParamBinder<double>& p) {
      auto& t = p.tape();
      const Var parts[] = {p("a"), p("b"), p("a")};
      return project(t, t.concat(parts), seed);
    };
    cases.push_back(std::move(c));
  }
  {
    NodeCase c{"dense", {}, {}};
    c.params.add("x", random_tensor(rng, {5}));
    c.params.add("w", random_tensor(rng, {3, 5}));
    c.params.add("b", random_tensor(rng, {3}));
    c.build = [seed](ParamBinder<double>& p) {
      auto& t = p.tape();
      return project(t, t.dense(p("x"), p("w"), p("b")), seed);
    };
    cases.push_back(std::move(c));
  }
  {
    NodeCase c{"conv1d", {}, {}};
    c.params.add("x", random_tensor(rng, {2, 16}));
    c.params.add("w", random_tensor(rng, {3, 2, 3}));
    c.params.add("b", random_tensor(rng, {3}));
    c.build = [seed](ParamBinder<double>& p) {
      auto& t = p.tape();
      return project(t, t.conv1d(p("x"), p("w"), p("b"), 2, 1), seed);
    };
    cases.push_back(std::move(c));
  }
  {
    NodeCase c{"conv_transpose1d", {}, {}};
    c.params.add("x", random_tensor(rng, {3, 8}));
    c.params.add("w", random_tensor(rng, {3, 2, 4}));
    c.params.add("b", random_tensor(rng, {2}));
    c.build = [seed](ParamBinder<double>& p) {
      auto& t = p.tape();
      return project(t, t.conv_transpose1d(p("x"), p("w"), p("b"), 2, 1), seed);
    };
    cases.push_back(std::move(c));
  }
  return cases;
}

inline ModelConfig small_model(std::size_t length = 64, std::size_t d = 8) {
  ModelConfig m;
  m.leads = {"I", "II", "V1"};
  m.encoder.input_length = length;
  m.encoder.latent_dim = d;
  m.gate_hidden = 6;
  m.with_decoder = true;
  return m;
}

/// Central-difference step for the composite loss. The loss is O(100), so at
/// h = 1e-5 rounding alone moves the difference quotient by ~1e-9, which is
/// 1e-4 relative for the smallest gradients; 1e-4 balances that against
/// truncation error.
inline constexpr double kCompositeStep = 1e-4;

/// Full pretraining objective on one random sample: encoders, fusion with a
/// fixed eps, shared decoder, weighted MSE + beta KL + LRA.
struct CompositeCase {
  ModelConfig model;
  ParamStore<double> params;
  LossBuilder build;
};

inline CompositeCase composite_case(std::uint64_t seed, std::size_t length = 64, std::size_t d = 8) {
  CompositeCase c;
  c.model = small_model(length, d);
  c.params = init_params<double>(c.model, seed);
  CounterRng rng = CounterRng(seed).fork(99);
  auto signals = std::make_shared<std::vector<Tensor<double>>>();
  for (std::size_t m = 0; m < c.model.leads.size(); ++m) {
    Tensor<double> x(Shape{1, length});
    for (auto& v : x.data) v = rng.normal();
    signals->push_back(std::move(x));
  }
  auto eps = std::make_shared<Tensor<double>>(Shape{d});
  for (auto& v : eps->data) v = rng.normal();
  LossWeights w;
  w.lambda = LossWeights::for_leads(c.model.leads);
  w.beta = 0.5;
  const auto leads = c.model.leads;
  c.build = [signals, eps, w, leads](ParamBinder<double>& p) {
    auto& t = p.tape();
    std::vector<Var> inputs;
    for (const auto& s : *signals) inputs.push_back(t.constant(s));
    return build_pretrain_loss(p, leads, std::span<const Var>(inputs), w, eps.get()).total;
  };
  return c;
}

}  // namespace lsemvae::testing
