#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "lsemvae/fusion.hpp"
#include "lsemvae/objectives.hpp"
#include "../support/grad_suite.hpp"

using namespace lsemvae;

namespace {

GaussianExpert expert(std::vector<double> mu, std::vector<double> var) { return {std::move(mu), std::move(var)}; }

GaussianExpert random_expert(CounterRng& rng, std::size_t d) {
  GaussianExpert e;
  for (std::size_t i = 0; i < d; ++i) {
    e.mu.push_back(2.0 * rng.normal());
    e.var.push_back(std::exp(rng.normal()));
  }
  return e;
}

ModelConfig twelve_lead(std::size_t length, std::size_t d) {
  ModelConfig m;
  m.leads = kTwelveLeads;
  m.encoder.input_length = length;
  m.encoder.latent_dim = d;
  return m;
}

}  // namespace

// ------------------------------------------------------------------- nets

TEST_CASE("parameter count matches shape algebra") {
  const std::size_t L = 512, d = 64, h = 64;
  const std::size_t flat = 64 * (L / 8);
  const std::size_t encoder = (16 * 1 * 3 + 16) + (32 * 16 * 3 + 32) + (64 * 32 * 3 + 64) + 2 * (d * flat + d);
  const std::size_t decoder = (flat * d + flat) + (64 * 32 * 4 + 32) + (32 * 16 * 4 + 16) + (16 * 1 * 4 + 1);
  const std::size_t gate = (h * d + h) + (h + 1);
  CHECK(init_params<float>(twelve_lead(L, d), 0).num_scalars() == 12 * encoder + decoder + gate);
  CHECK(12 * encoder + decoder + gate == 6667890);
}

TEST_CASE("initialization is deterministic and within the fan-in bound") {
  const auto cfg = twelve_lead(64, 8);
  const auto a = init_params<double>(cfg, 9);
  const auto b = init_params<double>(cfg, 9);
  const auto c = init_params<double>(cfg, 10);
  CHECK(a.tensors.size() == b.tensors.size());
  bool differs = false;
  for (const auto& [name, t] : a.tensors) {
    CHECK(t.data == b.at(name).data);
    differs = differs || t.data != c.at(name).data;
    if (name.ends_with(".bias")) {
      CHECK(std::all_of(t.data.begin(), t.data.end(), [](double v) { return v == 0.0; }));
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(weight_fan_in(name, t.shape)));
    double peak = 0.0;
    for (double v : t.data) peak = std::max(peak, std::abs(v));
    CAPTURE(name);
    CHECK(peak <= bound);
    CHECK(peak > 0.5 * bound);
  }
  CHECK(differs);
}

TEST_CASE("encoder shapes and zero-input closed form") {
  ModelConfig cfg = twelve_lead(64, 8);
  cfg.leads = {"II"};
  auto params = init_params<double>(cfg, 1);
  for (const char* head : {"mu", "logvar"}) params.at(names::encoder("II", std::string(head) + ".weight")).data.assign(8 * 64 * 8, 0.0);
  for (std::size_t i = 0; i < 8; ++i) params.at(names::encoder("II", "mu.bias"))[i] = 0.1 * static_cast<double>(i);
  const std::vector<double> zero(64, 0.0);
  const auto e = encoder_forward(params, "II", zero);
  REQUIRE(e.dim() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(e.mu[i] == doctest::Approx(0.1 * static_cast<double>(i)));
    CHECK(e.var[i] == 1.0);
  }
}

TEST_CASE("encoder variance stays positive and bounded for extreme inputs") {
  ModelConfig cfg = twelve_lead(64, 8);
  cfg.leads = {"I"};
  const auto params = init_params<double>(cfg, 2);
  for (double amp : {1e-6, 1.0, 1e3, 1e6}) {
    std::vector<double> x(64);
    for (std::size_t i = 0; i < 64; ++i) x[i] = amp * std::sin(0.3 * static_cast<double>(i));
    const auto e = encoder_forward(params, "I", x);
    for (double v : e.var) {
      CHECK(v >= kEncoderVarMin);
      CHECK(v <= kEncoderVarMax);
    }
  }
}

TEST_CASE("decoder length and linearity at zero") {
  auto cfg = twelve_lead(64, 8);
  auto params = init_params<double>(cfg, 3);
  const std::vector<double> z(8, 0.5);
  CHECK(decoder_forward(params, z, 64).size() == 64);
  for (auto& [name, t] : params.tensors) {
    if (name.starts_with(names::kDecoderPrefix)) std::fill(t.data.begin(), t.data.end(), 0.0);
  }
  const auto y = decoder_forward(params, std::vector<double>(8, 0.0), 64);
  CHECK(std::all_of(y.begin(), y.end(), [](double v) { return v == 0.0; }));
  CHECK_THROWS_AS(decoder_forward(params, z, 128), ShapeError);
}

TEST_CASE("decoder output is unbounded") {
  const auto params = init_params<double>(twelve_lead(64, 8), 4);
  std::vector<double> z(8, 5.0);
  const auto y = decoder_forward(params, z, 64);
  double peak = 0.0;
  for (double v : y) peak = std::max(peak, std::abs(v));
  CHECK(peak > 1.0);
}

TEST_CASE("gating shares weights across experts") {
  const auto params = init_params<double>(twelve_lead(64, 8), 5);
  CounterRng rng(1);
  std::vector<std::vector<double>> mus;
  for (int k = 0; k < 4; ++k) mus.push_back(random_expert(rng, 8).mu);
  const auto logits = gating_forward(params, mus);
  REQUIRE(logits.size() == 4);
  std::vector<std::vector<double>> swapped = {mus[2], mus[0], mus[3], mus[1]};
  const auto l2 = gating_forward(params, swapped);
  CHECK(l2[0] == logits[2]);
  CHECK(l2[1] == logits[0]);
  CHECK(l2[2] == logits[3]);
  CHECK(l2[3] == logits[1]);
  const auto same = gating_forward(params, {mus[0], mus[0], mus[0]});
  CHECK(same[0] == same[1]);
  CHECK(same[1] == same[2]);
  CHECK(gating_forward(params, {mus[0]}).size() == 1);
}

TEST_CASE("classifier with zero weights returns its biases") {
  auto cfg = twelve_lead(64, 8);
  cfg.with_classifier = true;
  auto params = init_params<double>(cfg, 6);
  params.at("classifier.fc1.weight").data.assign(params.at("classifier.fc1.weight").size(), 0.0);
  params.at("classifier.fc2.weight").data.assign(params.at("classifier.fc2.weight").size(), 0.0);
  params.at("classifier.fc2.bias").data = {0.25, -1.5};
  const auto logits = classifier_forward(params, std::vector<double>(8, 1.0));
  CHECK(logits == std::vector<double>{0.25, -1.5});
}

TEST_CASE("classifier dropout is off in eval mode") {
  auto cfg = twelve_lead(64, 8);
  cfg.with_classifier = true;
  const auto params = init_params<double>(cfg, 7);
  const std::vector<double> x(8, 0.3);
  CHECK(classifier_forward(params, x) == classifier_forward(params, x));
  Tape<double> t;
  ParamBinder<double> b(t, params);
  const Var xv = t.constant(Tensor<double>::vector(x));
  CHECK(t.value(classifier_forward(b, xv, 0.5, nullptr)).data == classifier_forward(params, x));
}

TEST_CASE("shared decoder uses one parameter set for every lead") {
  auto c = lsemvae::testing::composite_case(1);
  Tape<double> t;
  ParamStore<double> grads = c.params.zeros_like();
  ParamBinder<double> b(t, c.params, &grads);
  t.backward(c.build(b));
  std::size_t decoder_tensors = 0;
  for (const auto& [name, g] : c.params.tensors) {
    if (name.starts_with(names::kDecoderPrefix)) ++decoder_tensors;
  }
  CHECK(decoder_tensors == 8);
  // No per-lead decoder parameters exist.
  for (const auto& name : c.params.names()) CHECK(name.find("decoder.I") == std::string::npos);
}

TEST_CASE("model metadata round trip") {
  auto cfg = twelve_lead(512, 64);
  cfg.with_classifier = true;
  cfg.fc_size = 32;
  const auto back = ModelConfig::from_metadata(cfg.to_metadata());
  CHECK(back.leads == cfg.leads);
  CHECK(back.encoder.input_length == 512);
  CHECK(back.encoder.latent_dim == 64);
  CHECK(back.fc_size == 32);
  CHECK(back.with_classifier);
  auto meta = cfg.to_metadata();
  meta.erase("model.latent_dim");
  CHECK_THROWS_AS(ModelConfig::from_metadata(meta), CorruptFile);
}

// ----------------------------------------------------------------- fusion

TEST_CASE("poe closed forms") {
  const auto single = poe_fuse(std::vector<GaussianExpert>{expert({1.5}, {0.3})});
  CHECK(single.mu[0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(single.var[0] == doctest::Approx(0.3).epsilon(1e-15));
  const auto sym = poe_fuse(std::vector<GaussianExpert>{expert({0}, {1}), expert({0}, {1})});
  CHECK(sym.mu[0] == 0.0);
  CHECK(sym.var[0] == doctest::Approx(0.5).epsilon(1e-15));
  const auto ab = poe_fuse(std::vector<GaussianExpert>{expert({1}, {1}), expert({3}, {1})});
  CHECK(ab.mu[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(ab.var[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(poe_fuse(std::vector<GaussianExpert>{expert({0}, {0.0})}), DomainError);
  CHECK_THROWS_AS(poe_fuse(std::vector<GaussianExpert>{expert({0}, {-1.0})}), DomainError);
}

TEST_CASE("poe precision additivity property") {
  CounterRng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.below(12), d = 1 + rng.below(8);
    std::vector<GaussianExpert> es;
    for (std::size_t i = 0; i < k; ++i) es.push_back(random_expert(rng, d));
    const auto p = poe_fuse(es);
    for (std::size_t j = 0; j < d; ++j) {
      double prec = 0.0, num = 0.0;
      for (const auto& e : es) {
        prec += 1.0 / e.var[j];
        num += e.mu[j] / e.var[j];
      }
      CHECK(1.0 / p.var[j] == doctest::Approx(prec).epsilon(1e-12));
      CHECK(p.mu[j] == doctest::Approx(num / prec).epsilon(1e-12));
    }
  }
}

TEST_CASE("gate weights") {
  const std::vector<double> eq(13, 0.7);
  for (double w : gate_weights(eq)) CHECK(w == doctest::Approx(1.0 / 13.0).epsilon(1e-15));
  const std::vector<double> l2 = {std::numbers::ln2, 0.0};
  const auto w = gate_weights(l2);
  CHECK(w[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(w[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CounterRng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> g(1 + rng.below(13)), shifted;
    for (auto& v : g) v = 3.0 * rng.normal();
    const double c = 50.0 * rng.normal();
    for (double v : g) shifted.push_back(v + c);
    const auto a = gate_weights(g), b = gate_weights(shifted);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
      CHECK(a[i] >= 0.0);
      s += a[i];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::max_element(a.begin(), a.end()) - a.begin() == std::max_element(g.begin(), g.end()) - g.begin());
  }
}

TEST_CASE("moe closed forms") {
  const auto one = moe_fuse(std::vector<GaussianExpert>{expert({0.4}, {2.5})}, std::vector<double>{1.0});
  CHECK(one.mu[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(one.var[0] == doctest::Approx(2.5).epsilon(1e-12));
  const std::vector<double> half = {0.5, 0.5};
  const auto a = moe_fuse(std::vector<GaussianExpert>{expert({0}, {1}), expert({2}, {1})}, half);
  CHECK(a.mu[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(a.var[0] == doctest::Approx(2.0).epsilon(1e-15));
  const auto b = moe_fuse(std::vector<GaussianExpert>{expert({0}, {1}), expert({0}, {3})}, half);
  CHECK(b.mu[0] == 0.0);
  CHECK(b.var[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK_THROWS_AS(moe_fuse(std::vector<GaussianExpert>{expert({0}, {1}), expert({0}, {1})}, std::vector<double>{0.6, 0.6}),
                  DomainError);
  // Collapsed experts hit the variance floor instead of zero.
  const auto c = moe_fuse(std::vector<GaussianExpert>{expert({1}, {1e-300}), expert({1}, {1e-300})}, half);
  CHECK(c.var[0] == doctest::Approx(kMixtureVarFloor));
}

TEST_CASE("moe moments match ancestral sampling") {
  CounterRng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t k = 2 + rng.below(4);
    std::vector<GaussianExpert> es;
    for (std::size_t i = 0; i < k; ++i) es.push_back(random_expert(rng, 1));
    std::vector<double> logits(k);
    for (auto& g : logits) g = rng.normal();
    const auto w = gate_weights(logits);
    const auto m = moe_fuse(es, w);
    double s1 = 0.0, s2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      double u = rng.uniform(), acc = 0.0;
      std::size_t c = 0;
      while (c + 1 < k && u >= acc + w[c]) acc += w[c++];
      const double x = es[c].mu[0] + std::sqrt(es[c].var[0]) * rng.normal();
      s1 += x;
      s2 += x * x;
    }
    const double mean = s1 / n, var = s2 / n - mean * mean;
    const double sd = std::sqrt(m.var[0]);
    CHECK(std::abs(mean - m.mu[0]) < 5.0 * sd / std::sqrt(static_cast<double>(n)));
    CHECK(var == doctest::Approx(m.var[0]).epsilon(0.03));
  }
}

TEST_CASE("reparameterization") {
  const auto e = expert({0.0, 1.0}, {4.0, 1.0});
  const auto z0 = reparameterize(e, std::vector<double>{0.0, 0.0});
  CHECK(z0 == e.mu);
  const auto z1 = reparameterize(e, std::vector<double>{1.0, 0.0});
  CHECK(z1[0] == doctest::Approx(2.0));
  CounterRng rng(4);
  const auto wide = expert(std::vector<double>(3, 1.5), std::vector<double>(3, 4.0));
  std::vector<double> acc(3, 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto z = reparameterize(wide, rng);
    for (int j = 0; j < 3; ++j) acc[j] += z[j];
  }
  for (double s : acc) CHECK(std::abs(s / n - 1.5) < 4.0 * 2.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("hime closed forms") {
  const auto params = init_params<double>(twelve_lead(64, 3), 8);
  CounterRng rng(1);
  const auto lead = expert({0.5, -1.0, 2.0}, {0.2, 1.0, 3.0});
  const auto one = hime_forward(params, std::vector<GaussianExpert>{lead}, rng);
  CHECK(one.experts.size() == 2);
  for (int j = 0; j < 3; ++j) {
    CHECK(one.joint.mu[j] == doctest::Approx(lead.mu[j]).epsilon(1e-12));
    CHECK(one.joint.var[j] == doctest::Approx(lead.var[j]).epsilon(1e-12));
  }
  const std::vector<GaussianExpert> same(4, lead);
  const auto four = hime_forward(params, same, rng);
  CHECK(four.weights.size() == 5);
  double s = 0.0;
  for (double w : four.weights) s += w;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  for (int j = 0; j < 3; ++j) {
    CHECK(four.experts.back().var[j] == doctest::Approx(lead.var[j] / 4.0).epsilon(1e-12));
    CHECK(four.joint.mu[j] == doctest::Approx(lead.mu[j]).epsilon(1e-12));
  }
  std::vector<GaussianExpert> twelve(12, lead);
  CHECK(hime_forward(params, twelve, rng).weights.size() == 13);
}

TEST_CASE("hime gradient with frozen eps") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CounterRng rng(seed);
    const auto gate = init_params<double>(twelve_lead(64, 4), seed);
    ParamStore<double> params;
    for (const auto& [name, t] : gate.tensors) {
      if (name.starts_with(names::kGatePrefix)) params.add(name, t);
    }
    for (int k = 0; k < 3; ++k) {
      params.add("mu" + std::to_string(k), lsemvae::testing::random_tensor(rng, {4}));
      params.add("lv" + std::to_string(k), lsemvae::testing::random_tensor(rng, {4}));
    }
    Tensor<double> eps(Shape{4});
    for (auto& v : eps.data) v = rng.normal();
    const auto r = finite_diff_check(
        [&](ParamBinder<double>& p) {
          auto& t = p.tape();
          std::vector<ExpertVars> es;
          for (int k = 0; k < 3; ++k) es.push_back({p("mu" + std::to_string(k)), t.exp(p("lv" + std::to_string(k)))});
          const auto f = hime_forward(p, std::span<const ExpertVars>(es), &eps);
          return t.add(t.sum(t.square(f.z)), kl_standard_normal(t, f.joint));
        },
        params);
    CHECK(r.max_rel_error < 1e-4);
  }
}

// ------------------------------------------------------------- objectives

TEST_CASE("kl closed forms") {
  CHECK(kl_standard_normal(expert({0, 0, 0}, {1, 1, 1})) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::abs(kl_standard_normal(expert({1}, {1})) - 0.5) < 1e-9);
  CHECK(std::abs(kl_standard_normal(expert({0}, {std::numbers::e})) - (std::numbers::e - 2.0) / 2.0) < 1e-9);
  CHECK_THROWS_AS(kl_standard_normal(expert({0}, {0.0})), DomainError);
  CounterRng rng(3);
  for (int trial = 0; trial < 500; ++trial) CHECK(kl_standard_normal(random_expert(rng, 4)) >= 0.0);
}

TEST_CASE("weighted mse") {
  const std::vector<std::vector<double>> x = {{1, 2, 3}, {0, 0}};
  CHECK(weighted_mse(x, x, std::vector<double>{1, 2}) == 0.0);
  CHECK(weighted_mse({{1, 1}}, {{0, 0}}, std::vector<double>{2.0}) == doctest::Approx(2.0));
  const std::vector<std::vector<double>> r = {{0.5, 2.0, 1.0}, {1.0, -1.0}};
  const double base = weighted_mse(r, x, std::vector<double>{1, 3});
  CHECK(weighted_mse(r, x, std::vector<double>{2, 6}) == doctest::Approx(2.0 * base).epsilon(1e-15));
  CHECK_THROWS_AS(weighted_mse({{1, 2}}, {{1}}, std::vector<double>{1}), ShapeError);
}

TEST_CASE("lra and total loss") {
  CHECK(lra_loss({{1.0}, {1.0}}, std::vector<double>{1.0}, 0.1) == 0.0);
  CHECK(std::abs(lra_loss({{0.0}, {2.0}}, std::vector<double>{1.0}, 0.1) - 0.1) < 1e-9);
  CHECK(lra_loss({{0.0}, {2.0}}, std::vector<double>{1.0}, 0.3) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(total_pretrain_loss(1.0, 0.5, 0.1, 0.0) == doctest::Approx(1.1).epsilon(1e-15));
  CHECK(std::abs(total_pretrain_loss(1.0, 0.5, 0.1, 1.0) - 1.6) < 1e-12);
  CHECK(total_pretrain_loss(0, 0, 0, 0.7) == 0.0);
  double prev = -1.0;
  for (double beta = 0.0; beta <= 1.0; beta += 0.1) {
    const double v = total_pretrain_loss(1.0, 0.4, 0.2, beta);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("cross entropy") {
  CHECK(std::abs(cross_entropy(std::vector<double>{0, 0}, 0) - std::numbers::ln2) < 1e-9);
  CHECK(cross_entropy(std::vector<double>{10, -10}, 0) == doctest::Approx(2.0611536e-9).epsilon(1e-6));
  CHECK(cross_entropy(std::vector<double>{0.3, -1.2}, 1) == cross_entropy(std::vector<double>{-1.2, 0.3}, 0));
  CHECK_THROWS_AS(cross_entropy(std::vector<double>{0, 0}, 2), DomainError);
  CHECK_THROWS_AS(cross_entropy(std::vector<double>{0, 0}, -1), DomainError);
}

TEST_CASE("loss weights") {
  CHECK(LossWeights::for_leads(kTwelveLeads) == kTwelveLeadWeights);
  CHECK(LossWeights::for_leads({"II", "X"}) == std::vector<double>{10, 1});
  LossWeights w;
  w.beta = 1.5;
  CHECK_THROWS_AS(w.validate(12), SpecError);
}
