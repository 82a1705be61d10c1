#include "lsemvae/nets.hpp"

#include <cmath>

namespace lsemvae {

void EncoderConfig::validate() const {
  if (input_length < 8 || input_length % 8 != 0) {
    throw SpecError("input length must be a positive multiple of 8, got " + std::to_string(input_length));
  }
  if (latent_dim < 1) throw SpecError("latent dimension must be >= 1");
  if (kernel != 3 || stride != 2 || padding != 1) {
    throw SpecError("encoder stages are fixed at kernel 3, stride 2, padding 1");
  }
}

void ModelConfig::validate() const {
  encoder.validate();
  if (leads.empty()) throw SpecError("model needs at least one lead");
  std::set<std::string> seen(leads.begin(), leads.end());
  if (seen.size() != leads.size()) throw SpecError("lead names must be unique");
}

namespace {

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string::npos ? s.size() : comma;
    if (end > start) out.push_back(s.substr(start, end - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::size_t meta_size(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw CorruptFile("checkpoint metadata lacks '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw CorruptFile("checkpoint metadata '" + key + "' is not a count: " + it->second);
  }
}

}  // namespace

std::map<std::string, std::string> ModelConfig::to_metadata() const {
  return {
      {"model.leads", join(leads)},
      {"model.input_length", std::to_string(encoder.input_length)},
      {"model.latent_dim", std::to_string(encoder.latent_dim)},
      {"model.channels", std::to_string(encoder.channels[0]) + "," + std::to_string(encoder.channels[1]) + "," +
                             std::to_string(encoder.channels[2])},
      {"model.gate_hidden", std::to_string(gate_hidden)},
      {"model.fc_size", std::to_string(fc_size)},
      {"model.num_classes", std::to_string(num_classes)},
      {"model.with_decoder", with_decoder ? "1" : "0"},
      {"model.with_classifier", with_classifier ? "1" : "0"},
  };
}

ModelConfig ModelConfig::from_metadata(const std::map<std::string, std::string>& meta) {
  ModelConfig c;
  auto leads = meta.find("model.leads");
  if (leads == meta.end()) throw CorruptFile("checkpoint metadata lacks 'model.leads'");
  c.leads = split(leads->second);
  c.encoder.input_length = meta_size(meta, "model.input_length");
  c.encoder.latent_dim = meta_size(meta, "model.latent_dim");
  auto ch = meta.find("model.channels");
  if (ch != meta.end()) {
    const auto parts = split(ch->second);
    if (parts.size() != 3) throw CorruptFile("checkpoint metadata 'model.channels' needs three values");
    for (int i = 0; i < 3; ++i) c.encoder.channels[i] = static_cast<std::size_t>(std::stoull(parts[i]));
  }
  c.gate_hidden = meta_size(meta, "model.gate_hidden");
  c.fc_size = meta_size(meta, "model.fc_size");
  c.num_classes = meta_size(meta, "model.num_classes");
  c.with_decoder = meta_size(meta, "model.with_decoder") != 0;
  c.with_classifier = meta_size(meta, "model.with_classifier") != 0;
  try {
    c.validate();
  } catch (const SpecError& e) {
    throw CorruptFile(std::string("checkpoint describes an invalid model: ") + e.what());
  }
  return c;
}

void GaussianExpert::validate() const {
  if (mu.size() != var.size() || mu.empty()) throw DomainError("expert mean/variance shape mismatch");
  for (std::size_t i = 0; i < var.size(); ++i) {
    if (!(var[i] > 0.0) || !std::isfinite(var[i]) || !std::isfinite(mu[i])) {
      throw DomainError("expert variance must be finite and positive (index " + std::to_string(i) + ")");
    }
  }
}

std::string names::encoder(const std::string& lead, const std::string& part) {
  return "encoder." + lead + "." + part;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_transposed(const std::string& name) { return name.find(".deconv") != std::string::npos; }

}  // namespace

std::size_t weight_fan_in(const std::string& name, const Shape& shape) {
  if (shape.size() == 2) return shape[1];
  if (shape.size() == 3) {
    // A stride-2 transposed convolution feeds each output from in * K / 2 taps.
    return is_transposed(name) ? shape[0] * shape[2] / 2 : shape[1] * shape[2];
  }
  throw ShapeError("no fan-in rule for '" + name + "'");
}

template <typename T>
ParamStore<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto& ec = config.encoder;
  const std::size_t d = ec.latent_dim;
  const std::size_t c1 = ec.channels[0], c2 = ec.channels[1], c3 = ec.channels[2];
  const std::size_t flat = c3 * ec.feature_length();

  ParamStore<T> ps;
  auto layer = [&](const std::string& prefix, Shape w, std::size_t bias_len) {
    ps.add(prefix + ".weight", Tensor<T>(std::move(w)));
    ps.add(prefix + ".bias", Tensor<T>(Shape{bias_len}));
  };
  for (const auto& lead : config.leads) {
    layer(names::encoder(lead, "conv1"), {c1, 1, ec.kernel}, c1);
    layer(names::encoder(lead, "conv2"), {c2, c1, ec.kernel}, c2);
    layer(names::encoder(lead, "conv3"), {c3, c2, ec.kernel}, c3);
    layer(names::encoder(lead, "mu"), {d, flat}, d);
    layer(names::encoder(lead, "logvar"), {d, flat}, d);
  }
  if (config.with_decoder) {
    layer("decoder.fc", {flat, d}, flat);
    layer("decoder.deconv1", {c3, c2, 4}, c2);
    layer("decoder.deconv2", {c2, c1, 4}, c1);
    layer("decoder.deconv3", {c1, 1, 4}, 1);
  }
  layer("gate.fc1", {config.gate_hidden, d}, config.gate_hidden);
  layer("gate.fc2", {1, config.gate_hidden}, 1);
  if (config.with_classifier) {
    layer("classifier.fc1", {config.fc_size, d}, config.fc_size);
    layer("classifier.fc2", {config.num_classes, config.fc_size}, config.num_classes);
  }

  const CounterRng root(seed);
  for (auto& [name, t] : ps.tensors) {
    if (!ends_with(name, ".weight")) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(weight_fan_in(name, t.shape)));
    CounterRng rng = root.fork(fnv1a(name));
    for (auto& v : t.data) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  }
  return ps;
}

template <typename T>
ExpertVars encoder_forward(ParamBinder<T>& p, const std::string& lead, Var signal) {
  auto& t = p.tape();
  Var x = t.reshape(signal, Shape{1, t.size(signal)});
  for (const char* stage : {"conv1", "conv2", "conv3"}) {
    x = t.relu(t.conv1d(x, p(names::encoder(lead, std::string(stage) + ".weight")),
                        p(names::encoder(lead, std::string(stage) + ".bias")), 2, 1));
  }
  Var mu = t.dense(x, p(names::encoder(lead, "mu.weight")), p(names::encoder(lead, "mu.bias")));
  Var logvar = t.dense(x, p(names::encoder(lead, "logvar.weight")), p(names::encoder(lead, "logvar.bias")));
  Var var = t.clamp(t.exp(logvar), static_cast<T>(kEncoderVarMin), static_cast<T>(kEncoderVarMax));
  return {mu, var};
}

template <typename T>
Var decoder_forward(ParamBinder<T>& p, Var z, std::size_t length) {
  if (length < 8 || length % 8 != 0) throw ShapeError("decoder target length must be a multiple of 8");
  auto& t = p.tape();
  const auto& w3 = p.params().at("decoder.deconv1.weight");
  const std::size_t channels = w3.shape[0];
  Var h = t.relu(t.dense(z, p("decoder.fc.weight"), p("decoder.fc.bias")));
  if (t.size(h) != channels * (length / 8)) {
    throw ShapeError("decoder was built for length " + std::to_string(t.size(h) / channels * 8) +
                     ", asked for " + std::to_string(length));
  }
  h = t.reshape(h, Shape{channels, length / 8});
  h = t.relu(t.conv_transpose1d(h, p("decoder.deconv1.weight"), p("decoder.deconv1.bias"), 2, 1));
  h = t.relu(t.conv_transpose1d(h, p("decoder.deconv2.weight"), p("decoder.deconv2.bias"), 2, 1));
  h = t.conv_transpose1d(h, p("decoder.deconv3.weight"), p("decoder.deconv3.bias"), 2, 1);
  return t.reshape(h, Shape{length});
}

template <typename T>
Var gating_forward(ParamBinder<T>& p, std::span<const Var> mus) {
  if (mus.empty()) throw ShapeError("gating needs at least one expert");
  auto& t = p.tape();
  std::vector<Var> logits;
  logits.reserve(mus.size());
  for (Var mu : mus) {
    Var h = t.relu(t.dense(mu, p("gate.fc1.weight"), p("gate.fc1.bias")));
    logits.push_back(t.dense(h, p("gate.fc2.weight"), p("gate.fc2.bias")));
  }
  return t.concat(logits);
}

template <typename T>
Var classifier_forward(ParamBinder<T>& p, Var joint_mu, double dropout, CounterRng* dropout_rng) {
  auto& t = p.tape();
  Var h = t.relu(t.dense(joint_mu, p("classifier.fc1.weight"), p("classifier.fc1.bias")));
  if (dropout_rng && dropout > 0.0) h = t.dropout(h, dropout, *dropout_rng);
  return t.dense(h, p("classifier.fc2.weight"), p("classifier.fc2.bias"));
}

GaussianExpert encoder_forward(const ParamStore<double>& params, const std::string& lead,
                               std::span<const double> signal) {
  Tape<double> tape;
  ParamBinder<double> p(tape, params);
  Var x = tape.constant(Tensor<double>::vector({signal.begin(), signal.end()}));
  auto e = encoder_forward(p, lead, x);
  return {tape.value(e.mu).data, tape.value(e.var).data};
}

std::vector<double> decoder_forward(const ParamStore<double>& params, std::span<const double> z,
                                    std::size_t length) {
  Tape<double> tape;
  ParamBinder<double> p(tape, params);
  Var zv = tape.constant(Tensor<double>::vector({z.begin(), z.end()}));
  return tape.value(decoder_forward(p, zv, length)).data;
}

std::vector<double> gating_forward(const ParamStore<double>& params, const std::vector<std::vector<double>>& mus) {
  Tape<double> tape;
  ParamBinder<double> p(tape, params);
  std::vector<Var> vars;
  for (const auto& m : mus) vars.push_back(tape.constant(Tensor<double>::vector(m)));
  return tape.value(gating_forward(p, std::span<const Var>(vars))).data;
}

std::vector<double> classifier_forward(const ParamStore<double>& params, std::span<const double> joint_mu) {
  Tape<double> tape;
  ParamBinder<double> p(tape, params);
  Var x = tape.constant(Tensor<double>::vector({joint_mu.begin(), joint_mu.end()}));
  return tape.value(classifier_forward(p, x, 0.0, nullptr)).data;
}

#define LSEMVAE_INSTANTIATE(T)                                                                 \
  template ParamStore<T> init_params<T>(const ModelConfig&, std::uint64_t);                    \
  template ExpertVars encoder_forward<T>(ParamBinder<T>&, const std::string&, Var);            \
  template Var decoder_forward<T>(ParamBinder<T>&, Var, std::size_t);                          \
  template Var gating_forward<T>(ParamBinder<T>&, std::span<const Var>);                       \
  template Var classifier_forward<T>(ParamBinder<T>&, Var, double, CounterRng*);

LSEMVAE_INSTANTIATE(float)
LSEMVAE_INSTANTIATE(double)
#undef LSEMVAE_INSTANTIATE

}  // namespace lsemvae
